"""Command-line entry point: generate fields, train, upscale, evaluate, bench.

Configuration is a flat ``key=value`` text file layered over an optional
named preset; ``--seed``, ``--workers`` and ``--out`` flags override both.
Every command writes the fully resolved configuration next to its outputs,
and identical configurations reproduce data outputs byte for byte (timing
tables excluded).
"""

import argparse
import csv
import os
import sys
import time
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

import numpy as np

from . import fileio, kle
from .grid import GridSpec, partition
from .network import default_spec
from .pipeline import (
    benchmark_timing,
    evaluate,
    upscale_numerical,
    upscale_surrogate,
    velocity_labels,
    write_scatter_csv,
    write_timing_csv,
)
from .solver import PeriodicDrive, solve_patch
from .training import TrainConfig, train

__all__ = ["RunConfig", "main", "parse_config_text", "resolve_config"]


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run parameters; every key is settable in config text."""

    # grid and log-conductivity covariance
    nx: int = 100
    ny: int = 100
    nz: int = 1
    dx: float = 1.0
    dy: float = 1.0
    dz: float = 1.0
    mean_log_k: float = 0.0
    variance: float = 1.0
    corr_x: float = 20.0
    corr_y: float = 20.0
    corr_z: float = 20.0
    energy: float = 0.9
    aniso_y: float = 1.0
    aniso_z: float = 1.0
    # upscaling
    ratio: int = 10
    drive_x: float = 1.0
    drive_y: float = 0.0
    drive_z: float = 0.0
    method: str = "numerical"
    # training
    epochs: int = 1000
    learning_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 100
    weight_data: float = 1.0
    weight_ge: float = 1.0
    weight_bc_h: float = 1.0
    weight_bc_v: float = 1.0
    n_labeled: int = 0
    n_residual: int = 0  # 0 = whole pool
    n_train_fields: int = 5
    augment: bool = False
    dtype: str = "float64"
    chunk_size: int = 125
    # run control
    n_realizations: int = 100
    seed: int = 0
    workers: int = 0  # 0 = all available cores
    fields_dir: str = ""
    checkpoint: str = ""
    out: str = "."

    @property
    def ndim(self) -> int:
        return 2 if self.nz == 1 else 3

    @property
    def drive_offsets(self) -> tuple:
        all3 = (self.drive_x, self.drive_y, self.drive_z)
        return all3[: self.ndim]

    @property
    def in_channels(self) -> int:
        return 1 if self.aniso_y == 1.0 and self.aniso_z == 1.0 else self.ndim

    @property
    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)

    def validate(self) -> "RunConfig":
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("cell counts must be >= 1")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ValueError("spacings must be > 0")
        if self.variance <= 0:
            raise ValueError(f"variance must be > 0, got {self.variance!r}")
        active_corr = (self.corr_x, self.corr_y, self.corr_z)[: self.ndim]
        if min(active_corr) <= 0:
            raise ValueError(f"correlation lengths must be > 0, got {active_corr}")
        if not 0 < self.energy <= 1:
            raise ValueError(f"energy must be in (0, 1], got {self.energy!r}")
        if min(self.aniso_y, self.aniso_z) <= 0:
            raise ValueError("anisotropy ratios must be > 0")
        if self.ratio < 1:
            raise ValueError(f"ratio must be >= 1, got {self.ratio}")
        counts = (self.nx, self.ny, self.nz)[: self.ndim]
        for n, name in zip(counts, "xyz"):
            if n % self.ratio:
                raise ValueError(f"{name}-dimension {n} is not divisible by "
                                 f"ratio {self.ratio}")
        if not any(v != 0 for v in self.drive_offsets):
            raise ValueError("drive offsets must not all be zero")
        if self.method not in ("numerical", "surrogate", "both"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.epochs < 0 or self.decay_every < 1:
            raise ValueError("epochs must be >= 0 and decay_every >= 1")
        if self.learning_rate <= 0 or not 0 < self.decay_factor <= 1:
            raise ValueError("need learning_rate > 0 and decay_factor in (0, 1]")
        weights = (self.weight_data, self.weight_ge, self.weight_bc_h,
                   self.weight_bc_v)
        if min(weights) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.n_labeled < 0 or self.n_residual < 0 or self.n_train_fields < 1:
            raise ValueError("pool sizes must be non-negative "
                             "(n_train_fields >= 1)")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.chunk_size < 1 or self.n_realizations < 1:
            raise ValueError("chunk_size and n_realizations must be >= 1")
        if self.seed < 0 or self.workers < 0:
            raise ValueError("seed and workers must be >= 0")
        return self


PRESETS = {
    # square isotropic domain, label-free training on 5 partitioned fields
    "2d-base": dict(
        nx=100, ny=100, nz=1, dx=1.0, dy=1.0, variance=1.0, corr_x=20.0,
        corr_y=20.0, energy=0.9, ratio=10, epochs=1000, learning_rate=1e-3,
        decay_factor=0.9, decay_every=100, n_labeled=0, n_train_fields=5,
    ),
    "2d-ratio5": dict(ratio=5),
    "2d-ratio20": dict(ratio=20),
    # regular 3D block model, small physics weights, label-free
    "3d-iso": dict(
        nx=60, ny=220, nz=35, dx=20.0, dy=20.0, dz=20.0, variance=2.0,
        corr_x=500.0, corr_y=1000.0, corr_z=100.0, energy=0.9, ratio=5,
        epochs=300, decay_every=10, weight_ge=0.001, weight_bc_v=0.001,
        n_labeled=0, n_train_fields=10,
    ),
    # directional conductivity ratios, mixed labeled + residual training
    "3d-aniso": dict(
        nx=180, ny=250, nz=60, dx=20.0, dy=20.0, dz=20.0, variance=2.0,
        corr_x=1440.0, corr_y=1000.0, corr_z=180.0, energy=0.9, ratio=5,
        aniso_y=0.8, aniso_z=0.3, epochs=200, decay_every=10,
        weight_ge=0.001, weight_bc_v=0.001, n_labeled=3000, n_train_fields=1,
        augment=True,
    ),
}
PRESETS["2d-ratio5"] = {**PRESETS["2d-base"], "ratio": 5}
PRESETS["2d-ratio20"] = {**PRESETS["2d-base"], "ratio": 20}

_FIELD_TYPES = {f.name: f.type for f in dataclass_fields(RunConfig)}


def _parse_value(key: str, text: str):
    kind = _FIELD_TYPES[key]
    if kind is bool:
        if text.lower() in ("true", "false"):
            return text.lower() == "true"
        raise ValueError(f"{key}: expected true or false, got {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


def parse_config_text(text: str) -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        if key not in _FIELD_TYPES:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, value)
    return values


def config_to_text(cfg: RunConfig) -> str:
    lines = []
    for f in dataclass_fields(RunConfig):
        value = getattr(cfg, f.name)
        if f.type is bool:
            text = "true" if value else "false"
        elif f.type is float:
            text = repr(float(value))
        else:
            text = str(value)
        lines.append(f"{f.name}={text}")
    return "\n".join(lines) + "\n"


def resolve_config(preset: str = "", config_path: str = "",
                   overrides: dict | None = None) -> RunConfig:
    """Layer defaults < preset < config file < explicit flag overrides."""
    values = {}
    if preset:
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from "
                             f"{sorted(PRESETS)}")
        values.update(PRESETS[preset])
    if config_path:
        values.update(parse_config_text(Path(config_path).read_text()))
    values.update(overrides or {})
    return RunConfig(**values).validate()


def _log(message: str) -> None:
    print(message, file=sys.stderr, flush=True)


def _grid(cfg: RunConfig) -> GridSpec:
    return GridSpec(cfg.nx, cfg.ny, cfg.nz, cfg.dx, cfg.dy, cfg.dz)


def _covariance(cfg: RunConfig) -> kle.CovarianceModel:
    corr = (cfg.corr_x, cfg.corr_y, cfg.corr_z)[: cfg.ndim]
    return kle.CovarianceModel(cfg.mean_log_k, cfg.variance, corr)


def _decompose(cfg: RunConfig) -> kle.KLEBasis:
    return kle.decompose(_covariance(cfg), _grid(cfg), cfg.energy)


def _realization(cfg: RunConfig, basis: kle.KLEBasis, seed: int):
    y = kle.sample(basis, _covariance(cfg), kle.draw_xi(basis, seed))
    return kle.to_conductivity(y, (1.0, cfg.aniso_y, cfg.aniso_z))


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.cfg").write_text(config_to_text(cfg))
    return out


def _load_fields(cfg: RunConfig):
    """Realizations from fields_dir, else seeded generation."""
    if cfg.fields_dir:
        paths = sorted(Path(cfg.fields_dir).glob("field_*.upf"))
        if not paths:
            raise FileNotFoundError(f"no field_*.upf files in {cfg.fields_dir}")
        return [fileio.load_conductivity(p) for p in paths]
    basis = _decompose(cfg)
    return [_realization(cfg, basis, cfg.seed + i)
            for i in range(cfg.n_realizations)]


def _surrogate_parts(cfg: RunConfig):
    if not cfg.checkpoint:
        raise ValueError("surrogate method requires checkpoint=<path>")
    spec, params = fileio.load_checkpoint(cfg.checkpoint)
    return params, spec


def _method_list(cfg: RunConfig):
    return ("numerical", "surrogate") if cfg.method == "both" else (cfg.method,)


def cmd_generate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    basis = _decompose(cfg)
    _log(f"decomposed covariance: {basis.n_modes} modes capture "
         f"{basis.energy_fraction:.4f} of the variance")
    rows = []
    for i in range(cfg.n_realizations):
        seed = cfg.seed + i
        name = f"field_{i:04d}.upf"
        fileio.save_conductivity(_realization(cfg, basis, seed), out / name)
        rows.append([i, name, seed, basis.n_modes,
                     repr(float(basis.energy_fraction))])
        if (i + 1) % 50 == 0 or i + 1 == cfg.n_realizations:
            _log(f"wrote {i + 1}/{cfg.n_realizations} realizations")
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "file", "seed", "modes", "energy_fraction"])
        writer.writerows(rows)
    return 0


def _train_pools(cfg: RunConfig):
    """Residual patch pool and numerically labeled pairs per the config."""
    if cfg.fields_dir:
        fields = _load_fields(cfg)
    else:
        basis = _decompose(cfg)
        fields = [_realization(cfg, basis, cfg.seed + i)
                  for i in range(cfg.n_train_fields)]
    pool = [p.field for f in fields for p in partition(f, cfg.ratio)]
    _log(f"residual pool: {len(pool)} patches from {len(fields)} fields")
    labeled = []
    if cfg.n_labeled > 0:
        drive = PeriodicDrive(cfg.drive_offsets)
        for f in pool[: cfg.n_labeled]:
            sol = solve_patch(f, drive)
            view = f.grid.shape3 if f.grid.ndim == 3 else f.grid.shape3[1:]
            labeled.append((f, sol.heads.values.reshape(view)))
        _log(f"labeled pool: solved {len(labeled)} patches")
    return pool, labeled


def _train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(
        epochs=cfg.epochs,
        learning_rate=cfg.learning_rate,
        decay_factor=cfg.decay_factor,
        decay_every=cfg.decay_every,
        weights=(cfg.weight_data, cfg.weight_ge, cfg.weight_bc_h,
                 cfg.weight_bc_v),
        n_labeled=cfg.n_labeled,
        n_residual=cfg.n_residual or None,
        drive=PeriodicDrive(cfg.drive_offsets),
        seed=cfg.seed,
        chunk_size=cfg.chunk_size,
        dtype=cfg.dtype,
        augment_axes=cfg.augment,
    )


def cmd_train(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    pool, labeled = _train_pools(cfg)
    spec = default_spec(cfg.ndim, cfg.ratio, in_channels=cfg.in_channels)
    start = time.perf_counter()
    params, history = train(spec, _train_config(cfg), pool, labeled)
    seconds = time.perf_counter() - start
    fileio.save_checkpoint(spec, params, out / "network.ck")
    with open(out / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "l_data", "l_ge", "l_bc_h", "l_bc_v"])
        for epoch, loss in enumerate(history):
            writer.writerow([epoch] + [repr(float(v)) for v in
                                       (loss.total, loss.l_data, loss.l_ge,
                                        loss.l_bc_h, loss.l_bc_v)])
    if history:
        _log(f"trained {cfg.epochs} epochs in {seconds:.1f} s "
             f"(final loss {history[-1].total:.6g})")
    else:
        _log("epochs=0: wrote the seeded initialization")
    return 0


def cmd_upscale(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    fields = _load_fields(cfg)
    methods = _method_list(cfg)
    params = spec = None
    if "surrogate" in methods:
        params, spec = _surrogate_parts(cfg)
    for i, field in enumerate(fields):
        for method in methods:
            if method == "numerical":
                model = upscale_numerical(field, cfg.ratio,
                                          workers=cfg.effective_workers)
            else:
                model = upscale_surrogate(field, cfg.ratio, params, spec)
            fileio.save_coarse_model(model, out / f"coarse_{method}_{i:04d}.upf")
        _log(f"upscaled realization {i + 1}/{len(fields)}")
    return 0


def cmd_evaluate(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    fields = _load_fields(cfg)
    methods = _method_list(cfg)
    params = spec = None
    if "surrogate" in methods:
        params, spec = _surrogate_parts(cfg)
    quantities = ["head"] + velocity_labels(cfg.ndim)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["realization", "method", "quantity", "r_squared"])
        for i, field in enumerate(fields):
            report = evaluate(field, cfg.ratio, methods=methods, params=params,
                              spec=spec)
            for method in methods:
                scores = report.methods[method].scores
                for q in quantities:
                    writer.writerow([i, method, q, repr(float(scores[q]))])
                write_scatter_csv(report, method,
                                  out / f"scatter_{method}_{i:04d}.csv")
            for q, score in report.tensor_scores.items():
                writer.writerow([i, "surrogate_vs_numerical", q,
                                 repr(float(score))])
            _log(f"evaluated realization {i + 1}/{len(fields)}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    out = _prepare_out(cfg)
    fields = _load_fields(cfg)
    methods = ["fine"] + list(_method_list(cfg))
    params = spec = None
    train_seconds = None
    if "surrogate" in methods:
        if cfg.checkpoint:
            params, spec = _surrogate_parts(cfg)
        else:
            _log("no checkpoint given: training the surrogate first")
            pool, labeled = _train_pools(cfg)
            spec = default_spec(cfg.ndim, cfg.ratio, in_channels=cfg.in_channels)
            start = time.perf_counter()
            params, _ = train(spec, _train_config(cfg), pool, labeled)
            train_seconds = time.perf_counter() - start
    rows = benchmark_timing(fields, cfg.ratio, methods=tuple(methods),
                            params=params, spec=spec,
                            train_seconds=train_seconds,
                            workers=cfg.effective_workers)
    write_timing_csv(rows, out / "timing.csv")
    for row in rows:
        _log(f"{row.method}: upscale "
             f"{'-' if row.upscale_seconds is None else f'{row.upscale_seconds:.2f}'} s, "
             f"solve {row.solve_seconds:.2f} s over {row.realizations} "
             f"realizations")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "upscale": cmd_upscale,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="upflow",
        description="Upscale fine-scale conductivity fields to coarse "
                    "equivalent-conductivity tensors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("generate", "draw seeded conductivity realizations"),
        ("train", "fit the patch-solver surrogate network"),
        ("upscale", "compute coarse tensors per realization"),
        ("evaluate", "score coarse solutions against fine-scale benchmarks"),
        ("bench", "time fine solves against the upscaling routes"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="", help="key=value config file")
        p.add_argument("--preset", default="", choices=sorted(PRESETS),
                       help="named parameter set to start from")
        p.add_argument("--seed", type=int, default=None, help="base RNG seed")
        p.add_argument("--workers", type=int, default=None,
                       help="process count for patch solves (0 = all cores)")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.out is not None:
        overrides["out"] = args.out
    try:
        cfg = resolve_config(args.preset, args.config, overrides)
        return COMMANDS[args.command](cfg)
    except Exception as exc:  # surface every failure as a clean exit code
        _log(f"error: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
