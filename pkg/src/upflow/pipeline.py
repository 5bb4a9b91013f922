"""End-to-end workflows: global solves, upscaling, benchmarks, reports.

A fine-scale reference solve feeds block-averaged benchmarks; numerical or
surrogate upscaling produces coarse models whose global solutions are
scored against those benchmarks with R-squared per quantity.  Timing rows
cover the efficiency comparison between the two upscaling routes.
"""

from __future__ import annotations

import csv
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from upflow.grid import (
    CoarseModel,
    ConductivityField,
    GridSpec,
    ScalarField,
    block_average,
    coarse_grid_spec,
    partition,
)
from upflow.network import NetworkSpec
from upflow.solver import (
    MAX_DIRECT_SIZE,
    ConvergenceError,
    equivalent_tensor,
    tensor_from_heads,
)
from upflow.training import predict_head_batch

FACE_NAMES = ("x_low", "x_high", "y_low", "y_high", "z_low", "z_high")


@dataclass(frozen=True)
class FaceCondition:
    """One boundary face: prescribed head or prescribed outward flux.

    Flux is the Darcy velocity through the face along the outward normal,
    so 0 is no-flow and positive values push water out of the domain.
    """

    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in ("head", "flux"):
            raise ValueError(f"face condition kind must be head or flux, got {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError("face condition value must be finite")


@dataclass(frozen=True)
class GlobalBoundarySpec:
    """Per-face conditions of a global (non-periodic) solve."""

    conditions: dict

    def __post_init__(self):
        for name in self.conditions:
            if name not in FACE_NAMES:
                raise ValueError(f"unknown face {name!r}")
        if not any(c.kind == "head" for c in self.conditions.values()):
            raise ValueError("at least one face needs a prescribed head")

    def condition(self, axis: int, side: int) -> FaceCondition:
        name = FACE_NAMES[2 * axis + side]
        if name not in self.conditions:
            raise ValueError(f"no condition given for face {name}")
        return self.conditions[name]

    def validate(self, ndim: int):
        want = FACE_NAMES[: 2 * ndim]
        missing = [n for n in want if n not in self.conditions]
        extra = [n for n in self.conditions if n not in want]
        if missing or extra:
            raise ValueError(f"faces for a {ndim}D grid: missing {missing}, extra {extra}")


def default_bc(ndim: int) -> GlobalBoundarySpec:
    """Head 1 on the low-x face, 0 on the high-x face, no-flow elsewhere."""
    conditions = {
        "x_low": FaceCondition("head", 1.0),
        "x_high": FaceCondition("head", 0.0),
        "y_low": FaceCondition("flux", 0.0),
        "y_high": FaceCondition("flux", 0.0),
    }
    if ndim == 3:
        conditions["z_low"] = FaceCondition("flux", 0.0)
        conditions["z_high"] = FaceCondition("flux", 0.0)
    return GlobalBoundarySpec(conditions)


@dataclass(frozen=True)
class GlobalSolution:
    """Heads and cell-centered velocities of one global solve."""

    heads: ScalarField
    velocities: tuple

    @property
    def grid(self) -> GridSpec:
        return self.heads.grid


def _assemble_global(field: ConductivityField, bc: GlobalBoundarySpec):
    """Flux-balance system of the bounded domain (TPFA, mixed BCs)."""
    grid = field.grid
    n = grid.n_cells
    view = grid.shape3
    ids = np.arange(n).reshape(view)
    diag = np.zeros(n)
    rhs = np.zeros(n)
    rows, cols, vals = [], [], []
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        k3 = field.component_3d(axis)
        area = grid.face_area(axis)
        delta = grid.spacings[axis]
        size = grid.counts[axis]
        sel_l = [slice(None)] * 3
        sel_l[vd] = slice(None, -1)
        sel_r = [slice(None)] * 3
        sel_r[vd] = slice(1, None)
        k_l = k3[tuple(sel_l)].ravel()
        k_r = k3[tuple(sel_r)].ravel()
        t = (2.0 * area / (1.0 / k_l + 1.0 / k_r)) / delta
        left = ids[tuple(sel_l)].ravel()
        right = ids[tuple(sel_r)].ravel()
        np.add.at(diag, left, t)
        np.add.at(diag, right, t)
        rows.extend((left, right))
        cols.extend((right, left))
        vals.extend((-t, -t))
        for side, pos in ((0, 0), (1, size - 1)):
            cond = bc.condition(axis, side)
            sel_b = [slice(None)] * 3
            sel_b[vd] = pos
            cells = ids[tuple(sel_b)].ravel()
            if cond.kind == "head":
                t_half = 2.0 * area * k3[tuple(sel_b)].ravel() / delta
                np.add.at(diag, cells, t_half)
                np.add.at(rhs, cells, t_half * cond.value)
            else:
                np.add.at(rhs, cells, -cond.value * area)
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    matrix = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n),
    ).tocsr()
    return matrix, rhs


def _cell_velocities(field: ConductivityField, heads: np.ndarray,
                     bc: GlobalBoundarySpec) -> tuple:
    """Per-axis cell velocities: mean of the two face velocities."""
    grid = field.grid
    h3 = heads.reshape(grid.shape3)
    out = []
    for axis in range(grid.ndim):
        vd = grid.view_dim(axis)
        k3 = field.component_3d(axis)
        delta = grid.spacings[axis]
        hm = np.moveaxis(h3, vd, -1)
        km = np.moveaxis(k3, vd, -1)
        harm = 2.0 / (1.0 / km[..., :-1] + 1.0 / km[..., 1:])
        v_int = -harm * (hm[..., 1:] - hm[..., :-1]) / delta
        v_low = np.empty_like(hm)
        v_high = np.empty_like(hm)
        v_low[..., 1:] = v_int
        v_high[..., :-1] = v_int
        for side, target in ((0, v_low), (1, v_high)):
            cond = bc.condition(axis, side)
            pos = 0 if side == 0 else -1
            if cond.kind == "head":
                sign = 1.0 if side == 0 else -1.0
                target[..., pos] = sign * 2.0 * km[..., pos] * (
                    cond.value - hm[..., pos]
                ) / delta
            else:
                target[..., pos] = -cond.value if side == 0 else cond.value
        v_cell = 0.5 * (v_low + v_high)
        out.append(np.moveaxis(v_cell, -1, vd).reshape(-1))
    return tuple(out)


def fine_solve(field: ConductivityField, bc: GlobalBoundarySpec | None = None,
               max_direct_size: int = 200_000, tol: float = 1e-12) -> GlobalSolution:
    """TPFA solve of the bounded flow problem on the field's own grid.

    Dirichlet faces use half-cell transmissibilities; Neumann faces add the
    prescribed flux.  Large systems fall back to conjugate gradients.
    """
    grid = field.grid
    if bc is None:
        bc = default_bc(grid.ndim)
    bc.validate(grid.ndim)
    matrix, rhs = _assemble_global(field, bc)
    if grid.n_cells <= max_direct_size:
        heads = spla.splu(matrix.tocsc()).solve(rhs)
    else:
        precond = spla.LinearOperator(
            matrix.shape, lambda v: v / matrix.diagonal()
        )
        heads, info = spla.cg(matrix, rhs, rtol=tol, atol=0.0, M=precond,
                              maxiter=40 * grid.n_cells)
        if info != 0:
            raise ConvergenceError(f"global solve failed to converge (info={info})")
    return GlobalSolution(ScalarField(grid, heads), _cell_velocities(field, heads, bc))


def coarse_solve(model: CoarseModel, bc: GlobalBoundarySpec | None = None) -> GlobalSolution:
    """Global solve on the coarse grid using the diagonal tensor components.

    Off-diagonal components stay in the model for reporting; the two-point
    scheme cannot discretize them.
    """
    return fine_solve(model.diagonal_field(), bc)


def upscale_numerical(field: ConductivityField, ratio, delta_h: float = 1.0,
                      workers: int = 1) -> CoarseModel:
    """Equivalent tensor of every coarse block via periodic patch solves."""
    patches = [p.field for p in partition(field, ratio)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, len(patches) // (4 * workers))
            tensors = list(pool.map(equivalent_tensor, patches,
                                    [delta_h] * len(patches), chunksize=chunk))
    else:
        tensors = [equivalent_tensor(p, delta_h) for p in patches]
    return CoarseModel(coarse_grid_spec(field.grid, ratio), np.stack(tensors))


def upscale_surrogate(field: ConductivityField, ratio, params, spec: NetworkSpec,
                      delta_h: float = 1.0, use_log_input: bool = True,
                      chunk_size: int = 250) -> CoarseModel:
    """Numerical-pipeline twin with network head predictions per patch.

    Tensor extraction reuses the exact face-velocity and averaging code of
    the numerical route, so the only difference is where heads come from.
    """
    patches = [p.field for p in partition(field, ratio)]
    pgrid = patches[0].grid
    pshape = pgrid.shape3 if pgrid.ndim == 3 else pgrid.shape3[1:]
    if spec.ndim != pgrid.ndim or tuple(spec.input_shape) != pshape:
        raise ValueError(
            f"network expects {spec.ndim}D {spec.input_shape} patches, "
            f"ratio gives {pgrid.ndim}D {pshape}"
        )
    heads_by_axis = [
        predict_head_batch(params, spec, patches, axis, delta_h,
                           use_log_input=use_log_input, chunk_size=chunk_size)
        for axis in range(pgrid.ndim)
    ]
    tensors = [
        tensor_from_heads(p, [h[i].reshape(-1) for h in heads_by_axis], delta_h)
        for i, p in enumerate(patches)
    ]
    return CoarseModel(coarse_grid_spec(field.grid, ratio), np.stack(tensors))


def r_squared(y: np.ndarray, y_hat: np.ndarray) -> float:
    """Coefficient of determination; 1 is exact, can be arbitrarily negative.

    A constant benchmark scores 1 when matched exactly and -inf otherwise.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {y_hat.shape}")
    ss_res = float(((y - y_hat) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -np.inf
    return 1.0 - ss_res / ss_tot


def velocity_labels(ndim: int) -> list:
    return ["v_x", "v_y", "v_z"][:ndim]


def tensor_labels(ndim: int) -> list:
    return ["k_xx", "k_yy", "k_zz"][:ndim]


@dataclass(frozen=True)
class MethodResult:
    """One upscaling method's coarse model, solution, scores, and timings."""

    name: str
    model: CoarseModel
    solution: GlobalSolution
    scores: dict
    upscale_seconds: float
    solve_seconds: float


@dataclass(frozen=True)
class EvaluationReport:
    """Benchmarks, per-method results, and cross-method tensor scores."""

    ratio: tuple
    benchmark: dict
    methods: dict
    tensor_scores: dict = dc_field(default_factory=dict)
    fine_seconds: float = 0.0

    def __post_init__(self):
        n = len(self.benchmark["head"])
        for res in self.methods.values():
            if res.model.coarse_grid.n_cells != n:
                raise ValueError("scatter pair count must equal coarse cell count")
            for score in res.scores.values():
                if score > 1.0 + 1e-12:
                    raise ValueError(f"R^2 above 1: {score}")

    def scatter(self, method: str, quantity: str):
        """(benchmark, predicted) arrays over coarse cells for one quantity."""
        res = self.methods[method]
        if quantity == "head":
            return self.benchmark["head"], res.solution.heads.values
        axis = velocity_labels(res.model.coarse_grid.ndim).index(quantity)
        return self.benchmark[quantity], res.solution.velocities[axis]


def evaluate(field: ConductivityField, ratio, bc: GlobalBoundarySpec | None = None,
             methods=("numerical",), params=None, spec: NetworkSpec | None = None,
             delta_h: float = 1.0, use_log_input: bool = True) -> EvaluationReport:
    """Score upscaling methods against block-averaged fine-scale benchmarks."""
    grid = field.grid
    if bc is None:
        bc = default_bc(grid.ndim)
    t0 = time.perf_counter()
    fine = fine_solve(field, bc)
    fine_seconds = time.perf_counter() - t0
    bench = {"head": block_average(fine.heads, ratio).values}
    for axis, label in enumerate(velocity_labels(grid.ndim)):
        vel = ScalarField(grid, fine.velocities[axis])
        bench[label] = block_average(vel, ratio).values
    results = {}
    for method in methods:
        t0 = time.perf_counter()
        if method == "numerical":
            model = upscale_numerical(field, ratio, delta_h)
        elif method == "surrogate":
            if params is None or spec is None:
                raise ValueError("surrogate method needs params and spec")
            model = upscale_surrogate(field, ratio, params, spec, delta_h,
                                      use_log_input=use_log_input)
        else:
            raise ValueError(f"unknown method {method!r}")
        t1 = time.perf_counter()
        sol = coarse_solve(model, bc)
        t2 = time.perf_counter()
        scores = {"head": r_squared(bench["head"], sol.heads.values)}
        for axis, label in enumerate(velocity_labels(grid.ndim)):
            scores[label] = r_squared(bench[label], sol.velocities[axis])
        results[method] = MethodResult(method, model, sol, scores, t1 - t0, t2 - t1)
    tensor_scores = {}
    if "numerical" in results and "surrogate" in results:
        ref = results["numerical"].model.tensors
        got = results["surrogate"].model.tensors
        for axis, label in enumerate(tensor_labels(grid.ndim)):
            tensor_scores[label] = r_squared(ref[:, axis, axis], got[:, axis, axis])
    return EvaluationReport(tuple(np.atleast_1d(ratio)), bench, results,
                            tensor_scores, fine_seconds)


@dataclass(frozen=True)
class TimingRow:
    """Wall-clock seconds of one method over a batch of realizations."""

    method: str
    realizations: int
    train_seconds: float | None
    upscale_seconds: float | None
    solve_seconds: float


def benchmark_timing(fields, ratio, bc: GlobalBoundarySpec | None = None,
                     methods=("fine", "numerical", "surrogate"), params=None,
                     spec: NetworkSpec | None = None, train_seconds: float | None = None,
                     delta_h: float = 1.0, workers: int = 1) -> list:
    """Time each method over the realization batch.

    The fine row solves every realization at full resolution; upscaling
    rows time the coarsening stage and the coarse solves separately, with
    training reported once for the surrogate.
    """
    fields = list(fields)
    if not fields:
        raise ValueError("need at least one realization")
    if bc is None:
        bc = default_bc(fields[0].grid.ndim)
    rows = []
    for method in methods:
        if method == "fine":
            t0 = time.perf_counter()
            for f in fields:
                fine_solve(f, bc)
            rows.append(TimingRow("fine", len(fields), None, None,
                                  time.perf_counter() - t0))
            continue
        t0 = time.perf_counter()
        models = []
        for f in fields:
            if method == "numerical":
                models.append(upscale_numerical(f, ratio, delta_h,
                                                workers=workers))
            elif method == "surrogate":
                if params is None or spec is None:
                    raise ValueError("surrogate method needs params and spec")
                models.append(upscale_surrogate(f, ratio, params, spec, delta_h))
            else:
                raise ValueError(f"unknown method {method!r}")
        t1 = time.perf_counter()
        for m in models:
            coarse_solve(m, bc)
        t2 = time.perf_counter()
        rows.append(TimingRow(method, len(fields),
                              train_seconds if method == "surrogate" else None,
                              t1 - t0, t2 - t1))
    return rows


def write_scores_csv(report: EvaluationReport, path):
    """R-squared table: one row per (method, quantity)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "quantity", "r_squared"])
        for name, res in report.methods.items():
            for quantity, score in res.scores.items():
                writer.writerow([name, quantity, repr(float(score))])
        for quantity, score in report.tensor_scores.items():
            writer.writerow(["surrogate_vs_numerical", quantity, repr(float(score))])


def write_scatter_csv(report: EvaluationReport, method: str, path):
    """Per-coarse-cell benchmark/prediction pairs for one method."""
    res = report.methods[method]
    ndim = res.model.coarse_grid.ndim
    quantities = ["head"] + velocity_labels(ndim)
    columns = {}
    for q in quantities:
        bench, got = report.scatter(method, q)
        columns[f"benchmark_{q}"] = bench
        columns[f"{method}_{q}"] = got
    for axis, label in enumerate(tensor_labels(ndim)):
        columns[f"{method}_{label}"] = res.model.tensors[:, axis, axis]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell"] + list(columns))
        for i in range(res.model.coarse_grid.n_cells):
            writer.writerow([i] + [repr(float(col[i])) for col in columns.values()])


def write_timing_csv(rows, path):
    """Timing table mirroring the efficiency-comparison layout."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "realizations", "train_seconds",
                         "upscale_seconds", "solve_seconds"])
        for row in rows:
            writer.writerow([
                row.method,
                row.realizations,
                "" if row.train_seconds is None else repr(float(row.train_seconds)),
                "" if row.upscale_seconds is None else repr(float(row.upscale_seconds)),
                repr(float(row.solve_seconds)),
            ])
