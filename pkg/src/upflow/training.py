"""Training and inference for the patch head surrogate.

Full-batch first-order optimization with adaptive moments: every epoch
evaluates the weighted loss over the whole pool (processed in fixed-order
chunks so memory stays bounded while sums stay bit-reproducible) and takes
one step.  The learning rate decays by a fixed factor on a fixed epoch
interval.

A single model is trained for the x-axis drive; predictions for other
drive axes relabel the input axes (and per-axis channels), run the same
model, and relabel back, which is exact for the relabeling-symmetric flow
equations on cubic patches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from upflow.grid import ConductivityField, Patch, ScalarField
from upflow.losses import (
    LossBreakdown,
    loss_bc_flux,
    loss_bc_head,
    loss_data,
    loss_ge,
    total_loss,
)
from upflow.network import (
    NetworkSpec,
    backward,
    forward,
    init_params,
    patch_input,
    permute_to_drive,
    spatial_axis,
)
from upflow.solver import PatchSolution, PeriodicDrive, face_velocities


class TrainingError(RuntimeError):
    """Loss or gradient became non-finite during training."""

    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of one training run.

    ``weights`` orders the loss terms (data, equation, head-BC, flux-BC).
    ``n_labeled`` is how many labeled pairs participate; 0 trains label
    free.  ``augment_axes`` adds axis-relabeled copies of the residual
    pool, matching the orientations used at prediction time.
    """

    epochs: int = 1000
    learning_rate: float = 1e-3
    decay_factor: float = 0.9
    decay_every: int = 100
    weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    n_labeled: int = 0
    n_residual: int | None = None
    drive: PeriodicDrive = PeriodicDrive((1.0, 0.0))
    seed: int = 0
    chunk_size: int = 125
    dtype: str = "float64"
    augment_axes: bool = False
    use_log_input: bool = True

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.learning_rate <= 0 or not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise ValueError("invalid learning-rate schedule")
        if len(self.weights) != 4 or min(self.weights) < 0:
            raise ValueError("need 4 non-negative loss weights")
        if self.n_labeled < 0 or self.chunk_size < 1:
            raise ValueError("invalid counts")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class TrainingBatch:
    """Residual-pool fields plus optional (field, interior heads) pairs."""

    residual: tuple
    labeled: tuple = field(default=())


def _as_fields(items) -> list[ConductivityField]:
    return [p.field if isinstance(p, Patch) else p for p in items]


def _component_views(fields: list[ConductivityField], dtype) -> list[np.ndarray]:
    """Per-axis stacked [B, (z,) y, x] raw conductivity arrays."""
    grid = fields[0].grid
    view = grid.shape3 if grid.ndim == 3 else grid.shape3[1:]
    comps = []
    for axis in range(grid.ndim):
        comp = np.stack([f.component(axis).reshape(view) for f in fields])
        comps.append(comp.astype(dtype, copy=False))
    return comps


def _label_views(labels, grid, dtype) -> np.ndarray:
    view = grid.shape3 if grid.ndim == 3 else grid.shape3[1:]
    rows = []
    for lab in labels:
        arr = lab.values if isinstance(lab, ScalarField) else np.asarray(lab)
        rows.append(arr.reshape(view))
    return np.stack(rows).astype(dtype, copy=False)


def _swap_axis_comps(comps: list[np.ndarray], ndim: int, axis: int) -> list[np.ndarray]:
    """Relabel per-axis component arrays under the 0<->axis swap."""
    d0, d1 = spatial_axis(ndim, 0), spatial_axis(ndim, axis)
    swapped = [np.swapaxes(c, d0 - 1, d1 - 1) for c in comps]
    swapped[0], swapped[axis] = swapped[axis], swapped[0]
    return swapped


class _Prepared:
    """Input tensors for one training pool, built once."""

    def __init__(self, spec: NetworkSpec, batch: TrainingBatch, config: TrainConfig):
        res_fields = _as_fields(batch.residual)
        if not res_fields:
            raise ValueError("residual pool must not be empty")
        self.grid = res_fields[0].grid
        for f in res_fields:
            if f.grid != self.grid:
                raise ValueError("all residual patches must share one grid")
        if config.n_residual is not None:
            if config.n_residual > len(res_fields):
                raise ValueError("n_residual exceeds the provided pool")
            res_fields = res_fields[: config.n_residual]
        dtype = config.np_dtype
        self.x_res = np.stack(
            [patch_input(spec, f, config.use_log_input) for f in res_fields]
        ).astype(dtype)
        self.k_res = _component_views(res_fields, dtype)
        if config.augment_axes:
            if len(set(spec.input_shape)) != 1:
                raise ValueError("axis augmentation requires cubic patches")
            xs, ks = [self.x_res], [self.k_res]
            for axis in range(1, spec.ndim):
                xs.append(permute_to_drive(self.x_res, axis, spec.ndim,
                                           swap_channels=spec.in_channels > 1))
                ks.append(_swap_axis_comps(self.k_res, spec.ndim, axis))
            self.x_res = np.concatenate(xs)
            self.k_res = [np.concatenate([k[i] for k in ks]) for i in range(spec.ndim)]
        self.n_res = len(self.x_res)

        n_lab = config.n_labeled
        if n_lab > len(batch.labeled):
            raise ValueError(f"n_labeled={n_lab} exceeds {len(batch.labeled)} provided pairs")
        lab = list(batch.labeled)[:n_lab]
        if lab:
            lab_fields = _as_fields([p for p, _ in lab])
            for f in lab_fields:
                if f.grid != self.grid:
                    raise ValueError("labeled patches must share the residual-pool grid")
            self.x_lab = np.stack(
                [patch_input(spec, f, config.use_log_input) for f in lab_fields]
            ).astype(dtype)
            self.labels = _label_views([h for _, h in lab], self.grid, dtype)
        else:
            self.x_lab = None
            self.labels = None
        self.n_lab = len(lab)


def _zeros_like_params(params):
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]


def _accumulate(acc, grads):
    for (aw, ab), (gw, gb) in zip(acc, grads):
        aw += gw
        ab += gb


def _loss_and_grads(params, spec: NetworkSpec, prep: _Prepared, config: TrainConfig):
    """Full-pool loss breakdown and parameter gradients of the total."""
    lam_data, lam_ge, lam_bc_h, lam_bc_v = config.weights
    acc = _zeros_like_params(params)
    sums = {"ge": 0.0, "bc_h": 0.0, "bc_v": 0.0, "data": 0.0}
    chunk = config.chunk_size
    need_residual = lam_ge > 0 or lam_bc_h > 0 or lam_bc_v > 0
    if need_residual:
        for lo in range(0, prep.n_res, chunk):
            hi = min(lo + chunk, prep.n_res)
            caches = []
            pred = forward(params, spec, prep.x_res[lo:hi], caches)[:, 0]
            kc = [c[lo:hi] for c in prep.k_res]
            dpred = np.zeros_like(pred)
            if lam_ge > 0:
                v, g = loss_ge(pred, kc, prep.grid, prep.n_res)
                sums["ge"] += v
                dpred += lam_ge * g
            if lam_bc_h > 0:
                v, g = loss_bc_head(pred, config.drive, prep.grid, prep.n_res)
                sums["bc_h"] += v
                dpred += lam_bc_h * g
            if lam_bc_v > 0:
                v, g = loss_bc_flux(pred, kc, config.drive, prep.grid, prep.n_res)
                sums["bc_v"] += v
                dpred += lam_bc_v * g
            _, grads = backward(params, spec, caches, dpred[:, None])
            _accumulate(acc, grads)
    if prep.n_lab > 0 and lam_data > 0:
        for lo in range(0, prep.n_lab, chunk):
            hi = min(lo + chunk, prep.n_lab)
            caches = []
            pred = forward(params, spec, prep.x_lab[lo:hi], caches)[:, 0]
            v, g = loss_data(pred, prep.labels[lo:hi], prep.n_lab)
            sums["data"] += v
            _, grads = backward(params, spec, caches, (lam_data * g)[:, None])
            _accumulate(acc, grads)
    breakdown = total_loss(sums["data"], sums["ge"], sums["bc_h"], sums["bc_v"],
                           config.weights, prep.n_lab)
    return breakdown, acc


def gradients(params, spec: NetworkSpec, batch: TrainingBatch, config: TrainConfig):
    """Loss breakdown and exact parameter gradients for one pool.

    Raises :class:`TrainingError` naming the first layer whose gradient is
    non-finite.
    """
    prep = _Prepared(spec, batch, config)
    breakdown, grads = _loss_and_grads(params, spec, prep, config)
    for i, (gw, gb) in enumerate(grads):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise TrainingError(f"non-finite gradient in weighted layer {i}")
    return breakdown, grads


class _Adam:
    """Adaptive-moment updates, beta (0.9, 0.999), eps 1e-8."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = _zeros_like_params(params)
        self.v = _zeros_like_params(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (w, b), (gw, gb), (mw, mb), (vw, vb) in zip(params, grads, self.m, self.v):
            for p, g, m, v in ((w, gw, mw, vw), (b, gb, mb, vb)):
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train(spec: NetworkSpec, config: TrainConfig, residual_patches,
          labeled_pairs=()) -> tuple[list, list[LossBreakdown]]:
    """Optimize fresh seeded parameters against the configured pool.

    Returns the final parameters and the per-epoch loss history (evaluated
    before each step).  Deterministic for a fixed config and pool.
    """
    if config.n_labeled > 0 and not labeled_pairs:
        raise ValueError("n_labeled > 0 but no labeled pairs provided")
    batch = TrainingBatch(tuple(residual_patches), tuple(labeled_pairs))
    params = init_params(spec, config.seed, dtype=config.np_dtype)
    if config.epochs == 0:
        return params, []
    prep = _Prepared(spec, batch, config)
    if len(config.drive.delta_h) != spec.ndim:
        raise ValueError("drive dimensionality does not match the network")
    opt = _Adam(params)
    history: list[LossBreakdown] = []
    for epoch in range(config.epochs):
        breakdown, grads = _loss_and_grads(params, spec, prep, config)
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"loss diverged at epoch {epoch}", epoch=epoch)
        history.append(breakdown)
        lr = config.learning_rate * config.decay_factor ** (epoch // config.decay_every)
        opt.step(params, grads, lr)
    return params, history


def predict_head_batch(params, spec: NetworkSpec, fields, axis: int = 0,
                       magnitude: float = 1.0, use_log_input: bool = True,
                       chunk_size: int = 250) -> np.ndarray:
    """Anchored interior heads [B, (z,) y, x] for a canonical drive.

    Drives along y or z reuse the x-drive model through axis relabeling;
    head offsets other than 1 scale the prediction linearly.  The anchor
    cell (0,0,0) is shifted to head 0 exactly, matching the solver gauge.
    """
    fields = _as_fields(fields)
    if axis >= spec.ndim:
        raise ValueError(f"axis {axis} out of range for a {spec.ndim}D network")
    if axis != 0 and len(set(spec.input_shape)) != 1:
        raise ValueError("non-x drives require cubic patches")
    x = np.stack([patch_input(spec, f, use_log_input) for f in fields])
    x = permute_to_drive(x, axis, spec.ndim, swap_channels=spec.in_channels > 1)
    outs = []
    for lo in range(0, len(x), chunk_size):
        outs.append(forward(params, spec, x[lo:lo + chunk_size]))
    pred = np.concatenate(outs)
    if axis != 0:
        d0, d1 = spatial_axis(spec.ndim, 0), spatial_axis(spec.ndim, axis)
        pred = np.swapaxes(pred, d0, d1)
    inner = pred[(slice(None), 0) + (slice(1, -1),) * spec.ndim]
    anchor = inner[(slice(None),) + (0,) * spec.ndim]
    inner = inner - anchor[(slice(None),) + (None,) * spec.ndim]
    return float(magnitude) * inner


def predict_heads(params, spec: NetworkSpec, patch, drive: PeriodicDrive) -> PatchSolution:
    """Surrogate analogue of the periodic patch solve.

    The drive must be canonical (one nonzero offset).  Velocities are
    formed from the predicted interior heads with the same wrap-face
    definition as the sparse solver, so tensor extraction downstream is
    identical for both methods.
    """
    fld = patch.field if isinstance(patch, Patch) else patch
    nonzero = [a for a, v in enumerate(drive.delta_h) if v != 0.0]
    if len(nonzero) != 1:
        raise ValueError(f"surrogate drives must be canonical, got {drive.delta_h}")
    axis = nonzero[0]
    heads = predict_head_batch(params, spec, [fld], axis, drive.delta_h[axis])[0]
    flat = heads.reshape(-1).astype(np.float64)
    vels = face_velocities(fld, flat, drive)
    return PatchSolution(ScalarField(fld.grid, flat), vels, drive)
