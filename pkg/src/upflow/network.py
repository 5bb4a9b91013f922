"""Convolutional encoder-decoder for per-patch head prediction.

A small stack of stride-1 3x3(x3) convolutions and transposed convolutions
with Swish activation after every weighted layer maps a conductivity patch
(r per axis) to a head image (r+2 per axis): the interior holds the patch
heads and the one-cell outer ring holds periodic ghost heads.

Everything is plain numpy.  Internally all tensors are normalized to the
3D layout [B, C, Z, Y, X] (2D nets use Z=1 with 1x3x3 kernels), so one
forward/backward code path serves both dimensionalities.  Transposed
convolutions are evaluated as convolutions with a spatially flipped,
channel-swapped kernel and complementary padding, which is exact for
stride 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

KERNEL = 3


@dataclass(frozen=True)
class LayerSpec:
    """One layer: kind in {conv, deconv, activation}; kernel 3, stride 1."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "deconv", "activation"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind != "activation":
            if self.in_channels < 1 or self.out_channels < 1:
                raise ValueError("weighted layers need positive channel counts")
            if self.padding not in (0, 1):
                raise ValueError(f"padding must be 0 or 1, got {self.padding}")

    @property
    def weighted(self) -> bool:
        return self.kind != "activation"

    def out_size(self, size: int) -> int:
        if self.kind == "conv":
            return size + 2 * self.padding - (KERNEL - 1)
        if self.kind == "deconv":
            return size + (KERNEL - 1) - 2 * self.padding
        return size


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description; validates the composed shape arithmetic.

    ``input_shape`` is in view order ((z,) y, x).  Output per axis must be
    input + 2 and the final channel count must be 1; each weighted layer
    must be followed by its activation.
    """

    ndim: int
    in_channels: int
    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.ndim not in (2, 3):
            raise ValueError(f"ndim must be 2 or 3, got {self.ndim}")
        if len(self.input_shape) != self.ndim:
            raise ValueError(f"input_shape {self.input_shape} does not match ndim {self.ndim}")
        if min(self.input_shape) < 1:
            raise ValueError("input sizes must be >= 1")
        sizes = self.input_shape
        channels = self.in_channels
        pending_activation = False
        for i, layer in enumerate(self.layers):
            if layer.weighted:
                if pending_activation:
                    raise ValueError(f"layer {i}: weighted layer before activation of layer {i-1}")
                if layer.in_channels != channels:
                    raise ValueError(
                        f"layer {i}: expects {layer.in_channels} channels, gets {channels}"
                    )
                sizes = tuple(layer.out_size(s) for s in sizes)
                if min(sizes) < 1:
                    raise ValueError(f"layer {i}: spatial size collapsed to {sizes}")
                channels = layer.out_channels
                pending_activation = True
            else:
                pending_activation = False
        if pending_activation:
            raise ValueError("final weighted layer lacks its activation")
        want = tuple(s + 2 for s in self.input_shape)
        if sizes != want:
            raise ValueError(f"stack maps {self.input_shape} to {sizes}, expected {want}")
        if channels != 1:
            raise ValueError(f"final channel count must be 1, got {channels}")

    @property
    def output_shape(self) -> tuple[int, ...]:
        return tuple(s + 2 for s in self.input_shape)

    @property
    def weighted_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.weighted)


def _with_activations(weighted: list[LayerSpec]) -> tuple[LayerSpec, ...]:
    out = []
    for layer in weighted:
        out.append(layer)
        out.append(LayerSpec("activation"))
    return tuple(out)


def default_spec(ndim: int, r, in_channels: int = 1) -> NetworkSpec:
    """Standard encoder-decoder for an r-per-axis patch.

    Two padded convolutions (16, 32 channels), then unpadded convolutions
    doubling the channel count while the spatial size permits, mirrored by
    unpadded deconvolutions and a final padded deconvolution to 1 channel.
    For r = 10 in 2D this is exactly the 10-layer, 256-channel-bottleneck
    stack; for r = 5 in 3D the 6-layer, 64-channel one.
    """
    shape = (r,) * ndim if np.isscalar(r) else tuple(int(v) for v in r)
    if len(shape) != ndim:
        raise ValueError(f"r has {len(shape)} entries for ndim {ndim}")
    if min(shape) < 4:
        raise ValueError(f"patch size {shape} too small for the k3 stack")
    size = min(shape)
    n_shrink = 1
    if ndim == 2:
        while n_shrink < 3 and size - 2 * (n_shrink + 1) >= 2:
            n_shrink += 1
    layers = [
        LayerSpec("conv", in_channels, 16, padding=1),
        LayerSpec("conv", 16, 32, padding=1),
    ]
    ch = 32
    for _ in range(n_shrink):
        layers.append(LayerSpec("conv", ch, 2 * ch, padding=0))
        ch *= 2
    for _ in range(n_shrink - 1):
        layers.append(LayerSpec("deconv", ch, ch // 2, padding=0))
        ch //= 2
    layers.append(LayerSpec("deconv", ch, ch // 2, padding=0))
    ch //= 2
    layers.append(LayerSpec("deconv", ch, ch // 2, padding=0))
    ch //= 2
    layers.append(LayerSpec("deconv", ch, 1, padding=1))
    return NetworkSpec(ndim, in_channels, shape, _with_activations(layers))


def init_params(spec: NetworkSpec, seed: int, dtype=np.float64) -> list:
    """Seeded uniform(+-sqrt(1/fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.weighted_layers:
        kshape = (KERNEL,) * spec.ndim
        if layer.kind == "conv":
            wshape = (layer.out_channels, layer.in_channels, *kshape)
        else:
            wshape = (layer.in_channels, layer.out_channels, *kshape)
        bound = np.sqrt(1.0 / (layer.in_channels * KERNEL**spec.ndim))
        w = rng.uniform(-bound, bound, size=wshape).astype(dtype)
        b = np.zeros(layer.out_channels, dtype=dtype)
        params.append((w, b))
    return params


def count_params(params) -> int:
    return sum(w.size + b.size for w, b in params)


# internal compute: normalized [B, C, Z, Y, X] tensors


def _to5d(x: np.ndarray, ndim: int) -> np.ndarray:
    return x[:, :, None] if ndim == 2 else x


def _from5d(x: np.ndarray, ndim: int) -> np.ndarray:
    return x[:, :, 0] if ndim == 2 else x


def _kernel5(w: np.ndarray, ndim: int) -> np.ndarray:
    return w[:, :, None] if ndim == 2 else w


def _conv_forward(x5, w5, bias, padding):
    """Stride-1 correlation of padded input; returns output and padded input."""
    pz, py, px = padding
    xp = np.pad(x5, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px)))
    kz, ky, kx = w5.shape[2:]
    oz = xp.shape[2] - kz + 1
    oy = xp.shape[3] - ky + 1
    ox = xp.shape[4] - kx + 1
    co = w5.shape[0]
    acc = np.zeros((co, xp.shape[0], oz, oy, ox), dtype=x5.dtype)
    for iz in range(kz):
        for iy in range(ky):
            for ix in range(kx):
                window = xp[:, :, iz:iz + oz, iy:iy + oy, ix:ix + ox]
                acc += np.tensordot(w5[:, :, iz, iy, ix], window, axes=(1, 1))
    y = np.ascontiguousarray(acc.transpose(1, 0, 2, 3, 4))
    y += bias.reshape(1, co, 1, 1, 1)
    return y, xp


def _conv_backward(dy5, xp, w5, padding):
    """Gradients of _conv_forward: (dx, dw, db)."""
    pz, py, px = padding
    kz, ky, kx = w5.shape[2:]
    oz, oy, ox = dy5.shape[2:]
    ci = w5.shape[1]
    dw = np.empty_like(w5)
    dxp_cb = np.zeros((ci, xp.shape[0], *xp.shape[2:]), dtype=dy5.dtype)
    for iz in range(kz):
        for iy in range(ky):
            for ix in range(kx):
                window = xp[:, :, iz:iz + oz, iy:iy + oy, ix:ix + ox]
                dw[:, :, iz, iy, ix] = np.tensordot(
                    dy5, window, axes=([0, 2, 3, 4], [0, 2, 3, 4])
                )
                dxp_cb[:, :, iz:iz + oz, iy:iy + oy, ix:ix + ox] += np.tensordot(
                    w5[:, :, iz, iy, ix], dy5, axes=(0, 1)
                )
    db = dy5.sum(axis=(0, 2, 3, 4))
    dxp = dxp_cb.transpose(1, 0, 2, 3, 4)
    nz, ny, nx = xp.shape[2:]
    dx = dxp[:, :, pz:nz - pz or None, py:ny - py or None, px:nx - px or None]
    return np.ascontiguousarray(dx), dw, db


def _deconv_as_conv(w5):
    """Equivalent correlation kernel of a stride-1 transposed convolution.

    Flip spatially, swap channel axes; applying it twice is the identity,
    which also maps kernel gradients back to the stored layout.
    """
    flipped = np.flip(w5, axis=(2, 3, 4))
    return np.ascontiguousarray(flipped.transpose(1, 0, 2, 3, 4))


def _padding3(layer: LayerSpec, ndim: int) -> tuple[int, int, int]:
    if layer.kind == "conv":
        p = layer.padding
    else:
        p = KERNEL - 1 - layer.padding
    return (0 if ndim == 2 else p, p, p)


def _swish_forward(x):
    sig = expit(x)
    return x * sig, sig


def _swish_backward(dy, x, sig):
    return dy * (sig * (1.0 + x * (1.0 - sig)))


def forward(params, spec: NetworkSpec, x: np.ndarray, caches: list | None = None) -> np.ndarray:
    """Forward pass of a batch [B, C, (z,) y, x] -> [B, 1, (z+2,) y+2, x+2].

    Pass a list as ``caches`` to record what the backward pass needs.
    """
    x = np.asarray(x)
    if x.ndim == spec.ndim + 1:
        x = x[None]
    want = (spec.in_channels, *spec.input_shape)
    if x.shape[1:] != want:
        raise ValueError(f"input shape {x.shape[1:]} does not match spec {want}")
    h = _to5d(x.astype(params[0][0].dtype, copy=False), spec.ndim)
    idx = 0
    for layer in spec.weighted_layers:
        w, b = params[idx]
        w5 = _kernel5(w, spec.ndim)
        if layer.kind == "deconv":
            w5 = _deconv_as_conv(w5)
        pad = _padding3(layer, spec.ndim)
        pre, xp = _conv_forward(h, w5, b, pad)
        act, sig = _swish_forward(pre)
        if caches is not None:
            caches.append((xp, pre, sig, w5, pad))
        h = act
        idx += 1
    return _from5d(h, spec.ndim)


def backward(params, spec: NetworkSpec, caches: list, dy: np.ndarray):
    """Backpropagate dL/d(output); returns (dL/dinput, per-layer grads)."""
    g = _to5d(np.asarray(dy), spec.ndim)
    grads = [None] * len(caches)
    for idx in range(len(caches) - 1, -1, -1):
        layer = spec.weighted_layers[idx]
        xp, pre, sig, w5, pad = caches[idx]
        g = _swish_backward(g, pre, sig)
        g, dw5, db = _conv_backward(g, xp, w5, pad)
        if layer.kind == "deconv":
            dw5 = _deconv_as_conv(dw5)
        dw = dw5 if spec.ndim == 3 else dw5[:, :, 0]
        grads[idx] = (dw, db)
    return _from5d(g, spec.ndim), grads


def patch_input(spec: NetworkSpec, field, use_log: bool = True) -> np.ndarray:
    """Conductivity channels of one patch, shaped for the network.

    One channel uses the x component (the patch must then be isotropic);
    d channels stack the per-axis components.  Values are ln K unless
    ``use_log`` is off.
    """
    grid = field.grid
    if grid.ndim != spec.ndim:
        raise ValueError(f"{grid.ndim}D patch fed to a {spec.ndim}D network")
    view = grid.shape3 if spec.ndim == 3 else grid.shape3[1:]
    if spec.in_channels == 1:
        for comp in field.components[1:]:
            if not np.array_equal(comp, field.kx):
                raise ValueError("single-channel network requires an isotropic patch")
        comps = [field.kx]
    elif spec.in_channels == grid.ndim:
        comps = list(field.components)
    else:
        raise ValueError(f"cannot build {spec.in_channels} channels from a {grid.ndim}D patch")
    stack = np.stack([c.reshape(view) for c in comps])
    return np.log(stack) if use_log else stack


def spatial_axis(spec_ndim: int, axis: int) -> int:
    """Tensor dimension of physical axis ``axis`` in [B, C, (z,) y, x]."""
    return 2 + (spec_ndim - 1 - axis)


def permute_to_drive(x: np.ndarray, axis: int, ndim: int, swap_channels: bool) -> np.ndarray:
    """Relabel axes so a drive along ``axis`` becomes a drive along x.

    Swaps the spatial dimensions of physical axes 0 and ``axis`` (and the
    matching per-axis channels when the input carries one channel per
    component).  Self-inverse.
    """
    if axis == 0:
        return x
    d0, d1 = spatial_axis(ndim, 0), spatial_axis(ndim, axis)
    out = np.swapaxes(x, d0, d1)
    if swap_channels:
        order = list(range(out.shape[1]))
        order[0], order[axis] = order[axis], order[0]
        out = out[:, order]
    return out
