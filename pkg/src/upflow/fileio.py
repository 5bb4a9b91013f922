"""Binary field files, network checkpoints, and CSV field export.

Field files ("UPF1") are a one-line text header followed by raw arrays:

    UPF1 nx ny nz dx dy dz ncomp\n

then ``ncomp`` per-cell float64 little-endian arrays in x-fastest order.
Conductivity fields store one component per flow axis; scalar fields
store a single component.  Checkpoints open with a magic line, then a
text descriptor of the architecture, then the weight and bias arrays of
each weighted layer in declaration order, also float64 little-endian.
Both formats round-trip bit exactly.
"""

import csv

import numpy as np

from .grid import ConductivityField, CoarseModel, GridSpec, ScalarField
from .network import KERNEL, LayerSpec, NetworkSpec

FIELD_MAGIC = "UPF1"
CHECKPOINT_MAGIC = b"UPCHK1\n"

__all__ = [
    "load_checkpoint",
    "load_coarse_model",
    "load_conductivity",
    "load_scalar",
    "read_upf",
    "save_checkpoint",
    "save_coarse_model",
    "save_conductivity",
    "save_scalar",
    "write_field_csv",
    "write_upf",
]


def write_upf(path, grid: GridSpec, components) -> None:
    """Write per-cell components of one grid to a UPF1 file."""
    components = [np.asarray(c, dtype="<f8") for c in components]
    if not components:
        raise ValueError("need at least one component")
    for c in components:
        if c.shape != (grid.n_cells,):
            raise ValueError(f"component shape {c.shape} does not match grid "
                             f"with {grid.n_cells} cells")
    header = (f"{FIELD_MAGIC} {grid.nx} {grid.ny} {grid.nz} "
              f"{grid.dx!r} {grid.dy!r} {grid.dz!r} {len(components)}\n")
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for c in components:
            fh.write(c.tobytes())


def read_upf(path):
    """Read a UPF1 file; returns ``(grid, [component, ...])``.

    3D is inferred from ``nz > 1`` or a third component (one-cell-thick
    slabs of 3D models keep their z component).
    """
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 8 or header[0] != FIELD_MAGIC:
            raise ValueError(f"{path}: not a {FIELD_MAGIC} field file")
        nx, ny, nz = (int(v) for v in header[1:4])
        dx, dy, dz = (float(v) for v in header[4:7])
        ncomp = int(header[7])
        dim = 3 if (nz > 1 or ncomp == 3) else 2
        grid = GridSpec(nx, ny, nz, dx, dy, dz, dim=dim)
        n = grid.n_cells
        raw = fh.read()
    if len(raw) != 8 * n * ncomp:
        raise ValueError(f"{path}: expected {8 * n * ncomp} payload bytes, "
                         f"got {len(raw)}")
    comps = [np.frombuffer(raw, dtype="<f8", count=n, offset=8 * n * i).copy()
             for i in range(ncomp)]
    return grid, comps


def save_conductivity(fld: ConductivityField, path) -> None:
    comps = [fld.kx, fld.ky] + ([] if fld.kz is None else [fld.kz])
    write_upf(path, fld.grid, comps)


def load_conductivity(path) -> ConductivityField:
    """One component means isotropic; otherwise one per flow axis."""
    grid, comps = read_upf(path)
    if len(comps) == 1:
        return ConductivityField.isotropic(grid, comps[0])
    if len(comps) != grid.ndim:
        raise ValueError(f"{path}: {len(comps)} components cannot form a "
                         f"{grid.ndim}D conductivity field")
    kz = comps[2] if len(comps) == 3 else None
    return ConductivityField(grid, comps[0], comps[1], kz)


def save_scalar(fld: ScalarField, path) -> None:
    write_upf(path, fld.grid, [fld.values])


def load_scalar(path) -> ScalarField:
    grid, comps = read_upf(path)
    if len(comps) != 1:
        raise ValueError(f"{path}: scalar field file must hold one component, "
                         f"got {len(comps)}")
    return ScalarField(grid, comps[0])


def save_coarse_model(model: CoarseModel, path) -> None:
    """Store full tensors: d*d row-major components on the coarse grid."""
    d = model.coarse_grid.ndim
    comps = [model.tensors[:, r, c] for r in range(d) for c in range(d)]
    write_upf(path, model.coarse_grid, comps)


def load_coarse_model(path) -> CoarseModel:
    grid, comps = read_upf(path)
    d = {4: 2, 9: 3}.get(len(comps))
    if d is None:
        raise ValueError(f"{path}: {len(comps)} components do not form "
                         f"square tensors")
    if d != grid.ndim:
        # a square tensor count settles the dimensionality the header
        # inference could not (e.g. one-cell-thick 3D slabs)
        grid = GridSpec(grid.nx, grid.ny, grid.nz, grid.dx, grid.dy, grid.dz,
                        dim=d)
    tensors = np.stack(comps, axis=1).reshape(grid.n_cells, d, d)
    return CoarseModel(grid, tensors)


def write_field_csv(path, grid: GridSpec, columns: dict) -> None:
    """Inspection export: cell indices, center coordinates, value columns."""
    for name, values in columns.items():
        if np.asarray(values).shape != (grid.n_cells,):
            raise ValueError(f"column {name!r} does not match the grid")
    ii, jj, kk = np.meshgrid(np.arange(grid.nx), np.arange(grid.ny),
                             np.arange(grid.nz), indexing="ij")
    # flatten in x-fastest cell order
    order = np.argsort((kk * grid.ny + jj) * grid.nx + ii, axis=None)
    ii, jj, kk = ii.ravel()[order], jj.ravel()[order], kk.ravel()[order]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["i", "j", "k", "x", "y", "z"] + list(columns)
        writer.writerow(header)
        cols = [np.asarray(v) for v in columns.values()]
        for c in range(grid.n_cells):
            row = [int(ii[c]), int(jj[c]), int(kk[c]),
                   repr(float((ii[c] + 0.5) * grid.dx)),
                   repr(float((jj[c] + 0.5) * grid.dy)),
                   repr(float((kk[c] + 0.5) * grid.dz))]
            row += [repr(float(col[c])) for col in cols]
            writer.writerow(row)


def _layer_token(layer: LayerSpec) -> str:
    if layer.kind == "activation":
        return "act"
    return f"{layer.kind}:{layer.in_channels}:{layer.out_channels}:{layer.padding}"


def _parse_layer_token(token: str) -> LayerSpec:
    if token == "act":
        return LayerSpec("activation")
    parts = token.split(":")
    if len(parts) != 4 or parts[0] not in ("conv", "deconv"):
        raise ValueError(f"bad layer token {token!r}")
    return LayerSpec(parts[0], int(parts[1]), int(parts[2]), int(parts[3]))


def save_checkpoint(spec: NetworkSpec, params, path) -> None:
    """Serialize architecture and weights; shapes are implied by the spec."""
    if len(params) != len(spec.weighted_layers):
        raise ValueError(f"{len(params)} parameter sets for "
                         f"{len(spec.weighted_layers)} weighted layers")
    desc = (f"ndim={spec.ndim} in_channels={spec.in_channels} "
            f"input={','.join(str(s) for s in spec.input_shape)}\n"
            f"layers={','.join(_layer_token(l) for l in spec.layers)}\n")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(desc.encode("ascii"))
        for w, b in params:
            fh.write(np.asarray(w, dtype="<f8").tobytes())
            fh.write(np.asarray(b, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns ``(spec, params)`` with float64 parameters."""
    with open(path, "rb") as fh:
        magic = fh.readline()
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a network checkpoint")
        fields = dict(item.split("=", 1)
                      for item in fh.readline().decode("ascii").split())
        tokens = fh.readline().decode("ascii").strip()
        if not tokens.startswith("layers="):
            raise ValueError(f"{path}: malformed checkpoint descriptor")
        layers = tuple(_parse_layer_token(t)
                       for t in tokens[len("layers="):].split(","))
        spec = NetworkSpec(
            int(fields["ndim"]), int(fields["in_channels"]),
            tuple(int(s) for s in fields["input"].split(",")), layers,
        )
        raw = fh.read()
    params = []
    offset = 0
    for layer in spec.weighted_layers:
        kshape = (KERNEL,) * spec.ndim
        if layer.kind == "conv":
            wshape = (layer.out_channels, layer.in_channels, *kshape)
        else:
            wshape = (layer.in_channels, layer.out_channels, *kshape)
        wsize = int(np.prod(wshape))
        need = 8 * (wsize + layer.out_channels)
        if offset + need > len(raw):
            raise ValueError(f"{path}: truncated checkpoint payload")
        w = np.frombuffer(raw, dtype="<f8", count=wsize,
                          offset=offset).reshape(wshape).copy()
        offset += 8 * wsize
        b = np.frombuffer(raw, dtype="<f8", count=layer.out_channels,
                          offset=offset).copy()
        offset += 8 * layer.out_channels
        params.append((w, b))
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return spec, params
