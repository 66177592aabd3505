"""Resampling onto arbitrary grids and conformation to the 256^3 / 1 mm / LIA space."""

from __future__ import annotations

import numpy as np

from .errors import TransformError
from .volume import Grid, GridTransform, Volume3D, affine_for_orientation

CONFORM_DIM = 256
CONFORM_SPACING = 1.0
CONFORM_ORIENTATION = "LIA"

# sample coordinates this close to a voxel centre are snapped onto it
_SNAP = 1e-6
_SLAB_VOXELS = 1 << 18


def conform_grid(source, dim=CONFORM_DIM, spacing=CONFORM_SPACING, orientation=CONFORM_ORIENTATION, center=None):
    """Conformed lattice whose field of view is centred on ``source``'s world centre.

    ``source`` may be a :class:`Grid` or anything with a ``grid`` attribute.
    """
    grid = source if isinstance(source, Grid) else source.grid
    c = grid.center if center is None else np.asarray(center, dtype=float)
    rot = affine_for_orientation(orientation, (spacing,) * 3)
    aff = np.eye(4)
    aff[:3, :3] = rot
    aff[:3, 3] = c - rot @ np.full(3, (dim - 1) / 2.0)
    return Grid((dim, dim, dim), aff)


def conform(v: Volume3D, interpolation="trilinear", dim=CONFORM_DIM) -> Volume3D:
    return resample_to(v, conform_grid(v, dim=dim), None, interpolation)


def _snap(coords):
    r = np.rint(coords)
    close = np.abs(coords - r) < _SNAP
    coords[close] = r[close]
    return coords


def resample_to(v: Volume3D, target, transform: GridTransform | None = None, interpolation="trilinear") -> Volume3D:
    """Sample ``v`` on ``target``.

    ``transform`` maps target world points into ``v``'s world frame (identity
    when omitted).  Points outside ``v``'s voxel footprint read as 0.  Nearest
    keeps the input dtype and never produces values absent from ``v``;
    trilinear returns float32.
    """
    if interpolation not in ("nearest", "trilinear"):
        raise ValueError(f"unknown interpolation {interpolation!r}")
    target = target if isinstance(target, Grid) else target.grid
    transform = transform or GridTransform.identity()
    if transform.kind == "affine" and not transform.invertible:
        raise TransformError("affine transform is singular")

    src_inv = np.linalg.inv(v.affine)
    nx, ny, nz = target.dims
    src = v.data
    out_dtype = src.dtype if interpolation == "nearest" else np.float32
    out = np.zeros(target.dims, dtype=out_dtype)

    if transform.kind == "affine":
        # target voxel -> source voxel in one matrix
        vox_map = src_inv @ transform.matrix @ target.affine
    slab = max(1, _SLAB_VOXELS // (nx * ny))
    ii, jj = np.meshgrid(np.arange(nx, dtype=float), np.arange(ny, dtype=float), indexing="ij")
    for k0 in range(0, nz, slab):
        k1 = min(nz, k0 + slab)
        kk = np.arange(k0, k1, dtype=float)
        ijk = np.stack(
            [np.broadcast_to(ii[..., None], (nx, ny, k1 - k0)),
             np.broadcast_to(jj[..., None], (nx, ny, k1 - k0)),
             np.broadcast_to(kk, (nx, ny, k1 - k0))],
            axis=-1,
        ).reshape(-1, 3)
        if transform.kind == "affine":
            coords = ijk @ vox_map[:3, :3].T + vox_map[:3, 3]
        else:
            world = target.voxel_to_world(ijk)
            coords = transform.apply(world) @ src_inv[:3, :3].T + src_inv[:3, 3]
        coords = _snap(coords)
        values = _sample(src, coords, interpolation)
        out[:, :, k0:k1] = values.reshape(nx, ny, k1 - k0).astype(out_dtype, copy=False)
    return Volume3D(out, target.affine, v.dtype if interpolation == "nearest" else "float32")


def _sample(src, coords, interpolation):
    dims = np.asarray(src.shape)
    nearest = np.floor(coords + 0.5).astype(np.int64)
    inside = np.all((nearest >= 0) & (nearest < dims), axis=1)
    if interpolation == "nearest":
        out = np.zeros(len(coords), dtype=src.dtype)
        n = nearest[inside]
        out[inside] = src[n[:, 0], n[:, 1], n[:, 2]]
        return out

    out = np.zeros(len(coords), dtype=np.float64)
    c = np.clip(coords[inside], 0.0, dims - 1.0)
    base = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
    frac = c - base
    upper = np.minimum(base + 1, dims - 1)
    acc = np.zeros(len(c), dtype=np.float64)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        ix = upper[:, 0] if dx else base[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            iy = upper[:, 1] if dy else base[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                iz = upper[:, 2] if dz else base[:, 2]
                acc += wx * wy * wz * src[ix, iy, iz]
    out[inside] = acc
    return out
