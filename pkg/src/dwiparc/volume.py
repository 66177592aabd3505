"""Grid, volume and gradient-series containers.

Arrays are indexed ``data[i, j, k]`` with voxel index ``(i, j, k)`` mapped to
world millimetres by ``affine @ (i, j, k, 1)``.  On disk the payload is
x-fastest (Fortran order), which is what :mod:`dwiparc.nifti` reads and writes.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import TransformError, VolumeError

DTYPES = {
    "float32": np.dtype("<f4"),
    "int32": np.dtype("<i4"),
    "uint8": np.dtype("u1"),
}

_AXIS_LETTERS = (("L", "R"), ("P", "A"), ("I", "S"))


def orientation_code(affine):
    """Three-letter anatomical code of the direction each voxel axis points to.

    World space is RAS+, so a voxel axis whose column points along -x reads "L".
    """
    rot = np.asarray(affine, dtype=float)[:3, :3]
    cols = rot / np.linalg.norm(rot, axis=0)
    letters = []
    used = set()
    for ax in range(3):
        # greedy pick of the dominant world axis not yet taken
        order = np.argsort(-np.abs(cols[:, ax]))
        world = next(w for w in order if w not in used)
        used.add(world)
        letters.append(_AXIS_LETTERS[world][int(cols[world, ax] > 0)])
    return "".join(letters)


def affine_for_orientation(code, spacing=(1.0, 1.0, 1.0)):
    """Upper 3x3 direction*spacing matrix for an orientation code, e.g. ``"LIA"``."""
    rot = np.zeros((3, 3))
    for ax, letter in enumerate(code.upper()):
        for world, pair in enumerate(_AXIS_LETTERS):
            if letter in pair:
                rot[world, ax] = 1.0 if letter == pair[1] else -1.0
                break
        else:
            raise ValueError(f"bad orientation letter {letter!r}")
    if sorted(np.argmax(np.abs(rot), axis=0)) != [0, 1, 2]:
        raise ValueError(f"orientation {code!r} repeats an axis")
    return rot * np.asarray(spacing, dtype=float)


@dataclass(frozen=True, eq=False)
class Grid:
    """Voxel lattice geometry without a payload."""

    dims: tuple
    affine: np.ndarray

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise VolumeError(f"dims must be three positive integers, got {self.dims}")
        aff = np.array(self.affine, dtype=np.float64)
        if aff.shape != (4, 4):
            raise VolumeError("affine must be 4x4")
        if abs(np.linalg.det(aff[:3, :3])) <= 1e-12:
            raise VolumeError("affine is not invertible")
        aff.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "affine", aff)

    @property
    def spacing(self):
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def orientation(self):
        return orientation_code(self.affine)

    @property
    def center(self):
        """World coordinate of the geometric centre of the voxel lattice."""
        mid = (np.asarray(self.dims, dtype=float) - 1.0) / 2.0
        return self.affine[:3, :3] @ mid + self.affine[:3, 3]

    def same_as(self, other, atol=1e-6):
        return self.dims == other.dims and np.allclose(self.affine, other.affine, atol=atol, rtol=0)

    def voxel_to_world(self, ijk):
        ijk = np.asarray(ijk, dtype=float)
        return ijk @ self.affine[:3, :3].T + self.affine[:3, 3]

    def world_to_voxel(self, xyz):
        inv = np.linalg.inv(self.affine)
        xyz = np.asarray(xyz, dtype=float)
        return xyz @ inv[:3, :3].T + inv[:3, 3]


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable scalar grid: payload plus geometry.

    ``dtype`` is one of ``float32``, ``int32``, ``uint8``; other numeric input is
    cast (integers to int32, floats to float32).
    """

    data: np.ndarray
    affine: np.ndarray
    dtype: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise VolumeError(f"Volume3D needs a 3D array, got shape {arr.shape}")
        tag = self.dtype or _infer_tag(arr.dtype)
        if tag not in DTYPES:
            raise VolumeError(f"unsupported dtype tag {tag!r}")
        arr = np.array(arr, dtype=DTYPES[tag].newbyteorder("="), copy=True)
        arr.setflags(write=False)
        grid = Grid(arr.shape, self.affine)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "affine", grid.affine)
        object.__setattr__(self, "dtype", tag)
        object.__setattr__(self, "_grid", grid)

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def dims(self):
        return self._grid.dims

    @property
    def spacing(self):
        return self._grid.spacing

    @property
    def orientation(self):
        return self._grid.orientation

    def flat(self):
        """Payload as a 1-D x-fastest array."""
        return self.data.ravel(order="F")

    def with_data(self, data, dtype=None):
        return Volume3D(data, self.affine, dtype or "")

    @classmethod
    def zeros(cls, grid: Grid, dtype="float32"):
        return cls(np.zeros(grid.dims, dtype=DTYPES[dtype]), grid.affine, dtype)


def _infer_tag(dt):
    dt = np.dtype(dt)
    if dt == np.uint8 or dt == np.bool_:
        return "uint8"
    if dt.kind in "iu":
        return "int32"
    if dt.kind == "f":
        return "float32"
    raise VolumeError(f"cannot store dtype {dt} in a Volume3D")


@dataclass(frozen=True, eq=False)
class DwiSeries:
    """Co-registered diffusion-weighted volumes with their gradient table.

    ``data`` is ``(nx, ny, nz, n)`` float32.  Directions of b > ``b0_threshold``
    acquisitions must be unit norm; b0 directions may be zero.
    """

    data: np.ndarray
    affine: np.ndarray
    bvals: np.ndarray
    bvecs: np.ndarray
    b0_threshold: float = 50.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 4:
            raise VolumeError(f"DWI data must be 4D, got shape {arr.shape}")
        bvals = np.array(self.bvals, dtype=np.float64).ravel()
        bvecs = np.array(self.bvecs, dtype=np.float64)
        if bvecs.shape == (3, len(bvals)) and len(bvals) != 3:
            bvecs = bvecs.T
        n = arr.shape[3]
        if bvals.shape != (n,) or bvecs.shape != (n, 3):
            raise VolumeError(
                f"gradient table size mismatch: {n} volumes, {bvals.size} b-values, bvecs {bvecs.shape}"
            )
        weighted = bvals > self.b0_threshold
        if not np.any(~weighted):
            raise VolumeError("DWI series has no b0 volume")
        norms = np.linalg.norm(bvecs[weighted], axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
        if bad.size:
            raise VolumeError(f"gradient direction of volume {np.flatnonzero(weighted)[bad[0]]} is not unit norm")
        if _n_distinct_axes(bvecs[weighted]) < 6:
            raise VolumeError("need at least 6 distinct non-collinear diffusion directions")
        grid = Grid(arr.shape[:3], self.affine)
        for a in (arr, bvals, bvecs):
            a.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "affine", grid.affine)
        object.__setattr__(self, "bvals", bvals)
        object.__setattr__(self, "bvecs", bvecs)
        object.__setattr__(self, "_grid", grid)

    @property
    def grid(self) -> Grid:
        return self._grid

    @property
    def volumes(self):
        return [Volume3D(self.data[..., i], self.affine, "float32") for i in range(self.data.shape[3])]

    @property
    def b0_mask(self):
        return self.bvals <= self.b0_threshold


def _n_distinct_axes(dirs, tol=1e-6):
    axes = []
    for g in dirs:
        if not any(abs(abs(float(g @ a)) - 1.0) < tol for a in axes):
            axes.append(g)
    return len(axes)


@dataclass(frozen=True, eq=False)
class GridTransform:
    """Maps world points of a target grid into the world frame of a source volume.

    ``kind == "affine"``: ``p_src = matrix @ p``.  ``kind == "displacement"``:
    ``p_src = p + field[voxel of p on field_grid]``, with ``field`` of shape
    ``(nx, ny, nz, 3)`` in mm.  Displacement fields carry their inverse
    explicitly (``inverse``) or are flagged as not invertible.
    """

    kind: str
    matrix: np.ndarray | None = None
    field: np.ndarray | None = None
    field_grid: Grid | None = None
    inverse_transform: "GridTransform | None" = dc_field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "affine":
            m = np.array(self.matrix if self.matrix is not None else np.eye(4), dtype=np.float64)
            if m.shape != (4, 4):
                raise TransformError("affine transform must be 4x4")
            if not np.allclose(m[3], [0, 0, 0, 1]):
                raise TransformError("affine transform bottom row must be (0, 0, 0, 1)")
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
        elif self.kind == "displacement":
            f = np.array(self.field, dtype=np.float64)
            if self.field_grid is None or f.shape != tuple(self.field_grid.dims) + (3,):
                raise TransformError("displacement field must be (nx, ny, nz, 3) on its field_grid")
            if not np.all(np.isfinite(f)):
                raise TransformError("displacement field has non-finite entries")
            f.setflags(write=False)
            object.__setattr__(self, "field", f)
        else:
            raise TransformError(f"unknown transform kind {self.kind!r}")

    @classmethod
    def identity(cls):
        return cls("affine", np.eye(4))

    @property
    def invertible(self):
        if self.kind == "affine":
            return abs(np.linalg.det(self.matrix[:3, :3])) > 1e-12
        return self.inverse_transform is not None

    def inverse(self) -> "GridTransform":
        if self.kind == "affine":
            if not self.invertible:
                raise TransformError("affine transform is singular")
            return GridTransform("affine", np.linalg.inv(self.matrix))
        if self.inverse_transform is None:
            raise TransformError("displacement field has no stored inverse")
        return self.inverse_transform

    def apply(self, points):
        """Map an ``(n, 3)`` array of world points."""
        pts = np.asarray(points, dtype=np.float64)
        if self.kind == "affine":
            if not self.invertible:
                raise TransformError("affine transform is singular")
            return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]
        vox = np.rint(self.field_grid.world_to_voxel(pts)).astype(np.int64)
        inside = np.all((vox >= 0) & (vox < np.asarray(self.field_grid.dims)), axis=1)
        out = pts.copy()
        v = vox[inside]
        out[inside] += self.field[v[:, 0], v[:, 1], v[:, 2]]
        return out
