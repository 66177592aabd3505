"""Diffusion tensor fitting, eigen-decomposition and scalar maps.

Tensor components are stored in the order ``(Dxx, Dxy, Dxz, Dyy, Dyz, Dzz)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GradientSchemeError, UndefinedCorrelationError, VolumeError
from .volume import DwiSeries, Grid, Volume3D

SIGNAL_FLOOR = 1e-6
SHELL = 1000.0
SHELL_TOLERANCE = 50.0

# map name -> single-letter code used for input combinations
MAP_NAMES = ("FA", "TR", "MD", "CL", "CP", "CS", "E1", "E2", "E3")
CODE_TO_MAP = {"F": "FA", "T": "TR", "S": "CS", "L": "CL", "P": "CP", "E1": "E1", "E2": "E2", "E3": "E3", "MD": "MD"}
MAP_TO_CODE = {v: k for k, v in CODE_TO_MAP.items()}


@dataclass(frozen=True, eq=False)
class DiffusionTensorField:
    grid: Grid
    tensor: np.ndarray  # (nx, ny, nz, 6)
    log_s0: np.ndarray  # (nx, ny, nz)
    valid: np.ndarray  # (nx, ny, nz) bool

    def matrices(self):
        """Full symmetric ``(..., 3, 3)`` tensors."""
        return tensor_to_matrix(self.tensor)


@dataclass(frozen=True, eq=False)
class EigenSystem:
    grid: Grid
    evals: np.ndarray  # (nx, ny, nz, 3), descending
    evecs: np.ndarray | None = None  # (nx, ny, nz, 3, 3), columns match evals
    valid: np.ndarray | None = None


class ScalarMapSet(dict):
    """Named scalar maps (``"FA"``, ``"TR"``, ...) also addressable by letter code."""

    def __getitem__(self, key):
        if key not in self.keys() and key in CODE_TO_MAP:
            key = CODE_TO_MAP[key]
        return super().__getitem__(key)

    def __contains__(self, key):
        return super().__contains__(CODE_TO_MAP.get(key, key))

    def by_code(self, code):
        return self[CODE_TO_MAP[code]]


def tensor_to_matrix(t):
    t = np.asarray(t)
    xx, xy, xz, yy, yz, zz = np.moveaxis(t, -1, 0)
    return np.stack(
        [np.stack([xx, xy, xz], -1), np.stack([xy, yy, yz], -1), np.stack([xz, yz, zz], -1)], -2
    )


def matrix_to_tensor(m):
    m = np.asarray(m)
    return np.stack([m[..., 0, 0], m[..., 0, 1], m[..., 0, 2], m[..., 1, 1], m[..., 1, 2], m[..., 2, 2]], -1)


def design_matrix(bvals, bvecs):
    """Rows ``[1, -b gx^2, -2b gx gy, -2b gx gz, -b gy^2, -2b gy gz, -b gz^2]``."""
    b = np.asarray(bvals, dtype=np.float64)
    g = np.asarray(bvecs, dtype=np.float64)
    gx, gy, gz = g[:, 0], g[:, 1], g[:, 2]
    return np.column_stack(
        [np.ones_like(b), -b * gx * gx, -2 * b * gx * gy, -2 * b * gx * gz, -b * gy * gy, -2 * b * gy * gz, -b * gz * gz]
    )


def select_shell(bvals, b0_threshold=50.0, shell=SHELL, tolerance=SHELL_TOLERANCE):
    """Indices of acquisitions to fit: all b0s plus one shell.

    A single-shell scheme is used as-is; with several shells only the one
    within ``tolerance`` of ``shell`` is kept.
    """
    bvals = np.asarray(bvals, dtype=float)
    b0 = bvals <= b0_threshold
    weighted = bvals[~b0]
    if weighted.size == 0:
        raise GradientSchemeError("no diffusion-weighted acquisitions")
    if weighted.max() - weighted.min() <= 2 * tolerance:
        return np.arange(bvals.size)
    keep = b0 | (np.abs(bvals - shell) <= tolerance)
    if not np.any(keep & ~b0):
        raise GradientSchemeError(f"multi-shell scheme has no b={shell:g} shell")
    return np.flatnonzero(keep)


def fit_tensor(dwi: DwiSeries, shell=SHELL) -> DiffusionTensorField:
    """Ordinary least squares fit of the log-linear signal model.

    Solves ``ln S_i = ln S0 - b_i g_i^T D g_i`` per voxel.  Samples <= 0 are
    floored at 1e-6 before the log; voxels whose mean b0 signal is <= 1e-6 are
    flagged invalid and get a zero tensor.
    """
    idx = select_shell(dwi.bvals, dwi.b0_threshold, shell)
    A = design_matrix(dwi.bvals[idx], dwi.bvecs[idx])
    if np.linalg.matrix_rank(A) < 7:
        raise GradientSchemeError("gradient scheme cannot determine all 6 tensor components")
    pinv = np.linalg.pinv(A)

    signal = np.asarray(dwi.data[..., idx], dtype=np.float64)
    b0 = dwi.b0_mask[idx]
    valid = signal[..., b0].mean(axis=-1) > SIGNAL_FLOOR
    logs = np.log(np.maximum(signal, SIGNAL_FLOOR))
    coef = logs @ pinv.T
    coef[~valid] = 0.0
    return DiffusionTensorField(dwi.grid, coef[..., 1:], coef[..., 0], valid)


def synthesize_signal(tensor, s0, bvals, bvecs):
    """Noiseless signals for tensors ``(..., 6)``; returns ``(..., n)``."""
    A = design_matrix(bvals, bvecs)
    t = np.asarray(tensor, dtype=np.float64)
    return np.asarray(s0, dtype=np.float64)[..., None] * np.exp(t @ A[:, 1:].T)


def eigendecompose(t, vectors=True) -> EigenSystem:
    """Per-voxel eigenvalues sorted descending (plus eigenvectors when requested).

    Accepts a :class:`DiffusionTensorField` or a raw ``(..., 6)`` array.
    Invalid voxels yield zero eigenvalues.
    """
    if isinstance(t, DiffusionTensorField):
        comps, grid, valid = t.tensor, t.grid, t.valid
    else:
        comps, grid, valid = np.asarray(t, dtype=np.float64), None, None
    mats = tensor_to_matrix(comps)
    w, v = np.linalg.eigh(mats)
    w = w[..., ::-1]
    v = v[..., ::-1]
    if valid is not None:
        w = np.where(valid[..., None], w, 0.0)
        v = np.where(valid[..., None, None], v, np.eye(3))
    return EigenSystem(grid, w, v if vectors else None, valid)


def _ratio(num, den):
    out = np.zeros(np.broadcast(num, den).shape)
    ok = den > 0
    np.divide(num, den, out=out, where=ok)
    return out


def shape_measures(evals):
    """Dict of FA, TR, MD, CL, CP, CS, E1, E2, E3 arrays from ``(..., 3)`` sorted eigenvalues."""
    lam = np.asarray(evals, dtype=np.float64)
    l1, l2, l3 = lam[..., 0], lam[..., 1], lam[..., 2]
    trace = l1 + l2 + l3
    sq = l1 * l1 + l2 * l2 + l3 * l3
    disp = (l1 - l2) ** 2 + (l2 - l3) ** 2 + (l1 - l3) ** 2
    fa = np.sqrt(np.clip(_ratio(disp, 2.0 * sq), 0.0, None))
    return {
        "FA": np.clip(fa, 0.0, 1.0),
        "TR": trace,
        "MD": trace / 3.0,
        "CL": _ratio(l1 - l2, trace),
        "CP": _ratio(2.0 * (l2 - l3), trace),
        "CS": _ratio(3.0 * l3, trace),
        "E1": l1,
        "E2": l2,
        "E3": l3,
    }


def derive_maps(e: EigenSystem, selection=None) -> ScalarMapSet:
    """Scalar maps as float32 volumes on the eigensystem grid.

    ``selection`` is an iterable of map names or letter codes; all nine maps
    when omitted.
    """
    if e.grid is None:
        raise VolumeError("eigensystem has no grid; use shape_measures for raw arrays")
    wanted = MAP_NAMES if selection is None else [CODE_TO_MAP.get(s, s) for s in selection]
    unknown = [w for w in wanted if w not in MAP_NAMES]
    if unknown:
        raise ValueError(f"unknown map codes {unknown}")
    measures = shape_measures(e.evals)
    out = ScalarMapSet()
    for name in MAP_NAMES:
        if name in wanted:
            out[name] = Volume3D(measures[name].astype(np.float32), e.grid.affine, "float32")
    return out


def map_correlation(a, b, mask=None):
    """Pearson correlation of two maps over the voxels selected by ``mask``."""
    x = np.asarray(getattr(a, "data", a), dtype=np.float64)
    y = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if x.shape != y.shape:
        raise VolumeError("maps do not share a grid")
    if mask is None:
        sel = np.ones(x.shape, dtype=bool)
    else:
        sel = np.asarray(getattr(mask, "data", mask)) != 0
        if sel.shape != x.shape:
            raise VolumeError("mask does not share the maps' grid")
    x, y = x[sel], y[sel]
    if x.size < 2:
        raise UndefinedCorrelationError("correlation needs at least 2 voxels")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("a map has zero variance inside the mask")
    return float(dx @ dy / np.sqrt(sxx * syy))
