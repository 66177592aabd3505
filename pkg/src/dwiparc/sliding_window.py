"""Gaussian-blended sliding-window inference over a backend."""

from __future__ import annotations

import itertools
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import BackendContractError, BackendError
from .volume import Grid, Volume3D

# channel sums this close to 1 mark backend output as probabilities already
PROB_SUM_TOL = 1e-3


@dataclass(frozen=True)
class SlidingWindowConfig:
    patch_shape: tuple = (128, 128, 128)
    overlap: float = 0.5
    sigma_fraction: float = 1.0 / 8.0

    def __post_init__(self):
        patch = self.patch_shape
        if isinstance(patch, int):
            patch = (patch,) * 3
        patch = tuple(int(p) for p in patch)
        if len(patch) != 3 or min(patch) < 1:
            raise ValueError(f"patch_shape must be three positive ints, got {self.patch_shape}")
        if not 0.0 <= self.overlap < 1.0:
            raise ValueError(f"overlap must lie in [0, 1), got {self.overlap}")
        if not self.sigma_fraction > 0:
            raise ValueError("sigma_fraction must be positive")
        object.__setattr__(self, "patch_shape", patch)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(
            patch_shape=d.get("patch_shape", d.get("patch", (128, 128, 128))),
            overlap=float(d.get("overlap", 0.5)),
            sigma_fraction=float(d.get("sigma_fraction", 1.0 / 8.0)),
        )

    def to_dict(self):
        return {"patch_shape": list(self.patch_shape), "overlap": self.overlap, "sigma_fraction": self.sigma_fraction}


@dataclass(frozen=True, eq=False)
class ProbabilityVolume:
    """Per-class probabilities ``(K, nx, ny, nz)`` plus the accumulated blending weight."""

    probs: np.ndarray
    weight: np.ndarray
    grid: Grid

    @property
    def n_classes(self):
        return self.probs.shape[0]

    def channel(self, k) -> Volume3D:
        return Volume3D(self.probs[k], self.grid.affine, "float32")

    def argmax(self):
        return np.argmax(self.probs, axis=0).astype(np.int32)


def gaussian_weight(patch_shape, sigma_fraction=1.0 / 8.0):
    """Separable Gaussian with peak 1 at the patch centre, sigma = fraction * edge."""
    if not sigma_fraction > 0:
        raise ValueError("sigma_fraction must be positive")
    axes = []
    for s in patch_shape:
        sigma = sigma_fraction * s
        x = np.arange(s, dtype=np.float64) - (s - 1) / 2.0
        axes.append(np.exp(-(x * x) / (2.0 * sigma * sigma)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w


def tile_starts(size, patch, overlap):
    """Start offsets along one axis; the last tile sits flush with the end."""
    if size <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


def _as_channels(channels):
    if isinstance(channels, np.ndarray):
        return channels.astype(np.float32, copy=False), None
    vols = list(channels)
    grid = vols[0].grid
    for v in vols[1:]:
        if not v.grid.same_as(grid):
            raise ValueError("input channels do not share a grid")
    return np.stack([v.data.astype(np.float32) for v in vols]), grid


def to_probabilities(scores):
    """Pass distributions through; softmax anything else along axis 0."""
    s = np.asarray(scores, dtype=np.float64)
    if np.all(s >= 0) and np.all(np.abs(s.sum(axis=0) - 1.0) <= PROB_SUM_TOL):
        return s
    s = s - s.max(axis=0, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=0, keepdims=True)


def sliding_window_predict(channels, backend, cfg: SlidingWindowConfig | None = None, grid=None, workers=1) -> ProbabilityVolume:
    """Tile, predict, blend.

    ``channels`` is a list of Volume3D (or a ``(C, nx, ny, nz)`` array with an
    explicit ``grid``).  The volume is zero-padded at the far end of any axis
    shorter than the patch.  Tile outputs are accumulated in tile order, so
    results do not depend on ``workers``.
    """
    cfg = cfg or SlidingWindowConfig()
    data, vol_grid = _as_channels(channels)
    grid = grid or vol_grid
    if data.shape[0] != backend.in_channels:
        raise BackendContractError(f"backend takes {backend.in_channels} channels, got {data.shape[0]}")
    shape = data.shape[1:]
    patch = cfg.patch_shape
    padded = tuple(max(n, p) for n, p in zip(shape, patch))
    if padded != shape:
        buf = np.zeros((data.shape[0],) + padded, dtype=np.float32)
        buf[:, : shape[0], : shape[1], : shape[2]] = data
        data = buf

    gauss = gaussian_weight(patch, cfg.sigma_fraction).astype(np.float32)
    K = backend.n_classes
    acc = np.zeros((K,) + padded, dtype=np.float32)
    weight = np.zeros(padded, dtype=np.float32)
    tiles = list(itertools.product(*(tile_starts(n, p, cfg.overlap) for n, p in zip(padded, patch))))

    def run(start):
        sl = tuple(slice(s, s + p) for s, p in zip(start, patch))
        scores = backend(data[(slice(None),) + sl])
        if not np.all(np.isfinite(scores)):
            raise BackendError(f"{backend.name}: non-finite scores for tile at {start}")
        return sl, to_probabilities(scores).astype(np.float32)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run, tiles)
            for sl, probs in results:
                acc[(slice(None),) + sl] += probs * gauss
                weight[sl] += gauss
    else:
        for start in tiles:
            sl, probs = run(start)
            acc[(slice(None),) + sl] += probs * gauss
            weight[sl] += gauss

    crop = tuple(slice(0, n) for n in shape)
    acc = acc[(slice(None),) + crop]
    weight = weight[crop]
    covered = weight > 0
    np.divide(acc, weight, out=acc, where=covered)
    total = acc.sum(axis=0)
    np.divide(acc, total, out=acc, where=covered & (total > 0))
    if grid is None:
        grid = Grid(shape, np.eye(4))
    return ProbabilityVolume(acc, weight, grid)
