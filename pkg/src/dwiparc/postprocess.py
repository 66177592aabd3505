"""Post-processing chain: coarse-mask restriction, dilation, largest component, native restore."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .resample import resample_to
from .schema import LabelVolume, merge_fine, split_by_group

CONNECTIVITY = {6: 1, 18: 2, 26: 3}

_SHIFTS6 = [(a, d) for a in range(3) for d in (-1, 1)]


@dataclass(frozen=True)
class PostprocessConfig:
    connectivity: int = 26
    max_dilation_iters: int | None = None

    def __post_init__(self):
        if self.connectivity not in CONNECTIVITY:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        return cls(int(d.get("connectivity", 26)), d.get("max_dilation_iters"))

    def to_dict(self):
        return {"connectivity": self.connectivity, "max_dilation_iters": self.max_dilation_iters}


def _data(x):
    return np.asarray(getattr(x, "data", x))


def restrict_to_coarse(fine: LabelVolume, coarse: LabelVolume, group) -> LabelVolume:
    """Zero every fine voxel whose coarse label is not ``group``."""
    out = np.where(_data(coarse) == group, _data(fine), 0)
    return fine.with_data(out)


def dilate_labels(labels, mask, max_iters=None):
    """Grow labels into unlabeled voxels of ``mask`` with a 6-neighbourhood.

    Each sweep is synchronous: an unlabeled mask voxel with labeled face
    neighbours takes the smallest of their labels.  Labeled voxels never
    change.  Runs until no voxel changes or ``max_iters`` sweeps.
    """
    lab = np.array(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any() or not lab.any():
        return lab
    # work inside the mask's bounding box, with a one-voxel pad
    box = ndimage.find_objects(mask.astype(np.int8))[0]
    box = tuple(slice(max(s.start - 1, 0), min(s.stop + 1, n)) for s, n in zip(box, mask.shape))
    sub = lab[box]
    m = mask[box]
    big = np.iinfo(np.int64).max
    it = 0
    while max_iters is None or it < max_iters:
        todo = m & (sub == 0)
        if not todo.any():
            break
        src = np.where(sub > 0, sub, big)
        best = np.full(sub.shape, big, dtype=np.int64)
        for axis, d in _SHIFTS6:
            shifted = np.full(sub.shape, big, dtype=np.int64)
            dst = [slice(None)] * 3
            orig = [slice(None)] * 3
            if d > 0:
                dst[axis], orig[axis] = slice(1, None), slice(None, -1)
            else:
                dst[axis], orig[axis] = slice(None, -1), slice(1, None)
            shifted[tuple(dst)] = src[tuple(orig)]
            np.minimum(best, shifted, out=best)
        grow = todo & (best < big)
        if not grow.any():
            break
        sub = np.where(grow, best, sub)
        it += 1
    lab[box] = sub
    return lab


def dilate_into_mask(fine: LabelVolume, mask, max_iters=None) -> LabelVolume:
    return fine.with_data(dilate_labels(fine.data, _data(mask) != 0, max_iters))


def keep_largest_components(labels, connectivity=26):
    """Per label, zero all connected components except the largest.

    Equal sizes resolve to the component whose lexicographically smallest
    voxel coordinate comes first.
    """
    lab = np.array(labels, dtype=np.int64)
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY[connectivity])
    boxes = ndimage.find_objects(lab)
    for value, box in enumerate(boxes, start=1):
        if box is None:
            continue
        region = lab[box] == value
        comp, n = ndimage.label(region, structure=structure)
        if n <= 1:
            continue
        flat = comp.ravel()
        sizes = np.bincount(flat)[1:]
        # C-order first occurrence == lexicographically smallest (x, y, z)
        ids, first = np.unique(flat, return_index=True)
        first = dict(zip(ids.tolist(), first.tolist()))
        tied = np.flatnonzero(sizes == sizes.max()) + 1
        keep = min(tied, key=lambda c: first[int(c)])
        drop = region & (comp != keep)
        view = lab[box]
        view[drop] = 0
    return lab


def largest_component(labels: LabelVolume, connectivity=26) -> LabelVolume:
    return labels.with_data(keep_largest_components(labels.data, connectivity))


def postprocess_group(fine: LabelVolume, coarse: LabelVolume, group, cfg: PostprocessConfig | None = None) -> LabelVolume:
    """restrict -> dilate -> largest component for one fine-stage group.

    If the component filter removed voxels, the holes are refilled by one
    more dilate/filter round; voxels added that way touch their label's kept
    component, so the second filter removes nothing and the chain is
    idempotent.
    """
    cfg = cfg or PostprocessConfig()
    mask = _data(coarse) == group
    lab = np.where(mask, _data(fine), 0)
    lab = dilate_labels(lab, mask, cfg.max_dilation_iters)
    filtered = keep_largest_components(lab, cfg.connectivity)
    if not np.array_equal(filtered, lab):
        filtered = keep_largest_components(dilate_labels(filtered, mask, cfg.max_dilation_iters), cfg.connectivity)
    return fine.with_data(filtered)


def postprocess_results(fine_results, coarse: LabelVolume, cfg: PostprocessConfig | None = None):
    """Apply :func:`postprocess_group` to each fine-stage result (``{group id: LabelVolume}``)."""
    return {gid: postprocess_group(res, coarse, gid, cfg) for gid, res in fine_results.items()}


def postprocess_labels(fine: LabelVolume, coarse: LabelVolume, cfg: PostprocessConfig | None = None) -> LabelVolume:
    """Chain on an already merged fine volume: split by group, process, merge."""
    return merge_fine(coarse, postprocess_results(split_by_group(fine), coarse, cfg))


def to_native(labels: LabelVolume, inverse_transform, native_grid) -> LabelVolume:
    """Nearest-neighbour resample of a label volume onto the native grid.

    ``inverse_transform`` maps native world points into the labels' frame.
    """
    vol = resample_to(labels.volume, native_grid, inverse_transform, "nearest")
    return LabelVolume(vol, labels.schema, labels.space)
