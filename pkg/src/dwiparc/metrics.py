"""Overlap, surface-distance and homogeneity metrics with per-region reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptySummaryError, LabelDataError

REPORT_COLUMNS = ("id", "name", "voxels_pred", "voxels_gt", "dsc", "hd95_mm", "rsd_fa", "rsd_md", "rsd_cs")
RSD_COLUMNS = ("id", "name", "map", "voxels", "mean", "std", "rsd")
UNDEFINED = math.nan

_FACE = ndimage.generate_binary_structure(3, 1)


def _arr(x):
    return np.asarray(getattr(x, "data", x))


def _check_grid(pred, gt):
    if _arr(pred).shape != _arr(gt).shape:
        raise LabelDataError(f"grid mismatch: {_arr(pred).shape} vs {_arr(gt).shape}")
    gp, gg = getattr(pred, "grid", None), getattr(gt, "grid", None)
    if gp is not None and gg is not None and not gp.same_as(gg, atol=1e-4):
        raise LabelDataError("prediction and reference do not share a grid")


def dice(a, b):
    """Dice of two boolean masks; 1 when both are empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def dsc(pred, gt, label):
    _check_grid(pred, gt)
    return dice(_arr(pred) == label, _arr(gt) == label)


def boundary(mask):
    """Mask voxels with at least one face neighbour outside the mask (volume edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(mask, structure=_FACE, border_value=0)
    return mask & ~interior


def surface_distances(a, b, spacing=(1.0, 1.0, 1.0)):
    """Directed distances (mm) from each boundary voxel of ``a`` to the boundary of ``b``."""
    sa = np.argwhere(boundary(a)) * np.asarray(spacing, dtype=np.float64)
    sb = np.argwhere(boundary(b)) * np.asarray(spacing, dtype=np.float64)
    d, _ = cKDTree(sb).query(sa, k=1)
    return d


def hd95_masks(a, b, spacing=(1.0, 1.0, 1.0), pooled=True):
    """95th percentile Hausdorff distance between two masks.

    ``pooled=True`` takes the percentile of both directed distance sets
    together; ``pooled=False`` the max of the two directed percentiles.
    Returns NaN when either mask is empty.
    """
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if not a.any() or not b.any():
        return UNDEFINED
    dab = surface_distances(a, b, spacing)
    dba = surface_distances(b, a, spacing)
    if pooled:
        return float(np.percentile(np.concatenate([dab, dba]), 95))
    return float(max(np.percentile(dab, 95), np.percentile(dba, 95)))


def hd95(pred, gt, label, spacing=None, pooled=True):
    _check_grid(pred, gt)
    if spacing is None:
        spacing = getattr(gt, "spacing", None) or getattr(getattr(gt, "volume", None), "spacing", (1.0, 1.0, 1.0))
    return hd95_masks(_arr(pred) == label, _arr(gt) == label, spacing, pooled)


@dataclass
class RegionStats:
    id: int
    voxels: int
    mean: float
    std: float
    rsd: float


def rsd(map_volume, labels):
    """Per nonzero label: mean, population std and std/mean of the map inside the region.

    Regions with fewer than 2 voxels or |mean| <= 1e-12 get NaN RSD.
    """
    values = np.asarray(_arr(map_volume), dtype=np.float64)
    lab = np.asarray(_arr(labels))
    if values.shape != lab.shape:
        raise LabelDataError("map and labels do not share a grid")
    out = {}
    for lid in np.unique(lab):
        if lid == 0:
            continue
        v = values[lab == lid]
        mean = float(v.mean())
        std = float(v.std())
        ok = v.size >= 2 and abs(mean) > 1e-12
        out[int(lid)] = RegionStats(int(lid), int(v.size), mean, std, std / mean if ok else UNDEFINED)
    return out


@dataclass
class RegionReport:
    id: int
    name: str
    voxels_pred: int
    voxels_gt: int
    dsc: float
    hd95_mm: float
    rsd_fa: float = UNDEFINED
    rsd_md: float = UNDEFINED
    rsd_cs: float = UNDEFINED


def evaluate(pred, gt, labels=None, names=None, spacing=None, maps=None, pooled=True):
    """One :class:`RegionReport` per label id.

    ``labels`` defaults to every nonzero id present in either volume;
    ``maps`` optionally holds ``{"FA": vol, "MD": vol, "CS": vol}`` whose RSD is
    taken over the predicted regions.
    """
    _check_grid(pred, gt)
    p, g = _arr(pred), _arr(gt)
    if labels is None:
        labels = sorted(int(x) for x in np.union1d(np.unique(p), np.unique(g)) if x != 0)
    names = names or {}
    rsds = {k: rsd(v, p) for k, v in (maps or {}).items()}
    reports = []
    for lid in labels:
        pm, gm = p == lid, g == lid
        rep = RegionReport(
            int(lid), names.get(lid, str(lid)), int(pm.sum()), int(gm.sum()),
            dice(pm, gm), hd95(pred, gt, lid, spacing, pooled),
        )
        for key, table in rsds.items():
            stat = table.get(int(lid))
            setattr(rep, f"rsd_{key.lower()}", stat.rsd if stat else UNDEFINED)
        reports.append(rep)
    return reports


def aggregate(reports, metrics=("dsc", "hd95_mm", "rsd_fa", "rsd_md", "rsd_cs")):
    """Unweighted mean and std across regions with a defined value, per metric."""
    summary = {"regions": len(reports)}
    any_defined = False
    for m in metrics:
        vals = np.array([float(getattr(r, m)) for r in reports], dtype=np.float64)
        ok = vals[np.isfinite(vals)]
        entry = {"defined": int(ok.size), "undefined": int(vals.size - ok.size)}
        if ok.size:
            any_defined = True
            entry["mean"] = float(ok.mean())
            entry["std"] = float(ok.std())
        summary[m] = entry
    if not any_defined:
        raise EmptySummaryError("no region has a defined metric value")
    return summary


def _fmt(x):
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def reports_to_csv(reports):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        d = asdict(r)
        w.writerow([_fmt(d[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def rsd_to_csv(tables, names=None):
    """``tables`` maps a map name to the output of :func:`rsd`."""
    names = names or {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RSD_COLUMNS)
    for map_name, table in tables.items():
        for lid in sorted(table):
            s = table[lid]
            w.writerow([lid, names.get(lid, str(lid)), map_name, s.voxels, _fmt(s.mean), _fmt(s.std), _fmt(s.rsd)])
    return buf.getvalue()


def summary_to_json(summary):
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"
