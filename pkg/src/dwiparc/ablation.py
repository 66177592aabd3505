"""Input-map combination studies: enumeration, per-run configs, leaderboards."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

# MD is left out: it is TR / 3 and adds nothing as a separate input
VOCABULARY = ("F", "T", "S", "L", "P", "E1", "E2", "E3")
LOWER_IS_BETTER = {"hd95", "hd95_mm", "rsd", "rsd_fa", "rsd_md", "rsd_cs"}
LEADERBOARD_COLUMNS = ("combination", "metric", "mean", "std", "rank")


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(config):
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def parse_combination(text):
    """``"T+F+S+E1"`` (or ``"T_F_S_E1"``) -> ``("T", "F", "S", "E1")``."""
    if isinstance(text, (list, tuple)):
        codes = tuple(str(c) for c in text)
    else:
        codes = tuple(c for c in str(text).replace("_", "+").replace(",", "+").split("+") if c)
    check_combination(codes)
    return codes


def check_combination(codes):
    if not codes:
        raise ValueError("combination is empty")
    bad = [c for c in codes if c not in VOCABULARY]
    if bad:
        raise ValueError(f"unknown map codes {bad}; vocabulary is {VOCABULARY}")
    if len(set(codes)) != len(codes):
        raise ValueError(f"duplicate codes in {codes}")


def enumerate_combinations(codes=VOCABULARY, sizes=(1,)):
    """All size-k subsets for each k, codes in vocabulary order, no duplicates."""
    check_combination(tuple(codes))
    codes = [c for c in VOCABULARY if c in set(codes)]
    out, seen = [], set()
    for k in sizes:
        k = int(k)
        if not 1 <= k <= len(codes):
            raise ValueError(f"subset size {k} not in 1..{len(codes)}")
        for combo in itertools.combinations(codes, k):
            if combo not in seen:
                seen.add(combo)
                out.append(combo)
    return out


@dataclass
class RunManifest:
    combination: tuple
    metric: str
    mean: float
    std: float = 0.0
    config_hash: str = ""
    regions: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def __post_init__(self):
        self.combination = parse_combination(self.combination)

    @property
    def label(self):
        return "+".join(self.combination)

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["combination"], d["metric"], float(d["mean"]), float(d.get("std", 0.0)),
            d.get("config_hash", ""), d.get("regions", {}), d.get("timestamps", {}),
        )

    def to_dict(self):
        return {
            "combination": list(self.combination), "metric": self.metric, "mean": self.mean, "std": self.std,
            "config_hash": self.config_hash, "regions": self.regions, "timestamps": self.timestamps,
        }


def rank_runs(manifests, metric=None):
    """Order runs best-first.

    DSC-like metrics rank descending, distances and RSD ascending.  Ties go
    to fewer input maps, then to the lexicographically smaller combination.
    """
    runs = list(manifests)
    metrics = {m.metric for m in runs}
    if metric is None and len(metrics) == 1:
        metric = metrics.pop()
    if any(m.metric != metric for m in runs):
        raise ValueError(f"runs mix metrics {sorted({m.metric for m in runs})}")
    sign = 1.0 if str(metric).lower() in LOWER_IS_BETTER else -1.0
    return sorted(runs, key=lambda m: (sign * m.mean, len(m.combination), m.combination))


def leaderboard_csv(ranked):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LEADERBOARD_COLUMNS)
    for i, m in enumerate(ranked, start=1):
        w.writerow([m.label, m.metric, repr(m.mean), repr(m.std), i])
    return buf.getvalue()


def manifest_name(combination):
    return "_".join(combination) + ".json"


def emit_manifest_set(combinations, base_config, out_dir):
    """Write one pipeline config per combination; only ``map_codes`` differs.

    Files are named by joined codes and written with sorted keys, so
    regenerating produces identical bytes.  Returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base_hash = config_hash(base_config)
    paths = []
    for combo in combinations:
        combo = parse_combination(combo)
        cfg = dict(base_config)
        cfg["map_codes"] = list(combo)
        doc = {"combination": list(combo), "base_config_hash": base_hash, "config": cfg}
        path = out_dir / manifest_name(combo)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        paths.append(path)
    return paths
