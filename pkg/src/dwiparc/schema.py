"""Label inventory, coarse grouping and FreeSurfer lookup-table mapping.

Schema JSON grammar::

    {
      "name": "DK-101",
      "labels": [{"id": 1, "lut_id": 2, "name": "...", "hemisphere": "left"}, ...],
      "groups": [{"id": 1, "name": "...", "passthrough": true, "labels": [1]}, ...]
    }

``id`` values are internal label ids (>= 1).  ``groups`` must hold exactly
seven entries with ids 1..7; the two ``passthrough`` groups (one per
hemisphere) each own a single label that the coarse stage assigns directly,
the other five are refined by dedicated fine-stage predictors.  Every label
belongs to exactly one group.  ``lut_id`` values must be distinct and nonzero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import LabelDataError, SchemaValidationError
from .volume import Volume3D

N_GROUPS = 7
N_FINE_GROUPS = 5
SPACES = ("fine-internal", "coarse", "freesurfer-lut")


@dataclass(frozen=True)
class FineLabel:
    id: int
    lut_id: int
    name: str
    hemisphere: str = ""


@dataclass(frozen=True)
class CoarseGroup:
    id: int
    name: str
    labels: tuple
    passthrough: bool = False


@dataclass(frozen=True, eq=False)
class LabelSchema:
    name: str
    labels: tuple
    groups: tuple

    def __post_init__(self):
        _validate(self)
        by_id = {lab.id: lab for lab in self.labels}
        f2c = {lid: g.id for g in self.groups for lid in g.labels}
        object.__setattr__(self, "_by_id", by_id)
        object.__setattr__(self, "_by_lut", {lab.lut_id: lab for lab in self.labels})
        object.__setattr__(self, "_fine_to_coarse", f2c)

    # lookups

    @property
    def fine_ids(self):
        return tuple(sorted(self._by_id))

    @property
    def fine_to_coarse(self):
        return dict(self._fine_to_coarse)

    @property
    def group_ids(self):
        return tuple(g.id for g in self.groups)

    @property
    def fine_groups(self):
        """The five groups refined by fine-stage predictors, in id order."""
        return tuple(g for g in self.groups if not g.passthrough)

    @property
    def passthrough_groups(self):
        return tuple(g for g in self.groups if g.passthrough)

    @property
    def wm_passthrough(self):
        return tuple(g.labels[0] for g in self.passthrough_groups)

    @property
    def group_partitions(self):
        return {g.id: tuple(g.labels) for g in self.fine_groups}

    def group(self, gid) -> CoarseGroup:
        for g in self.groups:
            if g.id == gid:
                return g
        raise KeyError(f"no coarse group {gid}")

    def label(self, lid) -> FineLabel:
        return self._by_id[lid]

    def name_of(self, lid, space="fine-internal"):
        if space == "freesurfer-lut":
            return self._by_lut[lid].name
        if space == "coarse":
            return self.group(lid).name
        return self._by_id[lid].name

    def lut_to_internal(self, lut_id):
        return self._by_lut[lut_id].id

    # serialisation

    def to_dict(self):
        return {
            "name": self.name,
            "labels": [
                {"id": l.id, "lut_id": l.lut_id, "name": l.name, "hemisphere": l.hemisphere} for l in self.labels
            ],
            "groups": [
                dict({"id": g.id, "name": g.name}, **({"passthrough": True} if g.passthrough else {}), labels=list(g.labels))
                for g in self.groups
            ],
        }

    @classmethod
    def from_dict(cls, doc):
        try:
            labels = tuple(
                FineLabel(int(l["id"]), int(l["lut_id"]), str(l["name"]), str(l.get("hemisphere", "")))
                for l in doc["labels"]
            )
            groups = tuple(
                CoarseGroup(int(g["id"]), str(g["name"]), tuple(int(x) for x in g["labels"]), bool(g.get("passthrough", False)))
                for g in doc["groups"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaValidationError(f"malformed schema document: {exc!r}") from exc
        return cls(str(doc.get("name", "")), labels, groups)


def _validate(schema):
    seen = {}
    for lab in schema.labels:
        if lab.id < 1:
            raise SchemaValidationError(f"label {lab.name!r}: internal id must be >= 1, got {lab.id}")
        if lab.id in seen:
            raise SchemaValidationError(f"duplicate internal id {lab.id} ({seen[lab.id]!r}, {lab.name!r})")
        seen[lab.id] = lab.name
    luts = {}
    for lab in schema.labels:
        if lab.lut_id <= 0:
            raise SchemaValidationError(f"label {lab.id} ({lab.name!r}): LUT id must be positive")
        if lab.lut_id in luts:
            raise SchemaValidationError(
                f"label {lab.id} ({lab.name!r}): LUT id {lab.lut_id} already used by label {luts[lab.lut_id]}"
            )
        luts[lab.lut_id] = lab.id

    gids = sorted(g.id for g in schema.groups)
    if len(schema.groups) != N_GROUPS:
        raise SchemaValidationError(f"expected {N_GROUPS} groups, got {len(schema.groups)}")
    if gids != list(range(1, N_GROUPS + 1)):
        raise SchemaValidationError(f"group ids must be 1..{N_GROUPS}, got {gids}")

    owner = {}
    for g in schema.groups:
        if not g.labels:
            raise SchemaValidationError(f"group {g.id} ({g.name!r}) has no labels")
        for lid in g.labels:
            if lid not in seen:
                raise SchemaValidationError(f"group {g.id} ({g.name!r}) lists unknown label {lid}")
            if lid in owner:
                raise SchemaValidationError(
                    f"label {lid} ({seen[lid]!r}) appears in groups {owner[lid]} and {g.id}"
                )
            owner[lid] = g.id
    for lid, name in seen.items():
        if lid not in owner:
            raise SchemaValidationError(f"label {lid} ({name!r}) is not mapped to any group")

    passthrough = [g for g in schema.groups if g.passthrough]
    if len(passthrough) != N_GROUPS - N_FINE_GROUPS:
        raise SchemaValidationError(f"expected 2 passthrough (white matter) groups, got {len(passthrough)}")
    for g in passthrough:
        if len(g.labels) != 1:
            raise SchemaValidationError(f"passthrough group {g.id} ({g.name!r}) must own exactly 1 label")
    hemis = {schema_label(schema, g.labels[0]).hemisphere for g in passthrough}
    if hemis != {"left", "right"}:
        raise SchemaValidationError(f"passthrough labels must cover left and right hemispheres, got {sorted(hemis)}")


def schema_label(schema, lid):
    return next(l for l in schema.labels if l.id == lid)


def load_schema(path=None) -> LabelSchema:
    """Load and validate a schema file; the bundled DK-101 schema when ``path`` is None."""
    if path is None:
        text = resources.files("dwiparc").joinpath("data/dk101.json").read_text()
    else:
        text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaValidationError(f"{path or 'dk101.json'}: invalid JSON: {exc}") from exc
    return LabelSchema.from_dict(doc)


def default_schema() -> LabelSchema:
    return load_schema(None)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label volume tagged with its schema and label space."""

    volume: Volume3D
    schema: LabelSchema
    space: str = "fine-internal"

    def __post_init__(self):
        if self.space not in SPACES:
            raise ValueError(f"unknown label space {self.space!r}")
        vol = self.volume
        if vol.dtype != "int32":
            vol = Volume3D(vol.data.astype(np.int32), vol.affine, "int32")
            object.__setattr__(self, "volume", vol)
        allowed = self.allowed_values()
        present = np.unique(vol.data)
        bad = present[~np.isin(present, allowed)]
        if bad.size:
            raise LabelDataError(f"values {bad[:10].tolist()} are not in the {self.space} label space")

    def allowed_values(self):
        if self.space == "coarse":
            ids = self.schema.group_ids
        elif self.space == "freesurfer-lut":
            ids = [l.lut_id for l in self.schema.labels]
        else:
            ids = self.schema.fine_ids
        return np.array([0, *ids], dtype=np.int64)

    @property
    def data(self):
        return self.volume.data

    @property
    def grid(self):
        return self.volume.grid

    def with_data(self, data, space=None):
        return LabelVolume(Volume3D(np.asarray(data, dtype=np.int32), self.volume.affine, "int32"), self.schema, space or self.space)


def _relabel(data, mapping, what):
    data = np.asarray(data, dtype=np.int64)
    if data.size and data.min() < 0:
        raise LabelDataError(f"negative {what} label value")
    size = max(int(data.max(initial=0)), max(mapping, default=0)) + 1
    table = np.full(size, -1, dtype=np.int64)
    table[0] = 0
    for src, dst in mapping.items():
        table[src] = dst
    out = table[data]
    if np.any(out < 0):
        bad = np.unique(data[out < 0])
        raise LabelDataError(f"{what} values {bad[:10].tolist()} are outside the schema")
    return out.astype(np.int32)


def coarse_project(fine: LabelVolume) -> LabelVolume:
    """Map every fine label to its coarse group id (background stays 0)."""
    if fine.space != "fine-internal":
        raise LabelDataError(f"coarse_project needs fine-internal labels, got {fine.space}")
    out = _relabel(fine.data, fine.schema.fine_to_coarse, "fine")
    return fine.with_data(out, "coarse")


def to_freesurfer_lut(labels: LabelVolume) -> LabelVolume:
    if labels.space != "fine-internal":
        raise LabelDataError(f"to_freesurfer_lut needs fine-internal labels, got {labels.space}")
    mapping = {l.id: l.lut_id for l in labels.schema.labels}
    return labels.with_data(_relabel(labels.data, mapping, "fine"), "freesurfer-lut")


def from_freesurfer_lut(labels: LabelVolume) -> LabelVolume:
    if labels.space != "freesurfer-lut":
        raise LabelDataError(f"from_freesurfer_lut needs LUT labels, got {labels.space}")
    mapping = {l.lut_id: l.id for l in labels.schema.labels}
    return labels.with_data(_relabel(labels.data, mapping, "LUT"), "fine-internal")


def merge_fine(coarse: LabelVolume, fine_results) -> LabelVolume:
    """Assemble the full fine label volume from the coarse map and per-group results.

    ``fine_results`` maps each fine-stage group id to a fine-internal
    LabelVolume holding only that group's labels (or 0).  White-matter groups
    take their passthrough label; every other voxel takes the result of its
    own coarse group, so fine labels outside their group's coarse region are
    dropped.
    """
    schema = coarse.schema
    if coarse.space != "coarse":
        raise LabelDataError(f"merge_fine needs a coarse label volume, got {coarse.space}")
    expected = {g.id for g in schema.fine_groups}
    if set(fine_results) != expected:
        raise LabelDataError(f"need fine results for groups {sorted(expected)}, got {sorted(fine_results)}")
    cdata = coarse.data
    out = np.zeros(coarse.volume.dims, dtype=np.int32)
    for g in schema.passthrough_groups:
        out[cdata == g.id] = g.labels[0]
    for gid, res in fine_results.items():
        if not res.grid.same_as(coarse.grid):
            raise LabelDataError(f"fine result for group {gid} is on a different grid")
        allowed = np.array([0, *schema.group(gid).labels])
        present = np.unique(res.data)
        stray = present[~np.isin(present, allowed)]
        if stray.size:
            raise LabelDataError(f"fine result for group {gid} contains labels {stray[:10].tolist()} outside its partition")
        sel = cdata == gid
        out[sel] = res.data[sel]
    return coarse.with_data(out, "fine-internal")


def split_by_group(fine: LabelVolume):
    """Inverse of :func:`merge_fine`: per fine-stage group, the labels belonging to it."""
    f2c = _relabel(fine.data, fine.schema.fine_to_coarse, "fine")
    return {g.id: fine.with_data(np.where(f2c == g.id, fine.data, 0)) for g in fine.schema.fine_groups}
