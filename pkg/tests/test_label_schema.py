import copy
import json
from collections import Counter

import numpy as np
import pytest

from dwiparc.errors import LabelDataError, SchemaValidationError
from dwiparc.schema import (
    LabelSchema,
    LabelVolume,
    coarse_project,
    default_schema,
    from_freesurfer_lut,
    load_schema,
    merge_fine,
    split_by_group,
    to_freesurfer_lut,
)
from dwiparc.volume import Volume3D

from phantoms import box_phantom, toy_schema


def _doc(schema):
    return copy.deepcopy(schema.to_dict())


def test_bundled_schema_shape():
    s = default_schema()
    assert len(s.labels) == 101
    assert len(s.groups) == 7
    sizes = {g.name: len(g.labels) for g in s.groups}
    assert sorted(sizes.values()) == [1, 1, 5, 13, 13, 34, 34]
    luts = {l.lut_id for l in s.labels}
    assert {2, 41, 1001, 2035, 16, 17, 53}.issubset(luts)
    assert 1004 not in luts and 2004 not in luts
    # every cortical label sits in the group of its hemisphere
    for l in s.labels:
        g = s.group(s.fine_to_coarse[l.id])
        if 1000 < l.lut_id < 2000:
            assert l.hemisphere == "left" and "left" in g.name.lower()
        if 2000 < l.lut_id < 3000:
            assert l.hemisphere == "right" and "right" in g.name.lower()


def test_schema_dict_round_trip():
    s = default_schema()
    again = LabelSchema.from_dict(json.loads(json.dumps(s.to_dict())))
    assert again.to_dict() == s.to_dict()


def test_load_schema_from_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(toy_schema().to_dict()))
    assert len(load_schema(p).labels) == 21
    p.write_text("{not json")
    with pytest.raises(SchemaValidationError, match="invalid JSON"):
        load_schema(p)


def test_duplicate_lut_id_rejected():
    d = _doc(toy_schema())
    d["labels"][4]["lut_id"] = d["labels"][3]["lut_id"]
    with pytest.raises(SchemaValidationError, match="LUT id"):
        LabelSchema.from_dict(d)


def test_label_in_two_groups_rejected():
    d = _doc(toy_schema())
    d["groups"][3]["labels"].append(d["groups"][2]["labels"][0])
    with pytest.raises(SchemaValidationError, match="appears in groups"):
        LabelSchema.from_dict(d)


def test_unmapped_label_rejected():
    d = _doc(toy_schema())
    d["groups"][2]["labels"].pop()
    with pytest.raises(SchemaValidationError, match="not mapped"):
        LabelSchema.from_dict(d)


def test_group_count_rejected():
    d = _doc(toy_schema())
    d["groups"] = d["groups"][:6]
    with pytest.raises(SchemaValidationError, match="7 groups"):
        LabelSchema.from_dict(d)


def test_passthrough_rules():
    d = _doc(toy_schema())
    d["groups"][1]["passthrough"] = False
    with pytest.raises(SchemaValidationError, match="passthrough"):
        LabelSchema.from_dict(d)


def test_duplicate_internal_id():
    d = _doc(toy_schema())
    d["labels"][5]["id"] = d["labels"][4]["id"]
    with pytest.raises(SchemaValidationError, match="duplicate"):
        LabelSchema.from_dict(d)


def test_malformed_document():
    with pytest.raises(SchemaValidationError):
        LabelSchema.from_dict({"labels": [{"id": 1}], "groups": []})


def _vol(arr):
    return Volume3D(np.asarray(arr, np.int32), np.eye(4), "int32")


def test_label_volume_rejects_foreign_values():
    s = toy_schema()
    with pytest.raises(LabelDataError):
        LabelVolume(_vol(np.full((2, 2, 2), 99)), s, "fine-internal")
    with pytest.raises(LabelDataError):
        LabelVolume(_vol(np.full((2, 2, 2), 8)), s, "coarse")
    LabelVolume(_vol(np.full((2, 2, 2), 1007)), s, "freesurfer-lut")


def test_coarse_projection_histogram():
    s = toy_schema()
    lab = box_phantom(s, 32)
    fine = LabelVolume(_vol(lab), s)
    coarse = coarse_project(fine)
    # oracle: count voxels label by label, then sum per group with a plain loop
    fine_counts = Counter(lab.ravel().tolist())
    expected = Counter()
    for g in s.groups:
        for lid in g.labels:
            expected[g.id] += fine_counts.get(lid, 0)
    got = Counter(coarse.data.ravel().tolist())
    for gid in s.group_ids:
        assert got[gid] == expected[gid]
    assert got[0] == fine_counts[0]


def test_lut_round_trip_is_bijective():
    s = default_schema()
    ids = np.array([0, *s.fine_ids], np.int32).reshape(-1, 1, 1)
    fine = LabelVolume(_vol(ids), s)
    lut = to_freesurfer_lut(fine)
    assert lut.space == "freesurfer-lut"
    assert len(np.unique(lut.data)) == 102
    np.testing.assert_array_equal(from_freesurfer_lut(lut).data, fine.data)


def test_split_then_merge_is_identity():
    s = toy_schema()
    fine = LabelVolume(_vol(box_phantom(s, 32)), s)
    merged = merge_fine(coarse_project(fine), split_by_group(fine))
    np.testing.assert_array_equal(merged.data, fine.data)


def test_merge_drops_labels_outside_their_coarse_region():
    s = toy_schema()
    fine = LabelVolume(_vol(box_phantom(s, 32)), s)
    coarse = coarse_project(fine)
    parts = split_by_group(fine)
    # group 3 result predicts its first label everywhere
    g3 = s.group(3).labels[0]
    parts[3] = fine.with_data(np.full(fine.volume.dims, g3))
    merged = merge_fine(coarse, parts)
    assert np.all(merged.data[coarse.data == 3] == g3)
    assert not np.any(merged.data[coarse.data != 3] == g3)


def test_merge_rejects_stray_partition_labels():
    s = toy_schema()
    fine = LabelVolume(_vol(box_phantom(s, 16)), s)
    parts = split_by_group(fine)
    parts[3] = fine.with_data(np.full(fine.volume.dims, s.group(4).labels[0]))
    with pytest.raises(LabelDataError, match="outside its partition"):
        merge_fine(coarse_project(fine), parts)
    del parts[3]
    with pytest.raises(LabelDataError):
        merge_fine(coarse_project(fine), parts)
