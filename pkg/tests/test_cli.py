import json
import subprocess
import sys

import numpy as np
import pytest

from dwiparc import cli
from dwiparc.nifti import read_nifti, write_dwi, write_nifti
from dwiparc.postprocess import postprocess_labels
from dwiparc.schema import LabelVolume, coarse_project, to_freesurfer_lut
from dwiparc.tensor import synthesize_signal
from dwiparc.volume import DwiSeries, Volume3D

from phantoms import box_phantom, gradient_scheme, lia_affine, maps_for_labels, oracle_specs, toy_schema

DIM = 40


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    s = toy_schema()
    lab = box_phantom(s, DIM)
    aff = lia_affine(DIM)
    (root / "schema.json").write_text(json.dumps(s.to_dict()))
    for code, vol in maps_for_labels(lab, aff).items():
        write_nifti(vol, root / f"{code}.nii.gz")
    gt = to_freesurfer_lut(LabelVolume(Volume3D(lab, aff), s))
    write_nifti(gt.volume, root / "gt.nii")
    config = {
        "map_codes": ["F", "T", "S", "E1"],
        "maps": {c: f"{c}.nii.gz" for c in ("F", "T", "S", "E1")},
        "schema": "schema.json",
        "sliding_window": {"patch_shape": [20, 20, 20], "overlap": 0.5},
        "conform_dim": DIM,
        "backends": oracle_specs(s),
    }
    (root / "config.json").write_text(json.dumps(config))
    return root, s, lab, aff, config


def run(argv):
    return cli.main([str(a) for a in argv])


def test_parcellate_with_builtin_oracles(workspace, tmp_path):
    root, s, lab, aff, _ = workspace
    assert run(["parcellate", "--config", root / "config.json", "--out-dir", tmp_path / "a"]) == 0
    out = read_nifti(tmp_path / "a" / "labels.nii")
    np.testing.assert_array_equal(out.data, read_nifti(root / "gt.nii").data)
    np.testing.assert_allclose(out.affine, aff, atol=1e-6)
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["schema"] == "toy" and len(manifest["config_hash"]) == 64
    coarse = read_nifti(tmp_path / "a" / "coarse.nii").data
    assert set(np.unique(coarse)) == {0, 1, 2, 3, 4, 5, 6, 7}


def test_parcellate_is_deterministic(workspace, tmp_path):
    root = workspace[0]
    for name in ("a", "b"):
        assert run(["--threads", 2, "parcellate", "--config", root / "config.json", "--out-dir", tmp_path / name]) == 0
    for f in ("labels.nii", "coarse.nii"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    ma, mb = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in ("a", "b"))
    ma.pop("timings"), mb.pop("timings")
    assert ma == mb


def test_parcellate_with_subprocess_backends(workspace, tmp_path):
    root, s, lab, aff, config = workspace
    cfg = dict(config)
    cfg["backends"] = {
        k: {"command": [sys.executable, "-m", "dwiparc.backends", json.dumps(v)],
            "in_channels": v["in_channels"], "n_classes": v["n_classes"], "pool_size": 2}
        for k, v in config["backends"].items()
    }
    cfg["workers"] = 2
    (root / "proc.json").write_text(json.dumps(cfg))
    assert run(["parcellate", "--config", root / "proc.json", "--out-dir", tmp_path]) == 0
    np.testing.assert_array_equal(read_nifti(tmp_path / "labels.nii").data, read_nifti(root / "gt.nii").data)


def test_parcellate_exit_codes(workspace, tmp_path, capsys):
    root, s, lab, aff, config = workspace
    bad = dict(config, maps=dict(config["maps"], F="missing.nii"))
    (root / "bad.json").write_text(json.dumps(bad))
    assert run(["parcellate", "--config", root / "bad.json", "--out-dir", tmp_path]) == 2
    assert "missing.nii" in capsys.readouterr().err

    (root / "unknown.json").write_text(json.dumps(dict(config, colour="red")))
    assert run(["parcellate", "--config", root / "unknown.json", "--out-dir", tmp_path]) == 2

    missing_be = dict(config, backends={k: v for k, v in config["backends"].items() if k != "5"})
    (root / "nobe.json").write_text(json.dumps(missing_be))
    assert run(["parcellate", "--config", root / "nobe.json", "--out-dir", tmp_path]) == 2

    dead = dict(config)
    dead["backends"] = dict(config["backends"])
    dead["backends"]["3"] = {"command": [sys.executable, "-c", "import sys; sys.exit(1)"], "in_channels": 5, "n_classes": 6}
    (root / "dead.json").write_text(json.dumps(dead))
    assert run(["parcellate", "--config", root / "dead.json", "--out-dir", tmp_path / "dead"]) == 4
    assert not (tmp_path / "dead" / "labels.nii").exists()


def _isotropic_dwi(root, d=1e-3):
    bvals, bvecs = gradient_scheme(12)
    t = np.zeros((6, 5, 4, 6))
    t[..., 0] = t[..., 3] = t[..., 5] = d
    sig = synthesize_signal(t, np.full((6, 5, 4), 800.0), bvals, bvecs)
    write_dwi(DwiSeries(sig, np.diag([2.0, 2.0, 2.0, 1.0]), bvals, bvecs), root / "dwi.nii.gz")
    return root / "dwi.nii.gz"


def test_fit_dti_isotropic_phantom(tmp_path):
    path = _isotropic_dwi(tmp_path)
    assert run(["fit-dti", path, "--out-dir", tmp_path / "maps"]) == 0
    fa = read_nifti(tmp_path / "maps" / "fa.nii")
    assert np.abs(fa.data).max() < 1e-6
    np.testing.assert_allclose(read_nifti(tmp_path / "maps" / "tr.nii").data, 3e-3, rtol=1e-6)
    np.testing.assert_allclose(read_nifti(tmp_path / "maps" / "cs.nii").data, 1.0, atol=1e-6)
    assert fa.spacing == (2.0, 2.0, 2.0)
    for name in ("md", "cl", "cp", "e1", "e2", "e3", "valid", "tensor"):
        assert (tmp_path / "maps" / f"{name}.nii").exists()


def test_fit_dti_missing_bvec(tmp_path, capsys):
    path = _isotropic_dwi(tmp_path)
    (tmp_path / "dwi.bvec").unlink()
    assert run(["fit-dti", path, "--out-dir", tmp_path / "maps"]) == 2
    assert "dwi.bvec" in capsys.readouterr().err
    assert not (tmp_path / "maps").exists()


def test_conform_command(tmp_path):
    v = Volume3D(np.ones((10, 12, 8), np.float32), np.diag([2.0, 2.0, 2.0, 1.0]))
    write_nifti(v, tmp_path / "in.nii")
    assert run(["conform", tmp_path / "in.nii", tmp_path / "out.nii", "--dim", 32]) == 0
    out = read_nifti(tmp_path / "out.nii")
    assert out.dims == (32, 32, 32) and out.orientation == "LIA"
    (tmp_path / "junk.nii").write_bytes(b"\x00" * 10)
    assert run(["conform", tmp_path / "junk.nii", tmp_path / "o2.nii"]) == 2


def test_postprocess_command_matches_library(workspace, tmp_path):
    root, s, lab, aff, _ = workspace
    rng = np.random.default_rng(0)
    fine = LabelVolume(Volume3D(lab, aff), s)
    coarse = coarse_project(fine)
    noisy = lab.copy()
    flip = rng.random(lab.shape) < 0.03
    noisy[flip] = rng.choice(np.array([0, *s.fine_ids]), flip.sum())
    write_nifti(Volume3D(noisy, aff), tmp_path / "noisy.nii")
    write_nifti(coarse.volume, tmp_path / "coarse.nii")
    argv = ["postprocess", "--coarse", tmp_path / "coarse.nii", "--fine", tmp_path / "noisy.nii",
            "--schema", root / "schema.json", "-o", tmp_path / "clean.nii"]
    assert run(argv) == 0
    expected = postprocess_labels(LabelVolume(Volume3D(noisy, aff), s), coarse)
    np.testing.assert_array_equal(read_nifti(tmp_path / "clean.nii").data, expected.data)


def test_evaluate_command(workspace, tmp_path):
    root, s, lab, aff, _ = workspace
    gt = root / "gt.nii"
    argv = ["evaluate", gt, gt, "--schema", root / "schema.json", "--fa", root / "F.nii.gz",
            "-o", tmp_path / "r.csv", "--summary", tmp_path / "s.json"]
    assert run(argv) == 0
    text = (tmp_path / "r.csv").read_text()
    expected, summary = cli.evaluate_files(gt, gt, s, "lut", {"FA": root / "F.nii.gz"})
    assert text == expected
    assert json.loads(summary)["dsc"]["mean"] == 1.0
    assert json.loads((tmp_path / "s.json").read_text())["hd95_mm"]["mean"] == 0.0
    lines = text.strip().split("\n")
    assert lines[0] == "id,name,voxels_pred,voxels_gt,dsc,hd95_mm,rsd_fa,rsd_md,rsd_cs"
    assert len(lines) == 1 + len(s.labels)
    # F is constant inside each label, so its RSD is 0
    assert lines[1].split(",")[6] == "0.0"


def test_evaluate_grid_mismatch(workspace, tmp_path):
    root = workspace[0]
    write_nifti(Volume3D(np.zeros((4, 4, 4), np.int32), np.eye(4)), tmp_path / "small.nii")
    argv = ["evaluate", tmp_path / "small.nii", root / "gt.nii", "--schema", root / "schema.json", "-o", tmp_path / "r.csv"]
    assert run(argv) == 2


def test_rsd_command(workspace, tmp_path):
    root, s, lab, aff, _ = workspace
    argv = ["rsd", root / "gt.nii", f"T={root / 'T.nii.gz'}", root / "S.nii.gz", "-o", tmp_path / "rsd.csv"]
    assert run(argv) == 0
    text = (tmp_path / "rsd.csv").read_text()
    assert text == cli.rsd_files(root / "gt.nii", [f"T={root / 'T.nii.gz'}", str(root / "S.nii.gz")])
    rows = [r.split(",") for r in text.strip().split("\n")[1:]]
    assert {r[2] for r in rows} == {"T", "S"}
    assert len(rows) == 2 * len(s.labels)


def test_ablation_commands(tmp_path, capsys):
    (tmp_path / "base.json").write_text(json.dumps({"conform_dim": 64}))
    assert run(["ablation-plan", "--base-config", tmp_path / "base.json", "--out-dir", tmp_path / "plan", "--sizes", 1, 2]) == 0
    assert len(list((tmp_path / "plan").glob("*.json"))) == 36
    assert run(["ablation-plan", "--base-config", tmp_path / "base.json", "--out-dir", tmp_path / "one",
                "--combination", "T+F+S+E1"]) == 0
    assert [p.name for p in (tmp_path / "one").iterdir()] == ["T_F_S_E1.json"]
    runs = [{"combination": "T+F+S+E3", "metric": "dsc", "mean": 76.49, "std": 0.10},
            {"combination": "T+F+S+E1", "metric": "dsc", "mean": 76.52, "std": 0.08}]
    (tmp_path / "runs.json").write_text(json.dumps(runs))
    capsys.readouterr()
    assert run(["ablation-rank", tmp_path / "runs.json"]) == 0
    out = capsys.readouterr().out.strip().split("\n")
    assert out[1].startswith("T+F+S+E1,dsc,76.52")
    assert run(["ablation-plan", "--base-config", tmp_path / "base.json", "--out-dir", tmp_path / "x",
                "--combination", "T+MD"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dwiparc", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "parcellate" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "dwiparc", "conform", str(tmp_path / "none.nii"), str(tmp_path / "o.nii")],
                          capture_output=True, text=True)
    assert proc.returncode == 2
