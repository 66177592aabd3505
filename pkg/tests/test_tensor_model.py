import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dwiparc.errors import GradientSchemeError, UndefinedCorrelationError
from dwiparc.tensor import (
    derive_maps,
    design_matrix,
    eigendecompose,
    fit_tensor,
    map_correlation,
    matrix_to_tensor,
    select_shell,
    shape_measures,
    synthesize_signal,
    tensor_to_matrix,
)
from dwiparc.volume import DwiSeries

from phantoms import gradient_scheme, random_spd


# signals are stored as float32, so recovery is exact only to ~1e-10
def _dwi_from_tensors(tensors, s0=1000.0, n_dirs=12, b=1000.0):
    bvals, bvecs = gradient_scheme(n_dirs, 1, b)
    sig = synthesize_signal(tensors, np.full(tensors.shape[:-1], s0), bvals, bvecs)
    return DwiSeries(sig.astype(np.float64), np.eye(4), bvals, bvecs)


def _scalar_reference(l1, l2, l3):
    """Plain-Python evaluation of the shape-measure formulas for one voxel."""
    tr = l1 + l2 + l3
    fa = math.sqrt(0.5) * math.sqrt((l1 - l2) ** 2 + (l2 - l3) ** 2 + (l3 - l1) ** 2) / math.sqrt(l1**2 + l2**2 + l3**2)
    return {"FA": fa, "CL": (l1 - l2) / tr, "CP": 2 * (l2 - l3) / tr, "CS": 3 * l3 / tr, "TR": tr, "MD": tr / 3}


def test_matrix_packing_round_trip():
    m = np.array([[1, 2, 3], [2, 4, 5], [3, 5, 6]], float)
    t = matrix_to_tensor(m)
    np.testing.assert_array_equal(t, [1, 2, 3, 4, 5, 6])
    np.testing.assert_array_equal(tensor_to_matrix(t), m)


def test_design_matrix_rows():
    A = design_matrix(np.array([0.0, 1000.0]), np.array([[0, 0, 0], [0.6, 0.8, 0.0]]))
    np.testing.assert_allclose(A[0], [1, 0, 0, 0, 0, 0, 0])
    # -b * (gx^2, 2gxgy, 2gxgz, gy^2, 2gygz, gz^2)
    np.testing.assert_allclose(A[1], [1, -360, -960, 0, -640, 0, 0])


@pytest.mark.parametrize("diag", [(1e-3, 1e-3, 1e-3), (1.7e-3, 0.4e-3, 0.2e-3)])
def test_fit_recovers_diagonal_tensor(diag):
    t = matrix_to_tensor(np.diag(diag))[None, None, None, :]
    field = fit_tensor(_dwi_from_tensors(t))
    np.testing.assert_allclose(field.tensor[0, 0, 0], t[0, 0, 0], atol=2e-10)
    np.testing.assert_allclose(np.exp(field.log_s0[0, 0, 0]), 1000.0, rtol=1e-10)
    assert field.valid.all()


def test_fit_random_spd():
    rng = np.random.default_rng(11)
    t, _ = random_spd(rng, 200)
    field = fit_tensor(_dwi_from_tensors(t.reshape(200, 1, 1, 6)))
    assert np.abs(field.tensor.reshape(200, 6) - t).max() < 1e-9


def test_zero_signal_voxel_is_invalid_and_zero():
    t = np.zeros((2, 1, 1, 6))
    t[..., 0] = t[..., 3] = t[..., 5] = 1e-3
    dwi = _dwi_from_tensors(t)
    data = dwi.data.copy()
    data[1] = 0.0
    field = fit_tensor(DwiSeries(data, dwi.affine, dwi.bvals, dwi.bvecs))
    assert field.valid.tolist() == [[[True]], [[False]]]
    assert np.all(field.tensor[1] == 0)
    e = eigendecompose(field)
    maps = derive_maps(e)
    for name in ("FA", "CL", "CP", "CS", "TR"):
        assert maps[name].data[1, 0, 0] == 0.0


def test_negative_samples_are_floored():
    t = matrix_to_tensor(np.diag([1e-3] * 3)).reshape(1, 1, 1, 6)
    dwi = _dwi_from_tensors(t)
    data = dwi.data.copy()
    data[0, 0, 0, 3] = -5.0
    field = fit_tensor(DwiSeries(data, dwi.affine, dwi.bvals, dwi.bvecs))
    assert np.all(np.isfinite(field.tensor))


def test_rank_deficient_scheme():
    bvals = np.array([0, 1000, 1000, 1000, 1000, 1000, 1000], float)
    dirs = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 0], [1, -1, 0], [1, 1, 0]], float)
    dirs[3:] /= np.linalg.norm(dirs[3:], axis=1, keepdims=True)
    dirs[5] = [0.6, 0.8, 0.0]
    bvecs = np.vstack([np.zeros(3), dirs])
    dwi = DwiSeries(np.ones((1, 1, 1, 7)), np.eye(4), bvals, bvecs)
    with pytest.raises(GradientSchemeError):
        fit_tensor(dwi)


def test_multishell_uses_b1000_only():
    b1, v1 = gradient_scheme(12, 2, 1000.0)
    b2, v2 = gradient_scheme(10, 0, 3000.0)
    bvals = np.concatenate([b1, b2])
    bvecs = np.vstack([v1, v2])
    idx = select_shell(bvals)
    assert len(idx) == 14 and np.all(bvals[idx] <= 1050)
    t = matrix_to_tensor(np.diag([1.7e-3, 0.4e-3, 0.2e-3])).reshape(1, 1, 1, 6)
    sig = synthesize_signal(t, np.full((1, 1, 1), 500.0), bvals, bvecs)
    # corrupt the b=3000 shell; a b=1000-only fit must ignore it
    sig[..., len(b1):] *= 0.5
    field = fit_tensor(DwiSeries(sig, np.eye(4), bvals, bvecs))
    np.testing.assert_allclose(field.tensor[0, 0, 0], t[0, 0, 0, :], atol=2e-10)


def test_eigendecompose_random_spd():
    rng = np.random.default_rng(2)
    t, lam = random_spd(rng, 500)
    e = eigendecompose(t)
    np.testing.assert_allclose(e.evals, np.sort(lam, axis=1)[:, ::-1], rtol=1e-10, atol=1e-16)
    D = tensor_to_matrix(t)
    rec = np.einsum("nij,nj,nkj->nik", e.evecs, e.evals, e.evecs)
    err = np.linalg.norm(rec - D, axis=(1, 2)) / np.linalg.norm(D, axis=(1, 2))
    assert err.max() < 1e-10
    # eigenvector columns: D v = lambda v
    Dv = np.einsum("nij,njk->nik", D, e.evecs)
    np.testing.assert_allclose(Dv, e.evecs * e.evals[:, None, :], atol=1e-15)


def test_eigendecompose_repeated_eigenvalues():
    R = Rotation.random(50, random_state=3).as_matrix()
    lam = np.tile([2e-3, 5e-4, 5e-4], (50, 1))
    D = np.einsum("nij,nj,nkj->nik", R, lam, R)
    e = eigendecompose(matrix_to_tensor(D))
    np.testing.assert_allclose(e.evals, lam, rtol=1e-10)
    np.testing.assert_allclose(np.abs(np.einsum("nij,nik->njk", e.evecs, e.evecs)), np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)


def test_reference_eigenvalue_example():
    m = shape_measures(np.array([1.7e-3, 0.4e-3, 0.2e-3]))
    ref = _scalar_reference(1.7e-3, 0.4e-3, 0.2e-3)
    for k in ("FA", "CL", "CP", "CS", "TR", "MD"):
        assert m[k] == pytest.approx(ref[k], rel=1e-12)
    # hand evaluation: sqrt(0.5*(1.69+0.04+2.25)/3.09), 1.3/2.3, 0.4/2.3, 0.6/2.3
    assert float(m["FA"]) == pytest.approx(0.8025, abs=1e-4)
    assert float(m["CL"]) == pytest.approx(0.5652, abs=1e-4)
    assert float(m["CP"]) == pytest.approx(0.1739, abs=1e-4)
    assert float(m["CS"]) == pytest.approx(0.2609, abs=1e-4)


def test_isotropic_and_degenerate():
    m = shape_measures(np.array([[1e-3, 1e-3, 1e-3], [0, 0, 0]]))
    np.testing.assert_allclose(m["FA"], [0, 0], atol=1e-15)
    np.testing.assert_allclose(m["CS"], [1, 0])
    np.testing.assert_allclose(m["CL"], [0, 0])


def test_purely_linear_fa_is_one():
    assert float(shape_measures(np.array([1e-3, 0, 0]))["FA"]) == pytest.approx(1.0)


eig = st.floats(1e-6, 5e-3, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.tuples(eig, eig, eig))
def test_shape_invariants(t):
    l1, l2, l3 = sorted(t, reverse=True)
    m = shape_measures(np.array([l1, l2, l3]))
    assert 0.0 <= float(m["FA"]) <= 1.0
    assert float(m["CL"] + m["CP"] + m["CS"]) == pytest.approx(1.0, abs=1e-12)
    for k in ("CL", "CP", "CS"):
        assert float(m[k]) >= -1e-15
    ref = _scalar_reference(l1, l2, l3)
    assert float(m["FA"]) == pytest.approx(ref["FA"], rel=1e-9, abs=1e-12)


def test_fa_rotation_invariant():
    rng = np.random.default_rng(5)
    lam = np.array([1.5e-3, 6e-4, 3e-4])
    R = Rotation.random(100, random_state=rng).as_matrix()
    D = np.einsum("nij,j,nkj->nik", R, lam, R)
    fa = shape_measures(eigendecompose(matrix_to_tensor(D), vectors=False).evals)["FA"]
    assert np.ptp(fa) < 1e-10


def test_derive_maps_selection_and_codes():
    t = np.zeros((2, 2, 2, 6))
    t[..., 0], t[..., 3], t[..., 5] = 1.7e-3, 0.4e-3, 0.2e-3
    field = fit_tensor(_dwi_from_tensors(t))
    maps = derive_maps(eigendecompose(field), ["F", "T", "S", "E1"])
    assert set(maps) == {"FA", "TR", "CS", "E1"}
    assert maps["F"] is maps["FA"] and "S" in maps and "L" not in maps
    assert maps["FA"].dtype == "float32"
    np.testing.assert_allclose(maps["E1"].data, 1.7e-3, rtol=1e-6)
    with pytest.raises(ValueError):
        derive_maps(eigendecompose(field), ["Q"])


def test_map_correlation_signs():
    rng = np.random.default_rng(0)
    a = rng.random((5, 5, 5))
    assert map_correlation(a, 3 * a + 1) == pytest.approx(1.0)
    assert map_correlation(a, -a) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        map_correlation(a, np.ones_like(a))
    with pytest.raises(UndefinedCorrelationError):
        map_correlation(a, a, mask=np.zeros_like(a))


def test_fa_sphericity_negative_correlation():
    rng = np.random.default_rng(9)
    lam = rng.dirichlet(np.ones(3), size=20000) * 2.1e-3
    lam = np.sort(lam, axis=1)[:, ::-1]
    m = shape_measures(lam)
    assert map_correlation(m["FA"], m["CS"]) < -0.5
