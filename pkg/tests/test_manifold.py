import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from condsamp.manifold import (DmapModel, estimate_local_covariance, fit_dmap, local_covariances,
                               mahalanobis_sq, nystrom_extend, nystrom_gradient, pinv_psd)
from condsamp.sde import HALFMOON_MAP, make_benchmark


@pytest.fixture(scope="module")
def curve():
    """Noisy samples along a one-dimensional arc in the plane."""
    gen = np.random.default_rng(0)
    s = np.sort(gen.uniform(0, 3, 400))
    pts = np.column_stack([s, 0.3 * np.sin(s)]) + 0.01 * gen.standard_normal((400, 2))
    return s, pts


@pytest.fixture(scope="module")
def curve_model(curve):
    return fit_dmap(curve[1], n_eigs=4, seed=0)


def test_mahalanobis_identity_is_euclidean():
    d = mahalanobis_sq([0.0, 0.0], [3.0, 4.0], np.eye(2), np.eye(2))
    assert d == pytest.approx(25.0)


def test_mahalanobis_rank_one_pseudoinverse():
    v = np.array([1.0, 2.0])
    C = np.outer(v, v)
    assert np.allclose(pinv_psd(C), C / (v @ v) ** 2, atol=1e-14)
    # displacement along v: (d.v)^2 / |v|^4; orthogonal displacement is invisible
    assert mahalanobis_sq([0, 0], v, C, C) == pytest.approx(1.0)
    assert mahalanobis_sq([0, 0], 3 * v, C, C) == pytest.approx(9.0)
    assert mahalanobis_sq([0, 0], [2.0, -1.0], C, C) == pytest.approx(0.0, abs=1e-14)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_mahalanobis_symmetric_and_nonnegative(seed):
    gen = np.random.default_rng(seed)
    A, B = gen.standard_normal((2, 3, 2))
    Ci, Cj = A @ A.T, B @ B.T          # rank 2 in three dimensions
    xi, xj = gen.standard_normal((2, 3))
    d = mahalanobis_sq(xi, xj, Ci, Cj)
    assert d >= 0.0
    assert d == pytest.approx(mahalanobis_sq(xj, xi, Cj, Ci), rel=1e-12, abs=1e-15)


def test_mahalanobis_symmetrises_covariances():
    Ci, Cj = np.diag([1.0, 4.0]), np.diag([4.0, 1.0])
    d = mahalanobis_sq([0, 0], [1.0, 1.0], Ci, Cj)
    assert d == pytest.approx(0.5 * ((1 + 0.25) + (0.25 + 1)))
    assert d == pytest.approx(mahalanobis_sq([1.0, 1.0], [0, 0], Cj, Ci))


def test_nonsymmetric_covariance_rejected():
    with pytest.raises(ValueError):
        pinv_psd(np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_local_covariance_ou2d():
    s = make_benchmark("ou2d")
    C = estimate_local_covariance(s, [5.0, 1.0], 2000, 1e-5, seed=0)
    assert C[0, 0] == pytest.approx(1e-6, rel=0.2)
    assert C[1, 1] == pytest.approx(1e-2, rel=0.2)
    assert abs(C[0, 1]) < 0.2 * np.sqrt(C[0, 0] * C[1, 1])


def test_local_covariance_halfmoon_is_pushed_forward():
    s = make_benchmark("halfmoon")
    x = np.array([[-0.5, 1.0]])
    y = HALFMOON_MAP.forward(x)[0]
    J = HALFMOON_MAP.jacobian(x)[0]
    expected = J @ np.diag([1e-6, 1e-2]) @ J.T
    C = estimate_local_covariance(s, y, 4000, 1e-5, seed=1)
    assert np.linalg.norm(C - expected) <= 0.2 * np.linalg.norm(expected)


def test_local_covariances_streams_are_per_point():
    s = make_benchmark("ou2d")
    pts = np.array([[0.0, 1.0], [1.0, 1.0], [2.0, 1.0]])
    all3 = local_covariances(s, pts, 50, 1e-5, seed=3)
    last = local_covariances(s, pts[2:], 50, 1e-5, seed=3, stream_offset=2)
    assert np.array_equal(all3[2], last[0])


def test_transition_matrix_is_row_stochastic(curve_model):
    W = curve_model.transition_matrix()
    assert np.max(np.abs(W.sum(axis=1) - 1.0)) <= 1e-12
    assert np.all(W >= 0)


def test_leading_eigenpair_is_trivial(curve_model):
    assert curve_model.eigvals[0] == pytest.approx(1.0, abs=1e-10)
    assert np.allclose(curve_model.coordinate(0), 1.0, atol=1e-8)
    assert np.all(np.diff(curve_model.eigvals) <= 0)
    assert np.all(np.isreal(curve_model.eigvals))
    assert np.all((curve_model.eigvals > -1.0) & (curve_model.eigvals <= 1.0 + 1e-12))


def test_eigenvectors_satisfy_markov_equation(curve_model):
    W = curve_model.transition_matrix()
    for k in range(1, 4):
        phi = curve_model.coordinate(k)
        assert np.allclose(W @ phi, curve_model.eigvals[k] * phi, atol=1e-8)


def test_alpha_zero_is_plain_row_normalisation(curve):
    m = fit_dmap(curve[1][:100], alpha=0.0, n_eigs=3, eps_kernel=0.1)
    A = m.kernel_matrix()
    assert np.allclose(m.transition_matrix(), A / A.sum(axis=1, keepdims=True), atol=1e-15)
    # with alpha = 0 the density renormalisation is the identity: Abar = A
    s0 = m.degree ** (-0.5 * m.alpha)
    assert np.array_equal(A * s0[:, None] * s0[None, :], A)


def test_refit_is_identical(curve):
    a = fit_dmap(curve[1], n_eigs=3, seed=0)
    b = fit_dmap(curve[1].copy(), n_eigs=3, seed=0)
    assert np.array_equal(a.eigvecs, b.eigvecs) and np.array_equal(a.eigvals, b.eigvals)
    xc = curve[1][:, 0] - curve[1][:, 0].mean()
    assert xc @ (a.coordinate(1) - a.coordinate(1).mean()) >= 0


def test_first_coordinate_tracks_arc_length(curve, curve_model):
    rho = stats.spearmanr(curve_model.coordinate(1), curve[0])[0]
    assert rho >= 0.99


def test_fit_is_deterministic(curve):
    a = fit_dmap(curve[1], n_eigs=3, seed=0)
    b = fit_dmap(curve[1], n_eigs=3, seed=0, workers=2)
    assert np.array_equal(a.eigvecs, b.eigvecs)


def test_fit_rejects_bad_arguments(curve):
    with pytest.raises(ValueError):
        fit_dmap(curve[1], metric="cosine")
    with pytest.raises(ValueError):
        fit_dmap(curve[1], metric="mahalanobis")
    with pytest.raises(ValueError):
        fit_dmap(curve[1], alpha=1.5)


def test_nystrom_reproduces_training_values(curve_model):
    interp = curve_model.interpolant(1)
    vals = nystrom_extend(interp, curve_model.train_points)
    assert np.max(np.abs(vals - curve_model.coordinate(1))) <= 1e-6


def _relative_fd_error(interp, x, h=1e-6):
    grad = nystrom_gradient(interp, x)
    fd = np.empty_like(x)
    for j in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[j] = h
        fd[:, j] = (interp.value(x + e) - interp.value(x - e)) / (2 * h)
    return np.max(np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3))


def test_nystrom_gradient_matches_finite_differences(curve_model):
    x = np.array([[0.5, 0.1], [1.7, 0.3], [2.5, 0.2], [4.0, 0.0]])
    assert _relative_fd_error(curve_model.interpolant(1), x) <= 1e-4


def test_mahalanobis_nystrom_gradient_matches_finite_differences():
    s = make_benchmark("halfmoon")
    x = np.column_stack([np.linspace(-0.7, 0.3, 150), 1.0 + 0.1 * np.sin(np.arange(150))])
    y = HALFMOON_MAP.forward(x)
    covs = local_covariances(s, y, 200, 1e-5, seed=0)
    m = fit_dmap(y, metric="mahalanobis", covs=covs, n_eigs=3, eps_scale=0.01)
    interp = m.interpolant(1)
    assert np.max(np.abs(interp.value(y) - m.coordinate(1))) <= 1e-6
    # probe near, but not on, training points so the nearest neighbour is unambiguous
    probe = y[[10, 70, 130]] + 1e-4
    assert _relative_fd_error(interp, probe, h=1e-7) <= 1e-4


def test_trivial_coordinate_has_zero_gradient(curve_model):
    g = curve_model.interpolant(0).gradient(np.array([[0.5, 0.1], [2.0, 0.2]]))
    assert np.max(np.abs(g)) <= 1e-8


def test_far_points_stay_finite(curve_model):
    v, g = curve_model.interpolant(1).value_and_grad(np.array([[100.0, -50.0]]))
    assert np.isfinite(v).all() and np.isfinite(g).all()


def test_interpolant_rejects_bad_index_and_dim(curve_model):
    with pytest.raises(ValueError):
        curve_model.interpolant(9)
    with pytest.raises(ValueError):
        curve_model.interpolant(1).value(np.zeros(3))


def test_model_round_trip(tmp_path, curve_model):
    curve_model.save(tmp_path / "d.bin")
    back = DmapModel.load(tmp_path / "d.bin")
    assert np.array_equal(back.eigvecs, curve_model.eigvecs)
    x = np.array([[1.0, 0.2]])
    assert back.interpolant(1).value(x) == curve_model.interpolant(1).value(x)
