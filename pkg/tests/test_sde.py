import numpy as np
import pytest

from condsamp.sde import (CAPS_MAP, HALFMOON_MAP, DomainError, IntegrationDiverged, Trajectory,
                          apply_transform, doublewell_potential, em_step, integrate,
                          make_benchmark, make_system, simulate_ensemble)
from condsamp.samples import SampleSet


def test_ou2d_drift_and_diffusion():
    s = make_benchmark("ou2d")
    assert np.allclose(s.drift([5.0, 1.0]), [1e-3, 0.0], atol=0, rtol=0)
    assert np.array_equal(s.diffusion([5.0, 1.0]), np.diag([1e-3, 1e-1]))


def test_doublewell_drift_is_minus_potential_gradient():
    s = make_benchmark("doublewell")
    h = 1e-6
    for z1 in (4.0, 5.0, 6.0):
        for z2 in (-1.3, -0.4, 0.0, 0.7, 1.2):
            fd = -(doublewell_potential(z2 + h, z1, 8.0) - doublewell_potential(z2 - h, z1, 8.0)) / (2 * h)
            assert s.drift([z1, z2])[1] == pytest.approx(fd, rel=1e-6, abs=1e-6)
    # V'(0) = 2 g(0) + g'(0) = 2h - 2h: the barrier top is a critical point
    assert s.drift([5.0, 0.0])[1] == pytest.approx(0.0, abs=1e-12)


def test_doublewell_wells_equal_at_symmetric_label():
    v = lambda z2: doublewell_potential(z2, 5.0, 8.0)  # noqa: E731
    assert v(1.0) == pytest.approx(v(-1.0), abs=1e-12)
    assert v(1.0) == pytest.approx(0.0, abs=1e-12)


def test_parameter_override_freezes_slow_coordinate():
    s = make_benchmark("ou2d", {"a1": 0.0, "a2": 0.0})
    tr = integrate(s, [3.0, 1.0], 500, 1.0, seed=0)
    assert np.all(tr.states[:, 0] == 3.0)


def test_unknown_system_or_parameter():
    with pytest.raises(KeyError, match="unknown system"):
        make_benchmark("lorenz")
    with pytest.raises(KeyError, match="no parameter"):
        make_benchmark("ou2d", {"a9": 1.0})


def test_em_step_hand_value():
    s = make_benchmark("ou2d")
    out = em_step(s, [0.0, 1.0], 0.0, 1.0, [1.0, 0.0])
    assert np.allclose(out, [2e-3, 1.0], rtol=0, atol=1e-18)


def test_em_step_rejects_bad_input():
    s = make_benchmark("ou2d")
    with pytest.raises(ValueError):
        em_step(s, [0.0, 1.0], 0.0, 0.0, [0.0, 0.0])
    with pytest.raises(ValueError):
        em_step(s, [0.0, 1.0], 0.0, 1.0, [0.0])


def test_zero_diffusion_matches_forward_euler():
    def drift(x, t):
        return np.column_stack([-x[:, 0] + np.sin(t), x[:, 0] * x[:, 1] * 0.1])

    def diffusion(x, t):
        return np.zeros((x.shape[0], 2, 1))

    s = make_system("toy", 2, 1, drift, diffusion)
    tr = integrate(s, [1.0, 0.5], 200, 0.01, seed=4)
    x = np.array([1.0, 0.5])
    for i in range(200):
        x = x + drift(x[None], i * 0.01)[0] * 0.01
    assert np.array_equal(tr.states[-1], x)


def test_ou2d_long_run_moments():
    s = make_benchmark("ou2d")
    tr = integrate(s, [0.0, 1.0], 110_000, 1.0, seed=0)
    x2 = tr.states[10_001:, 1]
    assert abs(x2.mean() - 1.0) <= 0.02
    assert abs(x2.var() - 0.05) <= 0.01
    assert tr.states[30_000, 0] == pytest.approx(30.0, abs=1.0)


def test_trajectory_prefix_is_determined_by_seed():
    s = make_benchmark("doublewell")
    short = integrate(s, [5.0, 1.0], 3000, 1e-3, seed=12)
    long = integrate(s, [5.0, 1.0], 7000, 1e-3, seed=12)
    assert np.array_equal(long.states[:3001], short.states)


def test_ensemble_rows_match_single_runs_and_worker_count():
    s = make_benchmark("ou2d")
    x0 = np.array([[0.0, 1.0], [1.0, 0.5], [2.0, 2.0]])
    one = simulate_ensemble(s, x0, 300, 1.0, seed=9, workers=1, chunk=64)
    many = simulate_ensemble(s, x0, 300, 1.0, seed=9, workers=3)
    assert np.array_equal(one, many)
    for k in range(3):
        assert np.array_equal(integrate(s, x0[k], 300, 1.0, seed=9, stream=k).states, one[k])
    # a chain's path depends only on its own stream index
    sub = simulate_ensemble(s, x0[[2, 0]], 300, 1.0, seed=9, streams=[2, 0])
    assert np.array_equal(sub, one[[2, 0]])


def test_keep_from_drops_leading_rows():
    s = make_benchmark("ou2d")
    full = simulate_ensemble(s, [0.0, 1.0], 50, 1.0, seed=1)
    tail = simulate_ensemble(s, [0.0, 1.0], 50, 1.0, seed=1, keep_from=10)
    assert np.array_equal(full[:, 10:], tail)


def test_doublewell_stays_in_its_well():
    s = make_benchmark("doublewell")
    traj = simulate_ensemble(s, [[5.0, 1.0], [5.0, -1.0]], 20_000, s.default_dt, seed=0)
    assert np.all(traj[0, :, 1] > 0) and np.all(traj[1, :, 1] < 0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    s = make_system("blowup", 1, 1, lambda x, t: x ** 3, lambda x, t: np.zeros((x.shape[0], 1, 1)))
    with pytest.raises(IntegrationDiverged) as err:
        integrate(s, [2.0], 100, 0.5, seed=0)
    assert err.value.step > 0


def test_halfmoon_domain_error():
    s = make_benchmark("halfmoon")
    with pytest.raises(DomainError):
        s.drift([0.0, 1.0])


def test_halfmoon_map_values_and_inverse():
    y = HALFMOON_MAP.forward(np.array([[1.0, 1.0]]))
    assert np.allclose(y, [[np.cos(1.0), np.sin(1.0)]], rtol=0, atol=1e-15)
    x = np.array([[-0.5, 1.2], [0.3, 0.8], [0.0, 1.0]])
    assert np.allclose(HALFMOON_MAP.inverse(HALFMOON_MAP.forward(x)), x, atol=1e-12)


def test_caps_map_origin_and_values():
    assert np.array_equal(CAPS_MAP.forward(np.zeros((1, 3))), np.zeros((1, 3)))
    assert np.allclose(CAPS_MAP.forward(np.array([[1.0, 2.0, 3.0]])), [[14.0, 13.0, 3.0]])


@pytest.mark.parametrize("tmap", [HALFMOON_MAP, CAPS_MAP])
def test_map_jacobians_match_finite_differences(tmap):
    x = np.random.default_rng(0).uniform(0.2, 1.0, (4, tmap.dim))
    J = tmap.jacobian(x)
    h = 1e-6
    for j in range(tmap.dim):
        e = np.zeros(tmap.dim)
        e[j] = h
        fd = (tmap.forward(x + e) - tmap.forward(x - e)) / (2 * h)
        assert np.allclose(J[:, :, j], fd, atol=1e-8)


def test_halfmoon_diffusion_is_pushed_forward_noise():
    # Ito's lemma: the transformed diffusion is J(x) diag(a2, a4) at the pre-image
    s = make_benchmark("halfmoon")
    x = np.array([[-0.75, 1.0], [-0.3, 1.3], [0.2, 0.9]])
    y = HALFMOON_MAP.forward(x)
    assert np.all(y[:, 0] > 0)
    expected = HALFMOON_MAP.jacobian(x) @ np.diag([1e-3, 1e-1])
    assert np.allclose(s.diffusion(y), expected, atol=1e-12)


def test_apply_transform_checks_dimension():
    with pytest.raises(ValueError):
        apply_transform(SampleSet(np.zeros((2, 2))), CAPS_MAP)


def test_trajectory_round_trip(tmp_path):
    s = make_benchmark("ou2d")
    tr = integrate(s, [0.0, 1.0], 100, 1.0, seed=2)
    tr.save(tmp_path / "t.csv")
    back = Trajectory.load(tmp_path / "t.csv")
    assert np.array_equal(back.states, tr.states)
    assert back.seed == 2 and back.system_id == "ou2d" and back.dt == 1.0
    assert back.params == dict(s.params)
