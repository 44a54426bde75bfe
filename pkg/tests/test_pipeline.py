import numpy as np
import pytest

from condsamp import density
from condsamp.bias import BiasSpec, run_umbrella, run_umbrella_ensemble
from condsamp.neural import HvdlParams, build_gan, sample_ccgan
from condsamp.pipeline import (ClosureResult, CouplingConfig, ExtrapolationError, caps_time_slice,
                               caps_training_data, chain_histograms, closure_drift,
                               conditional_coverage, convergence_benchmark,
                               doublewell_training_data, integrate_effective_ode,
                               local_covariance_spectrum, matched_radius, run_coupled_sampling,
                               tabulate_closure, umbrella_sampler)
from condsamp.sde import make_benchmark, make_system


def _gan_near(point, spread, seed=0):
    """Untrained generator whose outputs sit near ``point``."""
    point = np.asarray(point, dtype=float)
    return build_gan("small", 1, point.size, 0.0, 10.0, HvdlParams(0.1, 0.0), seed=seed,
                     data_shift=point, data_scale=np.asarray(spread, dtype=float))


def test_single_chain_coupling_equals_plain_umbrella():
    model = _gan_near([10.0, 1.0], [0.5, 0.2])
    spec = BiasSpec("raw_coordinate", 1.0, 10.0, cv_index=0)
    cfg = CouplingConfig("ou2d", spec, n_chains=1, steps_per_chain=500, target_label=10.0,
                         seed=3, bins=50, hist_range=(0.0, 2.0))
    samples, est = run_coupled_sampling(cfg, model)
    x0 = sample_ccgan(model, 10.0, 1, seed=3).points[0]
    plain = run_umbrella(make_benchmark("ou2d"), spec, x0, 500, warmup=0, seed=3, stream=1)
    assert np.array_equal(samples.points, plain.points)
    assert np.array_equal(est.density, density.histogram(plain.column(1), 50, (0.0, 2.0)).density)


def test_coupled_pooling_is_permutation_invariant():
    s = make_benchmark("ou2d")
    spec = BiasSpec("raw_coordinate", 1.0, 10.0, cv_index=0)
    x0 = np.column_stack([np.full(6, 10.0), np.linspace(0.5, 1.5, 6)])
    chains = run_umbrella_ensemble(s, spec, x0, 300, 0, seed=1, streams=np.arange(6) + 1)
    perm = np.array([3, 0, 5, 1, 4, 2])
    shuffled = run_umbrella_ensemble(s, spec, x0[perm], 300, 0, seed=1, streams=perm + 1)
    a = density.pool(chain_histograms(chains, 1, 40, (0, 2)))
    b = density.pool(chain_histograms(shuffled, 1, 40, (0, 2)))
    assert np.array_equal(a.density, b.density)


def test_coupling_config_validation(tmp_path):
    spec = BiasSpec("raw_coordinate", 1.0, 10.0, cv_index=0)
    with pytest.raises(ValueError):
        CouplingConfig("ou2d", spec, 0, 10, 10.0)
    with pytest.raises(ValueError):
        CouplingConfig("ou2d", spec, 2, 10, 10.0, warmup=10)
    with pytest.raises(ValueError):
        run_coupled_sampling(CouplingConfig("ou2d", spec, 2, 10, 10.0))
    model = _gan_near([5.0, 1.0, 0.0], [1.0, 1.0, 1.0])
    with pytest.raises(ValueError, match="dim"):
        run_coupled_sampling(CouplingConfig("ou2d", spec, 2, 10, 10.0), model)


def test_coupling_loads_model_from_path(tmp_path):
    model = _gan_near([10.0, 1.0], [0.5, 0.2])
    model.save(tmp_path / "g.bin")
    spec = BiasSpec("raw_coordinate", 1.0, 10.0, cv_index=0)
    kw = dict(n_chains=3, steps_per_chain=50, target_label=10.0, bins=20, hist_range=(0, 2))
    a, _ = run_coupled_sampling(CouplingConfig("ou2d", spec, gan_model_path=str(tmp_path / "g.bin"), **kw))
    b, _ = run_coupled_sampling(CouplingConfig("ou2d", spec, **kw), model)
    assert np.array_equal(a.points, b.points)
    assert len(a) == 3 * 50


def _mu_system(fast_power):
    """Slow drift ``x2**fast_power``; the fast coordinate is an OU process about 1."""
    def drift(x, t):
        return np.column_stack([x[:, 1] ** fast_power, 0.1 * (1.0 - x[:, 1])])

    def diffusion(x, t):
        out = np.zeros((x.shape[0], 2, 1))
        out[:, 1, 0] = 0.1
        return out

    return make_system(f"mu{fast_power}", 2, 1, drift, diffusion)


# Euler-Maruyama at dt = 1 leaves the fast mean at 1 with variance a4^2 / (1 - (1 - a3)^2)
_FAST_VAR = 0.01 / (1.0 - 0.9 ** 2)


def test_closure_constant_slow_drift_is_exact():
    ou = make_benchmark("ou2d")
    B, se = closure_drift(umbrella_sampler(ou, 1.0, 50), ou, 5.0, 200, seed=0)
    assert B == 1e-3 and se == 0.0


def test_closure_linear_test_system():
    s = _mu_system(1)
    B, se = closure_drift(umbrella_sampler(s, 1.0, 150), s, 2.0, 10_000, seed=1)
    assert abs(B - 1.0) <= 3 * se
    assert se == pytest.approx(np.sqrt(_FAST_VAR / 10_000), rel=0.05)


def test_closure_quadratic_test_system():
    s = _mu_system(2)
    B, se = closure_drift(umbrella_sampler(s, 1.0, 150), s, 2.0, 10_000, seed=2)
    assert abs(B - (1.0 + _FAST_VAR)) <= 3 * se


def test_closure_standard_error_scaling():
    s = _mu_system(1)
    sampler = umbrella_sampler(s, 1.0, 150)
    _, se_small = closure_drift(sampler, s, 2.0, 100, seed=3)
    _, se_large = closure_drift(sampler, s, 2.0, 10_000, seed=4)
    ratio = se_large / se_small
    assert 0.1 / 1.5 <= ratio <= 0.1 * 1.5


def test_closure_accepts_generator_sampler():
    model = _gan_near([3.0, 1.0], [0.1, 0.2])
    s = _mu_system(1)
    B, se = closure_drift(model, s, 3.0, 500, seed=0)
    x2 = sample_ccgan(model, 3.0, 500, seed=0).column(1)
    assert B == pytest.approx(x2.mean(), rel=1e-12)


def test_tabulated_closure_interpolates_and_refuses_extrapolation():
    ou = make_benchmark("ou2d")
    res = tabulate_closure(umbrella_sampler(ou, 1.0, 20), ou, [0.0, 5.0, 10.0], 50)
    assert np.all(res.B_values == 1e-3)
    assert res(7.5) == pytest.approx(1e-3)
    with pytest.raises(ExtrapolationError):
        res(10.5)
    with pytest.raises(ValueError):
        ClosureResult(np.array([1.0, 0.0]), np.zeros(2), np.zeros(2))


def test_effective_ode_constant_drift_is_exact():
    t, z = integrate_effective_ode(lambda z: 1e-3, 0.0, 30_000.0, 1.0)
    assert z[-1] == 30.0
    assert t[-1] == 30_000.0 and z.size == 30_001


def test_effective_ode_linear_decay():
    dt = 1e-3
    t, z = integrate_effective_ode(lambda z: -z, 2.0, 1.0, dt)
    assert z[-1] == pytest.approx(2.0 * (1.0 - dt) ** 1000, rel=1e-12)
    assert np.max(np.abs(z - 2.0 * np.exp(-t))) <= 2.0 * dt
    with pytest.raises(ValueError):
        integrate_effective_ode(lambda z: z, 0.0, 1.0, 0.0)


def test_coverage_and_matched_radius():
    gen = np.random.default_rng(0)
    ref = gen.standard_normal((500, 3))
    assert conditional_coverage(ref, ref, 1e-12) == 1.0
    assert conditional_coverage(ref + 100.0, ref, 1.0) == 0.0
    other = gen.standard_normal((500, 3))
    r = matched_radius(ref, other)
    assert conditional_coverage(other, ref, r) == pytest.approx(0.95, abs=0.01)
    with pytest.raises(ValueError):
        conditional_coverage(np.zeros((0, 3)), ref, 1.0)
    with pytest.raises(ValueError):
        conditional_coverage(np.zeros((5, 2)), ref, 1.0)


def test_local_spectrum_detects_flat_directions():
    gen = np.random.default_rng(1)
    line = np.column_stack([gen.uniform(0, 10, 2000), 1e-3 * gen.standard_normal((2000, 2))])
    blob = gen.standard_normal((2000, 3))
    assert local_covariance_spectrum(line)[-1] < 1e-3
    assert local_covariance_spectrum(blob)[-1] > 0.1


def test_caps_oracle_slice():
    sl = caps_time_slice(0.0, 4000, seed=0)
    assert np.all(sl.labels == 0.0)
    # the caps map sends (x1, x2, x3) to (x1 + r^2, r^2, x3), so y1 - y2 recovers x1
    assert np.allclose(sl.points[:, 0] - sl.points[:, 1], 0.0, atol=1e-12)
    # x3 ~ N(a4 t, spread^2 + a5^2 t) with t = 0.1
    x3 = sl.points[:, 2]
    assert x3.mean() == pytest.approx(10.0, abs=0.2)
    assert x3.var() == pytest.approx(9.0 + 0.002, rel=0.08)
    with pytest.raises(ValueError):
        caps_time_slice(-0.2, 10)


def test_caps_training_data_labels():
    data = caps_training_data(n_traj=10, n_keep=10, seed=0)
    assert data.labels.min() == pytest.approx(-0.1)
    assert data.labels.max() == pytest.approx(0.1, abs=1e-9)
    assert np.allclose(data.points[:, 0] - data.points[:, 1], data.labels, atol=1e-9)


def test_doublewell_training_data_balance():
    data = doublewell_training_data(n_chains=10, n_steps=100, keep_every=10, seed=0)
    assert len(data) == 100
    assert np.array_equal(data.labels, data.points[:, 0])
    assert np.mean(data.points[:, 1] > 0) == 0.5


def test_convergence_benchmark_small(tmp_path):
    model = _gan_near([5.0, 0.0], [0.01, 1.0])
    rows, summary = convergence_benchmark(8.0, [400], 3, model, n_chains=4, min_chain_steps=100,
                                          out_csv=tmp_path / "b.csv")
    assert len(rows) == 6
    assert set(summary) == {("us_only", 400), ("coupled", 400)}
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "budget,method,trial,l1_error" and len(lines) == 7
    again, _ = convergence_benchmark(8.0, [400], 3, model, n_chains=4, min_chain_steps=100)
    assert rows == again
    with pytest.raises(ValueError):
        convergence_benchmark(8.0, [50], 1, model, min_chain_steps=100)
    with pytest.raises(ValueError):
        convergence_benchmark(8.0, [400], 1, model, methods=("bogus",))
