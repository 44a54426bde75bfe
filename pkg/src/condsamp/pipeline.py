"""Coupled GAN-seeded umbrella sampling, the convergence benchmark, and the
averaged slow-drift closure."""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree

from . import density, io
from .bias import BiasSpec, default_warmup, run_umbrella_ensemble
from .neural import GanModel, sample_ccgan
from .samples import SampleSet
from .sde import CAPS_MAP, SdeSystem, make_benchmark, simulate_ensemble

log = logging.getLogger(__name__)

# fixed histogram for the double-well fast coordinate: bin width 0.004 resolves
# the in-basin standard deviation (~0.008 at h = 8)
DW_RANGE = (-1.1, 1.1)
DW_BINS = 550


@dataclass
class CouplingConfig:
    """Settings for one coupled run.

    Chain ``c`` starts from the ``c``-th generated point and draws SDE noise
    from stream ``c + 1`` of ``seed``; stream 0 of the same seed feeds the
    generator noise.
    """

    system_id: str
    bias: BiasSpec
    n_chains: int
    steps_per_chain: int
    target_label: float
    warmup: int = 0
    dt: Optional[float] = None
    seed: int = 0
    gan_model_path: Optional[str] = None
    params: dict = field(default_factory=dict)
    fast_index: int = 1
    bins: int = DW_BINS
    hist_range: tuple = DW_RANGE

    def __post_init__(self):
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.warmup < self.steps_per_chain:
            raise ValueError("need 0 <= warmup < steps_per_chain")


def chain_histograms(chains, fast_index, bins, hist_range):
    return [density.histogram(c[:, fast_index], bins, hist_range) for c in chains]


def run_coupled_sampling(cfg: CouplingConfig, model: Optional[GanModel] = None,
                         workers=None):
    """Generator-seeded parallel umbrella chains, pooled.

    Returns ``(samples, estimate)``: all post-warmup states of all chains and
    the pooled fast-coordinate histogram.
    """
    if model is None:
        if cfg.gan_model_path is None:
            raise ValueError("need a model or gan_model_path")
        model = GanModel.load(cfg.gan_model_path)
    system = make_benchmark(cfg.system_id, cfg.params)
    x0 = sample_ccgan(model, cfg.target_label, cfg.n_chains, cfg.seed).points
    if x0.shape[1] != system.dim:
        raise ValueError(f"generator emits dim {x0.shape[1]}, system has dim {system.dim}")
    return _coupled_from(system, cfg, x0, np.arange(cfg.n_chains) + 1, workers)


def _coupled_from(system, cfg, x0, streams, workers=None):
    chains = run_umbrella_ensemble(system, cfg.bias, x0, cfg.steps_per_chain, cfg.warmup,
                                   cfg.dt, cfg.seed, streams=streams, workers=workers)
    est = density.pool(chain_histograms(chains, cfg.fast_index, cfg.bins, cfg.hist_range))
    pts = chains.reshape(-1, system.dim)
    return SampleSet(pts, labels=np.full(pts.shape[0], cfg.target_label)), est


def doublewell_training_data(n_chains=300, n_steps=1000, keep_every=10, z1_range=(4.5, 5.5),
                             h=8.0, seed=0, workers=None) -> SampleSet:
    """Unbiased double-well trajectories labelled by the slow coordinate.

    Barrier crossings do not occur at these heights, so chains are started
    alternately in the two wells and the data inherit an even well balance.
    """
    system = make_benchmark("doublewell", {"h": h})
    gen = np.random.default_rng(seed)
    z1 = gen.uniform(*z1_range, n_chains)
    z2 = np.where(np.arange(n_chains) % 2 == 0, 1.0, -1.0)
    traj = simulate_ensemble(system, np.column_stack([z1, z2]), n_steps, system.default_dt, seed,
                             keep_from=1, workers=workers)
    pts = traj[:, keep_every - 1::keep_every].reshape(-1, 2)
    return SampleSet(pts, labels=pts[:, 0].copy())


def _budget_streams(method_idx, budget_idx, trial, n_chains):
    return (method_idx * 64 + budget_idx) * 10_000_000 + trial * (n_chains + 1)


def convergence_benchmark(h: float, budgets: Sequence[int], n_trials: int, model: GanModel,
                          methods=("us_only", "coupled"), seed: int = 0, n_chains: int = 500,
                          k_spring: float = 1.0, z1: float = 5.0, us_start=(5.0, 1.0),
                          min_chain_steps: int = 200, coupled_warmup: float = 0.25, bins: int = DW_BINS,
                          hist_range=DW_RANGE, workers=None, out_csv=None):
    """Mean L1 error of the fast-coordinate PDF against quadrature, per budget.

    The budget counts SDE force evaluations.  ``us_only`` runs one restrained
    chain of ``budget`` steps from ``us_start`` and discards the first 10% as
    warmup.  ``coupled`` splits the budget evenly over
    ``min(n_chains, budget // min_chain_steps)`` generator-seeded chains, so
    each chain runs long enough to relax the generator's within-well error,
    and drops the fraction ``coupled_warmup`` of each chain.  Trial ``t`` of every cell uses its own noise
    streams, so cells are independent.

    Returns ``(rows, summary)`` where ``rows`` holds
    ``(budget, method, trial, l1_error)`` and ``summary`` maps
    ``(method, budget)`` to ``{"mean", "std", "wall_s", "gan_wall_s"}``.
    """
    for m in methods:
        if m not in ("us_only", "coupled"):
            raise ValueError(f"unknown method {m!r}")
    system = make_benchmark("doublewell", {"h": h})
    ref = density.true_fast_pdf("doublewell", z1, {"h": h})
    spec = BiasSpec("raw_coordinate", k_spring, z1, cv_index=0)
    rows, summary = [], {}
    for bi, budget in enumerate(budgets):
        budget = int(budget)
        for mi, method in enumerate(("us_only", "coupled")):
            if method not in methods:
                continue
            t0 = time.perf_counter()
            gan_wall = 0.0
            if method == "us_only":
                x0 = np.tile(np.asarray(us_start, dtype=float), (n_trials, 1))
                streams = [_budget_streams(mi, bi, t, 0) for t in range(n_trials)]
                chains = run_umbrella_ensemble(system, spec, x0, budget, default_warmup(budget),
                                               seed=seed, streams=streams, workers=workers)
                groups = [[c] for c in chains]
            else:
                nc = min(n_chains, budget // min_chain_steps)
                if nc < 1:
                    raise ValueError(f"budget {budget} is below min_chain_steps={min_chain_steps}")
                steps = budget // nc
                g0 = time.perf_counter()
                x0 = np.concatenate([
                    sample_ccgan(model, z1, nc, seed + 7919 * t + 104729 * bi).points
                    for t in range(n_trials)])
                gan_wall = time.perf_counter() - g0
                streams = np.concatenate([_budget_streams(mi, bi, t, nc) + 1 + np.arange(nc)
                                          for t in range(n_trials)])
                chains = run_umbrella_ensemble(system, spec, x0, steps,
                                               int(coupled_warmup * steps), seed=seed,
                                               streams=streams, workers=workers)
                groups = [chains[t * nc:(t + 1) * nc] for t in range(n_trials)]
            errs = []
            for t, group in enumerate(groups):
                est = density.pool(chain_histograms(group, 1, bins, hist_range))
                errs.append(density.l1_error(est, ref))
                rows.append((budget, method, t, errs[-1]))
            errs = np.asarray(errs)
            summary[(method, budget)] = {
                "mean": float(errs.mean()), "std": float(errs.std(ddof=1)) if errs.size > 1 else 0.0,
                "wall_s": time.perf_counter() - t0, "gan_wall_s": gan_wall}
            log.info("%s budget=%d mean L1=%.4f", method, budget, errs.mean())
    if out_csv is not None:
        io.write_csv(out_csv, ["budget", "method", "trial", "l1_error"], rows)
    return rows, summary


@dataclass(frozen=True)
class ClosureResult:
    grid: np.ndarray
    B_values: np.ndarray
    std_errors: np.ndarray
    effective_path: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.diff(self.grid) > 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(self.B_values)):
            raise ValueError("B_values must be finite")

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z < self.grid[0]) or np.any(z > self.grid[-1]):
            raise ExtrapolationError(f"z={z} leaves the tabulated range "
                                     f"[{self.grid[0]}, {self.grid[-1]}]")
        return np.interp(z, self.grid, self.B_values)


class ExtrapolationError(ValueError):
    pass


def umbrella_sampler(system: SdeSystem, k_spring: float, n_steps: int, slow_index: int = 0,
                     x0=None, dt=None) -> Callable:
    """Conditional sampler returning the end states of independent restrained chains.

    Each call ``sampler(z, n, seed)`` runs ``n`` chains of ``n_steps`` steps
    restrained at ``z``, so the returned samples are independent.
    """
    def sample(z, n, seed):
        spec = BiasSpec("raw_coordinate", k_spring, z, cv_index=slow_index)
        start = np.zeros(system.dim) if x0 is None else np.asarray(x0, dtype=float).copy()
        start[slow_index] = z
        chains = run_umbrella_ensemble(system, spec, np.tile(start, (n, 1)), n_steps, 0, dt, seed)
        pts = chains[:, -1]
        return SampleSet(pts, labels=np.full(n, z))

    return sample


def _draw(sampler, z, n, seed) -> np.ndarray:
    if isinstance(sampler, GanModel):
        return sample_ccgan(sampler, z, n, seed).points
    return sampler(z, n, seed).points


def closure_drift(sampler: Union[GanModel, Callable], system: SdeSystem, z: float, n: int,
                  seed: int = 0, slow_index: int = 0):
    """Monte Carlo average of the slow drift over conditional samples at ``z``.

    The slow coordinate of every sample is pinned to ``z`` before the drift
    is evaluated.  Returns ``(B_hat, standard_error)``.
    """
    pts = np.array(_draw(sampler, z, n, seed), dtype=float)
    pts[:, slow_index] = z
    vals = system.drift(pts)[:, slow_index]
    if np.ptp(vals) == 0:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(vals.size))


def tabulate_closure(sampler, system: SdeSystem, grid, n: int, seed: int = 0,
                     slow_index: int = 0) -> ClosureResult:
    grid = np.asarray(grid, dtype=float)
    out = [closure_drift(sampler, system, z, n, seed + i, slow_index) for i, z in enumerate(grid)]
    B, se = map(np.asarray, zip(*out))
    return ClosureResult(grid, B, se)


def integrate_effective_ode(B, z0: float, T: float, dt: float):
    """Forward Euler on ``dz/dt = B(z)``; returns ``(times, path)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    n = int(round(T / dt))
    path = np.empty(n + 1)
    path[0] = z = z0
    comp = 0.0
    for i in range(n):
        # compensated accumulation keeps long constant-drift paths exact
        inc = dt * float(B(z)) - comp
        znew = z + inc
        comp = (znew - z) - inc
        z = path[i + 1] = znew
    return dt * np.arange(n + 1), path


def conditional_coverage(samples, reference, radius: float) -> float:
    """Fraction of reference points with a sample within ``radius``."""
    s = np.atleast_2d(np.asarray(getattr(samples, "points", samples), dtype=float))
    r = np.atleast_2d(np.asarray(getattr(reference, "points", reference), dtype=float))
    if s.size == 0 or r.size == 0:
        raise ValueError("coverage needs non-empty inputs")
    if s.shape[1] != r.shape[1]:
        raise ValueError("samples and reference differ in dimension")
    d, _ = cKDTree(s).query(r, k=1, distance_upper_bound=radius)
    return float(np.mean(d <= radius))


def local_covariance_spectrum(points, k: int = 30, n_anchors: int = 200, seed: int = 0):
    """Median normalised eigenvalues of ``k``-neighbour covariances.

    Returns eigenvalues sorted descending and divided by the largest, so the
    last entry is the smallest/largest ratio.
    """
    pts = np.asarray(getattr(points, "points", points), dtype=float)
    gen = np.random.default_rng(seed)
    anchors = pts[gen.choice(pts.shape[0], min(n_anchors, pts.shape[0]), replace=False)]
    _, idx = cKDTree(pts).query(anchors, k=min(k, pts.shape[0]))
    ratios = []
    for nb in idx:
        w = np.linalg.eigvalsh(np.cov(pts[nb].T))[::-1]
        ratios.append(w / w[0])
    return np.median(ratios, axis=0)


def caps_training_data(n_traj=200, label_range=(-0.1, 0.1), n_keep=50, spread=3.0, seed=0,
                       workers=None) -> SampleSet:
    """Transformed caps3d ensemble labelled by the slow coordinate.

    Trajectories start at ``x1 = label_range[0]`` with the two fast
    coordinates drawn from ``N(0, spread^2)``, so every time slice is a
    non-degenerate two-dimensional cap.
    """
    system = make_benchmark("caps3d")
    x0 = _caps_start(n_traj, label_range[0], spread, seed)
    T = label_range[1] - label_range[0]
    n_steps = int(round(T / system.default_dt))
    traj = simulate_ensemble(system, x0, n_steps, system.default_dt, seed, keep_from=0,
                             workers=workers)
    every = max(1, n_steps // n_keep)
    x = traj[:, ::every].reshape(-1, 3)
    return SampleSet(CAPS_MAP.forward(x), labels=x[:, 0].copy())


def _caps_start(n, x1_start, spread, seed):
    gen = np.random.default_rng([seed, 1])
    return np.column_stack([np.full(n, x1_start), spread * gen.standard_normal((n, 2))])


def caps_time_slice(label: float, n: int, x1_start=-0.1, spread=3.0, seed=0) -> SampleSet:
    """Oracle conditional sample: the transformed ensemble at ``x1 = label``.

    Drifts are constant and noise additive, so the state at time ``t`` is
    Gaussian and is drawn exactly rather than integrated.
    """
    p = make_benchmark("caps3d").params
    t = (label - x1_start) / p["a1"]
    if t < 0:
        raise ValueError("label precedes the start of the ensemble")
    gen = np.random.default_rng([seed, 2])
    x2 = spread * gen.standard_normal(n) + p["a2"] * t + p["a3"] * np.sqrt(t) * gen.standard_normal(n)
    x3 = spread * gen.standard_normal(n) + p["a4"] * t + p["a5"] * np.sqrt(t) * gen.standard_normal(n)
    x = np.column_stack([np.full(n, float(label)), x2, x3])
    return SampleSet(CAPS_MAP.forward(x), labels=np.full(n, float(label)))


def matched_radius(reference, independent, level=0.95) -> float:
    """Radius at which an independent oracle draw covers ``level`` of the reference."""
    r = np.asarray(getattr(reference, "points", reference), dtype=float)
    s = np.asarray(getattr(independent, "points", independent), dtype=float)
    d, _ = cKDTree(s).query(r, k=1)
    return float(np.quantile(d, level))
