"""Histogram estimates of conditional densities, pooling, and reference PDFs."""

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate

from . import io
from .sde import BENCHMARKS


@dataclass(frozen=True)
class HistogramEstimate:
    """Density-normalised histogram.

    ``counts`` are the (possibly weighted) in-range bin totals; ``density`` is
    ``counts / (counts.sum() * width)``.  ``n_outside`` counts samples that
    fell outside ``[edges[0], edges[-1]]``.
    """

    edges: np.ndarray
    density: np.ndarray
    n_samples: int
    counts: np.ndarray = field(repr=False)
    n_outside: int = 0

    @property
    def widths(self):
        return np.diff(self.edges)

    @property
    def midpoints(self):
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def mass(self):
        return float(np.sum(self.density * self.widths))

    def save(self, path):
        io.write_matrix_csv(path, ["bin_lo", "bin_hi", "density"],
                            np.column_stack([self.edges[:-1], self.edges[1:], self.density]))


def _from_counts(edges, counts, n_samples, n_outside):
    total = counts.sum()
    if total <= 0:
        raise ValueError("no samples fell inside the histogram range")
    density = counts / (total * np.diff(edges))
    return HistogramEstimate(edges, density, int(n_samples), counts, int(n_outside))


def histogram(samples, bins: int, range: tuple, weights=None) -> HistogramEstimate:
    samples = np.asarray(samples, dtype=float).reshape(-1)
    if samples.size == 0:
        raise ValueError("empty sample set")
    lo, hi = float(range[0]), float(range[1])
    if bins < 1 or not lo < hi:
        raise ValueError("need bins >= 1 and lo < hi")
    edges = np.linspace(lo, hi, int(bins) + 1)
    inside = (samples >= lo) & (samples <= hi)
    w = None if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    counts, _ = np.histogram(samples, bins=edges, weights=w)
    return _from_counts(edges, counts.astype(float), samples.size, int((~inside).sum()))


def default_range(samples, n_sigma=5.0):
    s = np.asarray(samples, dtype=float)
    mu, sd = s.mean(), s.std()
    if sd == 0:
        sd = max(abs(mu), 1.0) * 1e-3
    return mu - n_sigma * sd, mu + n_sigma * sd


def pool(estimates) -> HistogramEstimate:
    """Count-weighted combination of histograms on identical edges.

    The result is bitwise what ``histogram`` returns on the concatenated raw
    samples, since both divide the same summed counts by the same total.
    """
    estimates = list(estimates)
    if not estimates:
        raise ValueError("nothing to pool")
    edges = estimates[0].edges
    for e in estimates[1:]:
        if e.edges.shape != edges.shape or not np.array_equal(e.edges, edges):
            raise ValueError("cannot pool histograms with different edges")
    # exact for integer counts in any order
    counts = np.sum(np.stack([e.counts for e in estimates]), axis=0)
    return _from_counts(edges, counts, sum(e.n_samples for e in estimates),
                        sum(e.n_outside for e in estimates))


@dataclass(frozen=True)
class ReferencePdf:
    eval: Callable = field(repr=False)
    support: tuple
    breakpoints: tuple = ()

    def __call__(self, x):
        return self.eval(x)

    def normalization(self) -> float:
        """Adaptive quadrature of the density over its support.

        The support is split at ``breakpoints`` and each piece integrated
        separately, so narrow modes cannot be stepped over.
        """
        lo, hi = self.support
        cuts = [lo] + sorted(p for p in self.breakpoints if lo < p < hi) + [hi]
        f = lambda z: float(self.eval(np.array([z]))[0])  # noqa: E731
        return float(sum(integrate.quad(f, a, b, limit=200, epsabs=1e-13)[0]
                         for a, b in zip(cuts[:-1], cuts[1:])))


def l1_error(est: HistogramEstimate, ref: ReferencePdf) -> float:
    """Midpoint-rule L1 distance between a histogram and a reference density."""
    return float(np.sum(np.abs(est.density - ref(est.midpoints)) * est.widths))


def _normal_pdf(mean, var, n_sd=12.0):
    sd = np.sqrt(var)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.exp(-0.5 * (x - mean) ** 2 / var) / np.sqrt(2.0 * np.pi * var)

    return ReferencePdf(f, (mean - n_sd * sd, mean + n_sd * sd), (mean,))


def doublewell_pdf(z1, h, a3, support=(-2.5, 2.5), n_grid=10_000):
    """Stationary density of the double-well fast coordinate at fixed ``z1``.

    The potential is recovered by cumulative Simpson integration of the
    negated z2-drift on a uniform grid; the density ``exp(-2V/a3^2)`` is
    linearly interpolated and normalised by the trapezoid rule, which is the
    exact integral of that interpolant.
    """
    from .sde import make_benchmark

    system = make_benchmark("doublewell", {"h": h, "a3": a3})
    grid = np.linspace(support[0], support[1], int(n_grid))
    states = np.column_stack([np.full_like(grid, z1), grid])
    force = system.drift(states)[:, 1]
    V = -integrate.cumulative_simpson(force, x=grid, initial=0.0)
    logp = -2.0 * (V - V.min()) / (a3 * a3)
    p = np.exp(logp)
    p /= integrate.trapezoid(p, grid)

    def f(x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, grid, p, left=0.0, right=0.0)

    cuts = grid[::10]
    return ReferencePdf(f, tuple(support), tuple(float(v) for v in cuts))


def true_fast_pdf(system_id: str, slow_value: float, params: Optional[dict] = None,
                  support=None) -> ReferencePdf:
    """Reference conditional density of the fast coordinate."""
    if system_id not in ("ou2d", "doublewell"):
        raise ValueError(f"no reference density for {system_id!r}")
    p = dict(BENCHMARKS[system_id][1])
    p.update(params or {})
    if system_id == "ou2d":
        return _normal_pdf(1.0, p["a4"] ** 2 / (2.0 * p["a3"]))
    return doublewell_pdf(slow_value, p["h"], p["a3"], support=support or (-2.5, 2.5))
