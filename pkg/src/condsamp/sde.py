"""SDE systems, coordinate maps and the Euler-Maruyama integrator.

All drift and diffusion callables are vectorised over a leading batch axis:
``drift(x, t)`` maps ``(B, dim)`` to ``(B, dim)`` and ``diffusion(x, t)``
maps ``(B, dim)`` to ``(B, dim, m)``.
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Mapping, Optional

import numpy as np

from . import io, rng
from .samples import SampleSet


class IntegrationDiverged(RuntimeError):
    """A state component became non-finite."""

    def __init__(self, step, chain=None, seed=None, hint=""):
        self.step = step
        self.chain = chain
        self.seed = seed
        msg = f"integration diverged at step {step}"
        if chain is not None:
            msg += f" (chain {chain}"
            msg += f", seed {seed})" if seed is not None else ")"
        if hint:
            msg += f"; {hint}"
        super().__init__(msg)


class DomainError(ValueError):
    """State outside the domain where a system's coefficients are defined."""


@dataclass(frozen=True)
class SdeSystem:
    system_id: str
    dim: int
    noise_dim: int
    drift_fn: Callable = field(repr=False)
    diffusion_fn: Callable = field(repr=False)
    params: Mapping[str, float] = field(default_factory=dict)
    default_dt: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "params", MappingProxyType(dict(self.params)))

    def _batched(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise ValueError(f"{self.system_id}: expected state dim {self.dim}, got {x.shape[-1]}")
        return x, single

    def drift(self, x, t=0.0):
        xb, single = self._batched(x)
        out = self.drift_fn(xb, t)
        return out[0] if single else out

    def diffusion(self, x, t=0.0):
        xb, single = self._batched(x)
        out = self.diffusion_fn(xb, t)
        return out[0] if single else out


def _diag_diffusion(*coefs):
    """Constant diagonal diffusion, one Brownian motion per listed nonzero entry."""
    sig = np.diag(np.asarray(coefs, dtype=float))

    def diffusion(x, t):
        return np.broadcast_to(sig, (x.shape[0],) + sig.shape)

    return diffusion


def _ou2d(p):
    a1, a2, a3, a4 = p["a1"], p["a2"], p["a3"], p["a4"]

    def drift(x, t):
        out = np.empty_like(x)
        out[:, 0] = a1
        out[:, 1] = a3 * (1.0 - x[:, 1])
        return out

    return drift, _diag_diffusion(a2, a4), 2


def _halfmoon(p):
    # Ito transform of ou2d under the half-moon map, with the coefficients'
    # y1*sqrt((y1^2+y2^2)/y1^2) denominators kept as written.  That factor is
    # sign(y1)*r, so the expressions match the push-forward only for y1 > 0.
    a1, a2, a3, a4 = p["a1"], p["a2"], p["a3"], p["a4"]
    s = a2 * a2 + a4 * a4 + 2.0 * a3

    def _parts(x):
        y1, y2 = x[:, 0], x[:, 1]
        if np.any(y1 == 0.0):
            raise DomainError("half-moon coefficients are undefined at y1 = 0")
        rr = y1 * y1 + y2 * y2
        r = np.sqrt(rr)
        q = np.sqrt(rr / (y1 * y1))
        return y1, y2, r, q, y1 * q

    def drift(x, t):
        y1, y2, r, q, den = _parts(x)
        out = np.empty_like(x)
        out[:, 0] = -0.5 * ((s * y1 + 2.0 * y2 * (a1 + a3)) * r
                            - 2.0 * a3 * y1 * y1 * y2 - 2.0 * a3 * y2 ** 3
                            + 2.0 * a4 * a4 * y2 - 2.0 * a3 * y1) / den
        out[:, 1] = (((a1 + a3) * y1 - 0.5 * y2 * s) * r
                     - a3 * y1 ** 3 + (-a3 * y2 * y2 + a4 * a4) * y1 + a3 * y2) / den
        return out

    def diffusion(x, t):
        y1, y2, r, q, den = _parts(x)
        out = np.empty((x.shape[0], 2, 2))
        out[:, 0, 0] = -r * y2 * a2 / den
        out[:, 0, 1] = -0.5 * (2.0 * y2 * a4 * r - 2.0 * a4 * y1) / den
        out[:, 1, 0] = a2 * r / q
        out[:, 1, 1] = (a4 * r * y1 + y2 * a4) / den
        return out

    return drift, diffusion, 2


def doublewell_potential(z2, z1, h):
    """Fast-direction potential whose negative z2-derivative is the z2 drift."""
    d = 0.4 * z1 - 2.0
    g = h - 2.0 * h * z2 + (1.0 + h - d) * z2 ** 2 + (0.75 * d - 2.0) * z2 ** 3 + z2 ** 4
    return (1.0 + z2) ** 2 * g


def _doublewell(p):
    a1, a2, a3, h = p["a1"], p["a2"], p["a3"], p["h"]

    def drift(x, t):
        z1, z2 = x[:, 0], x[:, 1]
        d = 0.4 * z1 - 2.0
        out = np.empty_like(x)
        out[:, 0] = a1
        out[:, 1] = -((1.0 + z2) ** 2 * (2.0 * (1.0 + h - d) * z2 - 2.0 * h
                                         + 3.0 * (0.75 * d - 2.0) * z2 ** 2 + 4.0 * z2 ** 3)
                      + 2.0 * (1.0 + z2) * (h - 2.0 * h * z2 + (1.0 + h - d) * z2 ** 2
                                            + (0.75 * d - 2.0) * z2 ** 3 + z2 ** 4))
        return out

    return drift, _diag_diffusion(a2, a3), 2


def _caps3d(p):
    a1, a2, a3, a4, a5 = p["a1"], p["a2"], p["a3"], p["a4"], p["a5"]
    sig = np.array([[0.0, 0.0], [a3, 0.0], [0.0, a5]])
    const = np.array([a1, a2, a4])

    def drift(x, t):
        return np.broadcast_to(const, x.shape).copy()

    def diffusion(x, t):
        return np.broadcast_to(sig, (x.shape[0], 3, 2))

    return drift, diffusion, 3


_OU_DEFAULTS = {"a1": 1e-3, "a2": 1e-3, "a3": 1e-1, "a4": 1e-1}

BENCHMARKS = {
    "ou2d": (_ou2d, _OU_DEFAULTS, 1.0),
    "halfmoon": (_halfmoon, _OU_DEFAULTS, 5e-2),
    "doublewell": (_doublewell, {"a1": 1e-4, "a2": 1e-4, "a3": 1e-1, "h": 8.0}, 1e-3),
    "caps3d": (_caps3d, {"a1": 1.0, "a2": 10.0, "a3": np.sqrt(0.02), "a4": 100.0,
                         "a5": np.sqrt(0.02)}, 1e-3),
}


def make_benchmark(system_id: str, overrides: Optional[Mapping[str, float]] = None) -> SdeSystem:
    """Build one of the four benchmark systems with optional parameter overrides."""
    if system_id not in BENCHMARKS:
        raise KeyError(f"unknown system {system_id!r}; choose from {sorted(BENCHMARKS)}")
    builder, defaults, dt = BENCHMARKS[system_id]
    params = dict(defaults)
    for k, v in (overrides or {}).items():
        if k not in params:
            raise KeyError(f"{system_id} has no parameter {k!r}; valid: {sorted(params)}")
        params[k] = float(v)
    drift, diffusion, dim = builder(params)
    m = diffusion(np.ones((1, dim)), 0.0).shape[-1]
    return SdeSystem(system_id, dim, m, drift, diffusion, params, dt)


def make_system(system_id, dim, noise_dim, drift, diffusion, params=None, default_dt=1.0):
    """Wrap user-supplied vectorised drift/diffusion callables."""
    sys_ = SdeSystem(system_id, dim, noise_dim, drift, diffusion, params or {}, default_dt)
    probe = np.zeros((2, dim))
    if sys_.drift_fn(probe, 0.0).shape != (2, dim):
        raise ValueError("drift must map (B, dim) -> (B, dim)")
    if sys_.diffusion_fn(probe, 0.0).shape != (2, dim, noise_dim):
        raise ValueError("diffusion must map (B, dim) -> (B, dim, noise_dim)")
    return sys_


# --- coordinate maps -------------------------------------------------------

@dataclass(frozen=True)
class TransformMap:
    id: str
    dim: int
    forward: Callable = field(repr=False)
    jacobian: Optional[Callable] = field(default=None, repr=False)
    inverse: Optional[Callable] = field(default=None, repr=False)


def _halfmoon_forward(x):
    th = x[:, 0] + x[:, 1] - 1.0
    return np.column_stack([x[:, 1] * np.cos(th), x[:, 1] * np.sin(th)])


def _halfmoon_jacobian(x):
    x2 = x[:, 1]
    th = x[:, 0] + x2 - 1.0
    c, s = np.cos(th), np.sin(th)
    J = np.empty((x.shape[0], 2, 2))
    J[:, 0, 0] = -x2 * s
    J[:, 0, 1] = c - x2 * s
    J[:, 1, 0] = x2 * c
    J[:, 1, 1] = s + x2 * c
    return J


def _halfmoon_inverse(y):
    # valid on the band x2 > 0, x1 + x2 - 1 in (-pi, pi]
    x2 = np.hypot(y[:, 0], y[:, 1])
    return np.column_stack([np.arctan2(y[:, 1], y[:, 0]) - x2 + 1.0, x2])


def _caps_forward(x):
    r2 = x[:, 1] ** 2 + x[:, 2] ** 2
    return np.column_stack([x[:, 0] + r2, r2, x[:, 2]])


def _caps_jacobian(x):
    J = np.zeros((x.shape[0], 3, 3))
    J[:, 0, 0] = 1.0
    J[:, 0, 1] = J[:, 1, 1] = 2.0 * x[:, 1]
    J[:, 0, 2] = J[:, 1, 2] = 2.0 * x[:, 2]
    J[:, 2, 2] = 1.0
    return J


HALFMOON_MAP = TransformMap("halfmoon", 2, _halfmoon_forward, _halfmoon_jacobian, _halfmoon_inverse)
CAPS_MAP = TransformMap("caps", 3, _caps_forward, _caps_jacobian)
TRANSFORMS = {"halfmoon": HALFMOON_MAP, "caps": CAPS_MAP}


def apply_transform(points: SampleSet, tmap: TransformMap) -> SampleSet:
    if points.dim != tmap.dim:
        raise ValueError(f"map {tmap.id!r} acts on dim {tmap.dim}, points have dim {points.dim}")
    return points.with_points(tmap.forward(points.points))


# --- integration -----------------------------------------------------------

def _increment(system, x, t, dt, sqrt_dt, xi):
    sig = system.diffusion_fn(x, t)
    return x + system.drift_fn(x, t) * dt + (sig * xi[:, None, :]).sum(axis=-1) * sqrt_dt


def em_step(system: SdeSystem, state, t, dt, normals, step=None):
    """One Euler-Maruyama step: ``state + drift*dt + diffusion @ normals * sqrt(dt)``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(state, dtype=float)[None, :]
    xi = np.asarray(normals, dtype=float).reshape(1, -1)
    if xi.shape[1] != system.noise_dim:
        raise ValueError(f"expected {system.noise_dim} normals, got {xi.shape[1]}")
    out = _increment(system, x, t, dt, np.sqrt(dt), xi)[0]
    if not np.all(np.isfinite(out)):
        raise IntegrationDiverged(step if step is not None else 0)
    return out


@dataclass
class Trajectory:
    states: np.ndarray
    dt: float
    seed: int
    system_id: str
    params: Mapping[str, float] = field(default_factory=dict)
    t0: float = 0.0

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.states.shape[0])

    def to_samples(self, skip=0) -> SampleSet:
        return SampleSet(self.states[skip:])

    def save(self, csv_path, meta_path=None):
        dim = self.states.shape[1]
        header = ["t"] + [f"x{i + 1}" for i in range(dim)]
        io.write_matrix_csv(csv_path, header, np.column_stack([self.times, self.states]))
        if meta_path is None:
            meta_path = os.path.splitext(os.fspath(csv_path))[0] + ".json"
        io.write_json(meta_path, {
            "system_id": self.system_id,
            "params": dict(self.params),
            "dt": self.dt,
            "seed": self.seed,
            "n_steps": self.n_steps,
        })

    @classmethod
    def load(cls, csv_path, meta_path=None):
        import json

        if meta_path is None:
            meta_path = os.path.splitext(os.fspath(csv_path))[0] + ".json"
        with open(meta_path) as fh:
            meta = json.load(fh)
        _, data = io.read_matrix_csv(csv_path)
        return cls(data[:, 1:], meta["dt"], meta["seed"], meta["system_id"], meta["params"],
                   float(data[0, 0]))


def worker_count():
    env = os.environ.get("CONDSAMP_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_block(system, x0, n_steps, dt, seed, streams, keep_from, t0, chunk, hint):
    K = x0.shape[0]
    m = system.noise_dim
    gens = [rng.stream(seed, int(s)) for s in streams]
    out = np.empty((K, n_steps + 1 - keep_from, system.dim))
    x = x0.copy()
    if keep_from == 0:
        out[:, 0] = x
    sq = np.sqrt(dt)
    step = 0
    while step < n_steps:
        c = min(chunk, n_steps - step)
        xi = np.stack([rng.normals(g, c, m) for g in gens], axis=1)
        for s in range(c):
            x = _increment(system, x, t0 + step * dt, dt, sq, xi[s])
            step += 1
            bad = ~np.isfinite(x).all(axis=1)
            if bad.any():
                k = int(np.argmax(bad))
                raise IntegrationDiverged(step, int(streams[k]), seed, hint)
            if step >= keep_from:
                out[:, step - keep_from] = x
    return out


def simulate_ensemble(system: SdeSystem, x0, n_steps: int, dt: float, seed: int,
                      streams=None, keep_from: int = 0, t0: float = 0.0,
                      workers: Optional[int] = None, chunk: int = 2048,
                      divergence_hint: str = "") -> np.ndarray:
    """Integrate ``K`` independent trajectories side by side.

    Trajectory ``k`` draws its noise from stream ``streams[k]`` (default ``k``),
    so each row of the result depends only on its own initial state, stream
    index and the seed, never on ``K``, ordering or worker count.

    Returns an array ``(K, n_steps + 1 - keep_from, dim)``; row ``j`` of each
    trajectory is the state after ``keep_from + j`` steps.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not 0 <= keep_from <= n_steps:
        raise ValueError("keep_from must lie in [0, n_steps]")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    if x0.shape[1] != system.dim:
        raise ValueError(f"initial states have dim {x0.shape[1]}, system has {system.dim}")
    K = x0.shape[0]
    streams = np.arange(K) if streams is None else np.asarray(streams)
    if len(streams) != K:
        raise ValueError("need one stream index per trajectory")
    workers = worker_count() if workers is None else max(1, int(workers))
    nblocks = min(workers, K)
    if nblocks == 1:
        return _run_block(system, x0, n_steps, dt, seed, streams, keep_from, t0, chunk,
                          divergence_hint)
    bounds = np.linspace(0, K, nblocks + 1).astype(int)
    with ThreadPoolExecutor(nblocks) as pool:
        parts = list(pool.map(
            lambda ab: _run_block(system, x0[ab[0]:ab[1]], n_steps, dt, seed,
                                  streams[ab[0]:ab[1]], keep_from, t0, chunk, divergence_hint),
            zip(bounds[:-1], bounds[1:])))
    return np.concatenate(parts)


def integrate(system: SdeSystem, x0, n_steps: int, dt: float, seed: int, stream: int = 0,
              t0: float = 0.0) -> Trajectory:
    """Single trajectory of ``n_steps`` Euler-Maruyama steps (``n_steps + 1`` rows)."""
    states = simulate_ensemble(system, np.asarray(x0, dtype=float)[None, :], n_steps, dt, seed,
                               streams=[stream], t0=t0, workers=1)[0]
    return Trajectory(states, dt, seed, system.system_id, dict(system.params), t0)
