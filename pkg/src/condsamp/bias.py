"""Harmonic umbrella restraints on a raw coordinate or a learned coordinate."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .manifold import CvInterpolant
from .samples import SampleSet
from .sde import SdeSystem, simulate_ensemble

_HINT = "the restraint is too stiff for this time step; reduce k*dt"


@dataclass(frozen=True)
class BiasSpec:
    """``U(x) = k/2 (cv(x) - target)^2``.

    ``kind="raw_coordinate"`` restrains state component ``cv_index``;
    ``kind="learned_cv"`` restrains the Nystrom-extended coordinate
    ``interpolant``.
    """

    kind: str
    k_spring: float
    target: float
    cv_index: Optional[int] = None
    interpolant: Optional[CvInterpolant] = None

    def __post_init__(self):
        if self.kind not in ("raw_coordinate", "learned_cv"):
            raise ValueError(f"unknown bias kind {self.kind!r}")
        if not self.k_spring > 0:
            raise ValueError("k_spring must be positive")
        if self.kind == "raw_coordinate" and self.cv_index is None:
            raise ValueError("raw_coordinate bias needs cv_index")
        if self.kind == "learned_cv" and self.interpolant is None:
            raise ValueError("learned_cv bias needs an interpolant")

    def cv(self, x):
        x = np.atleast_2d(x)
        if self.kind == "raw_coordinate":
            return x[:, self.cv_index]
        return self.interpolant.value(x)

    def potential(self, x):
        return 0.5 * self.k_spring * (self.cv(x) - self.target) ** 2

    def force(self, x):
        """``-grad U`` at each row of ``x``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind == "raw_coordinate":
            f = np.zeros_like(x)
            f[:, self.cv_index] = -self.k_spring * (x[:, self.cv_index] - self.target)
            return f
        val, grad = self.interpolant.value_and_grad(x)
        return -self.k_spring * (val - self.target)[:, None] * grad


def bias_system(base: SdeSystem, spec: BiasSpec) -> SdeSystem:
    """``base`` with ``-grad U`` added to the drift; diffusion untouched."""
    if spec.kind == "raw_coordinate" and not 0 <= spec.cv_index < base.dim:
        raise ValueError(f"cv_index {spec.cv_index} out of range for dim {base.dim}")
    if spec.kind == "learned_cv" and spec.interpolant.dim != base.dim:
        raise ValueError(f"interpolant has dim {spec.interpolant.dim}, system has {base.dim}")
    base_drift = base.drift_fn

    if spec.kind == "raw_coordinate":
        c, k, x0 = spec.cv_index, spec.k_spring, spec.target

        def drift(x, t):
            out = base_drift(x, t).copy()
            out[:, c] -= k * (x[:, c] - x0)
            return out
    else:
        def drift(x, t):
            return base_drift(x, t) + spec.force(x)

    params = dict(base.params, k_spring=spec.k_spring, bias_target=spec.target)
    return SdeSystem(f"{base.system_id}+us", base.dim, base.noise_dim, drift,
                     base.diffusion_fn, params, base.default_dt)


def default_warmup(n_steps: int) -> int:
    return n_steps // 10


def run_umbrella_ensemble(base: SdeSystem, spec: BiasSpec, x0s, n_steps: int, warmup=None,
                          dt=None, seed: int = 0, streams=None, workers=None) -> np.ndarray:
    """Biased trajectories with the first ``warmup`` post-start states dropped.

    Returns ``(K, n_steps - warmup, dim)``: one sample per force evaluation
    after warmup.
    """
    warmup = default_warmup(n_steps) if warmup is None else int(warmup)
    if not 0 <= warmup < n_steps:
        raise ValueError("need 0 <= warmup < n_steps")
    dt = base.default_dt if dt is None else dt
    return simulate_ensemble(bias_system(base, spec), x0s, n_steps, dt, seed, streams=streams,
                             keep_from=warmup + 1, workers=workers, divergence_hint=_HINT)


def run_umbrella(base: SdeSystem, spec: BiasSpec, x0, n_steps: int, warmup=None, dt=None,
                 seed: int = 0, stream: int = 0) -> SampleSet:
    traj = run_umbrella_ensemble(base, spec, np.asarray(x0, dtype=float)[None, :], n_steps,
                                 warmup, dt, seed, streams=[stream], workers=1)[0]
    return SampleSet(traj, labels=np.full(traj.shape[0], spec.target))
