"""Diffusion maps with Euclidean or Mahalanobis distances, and Nystrom extension.

The kernel is ``A_ij = exp(-d_ij^2 / (2 eps))``.  With ``P_ii = sum_j A_ij``
it is renormalised to ``Abar = P^(-alpha/2) A P^(-alpha/2)`` and then
row-normalised to the Markov matrix ``W``.  Eigenvectors are computed from
the symmetric conjugate ``Dbar^(-1/2) Abar Dbar^(-1/2)`` and rescaled so that
``mean(phi_k^2) = 1``; ``phi_0`` is then identically 1.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from . import io, rng
from .samples import SampleSet
from .sde import IntegrationDiverged, SdeSystem, worker_count

PINV_RTOL = 1e-10
_MAGIC = b"CSDMAP01"


def _check_symmetric(C):
    C = np.asarray(C, dtype=float)
    scale = max(np.abs(C).max(), np.finfo(float).tiny)
    if not np.allclose(C, np.swapaxes(C, -1, -2), rtol=0.0, atol=1e-12 * scale):
        raise ValueError("covariance matrix is not symmetric")
    return C


def pinv_psd(C, rtol=PINV_RTOL):
    """Moore-Penrose pseudoinverse of symmetric PSD matrices (batched).

    Eigenvalues below ``rtol * max eigenvalue`` are treated as zero.
    """
    C = _check_symmetric(C)
    w, V = np.linalg.eigh(0.5 * (C + np.swapaxes(C, -1, -2)))
    wmax = np.max(np.abs(w), axis=-1, keepdims=True)
    keep = w > rtol * wmax
    inv = np.where(keep, 1.0 / np.where(keep, w, 1.0), 0.0)
    return np.einsum("...ik,...k,...jk->...ij", V, inv, V)


def mahalanobis_sq(xi, xj, Ci, Cj) -> float:
    """Symmetrised squared Mahalanobis distance with pseudoinverted covariances."""
    d = np.asarray(xj, dtype=float) - np.asarray(xi, dtype=float)
    M = pinv_psd(Ci) + pinv_psd(Cj)
    return float(max(0.5 * d @ M @ d, 0.0))


def local_covariances(system: SdeSystem, points, n_burst: int, dt: float, seed: int,
                      stream_offset: int = 0):
    """Noise covariance estimates at many points from one-step bursts.

    Point ``i`` uses random stream ``stream_offset + i``.  Each estimate is
    ``sum(delta delta^T) / (n_burst * dt)`` over ``n_burst`` independent
    Euler-Maruyama increments started at the point.
    """
    if n_burst < 2:
        raise ValueError("n_burst must be >= 2")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    n, dim = pts.shape
    m = system.noise_dim
    out = np.empty((n, dim, dim))
    sq = np.sqrt(dt)
    for i in range(n):
        xi = rng.normals(rng.stream(seed, stream_offset + i), n_burst, m)
        x = np.broadcast_to(pts[i], (n_burst, dim))
        delta = system.drift_fn(x, 0.0) * dt + (system.diffusion_fn(x, 0.0) * xi[:, None, :]).sum(-1) * sq
        if not np.all(np.isfinite(delta)):
            raise IntegrationDiverged(1, chain=stream_offset + i, seed=seed)
        out[i] = delta.T @ delta / (n_burst * dt)
    return out


def estimate_local_covariance(system: SdeSystem, point, n_burst: int, dt: float, seed: int):
    return local_covariances(system, np.asarray(point, dtype=float)[None, :], n_burst, dt, seed)[0]


# --- distances ---------------------------------------------------------------

def _sq_dist_block(xb, X, metric, pinv_b=None, pinv_all=None):
    diff = xb[:, None, :] - X[None, :, :]
    if metric == "euclidean":
        return np.einsum("bjk,bjk->bj", diff, diff)
    q_row = np.einsum("bjk,bkl,bjl->bj", diff, pinv_b, diff)
    q_col = np.einsum("bjk,jkl,bjl->bj", diff, pinv_all, diff)
    return np.maximum(0.5 * (q_row + q_col), 0.0)


def pairwise_sq_distances(X, metric="euclidean", pinvs=None, block=256, workers=None):
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    out = np.empty((N, N))
    starts = list(range(0, N, block))

    def fill(s):
        e = min(s + block, N)
        pb = pinvs[s:e] if pinvs is not None else None
        out[s:e] = _sq_dist_block(X[s:e], X, metric, pb, pinvs)

    workers = worker_count() if workers is None else workers
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(fill, starts))
    else:
        for s in starts:
            fill(s)
    # exact symmetry and zero diagonal
    out = 0.5 * (out + out.T)
    np.fill_diagonal(out, 0.0)
    return out


def median_bandwidth(X, metric="euclidean", pinvs=None, n_sub=2000, seed=0):
    """Median of pairwise squared distances over a seeded subsample."""
    X = np.asarray(X, dtype=float)
    N = X.shape[0]
    idx = np.arange(N)
    if N > n_sub:
        idx = np.sort(rng.stream(seed, 0).choice(N, n_sub, replace=False))
    D = pairwise_sq_distances(X[idx], metric, None if pinvs is None else pinvs[idx], workers=1)
    return float(np.median(D[np.triu_indices(len(idx), 1)]))


# --- model -------------------------------------------------------------------

@dataclass(frozen=True)
class DmapModel:
    train_points: np.ndarray
    metric: str
    eps_kernel: float
    alpha: float
    eigvals: np.ndarray
    eigvecs: np.ndarray
    degree: np.ndarray
    local_covs: Optional[np.ndarray] = None
    _pinvs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    _tree: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.local_covs is not None and self._pinvs is None:
            object.__setattr__(self, "_pinvs", pinv_psd(self.local_covs))
        if self.metric == "mahalanobis" and self._tree is None:
            object.__setattr__(self, "_tree", cKDTree(self.train_points))

    @property
    def n_points(self):
        return self.train_points.shape[0]

    @property
    def dim(self):
        return self.train_points.shape[1]

    def kernel_matrix(self):
        D = pairwise_sq_distances(self.train_points, self.metric, self._pinvs)
        return np.exp(-D / (2.0 * self.eps_kernel))

    def transition_matrix(self):
        """The row-stochastic matrix ``W`` (dense, ``N x N``)."""
        A = self.kernel_matrix()
        s = self.degree ** (-0.5 * self.alpha)
        Abar = A * s[:, None] * s[None, :]
        return Abar / Abar.sum(axis=1, keepdims=True)

    def coordinate(self, k=1) -> np.ndarray:
        return self.eigvecs[:, k]

    def interpolant(self, coord_index=1) -> "CvInterpolant":
        return CvInterpolant(self, coord_index)

    # persistence
    def save(self, path):
        header = {"format": "condsamp-dmap", "version": 1, "metric": self.metric,
                  "eps_kernel": self.eps_kernel, "alpha": self.alpha}
        blocks = {"train_points": self.train_points, "eigvals": self.eigvals,
                  "eigvecs": self.eigvecs, "degree": self.degree}
        if self.local_covs is not None:
            blocks["local_covs"] = self.local_covs
        io.save_model(path, _MAGIC, header, blocks)

    @classmethod
    def load(cls, path):
        header, b = io.load_model(path, _MAGIC)
        return cls(b["train_points"], header["metric"], header["eps_kernel"], header["alpha"],
                   b["eigvals"], b["eigvecs"], b["degree"], b.get("local_covs"))


def fit_dmap(points, metric="euclidean", eps_kernel=None, alpha=1.0, n_eigs=5, covs=None,
             seed=0, workers=None, eps_scale=1.0) -> DmapModel:
    """Diffusion-map embedding of ``points`` (SampleSet or array).

    Without ``eps_kernel`` the bandwidth is ``eps_scale`` times the median
    squared distance over a 2000-point subsample.  Mahalanobis distances are
    only trustworthy between nearby points, so that metric usually wants
    ``eps_scale`` well below 1.
    """
    X = points.points if isinstance(points, SampleSet) else np.asarray(points, dtype=float)
    X = np.ascontiguousarray(X, dtype=float)
    N = X.shape[0]
    if metric not in ("euclidean", "mahalanobis"):
        raise ValueError(f"unknown metric {metric!r}")
    if (metric == "mahalanobis") != (covs is not None):
        raise ValueError("covs are required for, and only for, the mahalanobis metric")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n_eigs = min(int(n_eigs), N)
    pinvs = None
    if covs is not None:
        covs = np.asarray(covs, dtype=float)
        if covs.shape != (N, X.shape[1], X.shape[1]):
            raise ValueError("need one dim x dim covariance per point")
        pinvs = pinv_psd(covs)
    if eps_kernel is None:
        eps_kernel = eps_scale * median_bandwidth(X, metric, pinvs, seed=seed)
    if not eps_kernel > 0:
        raise ValueError("eps_kernel must be positive")

    K = pairwise_sq_distances(X, metric, pinvs, workers=workers)
    K *= -1.0 / (2.0 * eps_kernel)
    np.exp(K, out=K)                                  # A
    degree = K.sum(axis=1)
    s = degree ** (-0.5 * alpha)
    K *= s[:, None]
    K *= s[None, :]                                   # Abar
    dbar = K.sum(axis=1)
    r = 1.0 / np.sqrt(dbar)
    K *= r[:, None]
    K *= r[None, :]                                   # symmetric conjugate of W
    try:
        w, psi = linalg.eigh(K, subset_by_index=[N - n_eigs, N - 1], overwrite_a=True,
                             check_finite=False)
    except linalg.LinAlgError as exc:
        raise RuntimeError(f"eigen-solver failed: {exc}") from exc
    order = np.argsort(w)[::-1]
    w, psi = w[order], psi[:, order]
    phi = psi * r[:, None]
    phi /= np.sqrt(np.mean(phi ** 2, axis=0))[None, :]
    # sign: phi_0 positive, others nonnegatively correlated with the first coordinate
    if phi[:, 0].sum() < 0:
        phi[:, 0] *= -1.0
    xc = X[:, 0] - X[:, 0].mean()
    for k in range(1, n_eigs):
        c = float(xc @ (phi[:, k] - phi[:, k].mean()))
        if c < 0 or (c == 0 and phi[np.argmax(np.abs(phi[:, k])), k] < 0):
            phi[:, k] *= -1.0
    return DmapModel(X, metric, float(eps_kernel), float(alpha), w, phi, degree,
                     covs, pinvs)


# --- out-of-sample extension -----------------------------------------------------

@dataclass(frozen=True)
class CvInterpolant:
    """Nystrom extension of one diffusion-map coordinate.

    ``Phi(x) = sum_i w_i k_i(x) / sum_i u_i k_i(x)`` with
    ``k_i(x) = exp(-d^2(x, x_i) / (2 eps))``, ``u_i = P_ii^(-alpha/2)`` and
    ``w_i = u_i phi_i / lambda``.  At a training point this is exactly
    ``(W phi)_i / lambda = phi_i``.  Far from the data the quotient is
    dominated by the nearest training points and tends to the weighted mean
    of their (scaled) coordinate values; it stays finite because kernels are
    evaluated relative to the smallest distance.

    For the Mahalanobis metric a new point borrows the covariance of its
    nearest training point (Euclidean), so the extension is exact on the
    training set and the gradient is exact away from Voronoi boundaries.
    """

    model: DmapModel
    coord_index: int = 1
    nystrom_weights: np.ndarray = field(default=None, repr=False)
    norm_weights: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        m = self.model
        k = int(self.coord_index)
        if not 0 <= k < m.eigvecs.shape[1]:
            raise ValueError(f"coord_index {k} outside the {m.eigvecs.shape[1]} stored eigenvectors")
        u = m.degree ** (-0.5 * m.alpha)
        object.__setattr__(self, "norm_weights", u)
        object.__setattr__(self, "nystrom_weights", u * m.eigvecs[:, k] / m.eigvals[k])

    @property
    def dim(self):
        return self.model.dim

    def _prepare(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        if xb.shape[1] != self.dim:
            raise ValueError(f"expected points of dim {self.dim}, got {xb.shape[1]}")
        return xb, single

    def _kernel(self, xb):
        m = self.model
        diff = xb[:, None, :] - m.train_points[None, :, :]
        if m.metric == "euclidean":
            d2 = np.einsum("bjk,bjk->bj", diff, diff)
            M = None
        else:
            _, nn = m._tree.query(xb)
            M = m._pinvs[None, :, :, :] + m._pinvs[nn][:, None, :, :]
            d2 = 0.5 * np.einsum("bjk,bjkl,bjl->bj", diff, M, diff)
        d2 = np.maximum(d2, 0.0)
        k = np.exp(-(d2 - d2.min(axis=1, keepdims=True)) / (2.0 * m.eps_kernel))
        return k, diff, M

    def value(self, x):
        xb, single = self._prepare(x)
        k, _, _ = self._kernel(xb)
        out = (k @ self.nystrom_weights) / (k @ self.norm_weights)
        return out[0] if single else out

    def value_and_grad(self, x):
        xb, single = self._prepare(x)
        k, diff, M = self._kernel(xb)
        su = k @ self.norm_weights
        val = (k @ self.nystrom_weights) / su
        # grad of d2/2 with respect to x
        if M is None:
            gd = diff
        else:
            gd = 0.5 * np.einsum("bjkl,bjl->bjk", M, diff)
        # grad k_i = -k_i * grad(d2/2) / eps
        coef = k * (self.nystrom_weights[None, :] - val[:, None] * self.norm_weights[None, :])
        grad = -np.einsum("bj,bjk->bk", coef, gd) / (self.model.eps_kernel * su[:, None])
        if single:
            return val[0], grad[0]
        return val, grad

    def gradient(self, x):
        return self.value_and_grad(x)[1]

    __call__ = value


def nystrom_extend(interp: CvInterpolant, x):
    return interp.value(x)


def nystrom_gradient(interp: CvInterpolant, x):
    return interp.gradient(x)
