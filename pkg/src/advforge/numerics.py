"""Dense linear algebra, k-means and total-variation denoising.

Everything here works in float64. The heavy lifting (SVD, BLAS products) is
delegated to numpy; the rank cutoffs, seeding and solver loops live here.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_PINV_RTOL = 1e-10
TV_STEP = 0.248


class InvalidInputError(ValueError):
    """Raised when an operation receives malformed or non-finite input."""


def _as_matrix(m, name="matrix") -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim < 2:
        raise InvalidInputError(f"{name} must be at least 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return a


# -- plain dense ops --------------------------------------------------------


def matmul(a, b) -> np.ndarray:
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[-1] != b.shape[-2]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matvec(a, x) -> np.ndarray:
    a = _as_matrix(a, "a")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != a.shape[-1]:
        raise InvalidInputError(f"cannot multiply {a.shape} by vector {x.shape}")
    return np.einsum("...ij,...j->...i", a, x)


def transpose(a) -> np.ndarray:
    return np.swapaxes(_as_matrix(a), -1, -2).copy()


# -- SVD / pseudoinverse ----------------------------------------------------


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray
    singular_values: np.ndarray
    vt: np.ndarray


def svd(m) -> SvdResult:
    """Thin SVD; works on stacks of matrices (leading batch axes)."""
    a = _as_matrix(m)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return SvdResult(u, s, vt)


def pinv(m, rel_tol: float = DEFAULT_PINV_RTOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse.

    Singular values below ``rel_tol * sigma_max`` are treated as zero. Accepts
    a single matrix or a stack ``(..., rows, cols)``; the cutoff is applied per
    matrix.

    Parameters
    ----------
    m : array_like, shape (..., r, c)
    rel_tol : float in (0, 1)

    Returns
    -------
    ndarray, shape (..., c, r)
    """
    if not 0.0 < rel_tol < 1.0:
        raise InvalidInputError("rel_tol must lie in (0, 1)")
    res = svd(m)
    s = res.singular_values
    smax = s[..., :1] if s.shape[-1] else s
    keep = s > rel_tol * smax
    inv_s = np.zeros_like(s)
    np.divide(1.0, s, out=inv_s, where=keep)
    return np.swapaxes(res.vt, -1, -2) @ (inv_s[..., :, None] * np.swapaxes(res.u, -1, -2))


# -- k-means ----------------------------------------------------------------


@dataclass(frozen=True)
class ClusterModel:
    centers: np.ndarray
    inertia: float
    n_iter: int = 0
    inertia_trace: tuple = ()

    @property
    def k(self) -> int:
        return len(self.centers)

    def nearest(self, y) -> np.ndarray:
        """Index of the closest center (L2) for each row of ``y``; ties go to the lowest index."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        d2 = _sq_dists(y, self.centers)
        return np.argmin(d2, axis=1)


def _sq_dists(x, c):
    d2 = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass sits on chosen centers; pick any unused distinct point
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None, :])[:, 0])
    return np.array(centers)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding from ``np.random.default_rng(seed)``."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise InvalidInputError("kmeans needs at least one point")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("points contain non-finite values")
    if k < 1 or k > len(np.unique(x, axis=0)):
        raise InvalidInputError(f"k={k} exceeds the number of distinct points")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp_init(x, k, rng)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(x)), labels].sum()))
        new = centers.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = np.max(np.abs(new - centers))
        centers = new
        if shift < tol:
            break
    d2 = _sq_dists(x, centers)
    inertia = float(d2.min(axis=1).sum())
    trace.append(inertia)
    return ClusterModel(centers=centers, inertia=inertia, n_iter=it, inertia_trace=tuple(trace))


# -- total variation ---------------------------------------------------------


def _grad2d(u):
    gx = np.zeros_like(u)
    gy = np.zeros_like(u)
    gx[..., :-1, :] = u[..., 1:, :] - u[..., :-1, :]
    gy[..., :, :-1] = u[..., :, 1:] - u[..., :, :-1]
    return gx, gy


def _div2d(px, py):
    # negative adjoint of _grad2d
    dx = np.zeros_like(px)
    dx[..., 0, :] = px[..., 0, :]
    dx[..., 1:-1, :] = px[..., 1:-1, :] - px[..., :-2, :]
    dx[..., -1, :] = -px[..., -2, :]
    dy = np.zeros_like(py)
    dy[..., :, 0] = py[..., :, 0]
    dy[..., :, 1:-1] = py[..., :, 1:-1] - py[..., :, :-2]
    dy[..., :, -1] = -py[..., :, -2]
    return dx + dy


def total_variation(img) -> np.ndarray:
    """Isotropic discrete TV over the last two axes."""
    gx, gy = _grad2d(np.asarray(img, dtype=np.float64))
    return np.sqrt(gx**2 + gy**2).sum(axis=(-2, -1))


def tv_denoise(img, fidelity: float = 10.0, iters: int = 30) -> np.ndarray:
    """ROF denoising with Chambolle's dual projection iterations.

    Approximately minimises ``TV(u) + fidelity/2 * ||u - img||^2`` over the
    last two axes; leading axes are treated as a batch.
    """
    if fidelity <= 0:
        raise InvalidInputError("fidelity must be positive")
    if iters < 1:
        raise InvalidInputError("iters must be >= 1")
    f = np.asarray(img, dtype=np.float64)
    if f.ndim < 2 or not np.all(np.isfinite(f)):
        raise InvalidInputError("tv_denoise needs a finite 2-D grid")
    lam = 1.0 / fidelity
    px = np.zeros_like(f)
    py = np.zeros_like(f)
    for _ in range(iters):
        gx, gy = _grad2d(_div2d(px, py) - f / lam)
        norm = 1.0 + TV_STEP * np.sqrt(gx**2 + gy**2)
        px = (px + TV_STEP * gx) / norm
        py = (py + TV_STEP * gy) / norm
    return f - lam * _div2d(px, py)
