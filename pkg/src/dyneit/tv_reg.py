"""Total-variation regularization on P1 fields.

``K`` maps a nodal field to per-element area-weighted gradients,
``y_e = |e| grad x|_e``, so ``alpha * sum_e ||y_e||`` is the isotropic TV
``alpha * int |grad x|``.  Dual fields are arrays of shape ``(n_elements, 2)``.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy import sparse

from .cem_forward import X_MAX, X_MIN
from .errors import NumericError
from .mesh import Mesh

logger = logging.getLogger(__name__)

#: TV weight used in the experiments
ALPHA = 0.5

DualField = np.ndarray


def gradient_operator(mesh: Mesh) -> sparse.csr_matrix:
    """Sparse ``K`` of shape ``(2 m, n)``; rows ``2e`` and ``2e+1`` hold element ``e``."""
    K = mesh._cache.get("tv_K")
    if K is None:
        geo = mesh.geometry
        m = mesh.n_elements
        vals = geo.areas[:, None, None] * geo.grads  # (m, 3, 2)
        rows = 2 * np.arange(m)[:, None, None] + np.arange(2)[None, None, :]
        rows = np.broadcast_to(rows, vals.shape)
        cols = np.broadcast_to(mesh.triangles[:, :, None], vals.shape)
        K = sparse.csr_matrix((vals.ravel(), (rows.ravel(), cols.ravel())), shape=(2 * m, mesh.n_nodes))
        mesh._cache["tv_K"] = K
    return K


def apply_K(mesh: Mesh, x) -> DualField:
    return (gradient_operator(mesh) @ np.asarray(x, dtype=float)).reshape(-1, 2)


def apply_K_adjoint(mesh: Mesh, y: DualField) -> np.ndarray:
    return gradient_operator(mesh).T @ np.asarray(y, dtype=float).ravel()


def element_gradients(mesh: Mesh, x) -> DualField:
    """Unweighted per-element gradients ``grad x|_e``."""
    return np.einsum("mad,ma->md", mesh.geometry.grads, np.asarray(x, dtype=float)[mesh.triangles])


def tv_value(mesh: Mesh, x, alpha: float = ALPHA) -> float:
    """``alpha * sum_e ||(K x)_e||``."""
    return float(alpha * np.linalg.norm(apply_K(mesh, x), axis=1).sum())


def prox_F(x, x_min: float = X_MIN, x_max: float = X_MAX) -> np.ndarray:
    """Projection onto the box ``[x_min, x_max]``."""
    return np.clip(x, x_min, x_max)


def prox_Gstar(y: DualField, alpha: float = ALPHA) -> DualField:
    """Per-element projection onto the ball of radius ``alpha``."""
    y = np.asarray(y, dtype=float)
    norms = np.linalg.norm(y, axis=-1, keepdims=True)
    scale = np.minimum(1.0, alpha / np.maximum(norms, np.finfo(float).tiny))
    return y * scale


def dual_feasible(y: DualField, alpha: float, tol: float = 1e-12) -> bool:
    return bool(np.all(np.linalg.norm(y, axis=-1) <= alpha + tol))


def estimate_K_norm(mesh: Mesh, rtol: float = 1e-10, max_iter: int = 10_000, seed: int = 0) -> float:
    """Power-method estimate of ``||K||`` (largest singular value).

    Raises :class:`NumericError` when the Rayleigh quotient has not settled
    to ``rtol`` after ``max_iter`` iterations.
    """
    K = gradient_operator(mesh)
    v = np.random.default_rng(seed).standard_normal(K.shape[1])
    v /= np.linalg.norm(v)
    lam = 0.0
    for it in range(max_iter):
        w = K.T @ (K @ v)
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) <= rtol * lam_new:
            logger.debug("power method converged after %d iterations", it + 1)
            return float(np.sqrt(lam_new))
        lam = lam_new
    raise NumericError(f"power method did not converge in {max_iter} iterations")
