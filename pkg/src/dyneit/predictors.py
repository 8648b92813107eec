"""Primal and dual predictors between consecutive frames.

The primal predictor transports the reconstruction along an estimated
displacement field ``h`` (``x_pred(xi) = x(xi + h(xi))``).  ``h`` comes
from an optical-flow type fit of the linearized transport equation
between the two previous iterates.  Dual predictors then adapt the
per-element TV dual variable to the transported field.
"""

from __future__ import annotations

import enum
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .cem_forward import X_MAX, X_MIN
from .errors import NumericError, ParameterError
from .mesh import Mesh, interpolate
from .popdn_core import OnlineState, Prediction
from .tv_reg import ALPHA, apply_K, element_gradients, prox_Gstar

logger = logging.getLogger(__name__)

GREEDY_TOL = 1e-14


class PredictorKind(str, enum.Enum):
    NO_PREDICTION = "NoPrediction"
    PRIMAL_ONLY = "PrimalOnly"
    GREEDY = "Greedy"
    AFFINE = "Affine"


@dataclass(frozen=True)
class FlowField:
    """Nodal displacement ``h`` of shape ``(n_nodes, 2)``, estimated at ``frame``."""

    h: np.ndarray
    frame: int = 0

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        if h.ndim != 2 or h.shape[1] != 2:
            raise ParameterError(f"flow must have shape (n, 2), got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite flow", frame=self.frame)
        object.__setattr__(self, "h", h)

    @classmethod
    def zeros(cls, n_nodes: int, frame: int = 0) -> "FlowField":
        return cls(np.zeros((n_nodes, 2)), frame)


@dataclass(frozen=True)
class PredictorConfig:
    kind: PredictorKind = PredictorKind.AFFINE
    beta1: float = 1e-3
    beta2: float = 1e-5
    cadence: int = 4
    affine_gain: float = 10.0
    affine_threshold: float = 1e-12
    affine_gradient: str = "raw"

    def __post_init__(self):
        object.__setattr__(self, "kind", PredictorKind(self.kind))
        if self.affine_gradient not in ("raw", "weighted"):
            raise ParameterError("affine_gradient must be 'raw' or 'weighted'")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ParameterError("beta1 and beta2 must be positive")
        if self.cadence < 1:
            raise ParameterError("cadence must be at least 1")


def _mass_and_stiffness(mesh: Mesh):
    """P1 mass and unit stiffness matrices (cached on the mesh)."""
    cached = mesh._cache.get("mass_stiffness")
    if cached is None:
        geo = mesh.geometry
        tri = mesh.triangles
        local_m = geo.areas[:, None, None] / 12.0 * (np.ones((3, 3)) + np.eye(3))
        local_s = geo.areas[:, None, None] * np.einsum("mad,mbd->mab", geo.grads, geo.grads)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        n = mesh.n_nodes
        Mm = sparse.csr_matrix((local_m.ravel(), (rows, cols)), shape=(n, n))
        Ss = sparse.csr_matrix((local_s.ravel(), (rows, cols)), shape=(n, n))
        cached = (Mm, Ss, local_m)
        mesh._cache["mass_stiffness"] = cached
    return cached


def flow_system(x_curr, x_prev, beta1: float, beta2: float, mesh: Mesh):
    """Normal equations ``(A, rhs)`` of the flow fit, unknowns ``[v1; v2]``.

    The fit minimizes ``0.5 int (dx - grad x_prev . v)^2 + beta1/2 int |grad v|^2
    + beta2/2 int |v|^2`` over P1 fields ``v``; integrals of products of P1
    functions are exact (element mass matrices).
    """
    n = mesh.n_nodes
    tri = mesh.triangles
    Mm, Ss, local_m = _mass_and_stiffness(mesh)
    g = element_gradients(mesh, x_prev)  # (m, 2)
    dx = np.asarray(x_curr, dtype=float) - np.asarray(x_prev, dtype=float)
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    blocks = []
    rhs = np.zeros(2 * n)
    for c in range(2):
        row_blocks = []
        for d in range(2):
            vals = (g[:, c] * g[:, d])[:, None, None] * local_m
            B = sparse.csr_matrix((vals.ravel(), (rows, cols)), shape=(n, n))
            if c == d:
                B = B + beta1 * Ss + beta2 * Mm
            row_blocks.append(B)
        blocks.append(row_blocks)
        local_rhs = g[:, c, None] * np.einsum("mab,mb->ma", local_m, dx[tri])
        np.add.at(rhs, c * n + tri.ravel(), local_rhs.ravel())
    A = sparse.bmat(blocks, format="csc")
    return A, rhs


def estimate_flow(x_curr, x_prev, beta1: float = 1e-3, beta2: float = 1e-5, mesh: Mesh | None = None, frame: int = 0) -> FlowField:
    """Displacement ``v`` with ``x_curr(xi) ~ x_prev(xi + v(xi))``.

    Note the sign: for content moving by ``d`` between the two fields the
    estimate approximates ``-d``, which is what :func:`warp_primal` needs
    to carry the motion one frame further.
    """
    if mesh is None:
        raise ParameterError("estimate_flow needs the mesh")
    if not (beta1 > 0 and beta2 > 0):
        raise ParameterError("beta1 and beta2 must be positive")
    A, rhs = flow_system(x_curr, x_prev, beta1, beta2, mesh)
    n = mesh.n_nodes
    if not np.any(rhs):
        return FlowField.zeros(n, frame)
    try:
        v = splu(A).solve(rhs)
    except RuntimeError as exc:
        raise NumericError(f"flow system is singular: {exc}", frame=frame) from exc
    return FlowField(np.column_stack([v[:n], v[n:]]), frame)


def motion_from_flow(flow: FlowField) -> np.ndarray:
    """Physical displacement of content between the two frames (``-h``)."""
    return -flow.h


def warp_primal(x, h, mesh: Mesh, x_min: float = X_MIN, x_max: float = X_MAX) -> np.ndarray:
    """``x_pred(xi_i) = x(xi_i + h(xi_i))``; displaced points outside keep ``x_i``."""
    x = np.asarray(x, dtype=float)
    hv = h.h if isinstance(h, FlowField) else np.asarray(h, dtype=float)
    if not np.any(hv):
        return x.copy()
    out = interpolate(mesh, x, mesh.nodes + hv, fallback=x)
    return np.clip(out, x_min, x_max)


def dual_identity(y):
    return y


def dual_greedy(y, grad_x_old, grad_x_pred, alpha: float = ALPHA, tol: float = GREEDY_TOL):
    """Keep the element-wise pairing ``<grad x, y>`` with the transported gradient.

    The new dual is the minimum-norm vector parallel to ``grad x_pred``
    with the old inner product, projected onto the ``alpha``-ball.
    """
    y = np.asarray(y, dtype=float)
    g_old = np.asarray(grad_x_old, dtype=float)
    g_new = np.asarray(grad_x_pred, dtype=float)
    nrm2 = np.einsum("md,md->m", g_new, g_new)
    ok = np.sqrt(nrm2) > tol
    out = y.copy()
    coef = np.einsum("md,md->m", g_old[ok], y[ok]) / nrm2[ok]
    out[ok] = coef[:, None] * g_new[ok]
    return prox_Gstar(out, alpha)


def affine_gain(h, mesh: Mesh, gain: float = 10.0, threshold: float = 1e-12) -> np.ndarray:
    """Per-element ``c_e = gain * max(0, 1 - threshold / |h|_e)^2``.

    ``|h|_e`` is the mean nodal displacement norm over the element's
    vertices; ``c_e = 0`` where it vanishes.
    """
    hv = h.h if isinstance(h, FlowField) else np.asarray(h, dtype=float)
    mag = np.linalg.norm(hv, axis=1)[mesh.triangles].mean(axis=1)
    c = np.zeros_like(mag)
    pos = mag > 0
    c[pos] = gain * np.maximum(0.0, 1.0 - threshold / mag[pos]) ** 2
    return c


def dual_affine(y, grad_x_pred, h, alpha: float = ALPHA, mesh: Mesh | None = None, gain: float = 10.0, threshold: float = 1e-12):
    """``y + c grad x_pred`` per element, projected onto the ``alpha``-ball."""
    if mesh is None:
        raise ParameterError("dual_affine needs the mesh to average |h| per element")
    c = affine_gain(h, mesh, gain, threshold)
    return prox_Gstar(np.asarray(y, dtype=float) + c[:, None] * np.asarray(grad_x_pred, dtype=float), alpha)


class Predictor:
    """Callable ``OnlineState -> Prediction`` dispatching on the configured kind.

    The flow is re-estimated from ``(state.x, state.x_prev)`` when
    ``state.k`` is a multiple of the cadence and reused otherwise.
    """

    def __init__(self, mesh: Mesh, config: PredictorConfig | None = None, alpha: float = ALPHA,
                 x_min: float = X_MIN, x_max: float = X_MAX):
        self.mesh = mesh
        self.config = config or PredictorConfig()
        self.alpha = alpha
        self.x_min = x_min
        self.x_max = x_max

    @property
    def kind(self) -> PredictorKind:
        return self.config.kind

    def flow_for(self, state: OnlineState) -> FlowField | None:
        cfg = self.config
        if state.k % cfg.cadence == 0 and state.x_prev is not None:
            return estimate_flow(state.x, state.x_prev, cfg.beta1, cfg.beta2, self.mesh, frame=state.k)
        return state.flow

    def __call__(self, state: OnlineState) -> Prediction:
        kind = self.config.kind
        if kind is PredictorKind.NO_PREDICTION:
            return Prediction(state.x, state.y, state.flow)
        flow = self.flow_for(state)
        if flow is None:
            flow = FlowField.zeros(self.mesh.n_nodes, state.k)
        x_pred = warp_primal(state.x, flow, self.mesh, self.x_min, self.x_max)
        if kind is PredictorKind.PRIMAL_ONLY:
            y_pred = dual_identity(state.y)
        elif kind is PredictorKind.GREEDY:
            y_pred = dual_greedy(
                state.y, element_gradients(self.mesh, state.x), element_gradients(self.mesh, x_pred), self.alpha
            )
        else:
            cfg = self.config
            grad = apply_K if cfg.affine_gradient == "weighted" else element_gradients
            y_pred = dual_affine(
                state.y, grad(self.mesh, x_pred), flow, self.alpha, self.mesh,
                cfg.affine_gain, cfg.affine_threshold,
            )
        return Prediction(x_pred, y_pred, flow)


def predict(state: OnlineState, config: PredictorConfig, mesh: Mesh, alpha: float = ALPHA):
    """Functional form of :class:`Predictor`: returns ``(x_pred, y_pred)``."""
    p = Predictor(mesh, config, alpha)(state)
    return p.x, p.y


def write_flow_csv(flow: FlowField, path) -> None:
    tmp = f"{path}.tmp"
    np.savetxt(tmp, flow.h, delimiter=",", header="hx,hy", comments="", fmt="%.17g")
    os.replace(tmp, path)
