"""Predictive online primal-dual proximal splitting for nonconvex data terms.

One frame of the method performs::

    (x_pred, y_pred) = P(x, y)
    x+ = clip(x_pred - tau * grad E(x_pred) - tau * K^T y_pred)
    y+ = proj_alpha(y_pred + sigma * K (2 x+ - x_pred))

The remaining functions evaluate the quantities that enter the regret
analysis of the method: the step-length condition, the primal-dual metric
``M = [[Id/tau, -K^T], [-K, Id/sigma]]``, the prediction error and the
Lagrangian duality gap.  The unaccelerated parameterization is used
throughout (``phi = 1``, ``eta = tau``, ``psi = tau / sigma``).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol

import numpy as np
from scipy import linalg, sparse

from .cem_derivative import Jacobian, jacobian
from .cem_forward import PRECISION_SCALE, X_MAX, X_MIN, MeasurementFrame, forward_map
from .errors import NumericError, ParameterError, ValidationError
from .mesh import Mesh
from .tv_reg import ALPHA, gradient_operator, prox_F, prox_Gstar

logger = logging.getLogger(__name__)

TAU_FACTOR = 0.85
KAPPA = 0.15


@dataclass(frozen=True)
class StepParams:
    """Step lengths and testing parameters of one frame.

    ``ek_loss`` is the smoothness loss factor of ``E`` (the ``Omega`` block);
    ``lambda_tilde`` is its growth factor entering ``Gamma``.
    """

    tau: float
    sigma: float = 1.0
    kappa: float = KAPPA
    alpha: float = ALPHA
    gamma: float = 0.0
    rho: float = 0.0
    lambda_tilde: float = 0.0
    ek_loss: float = 0.0
    x_min: float = X_MIN
    x_max: float = X_MAX

    def __post_init__(self):
        # zero step lengths are allowed so that degenerate settings can be checked
        if not (self.tau >= 0 and self.sigma >= 0):
            raise ParameterError(f"step lengths must be nonnegative, got tau={self.tau}, sigma={self.sigma}")
        if not 0 < self.kappa < 1:
            raise ParameterError(f"kappa must lie in (0, 1), got {self.kappa}")
        if self.alpha <= 0:
            raise ParameterError("alpha must be positive")
        if min(self.gamma, self.rho, self.lambda_tilde, self.ek_loss) < 0:
            raise ParameterError("gamma, rho, lambda_tilde and ek_loss must be nonnegative")

    @property
    def phi(self) -> float:
        return 1.0

    @property
    def eta(self) -> float:
        return self.tau

    @property
    def psi(self) -> float:
        return self.tau / self.sigma if self.sigma > 0 else np.inf

    def with_tau(self, tau: float) -> "StepParams":
        return replace(self, tau=float(tau))


class Coupling:
    """Linear operator ``K`` with block-structured dual variable.

    The dual variable has shape ``(K.shape[0] // block, block)``; the dual
    prox projects each row onto the ``alpha``-ball.
    """

    def __init__(self, K, block: int = 2):
        self.K = sparse.csr_matrix(K)
        if self.K.shape[0] % block:
            raise ValidationError(f"K has {self.K.shape[0]} rows, not divisible by block {block}")
        self.block = block

    @classmethod
    def from_mesh(cls, mesh: Mesh) -> "Coupling":
        return cls(gradient_operator(mesh), block=2)

    @property
    def n_primal(self) -> int:
        return self.K.shape[1]

    @property
    def dual_shape(self) -> tuple[int, int]:
        return (self.K.shape[0] // self.block, self.block)

    def apply(self, x) -> np.ndarray:
        return (self.K @ x).reshape(self.dual_shape)

    def adjoint(self, y) -> np.ndarray:
        return self.K.T @ np.asarray(y).ravel()

    def zeros_dual(self) -> np.ndarray:
        return np.zeros(self.dual_shape)


# ---------------------------------------------------------------------------
# gradient providers


@dataclass(frozen=True)
class GradientEval:
    """Gradient served to the primal step; ``tau`` is set when a new linearization is adopted."""

    grad: np.ndarray
    tau: float | None = None
    lag: float = 0.0
    excluded_ms: float = 0.0


class GradientProvider(Protocol):
    def evaluate(self, x: np.ndarray, b: np.ndarray, k: int) -> GradientEval: ...


def compute_tau(J, factor: float = TAU_FACTOR) -> float:
    """``factor / ||J J^T||`` with the spectral norm of the small Gram matrix.

    Raises :class:`ValidationError` for a zero Jacobian.
    """
    mat = J.matrix if isinstance(J, Jacobian) else np.asarray(J, dtype=float)
    nrm = gram_norm(mat)
    if not nrm > 0:
        raise ValidationError("degenerate (zero) Jacobian")
    return factor / nrm


def gram_norm(mat) -> float:
    """Spectral norm of ``J J^T`` (equivalently ``||J||^2``)."""
    mat = np.asarray(mat, dtype=float)
    G = mat @ mat.T if mat.shape[0] <= mat.shape[1] else mat.T @ mat
    top = linalg.eigvalsh(G, subset_by_index=[G.shape[0] - 1, G.shape[0] - 1])
    return float(max(top[0], 0.0))


class ExactGradient:
    """``J(x)^T (S(x) - b)`` with a fresh forward solve and Jacobian per call.

    With ``adaptive_tau`` the step length is re-derived from each Jacobian.
    """

    def __init__(self, mesh: Mesh, scale: float = PRECISION_SCALE, adaptive_tau: bool = True):
        self.mesh = mesh
        self.scale = scale
        self.adaptive_tau = adaptive_tau

    def evaluate(self, x, b, k):
        J = jacobian(self.mesh, x, scale=self.scale)
        r = forward_map(self.mesh, x, scale=self.scale).values - _data(b)
        tau = compute_tau(J) if self.adaptive_tau else None
        return GradientEval(grad=J.matrix.T @ r, tau=tau)


class LinearGradient:
    """Exact gradient of ``E(x) = 0.5 ||A x + c - b||^2`` (a convex test instance)."""

    def __init__(self, A, c=None):
        self.A = np.asarray(A, dtype=float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)

    def forward(self, x):
        return self.A @ x + self.c

    def value(self, x, b):
        r = self.forward(x) - _data(b)
        return 0.5 * float(r @ r)

    def evaluate(self, x, b, k):
        return GradientEval(grad=self.A.T @ (self.forward(x) - _data(b)))


def _data(b):
    return b.values if isinstance(b, MeasurementFrame) else np.asarray(b, dtype=float)


# ---------------------------------------------------------------------------
# state and step


@dataclass(frozen=True)
class OnlineState:
    """Iterate ``u^k = (x^k, y^k)`` plus what the predictors carry between frames."""

    k: int
    x: np.ndarray
    y: np.ndarray
    tau: float
    x_prev: np.ndarray | None = None
    flow: object = None
    x_pred: np.ndarray | None = None
    y_pred: np.ndarray | None = None
    step_ms: float = 0.0
    lag: float = 0.0


@dataclass(frozen=True)
class Prediction:
    x: np.ndarray
    y: np.ndarray
    flow: object = None


def identity_predictor(state: OnlineState) -> Prediction:
    return Prediction(state.x, state.y, state.flow)


def initial_state(x0, y0, tau: float) -> OnlineState:
    return OnlineState(k=0, x=np.array(x0, dtype=float), y=np.array(y0, dtype=float), tau=float(tau))


def popdn_step(
    state: OnlineState,
    frame,
    predictor: Callable[[OnlineState], Prediction],
    grad_provider: GradientProvider,
    coupling: Coupling,
    params: StepParams,
) -> OnlineState:
    """Advance ``u^k`` to ``u^{k+1}`` using the data of frame ``k + 1``.

    ``params.tau`` is ignored in favour of ``state.tau`` (which tracks the
    provider's step length); the other fields of ``params`` apply as given.
    Raises :class:`NumericError` (carrying the last good state as
    ``err.state``) if the new iterate is not finite.
    """
    if not (params.sigma > 0 and state.tau > 0):
        raise ParameterError("popdn_step needs positive step lengths")
    t0 = time.perf_counter()
    k_next = state.k + 1
    pred = predictor(state)
    ev = grad_provider.evaluate(pred.x, _data(frame), k_next)
    tau = state.tau if ev.tau is None else ev.tau
    sigma = params.sigma
    x_new = prox_F(pred.x - tau * ev.grad - tau * coupling.adjoint(pred.y), params.x_min, params.x_max)
    y_new = prox_Gstar(pred.y + sigma * coupling.apply(2.0 * x_new - pred.x), params.alpha)
    if not (np.all(np.isfinite(x_new)) and np.all(np.isfinite(y_new))):
        err = NumericError("non-finite iterate", frame=k_next)
        err.state = state
        raise err
    elapsed = 1e3 * (time.perf_counter() - t0) - ev.excluded_ms
    return OnlineState(
        k=k_next,
        x=x_new,
        y=y_new,
        tau=tau,
        x_prev=state.x,
        flow=pred.flow,
        x_pred=pred.x,
        y_pred=pred.y,
        step_ms=elapsed,
        lag=ev.lag,
    )


# ---------------------------------------------------------------------------
# step-length condition


@dataclass(frozen=True)
class StepCheck:
    """Outcome of :func:`check_step_condition`.

    ``slack`` is ``1 - L tau - tau sigma ||K||^2``; the local form needs
    ``L tau <= 1 - kappa`` and ``tau sigma ||K||^2 < kappa``.
    """

    passed: bool
    slack: float
    global_ok: bool
    local_ok: bool
    smooth_term: float
    coupling_term: float


def check_step_condition(params: StepParams, L_bound: float, K_norm: float, rtol: float = 1e-12) -> StepCheck:
    """Metric positivity of the step lengths.

    ``L_bound`` is the effective smoothness constant multiplying ``tau``
    (the largest of the loss factors of ``E``).  A step length with
    ``tau = 0.85 / L_bound`` sits exactly on the local bound, so that
    comparison carries a relative tolerance ``rtol``.
    """
    if L_bound < 0 or K_norm < 0:
        raise ParameterError("L_bound and K_norm must be nonnegative")
    smooth = L_bound * params.tau
    coup = params.tau * params.sigma * K_norm**2
    slack = 1.0 - smooth - coup
    global_ok = slack > 0
    local_ok = smooth <= (1.0 - params.kappa) * (1 + rtol) and coup < params.kappa
    return StepCheck(global_ok and local_ok, slack, global_ok, local_ok, smooth, coup)


# ---------------------------------------------------------------------------
# metric quantities


def metric_sq(dx, dy, coupling: Coupling, tau: float, sigma: float) -> float:
    """``||(dx, dy)||_M^2 = ||dx||^2/tau - 2 <K dx, dy> + ||dy||^2/sigma``."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float).ravel()
    return float(dx @ dx / tau - 2.0 * (coupling.K @ dx) @ dy + dy @ dy / sigma)


def weighted_sq(dx, dy, coupling, params: StepParams, gamma_part: bool = False, omega_part: bool = False) -> float:
    """``||(dx, dy)||^2`` in ``eta (M [+ Gamma] [- Omega])``."""
    dx = np.asarray(dx, dtype=float)
    dy = np.asarray(dy, dtype=float).ravel()
    val = metric_sq(dx, dy, coupling, params.tau, params.sigma)
    if gamma_part:
        val += (params.gamma + params.lambda_tilde) * (dx @ dx) + params.rho * (dy @ dy)
    if omega_part:
        val -= params.ek_loss * (dx @ dx)
    return params.eta * float(val)


def prediction_error(u_prev, u_pred, ubar_prev, ubar_next, coupling: Coupling, params: StepParams, params_next=None) -> float:
    """``0.5 ||u_pred - ubar_next||^2_{eta M} - 0.5 ||u_prev - ubar_prev||^2_{eta (M + Gamma)}``.

    Each ``u`` is a pair ``(x, y)``; ``params_next`` defaults to ``params``.
    """
    params_next = params if params_next is None else params_next
    for a, b in ((u_pred, ubar_next), (u_prev, ubar_prev)):
        if np.shape(a[0]) != np.shape(b[0]) or np.size(a[1]) != np.size(b[1]):
            raise ValidationError("primal/dual shapes do not match")
    ahead = weighted_sq(u_pred[0] - ubar_next[0], np.ravel(u_pred[1]) - np.ravel(ubar_next[1]), coupling, params_next)
    behind = weighted_sq(
        u_prev[0] - ubar_prev[0], np.ravel(u_prev[1]) - np.ravel(ubar_prev[1]), coupling, params, gamma_part=True
    )
    return 0.5 * ahead - 0.5 * behind


def lagrangian_gap(u, ubar, E: Callable[[np.ndarray], float], coupling: Coupling, params: StepParams, tol: float = 1e-12) -> float:
    """Lagrangian duality gap of ``u = (x, y)`` against ``ubar = (xbar, ybar)``.

    ``([F+E](x) + <K x, ybar> - G*(ybar)) - ([F+E](xbar) + <K^T y, xbar> - G*(y))``
    with ``F`` the box indicator and ``G*`` the indicator of the ``alpha``
    ball; returns ``inf`` when ``x`` or ``ybar`` violates its indicator.
    """
    x, y = np.asarray(u[0], dtype=float), np.asarray(u[1], dtype=float)
    xb, yb = np.asarray(ubar[0], dtype=float), np.asarray(ubar[1], dtype=float)

    def box_ok(z):
        return np.all(z >= params.x_min * (1 - tol)) and np.all(z <= params.x_max * (1 + tol))

    def ball_ok(w):
        return np.all(np.linalg.norm(w.reshape(coupling.dual_shape), axis=1) <= params.alpha + tol)

    if not box_ok(x) or not ball_ok(yb):
        return np.inf
    if not box_ok(xb) or not ball_ok(y):
        return -np.inf
    first = E(x) + float(coupling.apply(x).ravel() @ yb.ravel())
    second = E(xb) + float(coupling.adjoint(y) @ xb)
    return first - second


@dataclass
class GapRecord:
    """Per-frame terms of the cumulative gap bound."""

    k: int
    eta: float
    gap: float
    step_term: float
    eps_dagger: float


@dataclass
class GapBoundResult:
    passed: bool
    lhs: float
    rhs: float
    violating_frame: int | None = None
    partial_lhs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    partial_rhs: np.ndarray = field(default_factory=lambda: np.zeros(0))


def gap_record(k, u, u_pred, u_prev, ubar, ubar_prev, E, coupling, params, params_prev=None) -> GapRecord:
    """Evaluate the gap, ``0.5 ||u - u_pred||^2_{eta (M - Omega)}`` and ``eps_dagger`` for frame ``k``."""
    params_prev = params if params_prev is None else params_prev
    gap = lagrangian_gap(u, ubar, E, coupling, params)
    step = 0.5 * weighted_sq(u[0] - u_pred[0], np.ravel(u[1]) - np.ravel(u_pred[1]), coupling, params, omega_part=True)
    eps = prediction_error(u_prev, u_pred, ubar_prev, ubar, coupling, params_prev, params)
    return GapRecord(k=k, eta=params.eta, gap=gap, step_term=step, eps_dagger=eps)


def verify_gap_bound(
    records, u0, ubar0, coupling: Coupling, params0: StepParams, tol: float = 1e-8, eta_weighted: bool = True
) -> GapBoundResult:
    """Check ``sum_k [w_k G_k + step_k] <= 0.5 ||u0 - ubar0||^2_{eta (M + Gamma)} + sum_k eps_k``.

    The bound is checked for every partial sum.  With ``eta_weighted`` the
    gap of frame ``k`` is weighted by ``eta_k`` (``w_k = eta_k``), which is
    the form that the telescoping argument produces; otherwise ``w_k = 1``.
    The two coincide when ``tau = 1``.
    """
    init = 0.5 * weighted_sq(u0[0] - ubar0[0], np.ravel(u0[1]) - np.ravel(ubar0[1]), coupling, params0, gamma_part=True)
    w = np.array([r.eta if eta_weighted else 1.0 for r in records])
    lhs = np.cumsum(w * np.array([r.gap for r in records]) + np.array([r.step_term for r in records]))
    rhs = init + np.cumsum([r.eps_dagger for r in records])
    bad = np.nonzero(lhs > rhs + tol)[0]
    violating = int(records[bad[0]].k) if len(bad) else None
    if violating is not None:
        logger.warning("gap bound violated at frame %d: %.6e > %.6e", violating, lhs[bad[0]], rhs[bad[0]])
    return GapBoundResult(
        passed=violating is None,
        lhs=float(lhs[-1]) if len(lhs) else 0.0,
        rhs=float(rhs[-1]) if len(rhs) else init,
        violating_frame=violating,
        partial_lhs=lhs,
        partial_rhs=rhs,
    )
