"""Empirical checks of the smoothness properties the convergence theory relies on.

None of the constants involved are computable in closed form for EIT, so
they are estimated by sampling: operator norms of the first and second
derivative of the forward map, and violations of the three-point
smoothness inequality

    <grad E(z), x - xbar> >= E(x) - E(xbar) + (lambda/2)||x - xbar||^2 - D ||x - z||^2

for points sampled in a ball around ``xbar``.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from .cem_derivative import jacobian, linearized_solution
from .cem_forward import (
    PRECISION_SCALE,
    X_MAX,
    X_MIN,
    cem_model,
    forward_map,
    measurement_mask,
    pattern_matrix,
)
from .errors import ParameterError, PreconditionError, ValidationError
from .mesh import Mesh
from .popdn_core import gram_norm

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmoothnessEstimate:
    s1_max: float
    s2_max: float
    n_samples: int
    center: np.ndarray
    delta: float


class EitDerivatives:
    """First and second directional derivatives of the scaled forward map."""

    def __init__(self, mesh: Mesh, patterns=None, scale: float = PRECISION_SCALE):
        self.mesh = mesh
        self.scale = scale
        self.U, excited = pattern_matrix(patterns, mesh.n_electrodes)
        self.mask = measurement_mask(excited, mesh.n_electrodes)
        self.model = cem_model(mesh)

    def _extract(self, I):
        return self.scale * I.T[self.mask]

    def first(self, x, h):
        base = self.model.solve(x, self.U)
        return self._extract(linearized_solution(self.model, x, base.u, h).I)

    def second(self, x, h1, h2):
        model = self.model
        base = model.solve(x, self.U)
        d1 = linearized_solution(model, x, base.u, h1).u
        d2 = linearized_solution(model, x, base.u, h2).u
        ddu = model.solve_rhs(x, -(model.stiffness(h1) @ d2 + model.stiffness(h2) @ d1))
        return self._extract((model.electrode_weights @ ddu) / model.zeta[:, None])


class LinearDerivatives:
    """Derivatives of ``S(x) = A x``: constant first, zero second."""

    def __init__(self, A):
        self.A = np.asarray(A, dtype=float)

    def first(self, x, h):
        return self.A @ h

    def second(self, x, h1, h2):
        return np.zeros(self.A.shape[0])


def _sample_ball_inf(rng, center, delta):
    return center + delta * rng.uniform(-1.0, 1.0, size=center.shape)


def estimate_smoothness(mesh: Mesh | None, x_center, delta: float, n_samples: int, rng: np.random.Generator,
                        derivatives=None, directions=None, x_min: float = X_MIN, x_max: float = X_MAX,
                        norm=np.inf) -> SmoothnessEstimate:
    """Running maxima of ``||S'(x) h|| / ||h||`` and ``||S''(x)(h1, h2)|| / (||h1|| ||h2||)``.

    Points ``x`` are drawn uniformly from the sup-norm ball of radius
    ``delta`` around ``x_center``; directions are standard normal, or drawn
    from the rows of ``directions`` when given.  Direction norms use
    ``norm`` (sup-norm by default, matching the remainder estimates).
    Samples are drawn sequentially, so more samples never lower the result
    for a fixed seed.
    """
    x_center = np.asarray(x_center, dtype=float)
    if np.any(x_center - delta < x_min) or np.any(x_center + delta > x_max):
        raise PreconditionError("sampling ball leaves the admissible conductivity box")
    if derivatives is None:
        if mesh is None:
            raise ValidationError("either a mesh or a derivative model is required")
        derivatives = EitDerivatives(mesh)
    if directions is not None:
        directions = np.atleast_2d(np.asarray(directions, dtype=float))

    def draw():
        if directions is None:
            return rng.standard_normal(x_center.shape)
        return directions[rng.integers(len(directions))]

    s1 = s2 = 0.0
    for _ in range(n_samples):
        x = _sample_ball_inf(rng, x_center, delta)
        h1, h2 = draw(), draw()
        n1, n2 = np.linalg.norm(h1, norm), np.linalg.norm(h2, norm)
        if n1 == 0 or n2 == 0:
            continue
        s1 = max(s1, np.linalg.norm(derivatives.first(x, h1)) / n1)
        s2 = max(s2, np.linalg.norm(derivatives.second(x, h1, h2)) / (n1 * n2))
    return SmoothnessEstimate(float(s1), float(s2), int(n_samples), x_center, float(delta))


@dataclass(frozen=True)
class ThreePointReport:
    n_samples: int
    violations: int
    worst_margin: float
    mono_samples: int = 0
    mono_violations: int = 0
    mono_worst_margin: float = np.inf

    def to_dict(self):
        return asdict(self)


class QuadraticE:
    """``E(x) = 0.5 ||A x - b||^2`` with exact gradient."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def value(self, x):
        r = self.A @ x - self.b
        return 0.5 * float(r @ r)

    def grad(self, x):
        return self.A.T @ (self.A @ x - self.b)


class EitE:
    """``E(x) = 0.5 ||S(x) - b||^2`` on the EIT forward map."""

    def __init__(self, mesh: Mesh, b, scale: float = PRECISION_SCALE):
        self._fwd = lambda x: forward_map(mesh, x, scale=scale).values
        self._jac = lambda x: jacobian(mesh, x, scale=scale).matrix
        self.b = np.asarray(getattr(b, "values", b), dtype=float)

    def value(self, x):
        r = self._fwd(x) - self.b
        return 0.5 * float(r @ r)

    def grad(self, x):
        return self._jac(x).T @ (self._fwd(x) - self.b)


def _sample_ball_2(rng, center, delta):
    d = rng.standard_normal(center.shape)
    d *= delta * rng.uniform() ** (1.0 / d.size) / np.linalg.norm(d)
    return center + d


def check_three_point(E_provider, x_bar, delta: float, lambda_tilde: float, D: float, n_samples: int,
                      rng: np.random.Generator, critical_point=None, lambda_hat: float | None = None,
                      x_min: float | None = None, rtol: float = 1e-10) -> ThreePointReport:
    """Sample ``(x, z)`` in the Euclidean ball ``B(x_bar, delta)`` and test the inequality.

    The margin is ``lhs - rhs``; a sample violates when the margin is below
    ``-rtol`` times the magnitude of the terms involved.  With a
    ``critical_point`` the monotonicity-like form
    ``<grad E(z) - grad E(xhat), x - xhat> >= lambda_hat ||x - xhat||^2 - D ||x - z||^2``
    is checked around it as well (``lambda_hat`` defaults to ``0.75 lambda_tilde``).
    ``x_min`` clips samples from below (for conductivity problems).
    """
    x_bar = np.asarray(x_bar, dtype=float)
    E_bar = E_provider.value(x_bar)
    viol, worst = 0, np.inf

    def sample(center):
        p = _sample_ball_2(rng, center, delta)
        return p if x_min is None else np.maximum(p, x_min)

    for _ in range(n_samples):
        x, z = sample(x_bar), sample(x_bar)
        Ex = E_provider.value(x)
        lhs = float(E_provider.grad(z) @ (x - x_bar))
        rhs = Ex - E_bar + 0.5 * lambda_tilde * float((x - x_bar) @ (x - x_bar)) - D * float((x - z) @ (x - z))
        margin = lhs - rhs
        worst = min(worst, margin)
        if margin < -rtol * max(1.0, abs(lhs), abs(Ex), abs(E_bar)):
            viol += 1

    mono_n, mono_viol, mono_worst = 0, 0, np.inf
    if critical_point is not None:
        lam_hat = 0.75 * lambda_tilde if lambda_hat is None else lambda_hat
        xh = np.asarray(critical_point, dtype=float)
        g_hat = E_provider.grad(xh)
        for _ in range(n_samples):
            x, z = sample(xh), sample(xh)
            lhs = float((E_provider.grad(z) - g_hat) @ (x - xh))
            rhs = lam_hat * float((x - xh) @ (x - xh)) - D * float((x - z) @ (x - z))
            margin = lhs - rhs
            mono_worst = min(mono_worst, margin)
            mono_n += 1
            if margin < -rtol * max(1.0, abs(lhs)):
                mono_viol += 1
    return ThreePointReport(n_samples, viol, float(worst), mono_n, mono_viol, float(mono_worst))


def estimate_L_grad(J) -> float:
    """Half the spectral norm of ``J J^T``."""
    mat = getattr(J, "matrix", J)
    val = gram_norm(mat)
    if not val > 0 or not np.isfinite(val):
        raise ValidationError("degenerate Jacobian")
    return 0.5 * val


def ellipticity_report(J, c1: float, c2: float) -> dict:
    """Smallest eigenvalue of ``J^T J`` against the required lower bound (informational)."""
    mat = np.asarray(getattr(J, "matrix", J), dtype=float)
    lam_min = float(np.linalg.eigvalsh(mat.T @ mat)[0])
    return {"lambda_min": lam_min, "required": max(c1, c2), "satisfied": lam_min >= max(c1, c2)}


def write_report(report: dict, path) -> None:
    """Atomically write a JSON verification report."""
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(type(o).__name__)

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, default=default)
    os.replace(tmp, path)


__all__ = [
    "SmoothnessEstimate",
    "EitDerivatives",
    "LinearDerivatives",
    "estimate_smoothness",
    "ThreePointReport",
    "QuadraticE",
    "EitE",
    "check_three_point",
    "estimate_L_grad",
    "ellipticity_report",
    "write_report",
    "flow_recovery",
]


def flow_recovery(mesh: Mesh, shift, width: float = 0.3, amplitude: float = 1.0,
                  beta1: float = 1e-3, beta2: float = 1e-5) -> dict:
    """Estimate the motion of a Gaussian bump shifted by ``shift`` between two fields.

    Returns the mean recovered motion over nodes within ``width`` of the
    bump centre and its ratio to the true shift along the shift direction.
    """
    from .predictors import estimate_flow, motion_from_flow

    d = np.asarray(shift, dtype=float)
    dn = np.linalg.norm(d)
    if dn == 0:
        raise ParameterError("shift must be nonzero")

    def bump(c):
        return 1.0 + amplitude * np.exp(-np.sum((mesh.nodes - c) ** 2, axis=1) / width**2)

    x_prev, x_curr = bump(np.zeros(2)), bump(d)
    motion = motion_from_flow(estimate_flow(x_curr, x_prev, beta1, beta2, mesh))
    sel = np.linalg.norm(mesh.nodes - 0.5 * d, axis=1) < width
    mean = motion[sel].mean(axis=0)
    return {"mean_motion": mean, "ratio": float(mean @ d / dn**2), "n_nodes": int(sel.sum())}
