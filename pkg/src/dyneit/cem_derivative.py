"""First and second derivatives of the CEM forward map.

Differentiating ``A(x) u = f`` in direction ``h`` gives ``A(x) u' = -D(h) u``
with ``D(h)`` the stiffness matrix of coefficient ``h``; currents follow
linearly, ``I'_i = c_i . u' / zeta_i``.  The full Jacobian is assembled
with one adjoint solve per electrode instead of one solve per node.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from .cem_forward import (
    PRECISION_SCALE,
    CemSolution,
    ExcitationPattern,
    cem_model,
    measurement_mask,
    pattern_matrix,
)
from .errors import DependencyError, ValidationError
from .mesh import Mesh

logger = logging.getLogger(__name__)

JACOBIAN_MAGIC = b"DEITJAC1"


@dataclass(frozen=True)
class Jacobian:
    """Dense Jacobian of the scaled forward map, rows in measurement order."""

    matrix: np.ndarray
    x_lin: np.ndarray | None = None
    scale: float = PRECISION_SCALE

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, h):
        return self.matrix @ h


def _potentials(pattern):
    if isinstance(pattern, ExcitationPattern):
        return pattern.U[None, :]
    return np.atleast_2d(np.asarray(pattern, dtype=float))


def _squeeze(sol, single):
    if single:
        return CemSolution(u=sol.u[:, 0], I=sol.I[:, 0])
    return sol


def linearized_solution(model, x, u_base, h) -> CemSolution:
    """Directional derivative given base potentials ``u_base`` of shape ``(n, N2)``."""
    if u_base is None:
        raise DependencyError("base potential required before differentiating")
    u_base = np.asarray(u_base, dtype=float).reshape(model.n, -1)
    du = model.solve_rhs(x, -(model.stiffness(h) @ u_base))
    dI = (model.electrode_weights @ du) / model.zeta[:, None]
    return CemSolution(u=du, I=dI)


def directional_derivative(mesh: Mesh, x, pattern, h, base: CemSolution | None = None) -> CemSolution:
    """Derivative ``(u', I')`` of the CEM solution in direction ``h``."""
    model = cem_model(mesh)
    U = _potentials(pattern)
    if base is None:
        base = model.solve(x, U)
    sol = linearized_solution(model, x, base.u, h)
    return _squeeze(sol, np.ndim(base.u) == 1 or U.shape[0] == 1)


def second_directional(mesh: Mesh, x, pattern, h1, h2) -> CemSolution:
    """Second derivative ``(u'', I'')`` in directions ``(h1, h2)``.

    Solves ``A u'' = -(D(h1) u'_{h2} + D(h2) u'_{h1})``; symmetric in
    ``h1``, ``h2``.
    """
    model = cem_model(mesh)
    U = _potentials(pattern)
    base = model.solve(x, U)
    d1 = linearized_solution(model, x, base.u, h1).u
    d2 = linearized_solution(model, x, base.u, h2).u
    rhs = -(model.stiffness(h1) @ d2 + model.stiffness(h2) @ d1)
    ddu = model.solve_rhs(x, rhs)
    ddI = (model.electrode_weights @ ddu) / model.zeta[:, None]
    return _squeeze(CemSolution(u=ddu, I=ddI), U.shape[0] == 1)


def _element_gradients(mesh, fields):
    """Constant per-element gradients of nodal fields ``(n, k)`` -> ``(m, 2, k)``."""
    grads = mesh.geometry.grads
    return np.einsum("mad,mak->mdk", grads, fields[mesh.triangles])


def jacobian(mesh: Mesh, x, patterns=None, scale: float = PRECISION_SCALE) -> Jacobian:
    """Jacobian of :func:`~dyneit.cem_forward.forward_map` at ``x``.

    Entry ``(j, i), n`` equals ``-scale * sum_{e ∋ n} |e|/3 grad z_i . grad u_j``
    where ``u_j`` solves pattern ``j`` and ``z_i`` is the adjoint field of
    electrode ``i``.
    """
    model = cem_model(mesh)
    U, excited = pattern_matrix(patterns, mesh.n_electrodes)
    u = model.solve(x, U).u
    z = model.adjoint_fields(x)
    gu = _element_gradients(mesh, u)
    gz = _element_gradients(mesh, z)
    mask = measurement_mask(excited, mesh.n_electrodes)
    dots = np.einsum("mdj,mdi->mji", gu, gz)[:, mask]
    J = -scale * (model.elem_to_node @ dots).T
    return Jacobian(matrix=np.ascontiguousarray(J), x_lin=np.array(x, dtype=float), scale=scale)


def jacobian_fd(mesh: Mesh, x, patterns=None, scale: float = PRECISION_SCALE) -> np.ndarray:
    """Jacobian column by column from linearized solves (slow; for checks)."""
    model = cem_model(mesh)
    U, excited = pattern_matrix(patterns, mesh.n_electrodes)
    base = model.solve(x, U)
    mask = measurement_mask(excited, mesh.n_electrodes)
    cols = []
    for n in range(mesh.n_nodes):
        h = np.zeros(mesh.n_nodes)
        h[n] = 1.0
        dI = linearized_solution(model, x, base.u, h).I
        cols.append(scale * dI.T[mask])
    return np.array(cols).T


def grad_E(J, residual) -> np.ndarray:
    """Gradient ``J^T r`` of ``0.5 ||S(x) - b||^2`` given ``r = S(x) - b``."""
    mat = J.matrix if isinstance(J, Jacobian) else np.asarray(J)
    return mat.T @ residual


# --------------------------------------------------------------------------
# binary dump: magic, int32 rows, int32 cols (little endian), float64 row-major


def save_jacobian(J, path) -> None:
    mat = np.ascontiguousarray(J.matrix if isinstance(J, Jacobian) else J, dtype="<f8")
    if mat.ndim != 2:
        raise ValidationError("Jacobian must be two-dimensional")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(JACOBIAN_MAGIC)
        fh.write(struct.pack("<ii", *mat.shape))
        fh.write(mat.tobytes())
    os.replace(tmp, path)


def load_jacobian(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != JACOBIAN_MAGIC:
            raise ValidationError(f"{path}: not a Jacobian dump")
        header = fh.read(8)
        if len(header) != 8:
            raise ValidationError(f"{path}: truncated header")
        rows, cols = struct.unpack("<ii", header)
        data = fh.read()
    if len(data) != rows * cols * 8:
        raise ValidationError(f"{path}: expected {rows * cols} values, found {len(data) // 8}")
    return np.frombuffer(data, dtype="<f8").reshape(rows, cols).copy()
