"""Potential-to-current complete electrode model (CEM) forward solver.

The electrode potentials ``U`` are prescribed and the electrode currents
``I`` are the measurements.  Testing the weak form with ``V = 0`` gives a
symmetric positive definite system for the interior potential ``u``::

    (S(x) + R) u = sum_i U_i / zeta_i * c_i

with ``S(x)`` the conductivity-weighted stiffness matrix, ``R`` the
electrode Robin term and ``c_i[n]`` the integral of hat function ``n``
over electrode ``i``.  Testing with ``v = 0`` then yields the currents
explicitly::

    I_i = (c_i . u - U_i |e_i|) / zeta_i
"""

from __future__ import annotations

import csv
import logging
import os
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .errors import PreconditionError, SolverError, ValidationError
from .mesh import Mesh

logger = logging.getLogger(__name__)

#: conductivity bounds used throughout the experiments (S/m)
X_MIN = 1e-5
X_MAX = 1e5
#: scalar data precision, standing for ``Sigma^{-1/2} = 200 Id``
PRECISION_SCALE = 200.0
SOLVER_RTOL = 1e-10


@dataclass(frozen=True)
class ConductivityField:
    """Nodal piecewise-linear conductivity with box bounds."""

    values: np.ndarray
    x_min: float = X_MIN
    x_max: float = X_MAX

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if not 0 < self.x_min < self.x_max:
            raise ValidationError(f"need 0 < x_min < x_max, got {self.x_min}, {self.x_max}")
        if np.any(v < self.x_min) or np.any(v > self.x_max):
            raise ValidationError("conductivity outside [x_min, x_max]")

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class ExcitationPattern:
    """Electrode potentials ``U`` (V); ``excited`` is the driven electrode."""

    U: np.ndarray
    excited: int

    def __post_init__(self):
        object.__setattr__(self, "U", np.asarray(self.U, dtype=float))


@dataclass(frozen=True)
class CemSolution:
    """Interior potential ``u`` (nodal) and electrode currents ``I``.

    For several patterns at once ``u`` is ``(n_nodes, N2)`` and ``I`` is
    ``(N1, N2)``.
    """

    u: np.ndarray
    I: np.ndarray


@dataclass(frozen=True)
class MeasurementFrame:
    """Scaled currents of one time frame, ordered pattern-major."""

    values: np.ndarray
    frame: int = 0
    scale: float = PRECISION_SCALE

    def __len__(self):
        return len(self.values)


def single_electrode_patterns(n_electrodes: int) -> list[ExcitationPattern]:
    """Drive electrode ``j`` at 1 V and ground the rest, for every ``j``."""
    eye = np.eye(n_electrodes)
    return [ExcitationPattern(eye[j], j) for j in range(n_electrodes)]


def pattern_matrix(patterns, n_electrodes=None):
    """Stack patterns into ``(N2, N1)`` potentials and excited indices."""
    if patterns is None:
        patterns = single_electrode_patterns(n_electrodes)
    if isinstance(patterns, ExcitationPattern):
        patterns = [patterns]
    U = np.array([p.U for p in patterns], dtype=float)
    excited = np.array([p.excited for p in patterns], dtype=np.int64)
    return U, excited


def measurement_mask(excited, n_electrodes):
    """Boolean ``(N2, N1)`` mask dropping the excited electrode of each pattern."""
    mask = np.ones((len(excited), n_electrodes), dtype=bool)
    mask[np.arange(len(excited)), excited] = False
    return mask


def _values(x):
    return x.values if isinstance(x, ConductivityField) else np.asarray(x, dtype=float)


class CemModel:
    """Assembly structures and factorization cache for one mesh.

    The sparsity pattern and the linear map from nodal conductivity to
    matrix entries are computed once; each new conductivity costs one
    sparse matrix-vector product plus a numeric factorization.
    """

    def __init__(self, mesh: Mesh, x_min: float = X_MIN, cache_size: int = 4):
        self.mesh = mesh
        self.x_min = x_min
        geo = mesh.geometry
        n, tri = mesh.n_nodes, mesh.triangles
        m = len(tri)
        self.n = n

        local = geo.areas[:, None, None] * np.einsum("mad,mbd->mab", geo.grads, geo.grads)
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        keys = rows * n + cols
        ukeys, slot = np.unique(keys, return_inverse=True)
        slot = slot.ravel()
        self.nnz = len(ukeys)
        urows = ukeys // n
        self.indices = (ukeys % n).astype(np.int32)
        self.indptr = np.searchsorted(urows, np.arange(n + 1)).astype(np.int32)
        self._ukeys = ukeys

        # entries of S(x) are linear in x: data = stiff_map @ x (mean of x per element)
        # ordering (element, entry, vertex)
        map_rows = np.repeat(slot.reshape(m, 9), 3, axis=1).ravel()
        map_cols = np.tile(tri, (1, 9)).ravel()
        vals = np.repeat(local.reshape(m, 9) / 3.0, 3, axis=1).ravel()
        self.stiff_map = sparse.csr_matrix((vals, (map_rows, map_cols)), shape=(self.nnz, n))

        # element -> node lumping with area/3 (used by derivative assembly)
        self.elem_to_node = sparse.csr_matrix(
            (np.repeat(geo.areas / 3.0, 3), (tri.ravel(), np.repeat(np.arange(m), 3))), shape=(n, m)
        )

        n_el = mesh.n_electrodes
        zeta = mesh.contact_impedances
        robin = np.zeros(self.nnz)
        c = np.zeros((n_el, n))
        for i, edges in enumerate(mesh.electrodes):
            a, b = edges[:, 0], edges[:, 1]
            length = np.linalg.norm(mesh.nodes[b] - mesh.nodes[a], axis=1)
            np.add.at(c[i], a, length / 2.0)
            np.add.at(c[i], b, length / 2.0)
            for p, q, w in ((a, a, 2.0), (b, b, 2.0), (a, b, 1.0), (b, a, 1.0)):
                s = np.searchsorted(ukeys, p * n + q)
                np.add.at(robin, s, w * length / 6.0 / zeta[i])
        self.robin_data = robin
        self.electrode_weights = c
        self.electrode_lengths = c.sum(axis=1)
        self.zeta = zeta
        self._cache: OrderedDict = OrderedDict()
        self._cache_size = cache_size
        # the background linearization worker shares this model with the online loop
        self._lock = threading.RLock()

    # -- assembly -----------------------------------------------------------
    def _csr(self, data):
        return sparse.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def stiffness(self, coeff) -> sparse.csr_matrix:
        """``int coeff grad phi_i . grad phi_j`` for any (signed) nodal coefficient."""
        return self._csr(self.stiff_map @ np.asarray(coeff, dtype=float))

    def system(self, x) -> sparse.csr_matrix:
        x = _values(x)
        if x.shape != (self.n,):
            raise ValidationError(f"conductivity has shape {x.shape}, expected ({self.n},)")
        if np.any(~(x >= self.x_min)):
            raise PreconditionError(f"conductivity below x_min={self.x_min:g} (min {np.min(x):g})")
        return self._csr(self.stiff_map @ x + self.robin_data)

    def rhs(self, U):
        """Right-hand sides for ``(N2, N1)`` electrode potentials, shape ``(n, N2)``."""
        U = np.atleast_2d(U)
        return self.electrode_weights.T @ (U / self.zeta).T

    def currents(self, u, U):
        """Electrode currents ``(N1, N2)`` from potentials ``(n, N2)``."""
        U = np.atleast_2d(U)
        return (self.electrode_weights @ u - (U * self.electrode_lengths).T) / self.zeta[:, None]

    # -- solves -------------------------------------------------------------
    def factor(self, x):
        with self._lock:
            return self._factor(_values(x))

    def _factor(self, x):
        key = x.tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        A = self.system(x)
        try:
            lu = splu(A.tocsc(), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverError(f"factorization failed: {exc}") from exc
        entry = (A, lu)
        self._cache[key] = entry
        if len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return entry

    def solve_rhs(self, x, f, rtol: float = SOLVER_RTOL):
        """Solve ``A(x) u = f`` for one or several right-hand sides."""
        f = np.asarray(f, dtype=float)
        with self._lock:
            A, lu = self.factor(x)
            u = lu.solve(f)
        fn = np.linalg.norm(f, axis=0)
        if np.all(fn == 0):
            return u
        res = np.linalg.norm(A @ u - f, axis=0) / np.where(fn > 0, fn, 1.0)
        if np.any(res > rtol):
            u = u + lu.solve(f - A @ u)
            res = np.linalg.norm(A @ u - f, axis=0) / np.where(fn > 0, fn, 1.0)
            if np.any(res > rtol):
                raise SolverError(f"relative residual {res.max():.3e} above {rtol:g}", residual=float(res.max()))
        return u

    def solve(self, x, U) -> CemSolution:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        u = self.solve_rhs(x, self.rhs(U))
        return CemSolution(u=u, I=self.currents(u, U))

    def adjoint_fields(self, x):
        """Solutions ``z_i = A(x)^{-1} c_i / zeta_i``, one column per electrode.

        ``I_i`` depends on the potential through ``c_i . u / zeta_i``, so
        ``z_i`` represents that measurement functional.
        """
        return self.solve_rhs(x, (self.electrode_weights / self.zeta[:, None]).T)


def cem_model(mesh: Mesh) -> CemModel:
    """The (cached) :class:`CemModel` attached to ``mesh``."""
    model = mesh._cache.get("cem_model")
    if model is None:
        model = CemModel(mesh)
        mesh._cache["cem_model"] = model
    return model


def assemble_system(mesh: Mesh, x, with_electrodes: bool = True) -> sparse.csr_matrix:
    """Assemble the interior-potential system matrix.

    With ``with_electrodes=False`` only the conductivity-weighted
    stiffness part is returned (constants are in its kernel).
    """
    model = cem_model(mesh)
    A = model.system(x)
    if not with_electrodes:
        A = model.stiffness(_values(x))
    return A


def solve_cem(mesh: Mesh, x, pattern) -> CemSolution:
    """Solve the CEM for one excitation (``ExcitationPattern`` or potentials)."""
    U = pattern.U if isinstance(pattern, ExcitationPattern) else np.asarray(pattern, dtype=float)
    sol = cem_model(mesh).solve(x, U[None, :])
    return CemSolution(u=sol.u[:, 0], I=sol.I[:, 0])


def forward_currents(mesh: Mesh, x, patterns=None):
    """Raw currents ``(N1, N2)`` and the measurement mask for all patterns."""
    U, excited = pattern_matrix(patterns, mesh.n_electrodes)
    sol = cem_model(mesh).solve(x, U)
    return sol.I, measurement_mask(excited, mesh.n_electrodes)


def extract_measurements(I, mask, scale=PRECISION_SCALE):
    """Flatten currents ``(N1, N2)`` to the pattern-major measurement vector."""
    return scale * I.T[mask]


def forward_map(mesh: Mesh, x, patterns=None, scale: float = PRECISION_SCALE, frame: int = 0) -> MeasurementFrame:
    """Scaled currents for every pattern, skipping the excited electrode."""
    I, mask = forward_currents(mesh, x, patterns)
    return MeasurementFrame(values=extract_measurements(I, mask, scale), frame=frame, scale=scale)


def reciprocity_check(mesh: Mesh, x) -> float:
    """Max ``|I_i(e_j) - I_j(e_i)|`` over unit single-electrode excitations."""
    n_el = mesh.n_electrodes
    sol = cem_model(mesh).solve(x, np.eye(n_el))
    R = sol.I
    return float(np.max(np.abs(R - R.T)))


# --------------------------------------------------------------------------
# CSV serialization of measurement streams


def write_frames_csv(frames, path) -> None:
    """One row per frame: frame index, then ``m_0 .. m_{L-1}``."""
    frames = list(frames)
    width = len(frames[0].values) if frames else 0
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["frame"] + [f"m_{i}" for i in range(width)])
        for fr in frames:
            w.writerow([fr.frame] + [repr(float(v)) for v in fr.values])
    os.replace(tmp, path)


def read_frames_csv(path, scale: float = PRECISION_SCALE) -> list[MeasurementFrame]:
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        width = len(header) - 1
        out = []
        for row in r:
            if len(row) != width + 1:
                raise ValidationError(f"frame row has {len(row) - 1} values, expected {width}")
            out.append(MeasurementFrame(np.array(row[1:], dtype=float), frame=int(row[0]), scale=scale))
    return out
