"""Gradients from a frozen linearization refreshed in the background.

A snapshot stores ``S(x_check)`` and ``J(x_check)``.  The online loop is
served ``J^T (S(x_check) + J (x - x_check) - b)`` (the ``taylor`` variant)
or ``J^T (S(x_check) - b)`` (the ``appendix`` variant) while a new
linearization point is being processed.

Two refresh modes exist.  ``async`` runs the forward solve and Jacobian on
a single worker thread and publishes the finished snapshot by swapping
one reference.  ``sync`` performs the same protocol deterministically: a
refresh requested at serve call ``n`` is published at call ``n + lag``.
"""

from __future__ import annotations

import logging
import threading
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cem_derivative import jacobian
from .cem_forward import PRECISION_SCALE, forward_map
from .errors import ParameterError, ValidationError
from .mesh import Mesh
from .popdn_core import TAU_FACTOR, GradientEval, compute_tau

logger = logging.getLogger(__name__)

VARIANTS = ("taylor", "appendix")
MODES = ("sync", "async")


@dataclass(frozen=True)
class LinearizationSnapshot:
    """Consistent ``(x_check, S(x_check), J(x_check))`` requested at ``source_frame``."""

    x_check: np.ndarray
    S: np.ndarray
    J: np.ndarray
    source_frame: int
    tau: float

    def __post_init__(self):
        for name in ("x_check", "S", "J"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.J.shape != (len(self.S), len(self.x_check)):
            raise ValidationError(f"Jacobian shape {self.J.shape} inconsistent with S and x")


def approx_forward(snapshot: LinearizationSnapshot, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != snapshot.x_check.shape:
        raise ValidationError(f"x has shape {x.shape}, snapshot expects {snapshot.x_check.shape}")
    return snapshot.S + snapshot.J @ (x - snapshot.x_check)


def approx_grad(snapshot: LinearizationSnapshot, x, b, variant: str = "taylor") -> np.ndarray:
    b = getattr(b, "values", b)
    b = np.asarray(b, dtype=float)
    if b.shape != snapshot.S.shape:
        raise ValidationError(f"data has shape {b.shape}, snapshot expects {snapshot.S.shape}")
    if variant == "taylor":
        r = approx_forward(snapshot, x) - b
    elif variant == "appendix":
        r = snapshot.S - b
    else:
        raise ParameterError(f"unknown gradient variant {variant!r}")
    return snapshot.J.T @ r


def lag_diagnostic(snapshot: LinearizationSnapshot, x) -> float:
    """``||x - x_check||``, the controllable factor of the lag error."""
    return float(np.linalg.norm(np.asarray(x, dtype=float) - snapshot.x_check))


class EitEngine:
    """Forward values and Jacobian of the scaled EIT forward map."""

    def __init__(self, mesh: Mesh, scale: float = PRECISION_SCALE):
        self.mesh = mesh
        self.scale = scale

    def __call__(self, x):
        S = forward_map(self.mesh, x, scale=self.scale).values
        J = jacobian(self.mesh, x, scale=self.scale).matrix
        return S, J


class LinearEngine:
    """Engine for ``S(x) = A x + c``."""

    def __init__(self, A, c=None):
        self.A = np.asarray(A, dtype=float)
        self.c = np.zeros(self.A.shape[0]) if c is None else np.asarray(c, dtype=float)

    def __call__(self, x):
        return self.A @ x + self.c, self.A


class LaggedGradient:
    """Gradient provider serving from the most recently published snapshot.

    Parameters
    ----------
    engine : callable
        ``x -> (S(x), J(x))``.
    mode : {"sync", "async"}
    lag : int
        Serve calls between a refresh request and its publication (sync mode).
    variant : {"taylor", "appendix"}
    tau_factor : float
        Step length of a snapshot is ``tau_factor / ||J J^T||``.
    """

    def __init__(self, engine, mode: str = "sync", lag: int = 0, variant: str = "taylor",
                 tau_factor: float = TAU_FACTOR):
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
        if variant not in VARIANTS:
            raise ParameterError(f"variant must be one of {VARIANTS}, got {variant!r}")
        if lag < 0:
            raise ParameterError("lag must be nonnegative")
        self.engine = engine
        self.mode = mode
        self.lag = int(lag)
        self.variant = variant
        self.tau_factor = tau_factor
        self._snapshot: LinearizationSnapshot | None = None
        self._pending = None  # sync: (x, frame, due_call); async: Future
        self._calls = 0
        self._failures: list[str] = []
        self._reported = 0
        self._lock = threading.Lock()
        self._executor = ThreadPoolExecutor(max_workers=1) if mode == "async" else None
        self.refresh_count = 0

    # -- snapshot handling ---------------------------------------------------
    @property
    def snapshot(self) -> LinearizationSnapshot | None:
        return self._snapshot

    @property
    def failures(self) -> list[str]:
        return list(self._failures)

    def _build(self, x, frame) -> LinearizationSnapshot:
        S, J = self.engine(x)
        return LinearizationSnapshot(x, S, J, frame, compute_tau(J, self.tau_factor))

    def _publish(self, snap: LinearizationSnapshot) -> None:
        self._snapshot = snap  # single reference swap
        self.refresh_count += 1

    def _record_failure(self, exc: BaseException) -> None:
        with self._lock:
            self._failures.append(f"{type(exc).__name__}: {exc}")
        logger.warning("linearization refresh failed; serving stale snapshot (%s)", exc)

    def _flush_warnings(self) -> None:
        with self._lock:
            new = self._failures[self._reported:]
            self._reported = len(self._failures)
        for msg in new:
            warnings.warn(f"background refresh failed, using stale linearization: {msg}", RuntimeWarning, stacklevel=3)

    def refresh_cycle(self, x_request, frame: int = 0) -> None:
        """Request a new linearization at ``x_request``.

        Sync mode publishes it after ``lag`` further serve calls; async
        mode hands it to the worker unless a refresh is already running.
        """
        x_request = np.array(x_request, dtype=float)
        if self.mode == "sync":
            if self._pending is None:
                self._pending = (x_request, frame, self._calls + self.lag)
            return
        if self._pending is not None and not self._pending.done():
            return

        def work():
            try:
                self._publish(self._build(x_request, frame))
            except Exception as exc:  # noqa: BLE001 - failures are reported, not raised
                self._record_failure(exc)

        self._pending = self._executor.submit(work)

    def _sync_advance(self) -> float:
        """Publish a due sync refresh; returns the time spent (ms)."""
        if self._pending is None or self._calls < self._pending[2]:
            return 0.0
        x_req, frame, _ = self._pending
        self._pending = None
        t0 = time.perf_counter()
        try:
            self._publish(self._build(x_req, frame))
        except Exception as exc:  # noqa: BLE001
            self._record_failure(exc)
        return 1e3 * (time.perf_counter() - t0)

    # -- serving -----------------------------------------------------------
    def evaluate(self, x, b, k) -> GradientEval:
        """Serve ``grad E(x)`` for frame ``k`` (the ``GradientProvider`` protocol).

        The time spent building snapshots in the calling thread is
        reported as ``excluded_ms``.
        """
        excluded = 0.0
        if self._snapshot is None:
            t0 = time.perf_counter()
            self._publish(self._build(np.array(x, dtype=float), k))
            excluded += 1e3 * (time.perf_counter() - t0)
        elif self.mode == "sync":
            # publish a due refresh, then request the next one at the current x
            excluded += self._sync_advance()
            self.refresh_cycle(x, k)
            excluded += self._sync_advance()
        else:
            self.refresh_cycle(x, k)
        self._calls += 1
        self._flush_warnings()
        snap = self._snapshot
        grad = approx_grad(snap, x, b, self.variant)
        return GradientEval(grad=grad, tau=snap.tau, lag=lag_diagnostic(snap, x), excluded_ms=excluded)

    def wait(self, timeout: float | None = None) -> None:
        """Block until a running async refresh finishes (tests and shutdown)."""
        fut = self._pending
        if self.mode == "async" and fut is not None:
            fut.result(timeout=timeout)

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
