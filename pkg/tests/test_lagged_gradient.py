import numpy as np
import pytest

from dyneit.errors import ParameterError, ValidationError
from dyneit.lagged_gradient import (
    EitEngine,
    LaggedGradient,
    LinearEngine,
    LinearizationSnapshot,
    approx_forward,
    approx_grad,
    lag_diagnostic,
)
from dyneit.popdn_core import Coupling, LinearGradient, StepParams, identity_predictor, initial_state, popdn_step


@pytest.fixture
def linear(rng):
    A = rng.standard_normal((12, 6))
    c = rng.standard_normal(12)
    return A, c


class QuadEngine:
    """Nonlinear toy ``S(x) = x**2`` so snapshots differ between points."""

    def __init__(self, fail_on=()):
        self.calls = 0
        self.fail_on = set(fail_on)

    def __call__(self, x):
        self.calls += 1
        if self.calls in self.fail_on:
            raise RuntimeError("injected failure")
        return x**2, np.diag(2 * x)


def test_snapshot_is_read_only():
    snap = LinearizationSnapshot(np.ones(2), np.ones(3), np.ones((3, 2)), 0, 1.0)
    with pytest.raises(ValueError):
        snap.J[0, 0] = 5.0
    with pytest.raises(ValidationError):
        LinearizationSnapshot(np.ones(2), np.ones(3), np.ones((2, 2)), 0, 1.0)


def test_variants(linear):
    A, c = linear
    x0 = np.ones(6)
    snap = LinearizationSnapshot(x0, A @ x0 + c, A, 0, 1.0)
    x = x0 + 0.1
    b = np.zeros(12)
    assert np.allclose(approx_forward(snap, x), A @ x + c)
    assert np.allclose(approx_grad(snap, x, b, "taylor"), A.T @ (A @ x + c))
    assert np.allclose(approx_grad(snap, x, b, "appendix"), A.T @ (A @ x0 + c))
    with pytest.raises(ParameterError):
        approx_grad(snap, x, b, "other")
    with pytest.raises(ValidationError):
        approx_grad(snap, x, np.zeros(3))
    assert lag_diagnostic(snap, x) == pytest.approx(0.1 * np.sqrt(6))


def test_zero_lag_matches_exact_gradient_bitwise(linear):
    A, c = linear
    K = np.zeros((2, 6))
    coupling = Coupling(K)
    params = StepParams(tau=0.5 / np.linalg.norm(A, 2) ** 2)
    rng = np.random.default_rng(3)
    data = [rng.standard_normal(12) for _ in range(30)]

    def run(provider):
        s = initial_state(np.ones(6), [[0.0, 0.0]], params.tau)
        for b in data:
            s = popdn_step(s, b, identity_predictor, provider, coupling, params)
        return s.x

    class NoTau:
        def __init__(self, p):
            self.p = p

        def evaluate(self, x, b, k):
            from dataclasses import replace

            return replace(self.p.evaluate(x, b, k), tau=None)

    exact = run(LinearGradient(A, c))
    lagged = run(NoTau(LaggedGradient(LinearEngine(A, c), lag=0)))
    assert np.array_equal(exact, lagged)


@pytest.mark.parametrize("lag", [1, 3, 5])
def test_snapshot_age_bounded_by_twice_lag(lag):
    lg = LaggedGradient(QuadEngine(), lag=lag)
    ages = []
    for k in range(1, 40):
        lg.evaluate(np.full(3, 1.0 + 0.01 * k), np.zeros(3), k)
        ages.append(k - lg.snapshot.source_frame)
    steady = ages[2 * lag + 1:]
    assert max(steady) <= 2 * lag
    assert min(steady) >= lag


def test_failure_keeps_stale_snapshot_and_warns():
    eng = QuadEngine(fail_on={2})
    lg = LaggedGradient(eng, lag=0)
    lg.evaluate(np.ones(2), np.zeros(2), 1)
    first = lg.snapshot
    with pytest.warns(RuntimeWarning, match="injected failure"):
        lg.evaluate(np.full(2, 2.0), np.zeros(2), 2)
    assert lg.snapshot is first
    assert len(lg.failures) == 1
    lg.evaluate(np.full(2, 3.0), np.zeros(2), 3)
    assert lg.snapshot is not first


def test_async_mode_publishes():
    with LaggedGradient(QuadEngine(), mode="async") as lg:
        ev = lg.evaluate(np.ones(2), np.zeros(2), 1)
        assert ev.tau is not None
        lg.evaluate(np.full(2, 2.0), np.zeros(2), 2)
        lg.wait(timeout=10)
        ev = lg.evaluate(np.full(2, 2.0), np.zeros(2), 3)
        assert np.array_equal(lg.snapshot.x_check, np.full(2, 2.0))
        assert lg.refresh_count >= 2


def test_async_failure_is_reported():
    with LaggedGradient(QuadEngine(fail_on={2}), mode="async") as lg:
        lg.evaluate(np.ones(2), np.zeros(2), 1)
        # the worker may finish before either serve call returns
        with pytest.warns(RuntimeWarning):
            lg.evaluate(np.full(2, 2.0), np.zeros(2), 2)
            lg.wait(timeout=10)
            lg.evaluate(np.full(2, 2.0), np.zeros(2), 3)
        assert len(lg.failures) == 1


def test_excluded_time_reported(tiny_mesh):
    lg = LaggedGradient(EitEngine(tiny_mesh), lag=0)
    ev = lg.evaluate(np.ones(tiny_mesh.n_nodes), np.zeros(240), 1)
    assert ev.excluded_ms > 0
    assert ev.grad.shape == (tiny_mesh.n_nodes,)


def test_constructor_checks():
    with pytest.raises(ParameterError):
        LaggedGradient(QuadEngine(), mode="threads")
    with pytest.raises(ParameterError):
        LaggedGradient(QuadEngine(), variant="x")
    with pytest.raises(ParameterError):
        LaggedGradient(QuadEngine(), lag=-1)
