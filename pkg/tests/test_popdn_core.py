import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import lsq_linear

from dyneit.cem_derivative import jacobian
from dyneit.cem_forward import forward_map
from dyneit.errors import NumericError, ParameterError, ValidationError
from dyneit.popdn_core import (
    Coupling,
    ExactGradient,
    GapRecord,
    GradientEval,
    LinearGradient,
    StepParams,
    check_step_condition,
    compute_tau,
    gram_norm,
    identity_predictor,
    initial_state,
    lagrangian_gap,
    metric_sq,
    popdn_step,
    prediction_error,
    verify_gap_bound,
    weighted_sq,
)


@pytest.fixture
def toy():
    K = np.array([[1.0, -1.0], [0.0, 0.0]])
    return Coupling(K), LinearGradient(np.eye(2))


def test_hand_computed_step(toy):
    coupling, grad = toy
    state = initial_state([1.0, 2.0], [[0.1, 0.2]], tau=0.5)
    params = StepParams(tau=0.5, sigma=1.0, alpha=0.5)
    new = popdn_step(state, np.zeros(2), identity_predictor, grad, coupling, params)
    assert np.allclose(new.x, [0.45, 1.05])
    assert np.allclose(new.y, [[-0.1, 0.2]])
    assert new.k == 1
    assert np.array_equal(new.x_prev, state.x)


def test_dual_projected_in_step(toy):
    coupling, grad = toy
    state = initial_state([1.0, 2.0], [[0.45, 0.0]], tau=0.5)
    new = popdn_step(state, np.array([5.0, -5.0]), identity_predictor, grad, coupling, StepParams(tau=0.5, sigma=10.0))
    assert np.linalg.norm(new.y) == pytest.approx(0.5)


def test_primal_box(toy):
    coupling, grad = toy
    state = initial_state([1.0, 2.0], [[0.0, 0.0]], tau=0.5)
    new = popdn_step(state, np.array([-100.0, 1e7]), identity_predictor, grad, coupling, StepParams(tau=0.9))
    assert new.x[0] == 1e-5 and new.x[1] == 1e5


def test_converges_to_box_constrained_least_squares(rng):
    A = rng.standard_normal((30, 10))
    b = rng.standard_normal(30)
    coupling = Coupling(np.zeros((2, 10)))
    grad = LinearGradient(A)
    tau = 0.9 / gram_norm(A)
    params = StepParams(tau=tau, x_min=0.0 + 1e-5, x_max=0.5)
    state = initial_state(np.full(10, 0.2), [[0.0, 0.0]], tau)
    for _ in range(5000):
        state = popdn_step(state, b, identity_predictor, grad, coupling, params)
    ref = lsq_linear(A, b, bounds=(1e-5, 0.5), tol=1e-14).x
    assert np.allclose(state.x, ref, atol=1e-8)


def test_nonfinite_iterate_raises(toy):
    coupling, _ = toy

    class Bad:
        def evaluate(self, x, b, k):
            return GradientEval(grad=np.array([np.nan, 0.0]))

    state = initial_state([1.0, 1.0], [[0.0, 0.0]], 0.5)
    with pytest.raises(NumericError) as err:
        popdn_step(state, np.zeros(2), identity_predictor, Bad(), coupling, StepParams(tau=0.5))
    assert err.value.state is state
    assert "frame 1" in str(err.value)


def test_provider_tau_is_adopted(toy):
    coupling, _ = toy

    class WithTau:
        def evaluate(self, x, b, k):
            return GradientEval(grad=np.zeros(2), tau=0.125)

    state = initial_state([1.0, 1.0], [[0.0, 0.0]], 0.5)
    new = popdn_step(state, np.zeros(2), identity_predictor, WithTau(), coupling, StepParams(tau=0.5))
    assert new.tau == 0.125


def test_step_needs_positive_lengths(toy):
    coupling, grad = toy
    state = initial_state([1.0, 1.0], [[0.0, 0.0]], 0.0)
    with pytest.raises(ParameterError):
        popdn_step(state, np.zeros(2), identity_predictor, grad, coupling, StepParams(tau=0.0))


def test_params_validation():
    with pytest.raises(ParameterError):
        StepParams(tau=-1.0)
    with pytest.raises(ParameterError):
        StepParams(tau=1.0, kappa=1.5)
    p = StepParams(tau=0.2, sigma=0.5)
    assert p.eta == 0.2 and p.phi == 1.0 and p.psi == pytest.approx(0.4)
    assert p.with_tau(0.3).tau == 0.3


def test_step_condition_cases():
    zero = check_step_condition(StepParams(tau=0.0, sigma=0.0), 1e4, 1.0)
    assert zero.passed and zero.slack == 1.0
    ok = check_step_condition(StepParams(tau=0.5, sigma=0.1), 1.0, 1.0)
    assert ok.passed and ok.slack == pytest.approx(0.45)
    too_big = check_step_condition(StepParams(tau=0.9, sigma=0.05), 1.0, 1.0)
    assert not too_big.passed and too_big.global_ok and not too_big.local_ok
    neg = check_step_condition(StepParams(tau=1.0, sigma=1.0), 1.0, 1.0)
    assert not neg.global_ok
    with pytest.raises(ParameterError):
        check_step_condition(StepParams(tau=1.0), -1.0, 1.0)


def _dense_M(K, tau, sigma):
    n, m = K.shape[1], K.shape[0]
    return np.block([[np.eye(n) / tau, -K.T], [-K, np.eye(m) / sigma]])


@given(st.integers(0, 10**6), st.floats(0.05, 2.0), st.floats(0.05, 2.0))
def test_metric_matches_dense(seed, tau, sigma):
    rng = np.random.default_rng(seed)
    K = rng.standard_normal((4, 3))
    c = Coupling(K)
    dx, dy = rng.standard_normal(3), rng.standard_normal((2, 2))
    u = np.concatenate([dx, dy.ravel()])
    assert metric_sq(dx, dy, c, tau, sigma) == pytest.approx(u @ _dense_M(K, tau, sigma) @ u, rel=1e-10, abs=1e-10)


def test_prediction_error_matches_dense(rng):
    K = rng.standard_normal((4, 3))
    c = Coupling(K)
    p = StepParams(tau=0.3, sigma=0.7, gamma=0.2, rho=0.1, lambda_tilde=0.05)
    M = _dense_M(K, p.tau, p.sigma)
    G = np.diag([p.gamma + p.lambda_tilde] * 3 + [p.rho] * 4)
    pts = [(rng.standard_normal(3), rng.standard_normal((2, 2))) for _ in range(4)]
    u_prev, u_pred, ub_prev, ub_next = pts

    def flat(u):
        return np.concatenate([u[0], u[1].ravel()])

    a = flat(u_pred) - flat(ub_next)
    b = flat(u_prev) - flat(ub_prev)
    ref = 0.5 * p.eta * a @ M @ a - 0.5 * p.eta * b @ (M + G) @ b
    assert prediction_error(u_prev, u_pred, ub_prev, ub_next, c, p) == pytest.approx(ref, rel=1e-12)


def test_omega_part(rng):
    c = Coupling(rng.standard_normal((2, 3)))
    p = StepParams(tau=0.5, ek_loss=0.7)
    dx, dy = rng.standard_normal(3), rng.standard_normal(2)
    assert weighted_sq(dx, dy, c, p, omega_part=True) == pytest.approx(
        weighted_sq(dx, dy, c, p) - p.eta * 0.7 * dx @ dx)


def test_prediction_error_shape_mismatch(rng):
    c = Coupling(rng.standard_normal((2, 3)))
    good = (np.zeros(3), np.zeros(2))
    with pytest.raises(ValidationError):
        prediction_error(good, (np.zeros(4), np.zeros(2)), good, good, c, StepParams(tau=1.0))


def test_lagrangian_gap_values(toy):
    coupling, _ = toy
    p = StepParams(tau=1.0)

    def E(x):
        return 0.5 * float(x @ x)

    u = (np.array([1.0, 2.0]), np.array([[0.1, 0.0]]))
    ub = (np.array([0.5, 0.5]), np.array([[0.2, 0.0]]))
    ref = (E(u[0]) + (-1.0) * 0.2) - (E(ub[0]) + 0.0)
    assert lagrangian_gap(u, ub, E, coupling, p) == pytest.approx(ref)
    assert lagrangian_gap((np.array([-1.0, 1.0]), u[1]), ub, E, coupling, p) == np.inf
    assert lagrangian_gap(u, (ub[0], np.array([[1.0, 0.0]])), E, coupling, p) == np.inf
    assert lagrangian_gap((u[0], np.array([[1.0, 0.0]])), ub, E, coupling, p) == -np.inf
    assert lagrangian_gap(ub, ub, E, coupling, p) == pytest.approx(0.0)


def test_gap_bound_detects_violation(toy):
    coupling, _ = toy
    p = StepParams(tau=1.0)
    u0 = (np.zeros(2), np.zeros((1, 2)))
    recs = [GapRecord(1, 1.0, 0.0, 0.0, 0.0), GapRecord(2, 1.0, 1.0, 0.0, 0.0)]
    res = verify_gap_bound(recs, u0, u0, coupling, p)
    assert not res.passed and res.violating_frame == 2
    ok = verify_gap_bound([GapRecord(1, 1.0, 1.0, 0.0, 2.0)], u0, u0, coupling, p)
    assert ok.passed


def test_exact_gradient_and_tau(tiny_mesh):
    x = np.ones(tiny_mesh.n_nodes) * 1.3
    b = forward_map(tiny_mesh, np.ones(tiny_mesh.n_nodes)).values
    ev = ExactGradient(tiny_mesh).evaluate(x, b, 1)
    J = jacobian(tiny_mesh, x).matrix
    assert np.allclose(ev.grad, J.T @ (forward_map(tiny_mesh, x).values - b))
    assert ev.tau == pytest.approx(0.85 / np.linalg.norm(J, 2) ** 2, rel=1e-10)
    with pytest.raises(ValidationError):
        compute_tau(np.zeros((3, 3)))


def test_coupling_shapes(tiny_mesh):
    c = Coupling.from_mesh(tiny_mesh)
    assert c.dual_shape == (tiny_mesh.n_elements, 2)
    assert c.zeros_dual().shape == c.dual_shape
    with pytest.raises(ValidationError):
        Coupling(np.zeros((3, 2)))
