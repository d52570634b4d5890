from __future__ import annotations

import math

import numpy as np
import pytest

from sdec import bellman
from sdec.errors import EmptyBatch, SegmentTooShort, TrajectoryTooShort, ZeroPolicyProbability, ZetaOutOfRange
from sdec.functions import make_discrete_policy, make_dual, make_value_function, rbf_random_features, tabular_features
from sdec.mdp import Transition, make_benchmark_env, make_tabular_mdp
from sdec.objective import (
    Batch,
    SaddleState,
    consistency_loss_exact,
    delta_multi_step,
    delta_one_step,
    delta_trace,
    dual_loss,
    enumerate_batch,
    fit_dual,
    fit_dual_and_gradients,
    fit_dual_sgd,
    grad_pi_estimator,
    grad_V_estimator,
    objective_terms,
    primal_gradients,
    saddle_objective_eta,
    surrogate_loss_exact,
    trace_weights,
    variance_identity_check,
)


def tabular_state(mdp, V, pi, lam, eta, rho=None, steps=1):
    S, A = mdp.n_states, mdp.n_actions
    Vf = make_value_function(tabular_features(S), V)
    pif = make_discrete_policy(tabular_features(S), A, np.log(np.asarray(pi, float)).T.reshape(-1))
    rf = make_dual(tabular_features(S * A ** steps), n_actions=A, steps=steps, params=rho)
    return SaddleState(Vf, pif, rf, lam, eta, mdp.gamma)


def uniform(S, A):
    return np.full((S, A), 1.0 / A)


def random_tables(mdp, seed):
    rng = np.random.default_rng(seed)
    V = rng.normal(0, 2, mdp.n_states)
    pi = rng.dirichlet(np.ones(mdp.n_actions), mdp.n_states)
    return V, pi


def one_state_mdp(rewards, gamma):
    A = len(rewards)
    return make_tabular_mdp(1, A, np.ones((1, A, 1)), [rewards], gamma=gamma)


# deltas ------------------------------------------------------------------

def test_delta_deterministic_policy():
    mdp = make_tabular_mdp(2, 1, np.array([[[0.0, 1.0]], [[0.0, 1.0]]]), np.zeros((2, 1)), gamma=0.9)
    st = tabular_state(mdp, [0.0, 10.0], [[1.0], [1.0]], lam=0.5, eta=0.0)
    assert delta_one_step(st, Transition(0, 0, 1.0, 1)) == pytest.approx(10.0, abs=1e-12)


def test_delta_with_uniform_policy():
    mdp = make_tabular_mdp(2, 2, np.full((2, 2, 2), 0.5), np.zeros((2, 2)), gamma=0.5)
    st = tabular_state(mdp, [0.0, 4.0], uniform(2, 2), lam=1.0, eta=0.0)
    out = delta_one_step(st, Transition(0, 1, 0.0, 1))
    assert out == pytest.approx(2 + math.log(2), abs=1e-12)
    assert round(out, 6) == 2.693147


def test_delta_without_entropy_ignores_policy():
    mdp = make_tabular_mdp(2, 2, np.full((2, 2, 2), 0.5), np.zeros((2, 2)), gamma=0.5)
    st = tabular_state(mdp, [0.0, 4.0], [[1e-300, 1.0], [0.5, 0.5]], lam=0.0, eta=0.0)
    assert delta_one_step(st, Transition(0, 0, 1.5, 1)) == 3.5


def test_zero_probability_is_reported():
    mdp = make_tabular_mdp(1, 2, np.ones((1, 2, 1)), np.zeros((1, 2)), gamma=0.5)
    st = tabular_state(mdp, [0.0], [[0.5, 0.5]], lam=1.0, eta=0.0)
    with pytest.raises(ZeroPolicyProbability):
        consistency_loss_exact(mdp, [0.0], [[1.0, 0.0]], 1.0)
    st.pi.params[:] = [0.0, -np.inf]
    with pytest.raises(ZeroPolicyProbability):
        delta_one_step(st, Transition(0, 1, 0.0, 0))


# exact losses -------------------------------------------------------------

def test_consistency_loss_vanishes_at_smoothed_optimum(small_random_mdp):
    lam = 0.3
    V = bellman.solve_fixed_point(small_random_mdp, lam, tol=1e-14).values
    pi = bellman.smoothed_optimal_policy(small_random_mdp, V, lam)
    assert consistency_loss_exact(small_random_mdp, V, pi, lam) <= 1e-16 * max(1.0, np.max(V) ** 2) * 100


def test_constant_shift_single_action():
    mdp = one_state_mdp([1.0], gamma=0.9)
    c = 3.0
    got = consistency_loss_exact(mdp, [10.0 + c], [[1.0]], 0.7)
    assert got == pytest.approx(((1 - 0.9) * c) ** 2, rel=1e-12)


def test_consistency_loss_matches_double_loop(small_random_mdp):
    mdp, lam = small_random_mdp, 0.4
    V, pi = random_tables(mdp, 1)
    total = 0.0
    for s in range(mdp.n_states):
        for a in range(mdp.n_actions):
            ev = sum(mdp.transition[s, a, s2] * V[s2] for s2 in range(mdp.n_states))
            r = mdp.reward[s, a] + mdp.gamma * ev - lam * math.log(pi[s, a]) - V[s]
            total += r * r / (mdp.n_states * mdp.n_actions)
    assert consistency_loss_exact(mdp, V, pi, lam) == pytest.approx(total, rel=1e-12, abs=1e-12)


def test_surrogate_equals_exact_without_next_state_variance(chain5):
    V, pi = random_tables(chain5, 2)
    assert surrogate_loss_exact(chain5, V, pi, 0.2) == pytest.approx(consistency_loss_exact(chain5, V, pi, 0.2), rel=1e-12)
    mdp = make_benchmark_env("random_mdp", n_states=5, n_actions=2, seed=4)
    flat = np.full(5, 1.7)
    assert surrogate_loss_exact(mdp, flat, pi, 0.2) == pytest.approx(consistency_loss_exact(mdp, flat, pi, 0.2), rel=1e-12)


def test_two_outcome_variance(two_outcome_mdp):
    w = np.array([[1.0], [0.0], [0.0]])
    out = variance_identity_check(two_outcome_mdp, [0.0, 0.0, 2.0], [[1.0]] * 3, 0.1, weights=w)
    assert out.variance_term == pytest.approx(0.25, abs=1e-15)
    assert out.f_tilde - out.f == pytest.approx(0.25, abs=1e-14)
    assert out.defect <= 1e-14 and out.dual_defect <= 1e-14


def test_variance_identity_on_random_mdp():
    mdp = make_benchmark_env("random_mdp", n_states=10, n_actions=3, seed=3)
    V, pi = random_tables(mdp, 5)
    out = variance_identity_check(mdp, V, pi, 0.5)
    assert out.defect <= 1e-12 and out.dual_defect <= 1e-12


def test_deterministic_mdp_has_no_variance(chain5):
    V, pi = random_tables(chain5, 6)
    out = variance_identity_check(chain5, V, pi, 0.5)
    assert out.variance_term == 0.0 and out.defect <= 1e-14


# sampled objective ----------------------------------------------------------

def test_eta_zero_is_surrogate_on_enumerated_batch(small_random_mdp):
    V, pi = random_tables(small_random_mdp, 7)
    st = tabular_state(small_random_mdp, V, pi, 0.3, 0.0)
    b = enumerate_batch(small_random_mdp)
    assert saddle_objective_eta(st, b) == pytest.approx(surrogate_loss_exact(small_random_mdp, V, pi, 0.3), rel=1e-12)


def test_perfect_dual_leaves_first_term(chain5):
    V, pi = random_tables(chain5, 8)
    st = tabular_state(chain5, V, pi, 0.3, 1.0)
    b = enumerate_batch(chain5)
    st.rho.params = fit_dual(st, b)[0]
    first, second = objective_terms(st, b)
    assert second <= 1e-28
    assert saddle_objective_eta(st, b) == first


def test_objective_matches_per_sample_sum(small_random_mdp, rng):
    mdp = small_random_mdp
    V, pi = random_tables(mdp, 9)
    rho = rng.normal(size=mdp.n_states * mdp.n_actions)
    st = tabular_state(mdp, V, pi, 0.25, 0.6, rho=rho)
    n = 40
    s = rng.integers(0, mdp.n_states, n)
    a = rng.integers(0, mdp.n_actions, n)
    s2 = rng.integers(0, mdp.n_states, n)
    r = rng.normal(size=n)
    b = Batch.from_arrays(s, a, r, s2)
    total = 0.0
    for i in range(n):
        d = r[i] + mdp.gamma * V[s2[i]] - 0.25 * math.log(pi[s[i], a[i]])
        total += (d - V[s[i]]) ** 2 - 0.6 * (d - rho[s[i] * mdp.n_actions + a[i]]) ** 2
    assert saddle_objective_eta(st, b) == pytest.approx(total / n, rel=1e-12, abs=1e-12)


def test_objective_is_affine_in_eta(small_random_mdp, rng):
    V, pi = random_tables(small_random_mdp, 10)
    rho = rng.normal(size=18)
    b = enumerate_batch(small_random_mdp)
    L = [saddle_objective_eta(tabular_state(small_random_mdp, V, pi, 0.2, e, rho=rho), b) for e in (0.0, 0.37, 1.0)]
    assert L[1] == pytest.approx(0.63 * L[0] + 0.37 * L[2], rel=1e-12)


def test_empty_batch():
    with pytest.raises(EmptyBatch):
        Batch.from_transitions([])
    with pytest.raises(EmptyBatch):
        Batch.from_arrays(np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros(0, int))


# dual fitting -------------------------------------------------------------

def test_dual_interpolates_deterministic_env(chain5):
    V, pi = random_tables(chain5, 11)
    st = tabular_state(chain5, V, pi, 0.3, 1.0)
    b = enumerate_batch(chain5)
    params, loss = fit_dual(st, b)
    assert loss <= 1e-28
    s, a, s2 = 2, 1, 3
    expect = chain5.reward[s, a] + chain5.gamma * V[s2] - 0.3 * math.log(pi[s, a])
    assert params[s * 2 + a] == pytest.approx(expect, abs=1e-12)


def test_dual_averages_repeated_pair():
    mdp = make_tabular_mdp(1, 1, np.ones((1, 1, 1)), [[0.0]], gamma=0.5)
    st = tabular_state(mdp, [0.0], [[1.0]], 0.1, 1.0)
    b = Batch.from_transitions([Transition(0, 0, 1.0, 0), Transition(0, 0, 3.0, 0)])
    params, loss = fit_dual(st, b)
    assert params[0] == pytest.approx(2.0) and loss == pytest.approx(1.0)


def test_dual_converges_to_closed_form_from_samples(small_random_mdp):
    mdp, lam = small_random_mdp, 0.2
    V, pi = random_tables(mdp, 12)
    rng = np.random.default_rng(13)
    n = 100_000
    s = rng.integers(0, mdp.n_states, n)
    a = rng.integers(0, mdp.n_actions, n)
    cdf = np.cumsum(mdp.transition[s, a], axis=1)
    s2 = np.minimum((rng.random(n)[:, None] > cdf).sum(axis=1), mdp.n_states - 1)
    st = tabular_state(mdp, V, pi, lam, 1.0)
    params, _ = fit_dual(st, Batch.from_arrays(s, a, mdp.reward[s, a], s2))
    rho_star = mdp.reward + mdp.gamma * mdp.expected_next(V) - lam * np.log(pi)
    sd = mdp.gamma * np.sqrt(mdp.transition @ V ** 2 - (mdp.transition @ V) ** 2)
    counts = np.bincount(s * mdp.n_actions + a, minlength=params.size).reshape(rho_star.shape)
    se = np.maximum(sd / np.sqrt(counts), 1e-12)
    assert np.all(np.abs(params.reshape(rho_star.shape) - rho_star) <= 3 * se)


class _IndexRbf:
    """RBF features of the integer state index, so a non-tabular dual can sit on a tabular MDP."""

    kind = "rbf_random"

    def __init__(self, inner):
        self.inner = inner
        self.dim = inner.dim

    def __call__(self, x):
        return self.inner(np.asarray(x, float).reshape(-1, 1))


@pytest.mark.parametrize("kind", ["tabular", "rbf"])
def test_dual_fit_is_stationary(kind):
    mdp = make_benchmark_env("random_mdp", n_states=8, n_actions=2, seed=14)
    V, pi = random_tables(mdp, 15)
    st = tabular_state(mdp, V, pi, 0.3, 1.0)
    if kind == "rbf":
        fmap = rbf_random_features(5, [0.0], [7.0], seed=1, bandwidth=2.0)
        st.rho = make_dual(_IndexRbf(fmap), n_actions=2)
    b = enumerate_batch(mdp)
    params, loss = fit_dual(st, b)
    st.rho.params = params
    base = dual_loss(st, b)
    assert loss == pytest.approx(base, rel=1e-10)
    # the loss is quadratic, so a first-order decrease would show up at either sign
    for k in range(params.size):
        for eps in (1e-4, -1e-4):
            st.rho.params = params.copy()
            st.rho.params[k] += eps
            assert dual_loss(st, b) - base >= -1e-8 * abs(eps)


def test_sgd_dual_approaches_exact_fit(chain5):
    V, pi = random_tables(chain5, 16)
    st = tabular_state(chain5, V, pi, 0.3, 1.0)
    b = enumerate_batch(chain5)
    exact, _ = fit_dual(st, b)
    approx, loss = fit_dual_sgd(st, b, iters=5000, lr=2.0)
    assert np.max(np.abs(approx - exact)) <= 1e-6 and loss <= 1e-10


# gradients ------------------------------------------------------------------

def _refit_objective(mdp, lam, eta, b):
    def L(V, pi):
        st = tabular_state(mdp, V, pi, lam, eta)
        st.rho.params = fit_dual(st, b)[0]
        return saddle_objective_eta(st, b)
    return L


@pytest.mark.parametrize("eta", [0.0, 0.5, 1.0])
def test_gradients_match_differences_of_refit_objective(small_random_mdp, eta):
    mdp, lam = small_random_mdp, 0.3
    V, pi = random_tables(mdp, 17)
    b = enumerate_batch(mdp)
    st = tabular_state(mdp, V, pi, lam, eta)
    st.rho.params = fit_dual(st, b)[0]
    gV, gpi = grad_V_estimator(st, b), grad_pi_estimator(st, b)
    L = _refit_objective(mdp, lam, eta, b)
    eps = 1e-6
    num_V = np.array([(L(V + eps * e, pi) - L(V - eps * e, pi)) / (2 * eps) for e in np.eye(V.size)])
    assert np.max(np.abs(gV - num_V) / np.maximum(1.0, np.abs(gV))) <= 1e-4
    theta = np.log(pi).T.reshape(-1)
    num_pi = np.empty_like(theta)
    for i in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[i] += eps
        dn[i] -= eps
        probs = [np.exp(t.reshape(mdp.n_actions, -1).T) for t in (up, dn)]
        probs = [p / p.sum(axis=1, keepdims=True) for p in probs]
        num_pi[i] = (L(V, probs[0]) - L(V, probs[1])) / (2 * eps)
    assert np.max(np.abs(gpi - num_pi) / np.maximum(1.0, np.abs(gpi))) <= 1e-4


def test_gradients_vanish_at_smoothed_optimum(small_random_mdp):
    mdp, lam = small_random_mdp, 0.3
    V = bellman.solve_fixed_point(mdp, lam, tol=1e-14).values
    pi = bellman.smoothed_optimal_policy(mdp, V, lam)
    b = enumerate_batch(mdp)
    st = tabular_state(mdp, V, pi, lam, 1.0)
    _, _, g = fit_dual_and_gradients(st, b)
    assert np.linalg.norm(g.grad_V) <= 1e-8 and np.linalg.norm(g.grad_pi) <= 1e-8


def test_perfect_dual_removes_second_gradient_term(chain5):
    V, pi = random_tables(chain5, 18)
    b = enumerate_batch(chain5)
    grads = []
    for eta in (0.0, 0.4, 1.0):
        st = tabular_state(chain5, V, pi, 0.3, eta)
        st.rho.params = fit_dual(st, b)[0]
        grads.append(grad_V_estimator(st, b))
    assert np.allclose(grads[0], grads[1], atol=1e-12) and np.allclose(grads[0], grads[2], atol=1e-12)


def test_policy_gradient_at_full_weight_uses_dual_advantage(small_random_mdp, rng):
    mdp = small_random_mdp
    V, pi = random_tables(mdp, 19)
    rho = rng.normal(size=18)
    b = enumerate_batch(mdp)
    st = tabular_state(mdp, V, pi, 0.3, 1.0, rho=rho)
    s, a = b.states[:, 0], b.actions[:, 0]
    _, dlog = st.pi.log_prob_batch(s, a)
    expect = -2 * 0.3 * ((b.weights * (rho[s * 3 + a] - V[s])) @ dlog)
    assert np.allclose(grad_pi_estimator(st, b), expect, atol=1e-12)


def test_fused_fit_matches_separate_steps(small_random_mdp):
    V, pi = random_tables(small_random_mdp, 20)
    b = enumerate_batch(small_random_mdp)
    st = tabular_state(small_random_mdp, V, pi, 0.3, 0.7)
    params, loss, g = fit_dual_and_gradients(st, b)
    p2, l2 = fit_dual(st, b)
    st.rho.params = p2
    g2 = primal_gradients(st, b)
    assert np.array_equal(params, p2) and loss == l2
    assert np.allclose(g.grad_V, g2.grad_V, atol=1e-14) and np.allclose(g.grad_pi, g2.grad_pi, atol=1e-14)


# multi-step and traces ------------------------------------------------------

def _walk(mdp, length, seed):
    rng = np.random.default_rng(seed)
    s, out = 0, []
    for _ in range(length):
        a = int(rng.integers(mdp.n_actions))
        s2 = int(rng.choice(mdp.n_states, p=mdp.transition[s, a]))
        out.append(Transition(s, a, float(rng.normal()), s2))
        s = s2
    return out


def test_zero_horizon_matches_one_step(small_random_mdp):
    V, pi = random_tables(small_random_mdp, 21)
    st = tabular_state(small_random_mdp, V, pi, 0.3, 0.5)
    traj = _walk(small_random_mdp, 5, 0)
    one = delta_one_step(st, traj[0])
    assert abs(delta_multi_step(st, traj, 0) - one) <= 1e-12
    assert abs(delta_trace(st, traj, 0.0, 4) - one) <= 1e-12


def test_two_step_worked_example():
    mdp = make_tabular_mdp(3, 2, np.full((3, 2, 3), 1 / 3), np.zeros((3, 2)), gamma=0.5)
    st = tabular_state(mdp, [0.0, 0.0, 4.0], uniform(3, 2), 1.0, 0.0)
    seg = [Transition(0, 0, 0.0, 1), Transition(1, 1, 0.0, 2)]
    out = delta_multi_step(st, seg, 1)
    assert out == pytest.approx(1.5 * math.log(2) + 1, abs=1e-9)
    assert round(out, 6) == 2.039721


def test_three_step_geometric_sum():
    mdp = make_tabular_mdp(4, 1, np.full((4, 1, 4), 0.25), np.zeros((4, 1)), gamma=0.5)
    st = tabular_state(mdp, [5.0, 5.0, 5.0, 0.0], [[1.0]] * 4, 0.0, 0.0)
    seg = [Transition(0, 0, 1.0, 1), Transition(1, 0, 1.0, 2), Transition(2, 0, 1.0, 3)]
    assert delta_multi_step(st, seg, 2) == pytest.approx(1.75, abs=1e-15)
    with pytest.raises(SegmentTooShort):
        delta_multi_step(st, seg, 3)


def test_trace_weights_and_worked_example():
    assert np.allclose(trace_weights(0.5, 3), np.array([8, 4, 2, 1]) / 15)
    gamma = 0.5
    mdp = make_tabular_mdp(5, 1, np.full((5, 1, 5), 0.2), np.zeros((5, 1)), gamma=gamma)
    st = tabular_state(mdp, np.zeros(5), [[1.0]] * 5, 0.0, 0.0)
    # reward gamma^-t makes the T-step delta equal T + 1
    traj = [Transition(t, 0, gamma ** -t, t + 1) for t in range(4)]
    assert [delta_multi_step(st, traj, T) for T in range(4)] == pytest.approx([1, 2, 3, 4])
    assert delta_trace(st, traj, 0.5, 3) == pytest.approx(26 / 15, abs=1e-9)


def test_trace_of_equal_deltas_is_that_delta():
    mdp = make_tabular_mdp(5, 1, np.full((5, 1, 5), 0.2), np.zeros((5, 1)), gamma=0.5)
    st = tabular_state(mdp, np.zeros(5), [[1.0]] * 5, 0.0, 0.0)
    traj = [Transition(0, 0, 2.0 if t == 0 else 0.0, t + 1) for t in range(4)]
    assert delta_trace(st, traj, 0.7, 3) == pytest.approx(2.0, abs=1e-12)


def test_trace_argument_errors(small_random_mdp):
    V, pi = random_tables(small_random_mdp, 22)
    st = tabular_state(small_random_mdp, V, pi, 0.3, 0.5)
    traj = _walk(small_random_mdp, 3, 1)
    with pytest.raises(TrajectoryTooShort):
        delta_trace(st, traj, 0.5, 3)
    with pytest.raises(ZetaOutOfRange):
        delta_trace(st, traj, 1.0, 2)


def test_multi_step_objective_zero_horizon_equals_one_step(small_random_mdp, rng):
    V, pi = random_tables(small_random_mdp, 23)
    rho = rng.normal(size=18)
    st = tabular_state(small_random_mdp, V, pi, 0.3, 0.5, rho=rho)
    traj = _walk(small_random_mdp, 30, 2)
    seg_batch = Batch.from_segments([[t] for t in traj])
    one_batch = Batch.from_transitions(traj)
    assert abs(saddle_objective_eta(st, seg_batch) - saddle_objective_eta(st, one_batch)) <= 1e-12
