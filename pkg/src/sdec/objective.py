"""Consistency losses, the eta-weighted saddle objective, dual fitting and gradient estimators.

A :class:`Batch` holds ``n`` sub-trajectories of length ``L`` (``L == 1`` for
plain transitions) with importance weights summing to one. Every estimator is
a weighted mean over the batch, so a batch built by :func:`enumerate_batch`
turns the estimators into exact expectations.

For a segment ``(s_0, a_0, r_0, ..., a_{L-1}, r_{L-1}, s_L)`` the temporal
difference used throughout is::

    delta = sum_t alpha_t * r_t + sum_k beta_k * V(s_k) - lam * sum_t alpha_t * log pi(a_t | s_t)

with ``alpha_t = gamma^t`` and ``beta_L = gamma^L`` for the L-step condition,
and the renormalized geometric mixture of those coefficients for traces.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptyBatch,
    SegmentTooShort,
    ShapeMismatch,
    SingularSystem,
    TrajectoryTooShort,
    ZeroPolicyProbability,
    ZetaOutOfRange,
)


@dataclass
class SaddleState:
    """Snapshot of the primal (V, pi) and dual (rho) functions with their weights.

    ``trace_decay > 0`` makes batches of length ``L > 1`` use the eligibility
    trace mixture over horizons ``0..L-1``; otherwise they use the ``L``-step
    condition.
    """

    V: object
    pi: object
    rho: object
    lam: float
    eta: float
    gamma: float
    trace_decay: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if not 0.0 <= self.trace_decay < 1.0:
            raise ZetaOutOfRange(f"trace decay must lie in [0, 1), got {self.trace_decay}")


@dataclass
class Batch:
    states: np.ndarray  # (n, L+1) or (n, L+1, state_dim)
    actions: np.ndarray  # (n, L) or (n, L, action_dim)
    rewards: np.ndarray  # (n, L)
    weights: np.ndarray  # (n,), sums to one

    def __len__(self):
        return self.rewards.shape[0]

    @property
    def length(self):
        return self.rewards.shape[1]

    @classmethod
    def from_segments(cls, segments, weights=None):
        """Stack equal-length sequences of transitions."""
        segments = [list(seg) for seg in segments]
        if not segments:
            raise EmptyBatch("batch is empty")
        L = len(segments[0])
        if L == 0 or any(len(seg) != L for seg in segments):
            raise ShapeMismatch("segments must be non-empty and of equal length")
        states = np.array([[t.s for t in seg] + [seg[-1].s_next] for seg in segments])
        actions = np.array([[t.a for t in seg] for seg in segments])
        rewards = np.array([[t.r for t in seg] for seg in segments], dtype=float)
        n = len(segments)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)
        return cls(states, actions, rewards, w)

    @classmethod
    def from_transitions(cls, transitions, weights=None):
        return cls.from_segments([[t] for t in transitions], weights)

    @classmethod
    def from_arrays(cls, s, a, r, s_next, weights=None):
        s, a, s_next = np.asarray(s), np.asarray(a), np.asarray(s_next)
        r = np.asarray(r, dtype=float)
        n = r.shape[0]
        if n == 0:
            raise EmptyBatch("batch is empty")
        states = np.stack([s, s_next], axis=1)
        w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, float) / np.sum(weights)
        return cls(states, a[:, None], r[:, None], w)


def enumerate_batch(mdp, sa_weights=None):
    """All (s, a, s') with P > 0, weighted by ``sa_weights[s, a] * P(s'|s, a)``.

    The default ``sa_weights`` is uniform over state-action pairs. Rewards are
    the expected rewards ``R(s, a)``.
    """
    S, A = mdp.n_states, mdp.n_actions
    w_sa = np.full((S, A), 1.0 / (S * A)) if sa_weights is None else np.asarray(sa_weights, float)
    if w_sa.shape != (S, A):
        raise ShapeMismatch(f"sa_weights shape {w_sa.shape} != {(S, A)}")
    s, a, s2 = np.nonzero(mdp.transition * (w_sa[:, :, None] > 0))
    w = w_sa[s, a] * mdp.transition[s, a, s2]
    return Batch.from_arrays(s, a, mdp.reward[s, a], s2, weights=w)


def horizon_coefficients(L, gamma, trace_decay=0.0):
    """Reward coefficients ``alpha`` (length L) and bootstrap coefficients ``beta`` (length L+1)."""
    disc = gamma ** np.arange(L + 1)
    if trace_decay > 0.0 and L > 1:
        w = (1.0 - trace_decay) * trace_decay ** np.arange(L)
        w = w / w.sum()
        alpha = disc[:L] * np.cumsum(w[::-1])[::-1]
        beta = np.concatenate([[0.0], w * disc[1:]])
    else:
        alpha = disc[:L].copy()
        beta = np.zeros(L + 1)
        beta[L] = disc[L]
    return alpha, beta


def trace_weights(zeta, T_max):
    """Geometric weights ``(1 - zeta) zeta^T`` for T = 0..T_max, renormalized to sum to one."""
    if not 0.0 <= zeta < 1.0:
        raise ZetaOutOfRange(f"zeta must lie in [0, 1), got {zeta}")
    w = (1.0 - zeta) * zeta ** np.arange(T_max + 1)
    return w / w.sum()


@dataclass
class _Evaluated:
    delta: np.ndarray
    v0: np.ndarray
    rho: np.ndarray | None
    dV0: np.ndarray
    dV_boot: np.ndarray
    dlogpi: np.ndarray | None
    dual_phi: np.ndarray | None
    weights: np.ndarray


def _flat(x, n, m):
    """Merge the first two axes of an (n, m, ...) array."""
    return x.reshape((n * m,) + x.shape[2:])


def _evaluate(state, batch, with_dual=True):
    n, L = len(batch), batch.length
    if n == 0:
        raise EmptyBatch("batch is empty")
    alpha, beta = horizon_coefficients(L, state.gamma, state.trace_decay)
    vals, vgrad = state.V.value_batch(_flat(batch.states, n, L + 1))
    vals = vals.reshape(n, L + 1)
    vgrad = vgrad.reshape(n, L + 1, -1)
    boot = vals @ beta
    dV_boot = np.einsum("k,nkp->np", beta, vgrad)
    delta = batch.rewards @ alpha + boot
    dlogpi = None
    if state.lam != 0.0:
        logp, lgrad = state.pi.log_prob_batch(_flat(batch.states[:, :L], n, L), _flat(batch.actions, n, L))
        if not np.all(np.isfinite(logp)):
            raise ZeroPolicyProbability("pi(a|s) = 0 for a sampled pair; log pi undefined")
        logp = logp.reshape(n, L)
        delta = delta - state.lam * (logp @ alpha)
        dlogpi = np.einsum("t,ntp->np", alpha, lgrad.reshape(n, L, -1))
    rho = dual_phi = None
    if with_dual and state.rho is not None:
        acts = batch.actions.reshape(n, -1) if state.rho.steps > 1 else batch.actions[:, 0]
        if state.rho.steps not in (1, L):
            raise ShapeMismatch(f"dual expects {state.rho.steps}-step action sequences, batch has {L}")
        rho, dual_phi = state.rho.dual_batch(batch.states[:, 0], acts)
    return _Evaluated(delta, vals[:, 0], rho, vgrad[:, 0], dV_boot, dlogpi, dual_phi, batch.weights)


def batch_deltas(state, batch):
    return _evaluate(state, batch, with_dual=False).delta


def delta_one_step(state, t):
    """``r + gamma V(s') - lam log pi(a|s)`` for one transition."""
    b = Batch.from_transitions([t])
    return float(_evaluate(_one_step_view(state), b, with_dual=False).delta[0])


def _one_step_view(state):
    if state.trace_decay == 0.0:
        return state
    return SaddleState(state.V, state.pi, state.rho, state.lam, state.eta, state.gamma, 0.0)


def delta_multi_step(state, segment, T):
    """``sum_{t<=T} gamma^t (r_t - lam log pi(a_t|s_t)) + gamma^{T+1} V(s_{T+1})``."""
    segment = list(segment)
    if T < 0 or len(segment) < T + 1:
        raise SegmentTooShort(f"need {T + 1} transitions, segment has {len(segment)}")
    b = Batch.from_segments([segment[: T + 1]])
    return float(_evaluate(_one_step_view(state), b, with_dual=False).delta[0])


def delta_trace(state, trajectory, zeta, T_max):
    """Renormalized truncated mixture ``sum_T w_T delta_T`` with ``w_T ~ (1 - zeta) zeta^T``."""
    trace_weights(zeta, T_max)
    traj = list(trajectory)
    if len(traj) < T_max + 1:
        raise TrajectoryTooShort(f"need {T_max + 1} transitions, trajectory has {len(traj)}")
    view = SaddleState(state.V, state.pi, state.rho, state.lam, state.eta, state.gamma, zeta)
    if zeta == 0.0:
        return delta_multi_step(view, traj, 0)
    b = Batch.from_segments([traj[: T_max + 1]])
    return float(_evaluate(view, b, with_dual=False).delta[0])


# objectives ---------------------------------------------------------------

def _terms(ev):
    first = float(np.sum(ev.weights * (ev.delta - ev.v0) ** 2))
    second = float(np.sum(ev.weights * (ev.delta - ev.rho) ** 2)) if ev.rho is not None else 0.0
    return first, second


def objective_terms(state, batch):
    """Weighted means of ``(delta - V(s))^2`` and ``(delta - rho(s, a))^2``."""
    return _terms(_evaluate(state, batch))


def saddle_objective_eta(state, batch):
    """``mean[(delta - V(s))^2] - eta * mean[(delta - rho(s, a))^2]``."""
    first, second = objective_terms(state, batch)
    return first - state.eta * second


def dual_loss(state, batch):
    return objective_terms(state, batch)[1]


def fit_dual(state, batch, ridge=1e-8):
    """Refit the linear dual to the batch by weighted least squares.

    Tabular (one-hot) duals are solved cell by cell, giving weighted means of
    delta; cells absent from the batch keep their current value. Other linear
    duals solve the ridge-regularized normal equations.
    Returns ``(params, dual_loss)``; ``state.rho`` is left untouched.
    """
    return _fit(state.rho, _evaluate(state, batch), ridge)


def _fit(rho, ev, ridge):
    phi, w, d = ev.dual_phi, ev.weights, ev.delta
    params = rho.params.copy()
    if rho.features.kind == "tabular_onehot":
        cell = np.argmax(phi, axis=1)
        num = np.bincount(cell, w * d, minlength=params.size)
        den = np.bincount(cell, w, minlength=params.size)
        seen = den > 0
        params[seen] = num[seen] / den[seen]
    else:
        A = (phi * w[:, None]).T @ phi
        b = phi.T @ (w * d)
        if ridge > 0:
            A[np.diag_indices_from(A)] += ridge
        try:
            params = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise SingularSystem("dual normal equations are singular; enable the ridge") from None
        if ridge == 0 and np.linalg.cond(A) > 1e14:
            raise SingularSystem("dual normal equations are numerically singular")
    resid = d - phi @ params
    return params, float(np.sum(w * resid * resid))


def fit_dual_sgd(state, batch, iters=100, lr=0.5):
    """Gradient-descent fallback for the dual subproblem (fixed iteration count)."""
    ev = _evaluate(state, batch)
    phi, w, d = ev.dual_phi, ev.weights, ev.delta
    params = state.rho.params.copy()
    for _ in range(iters):
        resid = phi @ params - d
        params -= lr * 2.0 * phi.T @ (w * resid)
    resid = d - phi @ params
    return params, float(np.sum(w * resid * resid))


@dataclass
class PrimalGradients:
    grad_V: np.ndarray
    grad_pi: np.ndarray | None
    first_term: float
    second_term: float
    objective: float


def primal_gradients(state, batch):
    """Objective terms and both primal gradient estimators from one evaluation."""
    return _gradients(state, _evaluate(state, batch))


def fit_dual_and_gradients(state, batch, ridge=1e-8):
    """Fit the dual, then take the primal gradients at the fitted dual, sharing one evaluation.

    Equivalent to ``fit_dual`` followed by ``primal_gradients`` with the new dual
    parameters. Returns ``(dual_params, dual_loss, gradients)``.
    """
    ev = _evaluate(state, batch)
    params, loss = _fit(state.rho, ev, ridge)
    ev.rho = ev.dual_phi @ params
    return params, loss, _gradients(state, ev)


def _gradients(state, ev):
    w, eta = ev.weights, state.eta
    rho = ev.rho if ev.rho is not None else ev.delta
    u = ev.delta - ev.v0
    e = ev.delta - rho
    gV = 2.0 * ((w * u) @ (ev.dV_boot - ev.dV0)) - 2.0 * eta * ((w * e) @ ev.dV_boot)
    gpi = None
    if ev.dlogpi is not None:
        adv = (1.0 - eta) * ev.delta + eta * rho - ev.v0
        gpi = -2.0 * state.lam * ((w * adv) @ ev.dlogpi)
    first, second = _terms(ev)
    return PrimalGradients(gV, gpi, first, second, first - eta * second)


def grad_V_estimator(state, batch):
    """Weighted mean of ``2 (delta - V(s)) (bootstrap grad - grad V(s)) - 2 eta (delta - rho) bootstrap grad``.

    For one-step batches the bootstrap gradient is ``gamma * grad V(s')``.
    """
    return primal_gradients(state, batch).grad_V


def grad_pi_estimator(state, batch):
    """Weighted mean of ``-2 lam ((1 - eta) delta + eta rho - V(s)) grad log pi``."""
    g = primal_gradients(state, batch).grad_pi
    if g is None:
        raise ValueError("policy gradient is undefined for lambda = 0")
    return g


def dump_deltas(state, batch, path):
    """Write per-sample delta, V(s), rho and weight as CSV for debugging."""
    ev = _evaluate(state, batch)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["index", "delta", "v_s", "rho", "weight"])
        for i in range(len(ev.delta)):
            rho = ev.rho[i] if ev.rho is not None else float("nan")
            wr.writerow([i, repr(float(ev.delta[i])), repr(float(ev.v0[i])), repr(float(rho)),
                         repr(float(ev.weights[i]))])


# exact tabular losses ------------------------------------------------------

def _tables(mdp, V, pi, weights):
    V = np.asarray(V, dtype=float)
    pi = np.asarray(pi, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if V.shape != (S,) or pi.shape != (S, A):
        raise ShapeMismatch("value/policy tables do not match the MDP")
    w = np.full((S, A), 1.0 / (S * A)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (S, A):
        raise ShapeMismatch("weights must be (n_states, n_actions)")
    with np.errstate(divide="ignore"):
        logpi = np.log(pi)
    if np.any(~np.isfinite(logpi) & (w > 0)):
        raise ZeroPolicyProbability("log pi undefined where the weighting is positive")
    return V, np.where(np.isfinite(logpi), logpi, 0.0), w


def consistency_loss_exact(mdp, V, pi, lam, weights=None):
    """``E_{s,a}[(R + gamma E[V(s')|s,a] - lam log pi - V(s))^2]`` by enumeration."""
    V, logpi, w = _tables(mdp, V, pi, weights)
    res = mdp.reward + mdp.gamma * mdp.expected_next(V) - lam * logpi - V[:, None]
    return float(np.sum(w * res * res))


def surrogate_loss_exact(mdp, V, pi, lam, weights=None):
    """``E_{s,a,s'}[(R + gamma V(s') - lam log pi - V(s))^2]`` by enumeration."""
    V, logpi, w = _tables(mdp, V, pi, weights)
    base = mdp.reward - lam * logpi - V[:, None]
    sq = (base[:, :, None] + mdp.gamma * V[None, None, :]) ** 2
    return float(np.sum(w * np.sum(mdp.transition * sq, axis=2)))


@dataclass
class VarianceIdentity:
    f: float
    f_tilde: float
    variance_term: float
    defect: float
    dual_max_value: float
    dual_defect: float


def variance_identity_check(mdp, V, pi, lam, weights=None):
    """Check ``f~ = f + E_{s,a} Var[gamma V(s') | s, a]`` and the closed-form dual maximizer.

    ``dual_max_value`` is ``-E[(delta - rho*)^2]`` at
    ``rho* = R + gamma E[V(s')] - lam log pi``, which should equal ``-variance_term``.
    """
    Vt, logpi, w = _tables(mdp, V, pi, weights)
    f = consistency_loss_exact(mdp, V, pi, lam, weights)
    ft = surrogate_loss_exact(mdp, V, pi, lam, weights)
    gV = mdp.gamma * Vt
    mean = mdp.transition @ gV
    var = float(np.sum(w * np.sum(mdp.transition * (gV[None, None, :] - mean[:, :, None]) ** 2, axis=2)))
    rho_star = mdp.reward + mean - lam * logpi
    delta = mdp.reward[:, :, None] + gV[None, None, :] - lam * logpi[:, :, None]
    dual_val = -float(np.sum(w * np.sum(mdp.transition * (delta - rho_star[:, :, None]) ** 2, axis=2)))
    return VarianceIdentity(f, ft, var, abs(ft - f - var), dual_val, abs(dual_val + var))
