"""Exact tabular Bellman operators, fixed points and soft-optimal policies."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    GammaOutOfRange,
    MaxIterExceeded,
    NonPositiveLambda,
    ShapeMismatch,
    ZeroPolicyProbability,
)


def _values(mdp, V):
    V = np.asarray(V, dtype=float)
    if V.shape != (mdp.n_states,):
        raise ShapeMismatch(f"value table shape {V.shape} != ({mdp.n_states},)")
    return V


def _check_lambda(lam):
    if not lam > 0:
        raise NonPositiveLambda(f"lambda must be > 0, got {lam}")


def logsumexp_rows(x, scale):
    """``scale * log sum exp(x / scale)`` along the last axis with the max shifted out."""
    m = np.max(x, axis=-1, keepdims=True)
    return (m + scale * np.log(np.sum(np.exp((x - m) / scale), axis=-1, keepdims=True)))[..., 0]


def softmax_rows(x, scale):
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp((x - m) / scale)
    return e / e.sum(axis=-1, keepdims=True)


def q_table(mdp, V):
    return mdp.q_values(_values(mdp, V))


def bellman_apply(mdp, V):
    """Hard-max Bellman optimality operator."""
    return q_table(mdp, V).max(axis=1)


def smoothed_bellman_apply(mdp, V, lam):
    """Entropy-smoothed operator ``lam * log sum_a exp(Q(s, a) / lam)``."""
    _check_lambda(lam)
    return logsumexp_rows(q_table(mdp, V), lam)


@dataclass
class FixedPoint:
    values: np.ndarray
    iterations: int
    residual: float


def solve_fixed_point(mdp, lam, tol=1e-10, max_iter=1_000_000, V0=None):
    """Plain fixed-point iteration of the smoothed (``lam > 0``) or hard (``lam == 0``) operator.

    Stops once the sup-norm residual of the returned table is ``<= tol``.
    """
    if not tol > 0:
        raise ValueError("tol must be > 0")
    if lam < 0:
        raise NonPositiveLambda(f"lambda must be >= 0, got {lam}")
    op = bellman_apply if lam == 0 else (lambda m, v: smoothed_bellman_apply(m, v, lam))
    V = np.zeros(mdp.n_states) if V0 is None else _values(mdp, V0).copy()
    residual = np.inf
    for it in range(1, max_iter + 1):
        TV = op(mdp, V)
        residual = float(np.max(np.abs(TV - V)))
        if residual <= tol:
            return FixedPoint(V, it, residual)
        V = TV
    raise MaxIterExceeded(f"residual {residual:.3e} > tol {tol:.1e} after {max_iter} iterations")


def smoothed_optimal_policy(mdp, V, lam):
    """Softmax of ``Q(s, .) / lam``: the maximizer of the entropy-regularized backup."""
    _check_lambda(lam)
    return softmax_rows(q_table(mdp, V), lam)


def greedy_policy(mdp, V):
    """Per-state argmax of Q with ties broken towards the lowest action index."""
    return np.argmax(q_table(mdp, V), axis=1)


def consistency_residual(mdp, V, pi, lam):
    """Per-(s, a) residual ``R + gamma E[V(s')] - lam log pi(a|s) - V(s)`` and its max-abs."""
    _check_lambda(lam)
    V = _values(mdp, V)
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise ShapeMismatch(f"policy shape {pi.shape} != {(mdp.n_states, mdp.n_actions)}")
    if np.any(pi <= 0):
        raise ZeroPolicyProbability("policy has zero-probability actions; log pi undefined")
    res = mdp.q_values(V) - lam * np.log(pi) - V[:, None]
    return res, float(np.max(np.abs(res)))


def smoothing_bias_bound(gamma, lam, max_entropy):
    """Upper bound ``gamma * lam * max_entropy / (1 - gamma)`` on ||V* - V~*||_inf."""
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"gamma must lie strictly inside (0, 1), got {gamma}")
    if lam < 0:
        raise NonPositiveLambda(f"lambda must be >= 0, got {lam}")
    return gamma * lam * max_entropy / (1.0 - gamma)


def policy_evaluation(mdp, probs):
    """Exact V^pi from the linear system ``(I - gamma P^pi) V = R^pi``."""
    probs = np.asarray(probs, dtype=float)
    P_pi = mdp.induced_chain(probs)
    R_pi = np.sum(probs * mdp.reward, axis=1)
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, R_pi)


def deterministic_policy_table(actions, n_actions):
    probs = np.zeros((len(actions), n_actions))
    probs[np.arange(len(actions)), actions] = 1.0
    return probs
