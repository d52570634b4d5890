"""Prox-mappings (Euclidean and KL) and stepsize schedules for stochastic mirror descent."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadIteration,
    DivergedInnerSolve,
    NotADistribution,
    ShapeMismatch,
    ZeroEntry,
)

DIVERGENCES = ("euclidean", "kl_simplex", "kl_penalized")
DECAYS = ("inverse", "constant")


def prox_euclidean(z, g, step):
    """``argmin_w <w, step * g> + ||w - z||^2 / 2 = z - step * g``."""
    z = np.asarray(z, dtype=float)
    g = np.asarray(g, dtype=float)
    if z.shape != g.shape:
        raise ShapeMismatch(f"parameter shape {z.shape} != gradient shape {g.shape}")
    if not step > 0:
        raise ValueError("step must be > 0")
    return z - step * g


def prox_kl_simplex(z, g, step):
    """Multiplicative-weights step ``w_i ~ z_i exp(-step g_i)`` on the simplex (rows if 2-D)."""
    z = np.asarray(z, dtype=float)
    g = np.asarray(g, dtype=float)
    if z.shape != g.shape:
        raise ShapeMismatch(f"distribution shape {z.shape} != gradient shape {g.shape}")
    if np.any(z < 0) or np.any(np.abs(z.sum(axis=-1) - 1.0) > 1e-9):
        raise NotADistribution("z must be a probability vector")
    if np.any(z == 0):
        raise ZeroEntry("z must be strictly positive")
    logits = np.log(z) - step * g
    logits -= logits.max(axis=-1, keepdims=True)
    # floor at the smallest normal float so extreme steps cannot underflow an entry to zero
    w = np.maximum(np.exp(logits), np.finfo(float).tiny)
    return w / w.sum(axis=-1, keepdims=True)


@dataclass
class KlProxResult:
    params: np.ndarray
    kl: float
    objective: float
    iterations: int


def _discrete_pieces(pi, states):
    phi = pi.features(states)
    A = pi.n_actions

    def stats(params):
        z = phi @ params.reshape(A, -1).T
        z = z - z.max(axis=1, keepdims=True)
        lp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return lp

    def vjp(params, vec):
        # gradient of mean_s <pi_s, vec_s> w.r.t. the logit weights
        p = np.exp(stats(params))
        jv = p * (vec - np.sum(p * vec, axis=1, keepdims=True))
        return (jv[:, :, None] * phi[:, None, :]).mean(axis=0).reshape(-1)

    def fisher(params):
        p = np.exp(stats(params))
        J = np.einsum("sa,ab->sab", p, np.eye(A)) - np.einsum("sa,sb->sab", p, p)
        F = np.einsum("sab,si,sj->aibj", J, phi, phi) / phi.shape[0]
        n = A * phi.shape[1]
        return F.reshape(n, n)

    return stats, vjp, fisher


def prox_kl_penalized(pi, g, step, states, inner_iters=50):
    """Approximately solve ``min_w <lin(w), g> + KL_hat(pi_w || pi_old) / step``.

    ``KL_hat`` is the divergence averaged over ``states``. ``g`` is either a
    gradient in parameter space (``lin(w) = w``) or, for discrete policies, an
    ``(len(states), n_actions)`` cost table (``lin(w) = pi_w(.|s)`` averaged over
    states). The inner solve takes damped Fisher-preconditioned steps starting
    from the old parameters; ``pi`` itself is not modified.
    """
    if inner_iters < 1:
        raise ValueError("inner_iters must be >= 1")
    if not step > 0:
        raise ValueError("step must be > 0")
    g = np.asarray(g, dtype=float)
    states = np.asarray(states)
    w0 = pi.params.copy()

    if pi.kind == "log_policy_discrete":
        stats, vjp, fisher = _discrete_pieces(pi, states)
        lp_old = stats(w0)
        cost_mode = g.ndim == 2
        if cost_mode and g.shape != lp_old.shape:
            raise ShapeMismatch(f"cost table shape {g.shape} != {lp_old.shape}")
        if not cost_mode and g.shape != w0.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {w0.shape}")

        def evaluate(w):
            lp = stats(w)
            p = np.exp(lp)
            kl = float(np.mean(np.sum(p * (lp - lp_old), axis=1)))
            if cost_mode:
                lin = float(np.mean(np.sum(p * g, axis=1)))
                lin_grad = vjp(w, g)
            else:
                lin = float(w @ g)
                lin_grad = g
            kl_grad = vjp(w, lp - lp_old)
            return lin + kl / step, step * lin_grad + kl_grad, kl

    elif pi.kind == "log_policy_gaussian":
        if g.shape != w0.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {w0.shape}")
        d = pi.action_dim
        phi = pi.features(states)
        probe = pi.copy()
        mu_old = probe.mean(states)
        _, ls_old, _ = probe._gaussian_parts()
        var_old = np.exp(2 * ls_old)
        gram = phi.T @ phi / phi.shape[0]

        def evaluate(w):
            probe.params = w
            W, ls, inside = probe._gaussian_parts()
            mu = phi @ W.T
            var = np.exp(2 * ls)
            diff = mu - mu_old
            kl = float(np.mean(np.sum(ls_old - ls + (var + diff ** 2) / (2 * var_old) - 0.5, axis=1)))
            g_w = ((diff / var_old)[:, :, None] * phi[:, None, :]).mean(axis=0).reshape(-1)
            g_s = (var / var_old - 1.0) * inside
            return float(w @ g) + kl / step, step * g + np.concatenate([g_w, g_s]), kl

        def fisher(w):
            probe.params = w
            _, ls, _ = probe._gaussian_parts()
            var = np.exp(2 * ls)
            blocks = [gram / var[k] for k in range(d)] + [np.diag(np.full(d, 2.0))]
            n = sum(b.shape[0] for b in blocks)
            F = np.zeros((n, n))
            i = 0
            for b in blocks:
                F[i:i + b.shape[0], i:i + b.shape[0]] = b
                i += b.shape[0]
            return F
    else:
        raise ValueError("prox_kl_penalized needs a policy function")

    w = w0.copy()
    val, grad, kl = evaluate(w)
    it = 0
    for it in range(1, inner_iters + 1):
        direction = np.linalg.lstsq(fisher(w), grad, rcond=1e-12)[0]
        if not np.any(direction):
            break
        lr, accepted = 1.0, False
        for _ in range(40):
            cand = w - lr * direction
            cval, cgrad, ckl = evaluate(cand)
            if cval <= val:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            if np.linalg.norm(grad) <= 1e-10 * max(1.0, np.linalg.norm(w)):
                break
            raise DivergedInnerSolve("KL prox objective increased along every damped step")
        done = val - cval <= 1e-15 * max(1.0, abs(val))
        w, val, grad, kl = cand, cval, cgrad, ckl
        if done:
            break
    return KlProxResult(w, kl, val, it)


def stepsize(j, zeta0, decay="inverse"):
    """``zeta0 / j`` (inverse decay) or ``zeta0`` (constant)."""
    if j < 1:
        raise BadIteration(f"iteration index must be >= 1, got {j}")
    if not zeta0 > 0:
        raise ValueError("zeta0 must be > 0")
    if decay == "inverse":
        return zeta0 / j
    if decay == "constant":
        return zeta0
    raise ValueError(f"unknown decay law {decay!r}")
