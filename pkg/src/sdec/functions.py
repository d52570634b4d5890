"""Parametric value, log-policy and dual families with hand-derived gradients.

Every family is linear in a fixed feature map, composed with a softmax head
(discrete policies) or a diagonal Gaussian head (continuous policies). All
evaluators are batched: they take ``n`` inputs and return the ``n`` outputs
together with the ``(n, n_params)`` Jacobian.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import ActionOutOfBounds, DimensionMismatch, KindMismatch

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)

INPUT_TRANSFORMS = ("identity", "angle_velocity")


def _transform_input(x, transform):
    if transform == "identity":
        return x
    # (theta, omega, rest...) -> (cos theta, sin theta, omega, rest...)
    return np.column_stack([np.cos(x[:, 0]), np.sin(x[:, 0]), x[:, 1:]])


@dataclass
class FeatureMap:
    """Fixed feature map ``phi``.

    ``tabular_onehot`` maps integer cells ``0..size-1`` to indicator vectors,
    ``linear`` maps vectors of length ``size`` to ``[x, 1]`` and ``rbf_random``
    maps vectors to Gaussian bumps around random centers.
    """

    kind: str
    size: int
    centers: np.ndarray | None = None
    bandwidth: float | None = None
    seed: int | None = None
    low: tuple | None = None
    high: tuple | None = None
    transform: str = "identity"

    @property
    def dim(self):
        if self.kind == "tabular_onehot":
            return self.size
        if self.kind == "linear":
            return self.size + 1
        return self.centers.shape[0]

    @property
    def input_dim(self):
        """Dimension of raw vector inputs before ``transform``."""
        if self.kind == "tabular_onehot":
            return None
        if self.transform == "angle_velocity":
            return self.size - 1
        return self.size

    def __call__(self, x):
        return self.transform_batch(x)

    def transform_batch(self, x):
        if self.kind == "tabular_onehot":
            idx = np.asarray(x, dtype=int).reshape(-1)
            if np.any((idx < 0) | (idx >= self.size)):
                raise DimensionMismatch(f"cell index out of range [0, {self.size})")
            out = np.zeros((idx.shape[0], self.size))
            out[np.arange(idx.shape[0]), idx] = 1.0
            return out
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.input_dim:
            raise DimensionMismatch(f"input dimension {x.shape[1]} != {self.input_dim}")
        x = _transform_input(x, self.transform)
        if self.kind == "linear":
            return np.column_stack([x, np.ones(x.shape[0])])
        sq = (
            np.sum(x * x, axis=1)[:, None]
            - 2.0 * x @ self.centers.T
            + np.sum(self.centers * self.centers, axis=1)[None, :]
        )
        np.maximum(sq, 0.0, out=sq)
        return np.exp(-sq / (2.0 * self.bandwidth ** 2))

    def to_dict(self):
        d = {"kind": self.kind, "size": self.size, "transform": self.transform}
        if self.kind == "rbf_random":
            d.update(
                n_centers=int(self.centers.shape[0]), seed=self.seed, low=list(self.low),
                high=list(self.high), bandwidth=self.bandwidth,
            )
        return d

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "tabular_onehot":
            return tabular_features(d["size"])
        if d["kind"] == "linear":
            return FeatureMap("linear", d["size"], transform=d.get("transform", "identity"))
        return rbf_random_features(
            d["n_centers"], d["low"], d["high"], seed=d["seed"], bandwidth=d["bandwidth"],
            transform=d.get("transform", "identity"),
        )


def tabular_features(n):
    return FeatureMap("tabular_onehot", int(n))


def linear_features(input_dim, transform="identity"):
    size = input_dim + 1 if transform == "angle_velocity" else input_dim
    return FeatureMap("linear", int(size), transform=transform)


def median_bandwidth(sample):
    """Median pairwise Euclidean distance of a sample (the median heuristic)."""
    sample = np.asarray(sample, dtype=float)
    if sample.ndim == 1:
        sample = sample[:, None]
    d = pdist(sample)
    d = d[d > 0]
    if d.size == 0:
        return 1.0
    return float(np.median(d))


def rbf_random_features(n_centers, low, high, seed=0, bandwidth=None, sample=None,
                        transform="identity"):
    """RBF features with centers drawn uniformly in the box ``[low, high]`` of transformed inputs.

    The bandwidth is taken from ``bandwidth`` if given, otherwise the median
    pairwise distance of ``sample`` (transformed), otherwise of the centers.
    """
    low = np.asarray(low, dtype=float).reshape(-1)
    high = np.asarray(high, dtype=float).reshape(-1)
    if low.shape != high.shape:
        raise DimensionMismatch("low and high must have the same length")
    rng = np.random.default_rng(seed)
    centers = rng.uniform(low, high, size=(int(n_centers), low.shape[0]))
    if bandwidth is None:
        if sample is not None:
            s = np.asarray(sample, dtype=float)
            if s.ndim == 1:
                s = s[:, None]
            bandwidth = median_bandwidth(_transform_input(s, transform))
        else:
            bandwidth = median_bandwidth(centers)
    return FeatureMap(
        "rbf_random", int(low.shape[0]), centers=centers, bandwidth=float(bandwidth), seed=seed,
        low=tuple(low.tolist()), high=tuple(high.tolist()), transform=transform,
    )


def rbf_features(state, fmap):
    """Single-input RBF feature vector ``exp(-||s - c_i||^2 / (2 h^2))``."""
    if fmap.kind != "rbf_random":
        raise KindMismatch(f"expected an rbf_random map, got {fmap.kind}")
    state = np.asarray(state, dtype=float).reshape(-1)
    if state.shape[0] != fmap.input_dim:
        raise DimensionMismatch(f"state dimension {state.shape[0]} != {fmap.input_dim}")
    return fmap.transform_batch(state[None, :])[0]


KINDS = ("value", "log_policy_discrete", "log_policy_gaussian", "dual")


class ParamFunction:
    """A parametric family with a flat parameter vector.

    ``value``: ``V(s) = <w, phi(s)>``.
    ``log_policy_discrete``: logits ``W phi(s)`` with ``W`` of shape (n_actions, m).
    ``log_policy_gaussian``: mean ``W phi(s)``, ``W`` of shape (action_dim, m),
    followed by ``action_dim`` log standard deviations clamped to [-5, 2].
    ``dual``: ``rho(s, a_0..a_{k-1})``; linear in a joint feature vector.
    For tabular features the joint cell is ``s * n_actions**k + code(a)``; for
    discrete actions on vector features the state features are placed in the
    block of the action-sequence code; for continuous actions the feature map
    is applied to ``[s, a_0, ..., a_{k-1}]``.
    """

    def __init__(self, kind, features, params=None, n_actions=None, action_dim=None,
                 action_bounds=None, steps=1, init_log_std=0.0):
        if kind not in KINDS:
            raise KindMismatch(f"unknown kind {kind!r}")
        self.kind = kind
        self.features = features
        self.n_actions = n_actions
        self.action_dim = action_dim
        self.action_bounds = action_bounds
        self.steps = int(steps)
        if kind == "log_policy_discrete" and not n_actions:
            raise KindMismatch("discrete policies need n_actions")
        if kind == "log_policy_gaussian" and not action_dim:
            raise KindMismatch("gaussian policies need action_dim")
        n = self.n_params
        if params is None:
            params = np.zeros(n)
            if kind == "log_policy_gaussian":
                params[-action_dim:] = init_log_std
        params = np.asarray(params, dtype=float).copy()
        if params.shape != (n,):
            raise DimensionMismatch(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    @property
    def n_params(self):
        m = self.features.dim
        if self.kind == "value":
            return m
        if self.kind == "log_policy_discrete":
            return self.n_actions * m
        if self.kind == "log_policy_gaussian":
            return self.action_dim * m + self.action_dim
        if self.features.kind != "tabular_onehot" and self.n_actions:
            return self.n_actions ** self.steps * m
        return m

    @property
    def discrete_actions(self):
        return self.kind == "log_policy_discrete" or (self.kind == "dual" and bool(self.n_actions))

    def copy(self):
        out = object.__new__(ParamFunction)
        out.__dict__.update(self.__dict__)
        out.params = self.params.copy()
        return out

    def _require(self, *kinds):
        if self.kind not in kinds:
            raise KindMismatch(f"operation needs kind in {kinds}, function is {self.kind!r}")

    # value -------------------------------------------------------------
    def value_batch(self, states):
        self._require("value")
        phi = self.features(states)
        return phi @ self.params, phi

    # policies ----------------------------------------------------------
    def _check_discrete_actions(self, actions):
        a = np.asarray(actions)
        if a.dtype.kind not in "iu":
            if not np.all(np.equal(np.mod(a, 1), 0)):
                raise ActionOutOfBounds("discrete actions must be integers")
            a = a.astype(int)
        if np.any((a < 0) | (a >= self.n_actions)):
            raise ActionOutOfBounds(f"action outside [0, {self.n_actions})")
        return a

    def _gaussian_parts(self):
        d, m = self.action_dim, self.features.dim
        W = self.params[: d * m].reshape(d, m)
        raw = self.params[d * m:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        inside = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        return W, log_std, inside

    def _check_continuous_actions(self, actions, width):
        a = np.asarray(actions, dtype=float)
        if a.ndim == 1:
            a = a.reshape(-1, width) if width > 1 else a[:, None]
        if a.shape[1] != width or not np.all(np.isfinite(a)):
            raise ActionOutOfBounds(f"actions must be finite with width {width}")
        if self.action_bounds is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.action_bounds)
            if np.any(a < np.tile(lo, width // lo.size)) or np.any(a > np.tile(hi, width // hi.size)):
                raise ActionOutOfBounds("action outside declared bounds")
        return a

    def logits(self, states):
        self._require("log_policy_discrete")
        phi = self.features(states)
        return phi @ self.params.reshape(self.n_actions, -1).T, phi

    def probs(self, states):
        z, _ = self.logits(states)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def log_probs_all(self, states):
        z, _ = self.logits(states)
        m = z.max(axis=1, keepdims=True)
        return z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))

    def mean(self, states):
        self._require("log_policy_gaussian")
        W, _, _ = self._gaussian_parts()
        return self.features(states) @ W.T

    def log_prob_batch(self, states, actions):
        """``log pi(a|s)`` and its Jacobian w.r.t. the parameters."""
        self._require("log_policy_discrete", "log_policy_gaussian")
        if self.kind == "log_policy_discrete":
            a = self._check_discrete_actions(actions).reshape(-1)
            z, phi = self.logits(states)
            m = z.max(axis=1, keepdims=True)
            logp_all = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
            n = phi.shape[0]
            coef = -np.exp(logp_all)
            coef[np.arange(n), a] += 1.0
            grad = (coef[:, :, None] * phi[:, None, :]).reshape(n, -1)
            return logp_all[np.arange(n), a], grad
        a = self._check_continuous_actions(actions, self.action_dim)
        W, log_std, inside = self._gaussian_parts()
        phi = self.features(states)
        mu = phi @ W.T
        std = np.exp(log_std)
        z = (a - mu) / std
        logp = np.sum(-0.5 * z * z - log_std - _HALF_LOG_2PI, axis=1)
        n = phi.shape[0]
        g_w = ((z / std)[:, :, None] * phi[:, None, :]).reshape(n, -1)
        g_s = (z * z - 1.0) * inside[None, :]
        return logp, np.hstack([g_w, g_s])

    def entropy(self, states=None):
        """Per-state entropy; closed form for the Gaussian head."""
        if self.kind == "log_policy_gaussian":
            _, log_std, _ = self._gaussian_parts()
            return float(np.sum(log_std + 0.5 * math.log(2 * math.pi * math.e)))
        lp = self.log_probs_all(states)
        return -np.sum(np.exp(lp) * lp, axis=1)

    def sample(self, state, rng):
        if self.kind == "log_policy_discrete":
            p = self.probs(np.asarray([state]))[0]
            c = np.cumsum(p)
            return int(min(np.searchsorted(c, rng.random() * c[-1], side="right"), self.n_actions - 1))
        self._require("log_policy_gaussian")
        W, log_std, _ = self._gaussian_parts()
        mu = self.features(np.asarray(state, dtype=float)[None, :])[0] @ W.T
        return mu + np.exp(log_std) * rng.standard_normal(self.action_dim)

    # dual ----------------------------------------------------------------
    def _dual_features(self, states, actions):
        k = self.steps
        if self.features.kind == "tabular_onehot":
            a = self._check_discrete_actions(actions).reshape(-1, k)
            code = np.zeros(a.shape[0], dtype=int)
            for t in range(k):
                code = code * self.n_actions + a[:, t]
            s = np.asarray(states, dtype=int).reshape(-1)
            return self.features(s * self.n_actions ** k + code)
        if self.n_actions:
            a = self._check_discrete_actions(actions).reshape(-1, k)
            code = np.zeros(a.shape[0], dtype=int)
            for t in range(k):
                code = code * self.n_actions + a[:, t]
            phi = self.features(states)
            n, m = phi.shape
            out = np.zeros((n, self.n_actions ** k * m))
            cols = code[:, None] * m + np.arange(m)[None, :]
            out[np.arange(n)[:, None], cols] = phi
            return out
        width = self.action_dim * k
        a = self._check_continuous_actions(actions, width)
        s = np.asarray(states, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        return self.features(np.hstack([s, a]))

    def dual_batch(self, states, actions):
        self._require("dual")
        phi = self._dual_features(states, actions)
        return phi @ self.params, phi

    def dual_design(self, states, actions):
        """Joint feature matrix of the dual (its Jacobian, since the dual is linear)."""
        self._require("dual")
        return self._dual_features(states, actions)

    # generic -------------------------------------------------------------
    def evaluate(self, x):
        """Scalar output and gradient for one input (a state, or a (state, action) pair)."""
        if self.kind == "value":
            v, g = self.value_batch(np.asarray([x]))
        elif self.kind == "dual":
            s, a = x
            v, g = self.dual_batch(np.asarray([s]), np.asarray([a]))
        else:
            s, a = x
            v, g = self.log_prob_batch(np.asarray([s]), np.asarray([a]))
        return float(v[0]), g[0]

    def to_dict(self):
        return {
            "kind": self.kind,
            "params": self.params.tolist(),
            "features": self.features.to_dict(),
            "n_actions": self.n_actions,
            "action_dim": self.action_dim,
            "steps": self.steps,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["kind"], FeatureMap.from_dict(d["features"]), params=d["params"],
            n_actions=d.get("n_actions"), action_dim=d.get("action_dim"), steps=d.get("steps", 1),
        )


def eval_value(f, state):
    f._require("value")
    return f.evaluate(state)


def eval_log_policy(f, state, action):
    f._require("log_policy_discrete", "log_policy_gaussian")
    return f.evaluate((state, action))


def eval_dual(f, state, action):
    f._require("dual")
    return f.evaluate((state, action))


def grad_check(f, probe_inputs, eps=1e-5, analytic=None):
    """Worst relative error between analytic and central-difference gradients.

    The relative error of each coordinate uses ``max(1, |analytic|)`` as the
    denominator. ``analytic(f, x) -> (value, grad)`` overrides the function's
    own gradient, which is how a faulty gradient can be injected.
    """
    analytic = analytic or (lambda fn, x: fn.evaluate(x))
    base = f.params.copy()
    worst = 0.0
    try:
        for x in probe_inputs:
            _, g = analytic(f, x)
            g = np.asarray(g, dtype=float)
            num = np.empty_like(base)
            for i in range(base.size):
                f.params = base.copy()
                f.params[i] += eps
                up = f.evaluate(x)[0]
                f.params[i] -= 2 * eps
                down = f.evaluate(x)[0]
                num[i] = (up - down) / (2 * eps)
            f.params = base.copy()
            err = np.max(np.abs(g - num) / np.maximum(1.0, np.abs(g)), initial=0.0)
            worst = max(worst, float(err))
    finally:
        f.params = base
    return worst


def make_value_function(features, params=None):
    return ParamFunction("value", features, params)


def make_discrete_policy(features, n_actions, params=None):
    return ParamFunction("log_policy_discrete", features, params, n_actions=n_actions)


def make_gaussian_policy(features, action_dim, params=None, init_log_std=0.0, action_bounds=None):
    return ParamFunction("log_policy_gaussian", features, params, action_dim=action_dim,
                         init_log_std=init_log_std, action_bounds=action_bounds)


def make_dual(features, n_actions=None, action_dim=None, steps=1, params=None):
    return ParamFunction("dual", features, params, n_actions=n_actions, action_dim=action_dim,
                         steps=steps)
