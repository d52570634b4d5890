"""Finite and toy-continuous MDPs, trajectory collection and experience replay."""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    BadParams,
    EmptyBuffer,
    GammaOutOfRange,
    InvalidAction,
    NegativeProbability,
    NonStochasticRow,
    SampleTooLarge,
    ShapeMismatch,
    UnknownEnvironment,
)

ROW_TOL = 1e-9


def _check_gamma(gamma):
    if not 0.0 < gamma < 1.0:
        raise GammaOutOfRange(f"gamma must lie strictly inside (0, 1), got {gamma}")


@dataclass(eq=False)
class TabularMdp:
    """Finite MDP with transition tensor ``P[s, a, s']`` and expected rewards ``R[s, a]``.

    Sampled rewards are ``R[s, a] + reward_noise_std[s, a] * N(0, 1)``.
    """

    n_states: int
    n_actions: int
    transition: np.ndarray
    reward: np.ndarray
    reward_noise_std: np.ndarray
    gamma: float
    name: str = "tabular"
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._cdf = np.cumsum(self.transition, axis=2)
        self._cdf[:, :, -1] = 1.0

    @property
    def reward_bound(self):
        """Declared bound C_R on |R(s, a)|."""
        return float(np.max(np.abs(self.reward))) if self.reward.size else 0.0

    def expected_next(self, values):
        """E[V(s') | s, a] as an (n_states, n_actions) table."""
        return self.transition @ np.asarray(values, dtype=float)

    def q_values(self, values):
        return self.reward + self.gamma * self.expected_next(values)

    def induced_chain(self, probs):
        """State-to-state transition matrix under a stochastic policy table."""
        return np.einsum("sa,sat->st", probs, self.transition)

    def sample_next(self, s, a, rng):
        u = rng.random()
        return int(min(np.searchsorted(self._cdf[s, a], u, side="right"), self.n_states - 1))

    def sample_reward(self, s, a, rng):
        std = self.reward_noise_std[s, a]
        r = self.reward[s, a]
        if std > 0.0:
            r = r + std * rng.standard_normal()
        return float(r)

    def reset(self, rng):
        return int(rng.integers(self.n_states))

    def step(self, state, action, rng):
        if not (isinstance(action, (int, np.integer)) and 0 <= action < self.n_actions):
            raise InvalidAction(f"action {action!r} not in [0, {self.n_actions})")
        r = self.sample_reward(state, action, rng)
        return r, self.sample_next(state, action, rng), False

    def to_dict(self):
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "reward_noise_std": self.reward_noise_std.tolist(),
            "gamma": self.gamma,
        }

    def to_json(self):
        # repr-based float formatting round-trips doubles exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return make_tabular_mdp(
            d["n_states"], d["n_actions"], d["transition"], d["reward"],
            d.get("reward_noise_std", 0.0), d["gamma"],
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def make_tabular_mdp(n_states, n_actions, transition, reward, reward_noise_std=0.0, gamma=0.9,
                     name="tabular"):
    """Validate inputs and build a :class:`TabularMdp`."""
    P = np.array(transition, dtype=float)
    R = np.array(reward, dtype=float)
    if P.shape != (n_states, n_actions, n_states):
        raise ShapeMismatch(f"transition shape {P.shape} != {(n_states, n_actions, n_states)}")
    if R.shape != (n_states, n_actions):
        raise ShapeMismatch(f"reward shape {R.shape} != {(n_states, n_actions)}")
    noise = np.broadcast_to(np.array(reward_noise_std, dtype=float), R.shape).copy()
    if np.any(noise < 0) or not np.all(np.isfinite(noise)):
        raise BadParams("reward_noise_std must be finite and non-negative")
    if not np.all(np.isfinite(R)):
        raise BadParams("rewards must be finite")
    if np.any(P < 0):
        raise NegativeProbability("transition tensor has negative entries")
    sums = P.sum(axis=2)
    bad = np.abs(sums - 1.0) > ROW_TOL
    if np.any(bad):
        s, a = np.argwhere(bad)[0]
        raise NonStochasticRow(f"P(.|s={s}, a={a}) sums to {sums[s, a]!r}")
    _check_gamma(gamma)
    return TabularMdp(int(n_states), int(n_actions), P, R, noise, float(gamma), name=name)


class PendulumEnv:
    """Damped, torque-bounded pendulum with angle measured from upright.

    State is ``(theta, omega)`` with ``theta`` wrapped to ``[-pi, pi)``. One step::

        u      = clip(action, -max_torque, max_torque)
        omega' = omega + dt * (gravity * sin(theta) - damping * omega + u) + noise_std * sqrt(dt) * xi
        theta' = wrap(theta + dt * omega')
        reward = cos(theta)

    Episodes start hanging down, ``theta = pi + U(-0.1, 0.1)``, at rest, and run
    for ``horizon`` steps.
    """

    state_dim = 2
    action_dim = 1

    def __init__(self, dt=0.05, horizon=200, gamma=0.995, max_torque=2.0, gravity=1.0,
                 damping=0.1, noise_std=0.01):
        if dt <= 0 or horizon < 1 or max_torque <= 0 or damping < 0 or noise_std < 0:
            raise BadParams("toy_pendulum parameters out of range")
        _check_gamma(gamma)
        self.dt = float(dt)
        self.horizon = int(horizon)
        self.gamma = float(gamma)
        self.max_torque = float(max_torque)
        self.gravity = float(gravity)
        self.damping = float(damping)
        self.noise_std = float(noise_std)
        self.name = "toy_pendulum"

    @property
    def action_low(self):
        return np.array([-self.max_torque])

    @property
    def action_high(self):
        return np.array([self.max_torque])

    def reset(self, rng):
        theta = math.pi + rng.uniform(-0.1, 0.1)
        return np.array([_wrap(theta), 0.0])

    def step(self, state, action, rng):
        action = np.asarray(action, dtype=float).reshape(-1)
        if action.shape != (1,) or not np.isfinite(action[0]):
            raise InvalidAction(f"expected one finite torque value, got {action!r}")
        u = min(max(action[0], -self.max_torque), self.max_torque)
        theta, omega = float(state[0]), float(state[1])
        acc = self.gravity * math.sin(theta) - self.damping * omega + u
        omega = omega + self.dt * acc
        if self.noise_std > 0:
            omega += self.noise_std * math.sqrt(self.dt) * rng.standard_normal()
        theta = _wrap(theta + self.dt * omega)
        return math.cos(float(state[0])), np.array([theta, omega]), False

    def sample_states(self, n, rng):
        """Uniform states over the angle circle and |omega| <= 4, for bandwidth fitting."""
        return np.column_stack([rng.uniform(-math.pi, math.pi, n), rng.uniform(-4.0, 4.0, n)])

    def to_dict(self):
        return {
            "name": self.name, "dt": self.dt, "horizon": self.horizon, "gamma": self.gamma,
            "max_torque": self.max_torque, "gravity": self.gravity, "damping": self.damping,
            "noise_std": self.noise_std,
        }


# alias used in type hints and docs
ContinuousEnv = PendulumEnv


def _wrap(theta):
    return (theta + math.pi) % (2 * math.pi) - math.pi


def _chain(n=5, gamma=0.9, slip=0.0, reward_noise=0.0):
    """Actions 0=left, 1=right; reward 1 for pushing right at the right end."""
    n = int(n)
    if n < 2 or not 0.0 <= slip <= 1.0:
        raise BadParams("chain needs n >= 2 and slip in [0, 1]")
    P = np.zeros((n, 2, n))
    for s in range(n):
        left, right = max(s - 1, 0), min(s + 1, n - 1)
        P[s, 0, left] += 1.0 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1.0 - slip
        P[s, 1, left] += slip
    R = np.zeros((n, 2))
    R[n - 1, 1] = 1.0
    return make_tabular_mdp(n, 2, P, R, reward_noise, gamma, name="chain")


_MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))  # up, right, down, left


def _grid_transitions(height, width, slip, teleport=None):
    n = height * width
    P = np.zeros((n, 4, n))
    for s in range(n):
        r, c = divmod(s, width)
        for a in range(4):
            outcomes = [(a, 1.0 - slip)] + [((a + k) % 4, slip / 2) for k in (1, 3)]
            for move, p in outcomes:
                if p == 0.0:
                    continue
                dr, dc = _MOVES[move]
                rr, cc = min(max(r + dr, 0), height - 1), min(max(c + dc, 0), width - 1)
                t = rr * width + cc
                if teleport is not None:
                    t = teleport(s, t)
                P[s, a, t] += p
    return P


def _gridworld(width=4, height=4, gamma=0.9, slip=0.0, reward_noise=0.0):
    """Four actions; the bottom-right cell is an absorbing goal paying 1 per step."""
    width, height = int(width), int(height)
    if width < 2 or height < 1 or not 0.0 <= slip <= 1.0:
        raise BadParams("gridworld needs width >= 2, height >= 1 and slip in [0, 1]")
    n = width * height
    goal = n - 1
    P = _grid_transitions(height, width, slip)
    P[goal] = 0.0
    P[goal, :, goal] = 1.0
    R = np.zeros((n, 4))
    R[goal] = 1.0
    return make_tabular_mdp(n, 4, P, R, reward_noise, gamma, name="gridworld")


def _cliff(width=6, height=3, gamma=0.9, cliff_penalty=-10.0, step_cost=-0.1):
    """Cliff walk along the bottom row; falling costs ``cliff_penalty`` and returns to the start.

    Start is the bottom-left cell, the absorbing goal is bottom-right and pays 0.
    """
    width, height = int(width), int(height)
    if width < 3 or height < 2:
        raise BadParams("cliff needs width >= 3 and height >= 2")
    n = width * height
    start, goal = (height - 1) * width, n - 1
    cliff = set(range(start + 1, goal))
    P = _grid_transitions(height, width, 0.0, teleport=lambda s, t: start if t in cliff else t)
    R = np.full((n, 4), float(step_cost))
    for s in range(n):
        for a in range(4):
            dr, dc = _MOVES[a]
            r, c = divmod(s, width)
            rr, cc = min(max(r + dr, 0), height - 1), min(max(c + dc, 0), width - 1)
            if rr * width + cc in cliff:
                R[s, a] = float(cliff_penalty)
    P[goal] = 0.0
    P[goal, :, goal] = 1.0
    R[goal] = 0.0
    # cliff cells are unreachable; give them the start cell's dynamics
    for s in cliff:
        P[s] = P[start]
        R[s] = R[start]
    return make_tabular_mdp(n, 4, P, R, 0.0, gamma, name="cliff")


def _random_mdp(n_states=10, n_actions=3, gamma=0.9, seed=0, alpha=1.0, reward_noise=0.0):
    """Dirichlet(alpha) transition rows and U(0, 1) expected rewards drawn from ``seed``."""
    n_states, n_actions = int(n_states), int(n_actions)
    if n_states < 1 or n_actions < 1 or alpha <= 0:
        raise BadParams("random_mdp needs positive sizes and alpha")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.full(n_states, float(alpha)), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return make_tabular_mdp(n_states, n_actions, P, R, reward_noise, gamma, name="random_mdp")


_ENVS = {
    "chain": _chain,
    "gridworld": _gridworld,
    "cliff": _cliff,
    "random_mdp": _random_mdp,
    "toy_pendulum": PendulumEnv,
}

ENV_NAMES = tuple(_ENVS)


def make_benchmark_env(name, params=None, **kwargs):
    """Build one of the named benchmark environments.

    ``params`` and keyword arguments are merged; unknown parameter names raise
    :class:`BadParams`.
    """
    try:
        factory = _ENVS[name]
    except KeyError:
        raise UnknownEnvironment(f"unknown environment {name!r}; choose from {ENV_NAMES}") from None
    merged = dict(params or {})
    merged.update(kwargs)
    try:
        return factory(**merged)
    except TypeError as exc:
        raise BadParams(f"bad parameters for {name}: {exc}") from None


def is_tabular(env):
    return isinstance(env, TabularMdp)


@dataclass(frozen=True)
class Transition:
    s: Any
    a: Any
    r: float
    s_next: Any
    episode: int = 0


@dataclass
class Trajectory:
    transitions: list = field(default_factory=list)
    episode: int = 0

    def __len__(self):
        return len(self.transitions)

    def __iter__(self):
        return iter(self.transitions)

    def __getitem__(self, i):
        return self.transitions[i]

    def is_chained(self):
        return all(
            np.array_equal(np.asarray(p.s_next), np.asarray(q.s))
            for p, q in zip(self.transitions, self.transitions[1:])
        )


def _check_action(env, a):
    if is_tabular(env):
        if not (isinstance(a, (int, np.integer)) and 0 <= a < env.n_actions):
            raise InvalidAction(f"sampler returned {a!r}, not in [0, {env.n_actions})")
        return int(a)
    a = np.asarray(a, dtype=float).reshape(-1)
    if a.shape != (env.action_dim,) or not np.all(np.isfinite(a)):
        raise InvalidAction(f"sampler returned {a!r}")
    return a


def rollout(env, policy_sampler: Callable, horizon: int, rng, start=None, episode=0) -> Trajectory:
    """Run ``policy_sampler(state, rng) -> action`` for ``horizon`` steps.

    Tabular episodes start uniformly at random unless ``start`` is given.
    """
    if horizon < 0:
        raise BadParams("horizon must be >= 0")
    traj = Trajectory(episode=episode)
    if horizon == 0:
        return traj
    s = env.reset(rng) if start is None else start
    for _ in range(horizon):
        a = _check_action(env, policy_sampler(s, rng))
        r, s_next, done = env.step(s, a, rng)
        traj.transitions.append(Transition(s, a, r, s_next, episode))
        if done:
            break
        s = s_next
    return traj


class ReplayBuffer:
    """FIFO experience store with uniform sampling.

    Items are usually :class:`Transition` objects; anything else can be stored
    but only transitions can be turned into array batches.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise BadParams("capacity must be >= 1")
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)
        self._cache = {}

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def push(self, item):
        self._items.append(item)
        self._cache.clear()
        return self

    def extend(self, items):
        for it in items:
            self._items.append(it)
        self._cache.clear()
        return self

    def sample(self, k, rng, replace=True):
        if k == 0:
            return []
        if not self._items:
            raise EmptyBuffer("cannot sample from an empty buffer")
        if not replace and k > len(self._items):
            raise SampleTooLarge(f"k={k} exceeds buffer size {len(self._items)}")
        idx = rng.choice(len(self._items), size=k, replace=replace) if not replace \
            else rng.integers(len(self._items), size=k)
        return [self._items[i] for i in idx]

    def segment_starts(self, length):
        """Indices where ``length`` consecutive stored transitions form one chained segment."""
        key = ("starts", length)
        if key not in self._cache:
            items = list(self._items)
            n = len(items)
            if length == 1:
                starts = np.arange(n)
            else:
                ok = np.zeros(max(n - 1, 0), dtype=bool)
                for i in range(n - 1):
                    p, q = items[i], items[i + 1]
                    ok[i] = p.episode == q.episode and np.array_equal(np.asarray(p.s_next), np.asarray(q.s))
                # run[i] = number of consecutive links starting at i
                run = np.zeros(n, dtype=int)
                for i in range(n - 2, -1, -1):
                    run[i] = run[i + 1] + 1 if ok[i] else 0
                starts = np.flatnonzero(run >= length - 1)
            self._cache[key] = starts
        return self._cache[key]

    def arrays(self):
        """Stored transitions stacked as numpy arrays (cached until the next push)."""
        if "arrays" not in self._cache:
            items = list(self._items)
            self._cache["arrays"] = (
                np.array([t.s for t in items]),
                np.array([t.a for t in items]),
                np.array([t.r for t in items], dtype=float),
                np.array([t.s_next for t in items]),
            )
        return self._cache["arrays"]


def replay_push(buffer: ReplayBuffer, item) -> ReplayBuffer:
    return buffer.push(item)


def replay_sample(buffer: ReplayBuffer, k: int, rng, replace: bool = True) -> Sequence:
    return buffer.sample(k, rng, replace=replace)


def stationary_distribution(P_chain, iters=100_000, tol=1e-14):
    """Stationary distribution of a row-stochastic matrix by power iteration."""
    n = P_chain.shape[0]
    d = np.full(n, 1.0 / n)
    for _ in range(iters):
        nxt = d @ P_chain
        if np.abs(nxt - d).sum() < tol:
            return nxt
        d = nxt
    return d
