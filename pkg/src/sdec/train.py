"""Experience-replay training loop (collect, fit dual, mirror-descent primal step) and evaluation."""

from __future__ import annotations

import dataclasses
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import bellman
from .config import SdecConfig
from .errors import ConfigInvalid, NonFiniteLoss
from .functions import (
    grad_check,
    make_discrete_policy,
    make_dual,
    make_gaussian_policy,
    make_value_function,
    linear_features,
    rbf_random_features,
    tabular_features,
)
from .mdp import ReplayBuffer, Transition, is_tabular, make_benchmark_env
from .metrics import MetricsRecord
from .objective import Batch, SaddleState, fit_dual_and_gradients
from .optim import prox_euclidean, prox_kl_penalized, stepsize

Z_50 = 0.6744897501960817  # standard normal quantile for a two-sided 50% interval


@dataclass
class TrainResult:
    V: object
    pi: object
    rho: object
    metrics: list
    episodes: int
    iterations: int
    wall_seconds: float
    oracle_gap: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)


def env_from_config(config: SdecConfig):
    params = dict(config.env.params)
    params.setdefault("gamma", config.gamma)
    return make_benchmark_env(config.env.name, params)


def _state_box(env):
    # (cos theta, sin theta, omega) box for the pendulum
    return [-1.0, -1.0, -4.0], [1.0, 1.0, 4.0]


def build_families(env, config: SdecConfig, rng):
    """Instantiate V, pi and rho per the config's family specs.

    RBF bandwidths follow the median heuristic on 1024 states drawn uniformly
    over the environment's state box.
    """
    fam = config.families
    k = config.segment_length if config.families.dual.kind != "none" else 1
    if is_tabular(env):
        S, A = env.n_states, env.n_actions
        for f in (fam.value, fam.policy, fam.dual):
            if f.kind not in ("auto", "tabular"):
                raise ConfigInvalid("tabular environments use tabular families")
        V = make_value_function(tabular_features(S))
        pi = make_discrete_policy(tabular_features(S), A)
        rho = make_dual(tabular_features(S * A ** k), n_actions=A, steps=k)
    else:
        low, high = _state_box(env)
        sample = env.sample_states(1024, rng)

        def state_map(f):
            if f.kind == "linear":
                return linear_features(env.state_dim, transform="angle_velocity")
            if f.kind not in ("auto", "rbf"):
                raise ConfigInvalid("continuous environments use linear or rbf families")
            return rbf_random_features(f.n_centers, low, high, seed=f.seed, sample=sample,
                                       transform="angle_velocity")

        V = make_value_function(state_map(fam.value))
        pi = make_gaussian_policy(state_map(fam.policy), env.action_dim,
                                  init_log_std=fam.policy.init_log_std)
        a_lo, a_hi = list(env.action_low) * k, list(env.action_high) * k
        if fam.dual.kind == "linear":
            dual_map = linear_features(env.state_dim + env.action_dim * k, transform="angle_velocity")
        else:
            dual_sample = np.hstack([sample, rng.uniform(a_lo, a_hi, size=(sample.shape[0], len(a_lo)))])
            dual_map = rbf_random_features(fam.dual.n_centers, low + a_lo, high + a_hi, seed=fam.dual.seed,
                                           sample=dual_sample, transform="angle_velocity")
        rho = make_dual(dual_map, action_dim=env.action_dim, steps=k)
    if config.init_scale > 0:
        n = pi.n_params - (pi.action_dim or 0)
        pi.params[:n] = config.init_scale * rng.standard_normal(n)
    _accept_families(env, V, pi, rho, rng)
    return V, pi, rho


GRAD_TOL = 1e-5


def _accept_families(env, V, pi, rho, rng, probes=3):
    """Refuse to train with a family whose analytic gradient disagrees with finite differences."""
    k = rho.steps
    if is_tabular(env):
        states = rng.integers(env.n_states, size=probes)
        acts = rng.integers(env.n_actions, size=(probes, k))
        pairs = [(int(s), int(a[0])) for s, a in zip(states, acts)]
        dual_pairs = [(int(s), a if k > 1 else int(a[0])) for s, a in zip(states, acts)]
    else:
        states = env.sample_states(probes, rng)
        acts = rng.uniform(-1.0, 1.0, size=(probes, env.action_dim * k))
        pairs = [(s, a[: env.action_dim]) for s, a in zip(states, acts)]
        dual_pairs = list(zip(states, acts))
    probe_V = [int(x) for x in states] if is_tabular(env) else list(states)
    for name, fam, xs in (("value", V, probe_V), ("policy", pi, pairs), ("dual", rho, dual_pairs)):
        saved = fam.params.copy()
        fam.params = saved + 0.1 * rng.standard_normal(saved.size)
        try:
            err = grad_check(fam, xs)
        finally:
            fam.params = saved
        if not err <= GRAD_TOL:
            raise ConfigInvalid(f"{name} family fails the gradient check (relative error {err:.2e})")


class _Collector:
    """Runs the behavior policy continuously, restarting every ``horizon`` steps."""

    def __init__(self, env, horizon, rng):
        self.env, self.horizon, self.rng = env, horizon, rng
        self.state = None
        self.t = 0
        self.episode = -1

    def collect(self, sampler, k):
        out = []
        for _ in range(k):
            if self.state is None or self.t >= self.horizon:
                self.state = self.env.reset(self.rng)
                self.t = 0
                self.episode += 1
            a = sampler(self.state, self.rng)
            r, s2, done = self.env.step(self.state, a, self.rng)
            out.append(Transition(self.state, a, r, s2, self.episode))
            self.state, self.t = s2, self.t + 1
            if done:
                self.state = None
        return out


def _behavior_sampler(env, policy, epsilon, uniform):
    if is_tabular(env):
        A = env.n_actions
        if uniform:
            return lambda s, rng: int(rng.integers(A))
        probs = policy.probs(np.arange(env.n_states))
        if epsilon > 0:
            probs = (1.0 - epsilon) * probs + epsilon / A
        cdf = np.cumsum(probs, axis=1)

        def sample(s, rng):
            return int(min(np.searchsorted(cdf[s], rng.random() * cdf[s, -1], side="right"), A - 1))

        return sample
    if uniform:
        lo, hi = env.action_low, env.action_high
        return lambda s, rng: rng.uniform(lo, hi)
    return policy.sample


def _sample_batch(buffer, k, length, rng):
    starts = buffer.segment_starts(length)
    if starts.size == 0:
        raise ConfigInvalid(f"replay holds no chained segment of length {length}")
    s, a, r, s2 = buffer.arrays()
    idx = starts[rng.integers(starts.size, size=k)]
    if length == 1:
        return Batch.from_arrays(s[idx], a[idx], r[idx], s2[idx])
    offs = idx[:, None] + np.arange(length)[None, :]
    states = np.concatenate([s[offs], s2[offs[:, -1]][:, None]], axis=1)
    return Batch(states, a[offs], r[offs], np.full(k, 1.0 / k))


def _tabular_snapshot(mdp, V, pi):
    v = V.value_batch(np.arange(mdp.n_states))[0]
    probs = pi.probs(np.arange(mdp.n_states))
    return v, probs


def sdec_train(env, config: SdecConfig, rng=None, callback=None) -> TrainResult:
    """Run the experience-replay primal-dual training loop.

    Per episode: collect ``collect`` transitions with the behavior policy, then
    for ``j = 1..iterations`` refit the dual on a replay mini-batch, compute
    both primal gradients at the same snapshot and apply the prox steps with
    stepsize ``stepsize(j)``. The behavior policy is then replaced by the
    current policy (unless frozen).
    ``callback(episode, metrics, (V, pi, rho))`` runs after every episode.
    """
    config.validate()
    if config.collect == 0:
        raise ConfigInvalid("collect = 0 leaves the replay buffer empty; nothing to train on")
    root = np.random.default_rng(config.seed) if rng is None else rng
    init_rng, collect_rng, sample_rng, eval_rng, pick_rng = (
        np.random.default_rng(s) for s in root.integers(0, 2 ** 63, size=5)
    )
    tabular = is_tabular(env)
    if tabular and env.gamma != config.gamma:
        env = dataclasses.replace(env, gamma=config.gamma)
    gamma = config.gamma
    opt = config.optimizer
    if opt.divergence == "kl_simplex":
        raise ConfigInvalid("kl_simplex acts on probability vectors; policies here are parametric, "
                            "use euclidean or kl_penalized")
    V, pi, rho = build_families(env, config, init_rng)
    horizon = config.horizon or getattr(env, "horizon", 50)
    epsilon = config.behavior_epsilon
    if epsilon is None:
        epsilon = 0.05 if tabular else 0.0
    oracle = None
    if tabular:
        oracle = bellman.solve_fixed_point(env, config.lam).values

    buffer = ReplayBuffer(config.replay_capacity)
    collector = _Collector(env, horizon, collect_rng)
    behavior = pi.copy()
    L = config.segment_length
    pscale = config.policy_gradient_scale()
    trace = config.trace_decay if config.trace_decay > 0 else 0.0
    metrics, gaps = [], []
    t0 = time.perf_counter()
    it = 0
    picked = None
    for episode in range(1, config.episodes + 1):
        sampler = _behavior_sampler(env, behavior, epsilon, config.behavior == "uniform")
        buffer.extend(collector.collect(sampler, config.collect))
        for j in range(1, config.iterations + 1):
            it += 1
            tick = time.perf_counter()
            batch = _sample_batch(buffer, config.batch_size, L, sample_rng)
            state = SaddleState(V, pi, rho, config.lam, config.eta, gamma, trace)
            rho.params, dloss, g = fit_dual_and_gradients(state, batch)
            zeta = stepsize(j, opt.zeta0, opt.decay)
            values = (g.objective, g.first_term, g.second_term, dloss)
            if not (all(math.isfinite(v) for v in values) and np.all(np.isfinite(g.grad_V))
                    and np.all(np.isfinite(g.grad_pi))):
                raise NonFiniteLoss(f"non-finite loss or gradient at iteration {it}", iteration=it)
            new_V = prox_euclidean(V.params, g.grad_V, zeta)
            g_pi = pscale * g.grad_pi
            if opt.divergence == "euclidean":
                new_pi = prox_euclidean(pi.params, g_pi, zeta)
            else:
                states = batch.states[:, :L].reshape((-1,) + batch.states.shape[2:])
                new_pi = prox_kl_penalized(pi, g_pi, zeta, states, opt.kl_inner_iters).params
            V.params, pi.params = new_V, new_pi
            if not (np.all(np.isfinite(V.params)) and np.all(np.isfinite(pi.params))):
                raise NonFiniteLoss(f"non-finite parameters after iteration {it}", iteration=it)
            resid = math.nan
            if tabular:
                v_tab, p_tab = _tabular_snapshot(env, V, pi)
                if np.all(p_tab > 0):
                    resid = bellman.consistency_residual(env, v_tab, p_tab, config.lam)[1]
            rec = MetricsRecord(
                it, g.objective, g.first_term, g.second_term, dloss,
                float(np.linalg.norm(g.grad_V)), float(np.linalg.norm(g.grad_pi)),
                consistency_residual=resid,
                wall_ms=(time.perf_counter() - tick) * 1e3 if config.timing else math.nan,
            )
            metrics.append(rec)
            if opt.output == "random" and pick_rng.random() * it < 1.0:
                picked = (V.params.copy(), pi.params.copy(), rho.params.copy())
        if config.refresh_behavior:
            behavior = pi.copy()
        if config.eval_every and episode % config.eval_every == 0:
            mean, _ = evaluate_policy(env, pi, config.eval_episodes, horizon, eval_rng)
            metrics[-1].avg_return = mean
        if tabular:
            v_tab = V.value_batch(np.arange(env.n_states))[0]
            gaps.append(float(np.max(np.abs(v_tab - oracle))))
        if callback is not None:
            callback(episode, metrics, (V, pi, rho))
    if picked is not None:
        V.params, pi.params, rho.params = picked
    diagnostics = {"dual_param_norm": float(np.linalg.norm(rho.params))}
    if tabular:
        v_tab, p_tab = _tabular_snapshot(env, V, pi)
        opt_actions = bellman.greedy_policy(env, bellman.solve_fixed_point(env, 0.0).values)
        learned = np.argmax(p_tab, axis=1)
        diagnostics.update(
            oracle_gap=float(np.max(np.abs(v_tab - oracle))),
            consistency_residual=(bellman.consistency_residual(env, v_tab, p_tab, config.lam)[1]
                                  if np.all(p_tab > 0) else math.inf),
            greedy_policy=learned.tolist(),
            optimal_policy=opt_actions.tolist(),
            greedy_matches_optimal=bool(np.array_equal(learned, opt_actions)),
        )
    return TrainResult(V, pi, rho, metrics, config.episodes, it, time.perf_counter() - t0, gaps,
                       diagnostics)


def _as_sampler(env, pi):
    if callable(pi) and not hasattr(pi, "kind"):
        return pi
    if hasattr(pi, "kind"):
        return pi.sample
    table = np.asarray(pi)
    if table.ndim == 1:
        return lambda s, rng: int(table[s])
    cdf = np.cumsum(table, axis=1)
    return lambda s, rng: int(min(np.searchsorted(cdf[s], rng.random() * cdf[s, -1], side="right"),
                                  table.shape[1] - 1))


def episode_returns(env, pi, episodes, horizon, rng, start=None):
    """Discounted returns of ``episodes`` independent rollouts of ``pi``.

    ``pi`` may be a policy :class:`ParamFunction`, a ``(state, rng) -> action``
    callable, a deterministic action table or a stochastic probability table.
    """
    sampler = _as_sampler(env, pi)
    out = np.empty(episodes)
    for e in range(episodes):
        s = env.reset(rng) if start is None else start
        ret, disc = 0.0, 1.0
        for _ in range(horizon):
            a = sampler(s, rng)
            r, s, done = env.step(s, a, rng)
            ret += disc * r
            disc *= env.gamma
            if done:
                break
        out[e] = ret
    return out


def evaluate_policy(env, pi, episodes, horizon, rng, start=None):
    """Monte-Carlo mean discounted return and its 50% normal-approximation half-width."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    rets = episode_returns(env, pi, episodes, horizon, rng, start)
    if episodes == 1:
        return float(rets[0]), 0.0
    return float(rets.mean()), float(Z_50 * rets.std(ddof=1) / math.sqrt(episodes))


def make_env_and_train(config: SdecConfig):
    env = env_from_config(config)
    return env, sdec_train(env, config)
