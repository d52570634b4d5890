"""Property-check suites run by ``sdec check``.

Each suite returns a list of :class:`CheckResult` entries carrying the
measured value and the tolerance it was held to. Nothing here raises on a
failed property; failures are report entries.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import bellman
from .functions import (
    linear_features,
    make_discrete_policy,
    make_dual,
    make_gaussian_policy,
    make_value_function,
    tabular_features,
)
from .mdp import Transition, make_benchmark_env, rollout
from .objective import (
    Batch,
    SaddleState,
    delta_multi_step,
    delta_one_step,
    delta_trace,
    enumerate_batch,
    fit_dual,
    primal_gradients,
    saddle_objective_eta,
    variance_identity_check,
)

SUITES = ("contraction", "bias", "consistency", "variance", "gradients", "reductions")
SELECTORS = ("all",) + SUITES


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: dict = field(default_factory=dict)


@dataclass
class CheckReport:
    selector: str
    seed: int
    results: list
    seconds: float

    @property
    def passed(self):
        return all(r.passed for r in self.results)

    def to_dict(self):
        return {
            "selector": self.selector,
            "seed": self.seed,
            "passed": self.passed,
            "n_checks": len(self.results),
            "n_failed": sum(not r.passed for r in self.results),
            "seconds": self.seconds,
            "checks": [_jsonable(asdict(r)) for r in self.results],
        }


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else repr(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def random_mdps(count, seed, n_states=20, n_actions=4, gamma=0.9):
    """``count`` Dirichlet-row MDPs with uniform rewards, seeds ``seed, seed+1, ...``."""
    return [
        make_benchmark_env("random_mdp", n_states=n_states, n_actions=n_actions, gamma=gamma, seed=seed + i)
        for i in range(count)
    ]


# suites -------------------------------------------------------------------

def check_contraction(seed=0, seeds=100, lambdas=(0.01, 0.1, 1.0), pairs=5):
    """``||T V1 - T V2||_inf <= gamma ||V1 - V2||_inf`` on random MDPs and value pairs."""
    rng = np.random.default_rng(seed)
    worst, violations, total = 0.0, 0, 0
    mdps = random_mdps(seeds, seed)
    for mdp in mdps:
        for lam in lambdas:
            for _ in range(pairs):
                scale = rng.choice([0.1, 1.0, 10.0, 100.0])
                V1 = scale * rng.standard_normal(mdp.n_states)
                V2 = scale * rng.standard_normal(mdp.n_states)
                num = np.max(np.abs(bellman.smoothed_bellman_apply(mdp, V1, lam)
                                    - bellman.smoothed_bellman_apply(mdp, V2, lam)))
                den = np.max(np.abs(V1 - V2))
                ratio = num / den
                total += 1
                if num > mdp.gamma * den * (1 + 1e-12):
                    violations += 1
                worst = max(worst, ratio)
    gamma = mdps[0].gamma
    return [CheckResult("contraction", "sup-norm ratio <= gamma", violations == 0, worst, gamma,
                        {"n_mdps": seeds, "n_pairs": total, "violations": violations})]


def check_bias(seed=0, seeds=20, lambdas=(0.001, 0.01, 0.1, 1.0)):
    """Smoothing gap within ``gamma lam log|A| / (1 - gamma)`` and shrinking with lambda."""
    out = []
    mdps = random_mdps(seeds, seed)
    worst_slack, bad, ratios = -math.inf, 0, []
    for mdp in mdps:
        v_star = bellman.solve_fixed_point(mdp, 0.0, tol=1e-12).values
        gaps = {}
        for lam in lambdas:
            v_lam = bellman.solve_fixed_point(mdp, lam, tol=1e-12).values
            gaps[lam] = float(np.max(np.abs(v_star - v_lam)))
            bound = bellman.smoothing_bias_bound(mdp.gamma, lam, math.log(mdp.n_actions))
            worst_slack = max(worst_slack, gaps[lam] - bound)
            if gaps[lam] > bound + 1e-9:
                bad += 1
        ratios.append(gaps[0.001] / gaps[0.1] if 0.001 in gaps and 0.1 in gaps and gaps[0.1] > 0 else 0.0)
    out.append(CheckResult("bias", "gap <= bound", bad == 0, worst_slack, 1e-9,
                           {"n_mdps": seeds, "lambdas": list(lambdas), "violations": bad}))
    if 0.001 in lambdas and 0.1 in lambdas:
        worst = max(ratios)
        out.append(CheckResult("bias", "gap(0.001) <= gap(0.1) / 10", worst <= 0.1, worst, 0.1,
                               {"n_mdps": seeds}))
    return out


def check_consistency(seed=0, seeds=20, lam=0.1):
    """Zero residual at the smoothed optimum; a +0.1 value perturbation is detected."""
    mdps = random_mdps(seeds, seed) + [make_benchmark_env("chain", n=5)]
    worst, weakest = 0.0, math.inf
    for i, mdp in enumerate(mdps):
        V = bellman.solve_fixed_point(mdp, lam, tol=1e-13).values
        pi = bellman.smoothed_optimal_policy(mdp, V, lam)
        worst = max(worst, bellman.consistency_residual(mdp, V, pi, lam)[1])
        Vp = V.copy()
        Vp[i % mdp.n_states] += 0.1
        weakest = min(weakest, bellman.consistency_residual(mdp, Vp, pi, lam)[1])
    return [
        CheckResult("consistency", "residual at optimum <= 1e-8", worst <= 1e-8, worst, 1e-8,
                    {"n_mdps": len(mdps), "lambda": lam}),
        CheckResult("consistency", "perturbation detected (>= 0.01)", weakest >= 0.01, weakest, 0.01,
                    {"perturbation": 0.1}),
    ]


def _random_tables(mdp, rng):
    V = rng.uniform(-1.0, 1.0, mdp.n_states)
    pi = rng.dirichlet(np.ones(mdp.n_actions), size=mdp.n_states)
    return V, pi


def check_variance(seed=0, seeds=20, lam=0.1):
    """``f~ - f - Var[gamma V(s')]`` and the closed-form dual maximum, by enumeration."""
    rng = np.random.default_rng(seed)
    worst = worst_dual = 0.0
    for mdp in random_mdps(seeds, seed, n_states=10, n_actions=3):
        V, pi = _random_tables(mdp, rng)
        vi = variance_identity_check(mdp, V, pi, lam)
        worst = max(worst, vi.defect)
        worst_dual = max(worst_dual, vi.dual_defect)
    chain = make_benchmark_env("chain", n=5)
    V, pi = _random_tables(chain, rng)
    det = variance_identity_check(chain, V, pi, lam)
    return [
        CheckResult("variance", "identity defect <= 1e-12", worst <= 1e-12, worst, 1e-12, {"n_mdps": seeds}),
        CheckResult("variance", "dual maximum = -variance (1e-12)", worst_dual <= 1e-12, worst_dual, 1e-12,
                    {"n_mdps": seeds}),
        CheckResult("variance", "deterministic env has zero variance term", det.variance_term == 0.0,
                    det.variance_term, 0.0, {"env": "chain", "defect": det.defect}),
    ]


def _fd_gradient(fn, x, eps):
    g = np.empty_like(x)
    for i in range(x.size):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (fn(up) - fn(down)) / (2 * eps)
    return g


def _rel_err(analytic, numeric):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric)), initial=0.0))


def gradient_errors(state, batch, eps=1e-6, fault_injection=False):
    """Relative errors of both primal estimators against central differences of ``L_eta``.

    The dual is held at its current parameters. ``fault_injection`` drops the
    leading factor 2 of the analytic gradients, which a working detector must flag.
    """
    g = primal_gradients(state, batch)
    gV, gpi = g.grad_V, g.grad_pi
    if fault_injection:
        gV, gpi = 0.5 * gV, 0.5 * gpi

    def along(fam):
        base = fam.params.copy()

        def f(w):
            fam.params = w
            try:
                return saddle_objective_eta(state, batch)
            finally:
                fam.params = base

        return _fd_gradient(f, base, eps)

    return _rel_err(gV, along(state.V)), _rel_err(gpi, along(state.pi))


def check_gradients(seed=0, etas=(0.0, 0.5, 1.0), fault_injection=False, lam=0.1, tol=1e-4):
    """Enumerated-batch estimators vs finite differences, tabular and continuous families."""
    rng = np.random.default_rng(seed)
    out = []
    mdp = make_benchmark_env("random_mdp", n_states=6, n_actions=3, gamma=0.9, seed=seed)
    S, A = mdp.n_states, mdp.n_actions
    batch = enumerate_batch(mdp)
    for eta in etas:
        V = make_value_function(tabular_features(S), rng.standard_normal(S))
        pi = make_discrete_policy(tabular_features(S), A, rng.standard_normal(S * A))
        rho = make_dual(tabular_features(S * A), n_actions=A)
        state = SaddleState(V, pi, rho, lam, eta, mdp.gamma)
        rho.params, _ = fit_dual(state, batch)
        eV, epi = gradient_errors(state, batch, fault_injection=fault_injection)
        out.append(CheckResult("gradients", f"tabular grad_V eta={eta}", eV <= tol, eV, tol, {"eta": eta}))
        out.append(CheckResult("gradients", f"tabular grad_pi eta={eta}", epi <= tol, epi, tol, {"eta": eta}))

    # continuous states and actions: linear value, Gaussian policy, linear dual on a fixed batch
    n = 64
    s = rng.uniform(-1, 1, size=(n, 2))
    a = rng.uniform(-1, 1, size=(n, 1))
    s2 = rng.uniform(-1, 1, size=(n, 2))
    r = rng.standard_normal(n)
    cbatch = Batch.from_arrays(s, a, r, s2)
    for eta in etas:
        V = make_value_function(linear_features(2), rng.standard_normal(3))
        pi = make_gaussian_policy(linear_features(2), 1, np.concatenate([rng.standard_normal(3), [-0.3]]))
        rho = make_dual(linear_features(3), action_dim=1)
        state = SaddleState(V, pi, rho, lam, eta, 0.95)
        rho.params, _ = fit_dual(state, cbatch)
        eV, epi = gradient_errors(state, cbatch, fault_injection=fault_injection)
        out.append(CheckResult("gradients", f"gaussian grad_V eta={eta}", eV <= tol, eV, tol, {"eta": eta}))
        out.append(CheckResult("gradients", f"gaussian grad_pi eta={eta}", epi <= tol, epi, tol, {"eta": eta}))
    if fault_injection:
        for res in out:
            res.detail["fault_injection"] = True
    return out


def _tabular_state(mdp, rng, lam, gamma=None):
    S, A = mdp.n_states, mdp.n_actions
    V = make_value_function(tabular_features(S), rng.standard_normal(S))
    pi = make_discrete_policy(tabular_features(S), A, rng.standard_normal(S * A))
    return SaddleState(V, pi, None, lam, 0.5, mdp.gamma if gamma is None else gamma)


def worked_multi_step_example():
    """T=1, zero rewards, uniform 2-action policy, lam=1, gamma=0.5, V(s2)=4."""
    V = make_value_function(tabular_features(3), [0.0, 0.0, 4.0])
    pi = make_discrete_policy(tabular_features(3), 2)
    state = SaddleState(V, pi, None, 1.0, 0.0, 0.5)
    seg = [Transition(0, 0, 0.0, 1), Transition(1, 1, 0.0, 2)]
    return delta_multi_step(state, seg, 1)


def worked_trace_example():
    """zeta=0.5, T_max=3 with multi-step deltas 1, 2, 3, 4.

    With lam=0 and V=0 the T-step delta is the discounted reward sum, so rewards
    ``gamma^-t`` make the partial sums 1, 2, 3, 4.
    """
    gamma = 0.5
    V = make_value_function(tabular_features(5))
    pi = make_discrete_policy(tabular_features(5), 2)
    state = SaddleState(V, pi, None, 0.0, 0.0, gamma)
    traj = [Transition(t, 0, gamma ** -t, t + 1) for t in range(4)]
    return delta_trace(state, traj, 0.5, 3)


def check_reductions(seed=0, seeds=10, lam=0.1):
    """Multi-step T=0 and trace zeta=0 agree with one-step deltas; worked examples reproduce."""
    rng = np.random.default_rng(seed)
    worst_ms = worst_tr = worst_obj = 0.0
    n = 0
    for mdp in random_mdps(seeds, seed, n_states=8, n_actions=3):
        state = _tabular_state(mdp, rng, lam)
        probs = state.pi.probs(np.arange(mdp.n_states))
        cdf = np.cumsum(probs, axis=1)

        def sampler(s, r):
            return int(min(np.searchsorted(cdf[s], r.random(), side="right"), mdp.n_actions - 1))

        traj = rollout(mdp, sampler, 30, rng)
        ms, tr = [], []
        for t in range(len(traj) - 3):
            one = delta_one_step(state, traj[t])
            ms.append(delta_multi_step(state, traj.transitions[t:], 0))
            tr.append(delta_trace(state, traj.transitions[t:], 0.0, 3))
            worst_ms = max(worst_ms, abs(ms[-1] - one))
            worst_tr = max(worst_tr, abs(tr[-1] - one))
            n += 1
        # objective level: mean (delta - V(s))^2 from reduced deltas vs the one-step batch objective
        head = traj.transitions[: len(ms)]
        obj = saddle_objective_eta(SaddleState(state.V, state.pi, None, lam, 0.0, mdp.gamma),
                                   Batch.from_transitions(head))
        v0 = state.V.value_batch(np.array([t.s for t in head]))[0]
        for d in (np.array(ms), np.array(tr)):
            worst_obj = max(worst_obj, abs(float(np.mean((d - v0) ** 2)) - obj))
    ms = worked_multi_step_example()
    tr = worked_trace_example()
    ms_ref = 1.5 * math.log(2) + 1.0
    tr_ref = 26.0 / 15.0
    return [
        CheckResult("reductions", "multi-step T=0 == one-step (1e-12)", worst_ms <= 1e-12, worst_ms, 1e-12,
                    {"n_transitions": n}),
        CheckResult("reductions", "trace zeta=0 == one-step (1e-12)", worst_tr <= 1e-12, worst_tr, 1e-12,
                    {"n_transitions": n}),
        CheckResult("reductions", "reduced objectives == one-step objective (1e-12)", worst_obj <= 1e-12,
                    worst_obj, 1e-12, {"n_trajectories": seeds}),
        CheckResult("reductions", "worked T=1 example = 2.039721", abs(ms - ms_ref) <= 1e-9,
                    abs(ms - ms_ref), 1e-9, {"value": ms, "expected": ms_ref}),
        CheckResult("reductions", "worked trace example = 26/15", abs(tr - tr_ref) <= 1e-9,
                    abs(tr - tr_ref), 1e-9, {"value": tr, "expected": tr_ref}),
    ]


def run_checks(selector="all", seed=0, seeds=None, fault_injection=False):
    """Run one suite (or all) and return a :class:`CheckReport`.

    ``seeds`` overrides the number of random MDPs for the suites that draw
    them. ``fault_injection`` corrupts the analytic gradients so the gradient
    suite must report failure.
    """
    if selector not in SELECTORS:
        raise ValueError(f"unknown check suite {selector!r}; choose from {SELECTORS}")
    t0 = time.perf_counter()
    chosen = SUITES if selector == "all" else (selector,)
    kw = {} if seeds is None else {"seeds": int(seeds)}
    results = []
    for suite in chosen:
        if suite == "contraction":
            results += check_contraction(seed, **kw)
        elif suite == "bias":
            results += check_bias(seed, **kw)
        elif suite == "consistency":
            results += check_consistency(seed, **kw)
        elif suite == "variance":
            results += check_variance(seed, **kw)
        elif suite == "gradients":
            results += check_gradients(seed, fault_injection=fault_injection)
        else:
            results += check_reductions(seed, **kw)
    return CheckReport(selector, seed, results, time.perf_counter() - t0)

