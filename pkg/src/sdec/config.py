"""Training configuration: defaults, validation and JSON loading.

Unspecified keys take the continuous-control defaults: discount 0.995,
stepsize 0.01, eta 0.001 and lambda 0.004 (middle of the {0.001, 0.004, 0.016}
grid).
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields

from .errors import InvalidValue, ParseError, UnknownKey
from .mdp import ENV_NAMES
from .optim import DECAYS, DIVERGENCES

LAMBDA_GRID = (0.001, 0.004, 0.016)

FAMILY_KINDS = ("auto", "tabular", "linear", "rbf")
BEHAVIORS = ("policy", "uniform")
OUTPUTS = ("last", "random")
POLICY_SCALES = ("inverse_lambda", "inverse_lambda_sq")


@dataclass
class OptimizerConfig:
    divergence: str = "euclidean"
    zeta0: float = 0.01
    decay: str = "inverse"
    kl_inner_iters: int = 10
    output: str = "last"
    # multiplier on the policy gradient: a number, "inverse_lambda" or "inverse_lambda_sq"
    policy_scale: float | str = 1.0


@dataclass
class FamilyConfig:
    kind: str = "auto"
    n_centers: int = 100
    seed: int = 0
    init_log_std: float = 0.0


@dataclass
class FamiliesConfig:
    value: FamilyConfig = field(default_factory=FamilyConfig)
    policy: FamilyConfig = field(default_factory=FamilyConfig)
    dual: FamilyConfig = field(default_factory=FamilyConfig)


@dataclass
class EnvConfig:
    name: str = "chain"
    params: dict = field(default_factory=dict)


@dataclass
class SdecConfig:
    lam: float = 0.004
    eta: float = 0.001
    gamma: float = 0.995
    episodes: int = 50
    collect: int = 1000
    iterations: int = 100
    replay_capacity: int = 100_000
    batch_size: int = 64
    multi_step: int = 0
    trace_decay: float = 0.0
    trace_max: int = 0
    horizon: int | None = None
    behavior: str = "policy"
    refresh_behavior: bool = True
    behavior_epsilon: float | None = None
    init_scale: float = 0.01
    eval_every: int = 0
    eval_episodes: int = 10
    timing: bool = False
    seed: int = 0
    env: EnvConfig = field(default_factory=EnvConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    families: FamiliesConfig = field(default_factory=FamiliesConfig)

    @property
    def segment_length(self):
        """Transitions per sampled segment: trace truncation or multi-step horizon, plus one."""
        return (self.trace_max if self.trace_decay > 0 else self.multi_step) + 1

    def validate(self):
        def bad(msg):
            raise InvalidValue(msg)

        if not self.lam > 0:
            bad(f"lambda must be > 0, got {self.lam}")
        if not 0.0 <= self.eta <= 1.0:
            bad(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 < self.gamma < 1.0:
            bad(f"gamma must lie in (0, 1), got {self.gamma}")
        for name in ("episodes", "iterations", "replay_capacity", "batch_size", "eval_episodes"):
            if getattr(self, name) < 1:
                bad(f"{name} must be >= 1")
        for name in ("collect", "multi_step", "trace_max", "eval_every"):
            if getattr(self, name) < 0:
                bad(f"{name} must be >= 0")
        if not 0.0 <= self.trace_decay < 1.0:
            bad("trace_decay must lie in [0, 1)")
        if self.horizon is not None and self.horizon < 1:
            bad("horizon must be >= 1")
        if self.behavior not in BEHAVIORS:
            bad(f"behavior must be one of {BEHAVIORS}")
        if self.behavior_epsilon is not None and not 0.0 <= self.behavior_epsilon <= 1.0:
            bad("behavior_epsilon must lie in [0, 1]")
        if self.init_scale < 0:
            bad("init_scale must be >= 0")
        if self.env.name not in ENV_NAMES:
            bad(f"env.name must be one of {ENV_NAMES}")
        opt = self.optimizer
        if opt.divergence not in DIVERGENCES:
            bad(f"optimizer.divergence must be one of {DIVERGENCES}")
        if not opt.zeta0 > 0:
            bad("optimizer.zeta0 must be > 0")
        if opt.decay not in DECAYS:
            bad(f"optimizer.decay must be one of {DECAYS}")
        if isinstance(opt.policy_scale, str):
            if opt.policy_scale not in POLICY_SCALES:
                bad(f"optimizer.policy_scale must be a positive number or one of {POLICY_SCALES}")
        elif not opt.policy_scale > 0:
            bad("optimizer.policy_scale must be > 0")
        if opt.kl_inner_iters < 1:
            bad("optimizer.kl_inner_iters must be >= 1")
        if opt.output not in OUTPUTS:
            bad(f"optimizer.output must be one of {OUTPUTS}")
        for fam in (self.families.value, self.families.policy, self.families.dual):
            if fam.kind not in FAMILY_KINDS:
                bad(f"family kind must be one of {FAMILY_KINDS}")
            if fam.n_centers < 1:
                bad("n_centers must be >= 1")
        return self

    def policy_gradient_scale(self):
        """Policy-gradient multiplier.

        The gradient w.r.t. the policy carries a factor lambda while softmax
        logits must move O(1/lambda) and Gaussian means O(1), so the named
        scales undo that mismatch.
        """
        s = self.optimizer.policy_scale
        if s == "inverse_lambda":
            return 1.0 / self.lam
        if s == "inverse_lambda_sq":
            return 1.0 / self.lam ** 2
        return float(s)

    def to_dict(self):
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


_SECTIONS = {"env": EnvConfig, "optimizer": OptimizerConfig}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise InvalidValue(f"{where or 'config'} must be a JSON object")
    names = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        attr = "lam" if (cls is SdecConfig and key == "lambda") else key
        if attr not in names or (cls is SdecConfig and key == "lam"):
            raise UnknownKey(f"unknown config key {where}{key!r}")
        if cls is SdecConfig and key in _SECTIONS:
            value = _build(_SECTIONS[key], value, f"{key}.")
        elif cls is SdecConfig and key == "families":
            value = _build(FamiliesConfig, value, "families.")
        elif cls is FamiliesConfig:
            value = _build(FamilyConfig, value, f"families.{key}.")
        elif isinstance(value, dict) and not (cls is EnvConfig and key == "params"):
            raise InvalidValue(f"{where}{key} must not be an object")
        kwargs[attr] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise InvalidValue(str(exc)) from None


def config_from_dict(data):
    cfg = _build(SdecConfig, copy.deepcopy(data), "")
    _coerce_types(cfg)
    return cfg.validate()


def _coerce_types(cfg):
    def num(obj, name, kind):
        v = getattr(obj, name)
        if v is None:
            return
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise InvalidValue(f"{name} must be a number, got {v!r}")
        if kind is int:
            if float(v) != int(v):
                raise InvalidValue(f"{name} must be an integer, got {v!r}")
            setattr(obj, name, int(v))
        else:
            setattr(obj, name, float(v))

    for name in ("lam", "eta", "gamma", "trace_decay", "init_scale", "behavior_epsilon"):
        num(cfg, name, float)
    for name in ("episodes", "collect", "iterations", "replay_capacity", "batch_size", "multi_step",
                 "trace_max", "horizon", "eval_every", "eval_episodes", "seed"):
        num(cfg, name, int)
    num(cfg.optimizer, "zeta0", float)
    num(cfg.optimizer, "kl_inner_iters", int)
    if not isinstance(cfg.optimizer.policy_scale, str):
        num(cfg.optimizer, "policy_scale", float)
    for fam in (cfg.families.value, cfg.families.policy, cfg.families.dual):
        num(fam, "n_centers", int)
        num(fam, "seed", int)
        num(fam, "init_log_std", float)
    for name in ("refresh_behavior", "timing"):
        if not isinstance(getattr(cfg, name), bool):
            raise InvalidValue(f"{name} must be true or false")


def load_config(path, environ=None):
    """Read a JSON config; the ``SDEC_SEED`` environment variable overrides ``seed``."""
    environ = os.environ if environ is None else environ
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    cfg = config_from_dict(data)
    if environ.get("SDEC_SEED"):
        try:
            cfg.seed = int(environ["SDEC_SEED"])
        except ValueError:
            raise InvalidValue(f"SDEC_SEED must be an integer, got {environ['SDEC_SEED']!r}") from None
    return cfg
