"""Experiment configuration: parsing, validation and the shipped presets.

Configs are JSON documents tagged with a versioned schema id. Parsing raises
`ConfigError` naming the offending field.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from ..agents import Algorithm, EpsilonSchedule, StepSchedule
from ..envs import Bandit, Chain, ChainConfig, Roulette
from ..mdp import sor_star

SCHEMA_ID = "sorql.experiment/1"
LABEL_RE = re.compile(r"^[A-Za-z0-9_]+$")
CHAIN_RE = re.compile(r"^chain(?:\((\d+)\))?$")
ENV_NAMES = ("roulette", "bandit39", "chain(m)", "cartpole72")
SINGLE_STATE_ENVS = ("roulette", "bandit39")
METRIC_NAMES = (
    "max_q",
    "episode_return",
    "rolling_mean_return",
    "episodes_to_threshold",
    "left_action_probability",
    "w_trace",
)


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class MetricSpec:
    name: str
    window: int = 0
    threshold: float = 0.0

    @property
    def tag(self) -> str:
        """Record label, e.g. rolling_mean_return_50 or episodes_to_threshold_195_50."""
        if self.name == "rolling_mean_return":
            return f"{self.name}_{self.window}"
        if self.name == "episodes_to_threshold":
            thr = format(self.threshold, "g").replace(".", "p").replace("-", "m")
            return f"{self.name}_{thr}_{self.window}"
        return self.name

    @property
    def text(self) -> str:
        if self.name == "rolling_mean_return":
            return f"{self.name}({self.window})"
        if self.name == "episodes_to_threshold":
            return f"{self.name}({format(self.threshold, 'g')},{self.window})"
        return self.name

    @classmethod
    def parse(cls, text: str, field_name: str = "metrics") -> "MetricSpec":
        m = re.fullmatch(r"\s*([a-z_]+)\s*(?:\(([^)]*)\))?\s*", str(text))
        if not m or m.group(1) not in METRIC_NAMES:
            raise ConfigError(field_name, f"unknown metric {text!r}")
        name, args = m.group(1), m.group(2)
        parts = [a.strip() for a in args.split(",")] if args else []
        try:
            if name == "rolling_mean_return":
                if len(parts) != 1:
                    raise ValueError
                spec = cls(name, window=int(parts[0]))
            elif name == "episodes_to_threshold":
                if len(parts) != 2:
                    raise ValueError
                spec = cls(name, window=int(parts[1]), threshold=float(parts[0]))
            else:
                if parts:
                    raise ValueError
                spec = cls(name)
        except ValueError:
            raise ConfigError(field_name, f"bad arguments in metric {text!r}") from None
        if name in ("rolling_mean_return", "episodes_to_threshold") and spec.window < 1:
            raise ConfigError(field_name, "metric window must be >= 1")
        return spec


@dataclass(frozen=True)
class WSpec:
    """How an agent's relaxation weight is chosen."""

    mode: str = "fixed"  # fixed | estimated | w_star_fraction
    value: float = 1.0

    @property
    def text(self) -> str:
        if self.mode == "estimated":
            return "estimated"
        return f"{self.mode}: {format(self.value, '.17g')}"

    @classmethod
    def parse(cls, raw: Any, field_name: str) -> "WSpec":
        if isinstance(raw, (int, float)) and not isinstance(raw, bool):
            return cls("fixed", float(raw))
        text = str(raw).strip()
        if text == "estimated":
            return cls("estimated", 1.0)
        m = re.fullmatch(r"(fixed|w_star_fraction)\s*:\s*(\S+)", text)
        if not m:
            raise ConfigError(field_name, f"cannot parse w specification {raw!r}")
        try:
            value = float(m.group(2))
        except ValueError:
            raise ConfigError(field_name, f"non-numeric w in {raw!r}") from None
        if not value > 0:
            raise ConfigError(field_name, "w must be positive")
        return cls(m.group(1), value)


@dataclass(frozen=True)
class EstimatorSpec:
    w0: float = 1.0
    step_exponent: float = 1.0
    normalization: str = "visits"
    frozen: bool = False


@dataclass(frozen=True)
class AgentConfig:
    label: str
    algorithm: Algorithm
    w: WSpec = WSpec()
    schedule: StepSchedule = StepSchedule()
    estimator: EstimatorSpec = EstimatorSpec()
    step_counter: str = "per_table"
    literal_b_branch: bool = False
    allow_above_w_star: bool = False


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    env: str
    gamma: float
    episodes: int
    agents: tuple
    epsilon: EpsilonSchedule = EpsilonSchedule(0.1)
    update_mode: str = "asynchronous"
    seeds: tuple = (0,)
    metrics: tuple = (MetricSpec("max_q"),)
    cadence: int = 1
    master_seed: int = 0
    max_steps_per_episode: int = 0

    @property
    def chain_m(self) -> Optional[int]:
        m = CHAIN_RE.fullmatch(self.env)
        if not m:
            return None
        return int(m.group(1)) if m.group(1) else 8

    def replace(self, **changes) -> "ExperimentSpec":
        """A re-validated copy with top-level config fields overridden."""
        doc = spec_to_dict(self)
        doc.update({k: list(v) if isinstance(v, tuple) else v for k, v in changes.items()})
        return parse_spec(doc)


def model_w_star(env: str, gamma: float) -> Optional[float]:
    """Exact w* for environments with a known model; None for CartPole."""
    if env == "roulette":
        return sor_star(Roulette().to_mdp(gamma))
    if env == "bandit39":
        return sor_star(Bandit().to_mdp(gamma))
    m = CHAIN_RE.fullmatch(env)
    if m:
        m_val = int(m.group(1)) if m.group(1) else 8
        return sor_star(Chain(config=ChainConfig(m_val)).to_mdp(gamma))
    return None


def resolve_w(agent: AgentConfig, env: str, gamma: float) -> float:
    """Fixed weight used by an agent (1.0 for estimated weights before learning)."""
    if agent.w.mode == "fixed":
        return agent.w.value
    if agent.w.mode == "w_star_fraction":
        w_star = model_w_star(env, gamma)
        if w_star is None:
            raise ConfigError("w", f"w_star_fraction needs a known model; {env} has none")
        return agent.w.value * w_star
    return 1.0


# ------------------------------------------------------------------ parsing

def _get(doc: dict, key: str, prefix: str, default=..., kind=None):
    name = f"{prefix}{key}"
    if key not in doc:
        if default is ...:
            raise ConfigError(name, "missing required field")
        return default
    value = doc[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"expected a number, got {value!r}")
        value = float(value)
    if kind is bool and not isinstance(value, bool):
        raise ConfigError(name, f"expected true/false, got {value!r}")
    if kind is str and not isinstance(value, str):
        raise ConfigError(name, f"expected a string, got {value!r}")
    return value


def _parse_schedule(raw: Any, prefix: str) -> StepSchedule:
    if not isinstance(raw, dict):
        raise ConfigError(prefix.rstrip("."), "expected an object")
    kind = _get(raw, "kind", prefix, "polynomial", str)
    try:
        if kind == "polynomial":
            return StepSchedule.polynomial(_get(raw, "exponent", prefix, 0.8, float))
        if kind == "linear_shifted":
            return StepSchedule.linear_shifted(
                _get(raw, "numerator", prefix, kind=float), _get(raw, "shift", prefix, kind=float)
            )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(prefix.rstrip("."), str(exc)) from None
    raise ConfigError(f"{prefix}kind", f"unknown schedule kind {kind!r}")


def _parse_epsilon(raw: Any) -> EpsilonSchedule:
    if isinstance(raw, (int, float)) and not isinstance(raw, bool):
        raw = {"start": raw}
    if not isinstance(raw, dict):
        raise ConfigError("epsilon", "expected a number or an object")
    start = _get(raw, "start", "epsilon.", kind=float)
    end = _get(raw, "end", "epsilon.", None, float)
    decay = _get(raw, "decay_episodes", "epsilon.", 0, int)
    try:
        return EpsilonSchedule(start, end, decay)
    except ValueError as exc:
        raise ConfigError("epsilon", str(exc)) from None


def _parse_agent(raw: Any, k: int, env: str, gamma: float) -> AgentConfig:
    prefix = f"agents[{k}]."
    if not isinstance(raw, dict):
        raise ConfigError(f"agents[{k}]", "expected an object")
    try:
        algorithm = Algorithm(_get(raw, "algorithm", prefix, kind=str))
    except ValueError:
        raise ConfigError(f"{prefix}algorithm", f"unknown algorithm {raw.get('algorithm')!r}") from None
    label = _get(raw, "label", prefix, algorithm.value, str)
    if not LABEL_RE.match(label):
        raise ConfigError(f"{prefix}label", "labels must be alphanumeric or underscore")
    default_w = "estimated" if algorithm.model_free else "fixed: 1"
    w = WSpec.parse(raw.get("w", default_w), f"{prefix}w")
    if algorithm.model_free and w.mode != "estimated":
        raise ConfigError(f"{prefix}w", f"{algorithm.value} requires w = 'estimated'")
    if not algorithm.model_free and w.mode == "estimated":
        raise ConfigError(f"{prefix}w", "only MF variants estimate w")
    try:
        w_value = resolve_w(AgentConfig(label, algorithm, w), env, gamma)
    except ConfigError as exc:
        raise ConfigError(f"{prefix}w", str(exc).split(": ", 1)[1]) from None
    if algorithm in (Algorithm.QL, Algorithm.DQL) and w_value != 1.0:
        raise ConfigError(f"{prefix}w", f"{algorithm.value} uses w = 1")
    schedule = _parse_schedule(raw.get("schedule", {}), f"{prefix}schedule.")
    est_raw = raw.get("estimator", {})
    if not isinstance(est_raw, dict):
        raise ConfigError(f"{prefix}estimator", "expected an object")
    ep = f"{prefix}estimator."
    estimator = EstimatorSpec(
        _get(est_raw, "w0", ep, 1.0, float),
        _get(est_raw, "step_exponent", ep, 1.0, float),
        _get(est_raw, "normalization", ep, "visits", str),
        _get(est_raw, "frozen", ep, False, bool),
    )
    if not 0.5 < estimator.step_exponent <= 1.0:
        raise ConfigError(f"{ep}step_exponent", "must lie in (0.5, 1]")
    if estimator.normalization not in ("visits", "total"):
        raise ConfigError(f"{ep}normalization", "must be 'visits' or 'total'")
    if not 1.0 <= estimator.w0 <= 1.0 / (1.0 - gamma):
        raise ConfigError(f"{ep}w0", "must lie in [1, 1/(1 - gamma)]")
    step_counter = _get(raw, "step_counter", prefix, "per_table", str)
    if step_counter not in ("shared", "per_table"):
        raise ConfigError(f"{prefix}step_counter", "must be 'shared' or 'per_table'")
    agent = AgentConfig(
        label, algorithm, w, schedule, estimator, step_counter,
        _get(raw, "literal_b_branch", prefix, False, bool),
        _get(raw, "allow_above_w_star", prefix, False, bool),
    )
    w_star = model_w_star(env, gamma)
    if w.mode != "estimated" and w_star is not None and not agent.allow_above_w_star:
        if w_value > w_star * (1.0 + 1e-12):
            raise ConfigError(
                f"{prefix}w",
                f"w = {w_value} exceeds w* = {w_star}; "
                "set allow_above_w_star to run it anyway",
            )
    return agent


def parse_spec(doc: dict) -> ExperimentSpec:
    if not isinstance(doc, dict):
        raise ConfigError("<root>", "expected a JSON object")
    schema = doc.get("schema")
    if schema != SCHEMA_ID:
        raise ConfigError("schema", f"expected {SCHEMA_ID!r}, got {schema!r}")
    name = _get(doc, "name", "", kind=str)
    if not LABEL_RE.match(name):
        raise ConfigError("name", "must be alphanumeric or underscore")
    env = _get(doc, "env", "", kind=str)
    if env not in ("roulette", "bandit39", "cartpole72") and not CHAIN_RE.fullmatch(env):
        raise ConfigError("env", f"unknown environment {env!r}; expected one of {ENV_NAMES}")
    m = CHAIN_RE.fullmatch(env)
    if m and m.group(1) is not None and int(m.group(1)) < 1:
        raise ConfigError("env", "chain needs m >= 1")
    gamma = _get(doc, "gamma", "", kind=float)
    if not 0.0 <= gamma < 1.0:
        raise ConfigError("gamma", "must lie in [0, 1)")
    episodes = _get(doc, "episodes", "", kind=int)
    if episodes < 0:
        raise ConfigError("episodes", "must be >= 0")
    agents_raw = _get(doc, "agents", "")
    if not isinstance(agents_raw, list) or not agents_raw:
        raise ConfigError("agents", "need at least one agent")
    agents = tuple(_parse_agent(a, k, env, gamma) for k, a in enumerate(agents_raw))
    labels = [a.label for a in agents]
    if len(set(labels)) != len(labels):
        raise ConfigError("agents", "agent labels must be unique")
    epsilon = _parse_epsilon(doc.get("epsilon", 0.1))
    update_mode = _get(doc, "update_mode", "", "asynchronous", str)
    if update_mode not in ("asynchronous", "synchronous"):
        raise ConfigError("update_mode", "must be 'asynchronous' or 'synchronous'")
    if update_mode == "synchronous" and env not in SINGLE_STATE_ENVS:
        raise ConfigError("update_mode", "synchronous updates need a single-state environment")
    seeds = _get(doc, "seeds", "")
    if (
        not isinstance(seeds, list)
        or not seeds
        or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds)
    ):
        raise ConfigError("seeds", "need a non-empty list of non-negative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds", "seeds must be unique")
    metrics_raw = _get(doc, "metrics", "", ["max_q"])
    if not isinstance(metrics_raw, list) or not metrics_raw:
        raise ConfigError("metrics", "need a non-empty list of metric tags")
    metrics = tuple(MetricSpec.parse(t, f"metrics[{k}]") for k, t in enumerate(metrics_raw))
    tags = [mt.tag for mt in metrics]
    if len(set(tags)) != len(tags):
        raise ConfigError("metrics", "duplicate metric")
    if any(mt.name == "left_action_probability" for mt in metrics) and not m:
        raise ConfigError("metrics", "left_action_probability is defined for the chain only")
    cadence = _get(doc, "cadence", "", 1, int)
    if cadence < 1:
        raise ConfigError("cadence", "must be >= 1")
    master_seed = _get(doc, "master_seed", "", 0, int)
    if master_seed < 0:
        raise ConfigError("master_seed", "must be >= 0")
    max_steps = _get(doc, "max_steps_per_episode", "", 0, int)
    if max_steps < 0:
        raise ConfigError("max_steps_per_episode", "must be >= 0")
    return ExperimentSpec(
        name, env, gamma, episodes, agents, epsilon, update_mode, tuple(seeds),
        metrics, cadence, master_seed, max_steps,
    )


def _schedule_dict(s: StepSchedule) -> dict:
    if s.kind == "polynomial":
        return {"kind": "polynomial", "exponent": s.exponent}
    return {"kind": "linear_shifted", "numerator": s.numerator, "shift": s.shift}


def spec_to_dict(spec: ExperimentSpec) -> dict:
    agents = []
    for a in spec.agents:
        entry = {
            "label": a.label,
            "algorithm": a.algorithm.value,
            "w": a.w.text,
            "schedule": _schedule_dict(a.schedule),
        }
        if a.algorithm.model_free:
            entry["estimator"] = {
                "w0": a.estimator.w0,
                "step_exponent": a.estimator.step_exponent,
                "normalization": a.estimator.normalization,
                "frozen": a.estimator.frozen,
            }
        if a.algorithm.double:
            entry["step_counter"] = a.step_counter
            entry["literal_b_branch"] = a.literal_b_branch
        if a.allow_above_w_star:
            entry["allow_above_w_star"] = True
        agents.append(entry)
    eps = {"start": spec.epsilon.start}
    if spec.epsilon.end is not None:
        eps["end"] = spec.epsilon.end
    if spec.epsilon.decay_episodes:
        eps["decay_episodes"] = spec.epsilon.decay_episodes
    return {
        "schema": SCHEMA_ID,
        "name": spec.name,
        "env": spec.env,
        "gamma": spec.gamma,
        "episodes": spec.episodes,
        "epsilon": eps,
        "update_mode": spec.update_mode,
        "seeds": list(spec.seeds),
        "master_seed": spec.master_seed,
        "max_steps_per_episode": spec.max_steps_per_episode,
        "metrics": [mt.text for mt in spec.metrics],
        "cadence": spec.cadence,
        "agents": agents,
    }


def load_spec(path) -> ExperimentSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return parse_spec(doc)


# ------------------------------------------------------------------ presets

def _agent(label, algorithm, w="fixed: 1", schedule=None, **extra) -> dict:
    entry = {"label": label, "algorithm": algorithm, "w": w}
    entry["schedule"] = schedule or {"kind": "polynomial", "exponent": 0.8}
    if algorithm in ("DQL", "DSORQL", "MF_DSORQL"):
        # presets pool the step-size count of (i, a) over both tables
        entry["step_counter"] = "shared"
    entry.update(extra)
    return entry


def roulette_preset() -> ExperimentSpec:
    agents = [_agent("QL", "QL")]
    agents += [_agent(f"SORQL_w{str(w).replace('.', '_')}", "SORQL", f"fixed: {w}") for w in (1.3, 5, 20)]
    agents += [_agent("DQL", "DQL")]
    agents += [_agent(f"DSORQL_w{str(w).replace('.', '_')}", "DSORQL", f"fixed: {w}") for w in (1.3, 5, 20)]
    return parse_spec({
        "schema": SCHEMA_ID, "name": "roulette", "env": "roulette", "gamma": 0.95,
        "episodes": 100_000, "epsilon": {"start": 0.1}, "update_mode": "synchronous",
        "seeds": list(range(10)), "metrics": ["max_q"], "cadence": 1000, "agents": agents,
    })


def bandit39_preset() -> ExperimentSpec:
    step = {"kind": "linear_shifted", "numerator": 100.0, "shift": 100.0}
    agents = [
        _agent("QL", "QL", schedule=step),
        _agent("SORQL", "SORQL", "w_star_fraction: 1", schedule=step),
        _agent("DQL", "DQL", schedule=step),
        _agent("DSORQL", "DSORQL", "w_star_fraction: 1", schedule=step),
    ]
    return parse_spec({
        "schema": SCHEMA_ID, "name": "bandit39", "env": "bandit39", "gamma": 0.99,
        "episodes": 50_000, "epsilon": {"start": 1.0}, "update_mode": "asynchronous",
        "seeds": list(range(10)), "metrics": ["max_q"], "cadence": 1000, "agents": agents,
    })


def chain_preset(m: int = 8, runs: int = 200) -> ExperimentSpec:
    w_big = "fixed: 1000"
    agents = [
        _agent("QL", "QL"),
        _agent("SORQL", "SORQL", w_big, allow_above_w_star=True),
        _agent("DQL", "DQL"),
        _agent("DSORQL", "DSORQL", w_big, allow_above_w_star=True),
        _agent("SORQL_w1_1", "SORQL", "fixed: 1.1", allow_above_w_star=True),
        _agent("DSORQL_w1_1", "DSORQL", "fixed: 1.1", allow_above_w_star=True),
    ]
    return parse_spec({
        "schema": SCHEMA_ID, "name": "chain", "env": f"chain({m})", "gamma": 0.999,
        "episodes": 400, "epsilon": {"start": 0.1}, "update_mode": "asynchronous",
        "seeds": list(range(runs)), "metrics": ["left_action_probability"], "cadence": 1,
        "agents": agents,
    })


def cartpole72_preset() -> ExperimentSpec:
    step = {"kind": "linear_shifted", "numerator": 40.0, "shift": 100.0}
    agents = [
        _agent("QL", "QL", schedule=step),
        _agent("SORQL", "SORQL", "fixed: 1.1", schedule=step),
        _agent("DQL", "DQL", schedule=step),
        _agent("DSORQL", "DSORQL", "fixed: 1.1", schedule=step),
    ]
    return parse_spec({
        "schema": SCHEMA_ID, "name": "cartpole72", "env": "cartpole72", "gamma": 0.999,
        "episodes": 2000,
        "epsilon": {"start": 1.0, "end": 0.01, "decay_episodes": 500},
        "update_mode": "asynchronous", "seeds": list(range(5)),
        "metrics": ["episode_return", "episodes_to_threshold(195,50)"], "cadence": 100,
        "agents": agents,
    })


PRESETS = {
    "roulette": roulette_preset,
    "bandit39": bandit39_preset,
    "chain": chain_preset,
    "cartpole72": cartpole72_preset,
}


def get_preset(name: str) -> ExperimentSpec:
    if name not in PRESETS:
        raise ConfigError("preset", f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()
