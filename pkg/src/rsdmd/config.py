"""Versioned JSON experiment configuration.

Every block rejects unknown keys.  :func:`resolve_config` fills in every
default the run will use so the emitted ``resolved_config.json`` is a
complete record of the run.
"""
from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .agents.dqn import DqnConfig
from .agents.ppo import PpoConfig
from .dictionary import DICTIONARY_KINDS, make_dictionary
from .env import ActionGrid, default_bandwidth
from .exceptions import ConfigError, InvalidInput
from .systems import builtin_system

SCHEMA_VERSION = 1
DEFAULT_EXPORT_STEPS = (100, 500, 2000, 4000)


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemBlock(_Block):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)
    dt: float = Field(0.01, gt=0)
    n_steps: int = Field(1000, ge=1)


class GridBlock(_Block):
    k: int = Field(32, ge=1)
    domain: list[tuple[float, float]] | None = None

    @field_validator("domain")
    @classmethod
    def _ordered(cls, v):
        if v is not None and any(lo >= hi for lo, hi in v):
            raise ValueError("each domain interval needs lower < upper")
        return v


class DictionaryBlock(_Block):
    kind: str = "rbf"
    params: dict[str, Any] = Field(default_factory=dict)
    generator: Literal["analytic", "finite_diff"] = "analytic"
    ridge: float | None = Field(None, ge=0)
    rank_tol: float | None = Field(1e-6, ge=0)
    train_epochs: int = Field(0, ge=0)
    train_batch: int = Field(256, ge=1)
    gamma_reg: float = Field(0.0, ge=0)
    learning_rate: float = Field(1e-3, gt=0)

    @field_validator("kind")
    @classmethod
    def _known(cls, v):
        if v not in DICTIONARY_KINDS:
            raise ValueError(f"unknown dictionary kind {v!r}; choose from {list(DICTIONARY_KINDS)}")
        return v


class AgentBlock(_Block):
    kind: Literal["bandit", "dqn", "ppo"] = "bandit"
    window: int | None = Field(None, ge=0)
    epsilon: float | None = Field(None, ge=0, le=1)
    q_init: float | None = None
    params: dict[str, Any] = Field(default_factory=dict)


class RewardBlock(_Block):
    r0: float = 1.0
    alpha_exp: float = Field(0.15, ge=0)
    eps_kde: float = Field(1e-2, gt=0)
    bandwidth: float | None = Field(None, gt=0)
    n_modes: int = Field(5, ge=1)
    floor: float = -10.0


class RunBlock(_Block):
    t_max: int = Field(4000, ge=0)
    seed: int = Field(0, ge=0)
    output_dir: str | None = None
    checkpoint_every: int = Field(500, ge=0)
    export_steps: list[int] = Field(default_factory=lambda: list(DEFAULT_EXPORT_STEPS))
    export_resolution: int = Field(50, ge=2)
    export_modes: list[int] = Field(default_factory=lambda: [0, 1])
    keep_archive: bool = True


class ExperimentConfig(_Block):
    schema_version: Literal[1] = SCHEMA_VERSION
    system: SystemBlock
    grid: GridBlock = Field(default_factory=GridBlock)
    dictionary: DictionaryBlock = Field(default_factory=DictionaryBlock)
    agent: AgentBlock = Field(default_factory=AgentBlock)
    reward: RewardBlock = Field(default_factory=RewardBlock)
    run: RunBlock = Field(default_factory=RunBlock)


def _describe(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(data) -> ExperimentConfig:
    """Validate a mapping, JSON string or path; raises :class:`ConfigError`."""
    if isinstance(data, ExperimentConfig):
        return data
    if isinstance(data, Path) or (isinstance(data, str) and not data.lstrip().startswith("{")):
        try:
            data = Path(data).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    if isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from None


def resolve_config(config) -> ExperimentConfig:
    """Validate and make every implicit default explicit."""
    cfg = parse_config(config).model_copy(deep=True)
    system = builtin_system(cfg.system.name, cfg.system.params)
    cfg.system.params = dict(system.params)
    if cfg.grid.domain is None:
        cfg.grid.domain = [tuple(map(float, b)) for b in system.domain]
    if len(cfg.grid.domain) != system.dim:
        raise ConfigError(f"grid domain has {len(cfg.grid.domain)} axes, system has {system.dim}")
    if cfg.reward.bandwidth is None:
        cfg.reward.bandwidth = default_bandwidth(ActionGrid(cfg.grid.k, cfg.grid.domain))

    dict_params = dict(cfg.dictionary.params)
    if cfg.dictionary.kind == "rbf" and dict_params.get("domain") is None and dict_params.get("centers") is None:
        dict_params["domain"] = [list(b) for b in cfg.grid.domain]
    try:
        dictionary = make_dictionary(cfg.dictionary.kind, **dict_params)
    except (TypeError, InvalidInput) as exc:
        raise ConfigError(f"dictionary: {exc}") from None
    cfg.dictionary.params = {k: _jsonable(v) for k, v in dictionary.get_params().items()}

    agent = cfg.agent
    if agent.window is None:
        agent.window = 0 if agent.kind == "bandit" else 5
    if agent.kind == "bandit":
        if agent.params:
            raise ConfigError("agent.params is not used by the bandit; use agent.epsilon and agent.q_init")
        agent.epsilon = 0.35 if agent.epsilon is None else agent.epsilon
        agent.q_init = 0.0 if agent.q_init is None else agent.q_init
    else:
        if agent.epsilon is not None or agent.q_init is not None:
            raise ConfigError("agent.epsilon and agent.q_init only apply to the bandit")
        if agent.window == 0:
            raise ConfigError("dqn and ppo need a state window of length >= 1")
        agent.params = agent_hyperparameters(agent.kind, agent.params)
    return cfg


def agent_hyperparameters(kind, params) -> dict:
    cls = {"dqn": DqnConfig, "ppo": PpoConfig}[kind]
    try:
        full = asdict(cls(**params))
    except (TypeError, InvalidInput) as exc:
        raise ConfigError(f"agent.params: {exc}") from None
    return {k: list(v) if isinstance(v, tuple) else v for k, v in full.items()}


def _jsonable(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def config_to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True)
