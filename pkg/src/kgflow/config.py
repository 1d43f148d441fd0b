"""Run configuration: flat ``key = value`` text with per-dataset profiles.

Hyperparameter keys use the names of the published settings table so that
values can be copied across unchanged.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields

from .controller import Horizons
from .training import MASKING_MODES, TrainConfig

TIE_MODES = ("mean", "pessimistic", "optimistic")
UPDATE_SCOPES = ("visited", "seen")


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


@dataclass
class RunConfig:
    profile: str = "toy"
    train_path: str = ""
    valid_path: str = ""
    test_path: str = ""
    negatives_path: str = ""
    output_dir: str = "run"
    seed: int = 0
    batch_size: int = 20
    n_dims_att: int = 16
    n_dims: int = 32
    max_sampled_edges_per_step: int = 10000
    max_attended_nodes_per_step: int = 10
    max_sampled_edges_per_node: int = 10
    max_seen_nodes_per_step: int = 40
    n_steps_of_u_flow: int = 1
    n_steps_of_c_flow: int = 6
    learning_rate: float = 0.003
    grad_clipnorm: float = 1.0
    n_epochs: int = 3
    mode: str = "standard"
    add_inverse: bool = True
    add_self_loops: bool = True
    epoch_fraction: float = 1.0
    checkpoint_fractions: list[float] = field(default_factory=lambda: [0.3, 0.5, 0.7, 1.0])
    ties: str = "mean"
    eval_batch_size: int = 50
    update_scope: str = "visited"
    log_timing: bool = True
    prune_threshold: float = 0.01

    @property
    def horizons(self) -> Horizons:
        return Horizons(
            max_sampled_edges_per_node=self.max_sampled_edges_per_node,
            max_seen_nodes_per_step=self.max_seen_nodes_per_step,
            max_attended_nodes_per_step=self.max_attended_nodes_per_step,
            n_steps_of_c_flow=self.n_steps_of_c_flow,
            n_steps_of_u_flow=self.n_steps_of_u_flow,
            n_dims=self.n_dims,
            n_dims_att=self.n_dims_att,
            max_sampled_edges_per_step=self.max_sampled_edges_per_step,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.batch_size, self.learning_rate, self.grad_clipnorm, self.n_epochs, self.mode,
                           self.horizons, self.seed, self.epoch_fraction, self.update_scope)

    def validate(self, check_paths: bool = True) -> None:
        try:
            self.horizons
        except ValueError as exc:
            raise ConfigError(_horizon_key(str(exc)), str(exc)) from None
        positive = ("batch_size", "n_epochs", "eval_batch_size")
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate", "must be non-negative")
        if self.grad_clipnorm <= 0:
            raise ConfigError("grad_clipnorm", "must be positive")
        if not 0.0 < self.epoch_fraction <= 1.0:
            raise ConfigError("epoch_fraction", "must lie in (0, 1]")
        if any(not 0.0 < f for f in self.checkpoint_fractions):
            raise ConfigError("checkpoint_fractions", "fractions must be positive")
        for key, allowed in (("mode", MASKING_MODES), ("ties", TIE_MODES), ("update_scope", UPDATE_SCOPES)):
            if getattr(self, key) not in allowed:
                raise ConfigError(key, f"must be one of {', '.join(allowed)}")
        if self.profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile; choose from {', '.join(PROFILES)}")
        if check_paths:
            for key in ("train_path", "valid_path", "test_path", "negatives_path"):
                path = getattr(self, key)
                if path and not os.path.exists(path):
                    raise ConfigError(key, f"path does not exist: {path}")


def _horizon_key(message: str) -> str | None:
    return message.split()[0] if message else None


_APPENDIX = dict(n_dims_att=50, n_dims=100, max_sampled_edges_per_step=10000, max_attended_nodes_per_step=20,
                 max_sampled_edges_per_node=200, max_seen_nodes_per_step=200, learning_rate=0.001,
                 grad_clipnorm=1.0, n_epochs=1)

PROFILES: dict[str, dict] = {
    "toy": {},
    "fb15k237": dict(_APPENDIX, batch_size=80, n_steps_of_u_flow=2, n_steps_of_c_flow=6, mode="cutoff"),
    "fb15k": dict(_APPENDIX, batch_size=80, n_steps_of_u_flow=1, n_steps_of_c_flow=6),
    "wn18rr": dict(_APPENDIX, batch_size=100, n_steps_of_u_flow=2, n_steps_of_c_flow=8),
    "wn18": dict(_APPENDIX, batch_size=100, n_steps_of_u_flow=1, n_steps_of_c_flow=8),
    "yago310": dict(_APPENDIX, batch_size=100, n_steps_of_u_flow=1, n_steps_of_c_flow=6, learning_rate=0.0001),
    "nell995": dict(_APPENDIX, batch_size=10, n_dims_att=200, n_dims=200, max_attended_nodes_per_step=100,
                    max_sampled_edges_per_node=1000, max_seen_nodes_per_step=1000, n_steps_of_u_flow=1,
                    n_steps_of_c_flow=5, n_epochs=3, add_inverse=False),
}

_FIELDS = {f.name: f for f in fields(RunConfig)}


def profile_config(name: str) -> RunConfig:
    if name not in PROFILES:
        raise ConfigError("profile", f"unknown profile {name!r}; choose from {', '.join(PROFILES)}")
    return dataclasses.replace(RunConfig(), profile=name, **PROFILES[name])


def _parse_value(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "list[float]":
            return [float(v) for v in raw.replace(",", " ").split()]
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None


def parse_config(text: str, base_dir: str | None = None, check_paths: bool = True) -> RunConfig:
    """Parse config text; keys missing from it come from its ``profile``."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(None, f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(key, f"unknown key (line {lineno})")
        if key in values:
            raise ConfigError(key, f"given twice (line {lineno})")
        values[key] = raw
    config = profile_config(values.pop("profile", "toy"))
    for key, raw in values.items():
        value = _parse_value(key, raw)
        if key.endswith("_path") or key == "output_dir":
            if value and base_dir and not os.path.isabs(value):
                value = os.path.normpath(os.path.join(base_dir, value))
        setattr(config, key, value)
    config.validate(check_paths)
    return config


def load_config(source: str | os.PathLike, check_paths: bool = True) -> RunConfig:
    """Read a config file; relative paths inside it resolve against its directory."""
    with open(source, encoding="utf-8") as fh:
        text = fh.read()
    return parse_config(text, os.path.dirname(os.path.abspath(source)), check_paths)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: RunConfig) -> str:
    lines = [f"{name} = {_format_value(getattr(config, name))}" for name in _FIELDS]
    return "\n".join(lines) + "\n"


def config_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)
