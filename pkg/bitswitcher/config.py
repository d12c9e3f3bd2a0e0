"""
Run configuration: a flat ``key = value`` text file with ``#`` comments.

Every key has a default below; values in the file are checked against the
type of the default and unknown keys are rejected.
"""
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

from .errors import BitSwitcherError, ConfigError
from .policy import AgentConfig
from .quantization import BitSet, QuantMode
from .trainer import TargetUpdate, TrainConfig, TrainMethod

DEFAULTS: Dict[str, Any] = {
    "dataset.kind": "synthetic",
    "dataset.path": "",
    "dataset.mean": 0.1307,
    "dataset.std": 0.3081,
    "dataset.classes": 10,
    "dataset.train_samples": 6000,
    "dataset.test_samples": 1000,
    "dataset.noise": 0.35,
    "net.bits": "4,3,2",
    "net.storage": "round_master",
    "net.checkpoint": "",
    "train.epochs": 20,
    "train.batch": 64,
    "train.lr": 0.02,
    "train.momentum": 0.9,
    "train.weight_decay": 1e-4,
    "train.k": 2,
    "train.tau": 0.995,
    "train.temperature": 1.0,
    "train.seed": 0,
    "train.method": "full",
    "train.target_update": "ema",
    "train.copy_interval": 100,
    "train.mixed_configs": 16,
    "train.finetune_subnets": 5,
    "train.finetune_epochs": 3,
    "train.finetune_lr": 0.001,
    "train.sweep_k": "1,2,3,4",
    "agent.alpha": 0.1,
    "agent.preset": "",
    "agent.steps": 20000,
    "agent.epsilon_start": 1.0,
    "agent.epsilon_end": 0.05,
    "agent.lr": 1e-3,
    "agent.batch": 64,
    "agent.replay": 50000,
    "agent.target_tau": 0.99,
    "agent.subset": 0.1,
    "agent.seed": 0,
    "agent.alphas": "0,0.05,0.2,1",
    "agent.workers": 1,
    "oracle.cap": 100000,
    "out.dir": "runs",
    "out.on_exists": "refuse",
}

CHOICES = {
    "dataset.kind": ("synthetic", "idx"),
    "net.storage": tuple(m.value for m in QuantMode),
    "train.method": tuple(m.value for m in TrainMethod),
    "train.target_update": tuple(m.value for m in TargetUpdate),
    "agent.preset": ("", "har", "ccr"),
    "out.on_exists": ("refuse", "timestamp"),
}

# Defaults that differ from the library dataclasses, noted in the resolved dump
DEVIATIONS = {
    "agent.lr": f"desk-scale default, AgentConfig.lr is {AgentConfig.lr:g}",
}


def _coerce(key: str, raw: str) -> Any:
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"expected true/false, got '{raw}'")
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"malformed value for {key}: {e}") from e
    return raw


class RunConfig:
    """
    Resolved configuration of one command.

    Args:
        overrides (dict, optional): Values replacing the defaults, already typed
            or as strings.
    """

    def __init__(self, overrides: Optional[Dict[str, Any]] = None):
        self.values: Dict[str, Any] = dict(DEFAULTS)
        for key, value in (overrides or {}).items():
            self.set(key, value)
        self.validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        """
        Parses a configuration file.

        Raises:
            ConfigError: On unreadable files, malformed lines or unknown keys.
        """
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read configuration {path}: {e}") from e
        return cls(parse_lines(text.splitlines(), str(path)))

    def set(self, key: str, value: Any):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key '{key}'")
        if isinstance(value, str):
            value = _coerce(key, value.strip())
        self.values[key] = value

    def __getitem__(self, key: str) -> Any:
        if key not in self.values:
            raise ConfigError(f"unknown configuration key '{key}'")
        return self.values[key]

    def validate(self):
        for key, allowed in CHOICES.items():
            if self.values[key] not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got '{self.values[key]}'")
        try:
            self.bitset
            self.train_config()
            self.agent_config()
            self.float_list("agent.alphas")
            self.int_list("train.sweep_k")
        except ConfigError:
            raise
        except BitSwitcherError as e:
            raise ConfigError(f"invalid configuration: {e}") from e
        if self.values["oracle.cap"] < 1:
            raise ConfigError(f"oracle.cap must be positive, got {self.values['oracle.cap']}")

    @property
    def bitset(self) -> BitSet:
        return BitSet.parse(self.values["net.bits"])

    @property
    def storage_mode(self) -> QuantMode:
        return QuantMode(self.values["net.storage"])

    def int_list(self, key: str) -> list:
        try:
            return [int(part) for part in str(self[key]).split(",") if part.strip()]
        except ValueError as e:
            raise ConfigError(f"malformed list for {key}: {e}") from e

    def float_list(self, key: str) -> list:
        try:
            return [float(part) for part in str(self[key]).split(",") if part.strip()]
        except ValueError as e:
            raise ConfigError(f"malformed list for {key}: {e}") from e

    def train_config(self, **changes) -> TrainConfig:
        v = self.values
        settings = dict(
            epochs=v["train.epochs"], batch_size=v["train.batch"], lr=v["train.lr"],
            momentum=v["train.momentum"], weight_decay=v["train.weight_decay"], k=v["train.k"],
            tau=v["train.tau"], temperature=v["train.temperature"], seed=v["train.seed"],
            method=v["train.method"], target_update=v["train.target_update"],
            copy_interval=v["train.copy_interval"], mixed_configs=v["train.mixed_configs"],
        )
        settings.update(changes)
        return TrainConfig(**settings)

    def alpha(self) -> float:
        preset = self.values["agent.preset"]
        return AgentConfig.preset_alpha(preset) if preset else float(self.values["agent.alpha"])

    def agent_config(self, **changes) -> AgentConfig:
        v = self.values
        settings = dict(
            alpha=self.alpha(), episodes=v["agent.steps"], epsilon_start=v["agent.epsilon_start"],
            epsilon_end=v["agent.epsilon_end"], lr=v["agent.lr"], batch_size=v["agent.batch"],
            replay_capacity=v["agent.replay"], target_tau=v["agent.target_tau"], subset=v["agent.subset"],
            seed=v["agent.seed"], workers=v["agent.workers"],
        )
        settings.update(changes)
        return AgentConfig(**settings)

    def dump(self) -> str:
        lines = []
        for key in DEFAULTS:
            line = f"{key} = {self.values[key]}"
            if key in DEVIATIONS and self.values[key] == DEFAULTS[key]:
                line += f"  # {DEVIATIONS[key]}"
            lines.append(line + "\n")
        return "".join(lines)

    def write_resolved(self, directory: Union[str, Path]) -> Path:
        path = Path(directory) / "config.resolved.txt"
        path.write_text(self.dump())
        logging.info(f"Resolved configuration written to {path}")
        return path


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, str]:
    values = {}
    for number, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{line}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{number}: unknown configuration key '{key}'")
        values[key] = value
    return values
