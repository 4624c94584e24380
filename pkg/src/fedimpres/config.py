"""Flat key=value experiment configuration.

A config file is plain text, one `key = value` per line, `#` comments.
Command-line flags override file values; defaults (the published
hyperparameters: rho 0.2, training lr 0.01, beta 1, 5 ADMM epochs) fill
the rest. The fully resolved config is echoed to the output directory
and re-running from the echo reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .engine import RoundConfig
from .errors import ConfigError
from .impression import SynthesisConfig


@dataclass
class ExperimentConfig:
    # federated schedule
    algorithm: str = "fedimpres"
    rounds: int = 8
    local_epochs: int = 5
    local_lr: float = 0.01
    batch_size: int = 16
    beta: float = 1.0
    mu: float = 0.0
    warmup_rounds: int = 2
    aggregate: str = "uniform"
    # synthesis
    rho: float = 0.2
    pixel_lr: float = 0.1
    admm_epochs: int = 5
    pixel_steps: int = 10
    synth_batch: int = 16
    init_mode: str = "random"
    ce_only: bool = False
    gamma: float = 0.01  # reserved knob, not consumed by any stage
    # data / partition
    dataset: str = ""
    test_dataset: str = ""
    pool_path: str = ""
    n_clients: int = 4
    alpha: float = 0.01
    toy_classes: int = 4
    toy_per_class: int = 40
    toy_test_per_class: int = 20
    toy_channels: int = 1
    toy_height: int = 8
    toy_width: int = 8
    toy_sigma: float = 0.15
    # model / run
    hidden_dims: str = "32"
    seed: int = 0
    out: str = "out"
    run_id: str = "run"
    track_forgetting: bool = False

    def round_config(self) -> RoundConfig:
        return RoundConfig(algorithm=self.algorithm, total_rounds=self.rounds,
                           local_epochs=self.local_epochs, local_lr=self.local_lr,
                           batch_size=self.batch_size, beta=self.beta, mu=self.mu,
                           warmup_rounds=self.warmup_rounds,
                           aggregate_mode=self.aggregate)

    def synth_config(self) -> SynthesisConfig:
        return SynthesisConfig(admm_epochs=self.admm_epochs,
                               pixel_steps=self.pixel_steps, pixel_lr=self.pixel_lr,
                               rho=self.rho, batch_size=self.synth_batch,
                               init_mode=self.init_mode,
                               ablation_ce_only=self.ce_only)

    def hidden(self) -> list:
        if not self.hidden_dims.strip():
            return []
        try:
            return [int(p) for p in self.hidden_dims.split(",")]
        except ValueError:
            raise ConfigError(f"hidden_dims must be comma-separated ints, "
                              f"got {self.hidden_dims!r}")

    def validate(self) -> None:
        self.round_config()
        self.synth_config()
        self.hidden()
        if self.alpha <= 0.0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.n_clients < 1:
            raise ConfigError(f"n_clients must be >= 1, got {self.n_clients}")
        if min(self.toy_classes, self.toy_per_class, self.toy_channels,
               self.toy_height, self.toy_width) < 1:
            raise ConfigError("toy task dimensions must be >= 1")
        if self.toy_sigma < 0.0:
            raise ConfigError("toy_sigma must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.init_mode == "file" and not self.pool_path:
            raise ConfigError("init_mode=file needs pool_path")


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def _convert(key: str, value: str, where: str):
    kind = _FIELDS[key]
    try:
        if kind == "bool" or kind is bool:
            low = value.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(value)
        if kind == "int" or kind is int:
            return int(value)
        if kind == "float" or kind is float:
            return float(value)
        return value.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind} for key {key!r}")


def parse_config(path=None, overrides=None) -> ExperimentConfig:
    """File values, then flag overrides, then defaults; validated."""
    values = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in text.split("=", 1))
                if key not in _FIELDS:
                    raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _convert(key, value, f"{path}:{lineno}")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"unknown override key {key!r}")
        values[key] = value if not isinstance(value, str) else _convert(key, value, "flag")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def echo_config(cfg: ExperimentConfig) -> str:
    """Deterministic `key = value` text that parse_config round-trips."""
    lines = []
    for name in sorted(_FIELDS):
        value = getattr(cfg, name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
