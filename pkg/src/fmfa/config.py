"""Run configuration: a flat key-value text file with strict parsing.

Lines look like ``tau1 = 0.02``. Blank lines are skipped and ``#`` starts
a comment, either on its own line or after a value. Unknown and duplicate
keys are rejected so a typo cannot silently fall back to a default.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .params import SIGMA_AUTO, HyperParams, LossSwitches

__all__ = ["ConfigError", "RunConfig", "parse_run_config", "load_run_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Hyperparameters plus trainer and synthetic-data settings.

    ``samples_per_id`` counts training pairs per identity; ``eval_per_id``
    additional pairs are generated and held out for retrieval evaluation.
    """

    # Loss hyperparameters
    tau1: float = 0.02
    tau2: float = 1.0
    alpha: float = 10.0
    lse_lambda: float = 1.0
    sigma: float | str = SIGMA_AUTO
    epsilon: float = 1e-8
    margin_text_joint: float = 0.1
    margin_image_joint: float = 0.1
    # Objective switches and weights
    matching: str = "asdm"
    efa: bool = True
    weight_matching: float = 1.0
    weight_efa: float = 1.0
    # Trainer settings
    epochs: int = 40
    lr: float = 0.5
    lr_schedule: str = "cosine"
    batch_size: int = 16
    seed: int = 0
    # Synthetic data settings
    num_identities: int = 8
    samples_per_id: int = 4
    eval_per_id: int = 2
    raw_dim: int = 32
    embed_dim: int = 16
    tokens_per_sample: int = 4
    patches_per_sample: int = 6
    noise_sigma: float = 0.05

    def __post_init__(self):
        positive = (
            "tau1", "tau2", "lse_lambda", "epsilon", "lr", "weight_matching", "weight_efa",
        )
        for name in positive:
            if not (getattr(self, name) > 0.0):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("alpha", "margin_text_joint", "margin_image_joint", "noise_sigma"):
            if getattr(self, name) < 0.0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.sigma != SIGMA_AUTO and not (
            isinstance(self.sigma, float) and self.sigma > 0.0
        ):
            raise ConfigError(f'sigma must be positive or "{SIGMA_AUTO}", got {self.sigma!r}')
        if self.matching not in ("asdm", "sdm"):
            raise ConfigError(f"matching must be asdm or sdm, got {self.matching!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be cosine or constant, got {self.lr_schedule!r}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.num_identities < 2:
            raise ConfigError(f"num_identities must be at least 2, got {self.num_identities}")
        at_least_one = (
            "epochs", "samples_per_id", "eval_per_id", "raw_dim", "embed_dim",
            "tokens_per_sample", "patches_per_sample",
        )
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")

    def to_hyperparams(self) -> HyperParams:
        return HyperParams(
            tau1=self.tau1,
            tau2=self.tau2,
            alpha=self.alpha,
            lse_lambda=self.lse_lambda,
            sigma=self.sigma,
            epsilon=self.epsilon,
            margin_text_joint=self.margin_text_joint,
            margin_image_joint=self.margin_image_joint,
        )

    def to_switches(self) -> LossSwitches:
        return LossSwitches(matching=self.matching, use_efa=self.efa, use_id=True)

    def loss_weights(self) -> dict[str, float]:
        return {
            "id": 1.0,
            self.matching: self.weight_matching,
            "efa": self.weight_efa,
        }


def _parse_bool(key: str, raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ConfigError(f"{key} must be a boolean (on/off), got {raw!r}")


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} must be an integer, got {raw!r}") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} must be a number, got {raw!r}") from None


def _parse_sigma(key: str, raw: str):
    if raw.lower() in (SIGMA_AUTO, "auto-1-over-n"):
        return SIGMA_AUTO
    return _parse_float(key, raw)


_PARSERS = {
    "sigma": _parse_sigma,
    "matching": lambda key, raw: raw.lower(),
    "lr_schedule": lambda key, raw: raw.lower(),
    "efa": _parse_bool,
}


def parse_run_config(text: str) -> RunConfig:
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw_line!r}")
        key, _, raw_value = line.partition("=")
        key = key.strip()
        raw_value = raw_value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not raw_value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        parser = _PARSERS.get(key)
        if parser is not None:
            values[key] = parser(key, raw_value)
        elif known[key] == "int":
            values[key] = _parse_int(key, raw_value)
        else:
            values[key] = _parse_float(key, raw_value)
    return RunConfig(**values)


def load_run_config(path) -> RunConfig:
    return parse_run_config(Path(path).read_text())
