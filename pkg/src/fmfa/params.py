"""Shared hyperparameter and loss-report types."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["HyperParams", "LossSwitches", "LossReport", "sum_reports"]

#: Sentinel for the retention threshold meaning "one over the patch count".
SIGMA_AUTO = "auto"


@dataclass(frozen=True)
class HyperParams:
    """Tunable constants shared by the matching and alignment losses.

    ``sigma`` is either a positive real or the string ``"auto"``, which
    resolves to 1/N for a batch with N patches per image.
    """

    tau1: float = 0.02
    tau2: float = 1.0
    alpha: float = 10.0
    lse_lambda: float = 1.0
    sigma: float | str = SIGMA_AUTO
    epsilon: float = 1e-8
    margin_text_joint: float = 0.1
    margin_image_joint: float = 0.1

    def __post_init__(self):
        for name in ("tau1", "tau2", "lse_lambda", "epsilon"):
            value = getattr(self, name)
            if not (value > 0.0):
                raise ValueError(f"{name} must be positive, got {value}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        for name in ("margin_text_joint", "margin_image_joint"):
            value = getattr(self, name)
            if value < 0.0:
                raise ValueError(f"{name} must be non-negative, got {value}")
        if self.sigma != SIGMA_AUTO and not (isinstance(self.sigma, (int, float)) and self.sigma > 0.0):
            raise ValueError(f'sigma must be positive or "{SIGMA_AUTO}", got {self.sigma!r}')

    def resolve_sigma(self, num_patches: int) -> float:
        if self.sigma == SIGMA_AUTO:
            if num_patches < 1:
                raise ValueError("cannot resolve sigma without patches")
            return 1.0 / num_patches
        return float(self.sigma)


@dataclass(frozen=True)
class LossSwitches:
    """Which objective components participate in the total."""

    matching: str = "asdm"  # "asdm", "sdm", or "none"
    use_efa: bool = True
    use_id: bool = True

    def __post_init__(self):
        if self.matching not in ("asdm", "sdm", "none"):
            raise ValueError(f"matching must be asdm, sdm, or none, got {self.matching!r}")


@dataclass
class LossReport:
    """A scalar loss value with gradients keyed by parameter name."""

    value: float
    gradients: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"loss value is not finite: {self.value}")
        self.value = float(self.value)
        for name, grad in self.gradients.items():
            if not np.isfinite(grad).all():
                raise ValueError(f"gradient {name!r} contains non-finite entries")


def sum_reports(parts: dict[str, LossReport], weights: dict[str, float] | None = None) -> LossReport:
    """Combine component reports into one, summing gradients key-wise.

    With ``weights`` omitted every component contributes with weight 1.0 and
    the combined value is the exact sum of the component values.
    """
    value = 0.0
    gradients: dict[str, np.ndarray] = {}
    for name, report in parts.items():
        w = 1.0 if weights is None else float(weights.get(name, 1.0))
        value += w * report.value
        for key, grad in report.gradients.items():
            scaled = grad if w == 1.0 else w * grad
            if key in gradients:
                gradients[key] = gradients[key] + scaled
            else:
                gradients[key] = scaled.copy()
    return LossReport(value=value, gradients=gradients)
