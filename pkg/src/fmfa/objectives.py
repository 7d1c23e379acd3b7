"""Identity classification loss, total objective, and gradient validation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .global_align import EmbeddingSet, adaptive_weight_pair, asdm_loss, sdm_loss
from .local_align import LocalFeatureBatch, efa_loss
from .numeric import as_matrix, as_vector
from .params import HyperParams, LossReport, LossSwitches, sum_reports

__all__ = [
    "ClassifierHead",
    "id_loss",
    "total_loss",
    "total_loss_with_components",
    "finite_diff_check",
    "sgd_step",
    "run_gradient_check_suite",
]


@dataclass
class ClassifierHead:
    """Linear identity classifier shared by both modalities."""

    weights: np.ndarray  # (num_classes, dim)
    bias: np.ndarray     # (num_classes,)

    def __post_init__(self):
        self.weights = as_matrix(self.weights, "weights")
        self.bias = as_vector(self.bias, "bias")
        if self.bias.shape[0] != self.weights.shape[0]:
            raise ValueError(
                f"bias has {self.bias.shape[0]} entries for {self.weights.shape[0]} classes"
            )

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "ClassifierHead":
        return cls(weights=np.zeros((num_classes, dim)), bias=np.zeros(num_classes))


def id_loss(text_globals, image_globals, head: ClassifierHead, identities) -> LossReport:
    """Mean cross-entropy of identity prediction over both modalities.

    Text and image embeddings are stacked and classified by the shared
    head, so 2B rows contribute. Gradients cover both embedding matrices
    and the head parameters.
    """
    text = as_matrix(text_globals, "text_globals")
    image = as_matrix(image_globals, "image_globals")
    if text.shape != image.shape:
        raise ValueError(f"modality shape mismatch: text {text.shape}, image {image.shape}")
    ids = np.asarray(identities)
    if ids.shape != (text.shape[0],):
        raise ValueError("identities must carry one label per pair")
    if (ids < 0).any() or (ids >= head.num_classes).any():
        bad = ids[(ids < 0) | (ids >= head.num_classes)][0]
        raise ValueError(f"identity {bad} outside the head's {head.num_classes} classes")

    stacked = np.vstack([text, image])
    labels = np.concatenate([ids, ids])
    logits = stacked @ head.weights.T + head.bias
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(stacked.shape[0])
    value = float(-log_probs[rows, labels].mean())

    grad_logits = np.exp(log_probs)
    grad_logits[rows, labels] -= 1.0
    grad_logits /= stacked.shape[0]
    grad_stacked = grad_logits @ head.weights
    batch = text.shape[0]
    return LossReport(
        value=value,
        gradients={
            "text_globals": grad_stacked[:batch],
            "image_globals": grad_stacked[batch:],
            "head_weights": grad_logits.T @ stacked,
            "head_bias": grad_logits.sum(axis=0),
        },
    )


def _component_reports(
    embeddings: EmbeddingSet,
    batch: LocalFeatureBatch | None,
    head: ClassifierHead,
    hp: HyperParams,
    switches: LossSwitches,
    frozen_matching_weights=None,
) -> dict[str, LossReport]:
    parts: dict[str, LossReport] = {}
    if switches.use_id:
        parts["id"] = id_loss(
            embeddings.text_globals, embeddings.image_globals, head, embeddings.identities
        )
    if switches.matching == "asdm":
        parts["asdm"] = asdm_loss(embeddings, hp, frozen_weights=frozen_matching_weights)
    elif switches.matching == "sdm":
        parts["sdm"] = sdm_loss(embeddings, hp)
    if switches.use_efa:
        if batch is None:
            raise ValueError("efa is enabled but no local feature batch was given")
        parts["efa"] = efa_loss(batch, hp)
    return parts


def total_loss(
    embeddings: EmbeddingSet,
    batch: LocalFeatureBatch | None,
    head: ClassifierHead,
    hp: HyperParams,
    switches: LossSwitches,
    weights: dict[str, float] | None = None,
    frozen_matching_weights=None,
) -> LossReport:
    """Sum of the enabled objective components.

    With ``weights`` omitted the value is the exact sum of the component
    values and every gradient is the key-wise sum of component gradients.
    ``frozen_matching_weights`` pins the adaptive weights, for gradient
    validation only.
    """
    report, _ = total_loss_with_components(
        embeddings, batch, head, hp, switches, weights, frozen_matching_weights
    )
    return report


def total_loss_with_components(
    embeddings: EmbeddingSet,
    batch: LocalFeatureBatch | None,
    head: ClassifierHead,
    hp: HyperParams,
    switches: LossSwitches,
    weights: dict[str, float] | None = None,
    frozen_matching_weights=None,
) -> tuple[LossReport, dict[str, LossReport]]:
    """Like :func:`total_loss` but also returns the per-component reports."""
    parts = _component_reports(embeddings, batch, head, hp, switches, frozen_matching_weights)
    if not parts:
        raise ValueError("no loss component is enabled")
    return sum_reports(parts, weights), parts


def finite_diff_check(
    loss_fn,
    params: dict[str, np.ndarray],
    h: float = 1e-5,
    num_coords: int = 200,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` maps a parameter dict to a :class:`LossReport` whose
    gradients must cover every parameter with matching shapes. A random
    subsample of coordinates (all of them when there are fewer than
    ``num_coords``) is probed with (f(x+h) - f(x-h)) / 2h and the largest
    relative error max(|a - n|) / max(|a|, |n|, 1e-8) is returned.
    """
    if h <= 0.0:
        raise ValueError(f"h must be positive, got {h}")
    if rng is None:
        rng = np.random.default_rng(0)
    params = {name: np.asarray(value, dtype=np.float64) for name, value in params.items()}
    base = loss_fn(params)
    if not np.isfinite(base.value):
        raise ValueError("loss is not finite at the base point")
    for name, value in params.items():
        grad = base.gradients.get(name)
        if grad is None:
            raise ValueError(f"loss reported no gradient for parameter {name!r}")
        if grad.shape != value.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {name!r} "
                f"shape {value.shape}"
            )

    coords = [
        (name, idx)
        for name in sorted(params)
        for idx in range(params[name].size)
    ]
    if len(coords) > num_coords:
        chosen = rng.choice(len(coords), size=num_coords, replace=False)
        coords = [coords[i] for i in chosen]

    probe = {name: value.copy() for name, value in params.items()}
    worst = 0.0
    for name, idx in coords:
        flat = probe[name].reshape(-1)
        original = flat[idx]
        flat[idx] = original + h
        plus = loss_fn(probe).value
        flat[idx] = original - h
        minus = loss_fn(probe).value
        flat[idx] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise ValueError(f"loss is not finite near coordinate {idx} of {name!r}")
        numeric = (plus - minus) / (2.0 * h)
        analytic = base.gradients[name].reshape(-1)[idx]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst


def sgd_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float
) -> dict[str, np.ndarray]:
    """One plain gradient descent update, returning new arrays."""
    if lr <= 0.0:
        raise ValueError(f"lr must be positive, got {lr}")
    updated = {}
    for name, value in params.items():
        grad = grads.get(name)
        if grad is None:
            raise ValueError(f"no gradient for parameter {name!r}")
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != value.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match parameter {name!r} "
                f"shape {value.shape}"
            )
        updated[name] = value - lr * grad
    return updated


def _suite_data(seed: int, batch: int, dim: int, tokens: int, patches: int):
    rng = np.random.default_rng(seed)
    # Repeat one identity so multi-positive rows and empty-negative
    # handling both get exercised.
    identities = np.arange(batch) % max(batch - 1, 1)
    data = {
        "text_globals": rng.standard_normal((batch, dim)),
        "image_globals": rng.standard_normal((batch, dim)),
        "head_weights": rng.normal(0.0, 0.5, (int(identities.max()) + 1, dim)),
        "head_bias": rng.normal(0.0, 0.1, int(identities.max()) + 1),
    }
    for k in range(batch):
        data[f"tokens.{k}"] = rng.standard_normal((tokens, dim))
        data[f"patches.{k}"] = rng.standard_normal((patches, dim))
    return data, identities


def run_gradient_check_suite(
    seed: int,
    batch: int = 4,
    dim: int = 8,
    tokens: int = 3,
    patches: int = 4,
    h: float = 1e-5,
    num_coords: int = 200,
    hp: HyperParams | None = None,
) -> dict[str, float]:
    """Finite-difference errors for every loss on one random instance.

    Returns a map from loss name to max relative error. The adaptive
    matching weights are pinned at the base point so the probed function
    is the one the analytic gradient describes.

    The default temperature here is gentler than the production default.
    At tau1 = 0.02 a random batch produces loss values in the hundreds,
    and a central difference at h = 1e-5 then loses enough of the 16
    float64 digits to cancellation that coordinates with small gradients
    drown in probe noise. The differentiated chain is identical for every
    positive temperature, so validating at tau1 = 0.2 checks the same
    code with the probe noise three orders of magnitude below tolerance.
    """
    if hp is None:
        hp = HyperParams(tau1=0.2, alpha=4.0)
    data, identities = _suite_data(seed, batch, dim, tokens, patches)
    rng = np.random.default_rng(seed + 1)

    def embedding_set(p):
        return EmbeddingSet(p["text_globals"], p["image_globals"], identities)

    def local_batch(p):
        return LocalFeatureBatch(
            [p[f"tokens.{k}"] for k in range(batch)],
            [p[f"patches.{k}"] for k in range(batch)],
            identities,
        )

    def head_of(p):
        return ClassifierHead(p["head_weights"], p["head_bias"])

    global_params = {k: data[k] for k in ("text_globals", "image_globals")}
    local_params = {k: v for k, v in data.items() if k.partition(".")[0] in ("tokens", "patches")}
    id_params = dict(global_params, head_weights=data["head_weights"], head_bias=data["head_bias"])

    frozen = adaptive_weight_pair(embedding_set(data), hp)
    switches = LossSwitches(matching="asdm", use_efa=True, use_id=True)

    checks = {
        "sdm": (global_params, lambda p: sdm_loss(embedding_set(p), hp)),
        "asdm": (
            global_params,
            lambda p: asdm_loss(embedding_set(p), hp, frozen_weights=frozen),
        ),
        "efa": (local_params, lambda p: efa_loss(local_batch(p), hp)),
        "id": (
            id_params,
            lambda p: id_loss(p["text_globals"], p["image_globals"], head_of(p), identities),
        ),
        "total": (
            data,
            lambda p: total_loss(
                embedding_set(p), local_batch(p), head_of(p), hp, switches,
                frozen_matching_weights=frozen,
            ),
        ),
    }
    return {
        name: finite_diff_check(fn, params, h=h, num_coords=num_coords, rng=rng)
        for name, (params, fn) in checks.items()
    }
