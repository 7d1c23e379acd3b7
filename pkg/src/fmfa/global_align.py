"""Batch-global matching losses over paired text and image embeddings.

The two losses here compare a batch's predicted matching distribution
(softmax over cosine similarities at temperature ``tau1``) against the
identity-derived true distribution, in both the text-to-image and
image-to-text directions. The adaptive variant reweights each anchor by
how badly its own pair is ranked inside the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (
    as_matrix,
    cosine_similarity_backward,
    cosine_similarity_matrix,
    row_softmax,
    row_softmax_backward,
)
from .params import HyperParams, LossReport

__all__ = [
    "EmbeddingSet",
    "matching_probabilities",
    "true_matching_distribution",
    "adaptive_weights",
    "adaptive_weight_pair",
    "sdm_loss",
    "asdm_loss",
]


def _as_identities(identities, batch_size: int | None = None) -> np.ndarray:
    ids = np.asarray(identities)
    if ids.ndim != 1:
        raise ValueError(f"identities must be 1-D, got shape {ids.shape}")
    if ids.size == 0:
        raise ValueError("identities must be non-empty")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"identities must be integers, got dtype {ids.dtype}")
    if (ids < 0).any():
        raise ValueError("identities must be non-negative")
    if batch_size is not None and ids.size != batch_size:
        raise ValueError(f"expected {batch_size} identities, got {ids.size}")
    return ids.astype(np.int64)


@dataclass
class EmbeddingSet:
    """A batch of paired global embeddings with per-pair identity labels.

    Row i of ``text_globals`` and row i of ``image_globals`` describe the
    same underlying pair; ``identities[i]`` is its identity label.
    """

    text_globals: np.ndarray
    image_globals: np.ndarray
    identities: np.ndarray

    def __post_init__(self):
        self.text_globals = as_matrix(self.text_globals, "text_globals")
        self.image_globals = as_matrix(self.image_globals, "image_globals")
        if self.text_globals.shape != self.image_globals.shape:
            raise ValueError(
                f"modality shape mismatch: text {self.text_globals.shape}, "
                f"image {self.image_globals.shape}"
            )
        self.identities = _as_identities(self.identities, self.text_globals.shape[0])

    @property
    def batch_size(self) -> int:
        return self.text_globals.shape[0]

    @property
    def dim(self) -> int:
        return self.text_globals.shape[1]


def matching_probabilities(embeddings: EmbeddingSet, tau1: float) -> np.ndarray:
    """Text-to-image matching distribution for one batch.

    Row i holds the probability that text i matches each image in the
    batch: a softmax over cosine similarities at temperature ``tau1``.
    """
    if embeddings.batch_size < 2:
        raise ValueError(f"need a batch of at least 2 pairs, got {embeddings.batch_size}")
    sims = cosine_similarity_matrix(embeddings.text_globals, embeddings.image_globals)
    return row_softmax(sims, tau1)


def true_matching_distribution(identities) -> np.ndarray:
    """Row-normalized identity co-membership matrix.

    Entry (i, j) is 1/(number of batch items sharing identity i) when items
    i and j have the same identity and 0 otherwise. Rows always sum to one
    because every item matches at least itself.
    """
    ids = _as_identities(identities)
    match = (ids[:, None] == ids[None, :]).astype(np.float64)
    return match / match.sum(axis=1, keepdims=True)


def adaptive_weights(probabilities, alpha: float) -> np.ndarray:
    """Per-anchor weights alpha * (row max - diagonal) + 1.

    An anchor whose own pair already tops its row gets weight exactly 1;
    the worse the pair is ranked, the larger the weight, up to 1 + alpha.
    """
    p = as_matrix(probabilities, "probabilities")
    if p.shape[0] != p.shape[1]:
        raise ValueError(f"probabilities must be square, got shape {p.shape}")
    row_sums = p.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValueError("probabilities must be row-stochastic")
    if alpha < 0.0:
        raise ValueError(f"alpha must be non-negative, got {alpha}")
    return alpha * (p.max(axis=1) - np.diag(p)) + 1.0


def adaptive_weight_pair(embeddings: EmbeddingSet, hp: HyperParams) -> tuple[np.ndarray, np.ndarray]:
    """Adaptive weights for both directions, (text-to-image, image-to-text)."""
    sims = cosine_similarity_matrix(embeddings.text_globals, embeddings.image_globals)
    w_t2i = adaptive_weights(row_softmax(sims, hp.tau1), hp.alpha)
    w_i2t = adaptive_weights(row_softmax(sims.T, hp.tau1), hp.alpha)
    return w_t2i, w_i2t


def _direction_terms(p: np.ndarray, q: np.ndarray, weights: np.ndarray, epsilon: float):
    """Weighted KL-style rows and the gradient on p, one matching direction.

    Entries with p == 0 contribute nothing to the value and carry zero
    gradient; they only arise when the temperature is extreme enough to
    underflow the softmax.
    """
    batch = p.shape[0]
    log_ratio = np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)) - np.log(q + epsilon), 0.0)
    rows = (p * log_ratio).sum(axis=1)
    value = float((weights * rows).sum() / batch)
    grad_p = np.where(p > 0.0, (weights[:, None] / batch) * (log_ratio + 1.0), 0.0)
    return value, grad_p


def _matching_loss(
    embeddings: EmbeddingSet,
    hp: HyperParams,
    adaptive: bool,
    frozen_weights: tuple[np.ndarray, np.ndarray] | None,
) -> LossReport:
    if embeddings.batch_size < 2:
        raise ValueError(f"need a batch of at least 2 pairs, got {embeddings.batch_size}")
    text = embeddings.text_globals
    image = embeddings.image_globals
    sims = cosine_similarity_matrix(text, image)
    p_t2i = row_softmax(sims, hp.tau1)
    p_i2t = row_softmax(sims.T, hp.tau1)
    q = true_matching_distribution(embeddings.identities)

    batch = embeddings.batch_size
    ones = np.ones(batch)
    if frozen_weights is not None:
        w_t2i, w_i2t = frozen_weights
    elif adaptive:
        # Treated as constants: the weights reweight rows but do not
        # themselves receive gradient.
        w_t2i = adaptive_weights(p_t2i, hp.alpha)
        w_i2t = adaptive_weights(p_i2t, hp.alpha)
    else:
        w_t2i = w_i2t = ones

    value_t2i, grad_p_t2i = _direction_terms(p_t2i, q, w_t2i, hp.epsilon)
    value_i2t, grad_p_i2t = _direction_terms(p_i2t, q, w_i2t, hp.epsilon)

    grad_sims = row_softmax_backward(p_t2i, grad_p_t2i, hp.tau1)
    grad_sims += row_softmax_backward(p_i2t, grad_p_i2t, hp.tau1).T
    grad_text, grad_image = cosine_similarity_backward(text, image, grad_sims)

    return LossReport(
        value=value_t2i + value_i2t,
        gradients={"text_globals": grad_text, "image_globals": grad_image},
    )


def sdm_loss(embeddings: EmbeddingSet, hp: HyperParams) -> LossReport:
    """Symmetric distribution matching loss, both directions, unweighted."""
    return _matching_loss(embeddings, hp, adaptive=False, frozen_weights=None)


def asdm_loss(
    embeddings: EmbeddingSet,
    hp: HyperParams,
    frozen_weights: tuple[np.ndarray, np.ndarray] | None = None,
) -> LossReport:
    """Adaptively weighted distribution matching loss.

    Each direction's rows are weighted by :func:`adaptive_weights` computed
    from that direction's own probabilities. The weights are treated as
    constants during differentiation; ``frozen_weights`` pins them to given
    values, which gradient validation uses to probe the same function the
    analytic gradient describes.
    """
    if frozen_weights is not None:
        w_t2i = np.asarray(frozen_weights[0], dtype=np.float64)
        w_i2t = np.asarray(frozen_weights[1], dtype=np.float64)
        frozen_weights = (w_t2i, w_i2t)
    return _matching_loss(embeddings, hp, adaptive=True, frozen_weights=frozen_weights)
