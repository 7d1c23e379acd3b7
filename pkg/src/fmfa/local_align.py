"""Explicit fine-grained alignment between text tokens and image patches.

The pipeline builds, per text-image pair, a joint embedding for every
token: raw token-patch inner products are min-max normalized per token,
thresholded so that weak patches drop out entirely, renormalized into
convex aggregation weights, and contracted against the patch matrix. A
token's joint embedding therefore only mixes the patches that survived
its threshold.

Batch-level alignment scores between feature sets use hard coding: cosine
similarities, a per-row maximum, and smooth log-sum-exp pooling over rows.
The per-row maximum touches one entry per row after the similarity matrix
is formed, which is what makes the hard variant linear in the row count
rather than in the full matrix size; :func:`complexity_probe` measures
exactly that difference against the soft variant.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .numeric import (
    as_matrix,
    cosine_similarity_backward,
    cosine_similarity_matrix,
    lse_pool,
    lse_pool_backward,
    minmax_normalize_rows,
    minmax_normalize_rows_backward,
    row_softmax,
)
from .params import HyperParams, LossReport
from .parallel import max_workers

__all__ = [
    "LocalFeatureBatch",
    "SparseAggregation",
    "OpCounter",
    "ProbeRecord",
    "raw_similarity",
    "sparsify",
    "aggregation_weights",
    "group_vision_embeddings",
    "build_joint",
    "joint_backward",
    "hard_similarity",
    "hard_similarity_backward",
    "soft_similarity",
    "hard_similarity_matrix",
    "efa_triplet_loss",
    "efa_loss",
    "complexity_probe",
]

MAX_TOKENS = 77


@dataclass
class OpCounter:
    """Counts the work done by the similarity ops, for complexity probes."""

    similarity_entries_computed: int = 0
    post_entries_touched: int = 0

    def merge(self, other: "OpCounter") -> None:
        self.similarity_entries_computed += other.similarity_entries_computed
        self.post_entries_touched += other.post_entries_touched


@dataclass
class LocalFeatureBatch:
    """Per-pair token and patch features for a batch.

    ``tokens[i]`` is the (L_i, d) token matrix of text i with 1 <= L_i <=
    ``max_tokens``; ``patches[i]`` is the (N, d) patch matrix of image i,
    with N fixed across the batch.
    """

    tokens: list[np.ndarray]
    patches: list[np.ndarray]
    identities: np.ndarray
    max_tokens: int = MAX_TOKENS

    def __post_init__(self):
        if len(self.tokens) != len(self.patches):
            raise ValueError(
                f"got {len(self.tokens)} token matrices but {len(self.patches)} patch matrices"
            )
        if not self.tokens:
            raise ValueError("batch is empty")
        self.tokens = [as_matrix(t, f"tokens[{i}]") for i, t in enumerate(self.tokens)]
        self.patches = [as_matrix(p, f"patches[{i}]") for i, p in enumerate(self.patches)]
        dim = self.tokens[0].shape[1]
        num_patches = self.patches[0].shape[0]
        for i, (t, p) in enumerate(zip(self.tokens, self.patches)):
            if t.shape[1] != dim or p.shape[1] != dim:
                raise ValueError(f"pair {i} feature dimension differs from {dim}")
            if not 1 <= t.shape[0] <= self.max_tokens:
                raise ValueError(
                    f"pair {i} has {t.shape[0]} tokens, outside [1, {self.max_tokens}]"
                )
            if p.shape[0] != num_patches:
                raise ValueError(
                    f"pair {i} has {p.shape[0]} patches, expected {num_patches} across the batch"
                )
        ids = np.asarray(self.identities)
        if ids.ndim != 1 or ids.size != len(self.tokens):
            raise ValueError("identities must be 1-D with one label per pair")
        if not np.issubdtype(ids.dtype, np.integer) or (ids < 0).any():
            raise ValueError("identities must be non-negative integers")
        self.identities = ids.astype(np.int64)

    @property
    def batch_size(self) -> int:
        return len(self.tokens)

    @property
    def num_patches(self) -> int:
        return self.patches[0].shape[0]

    @property
    def dim(self) -> int:
        return self.tokens[0].shape[1]


@dataclass
class SparseAggregation:
    """Saved intermediates of one pair's token-to-patch aggregation."""

    raw: np.ndarray            # (L, N) token-patch inner products
    normalized: np.ndarray     # (L, N) per-row min-max rescaled
    retained_mask: np.ndarray  # (L, N) bool, True where normalized >= sigma
    weights: np.ndarray        # (L, N) convex weights, zero off the mask
    joint: np.ndarray          # (L, d) aggregated vision embeddings


def raw_similarity(tokens, patches) -> np.ndarray:
    """Inner products between every token and every patch, shape (L, N)."""
    tokens = as_matrix(tokens, "tokens")
    patches = as_matrix(patches, "patches")
    if tokens.shape[1] != patches.shape[1]:
        raise ValueError(
            f"dimension mismatch: tokens have {tokens.shape[1]} columns, "
            f"patches have {patches.shape[1]}"
        )
    return tokens @ patches.T


def sparsify(normalized, sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Zero out normalized similarities below ``sigma``.

    Returns ``(retained_mask, sparse)``. Expects min-max normalized input
    in [0, 1]; with sigma <= 1 every row keeps at least its maximum.
    """
    normalized = as_matrix(normalized, "normalized")
    if normalized.min() < -1e-12 or normalized.max() > 1.0 + 1e-12:
        raise ValueError("normalized similarities must lie in [0, 1]")
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    mask = normalized >= sigma
    return mask, np.where(mask, normalized, 0.0)


def aggregation_weights(sparse) -> np.ndarray:
    """Normalize each row of thresholded similarities to sum to one."""
    sparse = as_matrix(sparse, "sparse")
    if (sparse < 0.0).any():
        raise ValueError("sparse similarities must be non-negative")
    row_sums = sparse.sum(axis=1)
    dead = np.flatnonzero(row_sums == 0.0)
    if dead.size:
        raise ValueError(f"row {dead[0]} retained no entries")
    return sparse / row_sums[:, None]


def group_vision_embeddings(weights, patches) -> np.ndarray:
    """Convex combination of patch rows under each token's weights."""
    weights = as_matrix(weights, "weights")
    patches = as_matrix(patches, "patches")
    if weights.shape[1] != patches.shape[0]:
        raise ValueError(
            f"weights have {weights.shape[1]} columns but there are {patches.shape[0]} patches"
        )
    return weights @ patches


def build_joint(tokens, patches, sigma: float) -> SparseAggregation:
    """Run the full aggregation pipeline for one text-image pair."""
    raw = raw_similarity(tokens, patches)
    normalized = minmax_normalize_rows(raw)
    mask, sparse = sparsify(normalized, sigma)
    weights = aggregation_weights(sparse)
    joint = group_vision_embeddings(weights, patches)
    return SparseAggregation(
        raw=raw, normalized=normalized, retained_mask=mask, weights=weights, joint=joint
    )


def joint_backward(
    agg: SparseAggregation, tokens, patches, grad_joint
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate a gradient on the joint embeddings of one pair.

    The retained mask is a fixed gate: entries the threshold discarded get
    no gradient, and the threshold decision itself is not differentiated.
    Returns ``(grad_tokens, grad_patches)``.
    """
    tokens = as_matrix(tokens, "tokens")
    patches = as_matrix(patches, "patches")
    grad_joint = as_matrix(grad_joint, "grad_joint")
    sparse = np.where(agg.retained_mask, agg.normalized, 0.0)
    row_sums = sparse.sum(axis=1, keepdims=True)

    grad_weights = grad_joint @ patches.T
    grad_patches = agg.weights.T @ grad_joint
    inner = (grad_weights * agg.weights).sum(axis=1, keepdims=True)
    grad_sparse = (grad_weights - inner) / row_sums
    grad_normalized = np.where(agg.retained_mask, grad_sparse, 0.0)
    grad_raw = minmax_normalize_rows_backward(agg.raw, grad_normalized)
    grad_tokens = grad_raw @ patches
    grad_patches += grad_raw.T @ tokens
    return grad_tokens, grad_patches


def hard_similarity(x, e, lse_lambda: float, counter: OpCounter | None = None) -> float:
    """Alignment score of feature set ``x`` against candidate set ``e``.

    Cosine similarities are reduced to one best candidate per row of ``x``
    (first index on ties) and the row maxima are pooled with a smooth
    maximum. Only one entry per row is touched after the similarity matrix
    is formed.
    """
    x = as_matrix(x, "x")
    e = as_matrix(e, "e")
    sims = cosine_similarity_matrix(x, e)
    maxima = sims.max(axis=1)
    if counter is not None:
        counter.similarity_entries_computed += sims.size
        counter.post_entries_touched += sims.shape[0]
    return lse_pool(maxima, lse_lambda)


def hard_similarity_backward(
    x, e, lse_lambda: float, upstream: float = 1.0
) -> tuple[np.ndarray, np.ndarray]:
    """Vector-Jacobian product of :func:`hard_similarity`.

    The per-row best candidate acts as a fixed selection; gradient flows
    only through the selected entries.
    """
    x = as_matrix(x, "x")
    e = as_matrix(e, "e")
    sims = cosine_similarity_matrix(x, e)
    best = sims.argmax(axis=1)
    grad_maxima = lse_pool_backward(sims.max(axis=1), lse_lambda, upstream)
    grad_sims = np.zeros_like(sims)
    grad_sims[np.arange(sims.shape[0]), best] = grad_maxima
    return cosine_similarity_backward(x, e, grad_sims)


def soft_similarity(x, e, lse_lambda: float, counter: OpCounter | None = None) -> float:
    """Like :func:`hard_similarity` but with softmax-weighted row averages.

    Every similarity entry participates in the row reduction, so the
    post-similarity work grows with the full matrix size.
    """
    x = as_matrix(x, "x")
    e = as_matrix(e, "e")
    sims = cosine_similarity_matrix(x, e)
    softmaxes = row_softmax(sims, 1.0)
    row_values = (softmaxes * sims).sum(axis=1)
    if counter is not None:
        counter.similarity_entries_computed += sims.size
        counter.post_entries_touched += sims.size
    return lse_pool(row_values, lse_lambda)


def hard_similarity_matrix(
    queries: list[np.ndarray],
    candidates: list[np.ndarray],
    lse_lambda: float,
    counter: OpCounter | None = None,
    workers: int | None = None,
) -> np.ndarray:
    """Hard similarity of every query set against every candidate set.

    Entries are independent, so rows may be computed by a worker pool; the
    result and counter totals are identical to the serial path regardless
    of worker count.
    """
    if workers is None:
        workers = max_workers()
    out = np.empty((len(queries), len(candidates)))

    def fill_row(i: int, local_counter: OpCounter | None) -> None:
        for j, cand in enumerate(candidates):
            out[i, j] = hard_similarity(queries[i], cand, lse_lambda, local_counter)

    if workers <= 1 or len(queries) < 2:
        for i in range(len(queries)):
            fill_row(i, counter)
    else:
        locals_ = [OpCounter() if counter is not None else None for _ in queries]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(fill_row, range(len(queries)), locals_))
        if counter is not None:
            for lc in locals_:
                counter.merge(lc)
    return out


def _negative_mask(identities: np.ndarray) -> np.ndarray:
    """Off-diagonal entries whose identities differ from the anchor's."""
    different = identities[:, None] != identities[None, :]
    np.fill_diagonal(different, False)
    return different


def _triplet_value_and_grad(
    hard_s: np.ndarray, identities: np.ndarray, margin: float, tau2: float
) -> tuple[float, np.ndarray]:
    batch = hard_s.shape[0]
    negatives = _negative_mask(identities)
    value = 0.0
    grad = np.zeros_like(hard_s)
    for i in range(batch):
        neg = np.flatnonzero(negatives[i])
        if neg.size == 0:
            continue  # no contrast available for this anchor
        logits = (hard_s[i, neg] - hard_s[i, i] + margin) / tau2
        top = logits.max()
        exp_shifted = np.exp(logits - top)
        total = exp_shifted.sum()
        value += float(top + np.log(total))
        grad[i, neg] += exp_shifted / (total * batch * tau2)
        grad[i, i] -= 1.0 / (batch * tau2)
    return value / batch, grad


def efa_triplet_loss(hard_s, identities, margin: float, tau2: float) -> float:
    """Ranking loss pushing each diagonal score above its negatives.

    Per anchor i the loss is log sum over different-identity columns j of
    exp((S_ij - S_ii + margin) / tau2), averaged over the batch. Anchors
    without any negative contribute zero.
    """
    hard_s = as_matrix(hard_s, "hard_s")
    if hard_s.shape[0] != hard_s.shape[1]:
        raise ValueError(f"hard_s must be square, got shape {hard_s.shape}")
    if hard_s.shape[0] < 2:
        raise ValueError("need at least 2 anchors")
    ids = np.asarray(identities)
    if ids.shape != (hard_s.shape[0],):
        raise ValueError("identities must carry one label per anchor")
    if tau2 <= 0.0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    if margin < 0.0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    value, _ = _triplet_value_and_grad(hard_s, ids, margin, tau2)
    return value


def efa_loss(batch: LocalFeatureBatch, hp: HyperParams) -> LossReport:
    """Fine-grained alignment loss over a batch of local features.

    Builds each pair's joint embeddings, then scores four directions with
    hard similarity: tokens against joints and joints against tokens under
    the text margin, patches against joints and joints against patches
    under the image margin. Each direction contributes a ranking loss and
    all four are summed. Gradients cover every token and patch matrix,
    keyed ``tokens.k`` and ``patches.k``.
    """
    if batch.batch_size < 2:
        raise ValueError(f"need a batch of at least 2 pairs, got {batch.batch_size}")
    sigma = hp.resolve_sigma(batch.num_patches)
    aggs = [build_joint(t, p, sigma) for t, p in zip(batch.tokens, batch.patches)]
    joints = [agg.joint for agg in aggs]

    grad_tokens = [np.zeros_like(t) for t in batch.tokens]
    grad_patches = [np.zeros_like(p) for p in batch.patches]
    grad_joints = [np.zeros_like(j) for j in joints]
    sides = {"tokens": grad_tokens, "patches": grad_patches, "joints": grad_joints}
    sets = {"tokens": batch.tokens, "patches": batch.patches, "joints": joints}

    directions = [
        ("tokens", "joints", hp.margin_text_joint),
        ("joints", "tokens", hp.margin_text_joint),
        ("patches", "joints", hp.margin_image_joint),
        ("joints", "patches", hp.margin_image_joint),
    ]
    value = 0.0
    for query_kind, cand_kind, margin in directions:
        queries = sets[query_kind]
        candidates = sets[cand_kind]
        hard_s = hard_similarity_matrix(queries, candidates, hp.lse_lambda)
        part, grad_s = _triplet_value_and_grad(hard_s, batch.identities, margin, hp.tau2)
        value += part
        for i, j in zip(*np.nonzero(grad_s)):
            gq, gc = hard_similarity_backward(
                queries[i], candidates[j], hp.lse_lambda, grad_s[i, j]
            )
            sides[query_kind][i] += gq
            sides[cand_kind][j] += gc

    for k, agg in enumerate(aggs):
        gt, gp = joint_backward(agg, batch.tokens[k], batch.patches[k], grad_joints[k])
        grad_tokens[k] += gt
        grad_patches[k] += gp

    gradients = {f"tokens.{k}": g for k, g in enumerate(grad_tokens)}
    gradients.update({f"patches.{k}": g for k, g in enumerate(grad_patches)})
    return LossReport(value=value, gradients=gradients)


@dataclass
class ProbeRecord:
    """One row of the hard-versus-soft complexity comparison."""

    method: str
    num_rows: int
    num_candidates: int
    similarity_entries: int
    post_entries: int


def complexity_probe(
    m_sizes: list[int], l_sizes: list[int], dim: int = 8, seed: int = 0
) -> list[ProbeRecord]:
    """Measure post-similarity work for hard and soft scoring.

    For every (M, L) size pair, scores one random (M, dim) set against one
    random (L, dim) set with both methods and records the counters. Hard
    touches M entries after the similarity matrix, soft touches M * L.
    """
    rng = np.random.default_rng(seed)
    records = []
    for m in m_sizes:
        for l in l_sizes:
            x = rng.standard_normal((m, dim))
            e = rng.standard_normal((l, dim))
            for method, fn in (("hard", hard_similarity), ("soft", soft_similarity)):
                counter = OpCounter()
                fn(x, e, 1.0, counter)
                records.append(
                    ProbeRecord(
                        method=method,
                        num_rows=m,
                        num_candidates=l,
                        similarity_entries=counter.similarity_entries_computed,
                        post_entries=counter.post_entries_touched,
                    )
                )
    return records
