"""Desk-scale training loop over synthetic paired data.

Two projection matrices (one per modality) and a shared identity head are
the only parameters. Raw synthetic features are projected into the
embedding space, the enabled losses are evaluated, and plain gradient
descent updates everything. One process, one thread, one RNG stream: the
same seed reproduces the report bit for bit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .data_io import PairedDataset, sample_dataset
from .global_align import EmbeddingSet
from .local_align import LocalFeatureBatch
from .metrics import retrieval_report
from .numeric import cosine_similarity_matrix
from .objectives import ClassifierHead, total_loss_with_components
from .params import LossReport

__all__ = ["ToyEncoder", "EpochStats", "TrainReport", "TrainingDivergedError", "train_toy"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, detail: str):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class ToyEncoder:
    """Linear projections taking raw features to the shared embedding space."""

    text_proj: np.ndarray   # (raw_dim, embed_dim)
    image_proj: np.ndarray  # (raw_dim, embed_dim)

    @classmethod
    def initialize(cls, raw_dim: int, embed_dim: int, rng: np.random.Generator) -> "ToyEncoder":
        # Both towers start from one shared random map so that raw features
        # that agree across modalities stay aligned at initialization; the
        # projections are free to diverge during training.
        shared = rng.standard_normal((raw_dim, embed_dim)) / math.sqrt(raw_dim)
        return cls(text_proj=shared.copy(), image_proj=shared.copy())


@dataclass
class EpochStats:
    epoch: int
    losses: dict[str, float]  # per-component means over the epoch plus "total"
    rank1: float
    rank5: float
    rank10: float
    map_score: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "losses": dict(self.losses),
            "rank1": self.rank1,
            "rank5": self.rank5,
            "rank10": self.rank10,
            "map": self.map_score,
        }


@dataclass
class TrainReport:
    seed: int
    epochs: list[EpochStats]
    final_params: dict[str, np.ndarray]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": [e.to_dict() for e in self.epochs],
            "final_params": {k: v.tolist() for k, v in self.final_params.items()},
        }


def _split_by_identity(dataset: PairedDataset, eval_per_id: int):
    """Hold out the last ``eval_per_id`` samples of every identity."""
    train_idx = []
    eval_idx = []
    for identity in np.unique(dataset.identities):
        members = np.flatnonzero(dataset.identities == identity)
        if members.size <= eval_per_id:
            raise ValueError(
                f"identity {identity} has {members.size} samples, cannot hold out {eval_per_id}"
            )
        train_idx.extend(members[:-eval_per_id])
        eval_idx.extend(members[-eval_per_id:])
    return np.asarray(train_idx), np.asarray(eval_idx)


def _batches(order: np.ndarray, batch_size: int):
    """Consecutive chunks; a trailing single pair joins the previous chunk."""
    chunks = [order[start:start + batch_size] for start in range(0, order.size, batch_size)]
    if len(chunks) > 1 and chunks[-1].size < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    return chunks


def _learning_rate(config: RunConfig, epoch: int) -> float:
    if config.lr_schedule == "constant":
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))


def train_toy(config: RunConfig, seed: int | None = None,
              dataset: PairedDataset | None = None) -> TrainReport:
    """Train the toy encoder and head, evaluating retrieval every epoch.

    With ``dataset`` omitted, synthetic data is generated from the config;
    either way the last ``eval_per_id`` samples of each identity are held
    out and scored as text-to-image retrieval after every epoch.
    """
    if seed is None:
        seed = config.seed
    rng = np.random.default_rng(seed)
    if dataset is None:
        dataset = sample_dataset(
            config.num_identities,
            config.samples_per_id + config.eval_per_id,
            config.raw_dim,
            config.tokens_per_sample,
            config.patches_per_sample,
            config.noise_sigma,
            rng,
        )
    if config.efa and not dataset.has_locals:
        raise ValueError("efa is enabled but the dataset carries no local features")
    train_idx, eval_idx = _split_by_identity(dataset, config.eval_per_id)
    if train_idx.size < 2:
        raise ValueError(f"need at least 2 training pairs, got {train_idx.size}")

    raw_dim = dataset.text_globals.shape[1]
    num_classes = int(dataset.identities.max()) + 1
    encoder = ToyEncoder.initialize(raw_dim, config.embed_dim, rng)
    head = ClassifierHead.zeros(num_classes, config.embed_dim)

    hp = config.to_hyperparams()
    switches = config.to_switches()
    weights = config.loss_weights()
    eval_data = dataset.subset(eval_idx)

    history: list[EpochStats] = []
    for epoch in range(config.epochs):
        lr = _learning_rate(config, epoch)
        sums: dict[str, float] = {}
        order = rng.permutation(train_idx)
        chunks = _batches(order, config.batch_size)
        for chunk in chunks:
            part = dataset.subset(chunk)
            try:
                report, components = _batch_loss(part, encoder, head, hp, switches, weights)
            except ValueError as exc:
                raise TrainingDivergedError(epoch, str(exc)) from exc
            if not np.isfinite(report.value):
                raise TrainingDivergedError(epoch, f"total loss is {report.value}")
            sums["total"] = sums.get("total", 0.0) + report.value
            for name, comp in components.items():
                sums[name] = sums.get(name, 0.0) + comp.value
            _apply_update(part, encoder, head, report, lr)
        for name, param in (("text_proj", encoder.text_proj), ("image_proj", encoder.image_proj),
                            ("head", head.weights)):
            if not np.isfinite(param).all():
                raise TrainingDivergedError(epoch, f"{name} became non-finite")

        losses = {name: value / len(chunks) for name, value in sums.items()}
        history.append(_evaluate_epoch(epoch, losses, eval_data, encoder))

    return TrainReport(
        seed=seed,
        epochs=history,
        final_params={
            "text_proj": encoder.text_proj,
            "image_proj": encoder.image_proj,
            "head_weights": head.weights,
            "head_bias": head.bias,
        },
    )


def _batch_loss(part: PairedDataset, encoder: ToyEncoder, head: ClassifierHead, hp, switches,
                weights) -> tuple[LossReport, dict[str, LossReport]]:
    embeddings = EmbeddingSet(
        part.text_globals @ encoder.text_proj,
        part.image_globals @ encoder.image_proj,
        part.identities,
    )
    batch = None
    if switches.use_efa:
        batch = LocalFeatureBatch(
            [t @ encoder.text_proj for t in part.tokens],
            [p @ encoder.image_proj for p in part.patches],
            part.identities,
        )
    return total_loss_with_components(embeddings, batch, head, hp, switches, weights)


def _apply_update(part: PairedDataset, encoder: ToyEncoder, head: ClassifierHead,
                  report: LossReport, lr: float) -> None:
    """Chain embedding gradients onto the projections and step everything."""
    grads = report.gradients
    grad_text = part.text_globals.T @ grads["text_globals"]
    grad_image = part.image_globals.T @ grads["image_globals"]
    for k in range(part.num_samples):
        token_grad = grads.get(f"tokens.{k}")
        if token_grad is not None:
            grad_text += part.tokens[k].T @ token_grad
        patch_grad = grads.get(f"patches.{k}")
        if patch_grad is not None:
            grad_image += part.patches[k].T @ patch_grad
    encoder.text_proj = encoder.text_proj - lr * grad_text
    encoder.image_proj = encoder.image_proj - lr * grad_image
    if "head_weights" in grads:
        head.weights = head.weights - lr * grads["head_weights"]
        head.bias = head.bias - lr * grads["head_bias"]


def _evaluate_epoch(epoch: int, losses: dict[str, float], eval_data: PairedDataset,
                    encoder: ToyEncoder) -> EpochStats:
    text = eval_data.text_globals @ encoder.text_proj
    image = eval_data.image_globals @ encoder.image_proj
    sims = cosine_similarity_matrix(text, image)
    report = retrieval_report(sims, eval_data.identities, eval_data.identities)
    return EpochStats(
        epoch=epoch,
        losses=losses,
        rank1=report.rank1,
        rank5=report.rank5,
        rank10=report.rank10,
        map_score=report.map_score,
    )
