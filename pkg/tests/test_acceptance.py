"""Acceptance suite: ten behavioral checks, one verdict line each.

Every test computes its condition, prints a single ``criterion N (...):
PASS/FAIL`` line, and then asserts, so a plain read of the output shows
how each check fared. Oracles here are deliberately naive re-derivations
kept local to this file.
"""
from __future__ import annotations

import json
import time

import numpy as np

from fmfa.config import RunConfig
from fmfa.global_align import EmbeddingSet, adaptive_weights, asdm_loss, sdm_loss
from fmfa.local_align import aggregation_weights, build_joint, complexity_probe, sparsify
from fmfa.metrics import mean_average_precision, rank_k
from fmfa.numeric import lse_pool, minmax_normalize_rows
from fmfa.objectives import run_gradient_check_suite
from fmfa.params import HyperParams
from fmfa.trainer import train_toy


def _verdict(number: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {number} ({name}): {'PASS' if ok else 'FAIL'} {detail}"
    print(line)
    assert ok, line


def test_criterion_01_gradient_fidelity():
    start = time.perf_counter()
    worst: dict[str, float] = {}
    seeds = range(7)
    for seed in seeds:
        for name, err in run_gradient_check_suite(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = (
        set(worst) == {"sdm", "asdm", "efa", "id", "total"}
        and all(err < 1e-4 for err in worst.values())
        and elapsed < 60.0
    )
    _verdict(1, "gradient fidelity", ok,
             f"max rel err {max(worst.values()):.2e} over {len(seeds)} seeds "
             f"x 5 losses in {elapsed:.1f}s")


def test_criterion_02_sdm_asdm_equivalence():
    flat = HyperParams(alpha=0.0)
    weighted = HyperParams(alpha=10.0)
    bitwise = True
    ordered = True
    for trial in range(20):
        rng = np.random.default_rng(200 + trial)
        embeddings = EmbeddingSet(
            rng.standard_normal((8, 8)),
            rng.standard_normal((8, 8)),
            rng.integers(0, 4, 8),
        )
        plain = sdm_loss(embeddings, flat)
        zero_alpha = asdm_loss(embeddings, flat)
        bitwise &= plain.value == zero_alpha.value
        bitwise &= all(
            np.array_equal(plain.gradients[key], zero_alpha.gradients[key])
            for key in plain.gradients
        )
        ordered &= (
            asdm_loss(embeddings, weighted).value
            >= sdm_loss(embeddings, weighted).value - 1e-12
        )
    _verdict(2, "sdm/asdm equivalence", bitwise and ordered,
             "alpha=0 bitwise equal and alpha=10 ordered on 20 batches")


def test_criterion_03_adaptive_weight_contract():
    rng = np.random.default_rng(300)
    matched = True
    dominant_rows = 0
    for trial in range(100):
        size = int(rng.integers(2, 9))
        p = rng.random((size, size))
        if trial % 2 == 0:
            row = int(rng.integers(size))
            p[row, row] = p[row].max() + 1.0
        p /= p.sum(axis=1, keepdims=True)
        weights = adaptive_weights(p, 10.0)
        for i in range(size):
            row_max = max(float(v) for v in p[i])
            expected = 10.0 * (row_max - float(p[i, i])) + 1.0
            matched &= abs(float(weights[i]) - expected) <= 1e-12
            if float(p[i, i]) == row_max:
                dominant_rows += 1
                matched &= float(weights[i]) == 1.0
    _verdict(3, "adaptive weight contract", matched and dominant_rows >= 50,
             f"scalar oracle matched on 100 rows, {dominant_rows} with a dominant diagonal")


def test_criterion_04_retention_guarantee():
    rng = np.random.default_rng(400)
    retained = True
    convex = True
    for trial in range(1000):
        rows = int(rng.integers(1, 9))
        cols = int(rng.integers(1, 9))
        raw = rng.standard_normal((rows, cols))
        if trial % 5 == 0:
            raw[int(rng.integers(rows))] = float(rng.standard_normal())
        if trial % 17 == 0:
            raw[:] = 0.0
        normalized = minmax_normalize_rows(raw)
        mask, sparse = sparsify(normalized, 1.0 / cols)
        retained &= bool(mask.sum(axis=1).min() >= 1)
        weights = aggregation_weights(sparse)
        convex &= bool(np.abs(weights.sum(axis=1) - 1.0).max() <= 1e-9)
    _verdict(4, "retention guarantee", retained and convex,
             "1000 matrices incl. constant rows: every row kept >= 1 entry, "
             "weight rows sum to 1 +/- 1e-9")


def monolithic_joint(tokens, patches, sigma):
    """The whole aggregation pipeline in one nest of plain Python loops."""
    tokens = np.asarray(tokens, dtype=np.float64)
    patches = np.asarray(patches, dtype=np.float64)
    num_tokens, dim = tokens.shape
    num_patches = patches.shape[0]
    joint = np.zeros((num_tokens, dim))
    for i in range(num_tokens):
        raw = [float(sum(tokens[i, k] * patches[j, k] for k in range(dim)))
               for j in range(num_patches)]
        low, high = min(raw), max(raw)
        if high == low:
            normalized = [1.0] * num_patches
        else:
            normalized = [(value - low) / (high - low) for value in raw]
        kept = [value if value >= sigma else 0.0 for value in normalized]
        total = sum(kept)
        weights = [value / total for value in kept]
        for j in range(num_patches):
            for k in range(dim):
                joint[i, k] += weights[j] * patches[j, k]
    return joint


def test_criterion_05_pipeline_oracle_equivalence():
    rng = np.random.default_rng(500)
    worst = 0.0
    for _ in range(100):
        num_tokens = int(rng.integers(1, 9))
        num_patches = int(rng.integers(1, 9))
        dim = int(rng.integers(2, 17))
        tokens = rng.standard_normal((num_tokens, dim))
        patches = rng.standard_normal((num_patches, dim))
        sigma = 1.0 / num_patches
        agg = build_joint(tokens, patches, sigma)
        oracle = monolithic_joint(tokens, patches, sigma)
        worst = max(worst, float(np.abs(agg.joint - oracle).max()))
    _verdict(5, "pipeline-oracle equivalence", worst <= 1e-12,
             f"max abs deviation {worst:.2e} over 100 instances")


def test_criterion_06_lse_bounds():
    rng = np.random.default_rng(600)
    bounded = True
    for _ in range(1000):
        size = int(rng.integers(1, 33))
        values = 5.0 * rng.standard_normal(size)
        lam = float(rng.uniform(0.5, 4.0))
        pooled = lse_pool(values, lam)
        top = float(values.max())
        bounded &= top - 1e-12 <= pooled <= top + np.log(size) / lam + 1e-12
    # Convergence speed at large lambda depends on the top-two gap, so
    # keep that gap visible when checking the 1e-3 agreement.
    converged = True
    for _ in range(1000):
        size = int(rng.integers(2, 33))
        values = np.sort(5.0 * rng.standard_normal(size))
        values[-1] = values[-2] + max(values[-1] - values[-2], 0.2)
        converged &= abs(lse_pool(values, 100.0) - float(values.max())) <= 1e-3
    _verdict(6, "lse bounds", bounded and converged,
             "max <= pool <= max + log(M)/lambda on 1000 vectors; "
             "lambda=100 within 1e-3 of max on 1000 more")


def test_criterion_07_complexity_counters():
    records = complexity_probe([8, 64], [4, 8, 16])
    by_key = {(r.method, r.num_rows, r.num_candidates): r for r in records}
    ok = len(records) == 12
    for m in (8, 64):
        hard_counts = {by_key[("hard", m, l)].post_entries for l in (4, 8, 16)}
        ok &= hard_counts == {m}
        ok &= all(by_key[("soft", m, l)].post_entries == m * l for l in (4, 8, 16))
    _verdict(7, "complexity counters", ok,
             "hard touches M entries independent of L, soft touches M*L, "
             "for M in {8,64} x L in {4,8,16}")


def test_criterion_08_desk_scale_training():
    config = RunConfig()
    start = time.perf_counter()
    first = train_toy(config)
    second = train_toy(config)
    elapsed = time.perf_counter() - start
    deterministic = json.dumps(first.to_dict()) == json.dumps(second.to_dict())
    initial = first.epochs[0].losses["total"]
    final = first.epochs[-1]
    ok = (
        final.rank1 == 1.0
        and final.losses["total"] < initial
        and deterministic
        and elapsed < 300.0
    )
    _verdict(8, "desk-scale training", ok,
             f"rank1 {final.rank1:.3f}, loss {initial:.4f} -> "
             f"{final.losses['total']:.4f}, deterministic, "
             f"two runs in {elapsed:.1f}s")


ABLATION = dict(num_identities=8, samples_per_id=4, eval_per_id=2, raw_dim=32,
                embed_dim=16, tokens_per_sample=4, patches_per_sample=6,
                noise_sigma=0.3, epochs=60, lr=0.5)


def test_criterion_09_ablation_direction():
    treatment = []
    baseline = []
    for seed in range(5):
        full = RunConfig(matching="asdm", efa=True, seed=seed, **ABLATION)
        stripped = RunConfig(matching="sdm", efa=False, seed=seed, **ABLATION)
        treatment.append(train_toy(full).epochs[-1].map_score)
        baseline.append(train_toy(stripped).epochs[-1].map_score)
    mean_full = float(np.mean(treatment))
    mean_stripped = float(np.mean(baseline))
    _verdict(9, "ablation direction", mean_full >= mean_stripped,
             f"mean final mAP {mean_full:.4f} (adaptive matching + local alignment) "
             f"vs {mean_stripped:.4f} (plain matching only) over 5 seeds")


def brute_force_rank_k(sims, query_ids, gallery_ids, k):
    hits = 0
    for i in range(len(query_ids)):
        order = sorted(range(len(gallery_ids)), key=lambda j: (-sims[i, j], j))
        if any(gallery_ids[j] == query_ids[i] for j in order[:k]):
            hits += 1
    return hits / len(query_ids)


def brute_force_map(sims, query_ids, gallery_ids):
    total = 0.0
    for i in range(len(query_ids)):
        order = sorted(range(len(gallery_ids)), key=lambda j: (-sims[i, j], j))
        found = 0
        precision_sum = 0.0
        for rank, j in enumerate(order, start=1):
            if gallery_ids[j] == query_ids[i]:
                found += 1
                precision_sum += found / rank
        total += precision_sum / found
    return total / len(query_ids)


def test_criterion_10_retrieval_metrics():
    rng = np.random.default_rng(1000)
    exact = True
    for _ in range(50):
        num_gallery = int(rng.integers(2, 13))
        num_queries = int(rng.integers(1, 13))
        gallery_ids = rng.integers(0, 4, num_gallery)
        query_ids = gallery_ids[rng.integers(0, num_gallery, num_queries)]
        sims = rng.standard_normal((num_queries, num_gallery))
        for k in (1, 3, num_gallery):
            k = min(k, num_gallery)
            exact &= rank_k(sims, query_ids, gallery_ids, k) == \
                brute_force_rank_k(sims, query_ids, gallery_ids, k)
        exact &= mean_average_precision(sims, query_ids, gallery_ids) == \
            brute_force_map(sims, query_ids, gallery_ids)
    _verdict(10, "retrieval metrics", exact,
             "rank-k and mAP equal the brute-force oracles exactly on 50 instances")
