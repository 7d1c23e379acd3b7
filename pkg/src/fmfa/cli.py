"""Command line interface.

Subcommands: synth, loss, gradcheck, train, eval, bench, sparsify.
Invalid flags exit with the argparse usage status (2); any runtime
failure exits 1 after printing a one-line JSON error object to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_run_config
from .data_io import load_dataset, synthesize_dataset
from .local_align import build_joint, complexity_probe
from .metrics import retrieval_report
from .numeric import cosine_similarity_matrix
from .objectives import ClassifierHead, run_gradient_check_suite, total_loss_with_components
from .params import LossSwitches
from .trainer import train_toy

__all__ = ["main", "build_parser"]


def _parse_int_list(raw: str) -> list[int]:
    try:
        values = [int(part) for part in raw.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {raw!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {raw!r}")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fmfa",
        description="Cross-modal alignment losses, gradient checks, and a toy trainer.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic paired dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ids", type=int, default=8, help="number of identities")
    p.add_argument("--samples-per-id", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens", type=int, default=4, help="tokens per text")
    p.add_argument("--patches", type=int, default=6, help="patches per image")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("loss", help="compute losses on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--seed", type=int, default=0, help="seed for the identity head init")
    p.set_defaults(func=_cmd_loss)

    p = sub.add_parser("gradcheck", help="finite-difference gradient validation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("train", help="train the toy encoder on synthetic data")
    p.add_argument("--config", default=None, help="run config file")
    p.add_argument("--data", default=None, help="pre-synthesized dataset directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--out", default=None, help="write the report JSON here instead of stdout")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="text-to-image retrieval metrics on a dataset")
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="hard versus soft similarity operation counts")
    p.add_argument("--M", type=_parse_int_list, default=[8, 64], help="row counts, comma separated")
    p.add_argument("--L", type=_parse_int_list, default=[4, 8, 16],
                   help="candidate counts, comma separated")
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("sparsify", help="dump one pair's aggregation stages as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--pair", type=int, default=0, help="sample index")
    p.add_argument("--out", default=None, help="write CSV here instead of stdout")
    p.set_defaults(func=_cmd_sparsify)

    return parser


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
        if not text.endswith("\n"):
            sys.stdout.write("\n")
    else:
        Path(out).write_text(text)


def _load_config(path: str | None) -> RunConfig:
    return RunConfig() if path is None else load_run_config(path)


def _cmd_synth(args) -> int:
    paths = synthesize_dataset(
        args.out, args.ids, args.samples_per_id, args.dim, args.tokens, args.patches,
        args.noise, args.seed,
    )
    _emit(json.dumps({name: str(path) for name, path in paths.items()}, indent=2), None)
    return 0


def _cmd_loss(args) -> int:
    config = _load_config(args.config)
    dataset = load_dataset(args.data)
    embeddings = dataset.embedding_set()
    batch = dataset.local_batch() if (config.efa and dataset.has_locals) else None
    switches = config.to_switches()
    if batch is None and switches.use_efa:
        switches = LossSwitches(matching=switches.matching, use_efa=False, use_id=True)
    rng = np.random.default_rng(args.seed)
    num_classes = int(dataset.identities.max()) + 1
    head = ClassifierHead(
        weights=0.1 * rng.standard_normal((num_classes, embeddings.dim)),
        bias=np.zeros(num_classes),
    )
    report, components = total_loss_with_components(
        embeddings, batch, head, config.to_hyperparams(), switches, config.loss_weights()
    )
    payload = {name: comp.value for name, comp in components.items()}
    payload["total"] = report.value
    _emit(json.dumps(payload, indent=2, sort_keys=True), None)
    return 0


def _cmd_gradcheck(args) -> int:
    errors = run_gradient_check_suite(args.seed)
    passed = all(err < args.threshold for err in errors.values())
    payload = {
        "max_rel_err": errors,
        "threshold": args.threshold,
        "pass": passed,
    }
    _emit(json.dumps(payload, indent=2, sort_keys=True), None)
    return 0 if passed else 1


def _cmd_train(args) -> int:
    config = _load_config(args.config)
    dataset = load_dataset(args.data) if args.data is not None else None
    report = train_toy(config, seed=args.seed, dataset=dataset)
    _emit(json.dumps(report.to_dict(), indent=2), args.out)
    if args.out is not None:
        final = report.epochs[-1]
        sys.stdout.write(
            f"epoch {final.epoch}: total {final.losses['total']:.6f} "
            f"rank1 {final.rank1:.3f} map {final.map_score:.3f}\n"
        )
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    sims = cosine_similarity_matrix(dataset.text_globals, dataset.image_globals)
    report = retrieval_report(sims, dataset.identities, dataset.identities)
    _emit(json.dumps(report.to_dict(), indent=2, sort_keys=True), None)
    return 0


def _cmd_bench(args) -> int:
    records = complexity_probe(args.M, args.L, dim=args.dim, seed=args.seed)
    rows = ["method,m,l,post_entries_touched"]
    for record in records:
        rows.append(
            f"{record.method},{record.num_rows},{record.num_candidates},{record.post_entries}"
        )
    _emit("\n".join(rows) + "\n", args.out)
    return 0


def _cmd_sparsify(args) -> int:
    dataset = load_dataset(args.data)
    if not dataset.has_locals:
        raise ValueError("dataset carries no local features")
    if not 0 <= args.pair < dataset.num_samples:
        raise ValueError(f"pair {args.pair} outside the dataset's {dataset.num_samples} samples")
    tokens = dataset.tokens[args.pair]
    patches = dataset.patches[args.pair]
    hp = RunConfig().to_hyperparams()
    agg = build_joint(tokens, patches, hp.resolve_sigma(patches.shape[0]))
    stages = [
        ("raw", agg.raw),
        ("normalized", agg.normalized),
        ("sparse", np.where(agg.retained_mask, agg.normalized, 0.0)),
        ("weights", agg.weights),
    ]
    lines = ["stage,row,col,value"]
    for stage, matrix in stages:
        for i in range(matrix.shape[0]):
            for j in range(matrix.shape[1]):
                lines.append(f"{stage},{i},{j},{float(matrix[i, j])!r}")
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # runtime failures map to exit 1 with JSON on stderr
        payload = {"error": str(exc), "type": type(exc).__name__}
        print(json.dumps(payload), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
