"""Command-line surface tying the pipeline together.

Subcommands: gen-synthetic, train, eval, merge, curve, zero-shot.
Exit codes: 0 success, 2 usage error, 1 data error. All randomness comes
from --seed or the config seed, so identical invocations produce
byte-identical outputs on one platform.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from .core import STREAM_GENERATOR, UNLABELED, SyntheticSpec, gen_synthetic, make_rng
from .errors import CtxoodError
from .extension import incremental_eval, merge_models
from .inference import DEFAULT_TAU, zero_shot_batch
from .io_formats import load_config, read_checkpoint, read_features, write_checkpoint, write_features
from .metrics import EvaluationResult, accuracy, evaluate
from .training import train_task


def _float_or_none(x: float) -> float | None:
    return None if isinstance(x, float) and math.isnan(x) else x


def _eval_report_json(result: EvaluationResult) -> str:
    payload = {
        "id_accuracy": _float_or_none(result.id_accuracy),
        "ood": [
            {"name": name, "fpr95": r.fpr_at_tpr, "auroc": r.auroc, "threshold": r.threshold}
            for name, r in result.per_set
        ],
        "average": {
            "fpr95": result.average.fpr_at_tpr,
            "auroc": result.average.auroc,
            "threshold": result.average.threshold,
        },
    }
    return json.dumps(payload, indent=2) + "\n"


def _eval_report_csv(result: EvaluationResult) -> str:
    lines = ["name,fpr95,auroc,threshold,id_accuracy"]
    for name, r in result.per_set:
        lines.append(f"{name},{r.fpr_at_tpr!r},{r.auroc!r},{r.threshold!r},{result.id_accuracy!r}")
    a = result.average
    lines.append(f"average,{a.fpr_at_tpr!r},{a.auroc!r},{a.threshold!r},{result.id_accuracy!r}")
    return "\n".join(lines) + "\n"


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _cmd_gen_synthetic(args) -> int:
    spec = SyntheticSpec(
        num_id_categories=args.categories,
        num_ood_clusters=args.ood_clusters,
        dim=args.dim,
        samples_per_cluster=args.per_class,
        concentration=args.concentration,
        spurious_offset=args.offset,
    )
    id_set, ood_set = gen_synthetic(spec, make_rng(args.seed, STREAM_GENERATOR))
    write_features(id_set, args.out_id)
    write_features(ood_set, args.out_ood)
    print(f"wrote {id_set.n} ID rows to {args.out_id} and {ood_set.n} OOD rows to {args.out_ood}")
    return 0


def _cmd_train(args) -> int:
    features = read_features(args.features)
    config = load_config(args.config)
    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:

        def emit(line: str) -> None:
            print(line)
            if log_fh:
                log_fh.write(line + "\n")

        state = train_task(features, config, emit=emit)
    finally:
        if log_fh:
            log_fh.close()
    write_checkpoint(state, args.out)
    print(f"wrote checkpoint with {state.num_categories} categories to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    state = read_checkpoint(args.model)
    id_set = read_features(args.id)
    ood_sets = [(Path(p).stem, read_features(p)) for p in args.ood.split(",")]
    result = evaluate(
        state, id_set, ood_sets, tpr=args.tpr, tau=args.tau, perceptual_only=args.perceptual_only
    )
    suffix = Path(args.report).suffix.lower()
    if suffix == ".json":
        _write_text(args.report, _eval_report_json(result))
    elif suffix == ".csv":
        _write_text(args.report, _eval_report_csv(result))
    else:
        print(f"error: argument --report: expected a .csv or .json path, got {args.report!r}", file=sys.stderr)
        return 2
    print(f"wrote report to {args.report}")
    return 0


def _cmd_merge(args) -> int:
    models = [read_checkpoint(p) for p in args.models.split(",")]
    merged = merge_models(models)
    write_checkpoint(merged, args.out)
    print(f"merged {len(models)} models into {merged.num_categories} categories at {args.out}")
    return 0


def _cmd_curve(args) -> int:
    model_paths = args.models.split(",")
    id_paths = args.id_sets.split(",")
    if len(model_paths) != len(id_paths):
        print("error: argument --id-sets: need exactly one ID set per model", file=sys.stderr)
        return 2
    models = [read_checkpoint(p) for p in model_paths]
    id_sets = [read_features(p) for p in id_paths]
    ood = [(Path(args.ood).stem, read_features(args.ood))]
    points = incremental_eval(models, id_sets, ood, tpr=args.tpr, tau=args.tau)
    lines = ["cumulative_categories,accuracy,fpr95,auroc"]
    for p in points:
        lines.append(f"{p.cumulative_categories},{p.accuracy!r},{p.fpr95!r},{p.auroc!r}")
    _write_text(args.report, "\n".join(lines) + "\n")
    print(f"wrote curve with {len(points)} points to {args.report}")
    return 0


def _group_perturbed(pert_set) -> np.ndarray:
    """(C, K, d) array from a labeled feature file with K rows per category."""
    c = pert_set.num_categories
    groups = [pert_set.features[pert_set.labels == k] for k in range(c)]
    sizes = {g.shape[0] for g in groups}
    if len(sizes) != 1 or 0 in sizes:
        raise CtxoodError(
            "perturbed feature file must carry the same positive number of rows per category"
        )
    return np.stack(groups)


def _cmd_zero_shot(args) -> int:
    desc_set = read_features(args.descriptions)
    pert_set = read_features(args.perturbed)
    sample_set = read_features(args.features)
    c = desc_set.num_categories
    if sorted(desc_set.labels.tolist()) != list(range(c)):
        raise CtxoodError("description file must carry exactly one labeled row per category")
    order = np.argsort(desc_set.labels)
    desc = desc_set.features[order]
    pert = _group_perturbed(pert_set)
    _, predicted = zero_shot_batch(desc, pert, sample_set.features, tau=args.tau)

    labeled = sample_set.labels != UNLABELED
    acc = accuracy(predicted[labeled], sample_set.labels[labeled]) if np.any(labeled) else None
    suffix = Path(args.report).suffix.lower()
    if suffix == ".csv":
        lines = ["index,label,predicted"]
        for i in range(sample_set.n):
            lines.append(f"{i},{sample_set.labels[i]},{predicted[i]}")
        _write_text(args.report, "\n".join(lines) + "\n")
    else:
        payload = {
            "num_samples": sample_set.n,
            "num_categories": c,
            "accuracy": acc,
            "predictions": predicted.tolist(),
        }
        _write_text(args.report, json.dumps(payload, indent=2) + "\n")
    if acc is not None:
        print(f"zero-shot accuracy {acc:.4f} over {sample_set.n} samples")
    print(f"wrote report to {args.report}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ctxood",
        description="Hierarchical-context OOD detection over precomputed embedding features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="generate a mixture-on-sphere benchmark")
    g.add_argument("--categories", type=int, required=True)
    g.add_argument("--ood-clusters", type=int, required=True)
    g.add_argument("--dim", type=int, required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--offset", type=float, required=True, help="OOD angular offset in radians")
    g.add_argument("--concentration", type=float, default=10.0)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out-id", required=True)
    g.add_argument("--out-ood", required=True)
    g.set_defaults(func=_cmd_gen_synthetic)

    t = sub.add_parser("train", help="train hierarchical contexts on a feature file")
    t.add_argument("--features", required=True)
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.set_defaults(func=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on ID and OOD feature files")
    e.add_argument("--model", required=True)
    e.add_argument("--id", required=True)
    e.add_argument("--ood", required=True, help="comma-separated OOD feature files")
    e.add_argument("--perceptual-only", action="store_true")
    e.add_argument("--tpr", type=float, default=0.95)
    e.add_argument("--tau", type=float, default=DEFAULT_TAU, help="logit scale used for scoring (match the training config)")
    e.add_argument("--report", required=True, help=".csv or .json output path")
    e.set_defaults(func=_cmd_eval)

    m = sub.add_parser("merge", help="merge checkpoints sharing one frozen encoder")
    m.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    m.add_argument("--out", required=True)
    m.set_defaults(func=_cmd_merge)

    c = sub.add_parser("curve", help="category-incremental merge-and-evaluate curve")
    c.add_argument("--models", required=True, help="comma-separated checkpoint paths")
    c.add_argument("--id-sets", required=True, help="comma-separated ID feature files")
    c.add_argument("--ood", required=True)
    c.add_argument("--tpr", type=float, default=0.95)
    c.add_argument("--tau", type=float, default=DEFAULT_TAU, help="logit scale used for scoring")
    c.add_argument("--report", required=True, help=".csv output path")
    c.set_defaults(func=_cmd_curve)

    z = sub.add_parser("zero-shot", help="regularized scoring from description embeddings")
    z.add_argument("--descriptions", required=True)
    z.add_argument("--perturbed", required=True)
    z.add_argument("--features", required=True)
    z.add_argument("--tau", type=float, default=DEFAULT_TAU, help="logit scale used for scoring")
    z.add_argument("--report", required=True)
    z.set_defaults(func=_cmd_zero_shot)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse handles usage errors and --help
        code = exc.code
        return code if isinstance(code, int) else 2
    try:
        return args.func(args)
    except CtxoodError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
