"""Command-line interface: validate | select | score | predict | map | evaluate | synth.

Exit codes: 0 success, 1 validation or domain failure, 2 usage or I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .anchors import AnchorSet, select_anchors
from .corr import DEFAULT_EPS, CorrelationModel, correlation_matrix
from .estimator import (
    apw_score,
    fit_predictor,
    predict_classes_matrix,
    predict_matrix,
)
from .evalharness import ExperimentConfig, run_agreement_experiment, run_ranking_experiment
from .mapviz import mds_coordinates, render_map
from .synth import SynthSpec, write_population
from .tensor_io import (
    TensorFormatError,
    class_slice,
    correct_class_matrix,
    format_float,
    load_prediction_tensor,
    read_embeddings,
    read_wide_csv,
    validate,
)

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _anchor_columns(path, anchors: AnchorSet):
    """Read a wide target CSV and return (model ids, k-column matrix in anchor order)."""
    rows, cols, values = read_wide_csv(path)
    pos = {c: i for i, c in enumerate(cols)}
    ids = anchors.example_ids
    missing = [ids[m] for m in anchors.medoids if ids[m] not in pos]
    if missing:
        raise KeyError(f"{path}: no column for anchor examples {missing}")
    return rows, values[:, [pos[ids[m]] for m in anchors.medoids]]


def _read_colors(path, example_ids):
    values = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or len(header) < 2:
            raise TensorFormatError(f"{path}: expected header example_id,value")
        for row in reader:
            if row:
                try:
                    values[row[0].strip()] = float(row[1])
                except ValueError:
                    raise TensorFormatError(f"{path}: non-numeric colour {row[1]!r}") from None
    missing = [e for e in example_ids if e not in values]
    if missing:
        raise KeyError(f"{path}: no colour for examples {missing[:5]}")
    return np.array([values[e] for e in example_ids])


# -- subcommands ------------------------------------------------------------


def cmd_validate(args) -> int:
    tensor = load_prediction_tensor(args.manifest, strict=False)
    report = validate(tensor)
    n, d, y = tensor.probs.shape
    print(f"{args.manifest}: {n} models x {d} examples x {y} classes")
    for loc, msg in report.errors:
        print(f"error   {loc}: {msg}")
    for loc, msg in report.warnings:
        print(f"warning {loc}: {msg}")
    print("ok" if report.ok else f"{len(report.errors)} error(s)")
    if args.report:
        Path(args.report).write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK if report.ok else EXIT_DOMAIN


def cmd_select(args) -> int:
    tensor = load_prediction_tensor(args.manifest)
    cm = correlation_matrix(correct_class_matrix(tensor), args.eps)
    anchors = select_anchors(cm, args.k, args.seed)
    anchors.save(args.out)
    if args.corr_out:
        cm.save(args.corr_out)
    ids = tensor.example_ids
    print(f"objective {format_float(anchors.objective)}")
    for m, w in zip(anchors.medoids, anchors.weights):
        print(f"anchor {ids[m]} weight {int(w)}")
    return EXIT_OK


def cmd_score(args) -> int:
    anchors = AnchorSet.load(args.anchors)
    models, conf = _anchor_columns(args.targets, anchors)
    scores = apw_score(anchors, conf)
    lines = ["model_id,score"] + [f"{m},{format_float(s)}" for m, s in zip(models, scores)]
    for m, s in zip(models, scores):
        print(f"{m}\t{s:.6f}")
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    tensor = load_prediction_tensor(args.manifest)
    anchors = AnchorSet.load(args.anchors, tensor.example_ids)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = tensor.example_ids
    is_anchor = np.zeros(len(ids), dtype=bool)
    is_anchor[list(anchors.medoids)] = True

    if args.per_class:
        if len(args.targets) != tensor.class_count:
            raise UsageError(f"--per-class needs {tensor.class_count} target files, one per class")
        models = [
            fit_predictor(class_slice(tensor, c), anchors, args.space, args.eps)
            for c in range(tensor.class_count)
        ]
        per_class = [_anchor_columns(p, anchors) for p in args.targets]
        model_ids = per_class[0][0]
        if any(rows != model_ids for rows, _ in per_class):
            raise KeyError("per-class target files list different models")
        stacked = np.stack([v for _, v in per_class], axis=-1)
        probs, labels = predict_classes_matrix(models, stacked)
        for c, pm in enumerate(models):
            pm.save(out / f"predictor_class{c}")
        for mi, mid in enumerate(model_ids):
            with open(out / f"estimates_{mid}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["example_id", *(f"class_{c}" for c in range(tensor.class_count)),
                            "predicted_label", "is_anchor"])
                for j, eid in enumerate(ids):
                    w.writerow([eid, *(format_float(v) for v in probs[mi, j]),
                                int(labels[mi, j]), int(is_anchor[j])])
            print(f"{mid}\testimated accuracy {np.mean(labels[mi] == tensor.labels):.4f}")
        return EXIT_OK

    if len(args.targets) != 1:
        raise UsageError("give exactly one --targets file (or use --per-class)")
    pm = fit_predictor(correct_class_matrix(tensor), anchors, args.space, args.eps)
    pm.save(out / "predictor")
    model_ids, conf = _anchor_columns(args.targets[0], anchors)
    est = predict_matrix(pm, conf)
    for mi, mid in enumerate(model_ids):
        with open(out / f"estimates_{mid}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["example_id", "estimate", "is_anchor"])
            for j, eid in enumerate(ids):
                w.writerow([eid, format_float(est[mi, j]), int(is_anchor[j])])
        print(f"{mid}\tmean estimated gold-class confidence {est[mi].mean():.4f}")
    return EXIT_OK


def cmd_map(args) -> int:
    if bool(args.manifest) == bool(args.corr):
        raise UsageError("give exactly one of --manifest or --corr")
    tensor = None
    if args.manifest:
        tensor = load_prediction_tensor(args.manifest)
        cm = correlation_matrix(correct_class_matrix(tensor), args.eps)
    else:
        cm = CorrelationModel.load(args.corr)
    ids = cm.example_ids or tuple(str(i) for i in range(cm.n_examples))
    if args.colors:
        colors = _read_colors(args.colors, ids)
    elif tensor is not None:
        colors = correct_class_matrix(tensor).values.mean(axis=0)
    else:
        colors = np.full(len(ids), 0.5)
    anchors = AnchorSet.load(args.anchors, ids) if args.anchors else None
    coords = mds_coordinates(cm, 2, args.intermediate_dims)
    out = Path(args.out)
    render_map(coords, colors, anchors, out, args.title)
    coords_path = out.with_name(out.stem + "_coords.csv")
    coords.to_csv(coords_path)
    print(f"wrote {out} and {coords_path} (stress {coords.stress:.4f})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    tensor = load_prediction_tensor(args.manifest)
    try:
        raw = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    agreement_cfg = raw.pop("agreement", None)
    raw["seed"] = args.seed
    config = ExperimentConfig.from_dict(raw)
    emb = read_embeddings(args.embeddings, tensor.n_examples) if args.embeddings else None
    report = run_ranking_experiment(tensor, config, emb, threads=args.threads)
    out = Path(args.out)
    report.write(out)
    for m in config.methods:
        a = report.aucc(m)
        label = "n/a" if a is None else f"{a:.4f} +/- {report.aucc_se(m):.4f}"
        print(f"{m:20s} AUCC {label}")
    if agreement_cfg is not None:
        agr = run_agreement_experiment(tensor, seed=args.seed, **agreement_cfg)
        (out / "agreement.json").write_text(json.dumps(agr.summary(), indent=2) + "\n")
        for k, v in zip(agr.anchor_counts, agr.mean_agreement()):
            print(f"agreement with {k:3d} anchors: {v:.4f}")
    if not report.audit_ok():
        print("target read audit FAILED", file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


def cmd_synth(args) -> int:
    try:
        raw = json.loads(Path(args.spec).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"spec is not valid JSON: {exc}") from None
    raw["seed"] = args.seed
    spec = SynthSpec.from_dict(raw)
    manifest = write_population(spec, args.out)
    print(f"wrote {manifest} ({spec.n_models} models x {spec.n_examples} examples)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchor-points",
        description="Select anchor points and micro-benchmark classifiers from prediction tensors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a tensor bundle")
    p.add_argument("manifest")
    p.add_argument("--report", help="write the report as JSON")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("select", help="choose anchor points from source models")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--out", required=True, help="anchor set JSON")
    p.add_argument("--corr-out", help="also write the correlation matrix CSV (+ JSON sidecar)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("score", help="anchor-weighted scores for target models")
    p.add_argument("--anchors", required=True)
    p.add_argument("--targets", required=True, help="CSV: model_id,<example ids...>")
    p.add_argument("--out", help="scores CSV")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("predict", help="estimate instance-level predictions of targets")
    p.add_argument("--manifest", required=True, help="source model bundle")
    p.add_argument("--anchors", required=True)
    p.add_argument("--targets", required=True, nargs="+",
                   help="anchor confidence CSV(s); one per class with --per-class")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--per-class", action="store_true")
    p.add_argument("--space", choices=("probability", "logit"), default="probability")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("map", help="render an anchor point map as SVG")
    p.add_argument("--manifest")
    p.add_argument("--corr", help="correlation CSV written by select --corr-out")
    p.add_argument("--colors", help="CSV: example_id,value with values in [0, 1]")
    p.add_argument("--anchors")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="Anchor point map")
    p.add_argument("--eps", type=float, default=DEFAULT_EPS)
    p.add_argument("--intermediate-dims", type=int, default=0)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("evaluate", help="run the ranking (and agreement) protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--embeddings", help="CSV: one row per example, no header")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic population bundle")
    p.add_argument("--spec", required=True, help="JSON synthetic population spec")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, TensorFormatError, json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
