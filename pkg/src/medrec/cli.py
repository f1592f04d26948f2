"""Command-line entry points: synth, build-graph, train, evaluate, ablate,
robustness, trace. Every run writes a manifest (config, seed, content hashes
of inputs) next to its outputs."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .cohort import (
    SyntheticSpec,
    build_vocabs,
    generate_synthetic_cohort,
    index_cohort,
    load_cohort,
    save_cohort,
    save_vocab,
    split_cohort,
)
from .graph import build_cooccurrence_graph, save_graph
from .metrics import REFERENCE_RESULTS, Report, evaluate
from .model import VARIANTS
from .training import (
    TrainConfig,
    load_checkpoint,
    restore_model,
    run_variant,
    save_checkpoint,
    train_stage1,
    train_stage2,
)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(
    target: Path, command: str, config: dict, seed: int, inputs: dict[str, Path], outputs: list[str]
) -> Path:
    path = target / "manifest.json" if target.is_dir() else target.with_suffix(target.suffix + ".manifest.json")
    payload = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": {name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in inputs.items()},
        "outputs": outputs,
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _load_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {}
    for name in ("seed", "tau", "alpha", "variant", "graph_scope"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    return replace(config, **overrides) if overrides else config


def _write_history_csv(history: list[dict], path: Path) -> None:
    columns = ["epoch", "stage", "loss_b", "loss_alpha", "val_jaccard", "val_f1", "val_prauc"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row.get(k, "") for k in columns})


def _write_report(report: Report, out_dir: Path) -> list[str]:
    (out_dir / "report.json").write_text(json.dumps(report.as_dict(), indent=2))
    with open(out_dir / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "n_visits", "jaccard", "f1", "prauc"])
        writer.writerow(
            ["TOTAL", report.n_visits, report.aggregate["jaccard"], report.aggregate["f1"], report.aggregate["prauc"]]
        )
        for row in report.bins:
            writer.writerow([row["bin"], row["n_visits"], row["jaccard"], row["f1"], row["prauc"]])
    return ["report.json", "report.csv"]


def _plot_history(history: list[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [row["epoch"] for row in history]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(epochs, [row["loss_b"] for row in history], label="recommendation loss")
    ax1.plot(epochs, [row["loss_alpha"] for row in history], label="selection loss")
    ax1.set_xlabel("epoch")
    ax1.legend()
    ax2.plot(epochs, [row["val_jaccard"] for row in history], label="val jaccard")
    ax2.plot(epochs, [row["val_f1"] for row in history], label="val f1")
    ax2.set_xlabel("epoch")
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _plot_bins(report: Report, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    populated = [row for row in report.bins if row["n_visits"] > 0]
    labels = [row["bin"] for row in populated]
    x = range(len(populated))
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.27
    for offset, metric in zip((-width, 0.0, width), ("jaccard", "f1", "prauc")):
        ax.bar([i + offset for i in x], [row[metric] for row in populated], width, label=metric)
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_xlabel("mean historical medications")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def _select_split(records, config: TrainConfig, which: str):
    if which == "all":
        return records
    train, val, test = split_cohort(records, config.split_ratios, config.seed)
    return {"train": train, "val": val, "test": test}[which]


def cmd_synth(args: argparse.Namespace) -> int:
    spec = SyntheticSpec.from_json(args.spec)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    records = generate_synthetic_cohort(spec)
    out = Path(args.out)
    save_cohort(records, out)
    write_manifest(out, "synth", asdict(spec), spec.seed, {"spec": Path(args.spec)}, [out.name])
    print(f"wrote {len(records)} patients to {out}")
    return 0


def cmd_build_graph(args: argparse.Namespace) -> int:
    config = _load_config(args)
    records = load_cohort(args.cohort)
    vocabs = build_vocabs(records)
    scope = records if config.graph_scope == "all" else _select_split(records, config, "train")
    graph = build_cooccurrence_graph(index_cohort(scope, *vocabs), vocabs[2].size)
    out = Path(args.out)
    save_graph(graph, out)
    outputs = [out.name]
    if args.med_vocab_out:
        save_vocab(vocabs[2], args.med_vocab_out)
        outputs.append(Path(args.med_vocab_out).name)
    write_manifest(
        out, "build-graph", {"graph_scope": config.graph_scope}, config.seed,
        {"cohort": Path(args.cohort)}, outputs,
    )
    print(f"graph over {graph.n} medications, {int(graph.adjacency.sum()) // 2} edges -> {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    records = load_cohort(args.cohort)
    splits = split_cohort(records, config.split_ratios, config.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = {"cohort": Path(args.cohort)}
    if args.config:
        inputs["config"] = Path(args.config)
    if args.stage == 1:
        ckpt = train_stage1(splits, config)
        ckpt_name = "stage1.pt"
    else:
        if not args.stage1_checkpoint:
            raise ValueError("--stage1-checkpoint is required for --stage 2")
        stage1 = load_checkpoint(args.stage1_checkpoint)
        inputs["stage1_checkpoint"] = Path(args.stage1_checkpoint)
        ckpt = train_stage2(stage1, splits, config)
        ckpt_name = "stage2.pt"
    save_checkpoint(ckpt, out_dir / ckpt_name)
    _write_history_csv(ckpt.history, out_dir / "training_log.csv")
    outputs = [ckpt_name, "training_log.csv"]
    if args.plots and ckpt.history:
        _plot_history(ckpt.history, out_dir / "training_curves.png")
        outputs.append("training_curves.png")
    write_manifest(out_dir, f"train-stage{args.stage}", asdict(config), config.seed, inputs, outputs)
    best = ckpt.history[ckpt.epoch - 1] if ckpt.history else {}
    print(
        f"stage {args.stage} done: best epoch {ckpt.epoch}, "
        f"val jaccard {best.get('val_jaccard', float('nan')):.4f} -> {out_dir / ckpt_name}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_cohort(args.cohort)
    split = _select_split(records, ckpt.train_config, args.split)
    dump: list[dict] | None = [] if args.dump_predictions else None
    report = evaluate(
        ckpt, split, stage=args.stage, tau=args.tau, dump=dump, reference=args.reference
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = _write_report(report, out_dir)
    if dump is not None:
        with open(out_dir / "predictions.jsonl", "w") as fh:
            for row in dump:
                fh.write(json.dumps(row) + "\n")
        outputs.append("predictions.jsonl")
    if args.plots:
        _plot_bins(report, out_dir / "robustness_bins.png")
        outputs.append("robustness_bins.png")
    write_manifest(
        out_dir, "evaluate", report.config, ckpt.train_config.seed,
        {"checkpoint": Path(args.checkpoint), "cohort": Path(args.cohort)}, outputs,
    )
    agg = report.aggregate
    fmt = lambda v: f"{v:.4f}" if v is not None else "n/a"
    print(f"split={args.split} jaccard={fmt(agg['jaccard'])} f1={fmt(agg['f1'])} prauc={fmt(agg['prauc'])}")
    if report.reference:
        for name, ref in report.reference.items():
            print(
                f"reference {name}: jaccard={ref['jaccard']:.3f} "
                f"f1={ref['f1']:.3f} prauc={ref['prauc']:.3f}"
            )
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = _load_config(args)
    records = load_cohort(args.cohort)
    splits = split_cohort(records, config.split_ratios, config.seed)
    variants = list(VARIANTS) if args.variants == "all" else args.variants.split(",")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in variants:
        ckpt, summary = run_variant(variant, splits, config)
        save_checkpoint(ckpt, out_dir / f"{variant}.pt")
        rows.append(summary)
        print(
            f"{variant}: stage2 val jaccard {summary['stage2_val_jaccard']:.4f} "
            f"(traversals {summary['traversal_count']})"
        )
    columns = list(rows[0].keys())
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    write_manifest(
        out_dir, "ablate", asdict(config), config.seed, {"cohort": Path(args.cohort)},
        ["ablation.csv"] + [f"{v}.pt" for v in variants],
    )
    return 0


def cmd_robustness(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_cohort(args.cohort)
    split = _select_split(records, ckpt.train_config, args.split)
    edges = tuple(float(e) for e in args.bin_edges.split(",")) if args.bin_edges else None
    report = evaluate(ckpt, split, stage=args.stage, tau=args.tau, edges=edges or (0, 5, 10, 20, 40))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "robustness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin", "n_visits", "jaccard", "f1", "prauc"])
        for row in report.bins:
            writer.writerow([row["bin"], row["n_visits"], row["jaccard"], row["f1"], row["prauc"]])
    outputs = ["robustness.csv"]
    if args.plots:
        _plot_bins(report, out_dir / "robustness_bins.png")
        outputs.append("robustness_bins.png")
    write_manifest(
        out_dir, "robustness", report.config, ckpt.train_config.seed,
        {"checkpoint": Path(args.checkpoint), "cohort": Path(args.cohort)}, outputs,
    )
    for row in report.bins:
        print(f"{row['bin']}: n={row['n_visits']} jaccard={row['jaccard']}")
    return 0


def cmd_trace(args: argparse.Namespace) -> int:
    import torch

    ckpt = load_checkpoint(args.checkpoint)
    records = load_cohort(args.cohort)
    split = _select_split(records, ckpt.train_config, args.split)
    model, graph, vocabs = restore_model(ckpt)
    stage = args.stage if args.stage is not None else ckpt.stage
    model.trace_sink = []
    with torch.no_grad():
        for patient in index_cohort(split, *vocabs):
            model.forward_patient(patient, graph, stage=stage, tau=ckpt.train_config.tau)
    out = Path(args.out)
    with open(out, "w") as fh:
        for row in model.trace_sink:
            fh.write(json.dumps(row) + "\n")
    write_manifest(
        out, "trace", {"stage": stage, "split": args.split}, ckpt.train_config.seed,
        {"checkpoint": Path(args.checkpoint), "cohort": Path(args.cohort)}, [out.name],
    )
    print(f"wrote {len(model.trace_sink)} traversal records to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medrec",
        description="Medication recommendation with graph-reasoned prescription abstraction",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file with training configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--tau", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--variant", choices=VARIANTS, default=None)
        p.add_argument("--graph-scope", dest="graph_scope", choices=("train", "all"), default=None)

    p = sub.add_parser("synth", help="generate a synthetic cohort")
    p.add_argument("--spec", required=True, help="SyntheticSpec JSON file")
    p.add_argument("--out", required=True, help="output cohort JSONL")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build-graph", help="export the co-occurrence graph")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--med-vocab-out", default=None)
    add_config_flags(p)
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train one stage")
    p.add_argument("--cohort", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--stage1-checkpoint", default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plots", action="store_true")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a cohort split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-predictions", action="store_true")
    p.add_argument("--reference", choices=sorted(REFERENCE_RESULTS), default=None)
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--cohort", required=True)
    p.add_argument("--variants", default="all", help="'all' or comma-separated names")
    p.add_argument("--out", required=True, help="output directory")
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("robustness", help="per-bin metrics by historical set size")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--bin-edges", default=None, help="comma-separated bin edges")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("trace", help="dump traversal step records as JSONL")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--stage", type=int, choices=(1, 2), default=None)
    p.add_argument("--out", required=True, help="output JSONL file")
    p.set_defaults(func=cmd_trace)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        return args.func(args)
    except Exception as exc:  # surface a one-line error, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


cli = main

if __name__ == "__main__":
    sys.exit(main())
