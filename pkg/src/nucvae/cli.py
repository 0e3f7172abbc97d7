"""Command-line pipeline: data prep, weak labeling, training, evaluation.

Exit codes: 0 success, 1 validation problem (bad flags, missing inputs,
refusing to overwrite), 2 runtime failure. Outputs land under --out,
resolved against $NUCVAE_OUT_ROOT when the path is relative; nothing is
overwritten without --force.
"""

import argparse
import csv
import json
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import corpus, evaluation, trainer, weaklabel

CANONICAL_ORDER = ("ELBO", "+INF", "+INF+ADV", "+INF+MIN", "+INF+ADV+MIN")


class CliError(Exception):
    """User-facing validation error; exits with code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{message}\n{self.format_usage()}")


def _resolve(path):
    path = Path(path)
    root = os.environ.get("NUCVAE_OUT_ROOT")
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _require_exists(path, what):
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}")
    return path


def _guard(paths, force):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise CliError(
            "refusing to overwrite existing outputs (pass --force): "
            + ", ".join(existing)
        )


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_grammar_path():
    return resources.files("nucvae").joinpath("data/default_grammar.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args):
    if args.config:
        grammar = corpus.SyntheticGrammar.from_file(
            _require_exists(args.config, "grammar config")
        )
    else:
        with resources.as_file(default_grammar_path()) as p:
            grammar = corpus.SyntheticGrammar.from_file(p)
    if args.seed is not None:
        grammar.seed = args.seed
    out = _resolve(args.out)
    files = [out / f"{name}.jsonl" for name in ("train", "dev", "test")]
    _guard(files + [out / "dataset.json"], args.force)
    out.mkdir(parents=True, exist_ok=True)
    splits = corpus.generate_synthetic_corpus(grammar, args.n)
    corpus.save_splits(splits, out)
    _write_json(
        {
            "n": args.n,
            "seed": grammar.seed,
            "fingerprint": corpus.dataset_fingerprint(splits),
            "sizes": {k: len(v.statements) for k, v in splits.items()},
        },
        out / "dataset.json",
    )
    print(f"wrote {sum(len(v.statements) for v in splits.values())} statements to {out}")
    return 0


def cmd_prepare_data(args):
    src = _require_exists(args.input, "input file")
    out = _resolve(args.out)
    files = [out / f"{name}.jsonl" for name in ("train", "dev", "test")]
    _guard(files + [out / "dataset.json"], args.force)
    records = []
    with open(src, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as err:
                raise corpus.ParseError(f"{src}:{lineno}: {err}") from err
    splits = corpus.prepare_gold_records(records, max_length=args.max_length)
    out.mkdir(parents=True, exist_ok=True)
    corpus.save_splits(splits, out)
    _write_json(
        {
            "source": str(src),
            "max_length": args.max_length,
            "fingerprint": corpus.dataset_fingerprint(splits),
            "sizes": {k: len(v.statements) for k, v in splits.items()},
        },
        out / "dataset.json",
    )
    print(f"prepared splits in {out}")
    return 0


def cmd_train_weaklabeler(args):
    data_dir = _require_exists(_resolve(args.data), "data directory")
    out = _resolve(args.out)
    paths = [out / "negation.json", out / "uncertainty.json", out / "metrics.json"]
    _guard(paths, args.force)
    splits = corpus.load_splits(data_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    for factor in ("negation", "uncertainty"):
        nb = weaklabel.fit(splits["train"].statements, factor, k=args.k,
                           alpha=args.alpha)
        weaklabel.save_model(nb, out / f"{factor}.json")
        metrics[factor] = {
            name: weaklabel.evaluate(nb, splits[name].statements)
            for name in ("dev", "test")
        }
        for name in ("dev", "test"):
            m = metrics[factor][name]
            print(
                f"{factor:12s} {name:4s} P={m['precision']:.3f} "
                f"R={m['recall']:.3f} F1={m['f1']:.3f}"
            )
    _write_json(metrics, out / "metrics.json")
    return 0


def cmd_weak_label(args):
    models_dir = _require_exists(_resolve(args.models), "models directory")
    src = _require_exists(args.input, "input file")
    out = _resolve(args.out)
    _guard([out], args.force)
    models = {
        factor: weaklabel.load_model(models_dir / f"{factor}.json")
        for factor in ("negation", "uncertainty")
    }
    split = corpus.load_jsonl(src)
    labeled = weaklabel.weak_label_corpus(models, split.statements)
    out.parent.mkdir(parents=True, exist_ok=True)
    corpus.save_jsonl(corpus.DatasetSplit(split.name, labeled), out)
    print(f"weak-labeled {len(labeled)} statements -> {out}")
    return 0


def cmd_train(args):
    data_dir = _require_exists(_resolve(args.data), "data directory")
    out = _resolve(args.out)
    _guard([out / "last.npz", out / "best.npz"], args.force)
    if args.config:
        config = trainer.TrainConfig.from_file(
            _require_exists(args.config, "train config")
        )
    else:
        config = trainer.TrainConfig()
    overrides = {}
    if args.objectives is not None:
        names = tuple(s for s in args.objectives.split(",") if s)
        overrides["objectives"] = names
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if overrides:
        config = trainer.TrainConfig.from_dict({**config.to_dict(), **overrides})
    splits = corpus.load_splits(data_dir)
    _, history = trainer.train(config, splits, out_dir=out)
    final = history[-1]
    print(
        f"trained {config.epochs} epochs; dev probe F1 "
        f"n={final['dev_probe_f1_n']:.3f} u={final['dev_probe_f1_u']:.3f}"
    )
    return 0


def cmd_evaluate(args):
    ckpt = _require_exists(_resolve(args.checkpoint), "checkpoint")
    data_dir = _require_exists(_resolve(args.data), "data directory")
    out = _resolve(args.out)
    _guard([out / "report.json"], args.force)
    system, _, _, _ = trainer.load_checkpoint(ckpt)
    splits = corpus.load_splits(data_dir)
    report = evaluation.evaluate_system(
        system, splits, resamples=args.resamples, seed=args.eval_seed, out_dir=out
    )
    print(
        f"evaluated {report['objective_label']}: "
        f"MIG n={report['mig']['n']:.3f} u={report['mig']['u']:.3f}"
    )
    return 0


def cmd_transfer(args):
    ckpt = _require_exists(_resolve(args.checkpoint), "checkpoint")
    data_dir = _require_exists(_resolve(args.data), "data directory")
    out = _resolve(args.out)
    _guard([out / "transfers.jsonl", out / "accuracy.json"], args.force)
    system, _, _, _ = trainer.load_checkpoint(ckpt)
    splits = corpus.load_splits(data_dir)
    dump_train = evaluation.dump_latents(system, splits["train"].statements,
                                         resamples=1, seed=args.eval_seed)
    centroids = evaluation.class_centroids(dump_train)
    dump_test = evaluation.dump_latents(system, splits["test"].statements,
                                        resamples=max(2, 5), seed=args.eval_seed)
    spaces = {"negation": "n", "uncertainty": "u", "both": None}[args.factor]
    out.mkdir(parents=True, exist_ok=True)
    accuracy = {}
    test_stmts = splits["test"].statements[: args.cap] if args.cap else \
        splits["test"].statements
    with open(out / "transfers.jsonl", "w", encoding="utf-8") as fh:
        for space in ("n", "u"):
            if spaces is not None and space != spaces:
                continue
            factor_name = evaluation.FACTOR_OF_SPACE[space]
            probe_scores, probe = evaluation.probe_informativeness(
                dump_train, dump_test, space, space
            )
            accuracy[factor_name] = {"probe_f1": probe_scores["f1"]}
            for direction, tag in (((1, 0), "1->0"), ((0, 1), "0->1")):
                result, recons = evaluation.controlled_transfer(
                    system, test_stmts, centroids, space, direction, probe
                )
                accuracy[factor_name][tag] = result
                selected = [
                    s for s in test_stmts if s.label(factor_name) == direction[0]
                ]
                for stmt, recon in zip(selected, recons):
                    fh.write(json.dumps({
                        "factor": factor_name,
                        "direction": tag,
                        "id": stmt.id,
                        "input": list(stmt.tokens),
                        "transferred": recon,
                    }) + "\n")
    _write_json(accuracy, out / "accuracy.json")
    for factor_name, result in accuracy.items():
        for tag in ("1->0", "0->1"):
            if tag in result and result[tag]["accuracy"] is not None:
                print(f"{factor_name} {tag}: accuracy {result[tag]['accuracy']:.3f}")
    return 0


def _objective_sort_key(label):
    if label in CANONICAL_ORDER:
        return (CANONICAL_ORDER.index(label), label)
    return (len(CANONICAL_ORDER), label)


def cmd_report(args):
    runs = []
    for run_dir in args.runs:
        path = _require_exists(Path(_resolve(run_dir)) / "report.json",
                               f"report for run {run_dir}")
        with open(path, encoding="utf-8") as fh:
            runs.append(json.load(fh))
    fingerprints = {r["data_fingerprint"] for r in runs}
    if len(fingerprints) > 1:
        raise CliError(
            "refusing to compare runs with mismatched dataset fingerprints: "
            + ", ".join(sorted(fingerprints))
        )
    out = _resolve(args.out)
    outputs = [out / name for name in (
        "informativeness.csv", "mig.csv", "mig_boxplot.png",
        "correlation.csv", "consistency.csv", "transfer.csv", "summary.json",
    )]
    _guard(outputs, args.force)
    out.mkdir(parents=True, exist_ok=True)

    by_label = {}
    for r in runs:
        by_label.setdefault(r["objective_label"], []).append(r)
    labels = sorted(by_label, key=_objective_sort_key)

    def avg(path_fn):
        return {
            label: float(np.mean([path_fn(r) for r in group]))
            for label, group in by_label.items()
        }

    with open(out / "informativeness.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["latent", "factor"]
            + [f"{lab}:{m}" for lab in labels for m in ("MI", "P", "R", "F1")]
        )
        for space in ("n", "u", "c"):
            for factor in ("n", "u"):
                row = [space, factor]
                for lab in labels:
                    vals = avg(lambda r: r["informativeness"][space][factor]["mi"])
                    row.append(f"{vals[lab]:.3f}")
                    for m in ("precision", "recall", "f1"):
                        vals = avg(lambda r: r["informativeness"][space][factor][m])
                        row.append(f"{vals[lab]:.3f}")
                writer.writerow(row)

    with open(out / "mig.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["objective", "seed", "factor", "mig"])
        for lab in labels:
            for r in by_label[lab]:
                for factor in ("n", "u"):
                    writer.writerow([lab, r["seed"], factor, r["mig"][factor]])
    _plot_mig_box(by_label, labels, out / "mig_boxplot.png")

    with open(out / "correlation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["objective", "rho_n_u", "rho_n_c_mean", "rho_n_c_sd",
                         "rho_u_c_mean", "rho_u_c_sd"])
        for lab in labels:
            group = by_label[lab]
            writer.writerow([
                lab,
                f"{np.mean([abs(r['correlation']['n_u']) for r in group]):.3f}",
                f"{np.mean([r['correlation']['n_c']['mean'] for r in group]):.3f}",
                f"{np.mean([r['correlation']['n_c']['sd'] for r in group]):.3f}",
                f"{np.mean([r['correlation']['u_c']['mean'] for r in group]):.3f}",
                f"{np.mean([r['correlation']['u_c']['sd'] for r in group]):.3f}",
            ])

    with open(out / "consistency.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["objective", "factor", "pass", "precision", "recall", "f1"])
        for lab in labels:
            for factor in ("n", "u"):
                for pass_name in ("pass1", "pass2"):
                    writer.writerow([lab, factor, pass_name] + [
                        f"{np.mean([r['consistency'][factor][pass_name][m] for r in by_label[lab]]):.3f}"
                        for m in ("precision", "recall", "f1")
                    ])

    with open(out / "transfer.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["direction"] + list(labels))
        for factor_name, tag, nice in (
            ("negation", "0->1", "pos -> neg"),
            ("negation", "1->0", "neg -> pos"),
            ("uncertainty", "0->1", "cer -> unc"),
            ("uncertainty", "1->0", "unc -> cer"),
        ):
            row = [nice]
            for lab in labels:
                accs = [
                    r["transfer"][factor_name][tag]["accuracy"]
                    for r in by_label[lab]
                    if r["transfer"][factor_name][tag]["accuracy"] is not None
                ]
                row.append(f"{np.mean(accs):.3f}" if accs else "n/a")
            writer.writerow(row)

    _write_json(
        {
            "runs": len(runs),
            "objectives": labels,
            "data_fingerprint": runs[0]["data_fingerprint"],
            "mig_median": {
                lab: {
                    f: float(np.median([r["mig"][f] for r in by_label[lab]]))
                    for f in ("n", "u")
                }
                for lab in labels
            },
        },
        out / "summary.json",
    )
    print(f"report over {len(runs)} runs -> {out}")
    return 0


def _plot_mig_box(by_label, labels, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, factor, title in zip(axes, ("n", "u"), ("negation", "uncertainty")):
        data = [[r["mig"][factor] for r in by_label[lab]] for lab in labels]
        ax.boxplot(data, tick_labels=labels)
        ax.set_title(title)
        ax.set_ylabel("MI gap")
        ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="nucvae", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic labeled corpus")
    p.add_argument("--config", help="grammar config JSON (default: packaged grammar)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_gen_synthetic)

    p = sub.add_parser("prepare-data", help="ingest cue-annotated gold records")
    p.add_argument("--input", required=True)
    p.add_argument("--max-length", type=int, default=corpus.MAX_LENGTH)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_prepare_data)

    p = sub.add_parser("train-weaklabeler", help="fit naive Bayes weak labelers")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train_weaklabeler)

    p = sub.add_parser("weak-label", help="stamp weak labels onto a corpus")
    p.add_argument("--models", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_weak_label)

    p = sub.add_parser("train", help="train the VAE with selected objectives")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="train config JSON")
    p.add_argument("--objectives", help="comma list from inf,adv,min (empty = ELBO only)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="run the full metric suite on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--resamples", type=int, default=30)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("transfer", help="controlled generation: flip one factor")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--factor", choices=["negation", "uncertainty", "both"],
                   default="both")
    p.add_argument("--cap", type=int, default=500)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_transfer)

    p = sub.add_parser("report", help="comparison tables and plots across runs")
    p.add_argument("runs", nargs="+", help="evaluated run directories")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (corpus.ParseError, corpus.SchemaError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure
        print(f"failure: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
