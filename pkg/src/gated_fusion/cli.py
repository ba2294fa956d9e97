"""Command-line entry point: ``gated-fusion <command> [flags]``.

Every command writes into a fresh run directory ``<out>/<timestamp>-<command>-seed<N>``
together with the fully resolved ``config.yaml``. Exit codes: 0 success,
2 usage error, 3 contract violation, 4 numeric failure.
"""

import argparse
import csv
import json
import logging
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import load_config
from .corpus import (SplitAssignment, fine_label, generate_synthetic,
                     load_store, split_dataset, truncate_labels, write_store)
from .evaluation import evaluate, export_curves, random_baseline, silhouette
from .exceptions import ContractError, DomainError, GatedFusionError, NumericError
from .retrieval import (augment_labels, build_index, query_knn, retrieval_purity,
                        write_results_jsonl)

logger = logging.getLogger("gated_fusion")

EXIT_OK, EXIT_USAGE, EXIT_CONTRACT, EXIT_NUMERIC = 0, 2, 3, 4

_COMPONENTS = {
    "numeric": "numeric-core", "corpus": "corpus", "aggregation": "aggregation",
    "fusion": "fusion-net", "estimator": "fusion-net", "diagnostics": "numeric-core",
    "losses": "training", "training": "training", "checkpoint": "training",
    "evaluation": "evaluation", "retrieval": "retrieval", "config": "pipeline-cli",
    "cli": "pipeline-cli", "_validation": "fusion-net",
}


def _component(exc):
    """Package component owning the innermost package frame of ``exc``."""
    name = "pipeline-cli"
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = Path(frame.filename).parts
        if "gated_fusion" in parts:
            sub = parts[parts.index("gated_fusion") + 1]
            name = _COMPONENTS.get(Path(sub).stem, name)
    return name


# ---------------------------------------------------------------------------
# run directories and shared loading

def make_run_dir(base, command, seed):
    """Create a new, never reused run directory."""
    base = Path(base)
    base.mkdir(parents=True, exist_ok=True)
    stem = f"{time.strftime('%Y%m%dT%H%M%S')}-{command}-seed{seed}"
    path, n = base / stem, 1
    while True:
        try:
            path.mkdir()
            return path
        except FileExistsError:
            path = base / f"{stem}-{n}"
            n += 1


def _corpus_path(args, cfg):
    path = args.corpus or cfg.corpus.path
    if path is None:
        raise DomainError("no corpus given; pass --corpus or set corpus.path")
    return path


def _split(args, cfg, corpus):
    path = args.split or cfg.corpus.split
    if path is None:
        return split_dataset(corpus, cfg.corpus.ratios, cfg.seed, cfg.corpus.min_clips)
    return SplitAssignment.load(path)


def _load(args, cfg):
    corpus = load_store(_corpus_path(args, cfg))
    return corpus, _split(args, cfg, corpus)


def _estimator(path):
    from .estimator import GatedFusionClassifier
    return GatedFusionClassifier.from_checkpoint(path)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# commands

def cmd_gen_synthetic(args, cfg, run):
    spec = cfg.synthetic
    if args.trailers is not None:
        spec = replace(spec, n_trailers=args.trailers)
    spec = replace(spec, seed=cfg.seed)
    corpus = generate_synthetic(spec)
    write_store(corpus, run / "corpus")
    print(f"wrote {len(corpus)} trailers to {run / 'corpus'}")


def cmd_split(args, cfg, run):
    corpus = load_store(_corpus_path(args, cfg))
    split = split_dataset(corpus, cfg.corpus.ratios, cfg.seed, cfg.corpus.min_clips)
    split.save(run / "split.json")
    print(f"train {len(split.train)} val {len(split.val)} test {len(split.test)} "
          f"excluded {len(split.excluded)}")


def _fit(cfg, corpus, split, n_clips=None, n_sequences=None, truncated=False):
    from .estimator import GatedFusionClassifier
    params = cfg.estimator_params()
    if n_clips is not None:
        params["n_clips"] = n_clips
    if n_sequences is not None:
        params["n_sequences"] = n_sequences
    train = corpus.subset(split.train)
    if truncated:
        train, _ = truncate_labels(train, cfg.seed)
    est = GatedFusionClassifier(**params)
    val = corpus.subset(split.val) if split.val else None
    return est.fit(train, X_val=val, genres=corpus.genres)


def cmd_train(args, cfg, run):
    from .training import write_log
    corpus, split = _load(args, cfg)
    est = _fit(cfg, corpus, split, truncated=args.truncate_labels)
    if args.sequence_head:
        est.fit_sequence_head(corpus.subset(split.train))
    est.save(run / "model.gfck")
    if est.best_state_ is not None:
        est.save(run / "model_best.gfck", which="best")
    write_log(est.history_, run / "log.csv")
    print(f"trained {len(est.history_)} log rows; checkpoint {run / 'model.gfck'}")


def cmd_finetune(args, cfg, run):
    from .training import write_log
    corpus, split = _load(args, cfg)
    est = _estimator(args.checkpoint)
    f = cfg.finetune
    est.set_params(finetune_epochs=f.epochs, finetune_lr=f.learning_rate,
                   warm_epochs=f.warm_epochs, min_lr=f.min_lr, finetune_batch_size=f.batch_size,
                   temperature=f.temperature, denominator=f.denominator,
                   random_state=cfg.seed, deterministic=cfg.deterministic)
    est.train_config_ = est._train_config()
    train = corpus.subset(split.train)
    ids = [r.primary_genre() for r in train.records]
    est.fine_tune(train, cluster_ids=ids)
    est.save(run / "model.gfck")
    write_log(est.finetune_history_, run / "log.csv")
    _write_trace(run / "silhouette_trace.csv", est.silhouette_trace_)
    print(f"silhouette {est.silhouette_trace_[0]:.4f} -> {est.silhouette_trace_[-1]:.4f}")


def _write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "silhouette"])
        for epoch, value in enumerate(trace):
            w.writerow([epoch, "" if value is None else repr(float(value))])


def _subset(corpus, split, name):
    if name == "all":
        return corpus
    ids = {"train": split.train, "val": split.val, "test": split.test}.get(name)
    if ids is None:
        raise DomainError(f"unknown subset {name!r}")
    if not ids:
        raise DomainError(f"subset {name!r} is empty")
    return corpus.subset(ids)


def cmd_eval(args, cfg, run):
    corpus, split = _load(args, cfg)
    est = _estimator(args.checkpoint)
    data = _subset(corpus, split, args.subset or cfg.eval.subset)
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    labels = data.labels()
    emb = est.transform(data)
    primary = [r.primary_genre() for r in data.records]
    report = evaluate(est.predict_proba(data), labels, corpus.genres, threshold,
                      embeddings=emb if len(set(primary)) > 1 else None,
                      cluster_ids=primary)
    report.save_json(run / "report.json")
    export_curves(report, run / "curves")
    base = random_baseline(labels, cfg.eval.random_trials, cfg.seed, threshold, corpus.genres)
    base.save_json(run / "random_baseline.json")
    print(f"F1_w {report.f1_w:.4f} P_w {report.precision_w:.4f} R_w {report.recall_w:.4f} "
          f"wAP {report.weighted_ap:.4f} mAP {report.mean_ap:.4f} "
          f"(random F1_w {base.f1_w:.4f})")


def cmd_silhouette_trace(args, cfg, run):
    """Export the trace stored in a fine-tuned checkpoint, or compute one point per
    checkpoint given."""
    corpus, split = _load(args, cfg)
    data = _subset(corpus, split, args.subset or "train")
    ids = [r.primary_genre() for r in data.records]
    rows = []
    for path in args.checkpoint:
        est = _estimator(path)
        stored = est.state_.extras.get("silhouette_trace") if est.state_.extras else None
        if stored and len(args.checkpoint) == 1:
            _write_trace(run / "silhouette_trace.csv", stored)
            print(f"exported {len(stored)} stored trace points")
            return
        rows.append(silhouette(est.transform(data), ids))
    _write_trace(run / "silhouette_trace.csv", rows)
    print(" ".join(f"{v:.4f}" for v in rows))


def cmd_retrieve(args, cfg, run):
    corpus, split = _load(args, cfg)
    est = _estimator(args.checkpoint)
    data = _subset(corpus, split, args.subset or "test")
    index = build_index(est, data.records)
    k = cfg.retrieval.k if args.k is None else args.k
    queries = args.query or index.ids
    results = [query_knn(index, q, k) for q in queries]
    write_results_jsonl(results, run / "results.jsonl")
    purity = None
    synthetic = corpus.metadata.get("synthetic")
    if synthetic and len(index) > k:
        fine = [fine_label(r, synthetic["substyles_per_genre"]) for r in data.records]
        purity = retrieval_purity(index, fine, k)
    _write_json(run / "retrieval.json", {"k": k, "n_queries": len(results), "purity": purity})
    print(f"{len(results)} queries, top-{k} purity {purity}")


def cmd_augment(args, cfg, run):
    corpus, split = _load(args, cfg)
    est = _estimator(args.checkpoint)
    data = _subset(corpus, split, args.subset or "test")
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    logits = est.decision_function(data)
    seq = est.predict_sequences(data, threshold) if est.network_.sequence_head is not None \
        else None
    with open(run / "augmented.jsonl", "w") as fh:
        for i, r in enumerate(data.records):
            rec = {"id": r.trailer_id,
                   "labels": [corpus.genres[g] for g in np.flatnonzero(r.labels)],
                   "augmented": [corpus.genres[g] for g in sorted(augment_labels(logits[i],
                                                                                 threshold))]}
            if seq is not None:
                rec["sequences"] = [[corpus.genres[g] for g in sorted(s)] for s in seq[i]]
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(data)} label sets at threshold {threshold}")


def cmd_seq_sweep(args, cfg, run):
    corpus, split = _load(args, cfg)
    test = _subset(corpus, split, "test")
    values = args.n_clips or cfg.sweep.n_clips
    rows = []
    for n in values:
        est = _fit(cfg, corpus, split, n_clips=n, n_sequences=args.sequences)
        rep = evaluate(est.predict_proba(test), test.labels(), corpus.genres,
                       cfg.eval.threshold, curves=False)
        rows.append({"n_clips": n, "f1_w": rep.f1_w, "mean_ap": rep.mean_ap,
                     "precision_w": rep.precision_w, "recall_w": rep.recall_w,
                     "weighted_ap": rep.weighted_ap})
        print(f"n_clips {n}: F1_w {rep.f1_w:.4f} mAP {rep.mean_ap:.4f} "
              f"P_w {rep.precision_w:.4f} R_w {rep.recall_w:.4f}")
    with open(run / "seq_sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v)
                        for k, v in row.items()})


def cmd_gradcheck(args, cfg, run):
    from .diagnostics import run_all
    results = run_all(cfg.seed, cfg.gradcheck.eps)
    rows = {name: {"max_rel_error": r.max_rel_error, "n_checked": r.n_checked,
                   "worst": list(r.worst) if r.worst else None}
            for name, r in results.items()}
    worst = max(r.max_rel_error for r in results.values())
    _write_json(run / "gradcheck.json", {"checks": rows, "max_rel_error": worst,
                                         "tolerance": cfg.gradcheck.tolerance})
    for name, r in results.items():
        print(f"{name:36s} {r.max_rel_error:.3e} ({r.n_checked} components)")
    print(f"max relative error {worst:.3e}")
    if not worst < cfg.gradcheck.tolerance:
        raise NumericError(f"gradient check failed: {worst:.3e} >= {cfg.gradcheck.tolerance}")


def cmd_export_embeddings(args, cfg, run):
    corpus, split = _load(args, cfg)
    est = _estimator(args.checkpoint)
    data = _subset(corpus, split, args.subset or "test")
    emb = est.transform(data)
    with open(run / "embeddings.tsv", "w") as fh:
        for tid, row in zip(data.ids, emb):
            fh.write(tid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
    print(f"wrote {emb.shape[0]} x {emb.shape[1]} embeddings")


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic, "split": cmd_split, "train": cmd_train,
    "finetune": cmd_finetune, "eval": cmd_eval, "silhouette-trace": cmd_silhouette_trace,
    "retrieve": cmd_retrieve, "augment": cmd_augment, "seq-sweep": cmd_seq_sweep,
    "gradcheck": cmd_gradcheck, "export-embeddings": cmd_export_embeddings,
}


# ---------------------------------------------------------------------------
# argument parsing

def _int_list(text):
    try:
        values = [int(v) for v in text.split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true", default=None,
                        help="single-threaded, fixed-order execution")
    common.add_argument("--out", help="base directory for run directories")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--corpus", help="corpus store directory")
    data.add_argument("--split", help="split.json from the split command")

    model = argparse.ArgumentParser(add_help=False)
    model.add_argument("--checkpoint", required=True, help="model checkpoint (.gfck)")

    subset = argparse.ArgumentParser(add_help=False)
    subset.add_argument("--subset", choices=("train", "val", "test", "all"))

    parser = argparse.ArgumentParser(prog="gated-fusion",
                                     description="Multi-expert trailer genre models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--trailers", type=int)
    sub.add_parser("split", parents=[common, data], help="train/val/test split")
    p = sub.add_parser("train", parents=[common, data], help="supervised training")
    p.add_argument("--sequence-head", action="store_true",
                   help="also fit the per-sequence readout")
    p.add_argument("--truncate-labels", action="store_true",
                   help="hide one genre per multi-genre training trailer")
    p = sub.add_parser("finetune", parents=[common, data, model], help="contrastive fine-tuning")
    p.add_argument("--denominator-mode", choices=("include-positive", "exclude-positive"))
    p = sub.add_parser("eval", parents=[common, data, model, subset], help="metrics and curves")
    p.add_argument("--threshold", type=float)
    p = sub.add_parser("silhouette-trace", parents=[common, data, subset],
                       help="silhouette w.r.t. primary genre")
    p.add_argument("--checkpoint", action="append", required=True)
    p = sub.add_parser("retrieve", parents=[common, data, model, subset], help="top-k retrieval")
    p.add_argument("--k", type=int)
    p.add_argument("--query", action="append", help="query trailer id (repeatable)")
    p = sub.add_parser("augment", parents=[common, data, model, subset],
                       help="threshold-based label sets")
    p.add_argument("--threshold", type=float)
    p = sub.add_parser("seq-sweep", parents=[common, data], help="sequence-length sweep")
    p.add_argument("--n-clips", type=_int_list, help="comma-separated window lengths")
    p.add_argument("--sequences", type=int, help="sequences per trailer (S)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    sub.add_parser("export-embeddings", parents=[common, data, model, subset],
                   help="TSV of trailer embeddings")
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out is not None:
        cfg.out = args.out
    mode = getattr(args, "denominator_mode", None)
    if mode is not None:
        cfg.finetune.denominator = mode
    if getattr(args, "threshold", None) is not None and not 0 < args.threshold < 1:
        raise DomainError("threshold must lie in (0, 1)")
    if getattr(args, "k", None) is not None and args.k < 1:
        raise DomainError("k must be >= 1")
    return cfg


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        run = make_run_dir(cfg.out, args.command, cfg.seed)
        cfg.dump(run / "config.yaml")
        COMMANDS[args.command](args, cfg, run)
        print(f"run directory: {run}")
        return EXIT_OK
    except NumericError as exc:
        print(f"numeric failure [{_component(exc)}]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractError, GatedFusionError, KeyError, FileNotFoundError) as exc:
        print(f"contract violation [{_component(exc)}]: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
