"""``mortseq`` command-line driver.

Subcommands: spec, synth, ingest, featurize, train, eval, gradcheck, viz.
Settings come from an optional JSON ``--config`` file; flags override it.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import gradcheck, pipeline, tsne
from .dataset import FilterReport, filter_and_label, load_records, write_records
from .icd import format_code
from .errors import CheckFailed, DimensionMismatch, ModelFormatError, MortseqError
from .ngrams import build_vocab, vectorize
from .synthetic import generate_synthetic, load_spec, permuted_pair_spec, save_spec, dumps_spec

log = logging.getLogger("mortseq")

# flag dest -> RunConfig field
OVERRIDES = {
    "seed": "seed",
    "model": "model",
    "orders": "orders",
    "vocab_cap": "vocab_cap",
    "shards": "shards",
    "trees": "trees",
    "max_depth": "max_depth",
    "vote": "vote",
    "epochs": "epochs",
    "lr": "lr",
    "dropout": "dropout",
    "hidden": "hidden",
    "batch_size": "batch_size",
    "viz_sample": "viz_sample",
    "min_class_count": "min_class_count",
    "table": "table",
    "perplexity": "perplexity",
    "tsne_iterations": "tsne_iterations",
}
SWITCHES = ("drop_terminal_cause", "certificate_order", "float32")


def parse_orders(text: str) -> tuple:
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"orders must look like 1, 2 or 1,2; got {text!r}") from None


def _add_run_flags(p):
    g = p.add_argument_group("run settings (override --config)")
    g.add_argument("--config", help="JSON file of run settings")
    g.add_argument("--seed", type=int)
    g.add_argument("--model", choices=("rf", "lstm"))
    g.add_argument("--orders", type=parse_orders)
    g.add_argument("--vocab-cap", type=int)
    g.add_argument("--shards", type=int)
    g.add_argument("--trees", type=int)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--vote", choices=("soft", "hard"))
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--hidden", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--viz-sample", type=int)
    g.add_argument("--min-class-count", type=int)
    g.add_argument("--table", help="recode table CSV (default: bundled demo table)")
    g.add_argument("--perplexity", type=float)
    g.add_argument("--tsne-iterations", type=int)
    g.add_argument("--drop-terminal-cause", action="store_true", default=None,
                   help="remove the underlying-cause code from the model input")
    g.add_argument("--certificate-order", action="store_true", default=None,
                   help="feed the LSTM immediate cause first")
    g.add_argument("--float32", action="store_true", default=None)


def run_config(args) -> pipeline.RunConfig:
    base = {}
    if getattr(args, "config", None):
        base = json.loads(Path(args.config).read_text())
        if "orders" in base:
            base["orders"] = tuple(base["orders"])
    cfg = pipeline.RunConfig.from_dict(base)
    changes = {}
    for dest, name in OVERRIDES.items():
        v = getattr(args, dest, None)
        if v is not None:
            changes[name] = v
    for name in SWITCHES:
        if getattr(args, name, None):
            changes[name] = True
    return replace(cfg, **changes) if changes else cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mortseq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spec", help="write a permuted-pair synthetic spec file")
    p.add_argument("out")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--per-class", type=int, default=500)
    p.add_argument("--alphabet", type=int, default=12)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--chain-length", default="3,8", help="min,max Markov causes per chain")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate records from a spec file")
    p.add_argument("spec")
    p.add_argument("out")

    p = sub.add_parser("ingest", help="filter and label a record file")
    p.add_argument("input")
    p.add_argument("out")
    p.add_argument("--classes-out", help="write the dense class map CSV here")
    p.add_argument("--min-class-count", type=int, default=1000)
    p.add_argument("--table")

    p = sub.add_parser("featurize", help="build the n-gram vocabulary on the train split")
    p.add_argument("input")
    p.add_argument("vocab_out")
    p.add_argument("--vectors-out", help="sparse vectors of all retained records")
    _add_run_flags(p)

    p = sub.add_parser("train", help="train a model and report test-split metrics")
    p.add_argument("input")
    p.add_argument("model_out")
    p.add_argument("--report", help="report path stem (.txt and .csv are written)")
    p.add_argument("--trace", help="LSTM per-epoch CSV trace")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="evaluate a saved model on a split")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("--split", choices=("train", "test", "holdout"), default="test")
    p.add_argument("--report")

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = sub.add_parser("viz", help="t-SNE of LSTM intermediate features")
    p.add_argument("model")
    p.add_argument("input")
    p.add_argument("out", help="SVG path")
    p.add_argument("--coords", help="coordinate file (default: next to the SVG, .csv)")
    p.add_argument("--split", choices=("train", "test", "holdout"), default="test")
    p.add_argument("--viz-sample", type=int)
    p.add_argument("--perplexity", type=float)
    p.add_argument("--tsne-iterations", type=int)
    p.add_argument("--seed", type=int)
    return ap


# --- commands ----------------------------------------------------------------

def cmd_spec(args, out):
    lo, hi = (int(v) for v in args.chain_length.split(","))
    spec = permuted_pair_spec(args.classes, args.per_class, args.alphabet, args.strength,
                              args.seed, (lo, hi))
    save_spec(spec, args.out)
    print(f"wrote {args.out}", file=out)


def cmd_synth(args, out):
    spec = load_spec(args.spec)
    records = generate_synthetic(spec)
    n = write_records(records, args.out)
    Path(str(args.out) + ".spec").write_text(dumps_spec(spec))
    print(f"wrote {n} records to {args.out}", file=out)
    hist = Counter(r.underlying for r in records)
    print("underlying  count", file=out)
    for code in sorted(hist):
        print(f"{format_code(code):>10}  {hist[code]:5d}", file=out)


def cmd_ingest(args, out):
    cfg = pipeline.RunConfig(table=args.table)
    table = pipeline.load_table(cfg)
    report = FilterReport()
    kept, report = filter_and_label(load_records(args.input, report), table, args.min_class_count, report)
    write_records(kept, args.out)
    if args.classes_out:
        Path(args.classes_out).write_text(report.class_map.dumps())
    print(report.summary(), file=out)


def cmd_featurize(args, out):
    cfg = run_config(args)
    data = pipeline.prepare_path(args.input, cfg)
    vocab = build_vocab(pipeline.chains(data.train, cfg), cfg.orders, cfg.vocab_cap)
    vocab.save(args.vocab_out)
    if args.vectors_out:
        with open(args.vectors_out, "w", encoding="utf-8") as fh:
            for split_name, recs in (("train", data.train), ("test", data.test), ("holdout", data.holdout)):
                for r, ch in zip(recs, pipeline.chains(recs, cfg)):
                    v = vectorize(ch, vocab)
                    body = " ".join(f"{i}:{c}" for i, c in v.pairs())
                    fh.write(f"{r.id}\t{split_name}\t{r.label}\t{body}\n")
    print(f"vocabulary: {vocab.dim} features over orders {list(cfg.orders)} "
          f"from {len(data.train)} training records", file=out)


def _write_report(rep, stem, out):
    print(rep.to_text(), end="", file=out)
    if stem:
        txt, csv = rep.write(stem)
        print(f"wrote {txt} and {csv}", file=out)


def cmd_train(args, out):
    cfg = run_config(args)
    data = pipeline.prepare_path(args.input, cfg)
    if not data.test:
        raise MortseqError("test split is empty; need more records")
    trace_fh = open(args.trace, "w", encoding="utf-8") if args.trace else None

    def progress(stats):
        log.info("epoch %d loss %.4f train %.4f test %.4f", stats.epoch, stats.loss,
                 stats.train_acc, stats.test_acc)
        if trace_fh:
            trace_fh.write(stats.line() + "\n")

    try:
        if trace_fh:
            trace_fh.write("epoch,loss,train_acc,test_acc\n")
        model = pipeline.train_model(data, cfg, progress)
    finally:
        if trace_fh:
            trace_fh.close()
    model.save(args.model_out)
    print(f"train/test/holdout: {len(data.train)}/{len(data.test)}/{len(data.holdout)}", file=out)
    _write_report(pipeline.evaluate(model, data.test), args.report, out)


def _split_for_model(model, path, which):
    data = pipeline.prepare_path(path, model.config)
    if data.class_map != model.class_map:
        raise DimensionMismatch("data classes differ from the classes the model was trained on")
    return getattr(data, which)


def cmd_eval(args, out):
    model = pipeline.load_model(args.model)
    records = _split_for_model(model, args.input, args.split)
    if not records:
        raise MortseqError(f"{args.split} split is empty")
    _write_report(pipeline.evaluate(model, records), args.report, out)


def cmd_gradcheck(args, out):
    try:
        worst = gradcheck.run(args.instances, args.seed, corrupt=args.corrupt, raise_on_failure=True)
    except CheckFailed as exc:
        for name, err in exc.errors.items():
            print(f"FAIL {name} {err:.3e}", file=out)
        raise
    for name, err in worst.items():
        print(f"ok   {name:10s} {err:.3e}", file=out)
    print(f"all {len(worst)} tensors below {gradcheck.TOLERANCE:g}", file=out)


def cmd_viz(args, out):
    model = pipeline.load_model(args.model)
    if not isinstance(model, pipeline.LstmModel):
        raise ModelFormatError("viz needs an LSTM model file; intermediate features are LSTM-only")
    cfg = model.config
    records = _split_for_model(model, args.input, args.split)
    sample = args.viz_sample if args.viz_sample is not None else cfg.viz_sample
    seed = cfg.seed if args.seed is None else args.seed
    if sample is not None and sample < len(records):
        pick = np.sort(np.random.default_rng([seed, 4]).choice(len(records), sample, replace=False))
        records = [records[i] for i in pick]
    feats, flags = pipeline.extract_intermediate(records, model)
    ecfg = tsne.EmbeddingConfig(
        perplexity=args.perplexity or cfg.perplexity,
        iterations=args.tsne_iterations or cfg.tsne_iterations,
        seed=seed,
    )
    points, trace = tsne.embed(feats, flags, [r.id for r in records], ecfg)
    svg, coords = tsne.emit_scatter(points, args.out, args.coords)
    print(f"{len(points)} points, KL initial {trace[0]:.6f} final {trace[-1]:.6f}", file=out)
    print(f"wrote {svg} and {coords}", file=out)


COMMANDS = {
    "spec": cmd_spec,
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "viz": cmd_viz,
}


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args, out)
    except (MortseqError, OSError, ValueError, KeyError) as exc:
        print(f"mortseq {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
