"""Command-line interface.

Subcommands: gen, train, eval, bench, route, igi, gradcheck.  Exit codes:
0 success, 1 usage error, 2 runtime/assertion failure.  Flag values are
resolved as defaults < config file (--config, one "key = value" per
line, keys matching flag names with dashes or underscores) < explicit
flags, and the resolved configuration is embedded in every JSON report
and written to run_config.json for provenance.

Reports are CSV/JSON; --figures additionally renders matplotlib PNGs
alongside them.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import figures
from . import training
from .checkpoint import load_checkpoint, model_from_config, save_checkpoint
from .errors import ConfigError
from .gradcheck import run_suite
from .igi import igi_protocol
from .layer import MammothLayer
from .metrics import metric_report
from .model import AGG_CHOICES, LAYER_CHOICES
from .rng import child_rng

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so usage failures exit 1."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# small IO helpers (atomic writes, provenance embedding)
# ---------------------------------------------------------------------------

def _write_text(path, text):
    os.makedirs(os.path.dirname(os.path.abspath(str(path))), exist_ok=True)
    tmp = str(path) + ".tmp"
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _write_json(path, payload):
    _write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _resolved_config(args, keys):
    cfg = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    cfg["command"] = args.command
    return cfg


def _load_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            values[key.strip().replace("-", "_")] = value.strip()
    return values


# ---------------------------------------------------------------------------
# argument declaration
# ---------------------------------------------------------------------------

def _add_model_flags(p):
    p.add_argument("--layer", choices=LAYER_CHOICES, default="mammoth")
    p.add_argument("--agg", choices=AGG_CHOICES, default="mean")
    p.add_argument("--dout", type=int, default=64, help="output feature dim")
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--pdim", type=int, default=4, help="per-head partition width")
    p.add_argument("--experts", type=int, default=None,
                   help="expert count (default: 8 for mammoth, 5 for baselines)")
    p.add_argument("--slots", type=int, default=3, help="slots per expert")
    p.add_argument("--q", type=int, default=None,
                   help="low-rank width (default: budget solver)")
    p.add_argument("--total-slots", type=int, default=None,
                   help="soft-moe total slot count (default 200)")
    p.add_argument("--topk", type=int, default=2)
    p.add_argument("--sinkhorn-iters", type=int, default=3)
    p.add_argument("--mh-heads", type=int, default=4,
                   help="sub-token heads for sparse_mh")
    p.add_argument("--abmil-dim", type=int, default=256)


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--epochs", type=int, default=20, help="max epochs")
    p.add_argument("--min-epochs", type=int, default=10)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--epochs-no-val", type=int, default=10)


def build_parser():
    parser = Parser(prog="mammoth",
                    description="soft slot-routing MoE layer for bag classification")
    parser.add_argument("--config", default=None,
                        help="file of 'key = value' overrides (flags still win)")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=Parser)

    g = sub.add_parser("gen", help="generate a synthetic bag dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--concepts", type=int, default=8)
    g.add_argument("--dim", type=int, default=64)
    g.add_argument("--sigma", type=float, default=1.0)
    g.add_argument("--sep", type=float, default=6.0)
    g.add_argument("--nmin", type=int, default=64)
    g.add_argument("--nmax", type=int, default=256)
    g.add_argument("--mix", type=float, default=1.0)
    g.add_argument("--rule", default=data_mod.DEFAULT_RULE)
    g.add_argument("--train-bags", type=int, default=200)
    g.add_argument("--val-bags", type=int, default=50)
    g.add_argument("--test-bags", type=int, default=50)

    t = sub.add_parser("train", help="train a model and evaluate on the test split")
    t.add_argument("--data", required=True, help="dataset dir or manifest.csv")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--figures", action="store_true")
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--out", default=None, help="report path (default: stdout only)")

    b = sub.add_parser("bench", help="MACs, latency, params per layer variant")
    b.add_argument("--variant", default="all",
                   help="comma list of variants or 'all'")
    b.add_argument("--n", type=int, default=10_000)
    b.add_argument("--d", type=int, default=1024)
    b.add_argument("--dout", type=int, default=512)
    b.add_argument("--trials", type=int, default=1000)
    b.add_argument("--warmup", type=int, default=50)
    b.add_argument("--no-latency", action="store_true",
                   help="analytic counts only, skip timing")
    b.add_argument("--parallel", action="store_true",
                   help="let BLAS use all threads (default pins to one)")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--figures", action="store_true")
    b.add_argument("--heads", type=int, default=16)
    b.add_argument("--pdim", type=int, default=16)
    b.add_argument("--experts", type=int, default=None)
    b.add_argument("--slots", type=int, default=9)
    b.add_argument("--q", type=int, default=None)
    b.add_argument("--total-slots", type=int, default=None)
    b.add_argument("--topk", type=int, default=2)
    b.add_argument("--mh-heads", type=int, default=16)

    r = sub.add_parser("route", help="export routing weights for one bag")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--bag", required=True, help="bag file")
    r.add_argument("--out", required=True, help="output directory")

    i = sub.add_parser("igi", help="instance gradient interference analysis")
    i.add_argument("--data", required=True)
    i.add_argument("--selector", choices=("linear", "single_expert", "per_expert"),
                   default="linear")
    i.add_argument("--checkpoint", default=None,
                   help="analyze a trained model instead of a fresh one")
    i.add_argument("--bags", type=int, default=20, help="bags sampled from train split")
    i.add_argument("--clusters", type=int, default=8)
    i.add_argument("--per-cluster", type=int, default=100)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", required=True, help="output directory")
    i.add_argument("--dump-pairs", action="store_true",
                   help="also write pairwise similarities as CSV")
    i.add_argument("--figures", action="store_true")
    _add_model_flags(i)

    c = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--out", default=None, help="optional JSON report path")

    parser._subcommand_parsers = {name: p for name, p in sub.choices.items()}
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        overrides = _load_config_file(args.config)
        defaults = {}
        for key, raw in overrides.items():
            try:
                defaults[key] = json.loads(raw)
            except json.JSONDecodeError:
                defaults[key] = raw
        # subcommands parse into a fresh namespace, so the file-derived
        # defaults must be installed on every subparser as well
        parser.set_defaults(**defaults)
        for sub in parser._subcommand_parsers.values():
            sub.set_defaults(**{k: v for k, v in defaults.items()
                                if any(k == a.dest for a in sub._actions)})
        args = parser.parse_args(argv)   # flags still take precedence
    return args


# ---------------------------------------------------------------------------
# shared model/train plumbing
# ---------------------------------------------------------------------------

_MODEL_KEYS = ("layer", "agg", "d", "d_out", "num_classes", "heads",
               "partition_dim", "experts", "slots", "q", "total_slots",
               "topk", "sinkhorn_iters", "mh_heads", "abmil_dim", "seed")


def _model_config_from_args(args, d, num_classes):
    experts = args.experts
    if experts is None:
        experts = 8 if args.layer == "mammoth" else 5
    return {
        "layer": args.layer, "agg": args.agg, "d": d, "d_out": args.dout,
        "num_classes": num_classes, "heads": args.heads,
        "partition_dim": args.pdim, "experts": experts, "slots": args.slots,
        "q": args.q, "total_slots": args.total_slots, "topk": args.topk,
        "sinkhorn_iters": args.sinkhorn_iters, "mh_heads": args.mh_heads,
        "abmil_dim": args.abmil_dim, "seed": args.seed,
    }


def _manifest_path(data):
    return data if str(data).endswith(".csv") else os.path.join(data, "manifest.csv")


def _dataset_dims(splits):
    bags = [b for bag_list in splits.values() for b in bag_list]
    if not bags:
        raise ConfigError("dataset has no bags")
    d = bags[0].features.shape[1]
    num_classes = max(b.label for b in bags) + 1
    return d, max(num_classes, 2)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args):
    try:
        spec = data_mod.SynthSpec(
            concepts=args.concepts, dim=args.dim, sigma=args.sigma, sep=args.sep,
            n_range=(args.nmin, args.nmax), mix=args.mix, rule=args.rule,
            train_bags=args.train_bags, val_bags=args.val_bags,
            test_bags=args.test_bags, seed=args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    rng = child_rng(args.seed, "data")
    dataset = data_mod.generate_dataset(spec, rng)
    manifest = data_mod.write_dataset(dataset, args.out)
    _write_json(os.path.join(args.out, "run_config.json"),
                {"command": "gen", **spec.to_dict()})
    counts = {}
    sizes = []
    for split, bags in dataset["splits"].items():
        for bag in bags:
            counts[bag.label] = counts.get(bag.label, 0) + 1
            sizes.append(bag.features.shape[0])
    print(f"wrote {sum(len(b) for b in dataset['splits'].values())} bags to "
          f"{args.out} (manifest: {manifest})")
    print(f"class counts: {dict(sorted(counts.items()))}; "
          f"instances/bag min={min(sizes)} median={int(np.median(sizes))} "
          f"max={max(sizes)}")
    return EXIT_OK


def cmd_train(args):
    splits = data_mod.load_manifest(_manifest_path(args.data))
    d, num_classes = _dataset_dims(splits)
    model_cfg = _model_config_from_args(args, d, num_classes)
    model = model_from_config(model_cfg, rng=child_rng(args.seed, "init"))

    train_cfg = training.TrainConfig(
        lr=args.lr, weight_decay=args.wd, max_epochs=args.epochs,
        min_epochs=args.min_epochs, patience=args.patience,
        epochs_no_val=args.epochs_no_val, seed=args.seed)
    started = time.perf_counter()
    model, history = training.train(
        model, splits["train"], splits["val"], train_cfg, num_classes,
        rng_sampler=child_rng(args.seed, "sampler"),
        rng_dropout=child_rng(args.seed, "dropout"))
    train_seconds = time.perf_counter() - started

    metric, preds, scores = training.evaluate(model, splits["test"], num_classes)
    labels = [b.label for b in splits["test"]]
    report = metric_report(preds, labels,
                           scores=scores if num_classes == 2 else None,
                           num_classes=num_classes)

    run_config = {**model_cfg, "command": "train",
                  "train": {k: getattr(train_cfg, k) for k in
                            ("lr", "weight_decay", "max_epochs", "min_epochs",
                             "patience", "epochs_no_val", "batch_size", "seed")},
                  "data": os.path.abspath(args.data)}
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.mmth")
    save_checkpoint(model, model_cfg, ckpt_path)
    training.write_history_csv(history, os.path.join(args.out, "history.csv"))
    payload = {
        "run_config": run_config,
        "test_metric": metric,
        "report": report.to_dict(),
        "param_count": int(sum(t.data.size for t in model.params.values())),
        "epochs_run": len(history.epochs),
        "stopped_early": history.stopped_early,
        "train_seconds": round(train_seconds, 3),
    }
    _write_json(os.path.join(args.out, "report.json"), payload)
    _write_json(os.path.join(args.out, "run_config.json"), run_config)
    if args.figures:
        figures.training_curves(history.rows(),
                                os.path.join(args.out, "figures", "training_curves.png"))
    print(f"test metric: {metric:.4f} (balanced accuracy"
          f"{' / AUROC' if num_classes == 2 else ''}) after "
          f"{len(history.epochs)} epochs; checkpoint: {ckpt_path}")
    return EXIT_OK


def cmd_eval(args):
    model, cfg = load_checkpoint(args.checkpoint)
    splits = data_mod.load_manifest(_manifest_path(args.data))
    bags = splits[args.split]
    if not bags:
        raise ConfigError(f"split {args.split!r} is empty")
    metric, preds, scores = training.evaluate(model, bags, cfg["num_classes"])
    labels = [b.label for b in bags]
    report = metric_report(preds, labels,
                           scores=scores if cfg["num_classes"] == 2 else None,
                           num_classes=cfg["num_classes"])
    payload = {"run_config": {**cfg, "command": "eval", "split": args.split},
               "metric": metric, "report": report.to_dict()}
    if args.out:
        _write_json(args.out, payload)
    print(f"{args.split} metric: {metric:.6f}")
    return EXIT_OK


def cmd_bench(args):
    variants = (list(bench_mod.VARIANTS) if args.variant == "all"
                else [v.strip() for v in args.variant.split(",") if v.strip()])
    for v in variants:
        if v not in bench_mod.VARIANTS:
            raise UsageError(f"unknown variant {v!r}")
    kw = dict(heads=args.heads, partition_dim=args.pdim, experts=args.experts,
              slots=args.slots, q=args.q, total_slots=args.total_slots,
              topk=args.topk, mh_heads=args.mh_heads)
    results = bench_mod.run_bench(
        variants, args.n, args.d, args.dout, trials=args.trials,
        warmup=args.warmup, rng=child_rng(args.seed, "bench"),
        parallel=args.parallel, measure=not args.no_latency, **kw)
    os.makedirs(args.out, exist_ok=True)
    out_csv = os.path.join(args.out, "bench.csv")
    bench_mod.write_bench_csv(results, out_csv)
    _write_json(os.path.join(args.out, "run_config.json"),
                _resolved_config(args, ("variant", "n", "d", "dout", "trials",
                                        "warmup", "parallel", "seed", "heads",
                                        "pdim", "experts", "slots", "q",
                                        "total_slots", "topk", "mh_heads")))
    if args.figures:
        figures.bench_chart(results, os.path.join(args.out, "figures", "bench.png"))
    for r in results:
        lat = ("-" if r.latency_ms_mean is None
               else f"{r.latency_ms_mean:.2f}±{r.latency_ms_std:.2f} ms")
        print(f"{r.variant:>15}: {r.macs:>14,} MACs  {r.params:>10,} params  {lat}")
    print(f"wrote {out_csv}")
    return EXIT_OK


def cmd_route(args):
    model, cfg = load_checkpoint(args.checkpoint)
    if not isinstance(model.layer, MammothLayer):
        raise UsageError(
            f"routing export needs a mammoth checkpoint, got layer {cfg['layer']!r}")
    bag = data_mod.read_bag(args.bag)
    _, record = model.logits(bag.features, record_routing=True, bag_id=bag.bag_id)
    os.makedirs(args.out, exist_ok=True)

    per_head_path = os.path.join(args.out, "routing_per_head.csv")
    tmp = per_head_path + ".tmp"
    slots = model.layer.config.slots
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "head", "expert", "slot", "instance", "alpha"])
        for h, alpha in enumerate(record.per_head):
            for row in range(alpha.shape[0]):
                expert, slot = divmod(row, slots)
                for i in range(alpha.shape[1]):
                    writer.writerow([bag.bag_id, h, expert, slot, i,
                                     f"{alpha[row, i]:.8e}"])
    os.replace(tmp, per_head_path)

    mean_path = os.path.join(args.out, "routing_head_mean.csv")
    tmp = mean_path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bag_id", "expert", "slot", "instance", "alpha_mean"])
        mean = record.head_mean
        for row in range(mean.shape[0]):
            expert, slot = divmod(row, slots)
            for i in range(mean.shape[1]):
                writer.writerow([bag.bag_id, expert, slot, i,
                                 f"{mean[row, i]:.8e}"])
    os.replace(tmp, mean_path)
    print(f"wrote {per_head_path} and {mean_path} "
          f"({len(record.per_head)} heads, {record.head_mean.shape[0]} slots, "
          f"N={record.n})")
    return EXIT_OK


def cmd_igi(args):
    splits = data_mod.load_manifest(_manifest_path(args.data))
    d, num_classes = _dataset_dims(splits)
    if args.checkpoint:
        model, _ = load_checkpoint(args.checkpoint)
    else:
        if args.selector == "linear":
            args.layer = "linear"
        else:
            args.layer = "mammoth"
            if args.selector == "single_expert":
                args.experts = 1
        model_cfg = _model_config_from_args(args, d, num_classes)
        model = model_from_config(model_cfg, rng=child_rng(args.seed, "init"))
    bags = splits["train"][:args.bags]
    if not bags:
        raise ConfigError("train split has no bags to analyze")
    pair_rows = [] if args.dump_pairs else None
    report = igi_protocol(model, bags, args.selector, k=args.clusters,
                          per_cluster=args.per_cluster,
                          rng=child_rng(args.seed, "igi"),
                          pair_rows=pair_rows)
    os.makedirs(args.out, exist_ok=True)
    if pair_rows is not None:
        pairs_path = os.path.join(args.out, "igi_pairs.csv")
        tmp = pairs_path + ".tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bag_id", "kind", "similarity"])
            writer.writerows(pair_rows)
        os.replace(tmp, pairs_path)
    payload = {"run_config": _resolved_config(
        args, ("selector", "bags", "clusters", "per_cluster", "seed", "layer",
               "dout", "heads", "pdim", "experts", "slots", "q")),
        "report": report.to_dict()}
    _write_json(os.path.join(args.out, "igi.json"), payload)
    if args.figures:
        figures.igi_chart(report, os.path.join(args.out, "figures", "igi.png"))
    print(f"intra {report.intra_mean:.4f} vs inter {report.inter_mean:.4f} "
          f"(one-sided Welch p = {report.p_value:.3g})")
    if report.within_expert_mean is not None:
        print(f"within-expert mean {report.within_expert_mean:.4f} over "
              f"{report.n_within_expert} pairs; utilization entropy "
              f"{report.utilization_entropy:.3f} nats")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suite(args.seed)
    worst_name = max(results, key=results.get)
    failed = {k: v for k, v in results.items() if v >= args.tol}
    for name in sorted(results):
        status = "FAIL" if name in failed else "ok"
        print(f"{status:>4}  {name:<24} max rel err {results[name]:.3e}")
    print(f"worst: {worst_name} at {results[worst_name]:.3e} "
          f"({len(results)} checks, tolerance {args.tol:g})")
    if args.out:
        _write_json(args.out, {
            "run_config": _resolved_config(args, ("seed", "tol")),
            "max_rel_err": results, "passed": not failed})
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
    "route": cmd_route, "igi": cmd_igi, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
