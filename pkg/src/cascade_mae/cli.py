"""Command-line entry point.

Exit codes: 0 success, 1 invalid input or config, 2 a job failed, 3 I/O error.
Every subcommand takes ``--seed``, ``--out`` and ``--config``; a config file
holds ``key=value`` lines whose keys are the subcommand's long options with
dashes as underscores. Flags given on the command line win over the file.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .cascade import (CascadeSpec, assemble_multiblock_mae, cascade_assemble, classifier_from_mae,
                      evaluate, finetune, load_classifier, model_footprint, reconstruct_dump,
                      save_classifier, server_refine)
from .checkpoint import load_mae, read_params
from .data import (BERNOULLI, FIXED, ImageBatch, PartitionSpec, partition, read_dataset, read_kv,
                   synth_dataset, write_partition)
from .experiments import ACCURACY_HEADER
from .fed import FedRunConfig, config_from_mapping, config_to_text, run_pretraining
from .optim import AdamConfig
from .oracle import oracle_sweep, write_oracle_csv
from .plan import ExperimentPlan, run_plan, summarize
from .rng import RngStream

EXIT_OK, EXIT_INVALID, EXIT_JOB, EXIT_IO = 0, 1, 2, 3

FED_FIELDS = {f.name: f for f in fields(FedRunConfig)}


def _csv_floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _csv_ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _images(args, label: str, per_class: int) -> ImageBatch:
    """Dataset directory if given, else synthetic images from the run seed."""
    path = getattr(args, label, None)
    if path:
        return read_dataset(path)
    return synth_dataset(per_class, args.classes, args.size, args.size, args.noise,
                         rng=RngStream(args.seed).derive(label))


def _add_synth(p):
    g = p.add_argument_group("synthetic data (used when no dataset directory is given)")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--size", type=int, default=16)
    g.add_argument("--noise", type=float, default=0.75)


def _sources(args):
    paths = list(args.sources or [])
    if args.pretrain_dir:
        d = Path(args.pretrain_dir)
        rounds = sorted(d.glob("round_*"), key=lambda p: int(p.name.split("_")[1]))
        if not rounds:
            raise FileNotFoundError(f"{d}: no round_* checkpoint directories")
        paths += sorted(rounds[-1].glob("lineage_*.ckpt"), key=lambda p: int(p.stem.split("_")[1]))
        paths += list(rounds[-1].glob("global.ckpt"))
    if not paths:
        raise ValueError("no source checkpoints: pass --sources or --pretrain-dir")
    return [load_mae(p) for p in paths]


def _source_spec(text):
    if text is None or text.startswith("replicate:"):
        return text
    return tuple(_csv_ints(text))


# subcommands ---------------------------------------------------------------

def cmd_pretrain(args) -> int:
    values = {k: v for k, v in vars(args).items() if k in FED_FIELDS and v is not None}
    cfg = config_from_mapping({k: str(v) for k, v in values.items()})
    data = _images(args, "dataset", args.per_class)
    shards = partition(data.labels, PartitionSpec(cfg.clients, args.alpha, cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config_to_text(cfg) + f"alpha={args.alpha}\n")
    write_partition(out / "partition.tsv", shards)
    _, metrics = run_pretraining(cfg, data, shards, out)
    metrics.to_csv(out / "metrics.csv")
    print(f"{cfg.rounds} rounds done; final mean loss {metrics.mean_loss(cfg.rounds) if cfg.rounds else float('nan'):.5f}")
    return EXIT_OK


def cmd_cascade(args) -> int:
    sources = _sources(args)
    spec = CascadeSpec(args.depth, args.depth if args.p_pre is None else args.p_pre,
                       source=_source_spec(args.source), init_seed=args.seed,
                       shuffle_order=args.shuffle_order)
    rng = RngStream(args.seed)
    if args.refine_epochs and spec.p_pre:
        server = _images(args, "server_data", args.server_images // args.classes)
        model = assemble_multiblock_mae(sources, spec, rng.derive("assemble"))
        model = server_refine(model, server, args.refine_epochs, rng.derive("server"))
        clf = classifier_from_mae(model, args.classes, rng.derive("classifier"))
    else:
        clf = cascade_assemble(sources, spec, args.classes, rng.derive("classifier"))
    path = save_classifier(args.out, clf, depth=spec.depth, p_pre=spec.p_pre)
    params, flops = model_footprint(clf)
    print(f"wrote {path}: depth={spec.depth} p_pre={spec.p_pre} params={params} flops={flops}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    clf = load_classifier(args.model)
    train = _images(args, "train", args.train_per_class)
    test = _images(args, "test", args.test_per_class)
    clf, curve = finetune(clf, train, args.label_fraction, args.epochs, RngStream(args.seed).derive("finetune"),
                          args.batch_size, AdamConfig(lr=args.lr))
    acc = evaluate(clf, test)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_classifier(out / "model.ckpt", clf)
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "train_accuracy"])
        for s in curve:
            w.writerow([s.epoch, repr(s.loss), repr(s.train_accuracy)])
    depth = clf.config.depth
    p_pre = args.p_pre if args.p_pre is not None else read_params(args.model)[1].get("p_pre", "")
    with open(out / "accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ACCURACY_HEADER)
        w.writerow([depth, p_pre, args.seed, args.label_fraction, repr(acc)])
    print(f"accuracy {acc:.4f}")
    return EXIT_OK


def cmd_oracle(args) -> int:
    rows = oracle_sweep(args.d, args.n, args.m, _csv_floats(args.ratios), _csv_ints(args.clients),
                        args.seed, args.gd_steps, args.semantics, args.patch_size)
    write_oracle_csv(args.out, rows)
    for r in rows:
        print(f"K={r[0]} p={r[3]} closed_form={r[5]:.6g} gd={r[6]:.6g} gap={r[7]:.3g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    sources = _sources(args)
    depth = args.depth or len(sources)
    rng = RngStream(args.seed)
    model = assemble_multiblock_mae(sources, depth, rng.derive("assemble"))
    fresh = assemble_multiblock_mae(sources, CascadeSpec(depth, 0), rng.derive("fresh"))
    images = _images(args, "images", max(1, args.rows // args.classes))
    images = images.take(np.arange(min(args.rows, len(images))))
    path = reconstruct_dump(model, images, args.ratio, rng.derive("dump"), args.out, fresh=fresh)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_plan(args) -> int:
    plan = ExperimentPlan.from_json(Path(args.plan).read_text())
    status = run_plan(plan, args.out or plan.out or "runs", args.workers)
    return EXIT_JOB if status else EXIT_OK


def cmd_summarize(args) -> int:
    summarize(args.dir)
    print((Path(args.dir) / "summary.txt").read_text(), end="")
    return EXIT_OK


# parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="key=value file with defaults for this subcommand")

    ap = argparse.ArgumentParser(prog="cascade-mae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="federated one-block MAE pre-training")
    p.add_argument("--out", default="pretrain")
    p.add_argument("--dataset", help="dataset directory (manifest.txt, pixels.f32, labels.i32)")
    p.add_argument("--per-class", type=int, default=512, help="synthetic pool images per class")
    p.add_argument("--alpha", type=float, default=0.0, help="Dirichlet concentration; 0 means IID")
    for name, f in FED_FIELDS.items():
        if name == "seed":
            continue
        kind = str if f.type in (bool, "bool") else {"int": int, "float": float, "str": str}.get(f.type, str)
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=kind, default=None)
    _add_synth(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("cascade", parents=[common], help="stack pre-trained blocks into a classifier")
    p.add_argument("--out", default="classifier.ckpt")
    p.add_argument("--sources", nargs="*", help="MAE checkpoints in lineage order")
    p.add_argument("--pretrain-dir", help="use the last round of a pretrain output directory")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--p-pre", type=int, help="pre-trained block count (default: depth)")
    p.add_argument("--source", help="comma-separated lineage ids or replicate:<i>")
    p.add_argument("--shuffle-order", action="store_true")
    p.add_argument("--server-data", help="dataset directory of server images (labels ignored)")
    p.add_argument("--server-images", type=int, default=256)
    p.add_argument("--refine-epochs", type=int, default=0)
    _add_synth(p)
    p.set_defaults(fn=cmd_cascade)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune and evaluate a classifier")
    p.add_argument("--out", default="finetune")
    p.add_argument("--model", required=True)
    p.add_argument("--train", help="training dataset directory")
    p.add_argument("--test", help="test dataset directory")
    p.add_argument("--train-per-class", type=int, default=64)
    p.add_argument("--test-per-class", type=int, default=500)
    p.add_argument("--label-fraction", type=float, default=0.25)
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--p-pre", type=int, help="recorded in the accuracy row (default: from the checkpoint)")
    _add_synth(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("oracle", parents=[common], help="closed-form vs gradient-descent linear reconstruction")
    p.add_argument("--out", default="oracle.csv")
    p.add_argument("--d", type=int, default=8)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--m", type=int, default=20)
    p.add_argument("--ratios", default="0.25,0.5,0.75")
    p.add_argument("--clients", default="1,2,5")
    p.add_argument("--gd-steps", type=int, default=2000)
    p.add_argument("--semantics", choices=[BERNOULLI, FIXED], default=BERNOULLI)
    p.add_argument("--patch-size", type=int, default=1)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("reconstruct", parents=[common], help="pixmap of masked / fresh / cascaded / original")
    p.add_argument("--out", default="reconstruction.ppm")
    p.add_argument("--sources", nargs="*")
    p.add_argument("--pretrain-dir")
    p.add_argument("--depth", type=int, help="blocks to cascade (default: all sources)")
    p.add_argument("--images", help="dataset directory")
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--ratio", type=float, default=0.75)
    _add_synth(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("plan", parents=[common], help="run an experiment plan (JSON)")
    p.add_argument("plan")
    p.add_argument("--out", help="output directory (default: the plan's 'out', else ./runs)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("summarize", parents=[common], help="median/IQR tables for a plan directory")
    p.add_argument("dir")
    p.add_argument("--out", help="unused; summaries are written into DIR")
    p.set_defaults(fn=cmd_summarize)
    return ap


def parse_args(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        values = read_kv(args.config)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        dests = {a.dest: a for a in sub._actions}
        unknown = sorted(k for k in values if k not in dests or k in ("config", "help", "fn"))
        if unknown:
            raise ValueError(f"{args.config}: unknown keys {', '.join(unknown)}")
        defaults = {}
        for k, v in values.items():
            act = dests[k]
            if act.type is not None:
                v = act.type(v)
            elif isinstance(act, argparse._StoreTrueAction):
                v = v.lower() in ("1", "true", "yes")
            defaults[k] = v
        sub.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_INVALID if exc.code else EXIT_OK
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"job failed: {exc}", file=sys.stderr)
        return EXIT_JOB


if __name__ == "__main__":
    sys.exit(main())
