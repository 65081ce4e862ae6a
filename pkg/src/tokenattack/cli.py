"""Command-line entry point: ``tokenattack {train,attack,sweep,report}``.

Examples::

    tokenattack train --family vit --dataset mnist --data-root data/mnist --out vit.tkat
    tokenattack attack --checkpoint vit.tkat --data-root data/mnist --index 0 --k 5
    tokenattack sweep --config sweep.json --checkpoint vit=vit.tkat --out runs/budget
    tokenattack report runs/budget/budget_sweep_detail.csv
"""

import argparse
from dataclasses import fields
from fractions import Fraction
import json
import logging
from pathlib import Path
import sys

from .attack import AttackBudget, BlockPartition, token_attack
from .checkpoint import load_checkpoint, write_container
from .data import load_dataset
from .errors import ConfigError, TokenAttackError
from .harness import (
    DETAIL_FIELDS,
    EXPERIMENTS,
    ExperimentConfig,
    SUMMARY_FIELDS,
    csv_text,
    load_reference,
    read_csv,
    render_tables,
    run_sweep,
    summarize_details,
)
from .models import default_spec
from .trainer import TrainConfig, train_model

def _int_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _epsilon(text):
    """``1/255``, ``0.0039`` or ``none``."""
    if text.lower() == "none":
        return None
    try:
        return float(Fraction(text))
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"bad epsilon {text!r}") from exc


def _checkpoint_arg(text):
    name, sep, path = text.partition("=")
    if not sep:
        return None, text
    return name, path


def _load_json(path):
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


# ------------------------------------------------------------------- train


def cmd_train(args):
    d = _load_json(args.config) if args.config else {}
    family = args.family or d.pop("family", "vit")
    data_root = args.data_root or d.pop("data_root", None)
    d.pop("family", None)
    d.pop("data_root", None)
    overrides = {
        "dataset": args.dataset,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "decay_epochs": args.decay_epochs,
        "warmup_steps": args.warmup_steps,
        "clip_norm": args.clip_norm,
        "seed": args.seed,
        "max_train": args.max_train,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(TrainConfig)}
    if set(d) - known:
        raise ConfigError(f"unknown training config keys: {sorted(set(d) - known)}")
    cfg = TrainConfig(**d)
    if data_root is None:
        raise ConfigError("--data-root is required")
    train = load_dataset(cfg.dataset, data_root, "train")
    test = load_dataset(cfg.dataset, data_root, "test")
    ckpt = train_model(default_spec(family, cfg.dataset), train, cfg, test)
    ckpt.save(args.out)
    print(json.dumps({"checkpoint": str(args.out), "family": family,
                      "test_accuracy": ckpt.metadata["test_accuracy"]}))
    return 0


# ------------------------------------------------------------------ attack


def cmd_attack(args):
    _, path = _checkpoint_arg(args.checkpoint)
    model, meta = load_checkpoint(path)
    model.requires_grad_(False)
    data = load_dataset(args.dataset or meta.get("dataset", "mnist"), args.data_root, "test")
    if not 0 <= args.index < len(data):
        raise ConfigError(f"--index {args.index} outside the {len(data)}-image test split")
    x, y = data.images[args.index], int(data.labels[args.index])
    c = x.shape[0]
    q = args.q or model.spec.patch
    part = BlockPartition.for_shape(x.shape, q)
    eps = None if args.epsilon is None else data.normalization.gray_level(args.epsilon * 255.0, c)
    budget = AttackBudget(
        k=args.k, epsilon=eps, eta=args.eta, max_iters=args.max_iters,
        saliency_mode=args.saliency, step_rule=args.step_rule,
    )
    out = token_attack(model, x, y, part, budget, data.normalization.pixel_range(c))
    result = {
        "index": args.index,
        "label": out.label,
        "pred": out.pred,
        "success": out.success,
        "pre_broken": out.pre_broken,
        "blocks": out.blocks,
        "iterations": out.iterations,
        "linf": out.linf,
        "l0": out.l0,
        "warnings": out.warnings,
    }
    if args.dump:
        write_container(
            args.dump,
            {"x": x, "x_adv": out.x_adv, "delta": out.x_adv - x},
            {**result, "q": q, "k": args.k},
        )
        result["dump"] = str(args.dump)
    print(json.dumps(result))
    return 0


# ------------------------------------------------------------------- sweep


def sweep_config(args):
    d = _load_json(args.config) if args.config else {}
    if args.checkpoint:
        ckpts = dict(d.get("checkpoints", {}))
        for text in args.checkpoint:
            name, path = _checkpoint_arg(text)
            if name is None:
                raise ConfigError(f"--checkpoint expects family=path, got {text!r}")
            ckpts[name] = path
        d["checkpoints"] = ckpts
    flag_map = {
        "experiment": args.experiment,
        "dataset": args.dataset,
        "data_root": args.data_root,
        "subset_size": args.subset_size,
        "subset_seed": args.subset_seed,
        "k_grid": args.k_grid,
        "q_grid": args.q_grid,
        "eta": args.eta,
        "max_iters": args.max_iters,
        "saliency": args.saliency,
        "step_rule": args.step_rule,
        "workers": args.workers,
        "out_dir": args.out,
    }
    d.update({k: v for k, v in flag_map.items() if v is not None})
    if args.epsilon is not False:
        d["epsilon"] = args.epsilon
    return ExperimentConfig.from_dict(d)


def cmd_sweep(args):
    cfg = sweep_config(args)
    report, paths = run_sweep(cfg)
    print(render_tables(report.rows, None if args.no_reference else load_reference()))
    for n in report.notes:
        print(f"note: {n}")
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


# ------------------------------------------------------------------ report


def cmd_report(args):
    details = []
    for p in args.detail:
        rows = read_csv(p)
        if rows and set(rows[0]) != set(DETAIL_FIELDS):
            raise ConfigError(f"{p}: not a detail CSV (columns {sorted(rows[0])})")
        details.extend(rows)
    rows = summarize_details(details)
    text = csv_text(rows, SUMMARY_FIELDS)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
        print()
    print(render_tables(rows, None if args.no_reference else load_reference()))
    return 0


# -------------------------------------------------------------------- main


def build_parser():
    ap = argparse.ArgumentParser(prog="tokenattack", description="Block-sparse adversarial token attacks.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a classifier and write a checkpoint")
    tr.add_argument("--config", help="JSON training config")
    tr.add_argument("--family", choices=["vit", "resnet", "mixer"])
    tr.add_argument("--dataset", choices=["mnist", "cifar10"])
    tr.add_argument("--data-root")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--decay-epochs", type=_int_list)
    tr.add_argument("--warmup-steps", type=int)
    tr.add_argument("--clip-norm", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-train", type=int)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.set_defaults(fn=cmd_train)

    def attack_flags(p):
        p.add_argument("--eta", type=float)
        p.add_argument("--max-iters", type=int)
        p.add_argument("--saliency", choices=["grad_l2", "jsma_plus"])
        p.add_argument("--step-rule", choices=["raw", "sign"])

    at = sub.add_parser("attack", help="attack one test image")
    at.add_argument("--checkpoint", required=True, help="path or family=path")
    at.add_argument("--dataset", choices=["mnist", "cifar10"])
    at.add_argument("--data-root", required=True)
    at.add_argument("--index", type=int, default=0, help="test-split image index")
    at.add_argument("--k", type=int, default=5)
    at.add_argument("--q", type=int)
    at.add_argument("--epsilon", type=_epsilon, default=None, help="l-inf radius as a fraction of the raw range")
    attack_flags(at)
    at.add_argument("--dump", help="write x, x_adv and delta to this container file")
    at.set_defaults(fn=cmd_attack, eta=0.1, max_iters=100, saliency="grad_l2", step_rule="raw")

    sw = sub.add_parser("sweep", help="run one experiment config")
    sw.add_argument("--config", help="JSON experiment config; flags override it")
    sw.add_argument("--experiment", choices=EXPERIMENTS)
    sw.add_argument("--checkpoint", action="append", help="family=path (repeatable)")
    sw.add_argument("--dataset", choices=["mnist", "cifar10"])
    sw.add_argument("--data-root")
    sw.add_argument("--subset-size", type=int)
    sw.add_argument("--subset-seed", type=int)
    sw.add_argument("--k-grid", type=_int_list)
    sw.add_argument("--q-grid", type=_int_list)
    sw.add_argument("--epsilon", type=_epsilon, default=False)
    attack_flags(sw)
    sw.add_argument("--workers", type=int)
    sw.add_argument("--out", help="output directory")
    sw.add_argument("--no-reference", action="store_true", help="omit the ImageNet reference tables")
    sw.set_defaults(fn=cmd_sweep)

    rp = sub.add_parser("report", help="re-render summary tables from detail CSVs")
    rp.add_argument("detail", nargs="+")
    rp.add_argument("--out", help="write the summary CSV here instead of stdout")
    rp.add_argument("--no-reference", action="store_true")
    rp.set_defaults(fn=cmd_report)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.fn(args)
    except (TokenAttackError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
