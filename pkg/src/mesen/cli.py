"""Command-line entry point: mesen <subcommand> [--flags].

Every failure prints exactly one line, ``error: <kind>: <message>``, to
stderr and exits nonzero (1 for runtime errors, 2 for usage errors).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .core import TrainConfig, default_config
from .data import (ModalitySpec, SynthSpec, default_user_split, generate_synthetic, infer_schema, ingest_csv,
                   sample_few_labels, split_by_user, write_csv)
from .evaluation import METHODS, ExperimentGrid, evaluate, export_features, format_rate, run_grid
from .losses import OBJECTIVES
from .pipeline import Checkpoint, UnimodalModel, finetune, pretrain, train_supervised_baseline

DEFAULT_FEATURE_DIM = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_list(text, kind=str):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise argparse.ArgumentTypeError("expected a comma-separated list")
    try:
        return [kind(s) for s in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from None


# ---------------------------------------------------------------- shared plumbing

def _load_data(args):
    schema = infer_schema(args.data)
    if args.window:
        schema = {m: (c, args.window) for m, (c, _) in schema.items()}
    return ingest_csv(args.data, schema, overlap=args.overlap, class_count=args.classes)


def _config(args, class_count):
    base = default_config(class_count, DEFAULT_FEATURE_DIM)
    cfg = TrainConfig.load(args.config, base=base) if args.config else base
    if cfg.class_count != class_count:
        raise ValueError(f"config class_count {cfg.class_count} != data class count {class_count}")
    return cfg


def _splits(args, ds, seed):
    if args.eval_users:
        eval_users = set(args.eval_users)
        train_users = set(ds.user_ids.tolist()) - eval_users
    else:
        train_users, eval_users = default_user_split(ds)
    return split_by_user(ds, train_users, eval_users, seed)


def _data_flags(p):
    p.add_argument("--data", required=True, help="directory in the CSV layout (index.csv + <modality>.csv)")
    p.add_argument("--window", type=int, default=None, help="timesteps per window (default: whole row)")
    p.add_argument("--overlap", type=int, default=0, help="overlap between consecutive windows")
    p.add_argument("--classes", type=int, default=None, help="class count (default: max label + 1)")
    p.add_argument("--eval-users", type=lambda s: _csv_list(s, int), default=None,
                   help="comma-separated evaluation user ids (default: highest 20%% of users)")
    p.add_argument("--split-seed", type=int, default=0, help="seed of the validation/test split")


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args):
    mods = tuple(ModalitySpec(name, args.channels, args.timesteps, family)
                 for name, family in zip(args.modalities, ("sin", "cos_mix") * len(args.modalities)))
    spec = SynthSpec(args.classes, mods, args.users, args.samples_per_user_per_class, args.noise_sigma,
                     args.correlation_strength, frequency_jitter=args.frequency_jitter,
                     user_tempo_spread=args.user_tempo_spread)
    ds = generate_synthetic(spec, args.seed)
    write_csv(ds, args.out)
    print(f"wrote {len(ds)} paired windows ({', '.join(ds.modalities)}) to {args.out}")


def cmd_pretrain(args):
    ds = _load_data(args)
    cfg = _config(args, ds.class_count)
    train, _, _ = _splits(args, ds, args.split_seed)
    ckpt = pretrain(train.without_labels(), cfg, args.objective, seed=args.seed)
    ckpt.save(_ensure_parent(args.out))
    history = args.history or str(Path(args.out).with_suffix(".history.csv"))
    ckpt.write_history_csv(history)
    last = ckpt.history[-1] if ckpt.history else None
    print(f"saved checkpoint {args.out}; history {history}; final step {last}")


def _few_label_fit(args, fit):
    ds = _load_data(args)
    train, _, _ = _splits(args, ds, args.split_seed)
    sel = sample_few_labels(train, args.labels_per_class, args.seed)
    model = fit(ds, train, sel)
    model.save(_ensure_parent(args.out))
    print(f"saved model {args.out}; {len(sel)} labels, labeling rate {format_rate(sel.labeling_rate)}")


def cmd_finetune(args):
    ckpt = Checkpoint.load(args.checkpoint)

    def fit(ds, train, sel):
        cfg = TrainConfig.load(args.config, base=ckpt.config) if args.config else ckpt.config
        return finetune(ckpt, args.modality, train, sel, cfg, seed=args.seed)

    _few_label_fit(args, fit)


def cmd_baseline(args):
    def fit(ds, train, sel):
        return train_supervised_baseline(args.modality, train, sel, _config(args, ds.class_count), seed=args.seed)

    _few_label_fit(args, fit)


def cmd_eval(args):
    model = UnimodalModel.load(args.model)
    ds = _load_data(args)
    _, val, test = _splits(args, ds, args.split_seed)
    target = val if args.split == "validation" else test
    rep = evaluate(model, target, args.modality or model.modality_id)
    print(f"modality={args.modality or model.modality_id} n_test={rep.n_test} "
          f"accuracy={rep.accuracy:.6f} macro_f1={rep.macro_f1:.6f}")


def cmd_grid(args):
    ds = _load_data(args)
    cfg = _config(args, ds.class_count)
    if args.reps is not None:
        cfg = cfg.replace(repetitions=args.reps)
    if args.workers is not None:
        cfg = cfg.replace(workers=args.workers)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    train, _, test = _splits(args, ds, args.split_seed)
    grid = ExperimentGrid(tuple(args.methods), tuple(args.budgets), cfg.repetitions,
                          tuple(args.modalities) if args.modalities else None)
    table = run_grid(train, test, grid, cfg)
    if args.out:
        _ensure_parent(args.out)
        Path(args.out).write_text(table.to_csv(), encoding="utf-8")
    sys.stdout.write(table.to_text())


def cmd_export_features(args):
    ckpt = Checkpoint.load(args.checkpoint)
    ds = _load_data(args)
    if args.split != "all":
        train, val, test = _splits(args, ds, args.split_seed)
        ds = {"train": train, "validation": val, "test": test}[args.split]
    path = export_features(ckpt, ds, args.modality, args.out)
    print(f"wrote {len(ds)} feature rows to {path}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mesen", description="Multimodal-aided pretraining and few-label fine-tuning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic paired dataset in the CSV layout")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--modalities", type=_csv_list, default=["acc", "gyro"])
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--timesteps", type=int, default=64)
    p.add_argument("--users", type=int, default=10)
    p.add_argument("--samples-per-user-per-class", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=0.1)
    p.add_argument("--correlation-strength", type=float, default=1.0)
    p.add_argument("--frequency-jitter", type=float, default=SynthSpec.frequency_jitter)
    p.add_argument("--user-tempo-spread", type=float, default=SynthSpec.user_tempo_spread)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="multimodal pretraining on the training users (labels unused)")
    _data_flags(p)
    p.add_argument("--config", default=None, help="flat key = value file overriding defaults")
    p.add_argument("--out", required=True, help="checkpoint archive path")
    p.add_argument("--history", default=None, help="loss-history CSV (default: <out>.history.csv)")
    p.add_argument("--objective", choices=OBJECTIVES, default="mesen")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_pretrain)

    for name, func, helptext in (("finetune", cmd_finetune, "fine-tune one pretrained encoder on few labels"),
                                 ("baseline", cmd_baseline, "train the same network from scratch on few labels")):
        p = sub.add_parser(name, help=helptext)
        _data_flags(p)
        if name == "finetune":
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--modality", required=True)
        p.add_argument("--labels-per-class", type=int, default=1)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, help="model archive path")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="accuracy and macro F1 of a model on the test split")
    _data_flags(p)
    p.add_argument("--model", required=True)
    p.add_argument("--modality", default=None)
    p.add_argument("--split", choices=("test", "validation"), default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="methods x label budgets x repetitions results table")
    _data_flags(p)
    p.add_argument("--config", default=None)
    p.add_argument("--methods", type=_csv_list, default=["mesen", "labeltrain"],
                   help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--budgets", type=lambda s: _csv_list(s, int), default=[1])
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--modalities", type=_csv_list, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--seed", type=int, default=None, help="master seed (default: config seed)")
    p.add_argument("--out", default=None, help="results CSV path")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("export-features", help="projector outputs as CSV for external plotting")
    _data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", required=True)
    p.add_argument("--split", choices=("all", "train", "validation", "test"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_features)
    return parser


def _one_line(text) -> str:
    return " ".join(str(text).split())


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {_one_line(e)}", file=sys.stderr)
        return 2
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - every failure becomes one parseable line
        print(f"error: {type(e).__name__}: {_one_line(e)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
