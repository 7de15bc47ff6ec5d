"""Metrics, the repetition/label-budget experiment grid, and feature export."""

from __future__ import annotations

import csv
import io
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import PairedDataset, TrainConfig, derive_seeds
from .data import labeling_rate, sample_few_labels
from .pipeline import Checkpoint, finetune, pretrain, train_supervised_baseline

METHODS = ("mesen", "labeltrain", "intra_negatives_ablation", "cmf_only", "mpc_only")
PRETRAIN_OBJECTIVE = {
    "mesen": "mesen",
    "intra_negatives_ablation": "intra_negatives",
    "cmf_only": "cmf_only",
    "mpc_only": "mpc_only",
}


class GridError(RuntimeError):
    pass


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    per_class: tuple  # (precision, recall, f1) per class
    n_test: int
    seed: int = 0


def metrics_from_predictions(y_true, y_pred, class_count: int, seed: int = 0) -> MetricsReport:
    """Accuracy and macro F1; classes without support or predictions score 0."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise ValueError("cannot score an empty test set")
    per_class = []
    for c in range(class_count):
        tp = int(np.sum((y_pred == c) & (y_true == c)))
        pred = int(np.sum(y_pred == c))
        true = int(np.sum(y_true == c))
        p = tp / pred if pred else 0.0
        r = tp / true if true else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class.append((p, r, f1))
    correct = int(np.sum(y_true == y_pred))
    return MetricsReport(correct / y_true.size, float(np.mean([f for _, _, f in per_class])),
                         tuple(per_class), int(y_true.size), seed)


def evaluate(model, test: PairedDataset, modality_id: str | None = None, seed: int = 0) -> MetricsReport:
    """Argmax prediction per window (ties go to the lowest class index)."""
    modality_id = modality_id or model.modality_id
    if modality_id not in test.modalities:
        raise ValueError(f"modality {modality_id!r} absent from test set (has {list(test.modalities)})")
    if len(test) == 0:
        raise ValueError("test set is empty")
    if model.class_count != test.class_count:
        raise ValueError(f"model predicts {model.class_count} classes, dataset has {test.class_count}")
    labels = test.labels
    if (labels < 0).any():
        raise ValueError("test set contains unlabeled windows")
    pred = np.argmax(model.predict_proba(test.array(modality_id)), axis=1)
    return metrics_from_predictions(labels, pred, test.class_count, seed)


@dataclass(frozen=True)
class ExperimentGrid:
    methods: tuple = ("mesen", "labeltrain")
    label_budgets: tuple = (1,)
    repetitions: int = 5
    modalities: tuple | None = None  # None: every modality in the data

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "label_budgets", tuple(int(b) for b in self.label_budgets))
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}; choose from {METHODS}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if not self.label_budgets or min(self.label_budgets) < 1:
            raise ValueError("label budgets must be >= 1")


def selection_seed(rep_seed: int, budget: int) -> int:
    return int(np.random.SeedSequence([rep_seed, budget]).generate_state(1)[0])


@dataclass
class ResultsTable:
    """One row per (method, budget, modality) with mean and sd over repetitions."""

    rows: list = field(default_factory=list)
    runs: list = field(default_factory=list)  # (method, budget, modality, repetition, MetricsReport)

    COLUMNS = ("method", "labels_per_class", "labeling_rate", "modality", "repetitions",
               "accuracy_mean", "accuracy_sd", "macro_f1_mean", "macro_f1_sd")

    def row(self, method, budget=None, modality=None) -> dict:
        for r in self.rows:
            if r["method"] == method and budget in (None, r["labels_per_class"]) \
                    and modality in (None, r["modality"]):
                return r
        raise KeyError((method, budget, modality))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in self.COLUMNS])
        return buf.getvalue()

    def to_text(self) -> str:
        header = [c.replace("macro_f1", "macro-F1") for c in self.COLUMNS]
        cells = [[format_rate(r[c]) if c == "labeling_rate" else _fmt(r[c], pretty=True) for c in self.COLUMNS]
                 for r in self.rows]
        widths = [max(len(h), *(len(row[i]) for row in cells)) if cells else len(h) for i, h in enumerate(header)]
        lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
        lines.append("  ".join("-" * w for w in widths))
        lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
        return "\n".join(lines) + "\n"


def _fmt(v, pretty=False):
    if isinstance(v, float):
        return f"{v:.4f}" if pretty else repr(v)
    return str(v)


def format_rate(rate: float) -> str:
    """Labeling rate as a percentage with two decimals, e.g. 0.0035 -> '0.35%'."""
    return f"{100 * rate:.2f}%"


def _run_cell(method, rep, rep_seed, train, test, grid, config):
    """All (budget, modality) results for one method and one repetition."""
    out = []
    ckpt = None
    if method in PRETRAIN_OBJECTIVE:
        ckpt = pretrain(train, config, PRETRAIN_OBJECTIVE[method], seed=rep_seed)
    mods = grid.modalities or train.modalities
    for budget in grid.label_budgets:
        sel = sample_few_labels(train, budget, selection_seed(rep_seed, budget))
        for m in mods:
            if ckpt is None:
                model = train_supervised_baseline(m, train, sel, config, seed=rep_seed)
            else:
                model = finetune(ckpt, m, train, sel, config, seed=rep_seed)
            out.append((method, budget, m, rep, evaluate(model, test, m, seed=rep_seed)))
    return out


def _guarded_cell(args):
    method, rep = args[0], args[1]
    try:
        return _run_cell(*args)
    except Exception as e:  # noqa: BLE001 - re-raised with the failing cell named
        raise GridError(f"grid cell method={method} repetition={rep} failed: {type(e).__name__}: {e}") from e


def run_grid(train: PairedDataset, test: PairedDataset, grid: ExperimentGrid, config: TrainConfig) -> ResultsTable:
    """Pretrain/fine-tune/evaluate every (method, repetition); summarise per (method, budget, modality)."""
    mods = grid.modalities or train.modalities
    missing = set(mods) - set(train.modalities)
    if missing:
        raise GridError(f"modalities {sorted(missing)} not in data")
    rep_seeds = derive_seeds(config.seed, grid.repetitions)
    jobs = [(method, rep, rep_seeds[rep], train, test, grid, config)
            for method in grid.methods for rep in range(grid.repetitions)]
    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_guarded_cell, jobs))
    else:
        results = [_guarded_cell(job) for job in jobs]
    runs = [r for cell in results for r in cell]

    table = ResultsTable(runs=runs)
    for method in grid.methods:
        for budget in grid.label_budgets:
            for m in mods:
                reports = [rep for (me, b, mo, _, rep) in runs if (me, b, mo) == (method, budget, m)]
                acc = np.array([r.accuracy for r in reports])
                f1 = np.array([r.macro_f1 for r in reports])
                table.rows.append({
                    "method": method,
                    "labels_per_class": budget,
                    "labeling_rate": labeling_rate(budget, train.class_count, len(train)),
                    "modality": m,
                    "repetitions": len(reports),
                    "accuracy_mean": float(acc.mean()),
                    "accuracy_sd": float(acc.std(ddof=1)) if acc.size > 1 else 0.0,
                    "macro_f1_mean": float(f1.mean()),
                    "macro_f1_sd": float(f1.std(ddof=1)) if f1.size > 1 else 0.0,
                })
    return table


def export_features(checkpoint: Checkpoint, ds: PairedDataset, modality_id: str, out_path) -> Path:
    """CSV of sample_index, label, then the projector output coordinates of every window."""
    if modality_id not in checkpoint.encoders:
        raise ValueError(f"modality {modality_id!r} not in checkpoint (has {checkpoint.modalities})")
    feats = checkpoint.features(ds, modality_id)
    out_path = Path(out_path)
    header = ["sample_index", "label"] + [f"f{i}" for i in range(feats.shape[1])]
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=out_path.parent, prefix=out_path.name, suffix=".tmp")
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for k, (win, row) in enumerate(zip(ds.windows[modality_id], feats)):
                w.writerow([k, "" if win.label is None else win.label] + [repr(float(v)) for v in row])
        os.replace(tmp, out_path)
    except OSError as e:
        raise OSError(f"cannot write features to {out_path}: {e}") from e
    return out_path
