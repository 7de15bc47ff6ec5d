"""Paired multimodal datasets: synthetic generation, CSV ingestion, user splits, few-label sampling."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.special import ndtr

from .core import ModalityWindow, PairedDataset


class DataError(ValueError):
    pass


FAMILIES = ("sin", "cos_mix")


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    channels: int = 3
    timesteps: int = 64
    family: str = "sin"
    base_frequency: float = 2.0


@dataclass(frozen=True)
class SynthSpec:
    class_count: int = 6
    modality_specs: tuple = (
        ModalitySpec("acc", 3, 64, "sin"),
        ModalitySpec("gyro", 3, 64, "cos_mix"),
    )
    users: int = 10
    samples_per_user_per_class: int = 10
    noise_sigma: float = 0.1
    correlation_strength: float = 1.0
    # relative spread of the latent frequency/amplitude around the class value
    frequency_jitter: float = 0.03
    amplitude_jitter: float = 0.3
    # per-user tempo scaling, shared by all modalities of that user
    user_tempo_spread: float = 0.03

    def __post_init__(self):
        object.__setattr__(self, "modality_specs", tuple(self.modality_specs))
        if self.class_count < 2:
            raise DataError(f"class_count must be >= 2, got {self.class_count}")
        if len(self.modality_specs) < 2:
            raise DataError("at least two modality specs are required")
        if len({m.name for m in self.modality_specs}) != len(self.modality_specs):
            raise DataError("modality names must be unique")
        if self.noise_sigma < 0:
            raise DataError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise DataError(f"correlation_strength must lie in [0, 1], got {self.correlation_strength}")
        if self.users < 1 or self.samples_per_user_per_class < 1:
            raise DataError("users and samples_per_user_per_class must be positive")
        for m in self.modality_specs:
            if m.timesteps < 8:
                raise DataError(f"modality {m.name!r}: timesteps must be >= 8, got {m.timesteps}")
            if m.channels < 1:
                raise DataError(f"modality {m.name!r}: channels must be >= 1")
            if m.family not in FAMILIES:
                raise DataError(f"modality {m.name!r}: unknown signal family {m.family!r}")


@dataclass(frozen=True)
class SynthLatents:
    """Per-sample, per-modality latent (phase, frequency, amplitude) plus bookkeeping."""

    user_ids: np.ndarray
    labels: np.ndarray
    phase: np.ndarray  # (n_modalities, n)
    frequency: np.ndarray
    amplitude: np.ndarray


def class_frequency(base: float, k: int) -> float:
    return base * (1.0 + k / 2.0)


def mixing_matrix(channels: int, modality_index: int) -> np.ndarray:
    """Fixed channel mixing for a modality: depends only on its position, never on the data seed."""
    rng = np.random.default_rng(1000 + modality_index)
    m = rng.normal(size=(channels, 3))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def synthetic_latents(spec: SynthSpec, seed: int) -> SynthLatents:
    rng = np.random.default_rng(seed)
    n_mod = len(spec.modality_specs)
    reps = spec.samples_per_user_per_class
    user_ids = np.repeat(np.arange(spec.users), spec.class_count * reps)
    labels = np.tile(np.repeat(np.arange(spec.class_count), reps), spec.users)
    n = user_ids.size
    tempo = np.exp(spec.user_tempo_spread * rng.standard_normal(spec.users))

    rho = spec.correlation_strength
    shared = rng.standard_normal((3, n))
    own = rng.standard_normal((n_mod, 3, n))
    u = rho * shared[None] + np.sqrt(1.0 - rho * rho) * own  # (n_mod, 3, n), unit variance

    phase = 2 * np.pi * ndtr(u[:, 0])
    freq = np.empty((n_mod, n))
    for m, ms in enumerate(spec.modality_specs):
        fk = np.array([class_frequency(ms.base_frequency, k) for k in labels])
        freq[m] = fk * tempo[user_ids] * np.exp(spec.frequency_jitter * u[m, 1])
    amp = np.exp(spec.amplitude_jitter * u[:, 2])
    return SynthLatents(user_ids, labels, phase, freq, amp)


def render_window(ms: ModalitySpec, modality_index: int, phase: float, frequency: float,
                  amplitude: float) -> np.ndarray:
    """Noise-free rendering of one window from its latent."""
    t = np.arange(ms.timesteps) / ms.timesteps
    arg = 2 * np.pi * frequency * t + phase
    if ms.family == "sin":
        offsets = np.arange(ms.channels) * np.pi / max(ms.channels, 1)
        return amplitude * np.sin(arg[None, :] + offsets[:, None])
    basis = np.stack([np.cos(arg), np.cos(2 * arg) * 0.5, np.sin(arg) * 0.25])
    return amplitude * (mixing_matrix(ms.channels, modality_index) @ basis)


def generate_synthetic(spec: SynthSpec, seed: int) -> PairedDataset:
    lat = synthetic_latents(spec, seed)
    noise_rng = np.random.default_rng([seed, 1])
    windows = {}
    for m, ms in enumerate(spec.modality_specs):
        ws = []
        for k in range(lat.labels.size):
            x = render_window(ms, m, lat.phase[m, k], lat.frequency[m, k], lat.amplitude[m, k])
            if spec.noise_sigma > 0:
                x = x + spec.noise_sigma * noise_rng.standard_normal(x.shape)
            ws.append(ModalityWindow(ms.name, x, int(lat.user_ids[k]), int(lat.labels[k])))
        windows[ms.name] = ws
    return PairedDataset(tuple(ms.name for ms in spec.modality_specs), windows, spec.class_count)


# ---------------------------------------------------------------- CSV layout

_CELL = re.compile(r"^c(\d+)_t(\d+)$")


def _read_rows(path: Path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from None
    if not rows:
        raise DataError(f"{path}: empty file")
    return rows[0], rows[1:]


def _number(text: str, path: Path, row: int, col: str, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise DataError(f"{path}: non-numeric cell {text!r} at row {row}, column {col!r}") from None


def _read_modality(path: Path, channels: int):
    header, rows = _read_rows(path)
    if not header or header[0] != "sample_index":
        raise DataError(f"{path}: first column must be sample_index")
    pos = []
    for name in header[1:]:
        m = _CELL.match(name)
        if not m:
            raise DataError(f"{path}: unexpected column {name!r}")
        pos.append((int(m.group(1)), int(m.group(2))))
    n_ch = 1 + max(c for c, _ in pos)
    n_t = 1 + max(t for _, t in pos)
    if n_ch != channels:
        raise DataError(f"{path}: file holds {n_ch} channels, schema says {channels}")
    if len(pos) != n_ch * n_t or len(set(pos)) != len(pos):
        raise DataError(f"{path}: columns do not form a complete channel x timestep grid")
    ch = np.array([c for c, _ in pos])
    ts = np.array([t for _, t in pos])
    out = {}
    for r, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} cells, header has {len(header)}")
        idx = _number(row[0], path, r, "sample_index", int)
        vals = np.array([_number(v, path, r, header[j + 1]) for j, v in enumerate(row[1:])])
        grid = np.empty((n_ch, n_t))
        grid[ch, ts] = vals
        if idx in out:
            raise DataError(f"{path}: duplicate sample_index {idx}")
        out[idx] = grid
    return out


def ingest_csv(dir_path, schema: dict, overlap: int = 0, class_count: Optional[int] = None) -> PairedDataset:
    """Read the one-file-per-modality CSV layout.

    schema maps modality_id -> (channels, timesteps). Each row is cut into
    windows of `timesteps` with stride timesteps - overlap; windows cut from
    rows with the same sample_index are paired.
    """
    d = Path(dir_path)
    header, rows = _read_rows(d / "index.csv")
    if header[:3] != ["sample_index", "user_id", "label"]:
        raise DataError(f"{d / 'index.csv'}: header must be sample_index,user_id,label")
    index = {}
    for r, row in enumerate(rows, start=2):
        if not row:
            continue
        idx = _number(row[0], d / "index.csv", r, "sample_index", int)
        user = _number(row[1], d / "index.csv", r, "user_id", int)
        label = row[2].strip() if len(row) > 2 else ""
        index[idx] = (user, _number(label, d / "index.csv", r, "label", int) if label else None)

    recordings = {}
    for mod, (channels, _) in schema.items():
        rec = _read_modality(d / f"{mod}.csv", channels)
        missing = sorted(set(index) - set(rec))
        if missing:
            raise DataError(f"{mod}.csv: missing sample_index {missing}")
        extra = sorted(set(rec) - set(index))
        if extra:
            raise DataError(f"{mod}.csv: sample_index {extra} absent from index.csv")
        recordings[mod] = rec

    labels_seen = {lab for _, lab in index.values() if lab is not None}
    if class_count is None:
        class_count = max(labels_seen) + 1 if labels_seen else 2

    windows = {m: [] for m in schema}
    for idx in sorted(index):
        user, label = index[idx]
        counts = {}
        for mod, (_, steps) in schema.items():
            x = recordings[mod][idx]
            stride = steps - overlap
            if stride < 1:
                raise DataError(f"overlap {overlap} leaves no stride for {mod} windows of {steps}")
            if x.shape[1] < steps:
                raise DataError(f"{mod}.csv: sample_index {idx} has {x.shape[1]} timesteps, need {steps}")
            starts = range(0, x.shape[1] - steps + 1, stride)
            counts[mod] = len(starts)
            windows[mod].extend(ModalityWindow(mod, x[:, s:s + steps], user, label) for s in starts)
        if len(set(counts.values())) > 1:
            raise DataError(f"sample_index {idx}: modalities yield different window counts {counts}")
    return PairedDataset(tuple(schema), windows, class_count)


def write_csv(ds: PairedDataset, dir_path) -> Path:
    """Write a dataset in the layout `ingest_csv` reads (one window per row)."""
    d = Path(dir_path)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "index.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "user_id", "label"])
        for k, win in enumerate(ds.primary):
            w.writerow([k, win.user_id, "" if win.label is None else win.label])
    for mod in ds.modalities:
        c, t = ds.shape_of(mod)
        with open(d / f"{mod}.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index"] + [f"c{i}_t{j}" for i in range(c) for j in range(t)])
            for k, win in enumerate(ds.windows[mod]):
                w.writerow([k] + [repr(float(v)) for v in win.data.ravel()])
    return d


# ---------------------------------------------------------------- splits

def split_by_user(ds: PairedDataset, train_users, eval_users, seed: int):
    """Returns (train, validation, test); evaluation users are halved 1:1, stratified by class."""
    train_users, eval_users = set(train_users), set(eval_users)
    overlap = train_users & eval_users
    if overlap:
        raise DataError(f"users {sorted(overlap)} appear in both train and eval sets")
    users = ds.user_ids
    uncovered = set(users.tolist()) - train_users - eval_users
    if uncovered:
        raise DataError(f"users {sorted(uncovered)} are in neither train nor eval set")
    train_idx = np.flatnonzero(np.isin(users, list(train_users)))
    eval_idx = np.flatnonzero(np.isin(users, list(eval_users)))

    rng = np.random.default_rng(seed)
    labels = ds.labels[eval_idx]
    strata, pooled = [], []
    for c in np.unique(labels):
        members = eval_idx[labels == c]
        if c >= 0 and members.size >= 2:
            strata.append(rng.permutation(members))
        else:
            pooled.extend(members.tolist())
    if pooled:
        strata.append(rng.permutation(np.array(pooled, dtype=np.int64)))
    order = np.concatenate(strata) if strata else np.empty(0, dtype=np.int64)
    val_idx, test_idx = np.sort(order[0::2]), np.sort(order[1::2])
    return ds.subset(train_idx), ds.subset(val_idx), ds.subset(test_idx)


def default_user_split(ds: PairedDataset, eval_fraction: float = 0.2):
    """Highest user ids go to evaluation (at least one user)."""
    users = sorted(set(ds.user_ids.tolist()))
    if len(users) < 2:
        raise DataError("need at least two users for a user-disjoint split")
    n_eval = min(len(users) - 1, max(1, round(len(users) * eval_fraction)))
    return set(users[:-n_eval]), set(users[-n_eval:])


@dataclass(frozen=True)
class FewShotSelection:
    labeled_indices: dict
    labeling_rate: float
    n_per_class: int

    @property
    def indices(self) -> list:
        return [i for c in sorted(self.labeled_indices) for i in self.labeled_indices[c]]

    def __len__(self):
        return sum(len(v) for v in self.labeled_indices.values())


def labeling_rate(n_per_class: int, class_count: int, train_size: int) -> float:
    return n_per_class * class_count / train_size


def sample_few_labels(train: PairedDataset, n_per_class: int, seed: int) -> FewShotSelection:
    if n_per_class < 1:
        raise DataError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = np.random.default_rng(seed)
    labels = train.labels
    chosen = {}
    for c in range(train.class_count):
        pool = np.flatnonzero(labels == c)
        if pool.size < n_per_class:
            raise DataError(f"class {c} has {pool.size} labeled training samples, need {n_per_class}")
        chosen[c] = tuple(sorted(int(i) for i in rng.choice(pool, size=n_per_class, replace=False)))
    return FewShotSelection(chosen, labeling_rate(n_per_class, train.class_count, len(train)), n_per_class)


def infer_schema(dir_path) -> dict:
    """modality_id -> (channels, timesteps) from the headers of every non-index CSV, sorted by name."""
    d = Path(dir_path)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    schema = {}
    for path in sorted(d.glob("*.csv")):
        if path.name == "index.csv":
            continue
        header, _ = _read_rows(path)
        cells = [_CELL.match(h) for h in header[1:]]
        if not cells or not all(cells):
            raise DataError(f"{path}: header is not sample_index followed by c<channel>_t<step> columns")
        schema[path.stem] = (1 + max(int(m.group(1)) for m in cells), 1 + max(int(m.group(2)) for m in cells))
    if len(schema) < 1:
        raise DataError(f"{d}: no modality files found")
    return schema
