"""Shared domain types, training configuration and seeding helpers."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid or unreadable training configuration."""


@dataclass(frozen=True)
class ModalityWindow:
    """One fixed-length multichannel window (channels x timesteps) of one modality."""

    modality_id: str
    data: np.ndarray
    user_id: int
    label: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ValueError(f"window data must be 2-D (channels, timesteps), got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError(f"window of modality {self.modality_id!r} has non-finite entries")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "user_id", int(self.user_id))
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))


@dataclass(frozen=True)
class Violation:
    field: str
    index: Optional[int] = None
    modalities: tuple = ()
    detail: str = ""


@dataclass(frozen=True)
class PairedDataset:
    """Index-aligned windows across modalities; index k is the same activity instant everywhere."""

    modalities: tuple
    windows: dict
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        object.__setattr__(self, "windows", {m: tuple(self.windows[m]) for m in self.modalities})

    def __len__(self):
        return len(self.windows[self.modalities[0]]) if self.modalities else 0

    @property
    def primary(self):
        return self.windows[self.modalities[0]]

    @property
    def user_ids(self) -> np.ndarray:
        return np.array([w.user_id for w in self.primary], dtype=np.int64)

    @property
    def labels(self) -> np.ndarray:
        """Labels of the first modality, -1 where absent."""
        return np.array([-1 if w.label is None else w.label for w in self.primary], dtype=np.int64)

    def shape_of(self, modality_id: str) -> tuple:
        return self.windows[modality_id][0].data.shape

    def array(self, modality_id: str, indices=None) -> np.ndarray:
        """Stack windows of one modality into a (n, channels, timesteps) array."""
        ws = self.windows[modality_id]
        if indices is not None:
            ws = [ws[i] for i in indices]
        return np.stack([w.data for w in ws]) if ws else np.empty((0,) + self.shape_of(modality_id))

    def subset(self, indices: Sequence[int]) -> "PairedDataset":
        indices = [int(i) for i in indices]
        return PairedDataset(
            self.modalities,
            {m: [self.windows[m][i] for i in indices] for m in self.modalities},
            self.class_count,
        )

    def without_labels(self) -> "PairedDataset":
        return PairedDataset(
            self.modalities,
            {m: [dataclasses.replace(w, label=None) for w in self.windows[m]] for m in self.modalities},
            self.class_count,
        )


def validate_paired(ds: PairedDataset) -> list:
    """Check the pairing invariants; returns a list of Violation records (empty when valid)."""
    out = []
    mods = list(ds.modalities)
    if not mods:
        return [Violation("modalities", detail="dataset has no modalities")]
    lengths = {m: len(ds.windows.get(m, ())) for m in mods}
    if len(set(lengths.values())) > 1:
        out.append(Violation("length", modalities=tuple(mods), detail=f"per-modality lengths {lengths}"))
    n = min(lengths.values())
    for m in mods:
        shapes = {w.data.shape for w in ds.windows[m]}
        if len(shapes) > 1:
            out.append(Violation("shape", modalities=(m,), detail=f"mixed window shapes {sorted(shapes)}"))
        bad = [k for k, w in enumerate(ds.windows[m]) if w.modality_id != m]
        for k in bad:
            out.append(Violation("modality_id", k, (m,), f"window tagged {ds.windows[m][k].modality_id!r}"))
    ref = mods[0]
    for k in range(n):
        w0 = ds.windows[ref][k]
        for m in mods[1:]:
            w = ds.windows[m][k]
            if w.user_id != w0.user_id:
                out.append(Violation("user_id", k, (ref, m), f"{w0.user_id} != {w.user_id}"))
            if w0.label is not None and w.label is not None and w.label != w0.label:
                out.append(Violation("label", k, (ref, m), f"{w0.label} != {w.label}"))
        for m in mods:
            lab = ds.windows[m][k].label
            if lab is not None and not 0 <= lab < ds.class_count:
                out.append(Violation("label", k, (m,), f"label {lab} outside [0, {ds.class_count})"))
    return out


def gamma_schedule(kind: str, n_layers: int) -> tuple:
    """Per-layer weights for the layer-aware penalty: 'uniform' (all 1) or 'linear' (i / n_layers)."""
    if kind == "uniform":
        return (1.0,) * n_layers
    if kind == "linear":
        return tuple((i + 1) / n_layers for i in range(n_layers))
    raise ConfigError(f"unknown gamma schedule {kind!r}")


# number of parameterised blocks in the default encoder (conv1, conv2, attention)
ENCODER_LAYERS = 3


@dataclass(frozen=True)
class TrainConfig:
    class_count: int
    feature_dim: int
    tau: float = 0.1
    tau_hat: float = 1.0
    alpha: float = 0.5
    beta: float = 0.5
    lambda_pr: float = -1.0
    lambda_fr: float = 1e-3
    gamma: tuple = (1.0,) * ENCODER_LAYERS
    pretrain_batch: int = 128
    finetune_batch: int = 64
    learning_rate: float = 1e-3
    epochs_pretrain: int = 200
    epochs_finetune: int = 200
    seed: int = 0
    repetitions: int = 5
    # architecture (desk-scale defaults)
    conv_channels: int = 32
    kernel_size: int = 5
    hidden_dim: int = 64
    attention_heads: int = 4
    # ambiguity switches
    norm_mode: str = "l2"
    normalize_columns: bool = True
    reg_target: str = "zero"
    balance: str = "aligning"
    # False drops the entropy term (same as lambda_pr = 0, which the field itself forbids)
    entropy_regularization: bool = True
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        problems = []
        if self.class_count < 2:
            problems.append(f"class_count must be >= 2, got {self.class_count}")
        if self.feature_dim < 2:
            problems.append(f"feature_dim must be >= 2, got {self.feature_dim}")
        if not self.tau > 0:
            problems.append(f"tau must be > 0, got {self.tau}")
        if not self.tau_hat > 0:
            problems.append(f"tau_hat must be > 0, got {self.tau_hat}")
        if self.alpha < 0 or self.beta < 0 or abs(self.alpha + self.beta - 1.0) > 1e-12:
            problems.append(f"alpha and beta must be nonnegative and sum to 1, got {self.alpha}, {self.beta}")
        if not self.lambda_pr < 0:
            problems.append(f"lambda_pr must be negative, got {self.lambda_pr}")
        if self.lambda_fr < 0:
            problems.append(f"lambda_fr must be >= 0, got {self.lambda_fr}")
        if any(g < 0 or not math.isfinite(g) for g in self.gamma):
            problems.append(f"gamma entries must be >= 0, got {self.gamma}")
        for name in ("pretrain_batch", "finetune_batch", "repetitions", "conv_channels",
                     "kernel_size", "hidden_dim", "attention_heads", "workers"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs_pretrain", "epochs_finetune"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0, got {getattr(self, name)}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.hidden_dim % self.attention_heads:
            problems.append("hidden_dim must be divisible by attention_heads")
        if self.norm_mode not in ("l2", "batch"):
            problems.append(f"norm_mode must be 'l2' or 'batch', got {self.norm_mode!r}")
        if self.reg_target not in ("zero", "checkpoint"):
            problems.append(f"reg_target must be 'zero' or 'checkpoint', got {self.reg_target!r}")
        if self.balance not in ("aligning", "total"):
            problems.append(f"balance must be 'aligning' or 'total', got {self.balance!r}")
        if problems:
            raise ConfigError("; ".join(problems))

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    # flat "key = value" text form

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """Parse the flat key-value form; keys absent from `text` come from `base` (or field defaults)."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"line {lineno}: unknown config key {key!r}")
            values[key] = _parse_value(fields[key], val, lineno)
        if base is not None:
            return base.replace(**values)
        missing = [k for k in ("class_count", "feature_dim") if k not in values]
        if missing:
            raise ConfigError(f"config text lacks required keys {missing}")
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def _parse_value(f: dataclasses.Field, val: str, lineno: int):
    try:
        if f.name == "gamma":
            return tuple(float(x) for x in val.split(",") if x.strip())
        kind = type(f.default) if f.default is not dataclasses.MISSING else int
        if kind is bool:
            if val.lower() not in ("true", "false"):
                raise ValueError(val)
            return val.lower() == "true"
        if kind is str:
            return val.strip("'\"")
        if kind is int:
            return int(val)
        return float(val)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {val!r} for {f.name}") from None


def default_config(class_count: int, feature_dim: int, **overrides) -> TrainConfig:
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2 for pseudo-class aligning, got {class_count}")
    return TrainConfig(class_count=class_count, feature_dim=feature_dim, **overrides)


def derive_seeds(master_seed: int, count: int) -> list:
    """Deterministic, independent child seeds (one per repetition)."""
    children = np.random.SeedSequence(master_seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]
