"""Multimodal-aided pretraining and few-label unimodal fine-tuning."""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import PairedDataset, TrainConfig, derive_seeds
from .data import FewShotSelection
from .losses import LossBreakdown, finetune_loss, pretrain_loss_multi, usage_entropy
from .nets import (ClassifierHead, LayeredModel, build_head, build_projector, encoder_from_config,
                   load_archive, m_norm, save_archive)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "l_cmf", "l_mpc", "l_pr", "delta", "l_pt")


class TrainingError(RuntimeError):
    pass


def _tensor(ds: PairedDataset, modality: str, indices=None) -> torch.Tensor:
    return torch.from_numpy(ds.array(modality, indices)).float()


@dataclass
class Checkpoint:
    """Everything pretraining produces: per-modality encoders and projectors, the shared pseudo-head."""

    encoders: dict
    projectors: dict
    head: ClassifierHead
    config: TrainConfig
    objective: str = "mesen"
    history: list = field(default_factory=list)  # (step, epoch, l_cmf, l_mpc, l_pr, delta, l_pt)

    @property
    def modalities(self) -> list:
        return list(self.encoders)

    def history_array(self) -> np.ndarray:
        return np.array(self.history, dtype=np.float64).reshape(-1, len(HISTORY_COLUMNS))

    def epoch_means(self, column: str = "l_cmf") -> np.ndarray:
        h = self.history_array()
        if not len(h):
            return np.empty(0)
        col = HISTORY_COLUMNS.index(column)
        epochs = h[:, 1].astype(int)
        return np.array([h[epochs == e, col].mean() for e in np.unique(epochs)])

    def save(self, path) -> Path:
        models = {f"encoder:{m}": e for m, e in self.encoders.items()}
        models.update({f"projector:{m}": p for m, p in self.projectors.items()})
        models["pseudo_head"] = self.head
        meta = {"kind": "pretrain", "objective": self.objective, "modalities": self.modalities}
        return save_archive(path, models, self.config, meta, {"history": self.history_array()})

    @classmethod
    def load(cls, path) -> "Checkpoint":
        models, config, meta, arrays = load_archive(path)
        if meta.get("kind") != "pretrain":
            raise ValueError(f"{path} is not a pretraining checkpoint")
        mods = meta["modalities"]
        hist = [tuple(r) for r in arrays.get("history", np.empty((0, 7))).tolist()]
        return cls({m: models[f"encoder:{m}"] for m in mods}, {m: models[f"projector:{m}"] for m in mods},
                   models["pseudo_head"], config, meta["objective"], hist)

    def write_history_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HISTORY_COLUMNS)
            for row in self.history:
                w.writerow([int(row[0]), int(row[1])] + [repr(float(v)) for v in row[2:]])
        return path

    def features(self, ds: PairedDataset, modality: str) -> np.ndarray:
        """Projector outputs for every window of one modality (inference mode)."""
        enc, proj = self.encoders[modality], self.projectors[modality]
        enc.eval(), proj.eval()
        with torch.no_grad():
            return proj(enc(_tensor(ds, modality))).double().numpy()

    def pseudo_class_entropy(self, ds: PairedDataset) -> float:
        """Entropy of pseudo-class usage over the whole dataset, all modalities pooled."""
        self.head.eval()
        with torch.no_grad():
            probs = [self.head(torch.from_numpy(self.features(ds, m)).float()) for m in self.modalities]
        return float(usage_entropy(*probs))


def pretrain(ds_train: PairedDataset, config: TrainConfig, objective: str = "mesen",
             seed: int | None = None) -> Checkpoint:
    """Jointly train per-modality encoders/projectors and the shared pseudo-head; labels are never read."""
    seed = config.seed if seed is None else seed
    mods = list(ds_train.modalities)
    if len(mods) < 2:
        raise TrainingError("pretraining needs at least two modalities")
    n = len(ds_train)
    if config.pretrain_batch > n:
        raise TrainingError(f"pretrain_batch {config.pretrain_batch} exceeds dataset size {n}")
    seeds = derive_seeds(seed, 2 * len(mods) + 2)
    encoders, projectors = {}, {}
    for i, m in enumerate(mods):
        c, t = ds_train.shape_of(m)
        encoders[m] = encoder_from_config(c, t, config, seeds[2 * i])
        projectors[m] = build_projector(config.hidden_dim, config.feature_dim, seeds[2 * i + 1])
    head = build_head(config.feature_dim, config.class_count, seeds[-2])
    rng = np.random.default_rng(seeds[-1])

    params = [p for m in mods for p in (*encoders[m].parameters(), *projectors[m].parameters())]
    params += list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    x = {m: _tensor(ds_train, m) for m in mods}
    ckpt = Checkpoint(encoders, projectors, head, config, objective)
    for module in (*encoders.values(), *projectors.values(), head):
        module.train()

    step = 0
    for epoch in range(config.epochs_pretrain):
        order = rng.permutation(n)
        for start in range(0, n, config.pretrain_batch):
            idx = torch.from_numpy(order[start:start + config.pretrain_batch])
            if idx.numel() < 2:
                continue
            z, y = {}, {}
            for m in mods:
                # losses run in float64: saturated pseudo-class columns underflow in float32
                h_hat = projectors[m](encoders[m](x[m][idx])).double()
                z[m] = m_norm(h_hat, config.norm_mode)
                y[m] = torch.softmax(head.logits(h_hat.float()).double(), dim=-1)
            out = pretrain_loss_multi(z, y, config, objective)
            if not np.isfinite(out.l_pt):
                raise TrainingError(f"non-finite loss at step {step}: {out}")
            opt.zero_grad()
            out.objective.backward()
            opt.step()
            ckpt.history.append((step, epoch) + out.row())
            step += 1
        if ckpt.history:
            log.debug("epoch %d: %s", epoch, ckpt.history[-1])
    for module in (*encoders.values(), *projectors.values(), head):
        module.eval()
    return ckpt


def ablation_intra_negatives(ds_train: PairedDataset, config: TrainConfig, seed: int | None = None) -> Checkpoint:
    """Pretraining whose contrastive denominators also contain same-modality negatives."""
    return pretrain(ds_train, config, objective="intra_negatives", seed=seed)


class UnimodalModel(nn.Module):
    """Encoder plus classifier head for one modality."""

    def __init__(self, modality_id: str, encoder: LayeredModel, head: ClassifierHead, config: TrainConfig):
        super().__init__()
        self.modality_id = modality_id
        self.encoder = encoder
        self.head = head
        self.config = config

    def forward(self, x):
        return self.head(self.encoder(x))

    def log_probs(self, x):
        return self.head.log_probs(self.encoder(x))

    @property
    def class_count(self) -> int:
        return self.head.spec["class_count"]

    def predict_proba(self, data: np.ndarray) -> np.ndarray:
        self.eval()
        with torch.no_grad():
            return self(torch.from_numpy(np.asarray(data)).float()).double().numpy()

    def save(self, path) -> Path:
        meta = {"kind": "unimodal", "modality": self.modality_id}
        return save_archive(path, {"encoder": self.encoder, "head": self.head}, self.config, meta)

    @classmethod
    def load(cls, path) -> "UnimodalModel":
        models, config, meta, _ = load_archive(path)
        if meta.get("kind") != "unimodal":
            raise ValueError(f"{path} is not a fine-tuned model archive")
        return cls(meta["modality"], models["encoder"], models["head"], config)


def _fit_classifier(encoder, modality_id, train, selection, config, seed, reference=None,
                    regularize=True) -> UnimodalModel:
    indices = selection.indices
    if not indices:
        raise TrainingError("few-shot selection is empty")
    labels = train.labels[indices]
    if (labels < 0).any():
        raise TrainingError("selection contains unlabeled windows")
    head_seed, shuffle_seed = derive_seeds(seed, 2)
    head = build_head(encoder.spec["hidden_dim"], train.class_count, head_seed)
    if not regularize:
        config = config.replace(lambda_fr=0.0)
    x = _tensor(train, modality_id, indices)
    y = torch.from_numpy(labels)
    rng = np.random.default_rng(shuffle_seed)
    batch = min(config.finetune_batch, len(indices))
    opt = torch.optim.Adam([*encoder.parameters(), *head.parameters()], lr=config.learning_rate)
    encoder.train(), head.train()
    for _ in range(config.epochs_finetune):
        order = torch.from_numpy(rng.permutation(len(indices)))
        for start in range(0, len(indices), batch):
            b = order[start:start + batch]
            loss = finetune_loss(head.log_probs(encoder(x[b])), y[b], encoder, head, config, reference)
            opt.zero_grad()
            loss.backward()
            opt.step()
    model = UnimodalModel(modality_id, encoder, head, config)
    model.eval()
    return model


def finetune(checkpoint: Checkpoint, modality_id: str, train: PairedDataset, selection: FewShotSelection,
             config: TrainConfig | None = None, seed: int | None = None) -> UnimodalModel:
    """Refine one pretrained encoder with a fresh head on the selected labeled windows only."""
    config = checkpoint.config if config is None else config
    seed = config.seed if seed is None else seed
    if modality_id not in checkpoint.encoders:
        raise TrainingError(f"modality {modality_id!r} not in checkpoint (has {checkpoint.modalities})")
    if len(selection) == 0:
        raise TrainingError("few-shot selection is empty")
    encoder = copy.deepcopy(checkpoint.encoders[modality_id])
    reference = None
    if config.reg_target == "checkpoint":
        reference = {lid: [p.detach().clone() for p in ps] for lid, ps in encoder.layers()}
    return _fit_classifier(encoder, modality_id, train, selection, config, seed, reference)


def baseline_encoder_seed(seed: int) -> int:
    return derive_seeds(seed, 3)[2]


def train_supervised_baseline(modality_id: str, train: PairedDataset, selection: FewShotSelection,
                              config: TrainConfig, seed: int | None = None) -> UnimodalModel:
    """Same encoder and head trained from random initialisation with plain cross-entropy."""
    seed = config.seed if seed is None else seed
    if modality_id not in train.modalities:
        raise TrainingError(f"modality {modality_id!r} not in dataset")
    if len(selection) == 0:
        raise TrainingError("few-shot selection is empty")
    c, t = train.shape_of(modality_id)
    encoder = encoder_from_config(c, t, config, baseline_encoder_seed(seed))
    return _fit_classifier(encoder, modality_id, train, selection, config, seed, regularize=False)
