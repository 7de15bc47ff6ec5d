"""Encoders, projectors and classifier heads with per-layer parameter grouping."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import TrainConfig

CHECKPOINT_FORMAT = "mesen-archive-v1"


class LayeredModel(nn.Module):
    """A model whose top-level children are its layer blocks, applied in order.

    ``spec`` records how the model was built so an archive can rebuild it.
    """

    def __init__(self, blocks: dict, spec: dict):
        super().__init__()
        self.blocks = nn.ModuleDict(blocks)
        self.spec = spec

    def forward(self, x):
        for block in self.blocks.values():
            x = block(x)
        return x

    def layers(self) -> list:
        """(layer_id, [parameters]) for every block that owns parameters, in forward order."""
        out = []
        for name, block in self.blocks.items():
            params = list(block.parameters())
            if params:
                out.append((name, params))
        return out

    @property
    def layer_ids(self) -> list:
        return [name for name, _ in self.layers()]


class _MeanOverTime(nn.Module):
    def forward(self, x):
        return x.mean(dim=1)


class _ToSequence(nn.Module):
    def forward(self, x):
        # (batch, channels, time) -> (batch, time, channels)
        return x.transpose(1, 2)


class ClassifierHead(LayeredModel):
    """Single linear layer followed by softmax; ``forward`` returns probabilities."""

    def logits(self, x):
        return self.blocks["linear"](x)

    def log_probs(self, x):
        return F.log_softmax(self.logits(x), dim=-1)

    def forward(self, x):
        return F.softmax(self.logits(x), dim=-1)


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return build()


def build_encoder(channels: int, timesteps: int, hidden_dim: int = 64, conv_channels: int = 32,
                  kernel_size: int = 5, attention_heads: int = 4, seed: int = 0) -> LayeredModel:
    """Two temporal convolutions and one self-attention block, mean-pooled to (batch, hidden_dim)."""
    if channels < 1 or timesteps < 1:
        raise ValueError(f"invalid modality shape ({channels}, {timesteps})")
    if timesteps < kernel_size:
        raise ValueError(f"timesteps {timesteps} shorter than convolution kernel {kernel_size}")
    if hidden_dim % attention_heads:
        raise ValueError("hidden_dim must be divisible by attention_heads")
    spec = dict(kind="encoder", channels=channels, timesteps=timesteps, hidden_dim=hidden_dim,
                conv_channels=conv_channels, kernel_size=kernel_size, attention_heads=attention_heads)
    pad = kernel_size // 2

    def build():
        return LayeredModel({
            "conv1": nn.Sequential(nn.Conv1d(channels, conv_channels, kernel_size, padding=pad), nn.ReLU()),
            "conv2": nn.Sequential(nn.Conv1d(conv_channels, hidden_dim, kernel_size, padding=pad, stride=2),
                                   nn.ReLU()),
            "to_seq": _ToSequence(),
            "attention": nn.TransformerEncoderLayer(hidden_dim, attention_heads, dim_feedforward=2 * hidden_dim,
                                                    dropout=0.0, batch_first=True),
            "pool": _MeanOverTime(),
        }, spec)

    return _seeded(seed, build)


def build_projector(in_dim: int, feature_dim: int, seed: int = 0) -> LayeredModel:
    """Two pointwise layers with a ReLU between them (kernel-1 convolutions on the pooled feature)."""
    if feature_dim < 2:
        raise ValueError(f"feature_dim must be >= 2, got {feature_dim}")
    spec = dict(kind="projector", in_dim=in_dim, feature_dim=feature_dim)
    return _seeded(seed, lambda: LayeredModel({
        "fc1": nn.Sequential(nn.Linear(in_dim, in_dim), nn.ReLU()),
        "fc2": nn.Linear(in_dim, feature_dim),
    }, spec))


def build_head(in_dim: int, class_count: int, seed: int = 0) -> ClassifierHead:
    if class_count < 2:
        raise ValueError(f"class_count must be >= 2, got {class_count}")
    spec = dict(kind="head", in_dim=in_dim, class_count=class_count)
    return _seeded(seed, lambda: ClassifierHead({"linear": nn.Linear(in_dim, class_count)}, spec))


def encoder_from_config(channels: int, timesteps: int, config: TrainConfig, seed: int) -> LayeredModel:
    return build_encoder(channels, timesteps, config.hidden_dim, config.conv_channels, config.kernel_size,
                         config.attention_heads, seed)


def rebuild(spec: dict) -> LayeredModel:
    kwargs = {k: v for k, v in spec.items() if k != "kind"}
    builder = {"encoder": build_encoder, "projector": build_projector, "head": build_head}[spec["kind"]]
    return builder(**kwargs)


def m_norm(features: torch.Tensor, mode: str = "l2", eps: float = 1e-12) -> torch.Tensor:
    """Map features onto the unit sphere row by row.

    mode="batch" first standardises every coordinate over the batch, then
    L2-normalises rows.
    """
    if mode == "batch":
        mu = features.mean(dim=0, keepdim=True)
        sd = features.std(dim=0, unbiased=False, keepdim=True).clamp_min(1e-6)
        features = (features - mu) / sd
    elif mode != "l2":
        raise ValueError(f"unknown normalisation mode {mode!r}")
    norms = features.norm(dim=1, keepdim=True)
    if bool((norms < eps).any()):
        bad = torch.nonzero(norms.squeeze(1) < eps).flatten().tolist()
        raise ValueError(f"degenerate feature rows {bad} (norm < {eps})")
    return features / norms


# ---------------------------------------------------------------- archive

def _to_str_array(obj) -> np.ndarray:
    return np.array(json.dumps(obj))


def save_archive(path, models: dict, config: TrainConfig, meta: dict | None = None,
                 arrays: dict | None = None) -> Path:
    """Write models (name -> LayeredModel) as layer_id-keyed flat arrays; atomic replace."""
    path = Path(path)
    payload = {
        "__format__": np.array(CHECKPOINT_FORMAT),
        "__config__": np.array(config.to_text()),
        "__meta__": _to_str_array(meta or {}),
        "__specs__": _to_str_array({name: m.spec for name, m in models.items()}),
    }
    for name, model in models.items():
        for layer_id, block in model.blocks.items():
            for pname, p in block.named_parameters():
                payload[f"{name}/{layer_id}/{pname}"] = p.detach().cpu().numpy()
    for k, v in (arrays or {}).items():
        payload[f"__array__/{k}"] = np.asarray(v)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_archive(path):
    """Returns (models, config, meta, arrays) from an archive written by save_archive."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot read archive {path}: {e}") from None
    fmt = str(data.get("__format__", ""))
    if fmt != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unsupported archive format {fmt!r}")
    config = TrainConfig.from_text(str(data["__config__"]))
    meta = json.loads(str(data["__meta__"]))
    specs = json.loads(str(data["__specs__"]))
    models = {}
    for name, spec in specs.items():
        model = rebuild(spec)
        with torch.no_grad():
            for layer_id, block in model.blocks.items():
                for pname, p in block.named_parameters():
                    key = f"{name}/{layer_id}/{pname}"
                    arr = data[key]
                    if tuple(arr.shape) != tuple(p.shape):
                        raise ValueError(f"{path}: {key} has shape {arr.shape}, expected {tuple(p.shape)}")
                    p.copy_(torch.from_numpy(arr).to(p.dtype))
        models[name] = model
    arrays = {k[len("__array__/"):]: v for k, v in data.items() if k.startswith("__array__/")}
    return models, config, meta, arrays
