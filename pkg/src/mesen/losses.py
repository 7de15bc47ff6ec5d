"""Training objectives: cross-modal feature contrast, pseudo-class aligning, balancing and fine-tuning.

All functions are pure and differentiable with torch autograd. Features fed
to the contrastive terms must already lie on the unit sphere (see m_norm).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .core import TrainConfig

BALANCE_EPS = 1e-8
OBJECTIVES = ("mesen", "intra_negatives", "cmf_only", "mpc_only")


@dataclass
class LossBreakdown:
    l_cmf: float
    l_mpc: float
    l_pr: float
    delta: float
    l_pt: float
    per_direction: dict = field(default_factory=dict)
    # differentiable total, the value recorded in l_pt
    objective: torch.Tensor | None = field(default=None, repr=False, compare=False)

    def row(self) -> tuple:
        return self.l_cmf, self.l_mpc, self.l_pr, self.delta, self.l_pt


def contrast_logits(anchor, positives, tau, include_intra=False):
    """Logits and candidate mask for InfoNCE terms whose positive for row i is column i.

    Candidates are all rows of ``positives``; with ``include_intra`` the other
    rows of ``anchor`` are appended as extra negatives (the anchor itself is
    masked out). Every masked-in entry is one term of the denominator.
    """
    logits = anchor @ positives.T / tau
    mask = torch.ones_like(logits, dtype=torch.bool)
    if include_intra:
        n = anchor.shape[0]
        logits = torch.cat([logits, anchor @ anchor.T / tau], dim=1)
        mask = torch.cat([mask, ~torch.eye(n, dtype=torch.bool, device=anchor.device)], dim=1)
    return logits, mask


def _infonce_rows(logits, mask):
    # logsumexp subtracts the row max internally
    masked = logits.masked_fill(~mask, float("-inf"))
    return torch.logsumexp(masked, dim=1) - logits.diagonal()


def _check_sphere(z, name):
    dev = (z.norm(dim=1) - 1).abs().max().item()
    if dev > 1e-3:
        raise ValueError(f"{name} rows are not unit-normalised (max norm deviation {dev:.3g})")


def cross_modal_loss(za, zb, tau, alpha=0.5, beta=0.5, include_intra=False):
    """alpha * mean(L a->b) + beta * mean(L b->a); returns (value, {"a->b": .., "b->a": ..}).

    Only the other modality's unpaired samples act as negatives unless
    ``include_intra`` (the naive variant kept for ablations).
    """
    if za.shape != zb.shape or za.ndim != 2:
        raise ValueError(f"feature batches must share shape (N, d), got {tuple(za.shape)} and {tuple(zb.shape)}")
    if za.shape[0] < 2:
        raise ValueError("contrastive loss needs N >= 2 (no negatives otherwise)")
    _check_sphere(za, "za")
    _check_sphere(zb, "zb")
    a2b = _infonce_rows(*contrast_logits(za, zb, tau, include_intra)).mean()
    b2a = _infonce_rows(*contrast_logits(zb, za, tau, include_intra)).mean()
    return alpha * a2b + beta * b2a, {"a->b": a2b, "b->a": b2a}


def class_usage(*probs):
    """Fraction of batch probability mass per pseudo-class, averaged over modalities."""
    return torch.stack([p.mean(dim=0) for p in probs]).mean(dim=0)


def usage_entropy(*probs):
    p = class_usage(*probs)
    return -torch.special.xlogy(p, p).sum()


def pseudo_align_loss(ya, yb, tau_hat, lambda_pr, normalize_columns=True):
    """Column-wise (pseudo-class) contrast between two probability matrices plus entropy term.

    Returns (value, l_pr). For pseudo-class i of one modality the positive is
    column i of the other; negatives are the remaining 2*N_cls - 2 columns of
    both modalities.
    """
    if ya.shape != yb.shape or ya.ndim != 2:
        raise ValueError(f"probability matrices must share shape (N, N_cls), got {tuple(ya.shape)}, {tuple(yb.shape)}")
    if ya.shape[1] < 2:
        raise ValueError("need at least two pseudo-classes")
    qa, qb = ya.T, yb.T
    if normalize_columns:
        for name, q in (("ya", qa), ("yb", qb)):
            empty = torch.nonzero(q.norm(dim=1) < 1e-12).flatten().tolist()
            if empty:
                raise ValueError(f"{name}: pseudo-class columns {empty} carry no probability mass")
        qa = qa / qa.norm(dim=1, keepdim=True)
        qb = qb / qb.norm(dim=1, keepdim=True)
    la = _infonce_rows(*contrast_logits(qa, qb, tau_hat, include_intra=True))
    lb = _infonce_rows(*contrast_logits(qb, qa, tau_hat, include_intra=True))
    l_pr = usage_entropy(ya, yb)
    align = (la.sum() + lb.sum()) / (2 * ya.shape[1])
    return align + lambda_pr * l_pr, l_pr


def _scalar(v) -> float:
    return v.detach().item() if isinstance(v, torch.Tensor) else float(v)


def balance_weight(l_cmf: float, l_mpc: float, eps: float = BALANCE_EPS) -> float:
    """delta = |L_CMF| / max(|L_MPC|, eps); a plain float, so no gradient flows through it."""
    return abs(_scalar(l_cmf)) / max(abs(_scalar(l_mpc)), eps)


def combine(l_cmf, l_mpc, l_pr, objective="mesen", per_direction=None, lambda_pr=None) -> LossBreakdown:
    """Assemble the pretraining objective from its (tensor) components.

    With ``lambda_pr`` given, delta balances L_CMF against the aligning part
    of L_MPC (L_MPC - lambda_pr * L_PR), which stays positive; otherwise
    against L_MPC itself, which can cross zero and make delta explode.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    reference = l_mpc if lambda_pr is None else l_mpc - lambda_pr * l_pr
    delta = balance_weight(l_cmf, reference)
    if objective == "cmf_only":
        total, delta = l_cmf, 0.0
    elif objective == "mpc_only":
        total, delta = l_mpc, 0.0
    else:
        total = l_cmf + delta * l_mpc
    return LossBreakdown(_scalar(l_cmf), _scalar(l_mpc), _scalar(l_pr), delta, _scalar(total),
                         {k: _scalar(v) for k, v in (per_direction or {}).items()}, total)


def pretrain_loss_multi(z: dict, y: dict, config: TrainConfig, objective="mesen") -> LossBreakdown:
    """Pretraining loss over any number of modalities: pairwise terms averaged over unordered pairs."""
    names = list(z)
    if len(names) < 2:
        raise ValueError("pretraining needs at least two modalities")
    pairs = list(itertools.combinations(names, 2))
    cmf, mpc, pr, per_dir = 0.0, 0.0, 0.0, {}
    lam_pr = config.lambda_pr if config.entropy_regularization else 0.0
    for a, b in pairs:
        c, d = cross_modal_loss(z[a], z[b], config.tau, config.alpha, config.beta,
                                include_intra=objective == "intra_negatives")
        m, r = pseudo_align_loss(y[a], y[b], config.tau_hat, lam_pr, config.normalize_columns)
        cmf, mpc, pr = cmf + c, mpc + m, pr + r
        if len(pairs) == 1:
            per_dir = d
        else:
            per_dir[f"{a}->{b}"] = d["a->b"]
            per_dir[f"{b}->{a}"] = d["b->a"]
    k = len(pairs)
    lam = lam_pr if config.balance == "aligning" else None
    return combine(cmf / k, mpc / k, pr / k, objective, per_dir, lam)


def pretrain_loss(za, zb, ya, yb, config: TrainConfig, objective="mesen") -> LossBreakdown:
    return pretrain_loss_multi({"a": za, "b": zb}, {"a": ya, "b": yb}, config, objective)


def finetune_reg(encoder, head, gamma, reference: dict | None = None):
    """sum_i gamma_i * ||theta_e,i||^2 + ||theta_c||^2 over encoder layer blocks.

    With ``reference`` (layer_id -> list of tensors) encoder blocks are
    measured as distance to those values instead of to zero.
    """
    layers = encoder.layers()
    if len(gamma) != len(layers):
        raise ValueError(f"gamma has {len(gamma)} entries, encoder has {len(layers)} layers")
    total = 0.0
    for g, (layer_id, params) in zip(gamma, layers):
        ref = reference[layer_id] if reference is not None else None
        sq = sum(((p - r) if ref is not None else p).pow(2).sum()
                 for p, r in zip(params, ref if ref is not None else params))
        total = total + g * sq
    return total + sum(p.pow(2).sum() for p in head.parameters())


def finetune_loss(log_probs, labels, encoder, head, config: TrainConfig, reference: dict | None = None):
    """Cross-entropy on log-probabilities plus lambda_FR times the layer-aware penalty."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    n_cls = log_probs.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels must lie in [0, {n_cls}), got {labels.tolist()}")
    cls = F.nll_loss(log_probs, labels)
    if config.lambda_fr == 0:
        return cls
    return cls + config.lambda_fr * finetune_reg(encoder, head, config.gamma, reference)
