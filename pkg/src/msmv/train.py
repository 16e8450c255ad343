"""Training: label-smoothed binary cross-entropy, decoupled-weight-decay Adam, and the epoch loop.

The loop shuffles deterministically from the config seed, updates only
unfrozen parameters, validates after every epoch, and returns the model
state with the best validation AUC.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import BreastExam
from .errors import BadEpsilon, EmptyDataset, ShapeMismatch
from .fusion import MsmvModel
from .metrics import auc_or_none

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    label_smoothing: float = 0.1
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.label_smoothing < 0.5:
            raise BadEpsilon(f"label_smoothing must be in [0, 0.5), got {self.label_smoothing}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")


def smoothed_bce(logits: torch.Tensor, targets: torch.Tensor, smoothing: float) -> torch.Tensor:
    """Elementwise label-smoothed binary cross-entropy on raw logits.

    The target y is softened to y' = y(1 - eps) + eps/2 and the loss
    -[y' log sigmoid(x) + (1 - y') log(1 - sigmoid(x))] is evaluated in
    the stable softplus form, finite for every finite logit.
    """
    if not 0.0 <= smoothing < 0.5:
        raise BadEpsilon(f"smoothing must be in [0, 0.5), got {smoothing}")
    y = targets.to(logits.dtype) * (1.0 - smoothing) + smoothing / 2.0
    return y * torch.nn.functional.softplus(-logits) + (1.0 - y) * torch.nn.functional.softplus(logits)


@dataclass
class OptimizerState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: OptimizerState,
    cfg: TrainConfig,
) -> OptimizerState:
    """One decoupled-weight-decay Adam update, in place on `params`.

    p <- p - lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * p,
    with both terms taken from the pre-update p.
    """
    b1, b2 = cfg.betas
    state.t += 1
    t = state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeMismatch(f"grad shape {tuple(g.shape)} != param {tuple(p.shape)} for {name}")
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m, v = state.m[name], state.v[name]
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p.add_(-cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * p))
    return state


def split_train_val(
    exams: list[BreastExam], val_fraction: float, seed: int
) -> tuple[list[BreastExam], list[BreastExam]]:
    """Stratified train/val split, disjoint at the breast level.

    Breasts (not samples) are assigned, so augmented variants of one
    breast never straddle the split; within each label the assignment is
    a seeded shuffle taking ~val_fraction breasts for validation.
    """
    by_breast: dict[str, list[BreastExam]] = {}
    for e in exams:
        by_breast.setdefault(e.breast_id, []).append(e)
    rng = np.random.default_rng(seed)
    val_ids: set[str] = set()
    for label in (0, 1):
        ids = sorted(b for b, group in by_breast.items() if group[0].label == label)
        if len(ids) < 2:
            continue
        rng.shuffle(ids)
        n_val = max(1, int(round(val_fraction * len(ids))))
        val_ids.update(ids[:n_val])
    train = [e for e in exams if e.breast_id not in val_ids]
    val = [e for e in exams if e.breast_id in val_ids]
    return train, val


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float | None
    val_acc: float


@dataclass
class TrainResult:
    model: MsmvModel
    history: list[EpochLog]
    best_epoch: int


def _batched_logits(model: MsmvModel, exams: list[BreastExam], batch_size: int) -> torch.Tensor:
    outs = []
    with torch.no_grad():
        for i in range(0, len(exams), batch_size):
            outs.append(model.forward_exams(exams[i : i + batch_size], training=False))
    return torch.cat(outs)


def train(
    model: MsmvModel,
    train_exams: list[BreastExam],
    val_exams: list[BreastExam],
    cfg: TrainConfig,
) -> TrainResult:
    """Run the optimization loop; returns the model at the best validation AUC.

    Precondition: train and val pools are breast-disjoint (checked). Only
    parameters with requires_grad participate in updates; frozen
    parameters are untouched by construction.
    """
    if not train_exams:
        raise EmptyDataset("no training exams")
    overlap = {e.breast_id for e in train_exams} & {e.breast_id for e in val_exams}
    if overlap:
        raise ValueError(f"train/val share breasts: {sorted(overlap)[:5]}")

    rng = np.random.default_rng(cfg.seed)
    dropout_gen = torch.Generator().manual_seed(cfg.seed)
    params = model.trainable_parameters()
    state = OptimizerState()
    history: list[EpochLog] = []
    best: tuple[float, int] = (-math.inf, -1)
    best_state: dict[str, torch.Tensor] | None = None

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_exams))
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_exams[i] for i in order[start : start + cfg.batch_size]]
            targets = torch.tensor([e.label for e in batch], dtype=model.dtype)
            logits = model.forward_exams(batch, training=True, generator=dropout_gen)
            loss = smoothed_bce(logits, targets, cfg.label_smoothing).mean()
            for p in params.values():
                p.grad = None
            loss.backward()
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            adamw_step(params, grads, state, cfg)
            total += float(loss.detach()) * len(batch)
            seen += len(batch)
        train_loss = total / max(seen, 1)

        val_loss, val_auc, val_acc = evaluate_pool(model, val_exams, cfg)
        history.append(EpochLog(epoch, train_loss, val_loss, val_auc, val_acc))
        logger.info(
            "epoch %d train_loss=%.4f val_loss=%.4f val_auc=%s val_acc=%.4f",
            epoch, train_loss, val_loss, f"{val_auc:.4f}" if val_auc is not None else "n/a", val_acc,
        )
        score = val_auc if val_auc is not None else val_acc
        if score > best[0]:
            best = (score, epoch)
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(model=model, history=history, best_epoch=best[1])


def evaluate_pool(
    model: MsmvModel, exams: list[BreastExam], cfg: TrainConfig
) -> tuple[float, float | None, float]:
    """Inference-mode (loss, AUC-or-None, accuracy) over a pool of exams."""
    if not exams:
        return math.nan, None, math.nan
    logits = _batched_logits(model, exams, cfg.batch_size)
    targets = torch.tensor([e.label for e in exams], dtype=model.dtype)
    loss = float(smoothed_bce(logits, targets, cfg.label_smoothing).mean())
    scores = torch.sigmoid(logits).numpy().astype(np.float64)
    labels = np.array([e.label for e in exams])
    acc = float(np.mean((scores >= 0.5) == (labels == 1)))
    return loss, auc_or_none(labels, scores), acc
