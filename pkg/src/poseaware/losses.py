"""Training objectives: classification, auxiliary pose-map BCE, their sum, and a time-contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T_
from .errors import ConfigError, ShapeError
from .tensor import Tensor

BCE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossReport:
    primary: float
    paat: float
    total: float
    lam: float


def classify_loss(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; ``logits`` is ``(B, C)``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != len(labels):
        raise ShapeError(f"logits {logits.shape} vs {len(labels)} labels")
    logp = T_.log_softmax(logits)
    picked = logp[np.arange(len(labels)), labels]
    return -picked.mean()


def bce(pred: Tensor, target, clamp: float = BCE_CLAMP) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to ``[clamp, 1 - clamp]``."""
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    p = T_.clip(pred, clamp, 1.0 - clamp)
    ll = target * T_.log(p) + (1.0 - target) * T_.log(1.0 - p)
    return -ll.mean()


def paat_loss(pred: Tensor, target) -> Tensor:
    """BCE between predicted and true pose maps, averaged over every patch/keypoint entry."""
    return bce(pred, target)


def total_loss(primary: Tensor, paat: Tensor | None, lam: float) -> tuple[Tensor, LossReport]:
    if lam < 0:
        raise ConfigError(f"loss scale must be >= 0, got {lam}", field="lam")
    if paat is None:
        return primary, LossReport(primary.item(), 0.0, primary.item(), lam)
    total = paat * lam + primary
    return total, LossReport(primary.item(), paat.item(), total.item(), lam)


def tcn_triplet_mask(T: int, window: int) -> np.ndarray:
    """``[t, t']`` is True when ``t'`` is a valid negative for anchor ``t``."""
    idx = np.arange(T)
    return np.abs(idx[:, None] - idx[None, :]) > window


def tcn_loss(emb_a: Tensor, emb_b: Tensor, margin: float = 0.2, window: int = 1,
             rng: np.random.Generator | None = None) -> Tensor:
    """Time-contrastive triplet hinge between two synchronised views.

    Anchor: view A at ``t``; positive: view B at ``t``; negative: view A at a
    ``t'`` with ``|t - t'| > window``.  Loss per triplet is
    ``max(0, |a-p|^2 - |a-n|^2 + margin)``.  Without ``rng`` every valid
    negative is used (the expectation over uniform sampling); with ``rng``
    one negative per anchor is drawn uniformly.

    Embeddings are ``(T, D)`` or batched ``(B, T, D)``.
    """
    if emb_a.shape != emb_b.shape:
        raise ShapeError(f"view embeddings differ in shape: {emb_a.shape} vs {emb_b.shape}")
    if emb_a.ndim == 2:
        emb_a = emb_a.reshape(1, *emb_a.shape)
        emb_b = emb_b.reshape(1, *emb_b.shape)
    B, T, D = emb_a.shape
    valid = tcn_triplet_mask(T, window)
    if not valid.any():
        raise ConfigError(f"sequence length {T} admits no negative outside window {window}", field="window")
    d_pos = T_.square(emb_a - emb_b).sum(axis=-1)  # (B, T)
    diff = emb_a.reshape(B, T, 1, D) - emb_a.reshape(B, 1, T, D)
    d_neg = T_.square(diff).sum(axis=-1)  # (B, T, T)
    if rng is not None:
        choice = np.zeros((B, T, T), dtype=bool)
        for b in range(B):
            for t in range(T):
                cands = np.flatnonzero(valid[t])
                if len(cands):
                    choice[b, t, rng.choice(cands)] = True
        weight = choice
    else:
        weight = np.broadcast_to(valid, (B, T, T))
    hinge = T_.relu(d_pos.reshape(B, T, 1) - d_neg + margin)
    return (hinge * weight.astype(np.float64)).sum() / float(weight.sum())
