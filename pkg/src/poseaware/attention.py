"""
Space-time attention over video token sequences, vanilla and pose-aware.

A token sequence is a tensor of shape ``(B, 1 + S*T, D)``: the class token at
index 0 followed by ``S*T`` patch tokens in frame-major order (``1 + t*S + s``).
Every ``*_attention`` function returns the attention sub-layer output (after
the output projection, before any residual) in that same layout.

Pose-aware variants take a binary pose map of shape ``(B, S*T)`` (or ``(S*T,)``)
and restrict attention to pose tokens with an additive mask: a pose query only
sees pose keys, a non-pose query gets an all-zero attention row and hence a
zero output.  The class token is an always-active query/key (``cls_mode="attend"``)
or is left out entirely (``cls_mode="bypass"``).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T_
from .errors import ConfigError, ShapeError
from .nn import FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor

VARIANTS = ("PA-SA", "Factorized PA-STA", "Joint PA-STA")
CLS_MODES = ("attend", "bypass")


class AttentionParams(Module):
    """QKV and output projections for one multi-head attention."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, init: str = "trunc_normal"):
        if dim % heads:
            raise ConfigError(f"width {dim} not divisible by {heads} heads", field="heads")
        self.qkv = Linear(dim, 3 * dim, rng, init=init)
        self.proj = Linear(dim, dim, rng, init=init)
        self.heads = heads


def multi_head_attention(x: Tensor, params: AttentionParams, mask: np.ndarray | None = None):
    """Scaled dot-product attention over axis -2 of ``x`` (shape ``(..., N, D)``).

    ``mask`` (broadcastable to ``(..., N, N)``; rows are queries) selects the
    admissible keys per query.  Returns ``(output, weights)`` with weights of
    shape ``(..., heads, N, N)``.
    """
    *lead, n, d = x.shape
    h = params.heads
    dh = d // h
    nl = len(lead)
    qkv = params.qkv(x).reshape(*lead, n, 3, h, dh)
    qkv = T_.transpose(qkv, (nl + 1, *range(nl), nl + 2, nl, nl + 3))
    q, k, v = qkv[0], qkv[1], qkv[2]
    logits = (q @ T_.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
    if mask is None:
        weights = T_.softmax_lastdim(logits)
    else:
        weights = T_.masked_softmax(logits, np.expand_dims(mask, -3))
    out = weights @ v
    out = params.proj(T_.transpose(out, (*range(nl), nl + 1, nl, nl + 2)).reshape(*lead, n, d))
    if mask is not None:
        # a query with no admissible key contributes nothing, bias included
        live = np.broadcast_to(np.asarray(mask, bool), (*lead, n, n)).any(axis=-1)
        if not live.all():
            out = out * live[..., None].astype(np.float64)
    return out, weights


def _check_tokens(x: Tensor, S: int, T: int) -> int:
    if x.ndim != 3 or x.shape[1] != 1 + S * T:
        raise ShapeError(f"expected tokens of shape (B, {1 + S * T}, D) for S={S}, T={T}, got {x.shape}")
    return x.shape[0]


def _pose_batch(pose, B: int, S: int, T: int) -> np.ndarray:
    p = np.asarray(pose).astype(bool)
    if p.ndim == 1:
        p = np.broadcast_to(p, (B, p.shape[0]))
    if p.shape != (B, S * T):
        raise ShapeError(f"pose map shape {np.shape(pose)} incompatible with B={B}, S*T={S * T}")
    return p


def _pair_mask(active: np.ndarray) -> np.ndarray:
    return active[..., :, None] & active[..., None, :]


def joint_attention(x: Tensor, params: AttentionParams, S: int, T: int, pose=None,
                    cls_mode: str = "attend", return_weights: bool = False):
    """Attention over all ``1 + S*T`` tokens; with ``pose``, over pose tokens only."""
    B = _check_tokens(x, S, T)
    mask = None
    if pose is not None or cls_mode != "attend":
        p = _pose_batch(pose, B, S, T) if pose is not None else np.ones((B, S * T), bool)
        active = np.concatenate([np.full((B, 1), cls_mode == "attend"), p], axis=1)
        mask = _pair_mask(active)
    out, w = multi_head_attention(x, params, mask)
    return (out, w) if return_weights else out


def temporal_attention(x: Tensor, params: AttentionParams, S: int, T: int,
                       return_weights: bool = False):
    """Each patch token attends over the tokens at its spatial position in every frame.

    The class token takes no part; its output row is zero.
    """
    B = _check_tokens(x, S, T)
    d = x.shape[2]
    patches = T_.transpose(x[:, 1:, :].reshape(B, T, S, d), (0, 2, 1, 3))
    out, w = multi_head_attention(patches, params)
    out = T_.transpose(out, (0, 2, 1, 3)).reshape(B, T * S, d)
    out = T_.concat([Tensor(np.zeros((B, 1, d))), out], axis=1)
    return (out, w) if return_weights else out


def spatial_attention(x: Tensor, params: AttentionParams, S: int, T: int, pose=None,
                      cls_mode: str = "attend", return_weights: bool = False):
    """Each patch token attends over tokens of its own frame plus the class token.

    The class token is replicated into every frame as query and key; its output
    is the mean of its per-frame outputs.  With ``pose``, keys and queries are
    restricted to the pose tokens of the frame.
    """
    B = _check_tokens(x, S, T)
    d = x.shape[2]
    cls = T_.broadcast_to(x[:, :1, :].reshape(B, 1, 1, d), (B, T, 1, d))
    frames = T_.concat([cls, x[:, 1:, :].reshape(B, T, S, d)], axis=2)
    mask = None
    if pose is not None or cls_mode != "attend":
        p = _pose_batch(pose, B, S, T) if pose is not None else np.ones((B, S * T), bool)
        active = np.concatenate([np.full((B, T, 1), cls_mode == "attend"), p.reshape(B, T, S)], axis=2)
        mask = _pair_mask(active)
    out, w = multi_head_attention(frames, params, mask)
    cls_out = out[:, :, 0, :].mean(axis=1, keepdims=True)
    out = T_.concat([cls_out, out[:, :, 1:, :].reshape(B, T * S, d)], axis=1)
    return (out, w) if return_weights else out


def pa_joint_attention(x: Tensor, params: AttentionParams, pose, S: int, T: int,
                       cls_mode: str = "attend", return_weights: bool = False):
    return joint_attention(x, params, S, T, pose=pose, cls_mode=cls_mode, return_weights=return_weights)


def pa_spatial_attention(x: Tensor, params: AttentionParams, pose, S: int, T: int,
                         cls_mode: str = "attend", return_weights: bool = False):
    return spatial_attention(x, params, S, T, pose=pose, cls_mode=cls_mode, return_weights=return_weights)


def divided_attention(x: Tensor, temporal: AttentionParams, spatial: AttentionParams, S: int, T: int):
    """Temporal attention (with its residual) followed by spatial attention."""
    return spatial_attention(x + temporal_attention(x, temporal, S, T), spatial, S, T)


class DividedBlock(Module):
    """Pre-norm divided space-time transformer layer."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator,
                 init: str = "trunc_normal"):
        self.norm_t = LayerNorm(dim)
        self.attn_t = AttentionParams(dim, heads, rng, init)
        self.norm_s = LayerNorm(dim)
        self.attn_s = AttentionParams(dim, heads, rng, init)
        self.norm_f = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio, rng, init)

    def __call__(self, x: Tensor, S: int, T: int, record: dict | None = None) -> Tensor:
        want = record is not None
        out_t = temporal_attention(self.norm_t(x), self.attn_t, S, T, return_weights=want)
        out_s = None
        if want:
            out_t, w_t = out_t
        x = x + out_t
        out_s = spatial_attention(self.norm_s(x), self.attn_s, S, T, return_weights=want)
        if want:
            out_s, w_s = out_s
        x = x + out_s
        pre = x
        x = x + self.ffn(self.norm_f(x))
        if want:
            record.update(attention={"temporal": w_t.data, "spatial": w_s.data},
                          pre_ffn=pre.data, post_ffn=x.data)
        return x


class PoseAwareBlock(Module):
    """Pose-aware attention block (PAAB).

    ``variant`` selects the attention: ``"PA-SA"`` (pose-aware spatial),
    ``"Joint PA-STA"`` (pose-aware joint space-time) or ``"Factorized PA-STA"``
    (vanilla temporal attention, then pose-aware spatial, each with its own
    residual).  The FFN sub-layer acts on every token.  Calling with
    ``pose=None`` runs the same weights as an ordinary (unmasked) block.
    """

    def __init__(self, dim: int, heads: int, mlp_ratio: int, variant: str,
                 rng: np.random.Generator, cls_mode: str = "attend", init: str = "trunc_normal"):
        if variant not in VARIANTS:
            raise ConfigError(f"unknown PAAB variant {variant!r}; expected one of {VARIANTS}", field="variant")
        if cls_mode not in CLS_MODES:
            raise ConfigError(f"unknown cls_mode {cls_mode!r}", field="cls_mode")
        self.variant = variant
        self.cls_mode = cls_mode
        if variant == "Factorized PA-STA":
            self.norm_t = LayerNorm(dim)
            self.attn_t = AttentionParams(dim, heads, rng, init)
        self.norm = LayerNorm(dim)
        self.attn = AttentionParams(dim, heads, rng, init)
        self.norm_f = LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * mlp_ratio, rng, init)

    def __call__(self, x: Tensor, pose, S: int, T: int, record: dict | None = None) -> Tensor:
        want = record is not None
        weights = {}
        if self.variant == "Factorized PA-STA":
            out = temporal_attention(self.norm_t(x), self.attn_t, S, T, return_weights=want)
            if want:
                out, weights["temporal"] = out
            x = x + out
        cls_mode = self.cls_mode if pose is not None else "attend"
        fn = joint_attention if self.variant == "Joint PA-STA" else spatial_attention
        out = fn(self.norm(x), self.attn, S, T, pose=pose, cls_mode=cls_mode, return_weights=want)
        if want:
            out, w = out
            weights["joint" if self.variant == "Joint PA-STA" else "spatial"] = w
        x = x + out
        pre = x
        x = x + self.ffn(self.norm_f(x))
        if want:
            record.update(attention={k: v.data for k, v in weights.items()},
                          pre_ffn=pre.data, post_ffn=x.data)
        return x


def paab_forward(x: Tensor, pose, block: PoseAwareBlock, S: int, T: int, record: dict | None = None) -> Tensor:
    return block(x, pose, S, T, record=record)
