"""
Divided space-time video transformer with pluggable pose-aware blocks and heads.

Layer ``l`` (1-based) is the ``l``-th divided-attention block.  A PAAB placed
"after layer ``l``" consumes that layer's output; a PAAT head placed "at
layer ``l``" reads ``z_{l-1}``, the tokens entering layer ``l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T_
from .attention import DividedBlock, PoseAwareBlock
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module, trunc_normal
from .tensor import Tensor, parameter

MODES = ("classify", "embed-frames")


def patchify_video(video: np.ndarray, patch: int) -> np.ndarray:
    """``(B, tau, H, W, C)`` pixels to ``(B, tau*S, patch*patch*C)`` frame-major patch rows."""
    video = np.asarray(video, dtype=np.float64)
    if video.ndim == 4:
        video = video[None]
    B, tau, H, W, C = video.shape
    if H % patch or W % patch:
        raise ShapeError(f"patch {patch} does not divide frame {H}x{W}")
    gh, gw = H // patch, W // patch
    x = video.reshape(B, tau, gh, patch, gw, patch, C).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, tau * gh * gw, patch * patch * C)


class PaatHead(Module):
    """Two stacked linear maps and a sigmoid: patch token -> per-keypoint presence."""

    def __init__(self, dim: int, bottleneck: int, outputs: int, rng: np.random.Generator,
                 init: str = "trunc_normal"):
        if bottleneck > dim:
            raise ConfigError(f"bottleneck {bottleneck} exceeds width {dim}", field="bottleneck")
        self.fc1 = Linear(dim, bottleneck, rng, init=init)
        self.fc2 = Linear(bottleneck, outputs, rng, init=init)

    def __call__(self, z: Tensor) -> Tensor:
        return T_.sigmoid(self.fc2(self.fc1(z)))


def paat_predict(z: Tensor, head: PaatHead) -> Tensor:
    """Predicted pose map ``(B, S*T, K)`` from tokens ``(B, 1+S*T, D)``; the class token is dropped."""
    if z.ndim != 3:
        raise ShapeError(f"expected (B, N, D) tokens, got {z.shape}")
    if z.shape[2] != head.fc1.weight.shape[0]:
        raise ShapeError(f"token width {z.shape[2]} != head input {head.fc1.weight.shape[0]}")
    return head(z[:, 1:, :])


@dataclass
class ForwardOutput:
    output: Tensor
    paat: dict[int, Tensor] = field(default_factory=dict)
    records: list[dict] = field(default_factory=list)
    cls_feature: Tensor | None = None  # normalised class token


class PoseAwareViT(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        # independent streams so optional modules never shift backbone initialisation
        rng = np.random.default_rng([cfg.seed, 0])
        d = cfg.dim
        self.patch_embed = Linear(cfg.patch * cfg.patch * cfg.channels, d, rng, init=cfg.init)
        self.cls_token = parameter(trunc_normal(rng, (1, 1, d)))
        self.pos_spatial = parameter(trunc_normal(rng, (cfg.S, d)))
        self.pos_temporal = parameter(trunc_normal(rng, (cfg.T, d)))
        self.blocks = [DividedBlock(d, cfg.heads, cfg.mlp_ratio, rng, cfg.init) for _ in range(cfg.depth)]
        self.norm = LayerNorm(d)
        self.head = Linear(d, cfg.classes, rng, init=cfg.init)

        self.paab_blocks: list[PoseAwareBlock] = []
        self._paab_at: dict[int, list[int]] = {}
        if cfg.paab is not None:
            prng = np.random.default_rng([cfg.seed, 1])
            for layer in cfg.paab.layers:
                for _ in range(cfg.paab.count):
                    self._paab_at.setdefault(layer, []).append(len(self.paab_blocks))
                    self.paab_blocks.append(PoseAwareBlock(d, cfg.heads, cfg.mlp_ratio, cfg.paab.variant,
                                                           prng, cls_mode=cfg.paab.cls_mode,
                                                           init=cfg.init))

        self.paat_heads: list[PaatHead] = []
        self._paat_at: dict[int, int] = {}
        if cfg.paat is not None:
            arng = np.random.default_rng([cfg.seed, 2])
            for layer in cfg.paat.layers:
                self._paat_at[layer] = len(self.paat_heads)
                self.paat_heads.append(PaatHead(d, cfg.paat.bottleneck, cfg.paat_outputs, arng, cfg.init))

    def backbone_parameters(self) -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.named_parameters()
                if not k.startswith(("paab_blocks.", "paat_heads."))]

    def embed(self, video) -> Tensor:
        """Patch projection plus spatial and temporal position embeddings, class token prepended."""
        cfg = self.cfg
        video = np.asarray(video, dtype=np.float64)
        if video.ndim == 4:
            video = video[None]
        if video.shape[1:] != (cfg.tau, cfg.height, cfg.width, cfg.channels):
            raise ShapeError(f"video shape {video.shape[1:]} does not match config "
                             f"{(cfg.tau, cfg.height, cfg.width, cfg.channels)}")
        B = video.shape[0]
        if cfg.pixel_norm is not None:
            video = (video - cfg.pixel_norm[0]) / cfg.pixel_norm[1]
        x = self.patch_embed(Tensor(patchify_video(video, cfg.patch)))
        pos = (self.pos_temporal.reshape(cfg.T, 1, cfg.dim) + self.pos_spatial.reshape(1, cfg.S, cfg.dim))
        x = x + pos.reshape(cfg.T * cfg.S, cfg.dim)
        cls = T_.broadcast_to(self.cls_token, (B, 1, cfg.dim))
        return T_.concat([cls, x], axis=1)

    def forward(self, video, pose2d=None, mode: str = "classify", with_paat: bool = False,
                capture: bool = False) -> ForwardOutput:
        """Run the network.

        ``pose2d`` (``(B, S*T)`` binary) is required when PAAB blocks exist.
        ``with_paat`` evaluates the auxiliary heads on their input tokens (train
        time only; the main output never depends on them).  ``capture`` keeps
        per-block token, attention and FFN snapshots in ``records``.
        """
        cfg = self.cfg
        if mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {mode!r}", field="mode")
        if self.paab_blocks and pose2d is None:
            raise ConfigError("PAAB is enabled but no pose map / keypoints were supplied", field="pose2d")
        S, T = cfg.S, cfg.T
        x = self.embed(video)
        out = ForwardOutput(output=None)
        for layer, block in enumerate(self.blocks, start=1):
            if with_paat and layer in self._paat_at:
                out.paat[layer] = paat_predict(x, self.paat_heads[self._paat_at[layer]])
            rec = {"name": f"layer{layer}", "layer": layer, "kind": "divided"} if capture else None
            x = block(x, S, T, record=rec)
            if capture:
                rec["tokens"] = x.data
                out.records.append(rec)
            for j, idx in enumerate(self._paab_at.get(layer, [])):
                rec = {"name": f"paab{layer}.{j + 1}", "layer": layer, "kind": "paab"} if capture else None
                x = self.paab_blocks[idx](x, pose2d, S, T, record=rec)
                if capture:
                    rec["tokens"] = x.data
                    rec["pose"] = np.asarray(pose2d)
                    out.records.append(rec)
        x = self.norm(x)
        out.cls_feature = x[:, 0, :]
        if mode == "classify":
            out.output = self.head(out.cls_feature)
        else:
            B = x.shape[0]
            out.output = x[:, 1:, :].reshape(B, T, S, cfg.dim).mean(axis=2)
        return out

    __call__ = forward
