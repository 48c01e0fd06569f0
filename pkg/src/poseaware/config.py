"""Model configuration with field-level validation and strict dict round-tripping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .attention import CLS_MODES, VARIANTS
from .errors import ConfigError
from .nn import INITS

PAAT_TARGETS = ("3d", "2d")


def _strict_fields(cls, doc: dict, where: str) -> None:
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be an object, got {type(doc).__name__}", field=where)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown field {unknown[0]!r} in {where}", field=unknown[0])


@dataclass(frozen=True)
class PAABConfig:
    """Pose-aware attention block placement.

    ``layers`` are backbone layer indices (1-based) after which ``count``
    consecutive blocks are inserted; ``None`` means after the last layer.
    """

    layers: tuple[int, ...] | None = None
    variant: str = "PA-SA"
    count: int = 1
    cls_mode: str = "attend"

    def __post_init__(self):
        if self.layers is not None:
            object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        if self.variant not in VARIANTS:
            raise ConfigError(f"paab.variant must be one of {VARIANTS}, got {self.variant!r}", field="variant")
        if self.count < 1:
            raise ConfigError(f"paab.count must be >= 1, got {self.count}", field="count")
        if self.cls_mode not in CLS_MODES:
            raise ConfigError(f"paab.cls_mode must be one of {CLS_MODES}", field="cls_mode")


@dataclass(frozen=True)
class PAATConfig:
    """Auxiliary patch-keypoint classifier placement and loss scale.

    The default bottleneck is sized for desk-scale widths (it must not
    exceed the model width).
    """

    layers: tuple[int, ...] = (1,)
    bottleneck: int = 32
    lam: float = 1.6
    target: str = "3d"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(int(v) for v in self.layers))
        if not self.layers:
            raise ConfigError("paat.layers must name at least one layer", field="layers")
        if self.bottleneck < 1:
            raise ConfigError(f"paat.bottleneck must be >= 1, got {self.bottleneck}", field="bottleneck")
        if not self.lam >= 0:
            raise ConfigError(f"paat.lam must be >= 0, got {self.lam}", field="lam")
        if self.target not in PAAT_TARGETS:
            raise ConfigError(f"paat.target must be one of {PAAT_TARGETS}", field="target")


@dataclass(frozen=True)
class ModelConfig:
    tau: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    patch: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 8
    mlp_ratio: int = 4
    classes: int = 6
    keypoints: int = 5
    init: str = "fanin"
    pixel_norm: tuple[float, float] | None = (0.5, 0.25)  # (mean, std) applied to pixels before patch projection
    paab: PAABConfig | None = None
    paat: PAATConfig | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("tau", "height", "width", "channels", "patch", "depth", "dim", "heads",
                     "mlp_ratio", "classes", "keypoints"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}", field=name)
        if self.init not in INITS:
            raise ConfigError(f"init must be one of {INITS}, got {self.init!r}", field="init")
        if self.pixel_norm is not None:
            object.__setattr__(self, "pixel_norm", tuple(float(v) for v in self.pixel_norm))
            if len(self.pixel_norm) != 2 or not self.pixel_norm[1] > 0:
                raise ConfigError("pixel_norm must be [mean, std] with std > 0", field="pixel_norm")
        if self.height % self.patch or self.width % self.patch:
            raise ConfigError(f"patch {self.patch} must divide {self.height}x{self.width}", field="patch")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}", field="heads")
        if self.paab is not None:
            if self.paab.layers is None:
                object.__setattr__(self, "paab", dataclasses.replace(self.paab, layers=(self.depth,)))
            self._check_layers(self.paab.layers, "paab.layers")
        if self.paat is not None:
            self._check_layers(self.paat.layers, "paat.layers")
            if self.paat.bottleneck > self.dim:
                raise ConfigError(
                    f"paat.bottleneck {self.paat.bottleneck} exceeds model width {self.dim}",
                    field="bottleneck")

    def _check_layers(self, layers, name):
        for v in layers:
            if not 1 <= v <= self.depth:
                raise ConfigError(f"{name} entry {v} outside 1..{self.depth}", field=name)
        if len(set(layers)) != len(layers):
            raise ConfigError(f"{name} has duplicates: {layers}", field=name)

    @property
    def S(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def T(self) -> int:
        return self.tau

    @property
    def paat_outputs(self) -> int:
        return self.keypoints if self.paat is None or self.paat.target == "3d" else 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> ModelConfig:
        _strict_fields(cls, doc, "model")
        doc = dict(doc)
        if doc.get("paab") is not None:
            _strict_fields(PAABConfig, doc["paab"], "paab")
            doc["paab"] = PAABConfig(**doc["paab"])
        if doc.get("paat") is not None:
            _strict_fields(PAATConfig, doc["paat"], "paat")
            doc["paat"] = PAATConfig(**doc["paat"])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
