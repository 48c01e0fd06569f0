"""
Keypoint sets and their patch-level pose maps.

Conventions
-----------
* Keypoint entries are ``(t, k, x, y)`` with 1-based frame ``t`` and keypoint
  ``k`` and 0-based pixel coordinates; ``x`` is the column, ``y`` the row.
* Patch tokens are ordered frame-major: token ``i = t_tok * S + row * (W // p) + col``,
  the same order the backbone uses for its patch sequence.
* ``PoseMap2D`` is a ``(S*T,)`` uint8 vector, ``PoseMap3D`` an ``(S*T, K)`` uint8 matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

PoseMap2D = np.ndarray
PoseMap3D = np.ndarray


@dataclass(frozen=True)
class PatchGeometry:
    patch: int
    height: int
    width: int
    tau: int
    frames_per_token: int = 1

    def __post_init__(self):
        if self.patch <= 0 or self.height % self.patch or self.width % self.patch:
            raise ValidationError(
                f"patch size {self.patch} must divide H={self.height} and W={self.width}")
        if self.frames_per_token <= 0 or self.tau % self.frames_per_token:
            raise ValidationError(
                f"frames_per_token {self.frames_per_token} must divide tau={self.tau}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    @property
    def S(self) -> int:
        rows, cols = self.grid
        return rows * cols

    @property
    def T(self) -> int:
        return self.tau // self.frames_per_token

    @property
    def num_tokens(self) -> int:
        return self.S * self.T


@dataclass
class KeypointSet:
    """Validated ``(t, k, x, y)`` entries for one clip; at most one location per ``(t, k)``."""

    tau: int
    K: int
    H: int
    W: int
    points: np.ndarray  # (n, 4) int64

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64).reshape(-1, 4)
        bad = ((pts[:, 0] < 1) | (pts[:, 0] > self.tau) | (pts[:, 1] < 1) | (pts[:, 1] > self.K)
               | (pts[:, 2] < 0) | (pts[:, 2] >= self.W) | (pts[:, 3] < 0) | (pts[:, 3] >= self.H))
        if bad.any():
            t, k, x, y = (int(v) for v in pts[np.argmax(bad)])
            raise ValidationError(
                f"keypoint entry (t={t}, k={k}, x={x}, y={y}) out of range for "
                f"tau={self.tau}, K={self.K}, H={self.H}, W={self.W}")
        if len(pts):
            tk = pts[:, 0] * (self.K + 1) + pts[:, 1]
            uniq, counts = np.unique(tk, return_counts=True)
            if (counts > 1).any():
                dup = uniq[counts > 1][0]
                raise ValidationError(
                    f"duplicate location for (t={dup // (self.K + 1)}, k={dup % (self.K + 1)})")
        self.points = pts

    def __len__(self) -> int:
        return len(self.points)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return ((self.tau, self.K, self.H, self.W) == (other.tau, other.K, other.H, other.W)
                and np.array_equal(_canonical(self.points), _canonical(other.points)))

    @classmethod
    def empty(cls, tau: int, K: int, H: int, W: int) -> KeypointSet:
        return cls(tau, K, H, W, np.zeros((0, 4), dtype=np.int64))

    def with_points(self, points: np.ndarray) -> KeypointSet:
        return KeypointSet(self.tau, self.K, self.H, self.W, points)

    def to_json(self) -> dict:
        return {"tau": self.tau, "K": self.K, "H": self.H, "W": self.W,
                "points": _canonical(self.points).tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> KeypointSet:
        expected = {"tau", "K", "H", "W", "points"}
        unknown = set(doc) - expected
        if unknown:
            raise ValidationError(f"unknown keypoint field(s): {sorted(unknown)}")
        missing = expected - set(doc)
        if missing:
            raise ValidationError(f"missing keypoint field(s): {sorted(missing)}")
        pts = np.asarray(doc["points"], dtype=np.int64).reshape(-1, 4)
        return cls(int(doc["tau"]), int(doc["K"]), int(doc["H"]), int(doc["W"]), pts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path: str | Path) -> KeypointSet:
        return cls.from_json(json.loads(Path(path).read_text()))


def _canonical(points: np.ndarray) -> np.ndarray:
    if len(points) == 0:
        return points.reshape(0, 4)
    order = np.lexsort((points[:, 1], points[:, 0]))
    return points[order]


def _check_geometry(kps: KeypointSet, geom: PatchGeometry) -> None:
    if (kps.tau, kps.H, kps.W) != (geom.tau, geom.height, geom.width):
        raise ValidationError(
            f"keypoint geometry (tau={kps.tau}, H={kps.H}, W={kps.W}) does not match patch "
            f"geometry (tau={geom.tau}, H={geom.height}, W={geom.width})")


def build_dense_pose_map(kps: KeypointSet) -> np.ndarray:
    """Pixel-level indicator of shape ``(tau, K, H, W)``, indexed ``[t-1, k-1, y, x]``."""
    dense = np.zeros((kps.tau, kps.K, kps.H, kps.W), dtype=np.uint8)
    if len(kps):
        p = kps.points
        dense[p[:, 0] - 1, p[:, 1] - 1, p[:, 3], p[:, 2]] = 1
    return dense


def token_index(kps: KeypointSet, geom: PatchGeometry) -> np.ndarray:
    """Patch-token index of every keypoint entry."""
    p = kps.points
    cols = geom.width // geom.patch
    t_tok = (p[:, 0] - 1) // geom.frames_per_token
    return t_tok * geom.S + (p[:, 3] // geom.patch) * cols + p[:, 2] // geom.patch


def patchify_2d(kps: KeypointSet, geom: PatchGeometry) -> PoseMap2D:
    """1 for every patch token containing at least one keypoint."""
    _check_geometry(kps, geom)
    out = np.zeros(geom.num_tokens, dtype=np.uint8)
    if len(kps):
        out[token_index(kps, geom)] = 1
    return out


def patchify_3d(kps: KeypointSet, geom: PatchGeometry) -> PoseMap3D:
    """``[i, k-1] = 1`` when keypoint ``k`` lies in patch token ``i``."""
    _check_geometry(kps, geom)
    out = np.zeros((geom.num_tokens, kps.K), dtype=np.uint8)
    if len(kps):
        out[token_index(kps, geom), kps.points[:, 1] - 1] = 1
    return out


def pose_maps(kps: KeypointSet, geom: PatchGeometry) -> tuple[PoseMap2D, PoseMap3D]:
    p3 = patchify_3d(kps, geom)
    return p3.max(axis=1), p3


def corrupt_noise(kps: KeypointSet, eps: int, seed) -> KeypointSet:
    """Add an independent uniform integer in ``[0, eps]`` to each coordinate, clamped to the frame."""
    if eps < 0:
        raise ValidationError(f"noise level must be >= 0, got {eps}")
    if eps == 0 or len(kps) == 0:
        return kps.with_points(kps.points.copy())
    rng = np.random.default_rng(seed)
    pts = kps.points.copy()
    pts[:, 2:4] += rng.integers(0, eps + 1, size=(len(pts), 2))
    pts[:, 2] = np.clip(pts[:, 2], 0, kps.W - 1)
    pts[:, 3] = np.clip(pts[:, 3], 0, kps.H - 1)
    return kps.with_points(pts)


def randomize_map(geom: PatchGeometry, K: int, density: float, seed) -> tuple[PoseMap2D, PoseMap3D]:
    """Random pose maps: i.i.d. Bernoulli(density) keypoint bits, 2D map = row-wise OR."""
    if not 0.0 <= density <= 1.0:
        raise ValidationError(f"density must lie in [0, 1], got {density}")
    rng = np.random.default_rng(seed)
    p3 = (rng.random((geom.num_tokens, K)) < density).astype(np.uint8)
    return p3.max(axis=1) if K else np.zeros(geom.num_tokens, np.uint8), p3
