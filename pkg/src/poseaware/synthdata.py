"""
Synthetic pose videos with exact keypoint ground truth.

A clip shows a small articulated figure: keypoint 1 is the root, keypoints
``2..K`` sit on limbs of fixed length around it.  The class decides which
limb swings and how fast; everything else (root position and drift, limb
lengths, small idle motion of the other limbs, and a moving background of
coloured distractor blobs over a drifting grating) is drawn independently of
the label.  Each keypoint is rendered as a Gaussian blob in its own colour.

Every sample is generated from ``np.random.default_rng([seed, stream, id])``
so samples are reproducible and independent of generation order.
"""

from __future__ import annotations

import colorsys
import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .posemap import KeypointSet

STREAM_CLASSIFY = 0
STREAM_ALIGN = 1


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of the synthetic video family.

    ``frequencies`` lists the swing frequencies (cycles per clip); class ``c``
    swings limb ``c % (K-1)`` at ``frequencies[c // (K-1)]``, so
    ``classes <= (K-1) * len(frequencies)``.
    """

    classes: int = 6
    keypoints: int = 5
    tau: int = 8
    height: int = 32
    width: int = 32
    channels: int = 3
    n_train: int = 600
    n_test: int = 200
    frequencies: tuple[float, ...] = (1.0, 2.0)
    swing: tuple[float, float] = (1.0, 1.5)  # radians, active limb
    idle_swing: tuple[float, float] = (0.0, 0.25)
    limb_length: tuple[float, float] = (5.0, 7.0)
    drift: float = 0.5  # max root speed, px/frame
    blob_sigma: float = 2.0
    exposure: float = 1.0  # shutter window in frame intervals; > 0 leaves a motion trail
    exposure_samples: int = 5
    stick_width: float = 0.0  # Gaussian half-width of root-to-keypoint limb strokes; 0 draws blobs only
    distractors: int = 4
    distractor_sigma: tuple[float, float] = (1.5, 2.5)
    distractor_intensity: tuple[float, float] = (0.3, 0.7)
    texture_amplitude: float = 0.15
    noise: float = 0.02
    view_rotation: float = 0.35  # radians, max |angle| of a camera view
    view_scale: tuple[float, float] = (0.85, 1.1)
    view_shift: float = 3.0  # px
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frequencies", tuple(float(f) for f in self.frequencies))
        for name in ("swing", "idle_swing", "limb_length", "distractor_sigma", "distractor_intensity",
                     "view_scale"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        if self.keypoints < 2:
            raise ValidationError("a figure needs at least 2 keypoints (root and one limb)")
        if self.classes < 1:
            raise ValidationError(f"classes must be >= 1, got {self.classes}")
        capacity = (self.keypoints - 1) * len(self.frequencies)
        if self.classes > capacity:
            raise ValidationError(
                f"{self.classes} classes exceed the {capacity} distinct motion patterns of "
                f"{self.keypoints - 1} limbs x {len(self.frequencies)} frequencies")
        if len(set(self.frequencies)) != len(self.frequencies):
            raise ValidationError("frequencies must be distinct")
        if self.swing[0] <= self.idle_swing[1]:
            raise ValidationError("active swing range must lie above the idle swing range")
        for name in ("tau", "height", "width", "channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if min(self.height, self.width) < 4 * self.limb_length[1] / 2:
            raise ValidationError("frame too small for the figure's limb length")

    def class_pattern(self, label: int) -> tuple[int, float]:
        """(swinging limb index in 1..K-1, frequency) of a class."""
        limbs = self.keypoints - 1
        return label % limbs + 1, self.frequencies[label // limbs]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> GeneratorSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValidationError(f"unknown generator field {unknown[0]!r}")
        return cls(**doc)


@dataclass
class VideoSample:
    frames: np.ndarray  # (tau, H, W, C) float32 in [0, 1]
    kps: KeypointSet
    label: int
    id: int = 0
    split: str = "train"
    view: int = 0
    episode: int = -1
    meta: dict = field(default_factory=dict)


# ----------------------------------------------------------------- geometry
@dataclass(frozen=True)
class ViewTransform:
    """2-D affine camera view ``p -> A @ (p - c) + c + shift`` around the frame centre ``c``."""

    matrix: tuple[tuple[float, float], tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    shift: tuple[float, float] = (0.0, 0.0)
    center: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls, height: int, width: int) -> ViewTransform:
        return cls(center=((width - 1) / 2, (height - 1) / 2))

    @classmethod
    def make(cls, angle: float, scale: float, shift, height: int, width: int) -> ViewTransform:
        c, s = np.cos(angle) * scale, np.sin(angle) * scale
        return cls(((c, -s), (s, c)), (float(shift[0]), float(shift[1])),
                   ((width - 1) / 2, (height - 1) / 2))

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map ``(..., 2)`` (x, y) points from scene to view coordinates."""
        A = np.asarray(self.matrix)
        c = np.asarray(self.center)
        return (xy - c) @ A.T + c + np.asarray(self.shift)

    def inverse(self, xy: np.ndarray) -> np.ndarray:
        A = np.asarray(self.matrix)
        c = np.asarray(self.center)
        return (xy - c - np.asarray(self.shift)) @ np.linalg.inv(A).T + c

    def shrunk(self, factor: float) -> ViewTransform:
        """Interpolate towards the identity view."""
        A = np.asarray(self.matrix)
        A = np.eye(2) + factor * (A - np.eye(2))
        return ViewTransform(tuple(map(tuple, A.tolist())), tuple(factor * np.asarray(self.shift)), self.center)


# ------------------------------------------------------------------ drawing
def keypoint_colors(K: int, channels: int) -> np.ndarray:
    """Fully saturated, evenly spaced hues; one per keypoint."""
    cols = np.array([colorsys.hsv_to_rgb(k / K, 1.0, 1.0) for k in range(K)])
    if channels == 3:
        return cols
    if channels == 1:
        return np.ones((K, 1))
    out = np.ones((K, channels))
    out[:, :min(3, channels)] = cols[:, :min(3, channels)]
    return out


def _motion(spec: GeneratorSpec, label: int, rng: np.random.Generator) -> dict:
    """Draw the figure's motion parameters."""
    K = spec.keypoints
    active, freq = spec.class_pattern(label)
    reach = spec.limb_length[1]
    margin = reach + 2
    root0 = np.array([rng.uniform(margin, spec.width - 1 - margin),
                      rng.uniform(margin, spec.height - 1 - margin)])
    vel = rng.uniform(-spec.drift, spec.drift, size=2)
    base = 2 * np.pi * np.arange(K - 1) / (K - 1) + rng.uniform(-0.3, 0.3, size=K - 1)
    length = rng.uniform(*spec.limb_length, size=K - 1)
    amp = rng.uniform(*spec.idle_swing, size=K - 1)
    freqs = rng.choice(spec.frequencies, size=K - 1) * rng.uniform(0.8, 1.2, size=K - 1)
    amp[active - 1] = rng.uniform(*spec.swing)
    freqs[active - 1] = freq
    phase = rng.uniform(0, 2 * np.pi, size=K - 1)
    return {"root0": root0, "vel": vel, "base": base, "length": length, "amp": amp, "freqs": freqs,
            "phase": phase, "margin": margin}


def _pose_at(spec: GeneratorSpec, motion: dict, t: np.ndarray) -> np.ndarray:
    """Scene-coordinate keypoints ``(len(t), K, 2)`` at (possibly fractional) frame times."""
    t = np.asarray(t, np.float64)
    m = motion["margin"]
    lo, hi = np.array([m, m]), np.array([spec.width - 1 - m, spec.height - 1 - m])
    root = np.clip(motion["root0"] + t[:, None] * motion["vel"], lo, hi)
    angle = motion["base"] + motion["amp"] * np.sin(
        2 * np.pi * motion["freqs"] * t[:, None] / spec.tau + motion["phase"])
    pts = np.empty((len(t), spec.keypoints, 2))
    pts[:, 0] = root
    pts[:, 1:, 0] = root[:, None, 0] + motion["length"] * np.cos(angle)
    pts[:, 1:, 1] = root[:, None, 1] + motion["length"] * np.sin(angle)
    return pts


def _trail(spec: GeneratorSpec, motion: dict) -> np.ndarray | None:
    """Sub-frame poses ``(tau, n, K, 2)`` over each frame's exposure window, or None."""
    if spec.exposure <= 0 or spec.exposure_samples < 2:
        return None
    offs = np.linspace(-spec.exposure / 2, spec.exposure / 2, spec.exposure_samples)
    times = np.arange(spec.tau)[:, None] + offs[None, :]
    return _pose_at(spec, motion, times.ravel()).reshape(spec.tau, len(offs), spec.keypoints, 2)


def _trajectory(spec: GeneratorSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """Scene-coordinate keypoints ``(tau, K, 2)`` as floats (x, y)."""
    return _pose_at(spec, _motion(spec, label, rng), np.arange(spec.tau))


def _scene(spec: GeneratorSpec, rng: np.random.Generator) -> dict:
    """Label-independent background parameters."""
    n = spec.distractors
    return {
        "grating_freq": rng.uniform(0.1, 0.4, size=2),
        "grating_phase": rng.uniform(0, 2 * np.pi),
        "grating_speed": rng.uniform(-0.6, 0.6),
        "grating_color": rng.uniform(0.2, 1.0, size=spec.channels),
        "d_pos": np.column_stack([rng.uniform(0, spec.width - 1, n), rng.uniform(0, spec.height - 1, n)]),
        "d_vel": rng.uniform(-1.5, 1.5, size=(n, 2)),
        "d_sigma": rng.uniform(*spec.distractor_sigma, size=n),
        "d_color": rng.uniform(0.0, 1.0, size=(n, spec.channels)) * rng.uniform(*spec.distractor_intensity, size=(n, 1)),
        "noise_seed": int(rng.integers(2**31)),
    }


def _segment_dist2(xs, ys, a, b) -> np.ndarray:
    """Squared distance from each pixel to the segment ``a``-``b``."""
    d = np.asarray(b, np.float64) - np.asarray(a, np.float64)
    n2 = float(d @ d)
    u = np.zeros_like(xs) if n2 == 0 else np.clip(((xs - a[0]) * d[0] + (ys - a[1]) * d[1]) / n2, 0.0, 1.0)
    return (xs - a[0] - u * d[0]) ** 2 + (ys - a[1] - u * d[1]) ** 2


def _blob(xs, ys, xy, sigma) -> np.ndarray:
    """Gaussian alpha of blobs at ``xy`` (..., 2), max-combined over leading axes."""
    xy = np.asarray(xy, np.float64).reshape(-1, 2)
    a = np.zeros_like(xs)
    for px, py in xy:
        a = np.maximum(a, np.exp(-((xs - px) ** 2 + (ys - py) ** 2) / (2 * sigma * sigma)))
    return a


def _render(spec: GeneratorSpec, scene: dict, kp_xy: np.ndarray | None,
            view: ViewTransform, trail: np.ndarray | None = None) -> np.ndarray:
    """Render ``(tau, H, W, C)`` float32 frames in view coordinates.

    ``kp_xy`` holds integer pixel keypoints already in view coordinates; blobs
    are centred exactly on them.  ``trail`` optionally gives sub-frame poses
    ``(tau, n, K, 2)`` in view coordinates; every part of the figure is then
    drawn over its whole exposure path.  The background is defined in scene
    coordinates and sampled through ``view``.
    """
    H, W, C, tau = spec.height, spec.width, spec.channels, spec.tau
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    scene_xy = view.inverse(np.stack([xs, ys], axis=-1))
    sx, sy = scene_xy[..., 0], scene_xy[..., 1]
    frames = np.zeros((tau, H, W, C))
    fx, fy = scene["grating_freq"]
    nrng = np.random.default_rng(scene["noise_seed"])
    if spec.exposure > 0 and spec.exposure_samples >= 2:
        offs = np.linspace(-spec.exposure / 2, spec.exposure / 2, spec.exposure_samples)
    else:
        offs = np.zeros(1)
    for t in range(tau):
        g = 0.5 + 0.5 * np.sin(fx * sx + fy * sy + scene["grating_phase"] + scene["grating_speed"] * t)
        img = spec.texture_amplitude * g[..., None] * scene["grating_color"]
        for p0, v, sig, col in zip(scene["d_pos"], scene["d_vel"], scene["d_sigma"], scene["d_color"]):
            a = np.zeros_like(sx)
            for o in offs:
                px, py = p0 + (t + o) * v
                a = np.maximum(a, np.exp(-((sx - px) ** 2 + (sy - py) ** 2) / (2 * sig * sig)))
            img = img * (1 - a[..., None]) + col * a[..., None]
        if kp_xy is not None:
            K = kp_xy.shape[1]
            cols = keypoint_colors(K, C)
            poses = kp_xy[t][None].astype(np.float64) if trail is None else trail[t]
            if spec.stick_width > 0:
                for k in range(1, K):
                    a = np.zeros_like(xs)
                    for pose in poses:
                        d2 = _segment_dist2(xs, ys, pose[0], pose[k])
                        a = np.maximum(a, np.exp(-d2 / (2 * spec.stick_width ** 2)))
                    img = img * (1 - a[..., None]) + cols[k] * a[..., None]
            for k in range(K):
                a = np.maximum(_blob(xs, ys, poses[:, k], spec.blob_sigma),
                               _blob(xs, ys, kp_xy[t, k], spec.blob_sigma))
                img = img * (1 - a[..., None]) + cols[k] * a[..., None]
        img = img + spec.noise * nrng.standard_normal(img.shape)
        frames[t] = img
    return np.clip(frames, 0.0, 1.0).astype(np.float32)


def render_background(spec: GeneratorSpec, sample_id: int) -> np.ndarray:
    """The distractor-only rendering of a classification sample (no figure)."""
    rng = np.random.default_rng([spec.seed, STREAM_CLASSIFY, sample_id])
    label = int(rng.integers(spec.classes))
    _trajectory(spec, label, rng)
    scene = _scene(spec, rng)
    return _render(spec, scene, None, ViewTransform.identity(spec.height, spec.width))


def _pixels(spec: GeneratorSpec, xy: np.ndarray) -> np.ndarray:
    """Round to pixels and clamp into the frame."""
    pix = np.rint(xy).astype(np.int64)
    pix[..., 0] = np.clip(pix[..., 0], 0, spec.width - 1)
    pix[..., 1] = np.clip(pix[..., 1], 0, spec.height - 1)
    return pix


def _to_keypoints(spec: GeneratorSpec, pix: np.ndarray) -> KeypointSet:
    tau, K = pix.shape[:2]
    t, k = np.meshgrid(np.arange(1, tau + 1), np.arange(1, K + 1), indexing="ij")
    pts = np.column_stack([t.ravel(), k.ravel(), pix[..., 0].ravel(), pix[..., 1].ravel()])
    return KeypointSet(tau, K, spec.height, spec.width, pts)


def make_classification_sample(spec: GeneratorSpec, sample_id: int, split: str = "train",
                               scene_override: dict | None = None) -> VideoSample:
    rng = np.random.default_rng([spec.seed, STREAM_CLASSIFY, sample_id])
    label = int(rng.integers(spec.classes))
    motion = _motion(spec, label, rng)
    xy = _pose_at(spec, motion, np.arange(spec.tau))
    scene = _scene(spec, rng)
    if scene_override is not None:
        scene = scene_override
    pix = _pixels(spec, xy)
    frames = _render(spec, scene, pix, ViewTransform.identity(spec.height, spec.width), _trail(spec, motion))
    return VideoSample(frames, _to_keypoints(spec, pix), label, id=sample_id, split=split,
                       meta={"xy": xy, "scene": scene})


def generate_classification_set(spec: GeneratorSpec, n: int, start_id: int = 0,
                                split: str = "train") -> list[VideoSample]:
    """``n`` labelled clips with ids ``start_id .. start_id + n - 1``."""
    if n < 0:
        raise ValidationError(f"n must be >= 0, got {n}")
    return [make_classification_sample(spec, start_id + i, split) for i in range(n)]


def generate_splits(spec: GeneratorSpec) -> list[VideoSample]:
    """Default train/test split: train ids first, test ids after them."""
    return (generate_classification_set(spec, spec.n_train, 0, "train")
            + generate_classification_set(spec, spec.n_test, spec.n_train, "test"))


# ---------------------------------------------------------------- multi-view
def _random_view(spec: GeneratorSpec, rng: np.random.Generator) -> ViewTransform:
    return ViewTransform.make(rng.uniform(-spec.view_rotation, spec.view_rotation),
                              rng.uniform(*spec.view_scale),
                              rng.uniform(-spec.view_shift, spec.view_shift, size=2),
                              spec.height, spec.width)


def _inside(spec: GeneratorSpec, xy: np.ndarray) -> bool:
    return bool((xy[..., 0] >= 0).all() and (xy[..., 0] <= spec.width - 1).all()
                and (xy[..., 1] >= 0).all() and (xy[..., 1] <= spec.height - 1).all())


def _fit_view(spec: GeneratorSpec, view: ViewTransform, xy: np.ndarray) -> tuple[ViewTransform, bool]:
    adjusted = False
    factor = 1.0
    cur = view
    while not _inside(spec, cur.apply(xy)) and factor > 0:
        adjusted = True
        factor = round(factor - 0.1, 10)
        cur = view.shrunk(max(factor, 0.0))
    return cur, adjusted


def generate_aligned_pair(spec: GeneratorSpec, episode: int, views: tuple[ViewTransform, ViewTransform] | None = None,
                          split: str = "train") -> tuple[VideoSample, VideoSample]:
    """One scene and trajectory rendered through two camera views.

    Frame ``t`` of view A corresponds to frame ``t`` of view B.  A view that
    would push the figure out of frame is shrunk towards the identity; the
    sample's ``meta["view_adjusted"]`` records this.
    """
    rng = np.random.default_rng([spec.seed, STREAM_ALIGN, episode])
    label = int(rng.integers(spec.classes))
    motion = _motion(spec, label, rng)
    xy = _pose_at(spec, motion, np.arange(spec.tau))
    trail = _trail(spec, motion)
    scene = _scene(spec, rng)
    if views is None:
        views = (_random_view(spec, rng), _random_view(spec, rng))
    out = []
    for v_id, view in enumerate(views):
        fitted, adjusted = _fit_view(spec, view, xy)
        view_xy = fitted.apply(xy)
        pix = _pixels(spec, view_xy)
        frames = _render(spec, scene, pix, fitted, None if trail is None else fitted.apply(trail))
        out.append(VideoSample(frames, _to_keypoints(spec, pix), label, id=2 * episode + v_id,
                               split=split, view=v_id, episode=episode,
                               meta={"xy": view_xy, "scene_xy": xy, "view": fitted,
                                     "view_adjusted": adjusted}))
    return out[0], out[1]


def scene_trajectory(spec: GeneratorSpec, episode: int) -> np.ndarray:
    """Float scene-coordinate keypoints ``(tau, K, 2)`` shared by both views of an episode."""
    rng = np.random.default_rng([spec.seed, STREAM_ALIGN, episode])
    label = int(rng.integers(spec.classes))
    return _trajectory(spec, label, rng)


def generate_alignment_set(spec: GeneratorSpec, episodes: int, start: int = 0,
                           split: str = "train") -> list[VideoSample]:
    samples = []
    for e in range(start, start + episodes):
        samples.extend(generate_aligned_pair(spec, e, split=split))
    return samples
