"""
Diagnostics and downstream metrics: feature distances between pose and
non-pose tokens, attention-value histograms, FFN displacement, retrieval
recall, frame alignment error and mean class accuracy.

Distances accept ``normalize``: ``"none"`` (plain Euclidean),
``"layernorm"`` (Euclidean after per-token standardisation) or ``"cosine"``
(one minus cosine similarity).  Metrics that are undefined for their input
return ``UNDEFINED`` (NaN) instead of raising.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

UNDEFINED = float("nan")
NORMALIZATIONS = ("none", "layernorm", "cosine")
LN_EPS = 1e-5


@dataclass
class LayerSnapshot:
    """Captured state of one block for one clip; ``tokens`` include the class token at row 0."""

    layer: int
    tokens: np.ndarray  # (1 + S*T, D)
    attention: dict[str, np.ndarray] = field(default_factory=dict)  # name -> (..., n, n)
    pose: np.ndarray | None = None  # (S*T,)
    name: str = ""
    pre_ffn: np.ndarray | None = None
    post_ffn: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2:
            raise ShapeError(f"tokens must be (N, D), got {self.tokens.shape}")
        if self.pose is not None:
            self.pose = np.asarray(self.pose).astype(bool).reshape(-1)
            if self.pose.shape[0] != self.tokens.shape[0] - 1:
                raise ShapeError(f"pose map has {self.pose.shape[0]} entries for {self.tokens.shape[0] - 1} patch tokens")

    @property
    def patch_tokens(self) -> np.ndarray:
        return self.tokens[1:]


def snapshots_from_records(records: list[dict], sample: int = 0, pose=None) -> list[LayerSnapshot]:
    """Per-block snapshots of one batch element from ``ForwardOutput.records``."""
    out = []
    for r in records:
        p = r.get("pose", pose)
        if p is not None:
            p = np.asarray(p)
            p = p[sample] if p.ndim == 2 else p
        out.append(LayerSnapshot(
            layer=r["layer"], tokens=r["tokens"][sample],
            attention={k: v[sample] for k, v in r.get("attention", {}).items()},
            pose=p, name=r.get("name", ""),
            pre_ffn=r["pre_ffn"][sample] if "pre_ffn" in r else None,
            post_ffn=r["post_ffn"][sample] if "post_ffn" in r else None))
    return out


def normalize_features(x: np.ndarray, normalize: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if normalize == "none":
        return x
    if normalize == "layernorm":
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + LN_EPS)
    if normalize == "cosine":
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)
    raise ValidationError(f"normalize must be one of {NORMALIZATIONS}, got {normalize!r}")


def pairwise_distance(a: np.ndarray, b: np.ndarray, normalize: str = "none") -> np.ndarray:
    """``(n, m)`` distances between rows of ``a`` and ``b``."""
    a, b = normalize_features(a, normalize), normalize_features(b, normalize)
    if normalize == "cosine":
        return 1.0 - a @ b.T
    return np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))


def _pose_split(snap: LayerSnapshot):
    if snap.pose is None:
        raise ValidationError(f"snapshot {snap.name or snap.layer} carries no pose map")
    z = snap.patch_tokens
    return z[snap.pose], z[~snap.pose]


def pose_nonpose_distance(snap: LayerSnapshot, normalize: str = "none") -> float:
    """Mean distance over every (pose token, non-pose token) pair; class token excluded."""
    pose, other = _pose_split(snap)
    if len(pose) == 0 or len(other) == 0:
        return UNDEFINED
    return float(pairwise_distance(pose, other, normalize).mean())


def pose_pose_distance(snap: LayerSnapshot, normalize: str = "none") -> float:
    """Mean distance over unordered pairs of distinct pose tokens."""
    pose, _ = _pose_split(snap)
    n = len(pose)
    if n < 2:
        return UNDEFINED
    d = pairwise_distance(pose, pose, normalize)
    iu = np.triu_indices(n, k=1)
    return float(d[iu].mean())


def _check_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.float64)
    if e.ndim != 1 or len(e) < 2 or e[0] != 0.0 or e[-1] != 1.0 or np.any(np.diff(e) <= 0):
        raise ValidationError("bin edges must increase strictly from 0 to 1")
    return e


def histogram_counts(weights: np.ndarray, edges) -> np.ndarray:
    """Counts of attention entries per bin ``[e_i, e_{i+1})`` (last bin closed).

    Rows that are entirely zero (masked-out queries) are not counted.
    """
    e = _check_edges(edges)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim == 0:
        raise ShapeError("attention weights need at least one axis")
    rows = w.reshape(-1, w.shape[-1])
    rows = rows[np.any(rows != 0, axis=1)]
    vals = rows.ravel()
    idx = np.searchsorted(e, vals, side="right") - 1
    idx = np.clip(idx, 0, len(e) - 2)
    return np.bincount(idx, minlength=len(e) - 1)


def attention_histogram(snap_or_weights, bins=10) -> np.ndarray:
    """Fraction of attention entries per bin.

    ``bins`` is a bin count (equal-width bins over ``[0, 1]``) or an edge
    array.  Accepts a snapshot (every captured attention map is pooled) or a
    weight array.  An empty population gives all-NaN fractions.
    """
    edges = np.linspace(0.0, 1.0, bins + 1) if np.isscalar(bins) else bins
    if isinstance(snap_or_weights, LayerSnapshot):
        maps = list(snap_or_weights.attention.values())
    else:
        maps = [snap_or_weights]
    counts = sum(histogram_counts(w, edges) for w in maps)
    total = counts.sum()
    if total == 0:
        return np.full(len(counts), UNDEFINED)
    return counts / total


def ffn_displacement(before: np.ndarray, after: np.ndarray, normalize: str = "none") -> float:
    """Mean over tokens of the distance between a token before and after the FFN sub-layer."""
    before, after = np.asarray(before, np.float64), np.asarray(after, np.float64)
    if before.shape != after.shape:
        raise ShapeError(f"before {before.shape} vs after {after.shape}")
    a, b = normalize_features(before, normalize), normalize_features(after, normalize)
    if normalize == "cosine":
        d = 1.0 - (a * b).sum(-1)
    else:
        d = np.sqrt(((a - b) ** 2).sum(-1))
    return float(d.mean())


def cosine_similarity(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    return normalize_features(q, "cosine") @ normalize_features(g, "cosine").T


def retrieve(gallery: np.ndarray, gallery_labels, queries: np.ndarray, query_labels, k: int,
             gallery_ids=None, query_ids=None) -> float:
    """Recall@k: fraction of queries whose ``k`` most cosine-similar gallery items include a same-class item.

    A gallery item with the same id as the query is skipped; without ids,
    passing the same array object as gallery and queries excludes the
    diagonal.  Ties go to the lower gallery index.
    """
    g, q = np.asarray(gallery, np.float64), np.asarray(queries, np.float64)
    gl, ql = np.asarray(gallery_labels), np.asarray(query_labels)
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(g) == 0:
        raise ValidationError("gallery is empty")
    if len(q) == 0:
        return UNDEFINED
    if gallery_ids is None and query_ids is None and gallery is queries:
        gallery_ids = query_ids = np.arange(len(g))
    sim = cosine_similarity(q, g)
    self_mask = np.zeros(sim.shape, bool)
    if gallery_ids is not None and query_ids is not None:
        self_mask = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    available = len(g) - int(self_mask.any(axis=1).max())
    if k > available:
        warnings.warn(f"k={k} exceeds the {available} retrievable gallery items; clamped", stacklevel=2)
        k = available
    if k < 1:
        return UNDEFINED
    sim = np.where(self_mask, -np.inf, sim)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    hit = (gl[order] == ql[:, None]).any(axis=1)
    return float(hit.mean())


def nearest_indices(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Index of the Euclidean nearest row of ``b`` for each row of ``a`` (lowest index on ties)."""
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return np.argmin(d, axis=1)


def alignment_error(emb_a: np.ndarray, emb_b: np.ndarray, symmetric: bool = False) -> float:
    """``mean_i |i - nn(i)| / (T - 1)`` with ``nn(i)`` the nearest frame of B to frame ``i`` of A."""
    a, b = np.asarray(emb_a, np.float64), np.asarray(emb_b, np.float64)
    if a.ndim != 2 or a.shape != b.shape:
        raise ShapeError(f"embeddings must both be (T, D), got {a.shape} and {b.shape}")
    T = a.shape[0]
    if T < 2:
        raise ValidationError(f"alignment needs at least 2 frames, got {T}")
    idx = np.arange(T)
    err = float(np.mean(np.abs(idx - nearest_indices(a, b))) / (T - 1))
    if symmetric:
        err = 0.5 * (err + float(np.mean(np.abs(idx - nearest_indices(b, a))) / (T - 1)))
    return err


def keypoint_embeddings(xy: np.ndarray) -> np.ndarray:
    """Oracle per-frame embedding: the flattened keypoint coordinates ``(T, K*2)``."""
    xy = np.asarray(xy, np.float64)
    return xy.reshape(xy.shape[0], -1)


def register_affine(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Map keypoints ``src`` (``(..., 2)``) into the frame of ``dst`` with a least-squares affine fit.

    Entries that are negative in either array (absent keypoints) do not
    take part in the fit.
    """
    a = np.asarray(src, np.float64).reshape(-1, 2)
    b = np.asarray(dst, np.float64).reshape(-1, 2)
    ok = (a >= 0).all(axis=1) & (b >= 0).all(axis=1)
    if ok.sum() < 3:
        raise ValidationError("affine registration needs at least 3 shared keypoints")
    design = np.column_stack([a, np.ones(len(a))])
    coef, *_ = np.linalg.lstsq(design[ok], b[ok], rcond=None)
    return (design @ coef).reshape(np.shape(src))


def mean_class_accuracy(preds, labels) -> float:
    """Unweighted mean of per-class accuracy over classes present in ``labels``."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if labels.size == 0:
        raise ValidationError("labels are empty")
    if preds.shape != labels.shape:
        raise ShapeError(f"preds {preds.shape} vs labels {labels.shape}")
    classes = np.unique(labels)
    return float(np.mean([(preds[labels == c] == c).mean() for c in classes]))


# ------------------------------------------------------------ result tables
@dataclass
class MetricTable:
    """Rows of ``(metric, layer, aggregate, value)`` plus run metadata."""

    meta: dict = field(default_factory=dict)
    rows: list[dict] = field(default_factory=list)

    def add(self, metric: str, value, layer=None, aggregate: str = "mean") -> None:
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, np.generic):
            value = value.item()
        self.rows.append({"metric": metric, "layer": layer, "aggregate": aggregate, "value": value})

    def get(self, metric: str, layer=None):
        for r in self.rows:
            if r["metric"] == metric and r["layer"] == layer:
                return r["value"]
        raise KeyError((metric, layer))

    def to_dict(self) -> dict:
        return {"meta": self.meta, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        """One line per scalar; list values are expanded to ``metric[i]``."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "layer", "aggregate", "value"])
        for r in self.rows:
            layer = "" if r["layer"] is None else r["layer"]
            vals = r["value"] if isinstance(r["value"], list) else [r["value"]]
            for i, v in enumerate(vals):
                name = r["metric"] if not isinstance(r["value"], list) else f"{r['metric']}[{i}]"
                w.writerow([name, layer, r["aggregate"], repr(float(v)) if v is not None else ""])
        return buf.getvalue()
