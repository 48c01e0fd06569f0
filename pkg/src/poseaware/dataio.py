"""
On-disk datasets.

Layout of a dataset directory::

    manifest.json          {"version": 1, "generator": {...} | null, "samples": [...]}
    frames/<id>.f32        16-byte header (u32 tau, H, W, C, little-endian) + float32 LE pixels
    keypoints/<id>.json    keypoint JSON

Each manifest sample is an object with exactly the fields of ``SAMPLE_FIELDS``.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, ValidationError
from .posemap import KeypointSet
from .synthdata import VideoSample

MANIFEST_VERSION = 1
SAMPLE_FIELDS = ("id", "label", "split", "view", "episode", "frames", "keypoints")
_HEADER = struct.Struct("<4I")


def write_frames(path: Path, frames: np.ndarray) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 4:
        raise ValidationError(f"frames must be (tau, H, W, C), got {frames.shape}")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(*frames.shape))
        fh.write(frames.tobytes())


def read_frames(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read frames {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    dims = _HEADER.unpack_from(raw)
    n = int(np.prod(dims))
    if len(raw) != _HEADER.size + 4 * n:
        raise DataError(f"{path}: expected {n} float32 values for dims {dims}, "
                        f"found {(len(raw) - _HEADER.size) / 4:g}")
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(dims).astype(np.float32)


def _entry(sample: VideoSample) -> dict:
    sid = int(sample.id)
    return {"id": sid, "label": int(sample.label), "split": sample.split, "view": int(sample.view),
            "episode": int(sample.episode), "frames": f"frames/{sid}.f32",
            "keypoints": f"keypoints/{sid}.json"}


def dataset_write(samples: list[VideoSample], directory, generator: dict | None = None) -> Path:
    """Write samples and a manifest; ids must be unique."""
    directory = Path(directory)
    ids = [int(s.id) for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("sample ids must be unique")
    (directory / "frames").mkdir(parents=True, exist_ok=True)
    (directory / "keypoints").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        e = _entry(s)
        write_frames(directory / e["frames"], s.frames)
        (directory / e["keypoints"]).write_text(json.dumps(s.kps.to_json(), sort_keys=True))
        entries.append(e)
    # one sample per line so parse errors point at a sample
    lines = ['{"version": %d,' % MANIFEST_VERSION,
             '"generator": %s,' % json.dumps(generator, sort_keys=True),
             '"samples": [']
    lines += [json.dumps(e, sort_keys=True) + ("," if i < len(entries) - 1 else "") for i, e in enumerate(entries)]
    lines += ["]}", ""]
    (directory / "manifest.json").write_text("\n".join(lines))
    return directory / "manifest.json"


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: top level must be an object")
    unknown = sorted(set(doc) - {"version", "generator", "samples"})
    if unknown:
        raise DataError(f"{path}: unknown manifest field {unknown[0]!r}")
    if doc.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    if not isinstance(doc.get("samples"), list):
        raise DataError(f"{path}: 'samples' must be a list")
    seen = set()
    for i, e in enumerate(doc["samples"]):
        if not isinstance(e, dict):
            raise DataError(f"{path}: sample #{i} is not an object")
        unknown = sorted(set(e) - set(SAMPLE_FIELDS))
        if unknown:
            raise DataError(f"{path}: sample #{i} has unknown field {unknown[0]!r}")
        missing = [f for f in SAMPLE_FIELDS if f not in e]
        if missing:
            raise DataError(f"{path}: sample #{i} lacks field {missing[0]!r}")
        for f in ("id", "label", "view", "episode"):
            if not isinstance(e[f], int) or isinstance(e[f], bool):
                raise DataError(f"{path}: sample #{i} field {f!r} must be an integer")
        if e["id"] in seen:
            raise DataError(f"{path}: duplicate sample id {e['id']}")
        seen.add(e["id"])
    return doc


def dataset_read(directory, split: str | None = None, ids=None) -> list[VideoSample]:
    """Load samples in manifest order, optionally filtered by split and/or id set."""
    directory = Path(directory)
    doc = read_manifest(directory)
    wanted = None if ids is None else {int(i) for i in ids}
    out = []
    for e in doc["samples"]:
        if split is not None and e["split"] != split:
            continue
        if wanted is not None and e["id"] not in wanted:
            continue
        frames = read_frames(directory / e["frames"])
        try:
            kps = KeypointSet.load(directory / e["keypoints"])
        except (OSError, ValueError) as exc:
            raise DataError(f"sample {e['id']}: bad keypoints file: {exc}") from exc
        if (kps.tau, kps.H, kps.W) != frames.shape[:3]:
            raise DataError(f"sample {e['id']}: keypoint geometry {(kps.tau, kps.H, kps.W)} "
                            f"does not match frames {frames.shape[:3]}")
        out.append(VideoSample(frames, kps, e["label"], id=e["id"], split=e["split"],
                               view=e["view"], episode=e["episode"]))
    return out
