"""
Experiment configuration, training loops, evaluation and grid sweeps.

A run is a pure function of its ``ExperimentConfig`` (including the seed) and
the dataset bytes: the metrics log and checkpoints it writes are
byte-identical on rerun.  Nothing time-dependent is logged.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import math
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import PoseAwareViT
from .checkpoint import checkpoint_save, encode
from .config import ModelConfig, PAABConfig, PAATConfig, _strict_fields
from .dataio import dataset_read
from .errors import ConfigError, DataError, NumericalError
from .losses import classify_loss, paat_loss, tcn_loss, total_loss
from .optim import Adam
from .posemap import PatchGeometry, corrupt_noise, pose_maps, randomize_map
from .synthdata import GeneratorSpec, generate_alignment_set, generate_splits
from .tensor import Tensor, backward, no_grad

CONFIG_VERSION = 1
TASKS = ("classify", "align", "retrieve")
CORRUPTION_MODES = ("noise", "random")
SWEEP_AXES = ("paab_layers", "paab_variant", "paab_count", "paat_layers", "paat_target", "lam", "eps",
              "random_map", "seed")

# streams of np.random.default_rng([seed, stream, ...]); 0-2 belong to the model
STREAM_SHUFFLE = 3
STREAM_CORRUPT = 4
STREAM_TCN = 5


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"optim.lr must be > 0, got {self.lr}", field="lr")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"optim.{name} must lie in [0, 1)", field=name)
        if not self.eps > 0:
            raise ConfigError("optim.eps must be > 0", field="eps")


@dataclass(frozen=True)
class CorruptionConfig:
    """Pose corruption applied to every pose input (PAAB maps and PAAT targets), train and test.

    ``noise``: each keypoint coordinate moves by a uniform integer in ``[0, eps]``.
    ``random``: pose maps are replaced by Bernoulli maps; ``density=None``
    matches each clip's own true keypoint-map density.
    """

    mode: str = "noise"
    eps: int = 0
    density: float | None = None

    def __post_init__(self):
        if self.mode not in CORRUPTION_MODES:
            raise ConfigError(f"corruption.mode must be one of {CORRUPTION_MODES}", field="mode")
        if self.eps < 0:
            raise ConfigError("corruption.eps must be >= 0", field="eps")
        if self.mode == "random" and self.eps:
            raise ConfigError("corruption.eps applies to noise mode only", field="eps")
        if self.density is not None and not 0 <= self.density <= 1:
            raise ConfigError("corruption.density must lie in [0, 1]", field="density")
        if self.mode == "noise" and self.density is not None:
            raise ConfigError("corruption.density applies to random mode only", field="density")


@dataclass(frozen=True)
class TCNConfig:
    margin: float = 0.2
    window: int = 1

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError("tcn.margin must be >= 0", field="margin")
        if self.window < 0:
            raise ConfigError("tcn.window must be >= 0", field="window")


@dataclass(frozen=True)
class ExperimentConfig:
    version: int = CONFIG_VERSION
    task: str = "classify"
    dataset: str | None = None
    generator: GeneratorSpec | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 30
    batch_size: int = 8
    corruption: CorruptionConfig | None = None
    tcn: TCNConfig = field(default_factory=TCNConfig)
    eval_batch: int = 64
    recall_k: tuple[int, ...] = (1, 5, 10)
    log_steps: bool = True
    out: str | None = None
    seed: int = 0
    sweep: dict | None = None

    def __post_init__(self):
        object.__setattr__(self, "recall_k", tuple(int(k) for k in self.recall_k))
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version!r} unsupported (expected {CONFIG_VERSION})",
                              field="version")
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}", field="task")
        if (self.dataset is None) == (self.generator is None):
            raise ConfigError("exactly one of dataset / generator must be given", field="dataset")
        if self.dataset is not None and not (Path(self.dataset) / "manifest.json").is_file():
            raise ConfigError(f"dataset {self.dataset!r} has no manifest.json", field="dataset")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0", field="epochs")
        for name in ("batch_size", "eval_batch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", field=name)
        if not self.recall_k or min(self.recall_k) < 1:
            raise ConfigError("recall_k entries must be >= 1", field="recall_k")
        if self.generator is not None:
            g, m = self.generator, self.model
            for gname, mname in (("tau", "tau"), ("height", "height"), ("width", "width"),
                                 ("channels", "channels"), ("keypoints", "keypoints")):
                if getattr(g, gname) != getattr(m, mname):
                    raise ConfigError(f"model.{mname}={getattr(m, mname)} does not match generator "
                                      f"{gname}={getattr(g, gname)}", field=mname)
            if self.task != "align" and g.classes > m.classes:
                raise ConfigError(f"generator has {g.classes} classes but model.classes={m.classes}",
                                  field="classes")
        if self.sweep is not None:
            if not isinstance(self.sweep, dict) or not self.sweep:
                raise ConfigError("sweep must be a non-empty object", field="sweep")
            for axis, values in self.sweep.items():
                if axis not in SWEEP_AXES:
                    raise ConfigError(f"unknown sweep axis {axis!r}", field=axis)
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"sweep axis {axis!r} needs a non-empty list", field=axis)

    @property
    def model_config(self) -> ModelConfig:
        """The model config with the experiment seed."""
        return dataclasses.replace(self.model, seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, doc: dict) -> ExperimentConfig:
        _strict_fields(cls, doc, "experiment")
        doc = dict(doc)
        if "version" not in doc:
            raise ConfigError("config lacks a version stamp", field="version")
        try:
            if doc.get("generator") is not None:
                _strict_fields(GeneratorSpec, doc["generator"], "generator")
                doc["generator"] = GeneratorSpec(**doc["generator"])
            if "model" in doc:
                doc["model"] = ModelConfig.from_dict(doc["model"])
            for name, sub in (("optim", OptimConfig), ("tcn", TCNConfig), ("corruption", CorruptionConfig)):
                if doc.get(name) is not None:
                    _strict_fields(sub, doc[name], name)
                    doc[name] = sub(**doc[name])
            return cls(**doc)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", field="config") from exc
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}", field="config") from exc
        return cls.from_dict(doc)


# ---------------------------------------------------------------------- data
@dataclass
class ClipData:
    """Dense arrays for a set of clips; pose maps already corrupted if requested."""

    ids: np.ndarray
    labels: np.ndarray
    splits: np.ndarray
    episodes: np.ndarray
    views: np.ndarray
    videos: np.ndarray  # (N, tau, H, W, C) float32
    p2d: np.ndarray  # (N, S*T) uint8
    p3d: np.ndarray  # (N, S*T, K) uint8
    xy: np.ndarray  # (N, tau, K, 2) keypoints, -1 where absent

    def where(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == split)


def check_geometry(samples, mcfg: ModelConfig) -> None:
    for s in samples:
        tau, H, W, C = s.frames.shape
        for name, have in (("tau", tau), ("height", H), ("width", W), ("channels", C), ("keypoints", s.kps.K)):
            if have != getattr(mcfg, name):
                raise ConfigError(f"sample {s.id}: {name}={have} but model expects {getattr(mcfg, name)}",
                                  field=name)


def load_samples(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        return dataset_read(cfg.dataset)
    if cfg.task == "align":
        g = cfg.generator
        return (generate_alignment_set(g, g.n_train, 0, "train")
                + generate_alignment_set(g, g.n_test, g.n_train, "test"))
    return generate_splits(cfg.generator)


def prepare(samples, mcfg: ModelConfig, corruption: CorruptionConfig | None = None, seed: int = 0) -> ClipData:
    check_geometry(samples, mcfg)
    geom = PatchGeometry(mcfg.patch, mcfg.height, mcfg.width, mcfg.tau)
    n, K = len(samples), mcfg.keypoints
    p2d = np.zeros((n, geom.num_tokens), np.uint8)
    p3d = np.zeros((n, geom.num_tokens, K), np.uint8)
    xy = -np.ones((n, mcfg.tau, K, 2))
    for i, s in enumerate(samples):
        kps = s.kps
        if len(kps):
            xy[i, kps.points[:, 0] - 1, kps.points[:, 1] - 1] = kps.points[:, 2:4]
        cseed = [seed, STREAM_CORRUPT, int(s.id)]
        if corruption is not None and corruption.mode == "noise":
            kps = corrupt_noise(kps, corruption.eps, cseed)
        a, b = pose_maps(kps, geom)
        if corruption is not None and corruption.mode == "random":
            density = b.mean() if corruption.density is None else corruption.density
            a, b = randomize_map(geom, K, float(density), cseed)
        p2d[i], p3d[i] = a, b
    videos = np.stack([s.frames for s in samples]).astype(np.float32) if n else \
        np.zeros((0, mcfg.tau, mcfg.height, mcfg.width, mcfg.channels), np.float32)
    return ClipData(
        ids=np.array([s.id for s in samples], dtype=np.int64),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        splits=np.array([s.split for s in samples], dtype=object),
        episodes=np.array([s.episode for s in samples], dtype=np.int64),
        views=np.array([s.view for s in samples], dtype=np.int64),
        videos=videos, p2d=p2d, p3d=p3d, xy=xy)


def episode_pairs(data: ClipData, idx: np.ndarray) -> np.ndarray:
    """``(E, 2)`` row indices of (view 0, view 1) per episode, sorted by episode id."""
    by_ep: dict[int, dict[int, int]] = {}
    for i in idx:
        by_ep.setdefault(int(data.episodes[i]), {})[int(data.views[i])] = int(i)
    bad = sorted(e for e, v in by_ep.items() if e < 0 or set(v) != {0, 1})
    if bad:
        raise DataError(f"unpaired episodes (need exactly views 0 and 1): {bad[:20]}")
    return np.array([[by_ep[e][0], by_ep[e][1]] for e in sorted(by_ep)], dtype=np.int64).reshape(-1, 2)


# ---------------------------------------------------------------- model I/O
def _batch_inputs(model: PoseAwareViT, data: ClipData, idx):
    pose = data.p2d[idx] if model.paab_blocks else None
    return data.videos[idx].astype(np.float64), pose


def _paat_targets(mcfg: ModelConfig, data: ClipData, idx) -> np.ndarray:
    if mcfg.paat.target == "3d":
        return data.p3d[idx].astype(np.float64)
    return data.p2d[idx, :, None].astype(np.float64)


def _paat_term(model: PoseAwareViT, out, data: ClipData, idx) -> Tensor | None:
    if model.cfg.paat is None:
        return None
    target = _paat_targets(model.cfg, data, idx)
    terms = [paat_loss(out.paat[layer], target) for layer in sorted(out.paat)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def predict_logits(model: PoseAwareViT, data: ClipData, idx, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            video, pose = _batch_inputs(model, data, b)
            out.append(model(video, pose).output.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.classes))


def video_features(model: PoseAwareViT, data: ClipData, idx, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            video, pose = _batch_inputs(model, data, b)
            out.append(model(video, pose).cls_feature.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.dim))


def frame_embeddings(model: PoseAwareViT, data: ClipData, idx, batch: int = 64) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            video, pose = _batch_inputs(model, data, b)
            out.append(model(video, pose, mode="embed-frames").output.data)
    return np.concatenate(out) if out else np.zeros((0, model.cfg.T, model.cfg.dim))


def _nonempty(data: ClipData, split: str) -> np.ndarray:
    idx = data.where(split)
    if len(idx) == 0:
        raise DataError(f"split {split!r} is empty")
    return idx


def evaluate_classification(model, data: ClipData, split: str = "test", batch: int = 64) -> dict:
    idx = _nonempty(data, split)
    pred = predict_logits(model, data, idx, batch).argmax(axis=1)
    labels = data.labels[idx]
    return {"split": split, "n": int(len(idx)), "top1": float((pred == labels).mean()),
            "mca": float(analysis.mean_class_accuracy(pred, labels))}


def evaluate_retrieval(model, data: ClipData, gallery: str = "train", query: str = "test",
                       ks=(1, 5, 10), batch: int = 64) -> dict:
    g, q = _nonempty(data, gallery), _nonempty(data, query)
    gf, qf = video_features(model, data, g, batch), video_features(model, data, q, batch)
    out = {"gallery": gallery, "query": query, "n_gallery": int(len(g)), "n_query": int(len(q))}
    for k in ks:
        out[f"R@{k}"] = float(analysis.retrieve(gf, data.labels[g], qf, data.labels[q], k,
                                                gallery_ids=data.ids[g], query_ids=data.ids[q]))
    return out


def evaluate_alignment(model, data: ClipData, split: str = "test", batch: int = 64,
                       symmetric: bool = False) -> dict:
    pairs = episode_pairs(data, _nonempty(data, split))
    ea = frame_embeddings(model, data, pairs[:, 0], batch)
    eb = frame_embeddings(model, data, pairs[:, 1], batch)
    errs = [analysis.alignment_error(a, b, symmetric=symmetric) for a, b in zip(ea, eb)]
    return {"split": split, "episodes": int(len(pairs)), "alignment_error": float(np.mean(errs))}


# ------------------------------------------------------------------ training
class MetricsLog:
    """Append-only JSON-lines file; every record is flushed as soon as it is written."""

    def __init__(self, path: Path | None):
        self.path = path
        self.records: list[dict] = []
        self._fh = open(path, "a") if path is not None else None

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_metrics_log(path) -> list[dict]:
    """Parse a metrics log, ignoring a trailing partial record left by an interrupted run."""
    records = []
    text = Path(path).read_text()
    lines = text.split("\n")
    for i, line in enumerate(lines):
        if not line:
            continue
        try:
            records.append(json.loads(line))
        except json.JSONDecodeError as exc:
            if i == len(lines) - 1:
                break  # unterminated last line
            raise DataError(f"{path}: corrupt record on line {i + 1}") from exc
    return records


@dataclass
class RunResult:
    model: PoseAwareViT
    best_state: bytes
    metrics: dict
    log: list[dict]


def _write_diagnostic(out: Path | None, snapshot: dict, params) -> None:
    snapshot = dict(snapshot, param_max_abs={k: float(np.max(np.abs(p.data))) for k, p in params})
    if out is not None:
        (out / "diagnostic.json").write_text(json.dumps(snapshot, sort_keys=True, indent=1, default=str))


def _finite_or_abort(rep, params, where: dict, out: Path | None) -> None:
    if all(math.isfinite(v) for v in (rep.primary, rep.paat, rep.total)):
        return
    _write_diagnostic(out, dict(where, primary=rep.primary, paat=rep.paat, total=rep.total), params)
    raise NumericalError(f"non-finite loss at epoch {where['epoch']} step {where['step']}: "
                         f"primary={rep.primary} paat={rep.paat}")


def _step_losses(model, cfg: ExperimentConfig, data: ClipData, b: np.ndarray):
    mcfg = model.cfg
    lam = mcfg.paat.lam if mcfg.paat is not None else 0.0
    with_paat = mcfg.paat is not None
    if cfg.task == "align":
        ia, ib = b[:, 0], b[:, 1]
        va, pa = _batch_inputs(model, data, ia)
        vb, pb = _batch_inputs(model, data, ib)
        oa = model(va, pa, mode="embed-frames", with_paat=with_paat)
        ob = model(vb, pb, mode="embed-frames", with_paat=with_paat)
        primary = tcn_loss(oa.output, ob.output, cfg.tcn.margin, cfg.tcn.window)
        paat = None
        if with_paat:
            paat = (_paat_term(model, oa, data, ia) + _paat_term(model, ob, data, ib)) * 0.5
    else:
        video, pose = _batch_inputs(model, data, b)
        out = model(video, pose, with_paat=with_paat)
        primary = classify_loss(out.output, data.labels[b])
        paat = _paat_term(model, out, data, b)
    return total_loss(primary, paat, lam)


def _final_metrics(model, cfg: ExperimentConfig, data: ClipData) -> dict:
    if cfg.task == "classify":
        return evaluate_classification(model, data, "test", cfg.eval_batch)
    if cfg.task == "retrieve":
        m = evaluate_retrieval(model, data, "train", "test", cfg.recall_k, cfg.eval_batch)
        m.update(evaluate_classification(model, data, "test", cfg.eval_batch))
        return m
    return evaluate_alignment(model, data, "test", cfg.eval_batch)


def train(cfg: ExperimentConfig, data: ClipData | None = None, out: Path | None = None) -> RunResult:
    """Train per ``cfg``; write ``metrics.jsonl``, ``best.ckpt`` and ``final.ckpt`` into ``out`` if given.

    The best checkpoint is chosen by the ``val`` split metric when the data
    has one, otherwise by the lowest mean training loss of an epoch.
    """
    mcfg = cfg.model_config
    if data is None:
        data = prepare(load_samples(cfg), mcfg, cfg.corruption, cfg.seed)
    check = data.videos.shape[1:]
    if check != (mcfg.tau, mcfg.height, mcfg.width, mcfg.channels):
        raise ConfigError(f"data geometry {check} does not match model", field="height")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = MetricsLog(out / "metrics.jsonl" if out is not None else None)
    try:
        return _train(cfg, mcfg, data, out, log)
    finally:
        log.close()


def _train(cfg, mcfg, data, out, log) -> RunResult:
    model = PoseAwareViT(mcfg)
    params = model.named_parameters()
    opt = Adam([p for _, p in params], cfg.optim.lr, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
    train_idx = _nonempty(data, "train")
    units = episode_pairs(data, train_idx) if cfg.task == "align" else train_idx
    has_val = len(data.where("val")) > 0
    rng = np.random.default_rng([cfg.seed, STREAM_SHUFFLE])
    log.write({"kind": "start", "config": cfg.to_dict(), "train_units": int(len(units)),
               "parameters": int(model.num_parameters())})
    if cfg.task == "align":
        log.write(dict(evaluate_alignment(model, data, "test", cfg.eval_batch), kind="eval", epoch=0))
    best_state, best_score = encode(model), None
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = units[rng.permutation(len(units))]
        sums = np.zeros(3)
        nb = 0
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            step += 1
            try:
                total, rep = _step_losses(model, cfg, data, b)
            except NumericalError as exc:
                # non-finite values caught inside the forward pass (e.g. a NaN pixel)
                _write_diagnostic(out, {"epoch": epoch, "step": step, "error": str(exc)}, params)
                raise NumericalError(f"non-finite forward pass at epoch {epoch} step {step}: {exc}") from exc
            _finite_or_abort(rep, params, {"epoch": epoch, "step": step}, out)
            backward(total)
            applied = opt.step()
            opt.zero_grad()
            sums += (rep.primary, rep.paat, rep.total)
            nb += 1
            if cfg.log_steps:
                log.write({"kind": "step", "epoch": epoch, "step": step, "primary": rep.primary,
                           "paat": rep.paat, "total": rep.total, "lam": rep.lam, "applied": applied})
        mean = sums / max(nb, 1)
        rec = {"kind": "epoch", "epoch": epoch, "primary": mean[0], "paat": mean[1], "total": mean[2],
               "rejected_steps": opt.rejected}
        if has_val:
            if cfg.task == "align":
                val = -evaluate_alignment(model, data, "val", cfg.eval_batch)["alignment_error"]
            else:
                val = evaluate_classification(model, data, "val", cfg.eval_batch)["top1"]
            rec["val_score"] = val
            score = val
        else:
            score = -mean[2]
        log.write(rec)
        if best_score is None or score > best_score:
            best_score, best_state = score, encode(model)
    metrics = _final_metrics(model, cfg, data)
    log.write(dict(metrics, kind="eval", epoch=cfg.epochs))
    if out is not None:
        (out / "best.ckpt").write_bytes(best_state)
        checkpoint_save(model, out / "final.ckpt")
        (out / "config.json").write_text(cfg.to_json())
    return RunResult(model, best_state, metrics, log.records)


# -------------------------------------------------------------------- sweeps
def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    m = cfg.model
    rep = dataclasses.replace
    if axis == "seed":
        return rep(cfg, seed=int(value))
    if axis == "lam":
        if m.paat is None:
            raise ConfigError("sweep axis 'lam' needs a paat model", field="lam")
        return rep(cfg, model=rep(m, paat=rep(m.paat, lam=float(value))))
    if axis == "paat_target":
        return rep(cfg, model=rep(m, paat=rep(m.paat or PAATConfig(), target=value)))
    if axis == "paat_layers":
        layers = tuple(value) if isinstance(value, (list, tuple)) else (int(value),)
        return rep(cfg, model=rep(m, paat=rep(m.paat or PAATConfig(), layers=layers)))
    if axis.startswith("paab_"):
        paab = m.paab or PAABConfig()
        key = axis[len("paab_"):]
        if key == "layers":
            value = tuple(value) if isinstance(value, (list, tuple)) else (int(value),)
        return rep(cfg, model=rep(m, paab=rep(paab, **{key: value})))
    if axis == "eps":
        if int(value) == 0:
            return rep(cfg, corruption=None)
        return rep(cfg, corruption=CorruptionConfig("noise", int(value)))
    if axis == "random_map":
        if value:
            return rep(cfg, corruption=CorruptionConfig("random"))
        return cfg if cfg.corruption is None or cfg.corruption.mode != "random" else rep(cfg, corruption=None)
    raise ConfigError(f"unknown sweep axis {axis!r}", field=axis)


def expand_sweep(cfg: ExperimentConfig) -> list[tuple[str, dict, ExperimentConfig]]:
    """Cartesian product of the sweep axes (axes in sorted order) as ``(name, cell, config)``."""
    if not cfg.sweep:
        return [("run", {}, cfg)]
    axes = sorted(cfg.sweep)
    cells = []
    base = dataclasses.replace(cfg, sweep=None)
    for i, values in enumerate(itertools.product(*(cfg.sweep[a] for a in axes))):
        c = base
        for a, v in zip(axes, values):
            c = _apply_axis(c, a, v)
        # re-run validation on the fully assembled cell
        c = ExperimentConfig.from_dict(json.loads(json.dumps(c.to_dict())))
        cells.append((f"cell{i:03d}", dict(zip(axes, values)), c))
    return cells


def _run_cell(args) -> dict:
    name, cell, cfg, out = args
    res = train(cfg, out=Path(out) / name if out is not None else None)
    return {"cell": name, "axes": cell, "metrics": res.metrics}


def run_sweep(cfg: ExperimentConfig, out: Path | None, workers: int = 1) -> list[dict]:
    cells = expand_sweep(cfg)
    jobs = [(name, cell, c, str(out) if out is not None else None) for name, cell, c in cells]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    if out is not None:
        lines = [json.dumps(r, sort_keys=True) for r in results]
        (Path(out) / "sweep.jsonl").write_text("\n".join(lines) + "\n")
    return results


def prepare_out(out: Path, force: bool) -> None:
    """Refuse a non-empty output directory unless ``force``; with ``force`` it is emptied."""
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force)", field="out")
        for child in out.iterdir():
            if child.is_dir():
                shutil.rmtree(child)
            else:
                child.unlink()
    out.mkdir(parents=True, exist_ok=True)
