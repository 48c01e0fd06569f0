"""Command-line entry point: ``poseaware <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis
from .backbone import PoseAwareViT
from .checkpoint import checkpoint_load
from .dataio import dataset_read, dataset_write, read_manifest
from .errors import ConfigError, DataError, NumericalError, ValidationError
from .synthdata import GeneratorSpec, generate_alignment_set, generate_splits, scene_trajectory
from .train import (ExperimentConfig, evaluate_alignment, evaluate_classification, evaluate_retrieval,
                    episode_pairs, prepare, prepare_out, run_sweep, train)
from .tensor import no_grad

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


def _sha(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()


def _emit(table: analysis.MetricTable, out: Path | None, stem: str, csv: bool = False) -> None:
    text = table.to_json()
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.json").write_text(text + "\n")
        if csv:
            (out / f"{stem}.csv").write_text(table.to_csv())


def _load_json(path: str, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc}", field=what) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}: {exc.msg}", field=what) from exc


# ------------------------------------------------------------------ commands
def cmd_generate(args) -> int:
    doc = _load_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = GeneratorSpec.from_dict(doc)
    if args.out is None:
        raise ConfigError("generate needs --out", field="out")
    out = Path(args.out)
    prepare_out(out, args.force)
    if args.task == "align":
        samples = (generate_alignment_set(spec, spec.n_train, 0, "train")
                   + generate_alignment_set(spec, spec.n_test, spec.n_train, "test"))
    else:
        samples = generate_splits(spec)
    dataset_write(samples, out, generator=dict(spec.to_dict(), task=args.task))
    counts = {}
    for s in samples:
        counts[s.split] = counts.get(s.split, 0) + 1
    print(json.dumps({"samples": len(samples), "splits": counts, "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    out = args.out or cfg.out
    if out is None:
        raise ConfigError("no output directory (--out or config 'out')", field="out")
    out = Path(out)
    prepare_out(out, args.force)
    if cfg.sweep:
        results = run_sweep(cfg, out, args.workers)
        print(json.dumps({"cells": len(results), "out": str(out)}, sort_keys=True))
    else:
        res = train(cfg, out=out)
        print(json.dumps(dict(res.metrics, out=str(out)), sort_keys=True))
    return EXIT_OK


def _model_and_data(args, need_checkpoint: bool = True):
    model = None
    if args.checkpoint is not None:
        model = checkpoint_load(args.checkpoint)
    elif need_checkpoint:
        raise ConfigError("a checkpoint is required", field="checkpoint")
    samples = dataset_read(args.dataset)
    if model is None:
        from .config import ModelConfig
        s = samples[0] if samples else None
        if s is None:
            raise DataError(f"dataset {args.dataset} has no samples")
        tau, H, W, C = s.frames.shape
        patch = 8 if H % 8 == 0 and W % 8 == 0 else 1
        mcfg = ModelConfig(tau=tau, height=H, width=W, channels=C, keypoints=s.kps.K, patch=patch)
    else:
        mcfg = model.cfg
    data = prepare(samples, mcfg)
    return model, mcfg, data


def _meta(args, model) -> dict:
    meta = {"dataset": str(args.dataset), "split": getattr(args, "split", None)}
    if args.checkpoint is not None:
        meta["checkpoint_sha256"] = _sha(Path(args.checkpoint).read_bytes())
        meta["config_sha256"] = _sha(json.dumps(model.cfg.to_dict(), sort_keys=True).encode())
    return meta


def cmd_eval(args) -> int:
    model, _, data = _model_and_data(args)
    table = analysis.MetricTable(meta=dict(_meta(args, model), task=args.task))
    if args.task == "classify":
        m = evaluate_classification(model, data, args.split)
        for key in ("top1", "mca", "n"):
            table.add(key, m[key])
    elif args.task == "retrieve":
        m = evaluate_retrieval(model, data, args.gallery, args.split, args.k)
        for k in args.k:
            table.add(f"R@{k}", m[f"R@{k}"])
    else:
        m = evaluate_alignment(model, data, args.split, symmetric=args.symmetric)
        table.add("alignment_error", m["alignment_error"])
        table.add("episodes", m["episodes"])
    _emit(table, Path(args.out) if args.out else None, f"eval_{args.task}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    args.task = "retrieve"
    return cmd_eval(args)


def cmd_align(args) -> int:
    if args.oracle:
        _, _, data = _model_and_data(args, need_checkpoint=False)
        pairs = episode_pairs(data, data.where(args.split))
        if len(pairs) == 0:
            raise DataError(f"split {args.split!r} is empty")
        gen = read_manifest(args.dataset).get("generator")
        errs = []
        if gen is not None and gen.get("task") == "align":
            # exact scene-coordinate trajectory, identical for both views
            spec = GeneratorSpec.from_dict({k: v for k, v in gen.items() if k != "task"})
            source = "scene-trajectory"
            for a, _ in pairs:
                emb = analysis.keypoint_embeddings(scene_trajectory(spec, int(data.episodes[a])))
                errs.append(analysis.alignment_error(emb, emb, symmetric=args.symmetric))
        else:
            source = "registered-keypoints"
            for a, b in pairs:
                reg = analysis.register_affine(data.xy[b], data.xy[a])
                errs.append(analysis.alignment_error(analysis.keypoint_embeddings(data.xy[a]),
                                                     analysis.keypoint_embeddings(reg), symmetric=args.symmetric))
        table = analysis.MetricTable(meta={"dataset": str(args.dataset), "split": args.split,
                                           "embedding": "oracle-keypoints", "source": source})
        table.add("alignment_error", float(np.mean(errs)))
        table.add("episodes", int(len(pairs)))
    else:
        model, mcfg, data = _model_and_data(args)
        meta = _meta(args, model)
        if args.untrained:
            model = PoseAwareViT(mcfg)
            meta["embedding"] = "untrained"
        m = evaluate_alignment(model, data, args.split, symmetric=args.symmetric)
        table = analysis.MetricTable(meta=meta)
        table.add("alignment_error", m["alignment_error"])
        table.add("episodes", m["episodes"])
    _emit(table, Path(args.out) if args.out else None, "align")
    return EXIT_OK


def analyze(model: PoseAwareViT, data, idx: np.ndarray, which: str, normalize: str = "layernorm",
            bins: int = 10, batch: int = 16) -> analysis.MetricTable:
    """Per-block analysis averaged over clips ``idx``; histograms pool every clip."""
    if which == "distances" and not data.p2d[idx].any():
        raise DataError("dataset has no keypoints; distance analysis needs pose maps")
    per_layer: dict[str, dict[str, list]] = {}
    hist: dict[str, np.ndarray] = {}
    order: list[str] = []
    edges = np.linspace(0, 1, bins + 1)
    with no_grad():
        for s in range(0, len(idx), batch):
            b = idx[s:s + batch]
            pose = data.p2d[b] if model.paab_blocks else None
            out = model(data.videos[b].astype(np.float64), pose, capture=True)
            for j in range(len(b)):
                for snap in analysis.snapshots_from_records(out.records, j, pose=data.p2d[b]):
                    key = snap.name
                    if key not in per_layer:
                        per_layer[key] = {}
                        order.append(key)
                    acc = per_layer[key]
                    if which == "distances":
                        acc.setdefault("pose_nonpose_distance", []).append(
                            analysis.pose_nonpose_distance(snap, normalize))
                        acc.setdefault("pose_pose_distance", []).append(
                            analysis.pose_pose_distance(snap, normalize))
                    elif which == "ffn":
                        acc.setdefault("ffn_displacement", []).append(
                            analysis.ffn_displacement(snap.pre_ffn, snap.post_ffn, normalize))
                    else:
                        for name, w in snap.attention.items():
                            c = analysis.histogram_counts(w, edges)
                            hkey = f"{key}/{name}"
                            hist[hkey] = hist.get(hkey, 0) + c
    table = analysis.MetricTable(meta={"which": which, "normalize": normalize, "clips": int(len(idx)),
                                       "bins": bins})
    for key in order:
        for metric, vals in per_layer[key].items():
            v = np.asarray(vals, dtype=np.float64)
            table.add(metric, float(np.nanmean(v)) if np.isfinite(v).any() else analysis.UNDEFINED, layer=key)
    for hkey, counts in hist.items():
        table.add("attention_histogram", (counts / counts.sum()).tolist(), layer=hkey, aggregate="pooled")
    return table


def cmd_analyze(args) -> int:
    model, _, data = _model_and_data(args)
    idx = data.where(args.split)
    if len(idx) == 0:
        raise DataError(f"split {args.split!r} is empty")
    idx = idx[:args.max_clips]
    table = analyze(model, data, idx, args.which, args.normalize, args.bins)
    table.meta.update(_meta(args, model))
    _emit(table, Path(args.out) if args.out else None, f"analysis_{args.which}", csv=True)
    return EXIT_OK


# -------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    glob = argparse.ArgumentParser(add_help=False)
    glob.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the seed")
    glob.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    glob.add_argument("--force", action="store_true", default=argparse.SUPPRESS,
                      help="overwrite a non-empty output directory")
    glob.add_argument("--workers", type=int, default=argparse.SUPPRESS, help="parallel sweep runs")

    p = argparse.ArgumentParser(prog="poseaware", parents=[glob],
                                description="Pose-aware video transformer experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[glob], help="write a synthetic dataset")
    g.add_argument("spec", nargs="?", help="generator spec JSON (defaults if omitted)")
    g.add_argument("--task", choices=("classify", "align"), default="classify")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", parents=[glob], help="train one run or a sweep")
    t.add_argument("config", help="experiment config JSON")
    t.set_defaults(fn=cmd_train)

    def data_args(sp, checkpoint_positional=True):
        if checkpoint_positional:
            sp.add_argument("checkpoint")
        sp.add_argument("dataset")
        sp.add_argument("--split", default="test")

    e = sub.add_parser("eval", parents=[glob], help="evaluate a checkpoint")
    data_args(e)
    e.add_argument("--task", choices=("classify", "retrieve", "align"), default="classify")
    e.add_argument("--gallery", default="train")
    e.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    e.add_argument("--symmetric", action="store_true")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", parents=[glob], help="feature and attention diagnostics")
    data_args(a)
    a.add_argument("--which", choices=("distances", "attention", "ffn"), required=True)
    a.add_argument("--normalize", choices=analysis.NORMALIZATIONS, default="layernorm")
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--max-clips", type=int, default=32)
    a.set_defaults(fn=cmd_analyze)

    al = sub.add_parser("align", parents=[glob], help="alignment error on paired views")
    data_args(al, checkpoint_positional=False)
    al.add_argument("--checkpoint")
    al.add_argument("--oracle", action="store_true", help="use ground-truth keypoints as embeddings")
    al.add_argument("--untrained", action="store_true", help="fresh weights with the checkpoint's config")
    al.add_argument("--symmetric", action="store_true")
    al.set_defaults(fn=cmd_align)

    r = sub.add_parser("retrieve", parents=[glob], help="Recall@k with class-token features")
    data_args(r)
    r.add_argument("--gallery", default="train")
    r.add_argument("--k", type=int, nargs="+", default=[1, 5, 10])
    r.add_argument("--symmetric", action="store_true", help=argparse.SUPPRESS)
    r.set_defaults(fn=cmd_retrieve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", None), ("out", None), ("force", False), ("workers", 1)):
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        return args.fn(args)
    except (ConfigError, ValidationError) as exc:
        field = getattr(exc, "field", None)
        print(f"config error{f' [{field}]' if field else ''}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
