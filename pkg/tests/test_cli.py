import json
from pathlib import Path

import numpy as np
import pytest

from poseaware import analysis, cli
from poseaware.backbone import PoseAwareViT
from poseaware.checkpoint import checkpoint_load, checkpoint_save
from poseaware.config import ModelConfig
from poseaware.dataio import dataset_read
from poseaware.tensor import no_grad
from poseaware.train import ExperimentConfig, prepare, read_metrics_log

GEN = {"classes": 2, "keypoints": 3, "tau": 2, "height": 16, "width": 16, "n_train": 10, "n_test": 4,
       "limb_length": [3.0, 4.0], "distractors": 1, "seed": 0}
MODEL = {"tau": 2, "height": 16, "width": 16, "channels": 3, "patch": 8, "depth": 2, "dim": 16, "heads": 2,
         "mlp_ratio": 2, "classes": 2, "keypoints": 3}


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc))
    return path


def make_dataset(tmp_path, capsys, name="data", task="classify", **over):
    spec = write_json(tmp_path / f"{name}_spec.json", dict(GEN, **over))
    out = tmp_path / name
    code, _, err = run(capsys, "generate", spec, "--out", out, "--task", task)
    assert code == 0, err
    return out


def experiment(tmp_path, dataset, name="exp.json", **over) -> Path:
    doc = {"version": 1, "dataset": str(dataset), "model": dict(MODEL), "epochs": 1, "batch_size": 4}
    doc.update(over)
    return write_json(tmp_path / name, doc)


@pytest.fixture
def dataset(tmp_path, capsys):
    return make_dataset(tmp_path, capsys)


@pytest.fixture
def untrained_ckpt(tmp_path):
    path = tmp_path / "untrained.ckpt"
    checkpoint_save(PoseAwareViT(ModelConfig.from_dict(dict(MODEL, paab={"variant": "PA-SA"}))), path)
    return path


def files(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


# ---------------------------------------------------------------- generate
def test_generate_writes_manifest_and_counts(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", GEN)
    code, out, _ = run(capsys, "generate", spec, "--out", tmp_path / "d")
    assert code == 0
    assert json.loads(out)["splits"] == {"train": 10, "test": 4}
    manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 14


def test_generate_twice_byte_identical(tmp_path, capsys):
    a = make_dataset(tmp_path, capsys, "a")
    b = make_dataset(tmp_path, capsys, "b")
    assert files(a) == files(b)


def test_generate_seed_flag_changes_data(tmp_path, capsys):
    spec = write_json(tmp_path / "spec.json", GEN)
    run(capsys, "generate", spec, "--out", tmp_path / "a")
    run(capsys, "generate", spec, "--out", tmp_path / "b", "--seed", "5")
    assert files(tmp_path / "a") != files(tmp_path / "b")


def test_generated_dataset_reads_back(dataset):
    samples = dataset_read(dataset)
    assert [s.id for s in samples] == list(range(14))
    assert all(s.frames.shape == (2, 16, 16, 3) for s in samples)


def test_generate_refuses_nonempty_out(tmp_path, capsys, dataset):
    spec = write_json(tmp_path / "spec2.json", GEN)
    code, _, err = run(capsys, "generate", spec, "--out", dataset)
    assert code == 2 and "--force" in err
    code, _, _ = run(capsys, "generate", spec, "--out", dataset, "--force")
    assert code == 0


# ------------------------------------------------------------------- train
def test_train_one_epoch_writes_checkpoint(tmp_path, capsys, dataset):
    cfg = experiment(tmp_path, dataset)
    code, out, err = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 0, err
    assert {"best.ckpt", "final.ckpt", "metrics.jsonl", "config.json"} <= set(files(tmp_path / "run"))
    model = checkpoint_load(tmp_path / "run" / "final.ckpt")
    assert model.cfg.dim == 16
    assert json.loads(out)["n"] == 4


def test_lambda_zero_total_equals_primary(tmp_path, capsys, dataset):
    model = dict(MODEL, paat={"layers": [1], "bottleneck": 8, "lam": 0.0})
    cfg = experiment(tmp_path, dataset, model=model, epochs=2)
    assert run(capsys, "train", cfg, "--out", tmp_path / "run")[0] == 0
    steps = [r for r in read_metrics_log(tmp_path / "run" / "metrics.jsonl") if r["kind"] == "step"]
    assert len(steps) == 6
    for r in steps:
        assert r["paat"] > 0
        assert r["total"] == r["primary"]


def test_train_rerun_byte_identical(tmp_path, capsys, dataset):
    model = dict(MODEL, paab={"variant": "Joint PA-STA"}, paat={"layers": [1], "bottleneck": 8})
    cfg = experiment(tmp_path, dataset, model=model, epochs=2)
    run(capsys, "train", cfg, "--out", tmp_path / "r1")
    run(capsys, "train", cfg, "--out", tmp_path / "r2")
    run(capsys, "train", cfg, "--out", tmp_path / "r3", "--seed", "1")
    assert files(tmp_path / "r1") == files(tmp_path / "r2")
    assert files(tmp_path / "r1")["metrics.jsonl"] != files(tmp_path / "r3")["metrics.jsonl"]


def test_train_from_generator_block(tmp_path, capsys):
    doc = {"version": 1, "generator": GEN, "model": MODEL, "epochs": 1}
    code, _, err = run(capsys, "train", write_json(tmp_path / "c.json", doc), "--out", tmp_path / "run")
    assert code == 0, err


def test_sweep_cells_equal_individual_runs(tmp_path, capsys, dataset):
    model = dict(MODEL, paat={"layers": [1], "bottleneck": 8})
    sweep = experiment(tmp_path, dataset, "sweep.json", model=model, sweep={"lam": [0.5, 2.0]})
    assert run(capsys, "train", sweep, "--out", tmp_path / "sw")[0] == 0
    single = experiment(tmp_path, dataset, "single.json", model=dict(model, paat=dict(model["paat"], lam=2.0)))
    assert run(capsys, "train", single, "--out", tmp_path / "one")[0] == 0
    cells = [json.loads(line) for line in (tmp_path / "sw" / "sweep.jsonl").read_text().splitlines()]
    assert [c["axes"] for c in cells] == [{"lam": 0.5}, {"lam": 2.0}]
    assert files(tmp_path / "sw" / "cell001") == files(tmp_path / "one")
    last = read_metrics_log(tmp_path / "one" / "metrics.jsonl")[-1]
    assert cells[1]["metrics"] == {k: v for k, v in last.items() if k not in ("kind", "epoch")}


def test_sweep_workers_match_serial(tmp_path, capsys, dataset):
    sweep = experiment(tmp_path, dataset, "sweep.json", sweep={"seed": [0, 1]})
    run(capsys, "train", sweep, "--out", tmp_path / "serial")
    run(capsys, "train", sweep, "--out", tmp_path / "par", "--workers", "2")
    assert files(tmp_path / "serial") == files(tmp_path / "par")


def test_metrics_log_parseable_after_truncation(tmp_path, capsys, dataset):
    cfg = experiment(tmp_path, dataset, epochs=2)
    run(capsys, "train", cfg, "--out", tmp_path / "run")
    path = tmp_path / "run" / "metrics.jsonl"
    full = read_metrics_log(path)
    raw = path.read_bytes()
    lines = raw.split(b"\n")
    cut = len(b"\n".join(lines[:4])) + 1 + len(lines[4]) // 2  # half of the fifth record
    path.write_bytes(raw[:cut])
    assert read_metrics_log(path) == full[:4]


# -------------------------------------------------------------- exit codes
def test_exit_code_config_error_names_field(tmp_path, capsys, dataset):
    cfg = experiment(tmp_path, dataset, model=dict(MODEL, depht=3))
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 2 and "depht" in err


def test_exit_code_geometry_mismatch(tmp_path, capsys, dataset):
    cfg = experiment(tmp_path, dataset, model=dict(MODEL, tau=4))
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 2 and "tau" in err


def test_exit_code_data_error(tmp_path, capsys, dataset):
    manifest = dataset / "manifest.json"
    manifest.write_text(manifest.read_text().replace('"label"', "label", 1))
    cfg = experiment(tmp_path, dataset)
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 3 and "line" in err


def test_exit_code_numerical_failure_writes_snapshot(tmp_path, capsys, dataset):
    frames = dataset / "frames" / "0.f32"
    raw = bytearray(frames.read_bytes())
    raw[16:20] = np.array([np.nan], "<f4").tobytes()
    frames.write_bytes(bytes(raw))
    cfg = experiment(tmp_path, dataset)
    code, _, err = run(capsys, "train", cfg, "--out", tmp_path / "run")
    assert code == 4 and "non-finite" in err
    snap = json.loads((tmp_path / "run" / "diagnostic.json").read_text())
    assert snap["epoch"] == 1 and "param_max_abs" in snap


# -------------------------------------------------------------------- eval
def test_eval_overfit_tiny_model_reaches_full_train_accuracy(tmp_path, capsys, dataset):
    cfg = experiment(tmp_path, dataset, epochs=40, optim={"lr": 3e-3})
    assert run(capsys, "train", cfg, "--out", tmp_path / "run")[0] == 0
    code, out, _ = run(capsys, "eval", tmp_path / "run" / "final.ckpt", dataset, "--split", "train")
    assert code == 0
    table = json.loads(out)
    assert table["rows"][0]["value"] == 1.0


def test_eval_reports_top1_and_mca_and_repeats(tmp_path, capsys, dataset, untrained_ckpt):
    outs = [run(capsys, "eval", untrained_ckpt, dataset)[1] for _ in range(2)]
    assert outs[0] == outs[1]
    metrics = {r["metric"] for r in json.loads(outs[0])["rows"]}
    assert {"top1", "mca"} <= metrics


def test_eval_empty_split(capsys, dataset, untrained_ckpt):
    code, _, err = run(capsys, "eval", untrained_ckpt, dataset, "--split", "val")
    assert code == 3 and "empty" in err


def test_eval_geometry_mismatch(tmp_path, capsys, untrained_ckpt):
    other = make_dataset(tmp_path, capsys, "other", tau=3)
    code, _, err = run(capsys, "eval", untrained_ckpt, other)
    assert code == 2 and "tau" in err


def test_retrieve_recall_monotone(capsys, dataset, untrained_ckpt):
    code, out, _ = run(capsys, "retrieve", untrained_ckpt, dataset, "--k", "1", "3", "10")
    assert code == 0
    vals = [r["value"] for r in json.loads(out)["rows"]]
    assert vals == sorted(vals) and vals[-1] == 1.0


# ----------------------------------------------------------------- analyze
def test_analyze_distances_untrained_smoke(capsys, dataset, untrained_ckpt):
    code, out, err = run(capsys, "analyze", untrained_ckpt, dataset, "--which", "distances")
    assert code == 0, err
    rows = json.loads(out)["rows"]
    assert {r["metric"] for r in rows} == {"pose_nonpose_distance", "pose_pose_distance"}
    assert len({r["layer"] for r in rows}) == 3  # two backbone layers and one PAAB


def test_analyze_attention_histograms_sum_to_one(tmp_path, capsys, dataset, untrained_ckpt):
    code, out, _ = run(capsys, "analyze", untrained_ckpt, dataset, "--which", "attention", "--out", tmp_path / "a")
    assert code == 0
    rows = [r for r in json.loads(out)["rows"] if r["metric"] == "attention_histogram"]
    assert rows
    for r in rows:
        assert len(r["value"]) == 10
        assert abs(sum(r["value"]) - 1) < 1e-12
    assert (tmp_path / "a" / "analysis_attention.csv").is_file()


def test_analyze_distances_match_direct_ops(capsys, dataset, untrained_ckpt):
    code, out, _ = run(capsys, "analyze", untrained_ckpt, dataset, "--which", "distances",
                       "--normalize", "none", "--max-clips", "3")
    table = json.loads(out)
    model = checkpoint_load(untrained_ckpt)
    data = prepare(dataset_read(dataset), model.cfg)
    idx = data.where("test")[:3]
    per = {}
    with no_grad():
        for i in idx:
            rec = model(data.videos[i:i + 1].astype(np.float64), data.p2d[i:i + 1], capture=True).records
            for snap in analysis.snapshots_from_records(rec, 0, pose=data.p2d[i:i + 1]):
                per.setdefault(snap.name, []).append(analysis.pose_nonpose_distance(snap, "none"))
    got = {r["layer"]: r["value"] for r in table["rows"] if r["metric"] == "pose_nonpose_distance"}
    assert set(got) == set(per)
    for name, vals in per.items():
        assert got[name] == pytest.approx(float(np.mean(vals)), rel=1e-12)


def test_analyze_needs_keypoints(tmp_path, capsys, dataset, untrained_ckpt):
    for kp in (dataset / "keypoints").iterdir():
        doc = json.loads(kp.read_text())
        doc["points"] = []
        kp.write_text(json.dumps(doc))
    code, _, err = run(capsys, "analyze", untrained_ckpt, dataset, "--which", "distances")
    assert code == 3 and "keypoints" in err


# ------------------------------------------------------------------- align
ALIGN_GEN = dict(GEN, tau=8, height=32, width=32, limb_length=[5.0, 7.0], n_train=6, n_test=3)
ALIGN_MODEL = dict(MODEL, tau=8, height=32, width=32)


def test_align_oracle_zero(tmp_path, capsys):
    data = make_dataset(tmp_path, capsys, "al", task="align", **ALIGN_GEN)
    code, out, _ = run(capsys, "align", data, "--oracle")
    table = json.loads(out)
    assert code == 0 and table["rows"][0]["value"] == 0.0
    assert table["meta"]["source"] == "scene-trajectory"


def test_align_unpaired_episode_lists_ids(tmp_path, capsys, untrained_ckpt):
    data = make_dataset(tmp_path, capsys, "al", task="align", **ALIGN_GEN)
    manifest = json.loads((data / "manifest.json").read_text())
    manifest["samples"] = [e for e in manifest["samples"] if e["id"] != 15]
    (data / "manifest.json").write_text(json.dumps(manifest))
    code, _, err = run(capsys, "align", data, "--oracle")
    assert code == 3 and "[7]" in err


def test_align_trained_beats_untrained_and_repeats(tmp_path, capsys):
    data = make_dataset(tmp_path, capsys, "al", task="align", **dict(ALIGN_GEN, n_train=24))
    cfg = experiment(tmp_path, data, task="align", model=ALIGN_MODEL, epochs=6, batch_size=4,
                     optim={"lr": 2e-3})
    assert run(capsys, "train", cfg, "--out", tmp_path / "run")[0] == 0
    ckpt = tmp_path / "run" / "final.ckpt"
    trained = [run(capsys, "align", data, "--checkpoint", ckpt) for _ in range(2)]
    assert trained[0] == trained[1]
    fresh = run(capsys, "align", data, "--checkpoint", ckpt, "--untrained")
    e_trained = json.loads(trained[0][1])["rows"][0]["value"]
    e_fresh = json.loads(fresh[1])["rows"][0]["value"]
    assert 0 <= e_trained < e_fresh <= 1
