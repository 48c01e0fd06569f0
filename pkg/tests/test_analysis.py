import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poseaware.analysis import (LayerSnapshot, MetricTable, alignment_error, attention_histogram,
                                ffn_displacement, histogram_counts, mean_class_accuracy, pose_nonpose_distance,
                                pose_pose_distance, retrieve)
from poseaware.errors import ShapeError, ValidationError


def euclid(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def ln(v):
    mu = sum(v) / len(v)
    var = sum((x - mu) ** 2 for x in v) / len(v)
    return [(x - mu) / math.sqrt(var + 1e-5) for x in v]


def snap(tokens, pose):
    return LayerSnapshot(layer=1, tokens=np.vstack([np.zeros((1, tokens.shape[1])), tokens]), pose=pose)


# ---------------------------------------------------------- distances
def test_identical_tokens_zero_distance():
    s = snap(np.ones((6, 4)), [1, 0, 1, 0, 0, 1])
    assert pose_nonpose_distance(s) == 0.0
    assert pose_pose_distance(s) == 0.0


def test_two_clusters_at_distance_d():
    tok = np.zeros((6, 3))
    tok[[0, 2]] = [3.0, 4.0, 0.0]  # pose cluster, 5 away from the origin cluster
    s = snap(tok, [1, 0, 1, 0, 0, 0])
    assert pose_nonpose_distance(s) == 5.0
    assert pose_pose_distance(s) == 0.0


@pytest.mark.parametrize("normalize", ["none", "layernorm"])
def test_distances_vs_pair_loops(normalize):
    rng = np.random.default_rng(0)
    tok = rng.normal(size=(20, 5))
    pose = rng.random(20) < 0.4
    s = snap(tok, pose)
    feats = [list(v) if normalize == "none" else ln(list(v)) for v in tok]
    P = [feats[i] for i in range(20) if pose[i]]
    N = [feats[i] for i in range(20) if not pose[i]]
    pn = sum(euclid(a, b) for a in P for b in N) / (len(P) * len(N))
    pairs = [(i, j) for i in range(len(P)) for j in range(i + 1, len(P))]
    pp = sum(euclid(P[i], P[j]) for i, j in pairs) / len(pairs)
    assert abs(pose_nonpose_distance(s, normalize) - pn) < 1e-12
    assert abs(pose_pose_distance(s, normalize) - pp) < 1e-12


def test_cosine_distance_vs_loop():
    rng = np.random.default_rng(1)
    tok = rng.normal(size=(10, 4))
    pose = np.array([1, 1, 0, 0, 1, 0, 0, 0, 1, 0], bool)

    def cdist(a, b):
        return 1 - sum(x * y for x, y in zip(a, b)) / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))

    P, N = tok[pose], tok[~pose]
    expected = sum(cdist(a, b) for a in P for b in N) / (len(P) * len(N))
    assert abs(pose_nonpose_distance(snap(tok, pose), "cosine") - expected) < 1e-12


def test_degenerate_maps_undefined():
    tok = np.random.default_rng(2).normal(size=(4, 3))
    assert math.isnan(pose_nonpose_distance(snap(tok, [1, 1, 1, 1])))
    assert math.isnan(pose_nonpose_distance(snap(tok, [0, 0, 0, 0])))
    assert math.isnan(pose_pose_distance(snap(tok, [0, 1, 0, 0])))


def test_snapshot_shape_checks():
    with pytest.raises(ShapeError):
        LayerSnapshot(layer=1, tokens=np.zeros((5, 3)), pose=[1, 0])


# --------------------------------------------------------- histograms
def test_uniform_attention_single_bin():
    n = 7
    w = np.full((3, n, n), 1.0 / n)
    h = attention_histogram(w, bins=10)
    assert h[1] == 1.0 and h.sum() == 1.0  # 1/7 lies in [0.1, 0.2)


def test_fractions_sum_to_one():
    w = np.random.default_rng(0).dirichlet(np.ones(9), size=(4, 9))
    assert abs(attention_histogram(w, bins=10).sum() - 1) < 1e-9


def test_histogram_counts_vs_direct_loop():
    rng = np.random.default_rng(5)
    w = rng.dirichlet(np.ones(8) * 0.3, size=(2, 8))
    w[0, 3] = 0.0  # a masked row, excluded
    w[1, 0, :2] = [1.0, 0.0]
    w[1, 0, 2:] = 0.0
    edges = np.array([0.0, 0.05, 0.1, 0.25, 0.5, 1.0])
    expected = [0] * 5
    for row in w.reshape(-1, 8):
        if not any(row):
            continue
        for v in row:
            for b in range(5):
                last = b == 4
                if edges[b] <= v < edges[b + 1] or (last and v == 1.0):
                    expected[b] += 1
                    break
    assert histogram_counts(w, edges).tolist() == expected


def test_histogram_snapshot_pools_maps_and_empty_is_nan():
    s = LayerSnapshot(layer=1, tokens=np.zeros((3, 2)),
                      attention={"a": np.full((2, 2), 0.5), "b": np.array([[1.0, 0.0], [0.0, 0.0]])})
    h = attention_histogram(s, bins=2)
    assert h.tolist() == [1 / 6, 5 / 6]
    assert np.isnan(attention_histogram(np.zeros((3, 3)), bins=4)).all()


def test_bad_edges():
    with pytest.raises(ValidationError):
        histogram_counts(np.ones((1, 1)), [0.0, 0.5])


# --------------------------------------------------------------- FFN
def test_ffn_identity_zero():
    x = np.random.default_rng(0).normal(size=(5, 4))
    assert ffn_displacement(x, x.copy()) == 0.0


def test_ffn_constant_shift_norm():
    x = np.random.default_rng(0).normal(size=(5, 4))
    c = np.array([1.0, 2.0, 2.0, 0.0])
    assert abs(ffn_displacement(x, x + c) - 3.0) < 1e-15


def test_ffn_vs_per_token_loop():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(9, 6)), rng.normal(size=(9, 6))
    expected = sum(euclid(a[i], b[i]) for i in range(9)) / 9
    assert abs(ffn_displacement(a, b) - expected) < 1e-12


def test_ffn_shape_mismatch():
    with pytest.raises(ShapeError):
        ffn_displacement(np.zeros((2, 3)), np.zeros((3, 3)))


# ---------------------------------------------------------- retrieval
def recall_oracle(g, gl, q, ql, k, self_exclude):
    hits = 0
    for i in range(len(q)):
        sims = []
        for j in range(len(g)):
            if self_exclude and i == j:
                continue
            s = float(np.dot(q[i], g[j]) / (np.linalg.norm(q[i]) * np.linalg.norm(g[j])))
            sims.append((-s, j))
        top = [j for _, j in sorted(sims)[:k]]
        hits += any(gl[j] == ql[i] for j in top)
    return hits / len(q)


def test_recall_identical_class_features_r1():
    feats = np.repeat(np.eye(4), 3, axis=0)
    labels = np.repeat(np.arange(4), 3)
    assert retrieve(feats, labels, feats, labels, k=1) == 1.0


def test_recall_large_k_reaches_one():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(30, 5))
    labels = rng.permutation(np.repeat(np.arange(3), 10))
    assert retrieve(feats, labels, feats, labels, k=29) == 1.0


@pytest.mark.parametrize("k", [1, 3, 5])
def test_recall_20_items_vs_sort_oracle(k):
    rng = np.random.default_rng(k)
    feats = rng.normal(size=(20, 4))
    labels = rng.integers(4, size=20)
    assert retrieve(feats, labels, feats, labels, k) == recall_oracle(feats, labels, feats, labels, k, True)
    q = rng.normal(size=(7, 4))
    ql = rng.integers(4, size=7)
    assert retrieve(feats, labels, q, ql, k) == recall_oracle(feats, labels, q, ql, k, False)


def test_recall_ties_lowest_index():
    g = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    q = np.array([[2.0, 0.0]])
    assert retrieve(g, [5, 7, 7], q, [7], k=1) == 0.0
    assert retrieve(g, [7, 5, 5], q, [7], k=1) == 1.0


def test_recall_clamps_k_with_warning():
    feats = np.eye(3)
    with pytest.warns(UserWarning):
        assert retrieve(feats, [0, 1, 2], feats, [0, 1, 2], k=10) == 0.0


def test_recall_rejects_bad_input():
    with pytest.raises(ValidationError):
        retrieve(np.eye(2), [0, 1], np.eye(2), [0, 1], k=0)
    with pytest.raises(ValidationError):
        retrieve(np.zeros((0, 2)), [], np.eye(2), [0, 1], k=1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_recall_monotone_in_k(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 40))
    feats = rng.normal(size=(n, 3))
    labels = rng.integers(int(rng.integers(1, 6)), size=n)
    vals = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for k in range(1, n):
            vals.append(retrieve(feats, labels, feats, labels, k))
    assert all(a <= b for a, b in zip(vals, vals[1:]))


# ---------------------------------------------------------- alignment
def test_alignment_identity_zero():
    e = np.random.default_rng(0).normal(size=(8, 4))
    assert alignment_error(e, e.copy()) == 0.0


def test_alignment_reversed_closed_form():
    a = np.arange(8, dtype=float)[:, None]
    assert alignment_error(a, a[::-1]) == pytest.approx(4 / 7, abs=1e-15)


def test_alignment_vs_nn_loop():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
    total = 0
    for i in range(9):
        best = min(range(9), key=lambda j: (sum((a[i] - b[j]) ** 2), j))
        total += abs(i - best)
    assert alignment_error(a, b) == total / 9 / 8
    back = sum(abs(j - min(range(9), key=lambda i: (sum((b[j] - a[i]) ** 2), i))) for j in range(9)) / 9 / 8
    assert alignment_error(a, b, symmetric=True) == pytest.approx(0.5 * (total / 72 + back), abs=1e-15)


def test_alignment_needs_two_frames():
    with pytest.raises(ValidationError):
        alignment_error(np.zeros((1, 3)), np.zeros((1, 3)))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 20))
def test_alignment_in_unit_interval(seed, T):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(T, 3)), rng.normal(size=(T, 3))
    assert 0.0 <= alignment_error(a, b, symmetric=bool(seed % 2)) <= 1.0
    assert alignment_error(a, a) == 0.0


# ---------------------------------------------------------------- mCA
def test_mca_all_correct():
    assert mean_class_accuracy([0, 1, 2, 2], [0, 1, 2, 2]) == 1.0


def test_mca_two_classes_half():
    labels = [0] * 9 + [1]
    preds = [0] * 9 + [0]
    assert mean_class_accuracy(preds, labels) == 0.5


def test_mca_vs_per_class_loop():
    rng = np.random.default_rng(0)
    labels, preds = rng.integers(5, size=60), rng.integers(5, size=60)
    per = []
    for c in sorted(set(labels.tolist())):
        members = [i for i in range(60) if labels[i] == c]
        per.append(sum(preds[i] == c for i in members) / len(members))
    assert mean_class_accuracy(preds, labels) == pytest.approx(sum(per) / len(per), abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_mca_equals_accuracy_with_equal_support(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 5)
    preds = rng.integers(4, size=20)
    assert mean_class_accuracy(preds, labels) == pytest.approx((preds == labels).mean(), abs=1e-12)


def test_mca_empty():
    with pytest.raises(ValidationError):
        mean_class_accuracy([], [])


# --------------------------------------------------------- MetricTable
def test_metric_table_json_and_csv():
    t = MetricTable(meta={"seed": 0})
    t.add("top1", 0.5)
    t.add("hist", [0.25, 0.75], layer=2, aggregate="mean")
    csv_text = t.to_csv()
    assert "hist[0]" in csv_text and "hist[1]" in csv_text
    assert t.to_dict()["meta"] == {"seed": 0}
    assert MetricTable(meta={"seed": 0}, rows=list(t.rows)).to_json() == t.to_json()
