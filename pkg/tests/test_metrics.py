import csv
from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from adarecon.metrics import (METRIC_COLUMNS, UndefinedMetric, auroc, average_precision, config_hash,
                              evaluate, f1_max, format_report, pro, write_metrics_csv)


# -- brute-force oracles ---------------------------------------------------

def auroc_oracle(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def sweep(s, y):
    """(tp, fp) for every distinct threshold, from high to low, by counting."""
    out = []
    for thr in sorted(set(s), reverse=True):
        tp = sum(1 for a, l in zip(s, y) if a >= thr and l == 1)
        fp = sum(1 for a, l in zip(s, y) if a >= thr and l == 0)
        out.append((tp, fp))
    return out


def ap_oracle(s, y):
    n_pos = sum(y)
    total, prev_recall = 0.0, 0.0
    for tp, fp in sweep(s, y):
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / (tp + fp))
        prev_recall = recall
    return total


def f1_oracle(s, y):
    n_pos = sum(y)
    best = 0.0
    for tp, fp in sweep(s, y):
        fn = n_pos - tp
        best = max(best, 2 * tp / (2 * tp + fp + fn))
    return best


def components_bfs(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    comps = []
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                comp, queue = [], deque([(i, j)])
                seen[i, j] = True
                while queue:
                    a, b = queue.popleft()
                    comp.append((a, b))
                    for da in (-1, 0, 1):
                        for db in (-1, 0, 1):
                            u, v = a + da, b + db
                            if 0 <= u < h and 0 <= v < w and mask[u, v] and not seen[u, v]:
                                seen[u, v] = True
                                queue.append((u, v))
                comps.append(comp)
    return comps


def pro_oracle(maps, masks, limit=0.3):
    comps, negs = [], []
    for m, g in zip(maps, masks):
        for comp in components_bfs(g > 0):
            comps.append([m[a, b] for a, b in comp])
        negs.extend(m[~(g > 0)].tolist())
    values = sorted(set(np.concatenate([np.ravel(m) for m in maps]).tolist()), reverse=True)
    pts = [(0.0, 0.0)]
    for thr in values:
        fpr = sum(1 for v in negs if v >= thr) / len(negs)
        ov = sum(sum(1 for v in c if v >= thr) / len(c) for c in comps) / len(comps)
        pts.append((fpr, ov))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        if x0 >= limit:
            break
        if x1 > limit:
            y1 = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
            x1 = limit
        area += (x1 - x0) * (y0 + y1) / 2
    return area / limit


def random_instance(rng, n_max=100, ties=True):
    n = int(rng.integers(2, n_max + 1))
    y = rng.integers(0, 2, size=n)
    y[0], y[1] = 0, 1
    s = rng.integers(0, 6, size=n).astype(float) if ties and rng.random() < 0.5 else rng.normal(size=n)
    return s, y


# -- examples --------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auroc([1, 2, 3], [0, 1, 1]) == 1.0
    assert auroc([3, 2, 1], [0, 1, 1]) == 0.0
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5


def test_ap_and_f1_examples():
    s, y = [0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0]
    assert average_precision(s, y) == pytest.approx(0.5 * 1 + 0.5 * (2 / 3), abs=1e-15)
    assert f1_max(s, y) == pytest.approx(0.8, abs=1e-15)
    assert average_precision([1, 1], [1, 0]) == 0.5


def test_undefined_metrics():
    with pytest.raises(UndefinedMetric):
        auroc([1, 2], [1, 1])
    with pytest.raises(UndefinedMetric):
        average_precision([1, 2], [0, 0])
    with pytest.raises(UndefinedMetric):
        f1_max([1, 2], [0, 0])
    with pytest.raises(UndefinedMetric):
        pro([np.zeros((4, 4))], [np.zeros((4, 4))])


def test_bad_labels_rejected():
    with pytest.raises(ValueError):
        auroc([1, 2, 3], [0, 1, 2])
    with pytest.raises(ValueError):
        auroc([1, 2, 3], [0, 1])


def test_pro_perfect_and_inverted_maps():
    g = np.zeros((6, 6), np.uint8)
    g[1:3, 1:3] = 1
    g[4, 4] = 1
    assert pro([g.astype(float)], [g]) == 1.0
    assert pro([1.0 - g], [g]) == pytest.approx(0.0, abs=1e-12)


def test_pro_uses_eight_connectivity():
    g = np.zeros((5, 5), np.uint8)
    g[1, 1] = g[2, 2] = 1  # diagonal neighbours: one region
    m = np.zeros((5, 5))
    m[1, 1] = 1.0
    # one region half covered at the top threshold vs two regions (one full, one empty)
    assert len(components_bfs(g > 0)) == 1
    assert pro([m], [g]) == pytest.approx(pro_oracle([m], [g]), abs=1e-12)


# -- oracle sweeps ---------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_image_metrics_match_bruteforce(seed):
    s, y = random_instance(np.random.default_rng(seed))
    assert auroc(s, y) == pytest.approx(auroc_oracle(s, y), abs=1e-9)
    assert average_precision(s, y) == pytest.approx(ap_oracle(s, y), abs=1e-9)
    assert f1_max(s, y) == pytest.approx(f1_oracle(s, y), abs=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_auroc_complement_identity_is_exact(seed):
    s, y = random_instance(np.random.default_rng(seed))
    a = auroc(s, y)
    assert a + auroc(s, 1 - y) == 1.0
    assert auroc(-np.asarray(s), y) + a == 1.0


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pro_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    maps, masks = [], []
    for _ in range(int(rng.integers(1, 3))):
        h, w = (int(v) for v in rng.integers(2, 9, size=2))
        g = (rng.random((h, w)) < 0.3).astype(np.uint8)
        m = rng.integers(0, 5, size=(h, w)).astype(float) if rng.random() < 0.5 else rng.random((h, w))
        maps.append(m)
        masks.append(g)
    if sum(g.sum() for g in masks) == 0:
        masks[0][0, 0] = 1
    if sum((g == 0).sum() for g in masks) == 0:
        masks[0][0, 0] = 0
        if sum(g.sum() for g in masks) == 0:
            masks[0].flat[-1] = 1
    assert pro(maps, masks) == pytest.approx(pro_oracle(maps, masks), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_cross_check_against_sklearn(seed):
    s, y = random_instance(np.random.default_rng(seed))
    assert auroc(s, y) == pytest.approx(roc_auc_score(y, s), abs=1e-12)
    assert average_precision(s, y) == pytest.approx(average_precision_score(y, s), abs=1e-12)


# -- reports ---------------------------------------------------------------

def test_evaluate_and_csv(tmp_path):
    masks = [np.zeros((4, 4), np.uint8), np.eye(4, dtype=np.uint8)]
    maps = [m.astype(float) for m in masks]
    rep = evaluate([0.1, 0.9], [0, 1], maps, masks, category="c", config={"a": 1})
    assert all(v == 1.0 for v in rep.values.values())
    rep2 = evaluate([0.1, 0.2], [0, 0], category="d", config={"a": 1})
    assert rep2["I-AUROC"] is None and rep2["PRO"] is None
    path = tmp_path / "m.csv"
    write_metrics_csv([rep, rep2], path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[1][4] == "1.000000"
    assert rows[2][4] == "undefined"
    assert rows[-1][1] == "average"
    assert "undefined" in format_report(rep2)


def test_config_hash_is_order_independent():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
