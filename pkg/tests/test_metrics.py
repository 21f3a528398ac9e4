"""Overlap metrics, HD95 and dataset aggregation."""

import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mambalite.metrics import ConfusionCounts, MetricsRecord, aggregate, binarize, boundary, confusion, \
    evaluate_dataset, evaluate_pair, hd95, overlap_metrics, read_metrics_csv, write_aggregate_csv, \
    write_metrics_csv


def loop_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def loop_boundary(m):
    H, W = m.shape
    pts = []
    for i in range(H):
        for j in range(W):
            if not m[i, j]:
                continue
            for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                a, b = i + di, j + dj
                if not (0 <= a < H and 0 <= b < W) or not m[a, b]:
                    pts.append((i, j))
                    break
    return pts


def brute_hd95(gt, pred):
    if not gt.any() and not pred.any():
        return 0.0
    if not gt.any() or not pred.any():
        return math.hypot(*gt.shape)
    bg, bp = loop_boundary(gt), loop_boundary(pred)
    d1 = [min(math.dist(a, b) for b in bp) for a in bg]
    d2 = [min(math.dist(a, b) for b in bg) for a in bp]
    pooled = sorted(d1 + d2)
    # linear interpolation between order statistics
    pos = 0.95 * (len(pooled) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(pooled) - 1)
    return pooled[lo] + (pooled[hi] - pooled[lo]) * (pos - lo)


def random_pair(rng, size):
    p = rng.uniform(0.05, 0.7)
    return (rng.random((size, size)) < p).astype(np.uint8), (rng.random((size, size)) < p).astype(np.uint8)


class TestBinarize:
    def test_ties_go_to_foreground(self):
        assert binarize(np.array([0.5, 0.4999, 1.0, 0.0])).tolist() == [1, 0, 1, 0]

    @given(arrays(np.uint8, (5, 5), elements=st.sampled_from([0, 1])))
    def test_idempotent(self, m):
        assert np.array_equal(binarize(m), m)


class TestConfusion:
    def test_examples(self):
        assert confusion(np.ones(4), np.ones(4)) == ConfusionCounts(4, 0, 0, 0)
        assert confusion(np.ones(4), np.zeros(4)) == ConfusionCounts(0, 4, 0, 0)
        assert confusion([1, 1, 1, 0], [1, 1, 0, 1]) == ConfusionCounts(2, 1, 1, 0)

    def test_errors(self):
        with pytest.raises(ValueError):
            confusion(np.ones(4), np.ones(5))
        with pytest.raises(ValueError):
            confusion(np.full(4, 0.5), np.ones(4))

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            pred, gt = random_pair(rng, 32)
            c = confusion(pred, gt)
            assert (c.tp, c.fp, c.fn, c.tn) == loop_confusion(pred, gt)


class TestOverlap:
    def test_example(self):
        m = overlap_metrics(ConfusionCounts(2, 1, 1, 0))
        assert m["iou"] == 0.5
        assert m["dsc"] == pytest.approx(2 / 3, abs=1e-15)

    def test_perfect_and_vacuous(self):
        m = overlap_metrics(ConfusionCounts(5, 0, 0, 3))
        assert m["iou"] == m["dsc"] == m["ac"] == 1
        assert overlap_metrics(ConfusionCounts(0, 0, 0, 9)) == {"iou": 1, "dsc": 1, "ac": 1, "se": 1, "sp": 1}

    @given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
    def test_identities(self, tp, fp, fn, tn):
        m = overlap_metrics(ConfusionCounts(tp, fp, fn, tn))
        assert all(0 <= v <= 1 for v in m.values())
        assert m["dsc"] >= m["iou"]
        if tp + fp + fn:
            iou = Fraction(tp, tp + fp + fn)
            assert Fraction(2 * tp, 2 * tp + fp + fn) == 2 * iou / (1 + iou)
            assert m["dsc"] == pytest.approx(2 * m["iou"] / (1 + m["iou"]), rel=1e-15, abs=0)

    def test_loop_oracle(self):
        rng = np.random.default_rng(12)
        for _ in range(100):
            pred, gt = random_pair(rng, 32)
            tp, fp, fn, tn = loop_confusion(pred, gt)
            m = overlap_metrics(confusion(pred, gt))
            assert m["ac"] == (tp + tn) / (tp + fp + fn + tn)
            assert m["se"] == (tp / (tp + fn) if tp + fn else 1.0)
            assert m["sp"] == (tn / (tn + fp) if tn + fp else 1.0)


class TestHD95:
    def test_identical(self, rng):
        m = (rng.random((16, 16)) > 0.5).astype(np.uint8)
        assert hd95(m, m) == 0

    def test_single_pixels(self):
        a, b = np.zeros((8, 8), np.uint8), np.zeros((8, 8), np.uint8)
        a[0, 0] = 1
        b[3, 4] = 1
        assert hd95(a, b) == 5.0

    def test_empty_conventions(self):
        z, one = np.zeros((3, 4), np.uint8), np.zeros((3, 4), np.uint8)
        one[1, 1] = 1
        assert hd95(z, z) == 0
        assert hd95(z, one) == hd95(one, z) == 5.0

    def test_boundary_oracle(self, rng):
        for _ in range(20):
            m = (rng.random((12, 9)) > 0.4).astype(np.uint8)
            assert sorted(map(tuple, np.argwhere(boundary(m)).tolist())) == loop_boundary(m)

    def test_all_pairs_oracle(self):
        rng = np.random.default_rng(13)
        for i in range(100):
            gt, pred = random_pair(rng, 32)
            assert abs(hd95(gt, pred) - brute_hd95(gt, pred)) < 1e-9

    @pytest.mark.parametrize("size", [40, 48])
    def test_large_masks(self, size):
        rng = np.random.default_rng(size)
        gt, pred = random_pair(rng, size)
        assert abs(hd95(gt, pred) - brute_hd95(gt, pred)) < 1e-9

    def test_symmetric(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            gt, pred = random_pair(rng, 24)
            assert hd95(gt, pred) == hd95(pred, gt)

    def test_directed_variant_bounds_pooled(self):
        rng = np.random.default_rng(15)
        gt, pred = random_pair(rng, 24)
        assert hd95(gt, pred, pooled=False) >= hd95(gt, pred) - 1e-12


class TestAggregation:
    def rec(self, sid, iou):
        return MetricsRecord(sid, iou, 2 * iou / (1 + iou), 1.0, 1.0, 1.0, 0.0)

    def test_perfect_sample(self):
        agg = aggregate([evaluate_pair(np.ones((4, 4)), np.ones((4, 4)), "a")])
        assert agg["iou"] == {"mean": 1.0, "sd": 0.0}

    def test_population_sd(self):
        agg = aggregate([self.rec("a", 0.4), self.rec("b", 0.6)])
        assert agg["iou"]["mean"] == pytest.approx(0.5, abs=1e-15)
        assert agg["iou"]["sd"] == pytest.approx(0.1, abs=1e-15)

    def test_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_csv_roundtrip(self, tmp_path):
        recs = [self.rec(f"s{i}", v) for i, v in enumerate((0.1, 0.35, 0.8))]
        path = str(tmp_path / "m.csv")
        write_metrics_csv(path, recs)
        assert open(path).readline().strip() == "sample_id,iou,dsc,ac,se,sp,hd95"
        back = read_metrics_csv(path)
        assert back == recs
        assert aggregate(back) == aggregate(recs)
        write_aggregate_csv(str(tmp_path / "a.csv"), aggregate(recs))
        lines = open(tmp_path / "a.csv").read().splitlines()
        assert lines[0].startswith("sample_id,") and lines[1].startswith("mean,") and lines[2].startswith("sd,")

    def test_evaluate_dataset_order(self):
        from mambalite.data_io import Sample
        from mambalite.net import ModelConfig, build_model

        model = build_model(ModelConfig(input_size=(32, 32)), seed=0)
        rng = np.random.default_rng(0)
        samples = [Sample(f"id{i}", rng.random((3, 32, 32)).astype(np.float32),
                          (rng.random((1, 32, 32)) > 0.5).astype(np.float32)) for i in range(3)]
        recs, agg = evaluate_dataset(model, samples, batch_size=2)
        assert [r.sample_id for r in recs] == ["id0", "id1", "id2"]
        assert agg == aggregate(recs)
