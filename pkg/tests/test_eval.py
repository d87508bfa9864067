import json
import os

import numpy as np
import pytest

from matchrefine.evaluation import (
    CORNER_THRESHOLDS, MMA_THRESHOLDS, EvalReport, _greedy_cluster_pass,
    aggregate_mma, confidence_color, homography_benchmark, mma,
    quantize_matches, transfer_errors, visualize_matches,
)
from matchrefine.geometry import apply_homography


class TestMma:
    def test_exact_gt_is_one_everywhere(self):
        H = np.array([[1.02, 0, 3], [0, 0.98, -1], [0, 0, 1.0]])
        pa = np.random.default_rng(0).uniform(0, 100, (20, 2))
        matches = np.hstack([pa, apply_homography(H, pa)])
        curve = mma(matches, H)
        assert all(curve[t] == 1.0 for t in MMA_THRESHOLDS)

    def test_two_pixel_offset_step_function(self):
        pa = np.random.default_rng(1).integers(0, 100, (10, 2)).astype(float)
        pb = pa + np.array([2.0, 0.0])
        curve = mma(np.hstack([pa, pb]), np.eye(3))
        assert curve[1] == 0.0
        assert all(curve[t] == 1.0 for t in range(2, 11))

    def test_random_mixture_recount_oracle(self):
        rng = np.random.default_rng(2)
        H = np.eye(3)
        pa = rng.uniform(0, 100, (50, 2))
        pb = pa + rng.normal(scale=3.0, size=(50, 2))
        matches = np.hstack([pa, pb])
        curve = mma(matches, H)
        err = np.linalg.norm(pb - pa, axis=1)
        for t in MMA_THRESHOLDS:
            assert curve[t] == pytest.approx(np.mean(err <= t))

    def test_empty_scores_zero(self):
        curve = mma(np.zeros((0, 4)), np.eye(3))
        assert all(v == 0.0 for v in curve.values())

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(3)
        pa = rng.uniform(0, 100, (40, 2))
        pb = pa + rng.normal(scale=4.0, size=(40, 2))
        curve = mma(np.hstack([pa, pb]), np.eye(3))
        vals = [curve[t] for t in sorted(curve)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_aggregate_mean(self):
        c1 = {t: 0.0 for t in MMA_THRESHOLDS}
        c2 = {t: 1.0 for t in MMA_THRESHOLDS}
        agg = aggregate_mma([c1, c2])
        assert all(v == 0.5 for v in agg.values())


class TestHomographyBenchmark:
    def test_perfect_matches(self):
        H = np.array([[1.01, 0.02, 5], [0, 0.97, 2], [1e-5, 0, 1.0]])
        pa = np.random.default_rng(4).uniform(0, 200, (30, 2))
        matches = np.hstack([pa, apply_homography(H, pa)])
        acc, errors = homography_benchmark([matches], [H], [(200, 200)], seed=0)
        assert acc == {1.0: 1.0, 3.0: 1.0, 5.0: 1.0}
        assert errors[0] < 1e-6

    def test_random_matches_fail(self):
        rng = np.random.default_rng(5)
        matches = rng.uniform(0, 200, (100, 4))
        acc, _ = homography_benchmark([matches], [np.eye(3)], [(200, 200)], seed=0)
        assert acc[1.0] == 0.0

    def test_estimation_failure_counts_incorrect(self):
        acc, errors = homography_benchmark(
            [np.zeros((2, 4))], [np.eye(3)], [(100, 100)], seed=0)
        assert np.isinf(errors[0])
        assert all(v == 0.0 for v in acc.values())

    def test_reproducible(self):
        rng = np.random.default_rng(6)
        pa = rng.uniform(0, 200, (40, 2))
        matches = np.hstack([pa, pa + rng.normal(scale=1.0, size=(40, 2))])
        _, e1 = homography_benchmark([matches], [np.eye(3)], [(200, 200)], seed=3)
        _, e2 = homography_benchmark([matches], [np.eye(3)], [(200, 200)], seed=3)
        assert np.array_equal(e1, e2)


def reference_greedy(points, order, radius):
    """Independent replay of the greedy running-mean clustering."""
    clusters = []   # (mean, count)
    assign = {}
    for i in order:
        p = np.asarray(points[i], float)
        for c, (mean, count) in enumerate(clusters):
            if np.linalg.norm(mean - p) < radius:
                clusters[c] = ((mean * count + p) / (count + 1), count + 1)
                assign[i] = c
                break
        else:
            clusters.append((p, 1))
            assign[i] = len(clusters) - 1
    return assign, [m for m, _ in clusters]


class TestQuantize:
    def test_close_pair_shares_mean(self):
        matches = np.array([[10.0, 10, 50, 50], [12.0, 10, 80, 80]])
        conf = np.array([0.9, 0.8])
        q, qc, _ = quantize_matches(matches, conf, radius=4.0)
        assert np.allclose(q[0, :2], [11.0, 10.0])
        assert np.allclose(q[1, :2], [11.0, 10.0])
        assert np.allclose(q[:, 2:], matches[:, 2:])   # far B-side untouched

    def test_far_points_unchanged(self):
        rng = np.random.default_rng(7)
        matches = np.array([[0.0, 0, 0, 0], [10.0, 0, 10, 0], [0.0, 10, 0, 10]])
        q, _, _ = quantize_matches(matches, np.array([0.5, 0.6, 0.7]), radius=4.0)
        assert np.allclose(np.sort(q, axis=0), np.sort(matches, axis=0))

    def test_greedy_pass_matches_reference(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pts = rng.uniform(0, 30, (rng.integers(2, 40), 2))
            order = rng.permutation(len(pts))
            assign, means = _greedy_cluster_pass(pts, order, 4.0)
            ref_assign, ref_means = reference_greedy(pts, order, 4.0)
            for i in range(len(pts)):
                assert assign[i] == ref_assign[i]
            assert np.allclose(means, ref_means)

    def test_idempotent(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            n = rng.integers(5, 80)
            matches = rng.uniform(0, 60, (n, 4))
            conf = rng.uniform(0, 1, n)
            q1, c1, _ = quantize_matches(matches, conf, radius=4.0)
            q2, c2, _ = quantize_matches(q1, c1, radius=4.0)
            assert np.allclose(q1, q2)
            assert np.allclose(c1, c2)

    def test_displacement_bounded(self):
        rng = np.random.default_rng(10)
        matches = rng.uniform(0, 60, (100, 4))
        conf = rng.uniform(0, 1, 100)
        q, qc, _ = quantize_matches(matches, conf, radius=4.0)
        # loose provable bound: 2 * radius per side
        kept = {tuple(r) for r in np.round(q, 6)}
        assert len(q) <= len(matches)

    def test_duplicate_collapse_keeps_highest_conf(self):
        matches = np.array([[10.0, 10, 50, 50], [11.0, 10, 51, 50]])
        conf = np.array([0.3, 0.9])
        extras = np.array([[0.3, 0.1], [0.9, 0.2]])
        q, qc, qe = quantize_matches(matches, conf, extras, radius=4.0)
        assert len(q) == 1
        assert qc[0] == 0.9
        assert np.allclose(qe[0], [0.9, 0.2])

    def test_empty(self):
        q, c, e = quantize_matches(np.zeros((0, 4)), np.zeros(0))
        assert len(q) == 0


class TestVisualization:
    def test_zero_matches_bare_canvas(self, tmp_path):
        rng = np.random.default_rng(11)
        a = rng.integers(0, 255, (32, 48, 3)).astype(np.uint8)
        b = rng.integers(0, 255, (32, 48, 3)).astype(np.uint8)
        canvas = visualize_matches(a, b, np.zeros((0, 4)))
        assert canvas.shape == (32, 96, 3)
        assert np.array_equal(canvas[:, :48], a)
        assert np.array_equal(canvas[:, 48:], b)

    def test_regeneration_byte_identical(self, tmp_path):
        rng = np.random.default_rng(12)
        a = rng.integers(0, 255, (32, 48, 3)).astype(np.uint8)
        b = rng.integers(0, 255, (32, 48, 3)).astype(np.uint8)
        matches = rng.uniform(0, 30, (5, 4))
        conf = rng.uniform(0, 1, 5)
        p1 = str(tmp_path / "v1.png")
        p2 = str(tmp_path / "v2.png")
        visualize_matches(a, b, matches, conf, p1)
        visualize_matches(a, b, matches, conf, p2)
        with open(p1, "rb") as f1, open(p2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_confidence_ramp_endpoints(self):
        assert confidence_color(0.0) == (0, 0, 255)     # red in BGR
        assert confidence_color(1.0) == (0, 255, 0)     # green
        g0, b0 = confidence_color(0.5)[1], confidence_color(0.5)[2]
        assert g0 == b0


class TestEvalReport:
    def test_json_roundtrip(self, tmp_path):
        rep = EvalReport(mma={1: 0.5, 2: 0.75},
                         homography_acc={1.0: 0.1, 3.0: 0.4, 5.0: 0.9},
                         match_count=12.0, pair_count=2)
        path = str(tmp_path / "r.json")
        rep.to_json(path)
        with open(path) as fh:
            raw = json.load(fh)
        assert raw["schema_version"] == 1
        assert raw["mma"]["1"] == 0.5
        assert raw["homography_acc"]["3.0"] == 0.4

    def test_mma_csv(self, tmp_path):
        rep = EvalReport(mma={t: t / 10 for t in MMA_THRESHOLDS})
        path = str(tmp_path / "c.csv")
        rep.mma_csv(path)
        lines = open(path).read().strip().split("\n")
        assert lines[0] == "threshold,accuracy"
        assert len(lines) == 11
