"""Metric suite: mean matching accuracy, homography corner correctness,
match quantization for localization pipelines, and match plotting."""

import json
from dataclasses import dataclass, field, asdict

import cv2
import numpy as np

from .geometry import (HomographyEstimationError, apply_homography,
                       corner_error, estimate_homography_ransac)

MMA_THRESHOLDS = tuple(range(1, 11))
CORNER_THRESHOLDS = (1.0, 3.0, 5.0)


@dataclass
class EvalReport:
    """Aggregate metric results over a set of image pairs."""

    mma: dict = field(default_factory=dict)             # threshold -> accuracy
    homography_acc: dict = field(default_factory=dict)  # threshold -> fraction
    match_count: float = 0.0
    pair_count: int = 0
    per_pair: list = field(default_factory=list)
    runtime_seconds: float = 0.0
    schema_version: int = 1

    def to_json(self, path):
        payload = asdict(self)
        payload["mma"] = {str(k): v for k, v in self.mma.items()}
        payload["homography_acc"] = {str(k): v for k, v in self.homography_acc.items()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)

    def mma_csv(self, path):
        with open(path, "w") as fh:
            fh.write("threshold,accuracy\n")
            for t in sorted(self.mma):
                fh.write(f"{t},{self.mma[t]:.6f}\n")


def transfer_errors(matches, gt):
    """Per-match GT transfer error |gt(p_a) - p_b| in pixels."""
    m = np.atleast_2d(np.asarray(matches, float))
    gt = np.asarray(gt, float)
    if gt.shape == (3, 3):
        mapped = apply_homography(gt, m[:, :2])
    else:
        raise ValueError("dense GT maps are not supported; pass a homography")
    return np.linalg.norm(mapped - m[:, 2:4], axis=1)


def mma(matches, gt, thresholds=MMA_THRESHOLDS):
    """Accuracy curve of one pair: fraction of matches within t pixels.

    An empty match list scores 0 at every threshold.
    """
    if len(matches) == 0:
        return {t: 0.0 for t in thresholds}
    err = transfer_errors(matches, gt)
    return {t: float(np.mean(err <= t)) for t in thresholds}


def aggregate_mma(per_pair_curves, thresholds=MMA_THRESHOLDS):
    """Mean accuracy over pairs; empty input gives a zero curve."""
    if not per_pair_curves:
        return {t: 0.0 for t in thresholds}
    return {t: float(np.mean([c[t] for c in per_pair_curves])) for t in thresholds}


def homography_benchmark(pair_matches, gt_homographies, image_sizes,
                         ransac_threshold=2.0, seed=0,
                         thresholds=CORNER_THRESHOLDS):
    """Corner-correctness fractions over pairs.

    pair_matches: list of (N, 4) arrays. Estimation failures count as
    incorrect at every threshold. Returns (acc dict, per-pair errors).
    """
    errors = []
    for i, (matches, gt, size) in enumerate(zip(pair_matches, gt_homographies, image_sizes)):
        try:
            H_est, _ = estimate_homography_ransac(
                matches, threshold=ransac_threshold, seed=seed + i)
            errors.append(corner_error(H_est, gt, size))
        except HomographyEstimationError:
            errors.append(float("inf"))
    errors = np.array(errors)
    acc = {t: float(np.mean(errors < t)) if len(errors) else 0.0 for t in thresholds}
    return acc, errors


def _greedy_cluster_pass(points, order, radius):
    """One greedy clustering pass; returns each point's cluster id and
    the final cluster means. Points visit in the given order; a point
    joins the first cluster whose running mean is within radius."""
    means, counts = [], []
    assign = np.full(len(points), -1, int)
    for i in order:
        p = points[i]
        placed = False
        for c in range(len(means)):
            if np.linalg.norm(means[c] - p) < radius:
                counts[c] += 1
                means[c] = means[c] + (p - means[c]) / counts[c]
                assign[i] = c
                placed = True
                break
        if not placed:
            means.append(p.astype(float).copy())
            counts.append(1)
            assign[i] = len(means) - 1
    return assign, np.array(means) if means else np.zeros((0, 2))


def _quantize_side(points, order, radius, max_passes=10):
    out = np.asarray(points, float).copy()
    for _ in range(max_passes):
        assign, means = _greedy_cluster_pass(out, order, radius)
        new = means[assign]
        if np.allclose(new, out):
            return new
        out = new
    return out


def quantize_matches(matches, conf_fine, extra_scores=None, radius=4.0):
    """Merge keypoints closer than `radius` into their mean location.

    Each image side clusters independently in descending fine-confidence
    order (greedy running-mean assignment, iterated to a fixpoint so the
    operation is idempotent). Matches whose quantized endpoints coincide
    on both sides collapse to the highest-confidence one.

    Returns (matches, conf_fine, extra_scores) after quantization.
    """
    m = np.atleast_2d(np.asarray(matches, float))
    conf = np.asarray(conf_fine, float)
    if len(m) == 0:
        return m, conf, extra_scores
    order = np.argsort(-conf, kind="stable")
    qa = _quantize_side(m[:, 0:2], order, radius)
    qb = _quantize_side(m[:, 2:4], order, radius)
    q = np.hstack([qa, qb])
    # duplicate collapse: keep the highest fine confidence per quadruple
    seen = {}
    keep = []
    for i in order:
        key = tuple(np.round(q[i], 9))
        if key not in seen:
            seen[key] = True
            keep.append(i)
    keep = np.sort(np.array(keep, int))
    extras = None if extra_scores is None else np.asarray(extra_scores)[keep]
    return q[keep], conf[keep], extras


def confidence_color(c):
    """BGR ramp from red (0) through yellow to green (1)."""
    c = float(np.clip(c, 0.0, 1.0))
    return (0, int(round(255 * c)), int(round(255 * (1.0 - c))))


def visualize_matches(image_a, image_b, matches, confidences=None,
                      out_path=None):
    """Side-by-side pair with confidence-colored match lines.

    Deterministic: identical inputs produce byte-identical files.
    """
    ha, wa = image_a.shape[:2]
    hb, wb = image_b.shape[:2]
    canvas = np.zeros((max(ha, hb), wa + wb, 3), np.uint8)
    canvas[:ha, :wa] = image_a if image_a.ndim == 3 else image_a[..., None]
    canvas[:hb, wa:wa + wb] = image_b if image_b.ndim == 3 else image_b[..., None]
    m = np.atleast_2d(np.asarray(matches, float)) if len(matches) else np.zeros((0, 4))
    if confidences is None:
        confidences = np.ones(len(m))
    for i in range(len(m)):
        pa = (int(round(m[i, 0])), int(round(m[i, 1])))
        pb = (int(round(m[i, 2])) + wa, int(round(m[i, 3])))
        color = confidence_color(confidences[i])
        cv2.line(canvas, pa, pb, color, 1, lineType=cv2.LINE_8)
        cv2.circle(canvas, pa, 2, color, -1, lineType=cv2.LINE_8)
        cv2.circle(canvas, pb, 2, color, -1, lineType=cv2.LINE_8)
    if out_path is not None:
        cv2.imwrite(out_path, canvas)
    return canvas
