"""Stage-one match proposal sources.

Three ways to obtain patch-level proposals: the consensus correlation
matcher (correlate last-level features, 4D max-pool, 4D consensus
filter, mutual-max), an oracle that jitters ground-truth matches, and a
match-file ingestion path for external matchers.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fileio import load_matches
from .geometry import gt_correspondences_from_homography


class EmptyOracleError(RuntimeError):
    """No ground-truth correspondences available for the oracle."""


@dataclass
class ProposalSet:
    """Patch-level candidate matches with optional [0, 1] scores."""

    matches: np.ndarray                      # (N, 4) image coordinates
    scores: Optional[np.ndarray] = None      # (N,) or None when unscored
    source: str = "external"                 # nc | oracle | external
    downscale: int = 1                       # grid factor of the producer
    parent_index: Optional[np.ndarray] = None  # expansion bookkeeping

    def __len__(self):
        return len(self.matches)


def conv4d(x, kernel):
    """4D convolution of a (ha, wa, hb, wb) tensor with a 3^4 kernel.

    Zero padding of 1 on every axis; implemented as a shift-and-sum,
    which is cheap on the pooled correlation sizes used here.
    """
    ha, wa, hb, wb = x.shape
    p = F.pad(x, (1, 1, 1, 1, 1, 1, 1, 1))
    out = torch.zeros_like(x)
    for i in range(3):
        for j in range(3):
            for u in range(3):
                for v in range(3):
                    out = out + kernel[i, j, u, v] * p[i:i + ha, j:j + wa, u:u + hb, v:v + wb]
    return out


def maxpool4d(corr, k=2):
    """Window-k max pool over all four axes, retaining argmax offsets.

    Returns (pooled, offsets) where offsets is (ha', wa', hb', wb', 4)
    holding the in-window (dy_a, dx_a, dy_b, dx_b) of each maximum.
    Trailing odd rows/columns are ignored, as in standard max pooling.
    """
    ha, wa, hb, wb = corr.shape
    if min(ha, wa, hb, wb) < k:
        raise ValueError(f"correlation map {corr.shape} smaller than pooling window {k}")
    ha2, wa2, hb2, wb2 = ha // k, wa // k, hb // k, wb // k
    c = corr[:ha2 * k, :wa2 * k, :hb2 * k, :wb2 * k]
    c = c.reshape(ha2, k, wa2, k, hb2, k, wb2, k)
    c = c.permute(0, 2, 4, 6, 1, 3, 5, 7).reshape(ha2, wa2, hb2, wb2, k ** 4)
    pooled, idx = c.max(dim=-1)
    dy_a = idx // (k ** 3)
    dx_a = (idx // (k ** 2)) % k
    dy_b = (idx // k) % k
    dx_b = idx % k
    offsets = torch.stack([dy_a, dx_a, dy_b, dx_b], dim=-1)
    return pooled, offsets


def normalize_scores(consensus):
    """Ratio-to-max normalization in both matching directions.

    Rectified consensus values are divided by their per-source and
    per-target maxima and multiplied, giving scores in [0, 1] where 1
    means mutually strongest.
    """
    r = torch.relu(consensus)
    eps = 1e-12
    max_b = r.amax(dim=(2, 3), keepdim=True)
    max_a = r.amax(dim=(0, 1), keepdim=True)
    return (r / (max_b + eps)) * (r / (max_a + eps))


class ConsensusMatcher(nn.Module):
    """Correlation matcher with a learnable 4D consensus filter.

    The filter is applied symmetrically (to the correlation tensor and
    to its source/target transpose) so the re-scoring does not prefer
    either image. Initialized to the identity tap, which reduces the
    matcher to plain mutual nearest neighbors until fitted.
    """

    def __init__(self):
        super().__init__()
        kernel = torch.zeros(3, 3, 3, 3)
        kernel[1, 1, 1, 1] = 1.0
        self.kernel = nn.Parameter(kernel)

    def correlation(self, feat_a, feat_b):
        """Normalized 4D correlation of (C, h, w) feature maps."""
        ca, ha, wa = feat_a.shape
        cb, hb, wb = feat_b.shape
        fa = F.normalize(feat_a.reshape(ca, -1), dim=0)
        fb = F.normalize(feat_b.reshape(cb, -1), dim=0)
        return (fa.t() @ fb).reshape(ha, wa, hb, wb)

    def score_map(self, feat_a, feat_b):
        """Pooled, consensus-filtered, normalized score tensor + offsets."""
        corr = self.correlation(feat_a, feat_b)
        pooled, offsets = maxpool4d(corr, k=2)
        cons = conv4d(pooled, self.kernel)
        cons = cons + conv4d(pooled.permute(2, 3, 0, 1), self.kernel).permute(2, 3, 0, 1)
        return normalize_scores(cons), offsets


def mutual_argmax(scores):
    """Mutually-best cell pairs of a 4D score tensor.

    Returns integer arrays (M, 4) of (ya, xa, yb, xb) cells and their
    scores. Ties resolve to the lowest linear index (torch.argmax).
    """
    ha, wa, hb, wb = scores.shape
    flat = scores.reshape(ha * wa, hb * wb)
    best_b = flat.argmax(dim=1)
    best_a = flat.argmax(dim=0)
    rows = torch.arange(ha * wa, device=flat.device)
    mutual = best_a[best_b] == rows
    ia = rows[mutual]
    ib = best_b[mutual]
    cells = torch.stack([ia // wa, ia % wa, ib // wb, ib % wb], dim=1)
    return cells, flat[ia, ib]


def nc_match(pyr_a, pyr_b, score_threshold=0.9, matcher: ConsensusMatcher = None):
    """Patch-level proposals from the last pyramid levels.

    Pass score_threshold=None (or 0) to keep every mutual match, as done
    during training. Coordinates are the upper-left corners of the
    matched patches at image resolution (multiples of the downscale).
    """
    if matcher is None:
        matcher = ConsensusMatcher()
    feat_a, feat_b = pyr_a.maps[-1], pyr_b.maps[-1]
    downscale = pyr_a.downscales[-1]
    with torch.no_grad():
        scores, offsets = matcher.score_map(feat_a, feat_b)
        cells, cell_scores = mutual_argmax(scores)
    if len(cells) == 0:
        return ProposalSet(np.zeros((0, 4)), np.zeros(0), source="nc", downscale=downscale)
    off = offsets[cells[:, 0], cells[:, 1], cells[:, 2], cells[:, 3]]
    ya = 2 * cells[:, 0] + off[:, 0]
    xa = 2 * cells[:, 1] + off[:, 1]
    yb = 2 * cells[:, 2] + off[:, 2]
    xb = 2 * cells[:, 3] + off[:, 3]
    matches = torch.stack([xa, ya, xb, yb], dim=1).double().numpy() * downscale
    scores_np = cell_scores.double().numpy()
    if score_threshold:
        keep = scores_np >= score_threshold
        matches, scores_np = matches[keep], scores_np[keep]
    return ProposalSet(matches, scores_np, source="nc", downscale=downscale)


def consensus_labels_from_homography(H, shape_a, shape_b, cell_pixels):
    """Binary 4D label tensor: pooled cell pairs consistent with H.

    A pair is positive when the mapped center of the source cell lands
    within one cell of the target cell center.
    """
    ha, wa = shape_a
    hb, wb = shape_b
    ys, xs = np.meshgrid(np.arange(ha), np.arange(wa), indexing="ij")
    centers = np.stack([(xs.ravel() + 0.5) * cell_pixels,
                        (ys.ravel() + 0.5) * cell_pixels], axis=1)
    from .geometry import apply_homography
    mapped = apply_homography(H, centers) / cell_pixels - 0.5
    labels = torch.zeros(ha, wa, hb, wb)
    for idx in range(len(centers)):
        mx, my = mapped[idx]
        jb, ib = int(round(mx)), int(round(my))
        if 0 <= ib < hb and 0 <= jb < wb and abs(mx - jb) <= 1 and abs(my - ib) <= 1:
            labels[ys.ravel()[idx], xs.ravel()[idx], ib, jb] = 1.0
    return labels


def fit_consensus_kernel(matcher, examples, steps=50, lr=1e-2):
    """Fit the 4D consensus filter against known cell correspondences.

    examples: list of (feat_a, feat_b, labels) where labels is the 4D
    binary tensor from consensus_labels_from_homography at the pooled
    resolution. Returns the per-step loss curve.
    """
    opt = torch.optim.Adam(matcher.parameters(), lr=lr)
    curve = []
    for _ in range(steps):
        opt.zero_grad()
        total = 0.0
        for feat_a, feat_b, labels in examples:
            scores, _ = matcher.score_map(feat_a, feat_b)
            scores = scores.clamp(1e-6, 1 - 1e-6)
            pos = labels > 0.5
            w = max(float((~pos).sum()) / max(float(pos.sum()), 1.0), 1.0)
            bce = -(w * labels * torch.log(scores)
                    + (1 - labels) * torch.log(1 - scores)).mean()
            total = total + bce
        total.backward()
        opt.step()
        curve.append(float(total.detach()))
    return curve


def oracle_match(gt, n, jitter=12, image_size=None, seed=0):
    """Proposals from jittered ground-truth correspondences.

    gt: a 3x3 homography (dense GT derived on the pixel grid) or an
    (M, 4) array of GT matches. Each endpoint of a sampled match moves
    by an integer offset inside the jitter x jitter box centered at the
    GT location (offsets in [-jitter//2, jitter - jitter//2 - 1]) and is
    clamped to image bounds.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    gt = np.asarray(gt, float)
    if gt.shape == (3, 3):
        if image_size is None:
            raise ValueError("image_size required with a homography GT")
        gt_matches = gt_correspondences_from_homography(gt, 1, image_size)
    else:
        gt_matches = np.atleast_2d(gt)
    if len(gt_matches) == 0:
        raise EmptyOracleError("no ground-truth correspondences to sample")
    rng = np.random.default_rng(seed)
    replace = len(gt_matches) < n
    idx = rng.choice(len(gt_matches), size=n, replace=replace)
    picked = gt_matches[idx].copy()
    if jitter > 0:
        lo, hi = -(jitter // 2), jitter - jitter // 2 - 1
        picked += rng.integers(lo, hi + 1, size=picked.shape)
    if image_size is not None:
        W, H = image_size
        picked[:, [0, 2]] = picked[:, [0, 2]].clip(0, W - 1)
        picked[:, [1, 3]] = picked[:, [1, 3]].clip(0, H - 1)
    return ProposalSet(picked, None, source="oracle")


def load_external_proposals(path):
    """Proposals from a match file; scores kept when a column exists."""
    matches, extras = load_matches(path)
    scores = extras[:, 0] if extras is not None and extras.shape[1] >= 1 else None
    return ProposalSet(matches, scores, source="external")
