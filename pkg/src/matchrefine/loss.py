"""Weakly supervised training objective.

Classification labels come from thresholding the geometric residual of
each level's parent match; confidences train with a class-balanced BCE;
the geometric term is the mean residual of refined matches whose parent
passes the gate. Total = alpha * (cls_mid + cls_fine) + geo_mid + geo_fine.

Residuals are squared-pixel quantities: the Sampson distance for
pose-supervised pairs, and the symmetric squared transfer error through
the GT homography for planar synthetic pairs (where any fundamental
matrix is degenerate).
"""

from dataclasses import dataclass

import numpy as np
import torch

LOG_CLAMP = 1e-7
DENOM_EPS = 1e-12


@dataclass
class LossConfig:
    alpha: float = 10.0
    theta_cls_mid: float = 50.0
    theta_geo_mid: float = 50.0
    theta_cls_fine: float = 5.0
    theta_geo_fine: float = 5.0

    def __post_init__(self):
        if self.alpha <= 0 or min(self.theta_cls_mid, self.theta_geo_mid,
                                  self.theta_cls_fine, self.theta_geo_fine) <= 0:
            raise ValueError("alpha and all thresholds must be positive")


@dataclass
class LossReport:
    total: float
    cls_mid: float
    cls_fine: float
    geo_mid: float
    geo_fine: float
    pos_count_mid: int
    neg_count_mid: int
    pos_count_fine: int
    neg_count_fine: int
    w_mid: float
    w_fine: float
    geo_mid_count: int = 0
    geo_fine_count: int = 0
    flagged: bool = False

    FIELDS = ["total", "cls_mid", "cls_fine", "geo_mid", "geo_fine",
              "pos_count_mid", "neg_count_mid", "pos_count_fine",
              "neg_count_fine", "w_mid", "w_fine",
              "geo_mid_count", "geo_fine_count", "flagged"]

    def csv_row(self):
        return ",".join(repr(getattr(self, f)) for f in self.FIELDS)

    @classmethod
    def csv_header(cls):
        return ",".join(cls.FIELDS)


class EpipolarSupervision:
    """Sampson residuals against a fixed fundamental matrix."""

    def __init__(self, F):
        self.F = torch.as_tensor(np.asarray(F, float))

    def residuals(self, coords):
        """coords (N, 4) -> (residual (N,), valid mask (N,)).

        Differentiable in coords; invalid entries (vanished Sampson
        denominator) hold 0 and are flagged out via the mask.
        """
        F = self.F.to(coords.dtype)
        ones = torch.ones(len(coords), 1, dtype=coords.dtype)
        Pa = torch.cat([coords[:, 0:2], ones], dim=1)
        Pb = torch.cat([coords[:, 2:4], ones], dim=1)
        Fa = Pa @ F.t()
        Ftb = Pb @ F
        num = (Pb * Fa).sum(dim=1) ** 2
        terms = torch.stack([Fa[:, 0] ** 2, Fa[:, 1] ** 2,
                             Ftb[:, 0] ** 2, Ftb[:, 1] ** 2], dim=1)
        valid = (terms.detach() >= DENOM_EPS).any(dim=1)
        den = terms.sum(dim=1).clamp_min(DENOM_EPS)
        res = num / den
        return torch.where(valid, res, torch.zeros_like(res)), valid


class HomographySupervision:
    """Symmetric squared transfer error through a GT homography.

    Stand-in residual for planar pairs, in the same squared-pixel units
    as the Sampson distance: the mean of the squared forward and
    backward transfer distances.
    """

    def __init__(self, H):
        H = np.asarray(H, float)
        self.H = torch.as_tensor(H)
        self.Hinv = torch.as_tensor(np.linalg.inv(H))

    @staticmethod
    def _map(H, pts):
        ones = torch.ones(len(pts), 1, dtype=pts.dtype)
        q = torch.cat([pts, ones], dim=1) @ H.to(pts.dtype).t()
        return q[:, :2] / q[:, 2:3].clamp_min(DENOM_EPS)

    def residuals(self, coords):
        pa, pb = coords[:, 0:2], coords[:, 2:4]
        fwd = ((self._map(self.H, pa) - pb) ** 2).sum(dim=1)
        bwd = ((self._map(self.Hinv, pb) - pa) ** 2).sum(dim=1)
        res = 0.5 * (fwd + bwd)
        valid = torch.isfinite(res.detach())
        return torch.where(valid, res, torch.zeros_like(res)), valid


def supervision_for_pair(pair_record):
    """Build the residual object for a manifest pair record."""
    if "homography" in pair_record:
        return HomographySupervision(pair_record["homography"])
    from .geometry import fundamental_from_pose
    return EpipolarSupervision(fundamental_from_pose(pair_record["pose"]))


def classification_labels(parents, supervision, theta_cls):
    """Binary labels: 1 iff the parent residual is strictly below theta.

    Matches with undefined residuals label 0; their count is returned
    for monitoring.
    """
    with torch.no_grad():
        res, valid = supervision.residuals(parents)
        labels = ((res < theta_cls) & valid).to(parents.dtype)
    return labels, int((~valid).sum())


def balance_weight(labels):
    """w = |negatives| / |positives|; (w, flagged) with w=1 fallback when
    either class is empty."""
    pos = float((labels > 0.5).sum())
    neg = float(len(labels)) - pos
    if pos == 0 or neg == 0:
        return 1.0, True
    return neg / pos, False


def weighted_bce(conf, labels, w=None):
    """Class-balanced binary cross entropy.

    -(1/N) sum [w * c* * log c + (1 - c*) * log(1 - c)] with the log
    arguments clamped at 1e-7. w defaults to |neg|/|pos| of the labels.
    """
    if w is None:
        w, _ = balance_weight(labels)
    c = conf.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
    terms = w * labels * torch.log(c) + (1.0 - labels) * torch.log(1.0 - c)
    return -terms.mean()


def geometric_loss(refined, parents, supervision, theta_geo):
    """Mean residual of refined matches whose parent passes the gate.

    Returns (loss, gated_count, flagged). An empty gated set yields a
    zero with no gradient contribution, flagged for monitoring.
    """
    with torch.no_grad():
        parent_res, parent_valid = supervision.residuals(parents)
        gate = (parent_res < theta_geo) & parent_valid
    res, valid = supervision.residuals(refined)
    keep = gate & valid
    count = int(keep.sum())
    if count == 0:
        return refined.sum() * 0.0, 0, True
    return res[keep].mean(), count, False


def total_loss(refined, supervision, config: LossConfig = None):
    """Assemble the full objective from a RefinedMatches batch.

    Mid-level labels/gates use the original proposals as parents; the
    fine level uses the mid matches. Returns (loss tensor, LossReport).
    """
    cfg = config or LossConfig()
    labels_mid, bad_mid = classification_labels(
        refined.proposals, supervision, cfg.theta_cls_mid)
    labels_fine, bad_fine = classification_labels(
        refined.mid.detach(), supervision, cfg.theta_cls_fine)
    w_mid, flag_mid = balance_weight(labels_mid)
    w_fine, flag_fine = balance_weight(labels_fine)
    cls_mid = weighted_bce(refined.mid_conf, labels_mid, w_mid)
    cls_fine = weighted_bce(refined.fine_conf, labels_fine, w_fine)
    geo_mid, n_geo_mid, flag_gm = geometric_loss(
        refined.mid, refined.proposals, supervision, cfg.theta_geo_mid)
    geo_fine, n_geo_fine, flag_gf = geometric_loss(
        refined.fine, refined.mid.detach(), supervision, cfg.theta_geo_fine)
    total = cfg.alpha * (cls_mid + cls_fine) + geo_mid + geo_fine
    pos_mid = int((labels_mid > 0.5).sum())
    pos_fine = int((labels_fine > 0.5).sum())
    report = LossReport(
        total=float(total.detach()), cls_mid=float(cls_mid.detach()),
        cls_fine=float(cls_fine.detach()),
        geo_mid=float(geo_mid.detach()), geo_fine=float(geo_fine.detach()),
        pos_count_mid=pos_mid, neg_count_mid=len(labels_mid) - pos_mid,
        pos_count_fine=pos_fine, neg_count_fine=len(labels_fine) - pos_fine,
        w_mid=w_mid, w_fine=w_fine,
        geo_mid_count=n_geo_mid, geo_fine_count=n_geo_fine,
        flagged=bool(flag_mid or flag_fine or flag_gm or flag_gf
                     or bad_mid or bad_fine),
    )
    return total, report
