"""Patch expansion and progressive mid/fine match regression.

Every proposal is refined in two hops: the mid-level regressor moves the
match within the S x S patches centered on the proposal, the fine-level
regressor repeats the step around the mid match. Regressed offsets are
bounded to [-S/2, S/2] by a saturating activation, so a refined match
provably stays inside its search patch.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .features import gather_pairs_batch
from .proposals import ProposalSet

EXPANSION_CORNERS = [(-1, -1), (1, -1), (-1, 1), (1, 1)]


@dataclass
class RefinerConfig:
    patch_size: int = 16              # S, pixels at image resolution
    expansion_offset: int = 8         # d, defaults to S/2
    levels: int = 4                   # pyramid depth L
    conv_channels: tuple = (32, 64)   # regressor aggregation plan
    fc_width: int = 512
    confidence_threshold: float = 0.25

    def __post_init__(self):
        if self.patch_size <= 2 ** (self.levels - 1):
            raise ValueError("patch size must exceed 2^(levels-1)")


def expand_proposals(proposals: ProposalSet, d: int) -> ProposalSet:
    """Eight children per proposal: each endpoint moved to its four
    diagonal corner anchors at distance d, paired with the unchanged
    other endpoint. Children are grouped after their parent's index and
    keep a parent link for loss bookkeeping.
    """
    if d <= 0:
        raise ValueError("expansion offset must be positive")
    m = np.atleast_2d(np.asarray(proposals.matches, float))
    n = len(m)
    children = np.repeat(m, 8, axis=0)
    for p in range(n):
        for c, (sx, sy) in enumerate(EXPANSION_CORNERS):
            children[8 * p + c, 0] += sx * d
            children[8 * p + c, 1] += sy * d
        for c, (sx, sy) in enumerate(EXPANSION_CORNERS):
            children[8 * p + 4 + c, 2] += sx * d
            children[8 * p + 4 + c, 3] += sy * d
    parent = np.repeat(np.arange(n), 8)
    scores = None if proposals.scores is None else np.repeat(proposals.scores, 8)
    return ProposalSet(children, scores, source=proposals.source,
                       downscale=proposals.downscale, parent_index=parent)


class PatchRegressor(nn.Module):
    """Shared architecture of the mid- and fine-level regressors.

    Two strided convolutions aggregate the gathered patch-pair features
    into a vector, two fc layers process it, and two fc heads emit the
    4-vector pixel offset (tanh-bounded to +-S/2) and the confidence
    (sigmoid).
    """

    def __init__(self, in_channels, config: RefinerConfig):
        super().__init__()
        c1, c2 = config.conv_channels
        self.patch_size = config.patch_size
        self.trunk = nn.Sequential(
            nn.Conv2d(in_channels, c1, 3, stride=2, padding=1),
            nn.GELU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1),
            nn.GELU(),
        )
        spatial = (config.patch_size + 3) // 4
        self.fc = nn.Sequential(
            nn.Linear(c2 * spatial * spatial, config.fc_width),
            nn.GELU(),
            nn.Linear(config.fc_width, config.fc_width),
            nn.GELU(),
        )
        self.delta_head = nn.Linear(config.fc_width, 4)
        self.conf_head = nn.Linear(config.fc_width, 1)

    def forward(self, stack):
        """stack: (N, 2*C_sum, S, S) -> (delta (N, 4), conf (N,))."""
        x = self.trunk(stack)
        x = self.fc(x.flatten(1))
        delta = torch.tanh(self.delta_head(x)) * (self.patch_size / 2.0)
        conf = torch.sigmoid(self.conf_head(x)).squeeze(1)
        return delta, conf


@dataclass
class RefinedMatches:
    """Progressively refined matches with per-level confidences.

    All tensors share the leading proposal dimension; mid = proposal +
    mid_delta and fine = mid + fine_delta hold componentwise.
    """

    proposals: torch.Tensor      # (N, 4)
    mid_delta: torch.Tensor
    mid: torch.Tensor
    mid_conf: torch.Tensor       # (N,)
    fine_delta: torch.Tensor
    fine: torch.Tensor
    fine_conf: torch.Tensor
    parent_index: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.proposals)

    def select(self, keep):
        keep = np.asarray(keep)
        return RefinedMatches(
            self.proposals[keep], self.mid_delta[keep], self.mid[keep],
            self.mid_conf[keep], self.fine_delta[keep], self.fine[keep],
            self.fine_conf[keep],
            None if self.parent_index is None else self.parent_index[keep])

    def fine_numpy(self):
        return self.fine.detach().double().numpy()

    def score_columns(self):
        """(N, 2) array of (conf_fine, conf_mid) for match files."""
        return np.stack([self.fine_conf.detach().double().numpy(),
                         self.mid_conf.detach().double().numpy()], axis=1)


class ProgressiveRefiner(nn.Module):
    """Mid- and fine-level regressors sharing architecture, not weights."""

    def __init__(self, in_channels, config: RefinerConfig = None):
        super().__init__()
        self.config = config or RefinerConfig()
        self.mid = PatchRegressor(in_channels, self.config)
        self.fine = PatchRegressor(in_channels, self.config)


def refine_matches(pyr_a, pyr_b, proposals, refiner: ProgressiveRefiner):
    """Run both refinement levels over every proposal (no filtering)."""
    cfg = refiner.config
    dtype = pyr_a.maps[0].dtype
    if isinstance(proposals, ProposalSet):
        coords = np.atleast_2d(np.asarray(proposals.matches, float))
        parent = proposals.parent_index
    else:
        coords = np.atleast_2d(np.asarray(proposals, float))
        parent = None
    m0 = torch.as_tensor(coords, dtype=dtype)
    stack = gather_pairs_batch(pyr_a, pyr_b, m0, cfg.patch_size)
    mid_delta, mid_conf = refiner.mid(stack)
    mid = m0 + mid_delta
    stack2 = gather_pairs_batch(pyr_a, pyr_b, mid, cfg.patch_size)
    fine_delta, fine_conf = refiner.fine(stack2)
    fine = mid + fine_delta
    return RefinedMatches(m0, mid_delta, mid, mid_conf,
                          fine_delta, fine, fine_conf, parent)


def filter_by_confidence(matches: RefinedMatches, c: float) -> RefinedMatches:
    """Keep matches whose fine confidence reaches c, in stable order."""
    keep = (matches.fine_conf.detach() >= c).numpy()
    return matches.select(keep)
