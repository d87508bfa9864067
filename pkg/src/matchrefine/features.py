"""Convolutional backbone, feature pyramids, and patch-feature gathering.

The backbone halves resolution at each of its first three stages and runs
the last stage at stride 1, so the final two maps share their spatial
size. Level 0 of the pyramid is the input image itself. Patch features
for the regressors are gathered from levels 0..L-1; the last level feeds
the proposal matcher only.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn


CHANNEL_PROFILES = {
    "slim": [3, 8, 8, 16, 32],
    "toy": [3, 16, 16, 32, 64],
    "paper": [3, 64, 64, 128, 256],
}


@dataclass
class FeaturePyramid:
    """Per-image activation maps f_0..f_L with their downscale factors."""

    maps: list            # tensors (C, H, W)
    downscales: list = field(default_factory=list)

    def __post_init__(self):
        if not self.downscales:
            L = len(self.maps) - 1
            self.downscales = [2 ** l for l in range(L)] + [2 ** (L - 1)]

    @property
    def levels(self):
        return len(self.maps) - 1

    @property
    def image_size(self):
        return self.maps[0].shape[2], self.maps[0].shape[1]  # (W, H)


class Backbone(nn.Module):
    """Four-stage plain-conv feature extractor.

    channels lists the map channel plan [c0, c1, c2, c3, c4] with c0 the
    image channels. Stages 1-3 downsample by 2; stage 4 keeps resolution.
    """

    def __init__(self, profile="toy"):
        super().__init__()
        if isinstance(profile, str):
            channels = CHANNEL_PROFILES[profile]
        else:
            channels = list(profile)
        self.channels = channels
        stages = []
        for l in range(1, len(channels)):
            stride = 2 if l < len(channels) - 1 else 1
            stages.append(nn.Sequential(
                nn.Conv2d(channels[l - 1], channels[l], 3, stride=stride, padding=1),
                nn.GELU(),
                nn.Conv2d(channels[l], channels[l], 3, stride=1, padding=1),
                nn.GELU(),
            ))
        self.stages = nn.ModuleList(stages)

    @property
    def levels(self):
        return len(self.stages)

    @property
    def gather_channels(self):
        # channel total of the levels used for patch gathering (0..L-1)
        return sum(self.channels[:-1])

    def forward(self, image):
        maps = [image]
        x = image
        for stage in self.stages:
            x = stage(x)
            maps.append(x)
        return maps


def image_to_tensor(image, dtype=torch.float32):
    """HxWx3 (or HxW) array to a (3, H, W) float tensor in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=-1)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    t = torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))
    return t.to(dtype)


def extract_pyramid(image, backbone: Backbone) -> FeaturePyramid:
    """Run the backbone on one image and package the activation maps."""
    t = image if isinstance(image, torch.Tensor) else image_to_tensor(image)
    if t.dim() != 3:
        raise ValueError("expected a single (C, H, W) image")
    t = t.to(next(backbone.parameters()).dtype)
    div = 2 ** (backbone.levels - 1)
    _, H, W = t.shape
    if H % div or W % div:
        raise ValueError(
            f"image size {W}x{H} must be divisible by {div}; "
            f"pad to {W + (-W) % div}x{H + (-H) % div}")
    maps = backbone(t.unsqueeze(0))
    return FeaturePyramid([m.squeeze(0) for m in maps])


def _patch_indices(anchors, S, level_downscale, height, width):
    """Integer gather indices (N, S) per axis for one pyramid level."""
    offs = torch.arange(S, device=anchors.device, dtype=anchors.dtype)
    xs = torch.floor((anchors[:, 0:1] + offs) / level_downscale)
    ys = torch.floor((anchors[:, 1:2] + offs) / level_downscale)
    xs = xs.clamp(0, width - 1).long()
    ys = ys.clamp(0, height - 1).long()
    return xs, ys


def gather_patches_batch(pyramid: FeaturePyramid, centers, S):
    """Gather S x S feature stacks around N centers.

    centers: (N, 2) real-valued pixel coordinates. Returns a tensor
    (N, C_sum, S, S) concatenating levels 0..L-1; out-of-image positions
    clamp to the nearest valid index. The patch anchor is the rounded
    center minus S // 2.
    """
    if S < 2:
        raise ValueError("patch size must be >= 2")
    centers = torch.as_tensor(centers, dtype=pyramid.maps[0].dtype)
    anchors = torch.floor(centers + 0.5) - S // 2
    chunks = []
    for l in range(pyramid.levels):
        fmap = pyramid.maps[l]
        _, h, w = fmap.shape
        xs, ys = _patch_indices(anchors, S, pyramid.downscales[l], h, w)
        # out[n, c, i, j] = fmap[c, ys[n, i], xs[n, j]]
        gathered = fmap[:, ys[:, :, None], xs[:, None, :]]
        chunks.append(gathered.permute(1, 0, 2, 3))
    return torch.cat(chunks, dim=1)


def gather_patch_features(pyramid: FeaturePyramid, center, S):
    """Single-center variant of gather_patches_batch: (C_sum, S, S)."""
    centers = torch.as_tensor(center, dtype=pyramid.maps[0].dtype).reshape(1, 2)
    return gather_patches_batch(pyramid, centers, S).squeeze(0)


def gather_pair(pyr_a: FeaturePyramid, pyr_b: FeaturePyramid, match, S):
    """Concatenated (2 * C_sum, S, S) stack for one match (xa ya xb yb)."""
    m = torch.as_tensor(match, dtype=pyr_a.maps[0].dtype).reshape(1, 4)
    return gather_pairs_batch(pyr_a, pyr_b, m, S).squeeze(0)


def gather_pairs_batch(pyr_a, pyr_b, matches, S):
    """Batched pair gathering: (N, 2 * C_sum, S, S), A-stack first."""
    matches = torch.as_tensor(matches, dtype=pyr_a.maps[0].dtype)
    stack_a = gather_patches_batch(pyr_a, matches[:, 0:2], S)
    stack_b = gather_patches_batch(pyr_b, matches[:, 2:4], S)
    return torch.cat([stack_a, stack_b], dim=1)
