"""Training-pair construction on synthetic homography-warped images.

Desk-scale stand-in for a large SfM dataset: textured base images are
warped by bounded random projective transforms, the exact homography is
stored as supervision, and pairs are listed in a JSON manifest.
"""

import os
from dataclasses import dataclass

import cv2
import numpy as np

from .fileio import save_manifest
from .proposals import ProposalSet
from .refine import expand_proposals


@dataclass
class TrainingPair:
    image_a: np.ndarray
    image_b: np.ndarray
    homography: np.ndarray      # maps image A pixel coords into image B
    name: str = "pair"


def synth_base_image(size, seed=0):
    """Textured random image: multi-scale smoothed noise plus a few
    random shapes, so local patches are discriminative."""
    W, H = size
    rng = np.random.default_rng(seed)
    img = np.zeros((H, W), np.float64)
    for cell in (8, 16, 32):
        low = rng.uniform(0, 1, (max(H // cell, 2), max(W // cell, 2)))
        img += cv2.resize(low, (W, H), interpolation=cv2.INTER_CUBIC)
    img = (img - img.min()) / (np.ptp(img) + 1e-9)
    canvas = (img * 200 + 25).astype(np.uint8)
    canvas = cv2.cvtColor(canvas, cv2.COLOR_GRAY2BGR)
    for _ in range(30):
        p1 = (int(rng.integers(0, W)), int(rng.integers(0, H)))
        p2 = (int(rng.integers(0, W)), int(rng.integers(0, H)))
        color = tuple(int(v) for v in rng.integers(0, 255, 3))
        if rng.random() < 0.5:
            cv2.line(canvas, p1, p2, color, 1)
        else:
            cv2.circle(canvas, p1, int(rng.integers(2, max(W, H) // 8)), color, -1)
    return canvas


def _random_homography(size, warp_magnitude, rng):
    W, H = size
    src = np.array([[0, 0], [W - 1, 0], [W - 1, H - 1], [0, H - 1]], np.float32)
    amp = warp_magnitude * np.array([W, H], np.float32)
    dst = src + rng.uniform(-1, 1, (4, 2)).astype(np.float32) * amp
    # reject fold-over: warped corners must stay convex, same orientation
    for i in range(4):
        a, b, c = dst[i], dst[(i + 1) % 4], dst[(i + 2) % 4]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if cross <= 0:
            return None
    Hm = cv2.getPerspectiveTransform(src, dst).astype(np.float64)
    if abs(np.linalg.det(Hm)) < 1e-9:
        return None
    return Hm / Hm[2, 2]


def synth_pair(base_image, warp_magnitude=0.1, photometric_jitter=0.0,
               seed=0, name="pair"):
    """Warp a base image by a random projective homography.

    The stored homography maps A coordinates to B; image B is rendered
    by resampling A accordingly, then brightness/contrast jittered.
    Degenerate warps are resampled up to 10 times.
    """
    rng = np.random.default_rng(seed)
    H_img, W_img = base_image.shape[:2]
    size = (W_img, H_img)
    if warp_magnitude == 0:
        Hm = np.eye(3)
    else:
        Hm = None
        for _ in range(10):
            Hm = _random_homography(size, warp_magnitude, rng)
            if Hm is not None:
                break
        if Hm is None:
            raise RuntimeError("could not sample a non-degenerate warp")
    image_b = cv2.warpPerspective(base_image, Hm.astype(np.float64), size,
                                  flags=cv2.INTER_LINEAR,
                                  borderMode=cv2.BORDER_REFLECT)
    if photometric_jitter > 0:
        contrast = 1.0 + rng.uniform(-photometric_jitter, photometric_jitter)
        brightness = rng.uniform(-photometric_jitter, photometric_jitter) * 64
        image_b = np.clip(image_b.astype(np.float64) * contrast + brightness,
                          0, 255).astype(np.uint8)
    return TrainingPair(base_image.copy(), image_b, Hm, name=name)


def preprocess(image, target=(480, 320)):
    """Crop from the right/bottom to the target aspect ratio, resize.

    Returns (image, (sx, sy)) where the scale factors map cropped-image
    coordinates into the resized frame.
    """
    tw, th = target
    aspect = tw / th
    H_img, W_img = image.shape[:2]
    if W_img / H_img > aspect:
        W_crop, H_crop = int(round(H_img * aspect)), H_img
    else:
        W_crop, H_crop = W_img, int(round(W_img / aspect))
    cropped = image[:H_crop, :W_crop]
    resized = cv2.resize(cropped, (tw, th), interpolation=cv2.INTER_AREA)
    return resized, (tw / W_crop, th / H_crop)


def remap_homography(Hm, scale_a, scale_b):
    """Transfer an A->B homography into the preprocessed frames."""
    Sa = np.diag([scale_a[0], scale_a[1], 1.0])
    Sb = np.diag([scale_b[0], scale_b[1], 1.0])
    out = Sb @ np.asarray(Hm, float) @ np.linalg.inv(Sa)
    return out / out[2, 2]


def sample_proposals(proposals: ProposalSet, n, seed=0):
    """Uniform sample without replacement; everything if fewer than n."""
    rng = np.random.default_rng(seed)
    if len(proposals) <= n:
        return proposals
    idx = np.sort(rng.choice(len(proposals), size=n, replace=False))
    scores = None if proposals.scores is None else proposals.scores[idx]
    return ProposalSet(proposals.matches[idx], scores,
                       source=proposals.source, downscale=proposals.downscale)


def sample_batch(per_pair_proposals, per_pair=400, expand=False,
                 expansion_offset=8, seed=0):
    """Per-pair proposal subsets for one training step.

    Each pair contributes up to per_pair proposals; with expansion each
    becomes 8 children (400 -> 3200).
    """
    batch = []
    for i, props in enumerate(per_pair_proposals):
        picked = sample_proposals(props, per_pair, seed=seed + i)
        if expand:
            picked = expand_proposals(picked, expansion_offset)
        batch.append(picked)
    return batch


def generate_dataset(out_dir, n_pairs, image_size=(480, 320),
                     warp_magnitude=0.1, photometric_jitter=0.1, seed=0):
    """Write a synthetic dataset: images plus a manifest.json index."""
    os.makedirs(out_dir, exist_ok=True)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    records = []
    for i in range(n_pairs):
        base = synth_base_image(image_size, seed=seed * 100003 + i)
        pair = synth_pair(base, warp_magnitude, photometric_jitter,
                          seed=seed * 100003 + i + 1, name=f"pair_{i:04d}")
        name_a, name_b = f"pair_{i:04d}_a.png", f"pair_{i:04d}_b.png"
        cv2.imwrite(os.path.join(img_dir, name_a), pair.image_a)
        cv2.imwrite(os.path.join(img_dir, name_b), pair.image_b)
        records.append({
            "name": pair.name,
            "image_a": name_a,
            "image_b": name_b,
            "homography": pair.homography.ravel().tolist(),
        })
    manifest_path = os.path.join(out_dir, "manifest.json")
    save_manifest(manifest_path, "images", records)
    return manifest_path


def load_pair_images(pair_record):
    """Read the two images of a manifest pair record (BGR uint8)."""
    img_a = cv2.imread(pair_record["image_a"], cv2.IMREAD_COLOR)
    img_b = cv2.imread(pair_record["image_b"], cv2.IMREAD_COLOR)
    if img_a is None or img_b is None:
        raise FileNotFoundError(f"missing image for pair {pair_record.get('name')}")
    return img_a, img_b
