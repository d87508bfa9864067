"""Epipolar and homography math on raw pixel coordinates.

Conventions used everywhere in this package: image origin at the top-left
pixel center, x rightward, y downward. A match is a length-4 vector
(xa, ya, xb, yb); sets of matches are float arrays of shape (N, 4).
"""

from dataclasses import dataclass

import numpy as np


class DegeneratePoseError(ValueError):
    """Relative pose with zero translation: epipolar geometry undefined."""


class UndefinedSampsonError(ValueError):
    """Both points sit at the epipoles: Sampson denominator vanishes."""


class HomographyEstimationError(RuntimeError):
    """RANSAC could not produce a homography from the given matches."""


# Denominator terms below this are treated as vanished.
SAMPSON_EPS = 1e-12


@dataclass
class RelativePose:
    """Relative rigid transform between two calibrated cameras.

    rotation: 3x3 orthonormal, det +1. translation: 3-vector, arbitrary
    scale. intrinsics_a/b: 3x3 upper-triangular pixel camera matrices.
    """

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics_a: np.ndarray
    intrinsics_b: np.ndarray

    def validate(self, tol=1e-6):
        R = np.asarray(self.rotation, float)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > tol or np.linalg.det(R) < 0:
            raise ValueError("rotation is not a proper orthonormal matrix")
        for K in (self.intrinsics_a, self.intrinsics_b):
            K = np.asarray(K, float)
            if K.shape != (3, 3):
                raise ValueError("intrinsics must be 3x3")
            if K[0, 0] <= 0 or K[1, 1] <= 0:
                raise ValueError("intrinsics need positive focal entries")
            if np.abs(K[2] - np.array([0.0, 0.0, 1.0])).max() > tol:
                raise ValueError("intrinsics bottom row must be (0, 0, 1)")


def cross_matrix(t):
    """Skew-symmetric matrix such that cross_matrix(t) @ v == t x v."""
    t = np.asarray(t, float)
    return np.array([
        [0.0, -t[2], t[1]],
        [t[2], 0.0, -t[0]],
        [-t[1], t[0], 0.0],
    ])


def fundamental_from_pose(pose: RelativePose) -> np.ndarray:
    """F = Kb^-T [t]x R Ka^-1, scaled to unit Frobenius norm."""
    pose.validate()
    t = np.asarray(pose.translation, float)
    if np.linalg.norm(t) < 1e-12:
        raise DegeneratePoseError("zero translation: no epipolar geometry")
    Ka = np.asarray(pose.intrinsics_a, float)
    Kb = np.asarray(pose.intrinsics_b, float)
    E = cross_matrix(t) @ np.asarray(pose.rotation, float)
    F = np.linalg.inv(Kb).T @ E @ np.linalg.inv(Ka)
    return F / np.linalg.norm(F)


def check_rank2(F, tol=1e-8):
    s = np.linalg.svd(np.asarray(F, float), compute_uv=False)
    return s[-1] < tol * s[0]


def _homogeneous(pts):
    pts = np.atleast_2d(np.asarray(pts, float))
    return np.hstack([pts, np.ones((pts.shape[0], 1))])


def sampson_batch(matches, F):
    """Per-match Sampson distances and a validity mask.

    Returns (dist, valid): dist has shape (N,), valid marks matches whose
    denominator did not vanish (invalid entries hold 0 in dist).
    """
    m = np.atleast_2d(np.asarray(matches, float))
    F = np.asarray(F, float)
    Pa = _homogeneous(m[:, :2])  # (N, 3)
    Pb = _homogeneous(m[:, 2:4])
    Fa = Pa @ F.T        # rows are F @ Pa
    Ftb = Pb @ F         # rows are F^T @ Pb
    num = np.sum(Pb * Fa, axis=1) ** 2
    terms = np.stack([Fa[:, 0] ** 2, Fa[:, 1] ** 2,
                      Ftb[:, 0] ** 2, Ftb[:, 1] ** 2], axis=1)
    valid = np.any(terms >= SAMPSON_EPS, axis=1)
    den = terms.sum(axis=1)
    dist = np.zeros(len(m))
    dist[valid] = num[valid] / den[valid]
    return dist, valid


def sampson_distance(match, F) -> float:
    """Sampson distance of one match (squared-pixel units).

    Raises UndefinedSampsonError when all four denominator terms vanish.
    """
    dist, valid = sampson_batch(np.asarray(match, float).reshape(1, 4), F)
    if not valid[0]:
        raise UndefinedSampsonError("match lies at both epipoles")
    return float(dist[0])


def normalize_homography(H):
    H = np.asarray(H, float)
    if H.shape != (3, 3):
        raise ValueError("homography must be 3x3")
    if abs(H[2, 2]) > 1e-12:
        H = H / H[2, 2]
    return H


def apply_homography(H, pts):
    """Map (N, 2) points through H with homogeneous normalization."""
    q = _homogeneous(pts) @ np.asarray(H, float).T
    return q[:, :2] / q[:, 2:3]


def gt_correspondences_from_homography(H, grid_step, image_size):
    """Grid correspondences (N, 4) from a ground-truth homography.

    Emits a match for every grid point of image A whose mapped point falls
    inside image B (both images share image_size = (W, H)).
    """
    if grid_step < 1:
        raise ValueError("grid_step must be >= 1")
    W, Hgt = int(image_size[0]), int(image_size[1])
    xs = np.arange(0, W, grid_step, dtype=float)
    ys = np.arange(0, Hgt, grid_step, dtype=float)
    gx, gy = np.meshgrid(xs, ys)
    pa = np.stack([gx.ravel(), gy.ravel()], axis=1)
    pb = apply_homography(H, pa)
    inside = ((pb[:, 0] >= 0) & (pb[:, 0] <= W - 1)
              & (pb[:, 1] >= 0) & (pb[:, 1] <= Hgt - 1))
    return np.hstack([pa[inside], pb[inside]])


def corner_error(h_est, h_gt, image_size) -> float:
    """Mean distance between image corners mapped by the two homographies.

    Returns inf for a non-invertible estimate (failure at every threshold).
    """
    W, H = image_size
    corners = np.array([[0.0, 0.0], [W - 1.0, 0.0],
                        [0.0, H - 1.0], [W - 1.0, H - 1.0]])
    h_est = np.asarray(h_est, float)
    if not np.all(np.isfinite(h_est)) or abs(np.linalg.det(h_est)) < 1e-12:
        return float("inf")
    ca = apply_homography(h_est, corners)
    cb = apply_homography(h_gt, corners)
    if not np.all(np.isfinite(ca)):
        return float("inf")
    return float(np.mean(np.linalg.norm(ca - cb, axis=1)))


def _normalize_points(pts):
    c = pts.mean(axis=0)
    d = np.mean(np.linalg.norm(pts - c, axis=1)) + 1e-12
    s = np.sqrt(2.0) / d
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return (pts - c) * s, T


def _fit_homography_dlt(matches):
    """Normalized DLT; returns None for degenerate configurations."""
    pa, Ta = _normalize_points(matches[:, :2])
    pb, Tb = _normalize_points(matches[:, 2:4])
    n = len(matches)
    A = np.zeros((2 * n, 9))
    x, y = pa[:, 0], pa[:, 1]
    u, v = pb[:, 0], pb[:, 1]
    A[0::2] = np.column_stack([x, y, np.ones(n), np.zeros((n, 3)),
                               -u * x, -u * y, -u])
    A[1::2] = np.column_stack([np.zeros((n, 3)), x, y, np.ones(n),
                               -v * x, -v * y, -v])
    if np.linalg.matrix_rank(A) < 8:
        return None
    _, _, Vt = np.linalg.svd(A)
    Hn = Vt[-1].reshape(3, 3)
    H = np.linalg.inv(Tb) @ Hn @ Ta
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _sample_noncollinear(pts, eps=1e-6):
    # area of every triangle formed by the 4 sample points must be nonzero
    from itertools import combinations
    for i, j, k in combinations(range(4), 3):
        a, b, c = pts[i], pts[j], pts[k]
        area = abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < eps:
            return False
    return True


def estimate_homography_ransac(matches, threshold=2.0, seed=0,
                               max_iters=2000, confidence=0.999):
    """Locally-optimized RANSAC homography fit.

    Returns (H, inlier_mask). Deterministic for a fixed seed. Raises
    HomographyEstimationError with < 4 matches or when every minimal
    sample is degenerate.
    """
    m = np.atleast_2d(np.asarray(matches, float))
    n = len(m)
    if n < 4:
        raise HomographyEstimationError("need at least 4 matches")
    rng = np.random.default_rng(seed)

    def inliers_of(H):
        err = np.linalg.norm(apply_homography(H, m[:, :2]) - m[:, 2:4], axis=1)
        return err < threshold

    def local_optimize(H, mask):
        # refit on the inlier set until the consensus stops growing
        for _ in range(4):
            if mask.sum() < 4:
                break
            H2 = _fit_homography_dlt(m[mask])
            if H2 is None:
                break
            mask2 = inliers_of(H2)
            if mask2.sum() <= mask.sum():
                break
            H, mask = H2, mask2
        return H, mask

    best_H, best_mask = None, None
    iters = max_iters
    i = 0
    while i < iters:
        i += 1
        idx = rng.choice(n, size=4, replace=False)
        if not (_sample_noncollinear(m[idx, :2]) and _sample_noncollinear(m[idx, 2:4])):
            continue
        H = _fit_homography_dlt(m[idx])
        if H is None:
            continue
        mask = inliers_of(H)
        if best_mask is None or mask.sum() > best_mask.sum():
            best_H, best_mask = local_optimize(H, mask)
            w = max(best_mask.sum() / n, 1e-9)
            if w < 1.0:
                needed = np.log(1.0 - confidence) / np.log(1.0 - w ** 4)
                iters = min(max_iters, int(np.ceil(needed)))
            else:
                iters = i
    if best_H is None:
        raise HomographyEstimationError("all minimal samples degenerate")
    return normalize_homography(best_H), best_mask
