"""File formats: match files, pose/homography records, dataset manifests.

Match files are ASCII, one match per line: `x_a y_a x_b y_b [score ...]`,
space-delimited, `#` comment lines ignored. Refined matches carry two
score columns (conf_fine conf_mid).
"""

import json
import os

import numpy as np


class MatchFileError(ValueError):
    """Malformed match file; message names the offending line."""


def load_matches(path):
    """Read a match file.

    Returns (matches, scores): matches (N, 4); scores (N, k) with k the
    number of extra columns, or None when the file carries none.
    """
    rows, extras = [], []
    ncols = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) < 4:
                raise MatchFileError(f"{path}:{lineno}: expected at least 4 columns")
            try:
                vals = [float(p) for p in parts]
            except ValueError:
                raise MatchFileError(f"{path}:{lineno}: non-numeric field")
            if not all(np.isfinite(vals)):
                raise MatchFileError(f"{path}:{lineno}: non-finite coordinate")
            if ncols is None:
                ncols = len(vals)
            elif len(vals) != ncols:
                raise MatchFileError(f"{path}:{lineno}: inconsistent column count")
            rows.append(vals[:4])
            extras.append(vals[4:])
    matches = np.array(rows, float).reshape(-1, 4)
    if ncols is None or ncols == 4:
        return matches, None
    return matches, np.array(extras, float)


def save_matches(path, matches, scores=None):
    matches = np.atleast_2d(np.asarray(matches, float))
    with open(path, "w") as fh:
        for i in range(len(matches)):
            fields = [f"{v:.6f}" for v in matches[i]]
            if scores is not None:
                s = np.atleast_1d(np.asarray(scores)[i])
                fields += [f"{v:.6f}" for v in s]
            fh.write(" ".join(fields) + "\n")


def load_pose_record(record):
    """Parse a pose dict with keys K_a, K_b (9 floats), R (9), t (3)."""
    from .geometry import RelativePose
    pose = RelativePose(
        rotation=np.array(record["R"], float).reshape(3, 3),
        translation=np.array(record["t"], float),
        intrinsics_a=np.array(record["K_a"], float).reshape(3, 3),
        intrinsics_b=np.array(record["K_b"], float).reshape(3, 3),
    )
    pose.validate()
    return pose


def pose_record(pose):
    return {
        "K_a": np.asarray(pose.intrinsics_a, float).ravel().tolist(),
        "K_b": np.asarray(pose.intrinsics_b, float).ravel().tolist(),
        "R": np.asarray(pose.rotation, float).ravel().tolist(),
        "t": np.asarray(pose.translation, float).ravel().tolist(),
    }


def load_homography_record(record):
    H = np.array(record, float)
    if H.size != 9:
        raise ValueError("homography record must hold 9 floats")
    return H.reshape(3, 3)


def load_manifest(path):
    """Load a dataset manifest: {"image_dir": ..., "pairs": [...]}.

    Each pair record holds image_a / image_b (paths relative to image_dir)
    and either a `homography` (9 floats) or a `pose` record.
    """
    with open(path) as fh:
        manifest = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    image_dir = manifest.get("image_dir", ".")
    if not os.path.isabs(image_dir):
        image_dir = os.path.join(root, image_dir)
    pairs = []
    for rec in manifest["pairs"]:
        entry = {
            "image_a": os.path.join(image_dir, rec["image_a"]),
            "image_b": os.path.join(image_dir, rec["image_b"]),
            "name": rec.get("name", rec["image_a"]),
        }
        if "homography" in rec:
            entry["homography"] = load_homography_record(rec["homography"])
        elif "pose" in rec:
            entry["pose"] = load_pose_record(rec["pose"])
        else:
            raise ValueError("pair record needs a homography or a pose")
        pairs.append(entry)
    return pairs


def save_manifest(path, image_dir, pair_records):
    manifest = {"image_dir": image_dir, "pairs": pair_records}
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
