"""Training loop: Adam with a two-stage learning-rate schedule,
per-epoch checkpointing, deterministic resume, and CSV loss logging.

All per-step randomness (proposal sampling, oracle jitter) is derived
from the master seed and the step index, so a resumed run replays the
exact step sequence of an uninterrupted one.
"""

import json
import math
import os
import pickle
from dataclasses import asdict

import numpy as np
import torch
import torch.nn as nn

from .config import RunConfig
from .data import (load_pair_images, preprocess, remap_homography,
                   sample_proposals)
from .features import Backbone, extract_pyramid
from .fileio import load_manifest
from .loss import LossReport, supervision_for_pair, total_loss
from .proposals import ConsensusMatcher, ProposalSet, nc_match, oracle_match
from .refine import (ProgressiveRefiner, expand_proposals,
                     filter_by_confidence, refine_matches)

CHECKPOINT_VERSION = 1


def _pack(obj):
    """Tensors to raw bytes, recursively; torch's own serializers embed
    file names or storage addresses and are not byte-reproducible."""
    if isinstance(obj, torch.Tensor):
        arr = obj.detach().cpu().numpy()
        return {"__tensor__": True, "dtype": str(arr.dtype),
                "shape": arr.shape, "data": arr.tobytes()}
    if isinstance(obj, dict):
        return {k: _pack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        packed = [_pack(v) for v in obj]
        return packed if isinstance(obj, list) else tuple(packed)
    return obj


def _unpack(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__"):
            arr = np.frombuffer(obj["data"], dtype=obj["dtype"]).reshape(obj["shape"])
            return torch.from_numpy(arr.copy())
        return {k: _unpack(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        out = [_unpack(v) for v in obj]
        return out if isinstance(obj, list) else tuple(out)
    return obj


class MatchModel(nn.Module):
    """Backbone + proposal matcher + progressive refiner."""

    def __init__(self, config: RunConfig):
        super().__init__()
        self.run_config = config
        self.backbone = Backbone(config.backbone_profile)
        self.matcher = ConsensusMatcher()
        self.refiner = ProgressiveRefiner(
            2 * self.backbone.gather_channels, config.refiner_config())


def save_checkpoint(path, model, optimizer=None, epoch=0, step=0):
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.run_config),
        "model": _pack(model.state_dict()),
        "epoch": epoch,
        "step": step,
    }
    if optimizer is not None:
        payload["optimizer"] = _pack(optimizer.state_dict())
    with open(path, "wb") as fh:
        pickle.dump(payload, fh, protocol=4)


def load_checkpoint(path, optimizer=None):
    with open(path, "rb") as fh:
        payload = pickle.load(fh)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    from .config import load_config
    cfg = load_config(overrides=payload["config"])
    model = MatchModel(cfg)
    model.load_state_dict(_unpack(payload["model"]))
    if optimizer is not None and "optimizer" in payload:
        optimizer.load_state_dict(_unpack(payload["optimizer"]))
    return model, payload


def prepare_pairs(manifest_path, image_size):
    """Load manifest pairs, resize images to the working resolution, and
    carry the supervision into that frame."""
    pairs = []
    for rec in load_manifest(manifest_path):
        img_a, img_b = load_pair_images(rec)
        img_a, scale_a = preprocess(img_a, image_size)
        img_b, scale_b = preprocess(img_b, image_size)
        entry = {"name": rec["name"], "image_a": img_a, "image_b": img_b}
        if "homography" in rec:
            entry["homography"] = remap_homography(rec["homography"], scale_a, scale_b)
        else:
            entry["pose"] = rec["pose"]   # poses assume pre-sized images
        pairs.append(entry)
    return pairs


def pair_proposals(model, pair, pyr_a, pyr_b, cfg: RunConfig, seed):
    if cfg.proposal_source == "oracle":
        if "homography" not in pair:
            raise ValueError("oracle proposals need homography supervision")
        return oracle_match(pair["homography"], cfg.oracle_count,
                            jitter=cfg.oracle_jitter,
                            image_size=cfg.image_size, seed=seed)
    if cfg.proposal_source == "nc":
        return nc_match(pyr_a, pyr_b, score_threshold=None, matcher=model.matcher)
    raise ValueError(f"unknown proposal source {cfg.proposal_source!r}")


def _mean_report(reports):
    vals = {}
    for f in LossReport.FIELDS:
        xs = [getattr(r, f) for r in reports]
        if f == "flagged":
            vals[f] = any(xs)
        elif f.endswith("count") or f.startswith(("pos_", "neg_")):
            vals[f] = int(np.sum(xs))
        else:
            vals[f] = float(np.mean(xs))
    return LossReport(**vals)


def _lr_for_epoch(cfg, epoch):
    return cfg.lr_initial if epoch <= cfg.lr_drop_epoch else cfg.lr_after_drop


def train(config: RunConfig, manifest_path, out_dir, resume=None,
          log_name="train_log.csv"):
    """Run the optimization; returns the path of the final checkpoint.

    Writes per-step CSV log rows, an epoch checkpoint series, and the
    fully-resolved configuration next to the outputs.
    """
    os.makedirs(out_dir, exist_ok=True)
    config.to_json(os.path.join(out_dir, "resolved_config.json"))
    torch.manual_seed(config.seed)
    if resume:
        model, payload = load_checkpoint(resume)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
        if "optimizer" in payload:
            optimizer.load_state_dict(_unpack(payload["optimizer"]))
        start_step = payload["step"]
    else:
        model = MatchModel(config)
        optimizer = torch.optim.Adam(model.parameters(), lr=config.lr_initial)
        start_step = 0
    for p in model.matcher.parameters():
        p.requires_grad_(False)   # proposal matcher stays fixed here

    pairs = prepare_pairs(manifest_path, config.image_size)
    supervisions = [supervision_for_pair(p) for p in pairs]
    steps_per_epoch = max(1, math.ceil(len(pairs) / config.batch_pairs))
    loss_cfg = config.loss_config()

    log_path = os.path.join(out_dir, log_name)
    mode = "a" if resume else "w"
    log = open(log_path, mode)
    if not resume:
        log.write("step,epoch,lr," + LossReport.csv_header() + "\n")

    epoch_means, step = [], start_step
    final_ckpt = os.path.join(out_dir, "checkpoint_final.pt")
    try:
        epoch = step // steps_per_epoch + 1
        while epoch <= config.max_epochs:
            lr = _lr_for_epoch(config, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            epoch_losses = []
            while step < epoch * steps_per_epoch:
                order = np.random.default_rng(
                    config.seed * 7919 + step // steps_per_epoch).permutation(len(pairs))
                base = (step % steps_per_epoch) * config.batch_pairs
                batch_ids = order[base:base + config.batch_pairs]
                optimizer.zero_grad()
                batch_loss = 0.0
                reports = []
                for pid in batch_ids:
                    pair = pairs[pid]
                    pyr_a = extract_pyramid(pair["image_a"], model.backbone)
                    pyr_b = extract_pyramid(pair["image_b"], model.backbone)
                    props = pair_proposals(model, pair, pyr_a, pyr_b, config,
                                           seed=config.seed + 31 * step + int(pid))
                    props = sample_proposals(props, config.per_pair_proposals,
                                             seed=config.seed + 17 * step + int(pid))
                    if config.expand:
                        props = expand_proposals(props, config.expansion_offset)
                    refined = refine_matches(pyr_a, pyr_b, props, model.refiner)
                    pair_loss, report = total_loss(refined, supervisions[pid], loss_cfg)
                    batch_loss = batch_loss + pair_loss
                    reports.append(report)
                batch_loss = batch_loss / max(len(batch_ids), 1)
                if not torch.isfinite(batch_loss):
                    dump = os.path.join(out_dir, f"nan_batch_step{step}.json")
                    with open(dump, "w") as fh:
                        json.dump({"step": step,
                                   "pairs": [pairs[i]["name"] for i in batch_ids]}, fh)
                    raise RuntimeError(f"non-finite loss at step {step}; batch dumped to {dump}")
                batch_loss.backward()
                optimizer.step()
                step += 1
                report = _mean_report(reports)
                epoch_losses.append(report.total)
                log.write(f"{step},{epoch},{lr!r},{report.csv_row()}\n")
                log.flush()
                if config.max_steps and step >= config.max_steps:
                    raise StopIteration
            epoch_means.append(float(np.mean(epoch_losses)) if epoch_losses else 0.0)
            save_checkpoint(os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.pt"),
                            model, optimizer, epoch=epoch, step=step)
            if _converged(epoch_means, config):
                break
            epoch += 1
    except StopIteration:
        pass
    finally:
        log.close()
    save_checkpoint(final_ckpt, model, optimizer,
                    epoch=step // steps_per_epoch, step=step)
    return final_ckpt


def _converged(epoch_means, cfg):
    k = cfg.convergence_patience
    if len(epoch_means) <= k:
        return False
    recent = epoch_means[-(k + 1):]
    for prev, cur in zip(recent[:-1], recent[1:]):
        if prev <= 0 or (prev - cur) / abs(prev) >= cfg.convergence_rel_tol:
            return False
    return True


def match_pair(model, pair, proposal_source="nc", confidence=None,
               expand=False, seed=0, external=None):
    """Full inference for one prepared pair: proposals -> refinement ->
    confidence filtering. Returns (refined, proposals)."""
    cfg = model.run_config
    model.eval()
    pyr_a = extract_pyramid(pair["image_a"], model.backbone)
    pyr_b = extract_pyramid(pair["image_b"], model.backbone)
    if proposal_source == "nc":
        props = nc_match(pyr_a, pyr_b, score_threshold=cfg.nc_score_threshold,
                         matcher=model.matcher)
    elif proposal_source == "oracle":
        props = oracle_match(pair["homography"], cfg.oracle_count,
                             jitter=cfg.oracle_jitter,
                             image_size=cfg.image_size, seed=seed)
    elif proposal_source == "external":
        props = external
    else:
        raise ValueError(f"unknown proposal source {proposal_source!r}")
    if expand:
        props = expand_proposals(props, cfg.expansion_offset)
    with torch.no_grad():
        refined = refine_matches(pyr_a, pyr_b, props, model.refiner)
    c = cfg.confidence_threshold if confidence is None else confidence
    return filter_by_confidence(refined, c), props


def evaluate_checkpoint(checkpoint_path, manifest_path, out_dir=None,
                        proposal_source="nc", confidence=None, seed=0,
                        ransac_threshold=2.0):
    """MMA and homography suites of a checkpoint on a held-out manifest.

    Returns the EvalReport; appends a JSON line per run to results.jsonl
    when out_dir is given.
    """
    import time
    from .evaluation import (EvalReport, aggregate_mma, homography_benchmark,
                             mma as mma_curve)
    model, _ = load_checkpoint(checkpoint_path)
    pairs = prepare_pairs(manifest_path, model.run_config.image_size)
    t0 = time.perf_counter()
    curves, match_sets, gts, sizes, per_pair = [], [], [], [], []
    for i, pair in enumerate(pairs):
        refined, _ = match_pair(model, pair, proposal_source=proposal_source,
                                confidence=confidence, seed=seed + i)
        fine = refined.fine_numpy()
        curves.append(mma_curve(fine, pair["homography"]))
        match_sets.append(fine)
        gts.append(pair["homography"])
        sizes.append(model.run_config.image_size)
        per_pair.append({"name": pair["name"], "matches": int(len(fine))})
    acc, errors = homography_benchmark(match_sets, gts, sizes,
                                       ransac_threshold=ransac_threshold, seed=seed)
    for rec, err in zip(per_pair, errors):
        rec["corner_error"] = float(err) if np.isfinite(err) else None
    report = EvalReport(
        mma=aggregate_mma(curves),
        homography_acc=acc,
        match_count=float(np.mean([len(m) for m in match_sets])) if match_sets else 0.0,
        pair_count=len(pairs),
        per_pair=per_pair,
        runtime_seconds=time.perf_counter() - t0,
    )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "results.jsonl"), "a") as fh:
            fh.write(json.dumps({
                "checkpoint": os.path.basename(checkpoint_path),
                "schema_version": report.schema_version,
                "mma": {str(k): v for k, v in report.mma.items()},
                "homography_acc": {str(k): v for k, v in report.homography_acc.items()},
                "match_count": report.match_count,
            }) + "\n")
    return report
