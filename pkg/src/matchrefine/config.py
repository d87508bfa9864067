"""Run configuration: one flat dataclass covering model, loss, schedule,
and data settings, loadable from JSON with CLI overrides on top."""

import json
from dataclasses import dataclass, asdict, fields

from .loss import LossConfig
from .refine import RefinerConfig


@dataclass
class RunConfig:
    seed: int = 0
    image_size: tuple = (480, 320)          # (W, H)
    backbone_profile: str = "toy"

    # refiner
    patch_size: int = 16
    expansion_offset: int = 8
    conv_channels: tuple = (32, 64)
    fc_width: int = 512
    confidence_threshold: float = 0.25

    # loss
    alpha: float = 10.0
    theta_cls_mid: float = 50.0
    theta_geo_mid: float = 50.0
    theta_cls_fine: float = 5.0
    theta_geo_fine: float = 5.0

    # schedule
    lr_initial: float = 5e-4
    lr_after_drop: float = 1e-4
    lr_drop_epoch: int = 5
    max_epochs: int = 50
    convergence_rel_tol: float = 0.01
    convergence_patience: int = 3
    batch_pairs: int = 4
    per_pair_proposals: int = 400
    expand: bool = True
    max_steps: int = 0                      # 0 = run by epochs only

    # proposals
    proposal_source: str = "oracle"         # oracle | nc
    oracle_count: int = 2500
    oracle_jitter: int = 12
    nc_score_threshold: float = 0.9
    fit_matcher_steps: int = 0

    def refiner_config(self):
        return RefinerConfig(
            patch_size=self.patch_size,
            expansion_offset=self.expansion_offset,
            conv_channels=tuple(self.conv_channels),
            fc_width=self.fc_width,
            confidence_threshold=self.confidence_threshold,
        )

    def loss_config(self):
        return LossConfig(
            alpha=self.alpha,
            theta_cls_mid=self.theta_cls_mid,
            theta_geo_mid=self.theta_geo_mid,
            theta_cls_fine=self.theta_cls_fine,
            theta_geo_fine=self.theta_geo_fine,
        )

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)


def load_config(path=None, overrides=None):
    """Build a RunConfig from an optional JSON file plus overrides."""
    values = {}
    if path:
        with open(path) as fh:
            values.update(json.load(fh))
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**values)
    cfg.image_size = tuple(cfg.image_size)
    cfg.conv_channels = tuple(cfg.conv_channels)
    return cfg
