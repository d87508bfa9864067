"""End-to-end acceptance checks for the full matching pipeline.

Each test states a user-visible guarantee: numerical equivalence with
independent oracles, gradient correctness, trained refinement quality on
held-out pairs, determinism, and command-line operability — all with
explicit runtime budgets.
"""

import json
import os
import time

import numpy as np
import pytest
import torch

from matchrefine.cli import main
from matchrefine.config import RunConfig
from matchrefine.data import generate_dataset, synth_base_image, synth_pair
from matchrefine.evaluation import (aggregate_mma, homography_benchmark, mma,
                                    quantize_matches, _greedy_cluster_pass)
from matchrefine.features import Backbone, extract_pyramid
from matchrefine.fileio import save_matches
from matchrefine.geometry import (apply_homography,
                                  gt_correspondences_from_homography,
                                  sampson_distance)
from matchrefine.loss import (HomographySupervision, LossConfig,
                              balance_weight, total_loss, weighted_bce)
from matchrefine.proposals import ProposalSet, mutual_argmax, nc_match, oracle_match
from matchrefine.refine import (ProgressiveRefiner, RefinerConfig,
                                expand_proposals, refine_matches)
from matchrefine.train import load_checkpoint, match_pair, prepare_pairs, train
from conftest import finite_difference_agreement
from test_eval import reference_greedy


class TestSampsonOracle:
    def test_matches_brute_force_on_10k_random_inputs(self):
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        for _ in range(10_000):
            F = rng.normal(size=(3, 3))
            match = rng.uniform(-50, 50, 4)
            pa = np.array([match[0], match[1], 1.0])
            pb = np.array([match[2], match[3], 1.0])
            num = float(pb @ F @ pa) ** 2
            Fa = F @ pa
            Ftb = F.T @ pb
            den = Fa[0] ** 2 + Fa[1] ** 2 + Ftb[0] ** 2 + Ftb[1] ** 2
            expected = num / den
            got = sampson_distance(match, F)
            assert abs(got - expected) <= 1e-9 * max(abs(expected), 1e-300)
        assert time.perf_counter() - t0 < 5.0


class TestGradientVerification:
    def test_analytic_gradients_match_finite_differences(self):
        t0 = time.perf_counter()
        torch.manual_seed(0)
        bb = Backbone([3, 8, 8, 16, 32]).double()
        refiner = ProgressiveRefiner(
            2 * bb.gather_channels,
            RefinerConfig(conv_channels=(16, 32), fc_width=128)).double()
        frozen = []
        for i in range(4):
            base = synth_base_image((96, 64), seed=i)
            tp = synth_pair(base, warp_magnitude=0.08, seed=i)
            pyr_a = extract_pyramid(tp.image_a, bb)
            pyr_b = extract_pyramid(tp.image_b, bb)
            gt = gt_correspondences_from_homography(tp.homography, 1, (96, 64))
            props = oracle_match(gt, 64, jitter=12, image_size=(96, 64), seed=i)
            frozen.append((pyr_a, pyr_b, props,
                           HomographySupervision(tp.homography)))
        loss_cfg = LossConfig()

        def loss_fn():
            total = 0.0
            for pyr_a, pyr_b, props, sup in frozen:
                refined = refine_matches(pyr_a, pyr_b, props, refiner)
                value, _ = total_loss(refined, sup, loss_cfg)
                total = total + value
            return total

        frac = finite_difference_agreement(
            loss_fn, list(refiner.parameters()),
            n_samples=200, step=1e-3, rtol=1e-3, seed=0)
        assert frac >= 0.95
        assert time.perf_counter() - t0 < 120.0


class TestBalancedBceHandCheck:
    def test_two_sample_hand_value(self):
        conf = torch.tensor([0.5, 0.5])
        labels = torch.tensor([1.0, 0.0])
        value = float(weighted_bce(conf, labels))
        assert value == pytest.approx(0.693147, abs=1e-6)

    def test_weight_is_negative_to_positive_ratio(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            n = int(rng.integers(2, 200))
            labels = torch.tensor(rng.integers(0, 2, n).astype(np.float32))
            pos = float((labels > 0.5).sum())
            neg = n - pos
            w, flagged = balance_weight(labels)
            if pos == 0 or neg == 0:
                assert w == 1.0 and flagged
            else:
                assert w == neg / pos and not flagged


@pytest.fixture(scope="module")
def refinement_experiment(tmp_path_factory):
    """Train the refiner on 30 synthetic pairs, then evaluate raw vs
    refined matches on 200 held-out pairs."""
    root = tmp_path_factory.mktemp("exp")
    train_manifest = generate_dataset(str(root / "train"), 30,
                                      image_size=(96, 64), seed=1)
    cfg = RunConfig(seed=0, image_size=(96, 64), backbone_profile="slim",
                    conv_channels=(16, 32), fc_width=128,
                    per_pair_proposals=64, expand=False,
                    oracle_count=200, batch_pairs=4, max_steps=2500,
                    lr_initial=1e-3, lr_after_drop=2e-4, lr_drop_epoch=250,
                    max_epochs=400, convergence_patience=10000)
    t0 = time.perf_counter()
    ckpt = train(cfg, train_manifest, str(root / "run"))
    train_seconds = time.perf_counter() - t0

    held_manifest = generate_dataset(str(root / "held"), 200,
                                     image_size=(96, 64), seed=5)
    model, _ = load_checkpoint(ckpt)
    pairs = prepare_pairs(held_manifest, cfg.image_size)
    raw_curves, ref_curves = [], []
    raw_sets, ref_sets, gts, sizes = [], [], [], []
    for i, pair in enumerate(pairs):
        props = oracle_match(pair["homography"], cfg.oracle_count,
                             jitter=cfg.oracle_jitter,
                             image_size=cfg.image_size, seed=100 + i)
        refined, _ = match_pair(model, pair, proposal_source="oracle",
                                seed=100 + i)
        fine = refined.fine_numpy()
        raw_curves.append(mma(props.matches, pair["homography"]))
        ref_curves.append(mma(fine, pair["homography"]))
        raw_sets.append(props.matches)
        ref_sets.append(fine)
        gts.append(pair["homography"])
        sizes.append(cfg.image_size)
    raw_acc, _ = homography_benchmark(raw_sets, gts, sizes, seed=0)
    ref_acc, _ = homography_benchmark(ref_sets, gts, sizes, seed=0)
    return {"raw_mma": aggregate_mma(raw_curves),
            "ref_mma": aggregate_mma(ref_curves),
            "raw_acc": raw_acc, "ref_acc": ref_acc,
            "train_seconds": train_seconds}


class TestOracleRefinementExperiment:
    def test_training_fits_cpu_budget(self, refinement_experiment):
        assert refinement_experiment["train_seconds"] < 4 * 3600

    def test_raw_proposals_fail_at_one_pixel(self, refinement_experiment):
        assert refinement_experiment["raw_acc"][1.0] <= 0.02

    def test_refined_mma_at_three_pixels(self, refinement_experiment):
        assert refinement_experiment["ref_mma"][3] >= 0.60

    def test_homography_accuracy_gain_at_three_pixels(self, refinement_experiment):
        gain = (refinement_experiment["ref_acc"][3.0]
                - refinement_experiment["raw_acc"][3.0])
        assert gain >= 0.25

    def test_refinement_never_hurts_mma(self, refinement_experiment):
        raw = refinement_experiment["raw_mma"]
        ref = refinement_experiment["ref_mma"]
        for t in sorted(raw):
            assert ref[t] >= raw[t]


class TestExpansionInvariants:
    def test_thousand_random_proposals(self):
        rng = np.random.default_rng(2)
        props = ProposalSet(rng.uniform(20, 300, (1000, 4)))
        d, S = 8, 16
        t0 = time.perf_counter()
        children = expand_proposals(props, d)
        assert len(children) == 8 * len(props)
        parents = np.repeat(props.matches, 8, axis=0)
        da = children.matches[:, :2] - parents[:, :2]
        db = children.matches[:, 2:] - parents[:, 2:]
        moved_a = np.any(da != 0, axis=1)
        moved_b = np.any(db != 0, axis=1)
        assert np.all(moved_a != moved_b)
        moved = np.where(moved_a[:, None], da, db)
        assert np.allclose(np.abs(moved), d)
        # on each side the child patch centers span [-d, d]^2, so the
        # union of S x S patches covers the 2S x 2S region
        for side, mask in ((0, moved_a), (2, moved_b)):
            centers = children.matches[mask][:, side:side + 2] \
                - parents[mask][:, side:side + 2]
            group = centers.reshape(-1, 4, 2)
            assert np.allclose(group.min(axis=1), -d)
            assert np.allclose(group.max(axis=1), d)
        assert time.perf_counter() - t0 < 1.0


class TestProposalMatcherSanity:
    def test_identical_image_self_matching(self):
        torch.manual_seed(3)
        bb = Backbone("toy")
        rng = np.random.default_rng(5)
        img = rng.integers(0, 255, (128, 160, 3)).astype(np.uint8)
        pyr = extract_pyramid(img, bb)
        props = nc_match(pyr, pyr, score_threshold=0.9)
        assert len(props) > 10
        diag = (np.abs(props.matches[:, 0] - props.matches[:, 2]) <= 8) \
            & (np.abs(props.matches[:, 1] - props.matches[:, 3]) <= 8)
        assert diag.mean() >= 0.95

    def test_translation_recovered_as_displacement_mode(self):
        torch.manual_seed(4)
        bb = Backbone("toy")
        base = synth_base_image((224, 128), seed=8)
        pyr_a = extract_pyramid(base[:, 32:192], bb)
        pyr_b = extract_pyramid(base[:, 0:160], bb)
        props = nc_match(pyr_a, pyr_b, score_threshold=None)
        dx = props.matches[:, 2] - props.matches[:, 0]
        values, counts = np.unique(dx, return_counts=True)
        assert values[np.argmax(counts)] == 32

    def test_tiny_instance_equals_brute_force(self):
        torch.manual_seed(5)
        scores = torch.rand(4, 4, 4, 4)
        cells, _ = mutual_argmax(scores)
        flat = scores.reshape(16, 16)
        expected = []
        for ia in range(16):
            ib = int(flat[ia].argmax())
            if int(flat[:, ib].argmax()) == ia:
                expected.append((ia // 4, ia % 4, ib // 4, ib % 4))
        assert [tuple(c.tolist()) for c in cells] == expected


class TestQuantizationProperties:
    def test_thousand_random_sets(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            n = int(rng.integers(1, 25))
            matches = rng.uniform(0, 40, (n, 4))
            conf = rng.uniform(0, 1, n)
            q1, c1, _ = quantize_matches(matches, conf, radius=4.0)
            q2, c2, _ = quantize_matches(q1, c1, radius=4.0)
            assert np.allclose(q1, q2) and np.allclose(c1, c2)
            # quantized keypoint pairs are unique on both sides jointly
            keys = {tuple(np.round(r, 9)) for r in q1}
            assert len(keys) == len(q1)

    def test_greedy_replay_equivalence(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            pts = rng.uniform(0, 30, (int(rng.integers(2, 40)), 2))
            order = rng.permutation(len(pts))
            assign, means = _greedy_cluster_pass(pts, order, 4.0)
            ref_assign, ref_means = reference_greedy(pts, order, 4.0)
            assert all(assign[i] == ref_assign[i] for i in range(len(pts)))
            assert np.allclose(means, ref_means)


class TestDeterminism:
    def test_fifty_step_training_runs_byte_identical(self, tmp_path):
        manifest = generate_dataset(str(tmp_path / "data"), 4,
                                    image_size=(96, 64), seed=0)
        cfg = RunConfig(seed=0, image_size=(96, 64), backbone_profile="slim",
                        conv_channels=(8, 16), fc_width=32,
                        per_pair_proposals=16, expand=False, oracle_count=32,
                        batch_pairs=2, max_steps=50, max_epochs=50,
                        convergence_patience=10000)
        train(cfg, manifest, str(tmp_path / "a"))
        train(cfg, manifest, str(tmp_path / "b"))
        log_a = open(tmp_path / "a" / "train_log.csv", "rb").read()
        log_b = open(tmp_path / "b" / "train_log.csv", "rb").read()
        assert log_a == log_b
        ckpt_a = open(tmp_path / "a" / "checkpoint_final.pt", "rb").read()
        ckpt_b = open(tmp_path / "b" / "checkpoint_final.pt", "rb").read()
        assert ckpt_a == ckpt_b

    def test_homography_evaluation_reproducible(self, tmp_path):
        manifest = generate_dataset(str(tmp_path / "data"), 3,
                                    image_size=(96, 64), seed=2)
        cfg_path = str(tmp_path / "cfg.json")
        json.dump({"image_size": [96, 64]}, open(cfg_path, "w"))
        matches_dir = tmp_path / "matches"
        matches_dir.mkdir()
        rng = np.random.default_rng(3)
        for i, pair in enumerate(prepare_pairs(manifest, (96, 64))):
            pa = rng.uniform(5, 60, (80, 2))
            pb = apply_homography(pair["homography"], pa)
            noisy = np.hstack([pa, pb + rng.normal(scale=1.0, size=pb.shape)])
            save_matches(str(matches_dir / f"{pair['name']}.txt"), noisy)
        reports = []
        for out in ("e1", "e2"):
            assert main(["eval-homography", "--config", cfg_path,
                         "--manifest", manifest,
                         "--matches-dir", str(matches_dir),
                         "--out", str(tmp_path / out)]) == 0
            reports.append(
                open(tmp_path / out / "homography_report.json", "rb").read())
        assert reports[0] == reports[1]


class TestCommandLineSmoke:
    def test_full_pipeline_within_budget(self, tmp_path):
        t0 = time.perf_counter()
        cfg_path = str(tmp_path / "cfg.json")
        json.dump({"image_size": [96, 64], "backbone_profile": "slim",
                   "conv_channels": [8, 16], "fc_width": 32,
                   "per_pair_proposals": 16, "expand": False,
                   "oracle_count": 32, "batch_pairs": 2,
                   "proposal_source": "oracle", "max_epochs": 200,
                   "convergence_patience": 10000},
                  open(cfg_path, "w"))
        data = str(tmp_path / "data")
        assert main(["gen-data", "--config", cfg_path, "--out", data,
                     "--pairs", "6", "--seed", "0"]) == 0
        manifest = os.path.join(data, "manifest.json")
        run = str(tmp_path / "run")
        assert main(["train", "--config", cfg_path, "--manifest", manifest,
                     "--out", run, "--steps", "200"]) == 0
        ckpt = os.path.join(run, "checkpoint_final.pt")
        matches = str(tmp_path / "matches")
        assert main(["match", "--config", cfg_path, "--manifest", manifest,
                     "--checkpoint", ckpt, "--proposals", "oracle",
                     "--confidence", "0.0", "--out", matches]) == 0
        assert main(["eval-mma", "--config", cfg_path, "--manifest", manifest,
                     "--matches-dir", matches,
                     "--out", str(tmp_path / "mma")]) == 0
        assert main(["eval-homography", "--config", cfg_path,
                     "--manifest", manifest, "--matches-dir", matches,
                     "--out", str(tmp_path / "hom")]) == 0
        assert main(["quantize", "--config", cfg_path,
                     "--matches-dir", matches,
                     "--out", str(tmp_path / "quant")]) == 0
        assert main(["viz", "--config", cfg_path, "--manifest", manifest,
                     "--matches-dir", matches,
                     "--out", str(tmp_path / "viz")]) == 0
        assert time.perf_counter() - t0 < 900.0
