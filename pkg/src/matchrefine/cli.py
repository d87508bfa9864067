"""Command-line surface for batch experiments.

Subcommands: gen-data, train, match, eval-mma, eval-homography,
quantize, viz. Every run echoes its fully-resolved configuration next
to its outputs; failures print one machine-readable JSON error line on
stderr and exit nonzero.
"""

import argparse
import json
import os
import sys

import numpy as np

from .config import load_config
from .fileio import load_manifest, load_matches, save_matches


def _add_common(p):
    p.add_argument("--config", help="JSON run configuration file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")


def _config_from(args, **overrides):
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    return load_config(getattr(args, "config", None), overrides)


def _echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    cfg.to_json(os.path.join(out_dir, "resolved_config.json"))


def cmd_gen_data(args):
    from .data import generate_dataset
    cfg = _config_from(args)
    _echo_config(cfg, args.out)
    manifest = generate_dataset(
        args.out, args.pairs, image_size=cfg.image_size,
        warp_magnitude=args.warp, photometric_jitter=args.photometric,
        seed=cfg.seed)
    print(manifest)
    return 0


def cmd_train(args):
    from .train import train
    overrides = {}
    if args.steps:
        overrides["max_steps"] = args.steps
    if args.proposals:
        overrides["proposal_source"] = args.proposals
    cfg = _config_from(args, **overrides)
    ckpt = train(cfg, args.manifest, args.out, resume=args.resume)
    print(ckpt)
    return 0


def _parse_proposal_source(selector):
    if selector.startswith("external:"):
        return "external", selector.split(":", 1)[1]
    if selector in ("nc", "oracle"):
        return selector, None
    raise ValueError(f"unknown proposal source {selector!r}")


def cmd_match(args):
    from .proposals import load_external_proposals
    from .train import load_checkpoint, match_pair, prepare_pairs
    model, _ = load_checkpoint(args.checkpoint)
    _echo_config(model.run_config, args.out)
    source, ext_path = _parse_proposal_source(args.proposals)
    external = load_external_proposals(ext_path) if ext_path else None
    pairs = prepare_pairs(args.manifest, model.run_config.image_size)
    for i, pair in enumerate(pairs):
        refined, _ = match_pair(model, pair, proposal_source=source,
                                confidence=args.confidence,
                                expand=args.expand,
                                seed=(model.run_config.seed if args.seed is None
                                      else args.seed) + i,
                                external=external)
        out_path = os.path.join(args.out, f"{pair['name']}.txt")
        save_matches(out_path, refined.fine_numpy(), refined.score_columns())
    print(args.out)
    return 0


def _load_match_dir(matches_dir, pairs):
    sets = []
    for pair in pairs:
        path = os.path.join(matches_dir, f"{pair['name']}.txt")
        m, extras = load_matches(path)
        sets.append((m, extras))
    return sets


def cmd_eval_mma(args):
    from .evaluation import EvalReport, aggregate_mma, mma
    from .train import prepare_pairs
    cfg = _config_from(args)
    _echo_config(cfg, args.out)
    pairs = prepare_pairs(args.manifest, cfg.image_size)
    curves = []
    per_pair = []
    for pair, (m, _) in zip(pairs, _load_match_dir(args.matches_dir, pairs)):
        curves.append(mma(m, pair["homography"]))
        per_pair.append({"name": pair["name"], "matches": int(len(m))})
    report = EvalReport(mma=aggregate_mma(curves), pair_count=len(pairs),
                        per_pair=per_pair)
    report.to_json(os.path.join(args.out, "mma_report.json"))
    report.mma_csv(os.path.join(args.out, "mma_curve.csv"))
    print(json.dumps({str(k): v for k, v in report.mma.items()}))
    return 0


def cmd_eval_homography(args):
    from .evaluation import EvalReport, homography_benchmark
    from .train import prepare_pairs
    cfg = _config_from(args)
    _echo_config(cfg, args.out)
    pairs = prepare_pairs(args.manifest, cfg.image_size)
    sets = [m for m, _ in _load_match_dir(args.matches_dir, pairs)]
    gts = [p["homography"] for p in pairs]
    sizes = [cfg.image_size] * len(pairs)
    acc, errors = homography_benchmark(sets, gts, sizes,
                                       ransac_threshold=args.ransac_threshold,
                                       seed=cfg.seed)
    per_pair = [{"name": p["name"],
                 "corner_error": float(e) if np.isfinite(e) else None}
                for p, e in zip(pairs, errors)]
    report = EvalReport(homography_acc=acc, pair_count=len(pairs),
                        per_pair=per_pair)
    report.to_json(os.path.join(args.out, "homography_report.json"))
    print(json.dumps({str(k): v for k, v in acc.items()}))
    return 0


def cmd_quantize(args):
    from .evaluation import quantize_matches
    cfg = _config_from(args)
    _echo_config(cfg, args.out)
    for name in sorted(os.listdir(args.matches_dir)):
        if not name.endswith(".txt"):
            continue
        m, extras = load_matches(os.path.join(args.matches_dir, name))
        conf = extras[:, 0] if extras is not None else np.ones(len(m))
        q, qconf, qextras = quantize_matches(m, conf, extras, radius=args.radius)
        save_matches(os.path.join(args.out, name), q,
                     qextras if qextras is not None else qconf)
    print(args.out)
    return 0


def cmd_viz(args):
    from .evaluation import visualize_matches
    from .train import prepare_pairs
    cfg = _config_from(args)
    _echo_config(cfg, args.out)
    pairs = prepare_pairs(args.manifest, cfg.image_size)
    for pair, (m, extras) in zip(pairs, _load_match_dir(args.matches_dir, pairs)):
        conf = extras[:, 0] if extras is not None else None
        visualize_matches(pair["image_a"], pair["image_b"], m, conf,
                          os.path.join(args.out, f"{pair['name']}.png"))
    print(args.out)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="matchrefine",
        description="two-stage correspondence matching pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build a synthetic dataset manifest")
    _add_common(p)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--warp", type=float, default=0.1)
    p.add_argument("--photometric", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run training")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, default=0, help="hard step cap")
    p.add_argument("--proposals", choices=["nc", "oracle"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="proposals + refinement over a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--proposals", default="nc",
                   help="nc, oracle, or external:<path>")
    p.add_argument("--confidence", type=float, default=0.25)
    p.add_argument("--expand", action="store_true")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval-mma", help="mean matching accuracy suite")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--matches-dir", required=True)
    p.set_defaults(func=cmd_eval_mma)

    p = sub.add_parser("eval-homography", help="homography corner-correctness suite")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--matches-dir", required=True)
    p.add_argument("--ransac-threshold", type=float, default=2.0)
    p.set_defaults(func=cmd_eval_homography)

    p = sub.add_parser("quantize", help="merge nearby keypoints in match files")
    _add_common(p)
    p.add_argument("--matches-dir", required=True)
    p.add_argument("--radius", type=float, default=4.0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("viz", help="confidence-colored match plots")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--matches-dir", required=True)
    p.set_defaults(func=cmd_viz)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # one machine-readable line, nonzero exit
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
