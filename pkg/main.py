#!/usr/bin/env python3
"""
Command-line entry point for synthetic data generation, training, registration
and evaluation of the rotation-equivariant registration model.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

import argparse
import logging
import sys

import cv2
from dotenv import load_dotenv

logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EQUIVARIANCE_TOLERANCE = 1e-4


def cmd_synth_data(args) -> int:
    from config import load_config
    from datasynth import load_sprites, write_dataset

    overrides = {"seed": args.seed, "scale_range": args.scale_range, "image_size": args.image_size}
    if args.variant:
        overrides["variant"] = args.variant
    config = load_config(args.config, **overrides)
    ranges = config.synthesis_ranges()
    if args.scale_range is not None:
        # an explicit range switches scale sampling on (or off at 1.0) whatever the variant says
        ranges = ranges.model_copy(update={"scale_enabled": args.scale_range > 1.0})
    sprites = load_sprites(args.sprites) if args.sprites else None
    write_dataset(args.out, args.n, config.seed, ranges, config.grid_size, config.f_min, sprites)
    return EXIT_OK


def cmd_train(args) -> int:
    from config import load_config
    from pipeline import train

    overrides = {"epochs": args.epochs}
    if args.variant:
        overrides["variant"] = args.variant
    config = load_config(args.config, **overrides)
    state = train(config, args.out, data_dir=args.data)
    logger.info(f"Finished {state.epoch} epochs; final loss {state.loss_history[-1]['loss']:.4f}")
    return EXIT_OK


def cmd_register(args) -> int:
    from pipeline import Registrar, parse_rect, read_image, save_result

    variant = args.variant + ("*" if args.no_refine and not args.variant.endswith("*") else "")
    registrar = Registrar.from_checkpoint(args.ckpt, variant, args.threshold)
    rect = parse_rect(args.rect) if args.rect else None
    result = registrar.register(read_image(args.moving), read_image(args.fixed), rect=rect)
    out = save_result(result, args.out)
    t = result.transform
    logger.info(f"theta {t.theta:.6f} rad, scale {t.scale:.6f}, t ({t.tx:.3f}, {t.ty:.3f}) from "
                f"{len(result.matches)} matches; results in {out}")
    if result.failed:
        logger.warning(f"Registration failed ({result.message}); identity transform written")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from pipeline import Registrar, evaluate

    registrar = Registrar.from_checkpoint(args.ckpt, args.variant)
    evaluate(registrar, args.data, args.report, limit=args.limit)
    return EXIT_OK


def cmd_robustness(args) -> int:
    from metrics import robustness_summary
    from pipeline import Registrar, robustness

    registrar = Registrar.from_checkpoint(args.ckpt, args.variant)
    report = robustness(registrar, args.data, args.report, limit=args.limit)
    worst = robustness_summary(report)
    logger.info(f"Max std {worst['max_std_deg']:.2f} deg at residuals ({worst['residuals_at_max_std']}); "
                f"max extreme {worst['max_extreme_deg']:.2f} deg over {worst['pairs']} pairs, {worst['failed']} failed")
    return EXIT_OK


def cmd_equiv_check(args) -> int:
    import torch

    from backbone import Backbone, equivariance_report
    from config import load_config

    overrides = {"variant": args.variant} if args.variant else {}
    config = load_config(args.config, **overrides)
    torch.manual_seed(config.seed)
    report = equivariance_report(Backbone(config.backbone_config()), trials=args.trials, seed=config.seed)
    worst = report.groupby("layer")["residual"].max()
    for layer, residual in worst.items():
        logger.info(f"{layer:>16s}: max residual {residual:.3e}")
    if worst.max() > EQUIVARIANCE_TOLERANCE:
        logger.error(f"Equivariance residual {worst.max():.3e} exceeds {EQUIVARIANCE_TOLERANCE:g}")
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Rotation-equivariant image registration")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic training or evaluation set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-range", type=float, default=None, help="max scale factor; above 1 scale is sampled")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--variant", default=None, help="scale letter decides whether scale varies when --scale-range is absent")
    p.add_argument("--sprites", default=None, help="directory of raw images to crop sprites from")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train a model on a synthetic set")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--variant", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("register", help="register a moving image onto a fixed image")
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--variant", default="FFT")
    p.add_argument("--rect", default=None, help="x,y,w,h in pixels")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", help="four-rotation evaluation with DICE and CW-SSIM")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("robustness", help="detected-angle spread under quarter-turn pre-rotations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variant", default=None)
    p.add_argument("--report", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("equiv-check", help="quarter-turn equivariance residuals of the backbone")
    p.add_argument("--config", default=None)
    p.add_argument("--variant", default="TFF")
    p.add_argument("--trials", type=int, default=5)
    p.set_defaults(func=cmd_equiv_check)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    from errors import NumericalFailure, RoTIRError

    try:
        return args.func(args)
    except NumericalFailure as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except (RoTIRError, ValueError, FileNotFoundError, cv2.error) as e:
        logger.error(f"Validation error: {e}")
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
