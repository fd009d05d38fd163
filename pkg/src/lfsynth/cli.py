"""Command-line entry point.

Machine-readable results are printed to stdout as JSON; logs go to stderr.
Exit codes: 0 success, 2 usage or validation error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import ValidationError

from lfsynth.diffcore import Tensor
from lfsynth.errors import (
    ArgumentError,
    ConfigError,
    FormatError,
    IncompatibilityError,
    LightFieldError,
    NumericError,
    ShapeError,
)
from lfsynth.evaluation import run_ablation
from lfsynth.lfops import flow_to_color
from lfsynth.lightfield import (
    epi,
    evaluate_fields,
    load,
    load_array,
    load_image,
    refocus,
    save,
    save_array,
    write_png,
)
from lfsynth.model import forward, load_checkpoint, synth_hr_x4
from lfsynth.synthgen import DEFAULT_DISPARITY_RANGE, make_dataset
from lfsynth.trainer import TrainConfig, fit

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
USAGE_ERRORS = (
    ArgumentError,
    ShapeError,
    FormatError,
    ConfigError,
    IncompatibilityError,
    ValidationError,
    FileNotFoundError,
)


def configure_logging(level: str | None = None) -> None:
    """Send logs to stderr; level from the flag, else LFSYNTH_LOG_LEVEL, else INFO."""
    name = (level or os.environ.get("LFSYNTH_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format=LOG_FORMAT,
        stream=sys.stderr,
        force=True,
    )


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(part) for part in text.lower().split("x"))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from e
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise FormatError(f"{what} not found: {path}")
    return path


def cmd_gen_data(args: argparse.Namespace) -> dict[str, Any]:
    if args.views < 1 or args.views % 2 == 0:
        raise ArgumentError(f"views must be odd at desk scale, got {args.views}")
    manifest = make_dataset(
        n_scenes=args.scenes,
        hw=args.size,
        angular=args.views,
        seed=args.seed,
        out_dir=args.out,
        disparity_range=(args.disparity_min, args.disparity_max),
        eta=args.eta,
    )
    return {
        "manifest": str(Path(args.out) / "manifest.json"),
        "scenes": len(manifest["scenes"]),
        "disparity_range": manifest["disparity_range"],
    }


def _load_train_config(path: Path) -> TrainConfig:
    _require_file(path, "Config file")
    return TrainConfig.model_validate_json(path.read_text())


def cmd_train(args: argparse.Namespace) -> dict[str, Any]:
    config = _load_train_config(Path(args.config))
    _require_file(Path(args.corpus), "Corpus")
    result = fit(config, args.corpus, args.out, resume=args.resume)
    return {
        "checkpoint": str(result.checkpoint),
        "log": str(result.log),
        "iterations": result.state.iteration,
        "final": result.final_report.terms() if result.final_report else None,
    }


def cmd_synthesize(args: argparse.Namespace) -> dict[str, Any]:
    image = load_image(_require_file(Path(args.image), "Image"))
    params = load_checkpoint(_require_file(Path(args.ckpt), "Checkpoint"))
    config = params.config
    if image.shape[:2] != tuple(config.input_hw) or image.shape[2] != config.channels:
        raise ShapeError(
            f"image {args.image} has shape {image.shape}, checkpoint {args.ckpt} expects "
            f"{(*config.input_hw, config.channels)}"
        )
    center = Tensor(image)
    if args.x4:
        lf = synth_hr_x4(params, center)
        out = None
    else:
        out = forward(params, center, clamp=True)
        lf = out.lf_hr
    save(lf, args.out)
    result: dict[str, Any] = {"out": str(args.out), "shape": list(lf.shape)}
    if args.flow_out:
        flow = out.flow if out is not None else forward(params, center).flow
        save_array(flow.flows.data, args.flow_out)
        result["flow"] = str(args.flow_out)
    return result


def cmd_refocus(args: argparse.Namespace) -> dict[str, Any]:
    lf = load(_require_file(Path(args.lf), "Light field"))
    image = refocus(lf, args.slope)
    write_png(args.out, image)
    return {"out": str(args.out), "slope": args.slope}


def cmd_epi(args: argparse.Namespace) -> dict[str, Any]:
    lf = load(_require_file(Path(args.lf), "Light field"))
    v = lf.center_index[0] if args.v is None else args.v
    image = epi(lf, args.row, v)
    write_png(args.out, image)
    return {"out": str(args.out), "row": args.row, "v": v, "shape": list(image.shape)}


def cmd_flow_vis(args: argparse.Namespace) -> dict[str, Any]:
    flows = load_array(_require_file(Path(args.flow), "Flow file"))
    if flows.shape[-1] != 2:
        raise FormatError(f"{args.flow}: expected 2 flow components, got {flows.shape[-1]}")
    if not (0 <= args.v < flows.shape[0] and 0 <= args.u < flows.shape[1]):
        raise ArgumentError(f"view ({args.v}, {args.u}) outside grid {flows.shape[:2]}")
    peak = float(np.hypot(flows[..., 0], flows[..., 1]).max())
    rgb = flow_to_color(flows[args.v, args.u], max_magnitude=peak or None)
    write_png(args.out, rgb.astype(np.float64) / 255.0)
    return {"out": str(args.out), "v": args.v, "u": args.u, "max_magnitude": peak}


def cmd_eval(args: argparse.Namespace) -> dict[str, Any]:
    pred = load(_require_file(Path(args.pred), "Prediction"))
    truth = load(_require_file(Path(args.truth), "Ground truth"))
    return evaluate_fields(pred, truth).model_dump()


def cmd_ablate(args: argparse.Namespace) -> dict[str, Any]:
    config = _load_train_config(Path(args.config))
    _require_file(Path(args.corpus), "Corpus")
    table = run_ablation(config, args.corpus, args.out, eval_corpus=args.eval_corpus)
    return {"table": table, "out": str(Path(args.out) / "ablation.json")}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lfsynth", description="Single-image light-field synthesis"
    )
    parser.add_argument(
        "--log-level",
        default=None,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="overrides LFSYNTH_LOG_LEVEL",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic corpus")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--size", type=_size, required=True, help="HxW of the low-resolution views")
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--disparity-min", type=float, default=DEFAULT_DISPARITY_RANGE[0])
    p.add_argument("--disparity-max", type=float, default=DEFAULT_DISPARITY_RANGE[1])
    p.add_argument("--eta", type=float, default=0.8)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="two-stage training")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("synthesize", help="single image to high-resolution light field")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--x4", action="store_true", help="run the network twice for 4x")
    p.add_argument("--flow-out", default=None)
    p.set_defaults(handler=cmd_synthesize)

    p = sub.add_parser("refocus", help="shift-and-average refocused image")
    p.add_argument("--lf", required=True)
    p.add_argument("--slope", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_refocus)

    p = sub.add_parser("epi", help="horizontal epipolar-plane image")
    p.add_argument("--lf", required=True)
    p.add_argument("--row", type=int, required=True)
    p.add_argument("--v", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_epi)

    p = sub.add_parser("flow-vis", help="colour-wheel rendering of one view's flow")
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--v", type=int, default=0)
    p.add_argument("--u", type=int, default=0)
    p.set_defaults(handler=cmd_flow_vis)

    p = sub.add_parser("eval", help="PSNR/SSIM over non-center views")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare every residual order")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--eval-corpus", default=None)
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    configure_logging(args.log_level)
    handler: Callable[[argparse.Namespace], dict[str, Any]] = args.handler
    try:
        result = handler(args)
    except NumericError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_NUMERIC
    except USAGE_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except LightFieldError as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
