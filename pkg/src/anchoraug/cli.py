"""Command-line entry point: verify | train | eval | anchor-stats | render."""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .annotations import AnnotationError
from .checks import (
    EQUIVALENCE_TOLERANCE,
    GRADIENT_TOLERANCE,
    conv_fc_equivalence,
    gradient_check,
)
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    load_heads_for_config,
    render_stages,
    run_anchor_stats,
    run_eval,
    run_training,
)


def _load_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _cmd_verify(args) -> int:
    cfg = _load_config(args)
    rng = np.random.default_rng(cfg.seed)
    equivalence = conv_fc_equivalence(rng, instances=args.instances)
    gradients = gradient_check(rng)
    print(
        f"conv/fc equivalence: {equivalence.instances} instances, "
        f"{equivalence.cells_checked} cells, max abs diff {equivalence.max_abs_diff:.3e} "
        f"(tolerance {EQUIVALENCE_TOLERANCE:.0e}) -> "
        f"{'ok' if equivalence.passed else 'FAIL'}"
    )
    print(
        f"gradient check: {gradients.params_checked} parameters, "
        f"max rel error {gradients.max_rel_error:.3e} "
        f"(tolerance {GRADIENT_TOLERANCE:.0e}) -> "
        f"{'ok' if gradients.passed else 'FAIL'}"
    )
    for name, err in gradients.per_tensor.items():
        print(f"  {name}: {err:.3e}")
    return 0 if (equivalence.passed and gradients.passed) else 1


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out if args.out else cfg.output_dir
    result = run_training(cfg, out_dir=out_dir)
    final = result.document.get("loss_final_total")
    print(f"trained {cfg.iterations} iterations; final loss {final}")
    print(f"wrote {out_dir}/metrics.txt and {out_dir}/checkpoint.bin")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out if args.out else cfg.output_dir
    doc = run_eval(cfg, args.checkpoint, out_dir=out_dir)
    print(f"ar100 = {doc.get('ar100')} (baseline {doc.get('baseline_ar100')})")
    print(f"wrote {out_dir}/metrics.txt")
    return 0


def _cmd_anchor_stats(args) -> int:
    cfg = _load_config(args)
    out_dir = args.out if args.out else cfg.output_dir
    doc = run_anchor_stats(cfg, args.annotations, out_dir=out_dir)
    print(f"combined_mean_best_iou = {doc.get('combined_mean_best_iou')}")
    print(f"wrote {out_dir}/metrics.txt")
    return 0


def _cmd_render(args) -> int:
    cfg = _load_config(args)
    heads = load_heads_for_config(args.checkpoint, cfg) if args.checkpoint else None
    render_stages(cfg, heads, args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="anchoraug",
        description=(
            "Desk-scale region proposal lab: augment hand-designed anchors with a "
            "dilated conv sweep, refine them with the parameter-shared FC form."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, out_help: str) -> None:
        p.add_argument("--config", help="config file (key = value lines); defaults when omitted")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help=out_help)

    p = sub.add_parser("verify", help="run the conv/FC equivalence and gradient checks")
    common(p, "unused")
    p.add_argument("--instances", type=int, default=100, help="equivalence instances to run")
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("train", help="train on synthetic scenes, write metrics + checkpoint")
    common(p, "output directory (default: config output_dir)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    common(p, "output directory (default: config output_dir)")
    p.add_argument("--checkpoint", required=True, help="checkpoint written by train")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("anchor-stats", help="hand-designed anchor quality over annotations")
    common(p, "output directory (default: config output_dir)")
    p.add_argument("--annotations", required=True, help="COCO-layout JSON annotations")
    p.set_defaults(func=_cmd_anchor_stats)

    p = sub.add_parser("render", help="render hand/augmented/proposal stages to SVG")
    common(p, "output SVG path")
    p.add_argument("--checkpoint", help="optional checkpoint; fresh heads when omitted")
    p.set_defaults(func=_cmd_render)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "render" and not args.out:
        parser.error("render requires --out")
    try:
        return args.func(args)
    except (ConfigError, AnnotationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
