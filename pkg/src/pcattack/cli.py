"""Command line interface.

Exit codes: 0 success, 1 validation error, 2 partial failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, RunConfig, load_config, parse_defense
from . import harness

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file or run manifest")
    p.add_argument("--dataset", help="directory of same-sized PNG images")
    p.add_argument("--image-size", type=int, dest="image_size")
    p.add_argument("--checkpoint", help="VAE checkpoint path")
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--seed", type=int, help="master seed (default 3407)")
    p.add_argument("--limit", type=int, help="use only the first N images")


def _add_attack(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("attack")
    g.add_argument("--epsilon", type=float, help="L-inf budget in 1/255 units (default 16)")
    g.add_argument("--alpha", type=float, help="step size in 1/255 units (default 2)")
    g.add_argument("--steps", type=int, help="iterations (default 40)")
    g.add_argument("--variance-target", type=float, dest="variance_target", help="target variance v")
    g.add_argument("--direction", choices=["minimize", "maximize"])
    g.add_argument("--criterion", choices=["reverse_kl", "collapse", "forward_kl", "mse"])
    g.add_argument("--in-loop", dest="in_loop_transform", help="differentiable defense inside the loop, e.g. gaussian_blur")


def _add_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protected", help="directory of protected PNGs (default OUT/adversarial)")
    p.add_argument("--defense", action="append", dest="defenses", help="defense applied before encoding; repeatable, e.g. jpeg:quality=50")
    p.add_argument("--metrics", help="comma-separated metric ids (default psnr,ssim,acdm)")
    p.add_argument("--recon-mode", choices=["mean", "sample"], dest="recon_mode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pcattack", description="Posterior collapse attacks on VAE encoders")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write the synthetic-shapes corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=5000)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--seed", type=int, default=3407)

    p = sub.add_parser("train-vae", help="train the surrogate VAE")
    _add_common(p)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int, dest="batch_size")
    g.add_argument("--lr", type=float, dest="learning_rate")
    g.add_argument("--beta", type=float)

    p = sub.add_parser("protect", help="craft adversarial PNGs for a dataset")
    _add_common(p)
    _add_attack(p)

    p = sub.add_parser("evaluate", help="reconstruction-based IQA of protected images")
    _add_common(p)
    _add_attack(p)
    _add_eval(p)

    p = sub.add_parser("ablate", help="sweep one attack hyperparameter")
    _add_common(p)
    _add_attack(p)
    p.add_argument("--axis", required=True, choices=list(harness.ABLATION_AXES))
    p.add_argument("--values", required=True, help="comma-separated values (checkpoint paths for surrogate)")

    p = sub.add_parser("plot-loss-surface", help="criterion grid over (mu, sigma^2)")
    p.add_argument("--criterion", default="reverse_kl", choices=["reverse_kl", "collapse", "forward_kl", "mse"])
    p.add_argument("--v", type=float, default=1.0)
    p.add_argument("--mu-range", default="-3,3")
    p.add_argument("--sigma2-range", default="0.1,4")
    p.add_argument("--resolution", type=int, default=61)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--image", help="optional PNG heat map path")

    p = sub.add_parser("benchmark", help="attack wall-clock per resolution")
    _add_common(p)
    _add_attack(p)
    p.add_argument("--sizes", default="32,64")
    return parser


_TOP = ("dataset", "image_size", "checkpoint", "output_dir", "seed", "limit", "protected", "recon_mode")
_ATTACK = ("epsilon", "alpha", "steps", "variance_target", "direction", "criterion", "in_loop_transform")
_TRAIN = ("epochs", "batch_size", "learning_rate", "beta")


def config_from_args(args) -> RunConfig:
    """Config file (if any) overlaid with every flag given on the command line."""
    data = load_config(args.config).to_dict() if getattr(args, "config", None) else RunConfig().to_dict()
    for key in _TOP:
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    for key in _ATTACK:
        value = getattr(args, key, None)
        if value is not None:
            data["attack"][key] = value
    for key in _TRAIN:
        value = getattr(args, key, None)
        if value is not None:
            data["train"][key] = value
    if getattr(args, "defenses", None):
        data["defenses"] = [parse_defense(d).to_dict() for d in args.defenses]
    if getattr(args, "metrics", None):
        data["metrics"] = [m.strip() for m in args.metrics.split(",") if m.strip()]
    return RunConfig.from_dict(data)


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(t) for t in text.split(","))
    return lo, hi


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-dataset":
            names = harness.cmd_make_dataset(args.out, args.count, args.size, args.seed)
            print(f"wrote {len(names)} images to {args.out}")
            return EXIT_OK
        if args.command == "plot-loss-surface":
            harness.cmd_plot_loss_surface(
                args.criterion, args.v, _pair(args.mu_range), _pair(args.sigma2_range), args.resolution, args.out, args.image
            )
            print(f"wrote {args.out}")
            return EXIT_OK

        cfg = config_from_args(args)
        if args.command == "train-vae":
            path = harness.cmd_train_vae(cfg)
            print(f"wrote {path}")
        elif args.command == "protect":
            outcome = harness.cmd_protect(cfg)
            print(f"protected {outcome.completed} images ({outcome.skipped} already done); manifest {outcome.manifest_path}")
            if outcome.failed:
                print(f"{len(outcome.failed)} images failed: {', '.join(outcome.failed[:10])}", file=sys.stderr)
            return outcome.exit_code
        elif args.command == "evaluate":
            summary = harness.cmd_evaluate(cfg)
            print(json.dumps(summary["aggregates"], indent=2, default=str))
        elif args.command == "ablate":
            rows = harness.cmd_ablate(cfg, args.axis, [v for v in args.values.split(",") if v])
            for r in rows:
                print(json.dumps(r))
        elif args.command == "benchmark":
            rows = harness.cmd_benchmark(cfg, [int(s) for s in args.sizes.split(",")])
            for r in rows:
                print(f"{r['size']:>5}px  {r['seconds']:.3f}s  (T={r['steps']}, d={r['latent_dim']})")
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
