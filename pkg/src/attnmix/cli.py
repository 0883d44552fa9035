"""Command-line entry point: ``attnmix`` / ``python -m attnmix``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import ALL_VARIANTS, REPORTS, ExperimentConfig, run_experiment
from .intervention import MixConfig


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnmix",
                                description="Toy dual-question attention mixing experiments.")
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--mode", action="append", choices=ALL_VARIANTS + ("all",),
                   help="variant to evaluate (repeatable, default all)")
    p.add_argument("--alpha", type=float, help="mixing weight on the image-side question")
    p.add_argument("--layers", help="all|early|middle|later or comma-separated layer indices")
    p.add_argument("--form", choices=("output", "strict"), help="mixing form")
    p.add_argument("--seed", type=int)
    p.add_argument("--chunks", type=int, help="context chunks per sample")
    p.add_argument("--distractor-frac", type=float, help="fraction of distractor chunks")
    p.add_argument("--n-eval", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", help="weights file; loaded if present, written after training")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--train", dest="train_model", action="store_true", default=None,
                   help="train when no checkpoint exists (default)")
    g.add_argument("--no-train", dest="train_model", action="store_false",
                   help="fail unless --checkpoint exists")
    p.add_argument("--report", action="append", choices=REPORTS, help="report to emit (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _parse_layers(text: str):
    if text in ("all", "early", "middle", "later"):
        return text
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise ValueError(f"--layers expects a preset or comma-separated integers, got {text!r}") from None


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.from_json(args.config).to_dict() if args.config else ExperimentConfig().to_dict()
    mix = dict(base["mix"])
    if args.alpha is not None:
        mix["alpha"] = args.alpha
    if args.layers is not None:
        mix["layers"] = _parse_layers(args.layers)
    if args.form is not None:
        mix["form"] = args.form
    base["mix"] = MixConfig.from_dict(mix)
    if args.mode:
        base["variants"] = list(ALL_VARIANTS) if "all" in args.mode else list(dict.fromkeys(args.mode))
    if args.report:
        base["reports"] = list(dict.fromkeys(args.report))
    for flag, key in (("seed", "seed"), ("chunks", "chunks_per_sample"),
                      ("distractor_frac", "distractor_fraction"), ("n_eval", "n_eval"),
                      ("out", "out_dir"), ("checkpoint", "checkpoint"), ("train_model", "train_model")):
        val = getattr(args, flag)
        if val is not None:
            base[key] = val
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        bundle = run_experiment(cfg)
    except Exception as exc:  # reported as JSON for scripted callers
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    for name, v in bundle.summary["variants"].items():
        print(f"{name:<11} acc={v['accuracy']:.3f}  rho_I={v['mean_rho_image']:.3f}  "
              f"rho_C={v['mean_rho_context']:.3f}  n={v['n']}")
    print(f"results in {bundle.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
