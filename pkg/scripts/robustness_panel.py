"""Directional claims over a panel of seeds (each seed trains its own model).

    python scripts/robustness_panel.py --seeds 0 1 2 3 4 --out results/panel
"""
import argparse
import json
from pathlib import Path

from attnmix.experiments import ExperimentConfig, robustness_panel


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--out", default="results/panel")
    a = p.parse_args()
    base = ExperimentConfig(out_dir=a.out, reports=["table", "sweep"])
    panel = robustness_panel(base, a.seeds)
    for claim, n in panel["passes"].items():
        print(f"{claim:<34} {n}/{len(a.seeds)}")
    Path(a.out, "panel.json").write_text(json.dumps(panel, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
