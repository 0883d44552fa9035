"""Per-sample decoding time of each layout, against vanilla and length-matched baselines.

    python scripts/timing.py --checkpoint results/distraction/model.npz
"""
import argparse

from attnmix.experiments import ExperimentConfig, obtain_weights, timing_benchmark


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--warmup", type=int, default=3)
    a = p.parse_args()
    cfg = ExperimentConfig(seed=a.seed, checkpoint=a.checkpoint)
    weights = obtain_weights(cfg).weights
    rows = timing_benchmark(weights, cfg.eval_samples()[: a.samples], cfg.mix, a.warmup)
    print(f"{'label':<12} {'len':>5} {'ms/sample':>10} {'vs rag':>7} {'vs matched':>10}")
    for r in rows:
        print(f"{r.label:<12} {r.seq_len:5.1f} {1e3 * r.mean_seconds:10.3f} {r.ratio_vs_rag:7.3f} "
              f"{r.ratio_vs_matched:10.3f}")


if __name__ == "__main__":
    main()
