"""Train (or load) the toy model and compare all five layouts on the distractor split.

    python scripts/run_distraction.py --seed 0 --out results/distraction
"""
import argparse

from attnmix.experiments import ExperimentConfig, directional_checks, run_experiment


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-eval", type=int, default=500)
    p.add_argument("--checkpoint")
    p.add_argument("--out", default="results/distraction")
    a = p.parse_args()
    cfg = ExperimentConfig(seed=a.seed, n_eval=a.n_eval, checkpoint=a.checkpoint, out_dir=a.out,
                           reports=["table", "quadrant"])
    s = run_experiment(cfg).summary
    print(f"{'variant':<11} {'acc':>6} {'rho_I':>6} {'rho_C':>6}")
    for name, v in s["variants"].items():
        print(f"{name:<11} {v['accuracy']:6.3f} {v['mean_rho_image']:6.3f} {v['mean_rho_context']:6.3f}")
    print("\nquadrants (cb, rag): n, madrag acc, delta vs rag")
    for c in s["quadrant"]:
        print(f"  ({c['cb_correct']}, {c['rag_correct']}): {c['n']:4d}  {c['method_accuracy']:.3f}  "
              f"{c['delta']:+.3f}  {c['tag']}")
    for claim, ok in directional_checks(s).items():
        print(f"{'PASS' if ok else 'FAIL'}  {claim}")


if __name__ == "__main__":
    main()
