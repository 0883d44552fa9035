"""Alpha, layer-range and chunk-count sweeps for one seed.

    python scripts/sweeps.py --seed 0 --out results/sweeps
"""
import argparse

from attnmix.experiments import ExperimentConfig, run_experiment


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--alphas", type=float, nargs="+", default=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.7, 1.0])
    p.add_argument("--chunks", type=int, nargs="+", default=[0, 1, 2, 3, 4, 6])
    p.add_argument("--out", default="results/sweeps")
    a = p.parse_args()
    cfg = ExperimentConfig(seed=a.seed, checkpoint=a.checkpoint, out_dir=a.out, variants=["rag", "dualq"],
                           reports=["sweep"], alphas=a.alphas, chunk_counts=a.chunks)
    s = run_experiment(cfg).summary
    print(f"rag {s['variants']['rag']['accuracy']:.3f}   dualq {s['variants']['dualq']['accuracy']:.3f}")
    print("alpha:  " + "  ".join(f"{k}={v:.3f}" for k, v in s["alpha_sweep"].items()))
    print("layers: " + "  ".join(f"{k}={v:.3f}" for k, v in s["layer_sweep"].items()))
    for n, r in s["chunk_sweep"].items():
        print(f"chunks {n:>2}: rag {r['rag']:.3f}  madrag {r['madrag']:.3f}  gap {r['madrag'] - r['rag']:+.3f}")


if __name__ == "__main__":
    main()
