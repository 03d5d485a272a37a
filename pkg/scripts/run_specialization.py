"""Head specialization: train head-wise SVD HARoPE on the headmix task and export A matrices.

    python scripts/run_specialization.py [--out results/specialization] [--seed 0]
"""
import argparse
from pathlib import Path

from harope.experiments import run_specialization


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/specialization")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    r = run_specialization(Path(args.out), args.seed, args.steps)
    print(f"held-out accuracy {r.eval_acc:.4f}")
    print(f"max pairwise Frobenius distance {r.max_distance:.6g}")
    print(f"max orthogonality defect {r.orth_defect:.3e}, min sigma {r.min_sigma:.4f}")


if __name__ == "__main__":
    main()
