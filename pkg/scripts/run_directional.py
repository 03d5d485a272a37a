"""Directional comparison: head-wise SVD HARoPE vs shared SVD HARoPE vs axial RoPE.

Runs 5 seeds x 3 schemes on the anisotropic and offset tasks (2000 steps each)
and writes per-run metrics plus results/directional/summary.txt.

    python scripts/run_directional.py [--out results/directional] [--seeds 0 1 2 3 4]
"""
import argparse
import logging
import time
from pathlib import Path

from harope.experiments import DIRECTIONAL_SEEDS, DIRECTIONAL_TASKS, run_directional


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="results/directional")
    ap.add_argument("--seeds", type=int, nargs="+", default=list(DIRECTIONAL_SEEDS))
    ap.add_argument("--steps", type=int, default=2000)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    lines = []
    t0 = time.perf_counter()
    for task in DIRECTIONAL_TASKS:
        res = run_directional(task, out / task, tuple(args.seeds), args.steps)
        lines.append(f"{'PASS' if res.ok else 'FAIL'} {res.report()}")
        print(lines[-1], flush=True)
    lines.append(f"total {time.perf_counter() - t0:.0f}s")
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    print(lines[-1])


if __name__ == "__main__":
    main()
