"""Fixed toy-experiment protocols shared by ``scripts/`` and the acceptance suite."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from harope.adapt import dump_checkpoint
from harope.cli import RunConfig, cmd_export_matrices, pairwise_distances, parse_config, run_grid, summarize
from harope.model import adapt_banks
from harope.tasks import TrainRun, default_model, factor_health, make_task, train

# ordering hypothesis, best first
DIRECTIONAL_SCHEMES = ("HARoPE:SVD:headwise", "HARoPE:SVD:shared", "RoPE_ND_axial")
DIRECTIONAL_TASKS = ("anisotropic", "offset")
DIRECTIONAL_SEEDS = (0, 1, 2, 3, 4)


def directional_config(task: str, out: Path, seeds=DIRECTIONAL_SEEDS, steps: int = 2000) -> RunConfig:
    return parse_config("", {
        "task.name": task, "task.grid": "4", "task.n_train": "3000", "task.n_eval": "1000", "task.noise": "0.5",
        "model.schemes": ", ".join(DIRECTIONAL_SCHEMES), "train.steps": str(steps), "train.eval_every": "500",
        "train.seeds": ", ".join(map(str, seeds)), "output.dir": str(out),
    })


@dataclass
class DirectionalResult:
    task: str
    means: dict[str, float]
    sds: dict[str, float]
    rows: list[dict]

    @property
    def margins(self) -> tuple[float, float, float]:
        """(head-wise - shared, shared - axial, head-wise - axial) mean held-out accuracy."""
        hw, sh, ax = (self.means[s] for s in DIRECTIONAL_SCHEMES)
        return hw - sh, sh - ax, hw - ax

    @property
    def ok(self) -> bool:
        inner1, inner2, outer = self.margins
        return inner1 >= 0 and inner2 >= 0 and outer > 0

    def report(self) -> str:
        parts = [f"{s}={self.means[s]:.4f}±{self.sds[s]:.4f}" for s in DIRECTIONAL_SCHEMES]
        m = self.margins
        return (f"{self.task}: " + " ".join(parts)
                + f" | margins hw-sh={m[0]:+.4f} sh-ax={m[1]:+.4f} hw-ax={m[2]:+.4f}")


def run_directional(task: str, out: Path, seeds=DIRECTIONAL_SEEDS, steps: int = 2000) -> DirectionalResult:
    cfg = directional_config(task, out, seeds, steps)
    rows = run_grid(cfg)
    table = summarize(rows, DIRECTIONAL_SCHEMES)
    return DirectionalResult(task, {s: m for s, _, m, _ in table}, {s: sd for s, _, _, sd in table}, rows)


@dataclass
class SpecializationResult:
    max_distance: float
    distances: list[np.ndarray]
    orth_defect: float
    min_sigma: float
    eval_acc: float
    out: Path


def run_specialization(out: Path, seed: int = 0, steps: int = 2000, grid: int = 4) -> SpecializationResult:
    """Head-wise SVD HARoPE on the headmix task, then export the learned matrices."""
    out = Path(out)
    task = make_task("headmix", seed, grid, 4000)
    tr, ev = task.split(3000)
    run = train(tr, TrainRun(default_model(tr, scheme="HARoPE", variant="SVD", shared=False),
                             steps=steps, seed=seed, eval_every=500), ev)
    out.mkdir(parents=True, exist_ok=True)
    ck = out / "checkpoint.txt"
    banks = adapt_banks(run.params, run.model)
    ck.write_text(dump_checkpoint(banks))
    cmd_export_matrices(ck, out / "matrices")
    dists = [pairwise_distances(b.matrices()) for b in banks]
    defect, min_sigma = factor_health(run.params, run.model)
    return SpecializationResult(float(max(d.max() for d in dists)), dists, defect, min_sigma,
                                run.history[-1]["eval_acc"], out)
