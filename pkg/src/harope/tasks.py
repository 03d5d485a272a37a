"""Synthetic grid tasks, training loop and evaluation.

Every sample is a ``g x g`` grid of tokens; each token is one-hot over a few
token types (background or marker) and sits at its integer (row, col)
position. Row index is the x axis and grows southwards; column index is the y
axis and grows eastwards.

* ``offset``: markers A and B; the label is the compass direction of B seen
  from A (8 classes, diagonals need both axes at once).
* ``anisotropic``: markers A and B; the label is the exact row offset of B
  from A paired with the sign of the column offset ((2g-1)*2 classes).
* ``headmix``: three identical markers; bit 0 says some pair is adjacent
  (Chebyshev distance 1), bit 1 says some pair is farther than g/2 apart.

Labels are drawn as a shuffled, exactly balanced list before the marker
layouts are rejection-sampled to match, so each class appears
``n_samples / n_classes`` times (up to rounding).
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from harope import ConfigurationError, DomainError
from harope import autodiff as ad
from harope.adapt import AdaptVariant, svd_factors
from harope.attention import SchemeTag, TokenBatch
from harope.model import Adam, ModelConfig, adapt_banks, init_params, loss_fn, predict_logits
from harope.numerics import format_float, orthogonality_defect

log = logging.getLogger(__name__)

DIRECTIONS = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
_DIR_INDEX = {(-1, 0): 0, (-1, 1): 1, (0, 1): 2, (1, 1): 3, (1, 0): 4, (1, -1): 5, (0, -1): 6, (-1, -1): 7}


def direction_label(a, b) -> int:
    """Compass class of cell ``b`` seen from cell ``a`` (+row = S, +col = E)."""
    dx, dy = int(np.sign(b[0] - a[0])), int(np.sign(b[1] - a[1]))
    if dx == 0 and dy == 0:
        raise DomainError("markers must occupy distinct cells")
    return _DIR_INDEX[(dx, dy)]


def anisotropic_label(a, b, g: int) -> int:
    dx, dy = int(b[0] - a[0]), int(b[1] - a[1])
    if dy == 0:
        raise DomainError("anisotropic samples need a nonzero column offset")
    return (dx + g - 1) * 2 + int(dy > 0)


def headmix_label(cells, g: int) -> int:
    cells = np.asarray(cells)
    local = far = False
    for i in range(len(cells)):
        for j in range(i + 1, len(cells)):
            cheb = int(np.max(np.abs(cells[i] - cells[j])))
            local |= cheb == 1
            far |= cheb > g / 2
    return int(local) + 2 * int(far)


@dataclass
class TaskInstance:
    name: str
    grid: int
    seed: int
    n_classes: int
    n_types: int
    markers: np.ndarray  # (N, n_markers, 2) integer cells
    labels: np.ndarray  # (N,)
    marker_types: tuple[int, ...]
    noise: float = 0.0
    noise_feats: np.ndarray | None = field(default=None, repr=False)  # (N, g*g, n_types)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def coords(self) -> np.ndarray:
        g = self.grid
        return np.stack(np.divmod(np.arange(g * g), g), axis=-1).astype(np.float64)

    def tokens(self) -> np.ndarray:
        """(N, g*g) token-type ids."""
        t = np.zeros((len(self), self.grid * self.grid), dtype=np.int64)
        flat = self.markers[..., 0] * self.grid + self.markers[..., 1]
        for j, ty in enumerate(self.marker_types):
            t[np.arange(len(self)), flat[:, j]] = ty
        return t

    def features(self) -> np.ndarray:
        """(N, g*g, n_types) one-hot token features, plus the stored Gaussian noise if any."""
        f = np.eye(self.n_types)[self.tokens()]
        if self.noise_feats is not None:
            f = f + self.noise_feats
        return f

    def batch(self, i: int) -> TokenBatch:
        return TokenBatch(self.features()[i], self.coords)

    def subset(self, idx) -> "TaskInstance":
        idx = np.asarray(idx, dtype=np.int64)
        return TaskInstance(self.name, self.grid, self.seed, self.n_classes, self.n_types,
                            self.markers[idx], self.labels[idx], self.marker_types, self.noise,
                            None if self.noise_feats is None else self.noise_feats[idx])

    def split(self, n_train: int) -> tuple["TaskInstance", "TaskInstance"]:
        """Disjoint (train, held-out) splits by sample index."""
        if not 0 < n_train < len(self):
            raise DomainError(f"n_train must be in (0, {len(self)})")
        return self.subset(np.arange(n_train)), self.subset(np.arange(n_train, len(self)))

    def dump(self) -> str:
        """JSON audit record of the whole dataset."""
        return json.dumps({
            "name": self.name, "grid": self.grid, "seed": self.seed, "n_classes": self.n_classes,
            "noise": self.noise,
            "marker_types": list(self.marker_types),
            "samples": [{"markers": m.tolist(), "label": int(y)} for m, y in zip(self.markers, self.labels)],
        }, indent=None, separators=(",", ":")) + "\n"


def _with_noise(task: TaskInstance, noise: float) -> TaskInstance:
    if noise < 0:
        raise DomainError(f"noise must be >= 0, got {noise}")
    if noise > 0:
        rng = np.random.default_rng([task.seed, 104])
        task.noise = float(noise)
        task.noise_feats = noise * rng.standard_normal((len(task), task.grid ** 2, task.n_types))
    return task


def _balanced_labels(rng, n, k):
    return rng.permutation(np.arange(n) % k)


def _distinct_cells(rng, g, count):
    flat = rng.choice(g * g, size=count, replace=False)
    return np.stack(np.divmod(flat, g), axis=-1)


def gen_offset_task(seed: int, grid_size: int, n_samples: int, noise: float = 0.0) -> TaskInstance:
    g = grid_size
    if g < 2:
        raise DomainError(f"offset task needs grid >= 2, got {g}")
    rng = np.random.default_rng([seed, 101])
    labels = _balanced_labels(rng, n_samples, 8)
    markers = np.empty((n_samples, 2, 2), dtype=np.int64)
    for i, y in enumerate(labels):
        while True:
            cells = _distinct_cells(rng, g, 2)
            if direction_label(cells[0], cells[1]) == y:
                break
        markers[i] = cells
    return _with_noise(TaskInstance("offset", g, seed, 8, 3, markers, labels, (1, 2)), noise)


def gen_anisotropic_task(seed: int, g: int, n_samples: int, noise: float = 0.0) -> TaskInstance:
    if g < 4:
        raise DomainError(f"anisotropic task needs grid >= 4, got {g}")
    rng = np.random.default_rng([seed, 102])
    k = (2 * g - 1) * 2
    labels = _balanced_labels(rng, n_samples, k)
    markers = np.empty((n_samples, 2, 2), dtype=np.int64)
    for i, y in enumerate(labels):
        dx, positive = int(y) // 2 - (g - 1), bool(y % 2)
        xa = int(rng.integers(max(0, -dx), g - max(0, dx)))
        while True:
            ya, yb = rng.integers(0, g, size=2)
            if (yb > ya) == positive and yb != ya:
                break
        markers[i] = [[xa, ya], [xa + dx, yb]]
    return _with_noise(TaskInstance("anisotropic", g, seed, k, 3, markers, labels, (1, 2)), noise)


def gen_headmix_task(seed: int, g: int, n_samples: int, noise: float = 0.0) -> TaskInstance:
    if g < 4:
        raise DomainError(f"headmix task needs grid >= 4, got {g}")
    rng = np.random.default_rng([seed, 103])
    labels = _balanced_labels(rng, n_samples, 4)
    markers = np.empty((n_samples, 3, 2), dtype=np.int64)
    for i, y in enumerate(labels):
        while True:
            cells = _distinct_cells(rng, g, 3)
            if headmix_label(cells, g) == y:
                break
        markers[i] = cells
    return _with_noise(TaskInstance("headmix", g, seed, 4, 2, markers, labels, (1, 1, 1)), noise)


GENERATORS = {"offset": gen_offset_task, "anisotropic": gen_anisotropic_task, "headmix": gen_headmix_task}


def make_task(name: str, seed: int, grid: int, n_samples: int, noise: float = 0.0) -> TaskInstance:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ConfigurationError(f"unknown task {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(seed, grid, n_samples, noise)


# ---------------------------------------------------------------- training

class TrainingError(RuntimeError):
    def __init__(self, msg, step):
        super().__init__(f"{msg} at step {step}")
        self.step = step


HISTORY_COLUMNS = ("step", "loss", "train_acc", "eval_acc", "sigma_penalty")


@dataclass
class TrainRun:
    model: ModelConfig
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 64
    sigma_weight: float = 1e-3
    seed: int = 0
    eval_every: int = 250
    monitor_size: int = 256
    history: list[dict] = field(default_factory=list)
    params: dict | None = field(default=None, repr=False)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in self.history:
            w.writerow([row["step"]] + [format_float(row[c]) for c in HISTORY_COLUMNS[1:]])
        return buf.getvalue()

    def hyperparameters(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("history", "params", "model")}
        d["model"] = asdict(self.model)
        return d


def evaluate(task: TaskInstance, params: dict, cfg: ModelConfig) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(task) == 0:
        raise DomainError("cannot evaluate on an empty split")
    logits = predict_logits(params, cfg, task.features(), task.coords)
    return float(np.mean(np.argmax(logits, axis=-1) == task.labels))


def _loss_value(params, cfg, feats, coords, labels, sigma_weight):
    t = ad.Tape()
    leaves = {k: t.leaf(v, name=k) for k, v in params.items()}
    total, _, pen, _ = loss_fn(t, leaves, cfg, feats, coords, labels, sigma_weight)
    return float(total.value), pen


def train(task: TaskInstance, run: TrainRun, eval_task: TaskInstance | None = None) -> TrainRun:
    """Minimize cross-entropy (+ sigma_weight * sigma penalty for SVD HARoPE) with Adam.

    Minibatches are drawn with a generator seeded by ``run.seed``. Every
    ``eval_every`` steps (and at step 0) a row is appended to
    ``run.history``: loss and accuracy on a fixed monitor subset of the
    training split, held-out accuracy, and the unweighted sigma penalty.
    """
    cfg = run.model
    if cfg.in_dim != task.n_types or cfg.n_classes != task.n_classes or tuple(cfg.grid) != (task.grid, task.grid):
        raise ConfigurationError("model dimensions do not match the task")
    params = init_params(cfg, run.seed)
    scheme = cfg.scheme_obj()
    opt = Adam(params, run.lr)
    rng = np.random.default_rng([run.seed, 7])
    feats, coords, labels = task.features(), task.coords, task.labels
    mon = np.arange(min(run.monitor_size, len(task)))
    weight = run.sigma_weight if cfg.adapt_variant is AdaptVariant.SVD else 0.0

    def record(step):
        loss, pen = _loss_value(params, cfg, feats[mon], coords, labels[mon], weight)
        if not np.isfinite(loss):
            raise TrainingError("non-finite loss", step)
        tr = float(np.mean(np.argmax(predict_logits(params, cfg, feats[mon], coords), -1) == labels[mon]))
        ev = evaluate(eval_task, params, cfg) if eval_task is not None and len(eval_task) else float("nan")
        run.history.append({"step": step, "loss": loss, "train_acc": tr, "eval_acc": ev, "sigma_penalty": pen})

    run.history = []
    record(0)
    for step in range(1, run.steps + 1):
        idx = rng.integers(0, len(task), size=run.batch_size)
        t = ad.Tape()
        leaves = {k: t.leaf(v, name=k) for k, v in params.items()}
        total, _, _, _ = loss_fn(t, leaves, cfg, feats[idx], coords, labels[idx], weight, scheme)
        if not np.isfinite(total.value):
            raise TrainingError("non-finite loss", step)
        grads = t.backward(total, list(leaves.values()))
        opt.step(params, {k: grads[leaves[k]] for k in params})
        if step % run.eval_every == 0 or step == run.steps:
            record(step)
    run.params = params
    return run


def factor_health(params: dict, cfg: ModelConfig) -> tuple[float, float]:
    """(max orthogonality defect over all U and V, min sigma) of an SVD HARoPE model."""
    worst, smallest = 0.0, float("inf")
    for bank in adapt_banks(params, cfg):
        for p in bank.params:
            u, sigma, v = svd_factors(p)
            worst = max(worst, orthogonality_defect(u), orthogonality_defect(v))
            smallest = min(smallest, float(sigma.min()))
    return worst, smallest


def run_experiment(task_name: str, grid: int, n_train: int, n_eval: int, run: TrainRun,
                   data_seed: int | None = None, noise: float = 0.0) -> TrainRun:
    """Generate a task, split it, train, and return the populated run."""
    seed = run.seed if data_seed is None else data_seed
    task = make_task(task_name, seed, grid, n_train + n_eval, noise)
    tr, ev = task.split(n_train)
    return train(tr, run, ev)


def default_model(task: TaskInstance, **kw) -> ModelConfig:
    return ModelConfig(in_dim=task.n_types, n_classes=task.n_classes, grid=(task.grid, task.grid), **kw)


def save_params(params: dict, path) -> None:
    np.savez(Path(path), **params)
