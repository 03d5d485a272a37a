"""Command-line entry point: ``harope {verify,train,export-matrices,bench}``.

Exit codes: 0 success, 1 property or run failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import io
import logging
import math
import os
import re
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from harope import ConfigurationError, DomainError, ShapeError
from harope.adapt import AdaptVariant, CheckpointFormatError, dump_checkpoint, parse_checkpoint
from harope.attention import MHAConfig, SchemeTag, TokenBatch, make_scheme, mha_forward
from harope.model import ModelConfig, adapt_banks
from harope.numerics import format_float, matrix_to_csv
from harope.tasks import GENERATORS, TrainingError, TrainRun, factor_health, make_task, save_params, train

log = logging.getLogger("harope")

OUT_ROOT_ENV = "HAROPE_OUT_ROOT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
_MIN_GRID = {"offset": 2, "anisotropic": 4, "headmix": 4}


# ---------------------------------------------------------------- config

@dataclass
class TaskSection:
    name: str = "offset"
    grid: int = 4
    n_train: int = 3000
    n_eval: int = 1000
    noise: float = 0.5


@dataclass
class ModelSection:
    schemes: tuple[str, ...] = ("HARoPE",)
    variant: str = "SVD"
    shared: bool = False
    n_blocks: int = 2
    n_heads: int = 4
    head_dim: int = 16
    mlp_dim: int = 64
    base: float = 10000.0


@dataclass
class TrainSection:
    lr: float = 3e-4
    steps: int = 2000
    batch_size: int = 64
    sigma_weight: float = 1e-3
    eval_every: int = 250
    seeds: tuple[int, ...] = (0,)


@dataclass
class OutputSection:
    dir: str = "runs"
    workers: int = 1


@dataclass
class RunConfig:
    task: TaskSection = field(default_factory=TaskSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> None:
        t, m, tr = self.task, self.model, self.train
        if t.name not in GENERATORS:
            raise ConfigurationError(f"task.name: unknown task {t.name!r}; choose from {sorted(GENERATORS)}")
        if t.grid < _MIN_GRID[t.name]:
            raise ConfigurationError(f"task.grid: {t.name} needs grid >= {_MIN_GRID[t.name]}, got {t.grid}")
        if t.n_train < 1 or t.n_eval < 1:
            raise ConfigurationError("task.n_train and task.n_eval must be positive")
        if t.noise < 0:
            raise ConfigurationError(f"task.noise: must be >= 0, got {t.noise}")
        if not m.schemes:
            raise ConfigurationError("model.schemes: at least one scheme is required")
        if not tr.seeds:
            raise ConfigurationError("train.seeds: at least one seed is required")
        if tr.lr < 0 or tr.steps < 0 or tr.batch_size < 1 or tr.eval_every < 1 or tr.sigma_weight < 0:
            raise ConfigurationError("train: lr, steps, sigma_weight must be >= 0; batch_size, eval_every >= 1")
        if self.output.workers < 1:
            raise ConfigurationError("output.workers must be >= 1")
        for spec in m.schemes:
            self.model_config(spec).validate()

    def model_config(self, spec: str) -> ModelConfig:
        """ModelConfig for one scheme spec such as ``HARoPE:Orthogonal:shared``."""
        tag, *mods = [s.strip() for s in spec.split(":")]
        try:
            tag = SchemeTag.parse(tag).value
        except ValueError as e:
            raise ConfigurationError(f"model.schemes: {e}") from None
        variant, shared = self.model.variant, self.model.shared
        for mod in mods:
            if mod in ("shared", "headwise"):
                shared = mod == "shared"
            else:
                try:
                    variant = AdaptVariant.parse(mod).value
                except ValueError as e:
                    raise ConfigurationError(f"model.schemes: {e}") from None
        try:
            variant = AdaptVariant.parse(variant).value
        except ValueError as e:
            raise ConfigurationError(f"model.variant: {e}") from None
        m = self.model
        return ModelConfig(in_dim=GENERATORS_TYPES[self.task.name], n_classes=n_classes(self.task.name, self.task.grid),
                           grid=(self.task.grid, self.task.grid), scheme=tag, variant=variant, shared=shared,
                           n_blocks=m.n_blocks, n_heads=m.n_heads, head_dim=m.head_dim, mlp_dim=m.mlp_dim, base=m.base)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec in fields(self):
            obj = getattr(self, sec.name)
            cp[sec.name] = {f.name: _format_value(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


GENERATORS_TYPES = {"offset": 3, "anisotropic": 3, "headmix": 2}


def n_classes(name: str, g: int) -> int:
    return {"offset": 8, "anisotropic": (2 * g - 1) * 2, "headmix": 4}[name]


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)  # shortest round-trip form
    return str(v)


def _parse_value(text: str, default, path: str):
    text = text.strip()
    try:
        if isinstance(default, tuple):
            kind = type(default[0]) if default else str
            return tuple(_parse_value(p, kind(), path) for p in text.split(",") if p.strip())
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{path}: cannot read {text!r} as {type(default).__name__}") from None


def parse_config(text: str = "", overrides: dict[str, str] | None = None) -> RunConfig:
    """Read INI text, apply ``section.key`` overrides, validate."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"config syntax: {e}") from None
    values = {s: dict(cp[s]) for s in cp.sections()}
    for path, val in (overrides or {}).items():
        sec, _, key = path.partition(".")
        if not key:
            raise ConfigurationError(f"override {path!r} must look like section.key")
        values.setdefault(sec, {})[key] = val
    cfg = RunConfig()
    known = {f.name for f in fields(cfg)}
    for sec, kv in values.items():
        if sec not in known:
            raise ConfigurationError(f"{sec}: unknown section; choose from {sorted(known)}")
        obj = getattr(cfg, sec)
        names = {f.name for f in fields(obj)}
        updates = {}
        for key, val in kv.items():
            if key not in names:
                raise ConfigurationError(f"{sec}.{key}: unknown key")
            updates[key] = _parse_value(val, getattr(obj, key), f"{sec}.{key}")
        setattr(cfg, sec, replace(obj, **updates))
    cfg.validate()
    return cfg


def resolve_out(path: str) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    p = Path(path)
    return Path(root) / p if root and not p.is_absolute() else p


# ---------------------------------------------------------------- verify

def cmd_verify(suite: str) -> int:
    from harope import verify

    names = list(verify.SUITES) if suite == "all" else [suite]
    checks = verify.run_suites(names)
    for c in checks:
        print(c.line())
    failed = [c.name for c in checks if not c.ok]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_FAIL
    print(f"all {len(checks)} properties passed")
    return EXIT_OK


# ---------------------------------------------------------------- train

def scheme_label(spec: str) -> str:
    return spec.replace(":", "-")


def _one_run(cfg: RunConfig, spec: str, seed: int, out: Path) -> dict:
    model = cfg.model_config(spec)
    t = cfg.task
    task = make_task(t.name, seed, t.grid, t.n_train + t.n_eval, t.noise)
    tr, ev = task.split(t.n_train)
    run = TrainRun(model, lr=cfg.train.lr, steps=cfg.train.steps, batch_size=cfg.train.batch_size,
                   sigma_weight=cfg.train.sigma_weight, seed=seed, eval_every=cfg.train.eval_every)
    t0 = time.perf_counter()
    try:
        train(tr, run, ev)
    except TrainingError as e:
        raise TrainingError(f"run {scheme_label(spec)}/seed{seed}: {e}", e.step) from None
    d = out / scheme_label(spec) / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.csv").write_text(run.history_csv())
    save_params(run.params, d / "params.npz")
    if model.tag is SchemeTag.HAROPE:
        (d / "checkpoint.txt").write_text(dump_checkpoint(adapt_banks(run.params, model)))
    defect = min_sigma = float("nan")
    if model.tag is SchemeTag.HAROPE and model.adapt_variant is AdaptVariant.SVD:
        defect, min_sigma = factor_health(run.params, model)
    last = run.history[-1]
    return {"scheme": spec, "seed": seed, "eval_acc": last["eval_acc"], "train_acc": last["train_acc"],
            "loss": last["loss"], "orth_defect": defect, "min_sigma": min_sigma,
            "seconds": time.perf_counter() - t0}


def summarize(rows: list[dict], specs) -> list[tuple[str, int, float, float]]:
    out = []
    for spec in specs:
        acc = np.array([r["eval_acc"] for r in rows if r["scheme"] == spec])
        sd = float(acc.std(ddof=1)) if acc.size > 1 else 0.0
        out.append((spec, int(acc.size), float(acc.mean()), sd))
    return out


def run_grid(cfg: RunConfig) -> list[dict]:
    """Train every scheme x seed of ``cfg``; one output subdirectory per run."""
    out = resolve_out(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    jobs = [(spec, seed) for spec in cfg.model.schemes for seed in cfg.train.seeds]
    if cfg.output.workers > 1:
        with ProcessPoolExecutor(cfg.output.workers) as pool:
            return list(pool.map(_one_run, *zip(*[(cfg, s, k, out) for s, k in jobs])))
    rows = []
    for spec, seed in jobs:
        r = _one_run(cfg, spec, seed, out)
        log.info("%s seed %d: eval_acc %.4f (%.0fs)", spec, seed, r["eval_acc"], r["seconds"])
        rows.append(r)
    return rows


def cmd_train(cfg: RunConfig) -> int:
    rows = run_grid(cfg)
    out = resolve_out(cfg.output.dir)
    with open(out / "runs.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "seed", "eval_acc", "train_acc", "loss"])
        for r in rows:
            w.writerow([r["scheme"], r["seed"], format_float(r["eval_acc"]), format_float(r["train_acc"]),
                        format_float(r["loss"])])
    table = summarize(rows, cfg.model.schemes)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheme", "n_seeds", "eval_acc_mean", "eval_acc_sd"])
        for spec, n, mean, sd in table:
            w.writerow([spec, n, format_float(mean), format_float(sd)])
    width = max(len(s) for s in cfg.model.schemes)
    print(f"{'scheme':<{width}}  seeds  eval_acc")
    for spec, n, mean, sd in table:
        print(f"{spec:<{width}}  {n:5d}  {mean:.4f} ± {sd:.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------- export

def pgm_bytes(m: np.ndarray, cell: int = 1) -> bytes:
    """8-bit P5 heatmap, min -> 0 and max -> 255 per matrix; ``cell`` pixels per entry."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    px = np.zeros(m.shape) if hi == lo else np.rint((m - lo) / (hi - lo) * 255.0)
    px = np.kron(px.astype(np.uint8), np.ones((cell, cell), dtype=np.uint8))
    return f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    """Parse a binary P5 image as written by :func:`pgm_bytes`."""
    parts = data.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or int(parts[3]) != 255:
        raise ValueError("not an 8-bit P5 image")
    w, h = int(parts[1]), int(parts[2])
    pix = data[len(data) - w * h:]
    return np.frombuffer(pix, dtype=np.uint8).reshape(h, w)


def pairwise_distances(mats: list[np.ndarray]) -> np.ndarray:
    n = len(mats)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = np.linalg.norm(mats[i] - mats[j])
    return d


def cmd_export_matrices(checkpoint: Path, out: Path, cell: int = 1) -> int:
    banks = parse_checkpoint(Path(checkpoint).read_bytes())
    out = resolve_out(str(out))
    out.mkdir(parents=True, exist_ok=True)
    for b, bank in enumerate(banks):
        mats = bank.matrices()
        for h, a in enumerate(mats):
            (out / f"A_b{b}_h{h}.csv").write_text(matrix_to_csv(a))
            (out / f"A_b{b}_h{h}.pgm").write_bytes(pgm_bytes(a, cell))
        dist = pairwise_distances(mats)
        with open(out / f"distances_b{b}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["head_i", "head_j", "frobenius"])
            for i in range(len(mats)):
                for j in range(i + 1, len(mats)):
                    w.writerow([i, j, format_float(dist[i, j])])
        print(f"block {b}: {len(mats)} heads, max pairwise Frobenius distance {dist.max():.6g}")
    print(f"matrices written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

@dataclass(frozen=True)
class FlopCount:
    """Per-layer forward flops, one multiply-add counted as one flop."""
    projections: int
    scores: int
    mixing: int
    rotary: int
    adapt: int

    @property
    def baseline(self) -> int:
        return self.projections + self.scores + self.mixing + self.rotary

    @property
    def ratio(self) -> float:
        return self.adapt / self.baseline


def flop_model(n: int, d: int, heads: int) -> FlopCount:
    D = heads * d
    return FlopCount(projections=4 * n * D * D, scores=heads * n * n * d, mixing=heads * n * n * d,
                     rotary=2 * 2 * heads * n * d, adapt=2 * heads * n * d * d)


def cmd_bench(n: int, d: int, heads: int, variant: str, repeats: int, seed: int) -> int:
    if d % 4 or n < 1 or heads < 1 or repeats < 1:
        raise ConfigurationError("bench: head_dim must be divisible by 4; tokens, heads and repeats must be positive")
    rng = np.random.default_rng(seed)
    D = heads * d
    side = math.isqrt(n - 1) + 1
    pos = np.stack(np.divmod(np.arange(n), side), axis=-1)
    batch = TokenBatch(rng.standard_normal((n, D)), pos)
    rope = MHAConfig.random(heads, d, make_scheme("RoPE_ND_axial", d, D, heads, (side, side)), rng)
    ha = MHAConfig(heads, d, make_scheme("HARoPE", d, D, heads, (side, side), variant=variant),
                   rope.w_q, rope.w_k, rope.w_v, rope.w_o)

    def wall(cfg):
        ts = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            mha_forward(batch, cfg)
            ts.append(time.perf_counter() - t0)
        return float(np.median(ts))

    t_rope, t_ha = wall(rope), wall(ha)
    f = flop_model(n, d, heads)
    print("# flop model: one multiply-add = 1 flop; per layer forward; softmax and A construction excluded")
    print(f"tokens={n} head_dim={d} heads={heads} variant={AdaptVariant.parse(variant).value}")
    print(f"projections_flops={f.projections}")
    print(f"scores_flops={f.scores}")
    print(f"mixing_flops={f.mixing}")
    print(f"rotary_flops={f.rotary}")
    print(f"baseline_flops={f.baseline}")
    print(f"harope_extra_flops={f.adapt}  (= 2*H*n*d^2 = {2 * heads * n * d * d})")
    print(f"flop_overhead_ratio={f.ratio:.6f}")
    print(f"wall_rope_s={t_rope:.6f}")
    print(f"wall_harope_s={t_ha:.6f}")
    print(f"wall_overhead_ratio={t_ha / t_rope - 1:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------- entry

_OVERRIDE = re.compile(r"^--[A-Za-z_]\w*\.[A-Za-z_]\w*=")


def _split_overrides(extra: list[str]) -> dict[str, str]:
    out = {}
    for arg in extra:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigurationError(f"unrecognized argument {arg!r}; overrides look like --section.key=value")
        k, v = arg[2:].split("=", 1)
        out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    from harope.verify import SUITES

    p = argparse.ArgumentParser(prog="harope", description="Head-wise adaptive rotary embedding toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    v = sub.add_parser("verify", help="run invariant suites")
    v.add_argument("suite", choices=[*SUITES, "all"])
    t = sub.add_parser("train", help="train a scheme x seed grid on a toy task",
                       epilog="any config key can be overridden with --section.key=value")
    t.add_argument("config", nargs="?", help="INI config file (defaults are used when omitted)")
    t.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    e = sub.add_parser("export-matrices", help="write per-head A matrices as CSV and PGM")
    e.add_argument("checkpoint")
    e.add_argument("out_dir")
    e.add_argument("--cell", type=int, default=1, help="pixels per matrix entry")
    b = sub.add_parser("bench", help="flop model and wall time, RoPE vs HARoPE")
    b.add_argument("--tokens", type=int, default=256)
    b.add_argument("--head-dim", type=int, default=64)
    b.add_argument("--heads", type=int, default=8)
    b.add_argument("--variant", default="SVD")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    # argparse treats values containing spaces as positionals, so peel overrides off first
    extra = [a for a in argv if _OVERRIDE.match(a)]
    argv = [a for a in argv if not _OVERRIDE.match(a)]
    try:
        args, unknown = parser.parse_known_args(argv)
        extra += unknown
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if extra and args.command != "train":
            parser.print_usage(sys.stderr)
            raise ConfigurationError(f"unrecognized arguments: {' '.join(extra)}")
        if args.command == "verify":
            return cmd_verify(args.suite)
        if args.command == "train":
            text = Path(args.config).read_text() if args.config else ""
            cfg = parse_config(text, _split_overrides(extra))
            if args.print_config:
                print(cfg.to_ini(), end="")
                return EXIT_OK
            return cmd_train(cfg)
        if args.command == "export-matrices":
            return cmd_export_matrices(Path(args.checkpoint), Path(args.out_dir), args.cell)
        return cmd_bench(args.tokens, args.head_dim, args.heads, args.variant, args.repeats, args.seed)
    except (ConfigurationError, ShapeError, DomainError, CheckpointFormatError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
