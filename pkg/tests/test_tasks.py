import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harope import ConfigurationError, DomainError
from harope.model import init_params
from harope.tasks import (DIRECTIONS, TrainRun, anisotropic_label, default_model, direction_label, evaluate,
                          factor_health, gen_anisotropic_task, gen_headmix_task, gen_offset_task,
                          headmix_label, make_task, train)

SMALL = dict(n_blocks=1, n_heads=2, head_dim=8, mlp_dim=16)


def test_direction_labels():
    # +row is south, +col is east
    assert DIRECTIONS[direction_label((0, 0), (1, 1))] == "SE"
    assert DIRECTIONS[direction_label((2, 3), (2, 5))] == "E"
    assert DIRECTIONS[direction_label((2, 3), (0, 3))] == "N"
    assert DIRECTIONS[direction_label((2, 3), (3, 0))] == "SW"
    with pytest.raises(DomainError):
        direction_label((1, 1), (1, 1))


def test_anisotropic_labels():
    g = 5
    assert anisotropic_label((0, 0), (3, 4), g) == (3 + g - 1) * 2 + 1
    assert anisotropic_label((2, 3), (2, 1), g) == (0 + g - 1) * 2
    assert gen_anisotropic_task(0, g, 10).n_classes == (2 * g - 1) * 2


def test_headmix_labels():
    g = 6
    assert headmix_label([[0, 0], [0, 1], [5, 5]], g) == 3
    assert headmix_label([[0, 0], [2, 2], [3, 3]], g) == 1
    assert headmix_label([[0, 0], [2, 0], [2, 2]], g) == 0
    assert headmix_label([[0, 0], [2, 0], [5, 0]], g) == 2


@pytest.mark.parametrize("gen,g", [(gen_offset_task, 1), (gen_anisotropic_task, 3), (gen_headmix_task, 3)])
def test_grid_domain(gen, g):
    with pytest.raises(DomainError):
        gen(0, g, 10)


def test_unknown_task():
    with pytest.raises(ConfigurationError):
        make_task("spiral", 0, 4, 10)


@pytest.mark.parametrize("name", ["offset", "anisotropic", "headmix"])
def test_determinism_and_balance(name):
    a, b = make_task(name, 7, 5, 400, 0.3), make_task(name, 7, 5, 400, 0.3)
    assert a.dump() == b.dump()
    assert np.array_equal(a.features(), b.features())
    c = make_task(name, 8, 5, 400)
    assert a.dump() != c.dump()
    counts = np.bincount(a.labels, minlength=a.n_classes)
    assert np.all(np.abs(counts / counts.mean() - 1) < 0.1)
    assert a.labels.min() >= 0 and a.labels.max() < a.n_classes


@settings(max_examples=30)
@given(st.integers(0, 2**63 - 1), st.integers(4, 7))
def test_labels_agree_with_markers(seed, g):
    for name, fn in [("offset", lambda m: direction_label(m[0], m[1])),
                     ("anisotropic", lambda m: anisotropic_label(m[0], m[1], g)),
                     ("headmix", lambda m: headmix_label(m, g))]:
        t = make_task(name, seed, g, 20)
        assert all(fn(m) == y for m, y in zip(t.markers, t.labels))
        assert np.all(t.markers >= 0) and np.all(t.markers < g)
        # every marker sits on its own cell
        flat = t.markers[..., 0] * g + t.markers[..., 1]
        assert all(len(set(r)) == len(r) for r in flat)


def test_dump_is_json():
    t = gen_offset_task(3, 4, 5)
    d = json.loads(t.dump())
    assert d["seed"] == 3 and len(d["samples"]) == 5
    assert d["samples"][0]["label"] == int(t.labels[0])


def test_split_disjoint():
    t = gen_offset_task(0, 4, 50)
    tr, ev = t.split(40)
    assert len(tr) == 40 and len(ev) == 10
    assert np.array_equal(ev.markers, t.markers[40:])
    with pytest.raises(DomainError):
        t.split(50)


def test_lr_zero_leaves_params_and_loss():
    t = gen_offset_task(0, 4, 64)
    run = train(t, TrainRun(default_model(t, **SMALL), lr=0.0, steps=6, eval_every=2, batch_size=16))
    init = init_params(run.model, run.seed)
    assert all(np.array_equal(init[k], run.params[k]) for k in init)
    losses = [h["loss"] for h in run.history]
    assert len(losses) == 4 and len(set(losses)) == 1


def test_step_zero_loss_matches_rope():
    t = gen_anisotropic_task(1, 4, 128, noise=0.5)
    rows = []
    for kw in (dict(scheme="RoPE_ND_axial"), dict(scheme="HARoPE", shared=True), dict(scheme="HARoPE"),
               dict(scheme="HARoPE", variant="Orthogonal"), dict(scheme="HARoPE", variant="Normal")):
        run = train(t, TrainRun(default_model(t, **SMALL, **kw), steps=0))
        rows.append(run.history[0])
    for r in rows[1:]:
        assert abs(r["loss"] - rows[0]["loss"]) < 1e-10
        assert r["sigma_penalty"] == 0.0


def test_training_is_deterministic_and_penalty_nonnegative():
    t = gen_offset_task(2, 4, 128)
    mk = lambda: train(t, TrainRun(default_model(t, **SMALL), steps=20, eval_every=5, batch_size=16), t)
    a, b = mk(), mk()
    assert a.history_csv() == b.history_csv()
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert all(h["sigma_penalty"] >= 0 for h in a.history)
    assert len(a.history) == 5
    assert a.history_csv().splitlines()[0] == "step,loss,train_acc,eval_acc,sigma_penalty"


def test_untrained_accuracy_near_chance():
    t = gen_offset_task(5, 4, 2000)
    cfg = default_model(t, **SMALL)
    acc = evaluate(t, init_params(cfg, 0), cfg)
    assert abs(acc - 1 / 8) < 0.05
    assert evaluate(t, init_params(cfg, 0), cfg) == acc


def test_overfit_32_samples():
    t = gen_offset_task(4, 4, 32)
    run = train(t, TrainRun(default_model(t, n_blocks=1, n_heads=2, head_dim=8, mlp_dim=32),
                            lr=3e-3, steps=400, batch_size=32, eval_every=400))
    assert evaluate(t, run.params, run.model) == 1.0
    worst, smallest = factor_health(run.params, run.model)
    assert worst < 1e-8 and smallest > 0


def test_evaluate_empty_and_mismatch():
    t = gen_offset_task(0, 4, 10)
    cfg = default_model(t, **SMALL)
    with pytest.raises(DomainError):
        evaluate(t.subset([]), init_params(cfg, 0), cfg)
    other = gen_headmix_task(0, 4, 10)
    with pytest.raises(ConfigurationError):
        train(other, TrainRun(cfg, steps=1))
