import math

import numpy as np
import pytest

from harope import ShapeError
from harope import autodiff as ad
from harope.adapt import AdaptVariant, adapted_score, build_adapt_matrix, init_identity
from harope.attention import (MHAConfig, SchemeTag, TokenBatch, adapt_matrices_tape, attention_scores,
                              make_scheme, mha_forward, mha_tape, score_matrix_csv, softmax_rows)
from harope.rotary import GridPosition

H, D_HEAD = 2, 8
D = H * D_HEAD
ROTARY = ["RoPE_1D", "RoPE_ND_axial", "HARoPE"]


def perturb_bank(scheme, r, scale=0.5):
    for i, p in enumerate(scheme.bank.params):
        scheme.bank.params[i] = p.with_vector(p.vector() + scale * r.uniform(-1, 1, p.vector().size))


def random_batch(r, n=6, grid=(5, 5)):
    cells = r.choice(int(np.prod(grid)), n, replace=False)
    pos = np.stack(np.divmod(cells, grid[1]), axis=-1)
    return TokenBatch(r.standard_normal((n, D)), pos)


def config(tag, r, grid=(5, 5), **kw):
    return MHAConfig.random(H, D_HEAD, make_scheme(tag, D_HEAD, D, H, grid, rng=r, **kw), r)


@pytest.mark.parametrize("tag", [t.value for t in SchemeTag])
def test_single_token(tag, rng):
    cfg = config(tag, rng)
    if tag == "HARoPE":
        perturb_bank(cfg.scheme, rng)
    b = TokenBatch(rng.standard_normal((1, D)), [[2, 3]])
    out = mha_forward(b, cfg)
    x = b.features
    if tag == "APE_learned":
        x = x + cfg.scheme.ape_table[2 * 5 + 3]
    elif tag == "APE_sinusoidal":
        from harope.attention import sinusoidal_table
        x = x + sinusoidal_table(b.positions, D)
    np.testing.assert_allclose(out.features, x @ cfg.w_v @ cfg.w_o, atol=1e-13)


@pytest.mark.parametrize("variant", list(AdaptVariant))
def test_identity_harope_equals_axial(variant, rng):
    base = config("RoPE_ND_axial", rng)
    ha = MHAConfig(H, D_HEAD, make_scheme("HARoPE", D_HEAD, D, H, (5, 5), variant=variant),
                   base.w_q, base.w_k, base.w_v, base.w_o)
    for _ in range(5):
        b = random_batch(rng)
        np.testing.assert_allclose(mha_forward(b, ha).features, mha_forward(b, base).features, atol=1e-10, rtol=0)


@pytest.mark.parametrize("tag", ROTARY)
def test_translation_invariance(tag, rng):
    cfg = config(tag, rng, grid=(40, 40))
    if tag == "HARoPE":
        perturb_bank(cfg.scheme, rng)
    b = random_batch(rng)
    s = b.shifted([7, 11])
    np.testing.assert_allclose(mha_forward(s, cfg).features, mha_forward(b, cfg).features, atol=1e-9, rtol=0)
    for h in range(H):
        np.testing.assert_allclose(attention_scores(s, cfg, h), attention_scores(b, cfg, h), atol=1e-9, rtol=0)


def test_ape_learned_breaks_translation_invariance(rng):
    cfg = config("APE_learned", rng, grid=(6, 6))
    cfg.scheme.ape_table = rng.standard_normal(cfg.scheme.ape_table.shape)
    b = TokenBatch(rng.standard_normal((3, D)), [[0, 0], [1, 2], [3, 1]])
    diff = np.abs(attention_scores(b.shifted([1, 1]), cfg, 0) - attention_scores(b, cfg, 0)).max()
    assert diff > 1e-3


def test_scores_zero_offsets_plain(rng):
    for tag in ROTARY:
        cfg = config(tag, rng)
        b = TokenBatch(rng.standard_normal((4, D)), np.tile([[1.0, 2.0]], (4, 1)))
        q = b.features @ cfg.w_q[:, :D_HEAD]
        k = b.features @ cfg.w_k[:, :D_HEAD]
        if tag == "HARoPE":
            continue
        np.testing.assert_allclose(attention_scores(b, cfg, 0), q @ k.T / math.sqrt(D_HEAD), atol=1e-13)


def test_scores_match_adapted_score(rng):
    cfg = config("HARoPE", rng)
    perturb_bank(cfg.scheme, rng)
    b = random_batch(rng)
    for h in range(H):
        s = attention_scores(b, cfg, h)
        p = cfg.scheme.bank.head_params(h)
        sl = slice(h * D_HEAD, (h + 1) * D_HEAD)
        q, k = b.features @ cfg.w_q[:, sl], b.features @ cfg.w_k[:, sl]
        for i in range(b.n_tokens):
            for j in range(b.n_tokens):
                delta = GridPosition(tuple(b.positions[j] - b.positions[i]))
                want = adapted_score(q[i], k[j], delta, p, cfg.scheme.rotary) / math.sqrt(D_HEAD)
                assert abs(s[i, j] - want) < 1e-10
    with pytest.raises(IndexError):
        attention_scores(b, cfg, H)


def test_softmax_rows_sum_to_one(rng):
    p = softmax_rows(rng.standard_normal((7, 9)) * 30)
    assert np.max(np.abs(p.sum(axis=1) - 1)) < 1e-12


def test_shared_vs_headwise_banks(rng):
    shared = make_scheme("HARoPE", D_HEAD, D, 4, (5, 5), shared=True)
    perturb_bank(shared, rng)
    mats = shared.bank.matrices()
    assert all(np.array_equal(mats[0], m) for m in mats)
    hw = make_scheme("HARoPE", D_HEAD, D, 4, (5, 5), shared=False)
    perturb_bank(hw, rng)
    mats = hw.bank.matrices()
    assert any(not np.array_equal(mats[0], m) for m in mats[1:])


def test_shape_errors(rng):
    cfg = config("RoPE_ND_axial", rng)
    with pytest.raises(ShapeError):
        mha_forward(TokenBatch(np.ones((2, D + 1)), [[0, 0], [1, 1]]), cfg)
    with pytest.raises(ShapeError):
        TokenBatch(np.ones((2, D)), [[0, 0]])


@pytest.mark.parametrize("tag", [t.value for t in SchemeTag])
def test_tape_route_matches_reference(tag, rng):
    cfg = config(tag, rng)
    if tag == "HARoPE":
        perturb_bank(cfg.scheme, rng)
    batches = [random_batch(rng) for _ in range(3)]
    pos = batches[0].positions
    x = np.stack([b.features for b in batches])
    t = ad.Tape()
    w = {k: t.leaf(getattr(cfg, k), k) for k in ("w_q", "w_k", "w_v", "w_o")}
    adapt = ape = None
    if tag == "HARoPE":
        arrays = cfg.scheme.bank.stacked()
        adapt = adapt_matrices_tape(AdaptVariant.SVD, {k: t.leaf(v, k) for k, v in arrays.items()}, D_HEAD)
        np.testing.assert_allclose(adapt.value, np.stack([build_adapt_matrix(p) for p in cfg.scheme.bank.params]),
                                   atol=1e-14)
    if tag == "APE_learned":
        ape = t.leaf(cfg.scheme.ape_table, "ape")
    out = mha_tape(t.const(x), w, H, cfg.scheme, pos, adapt, ape)
    for i in range(3):
        ref = mha_forward(TokenBatch(x[i], pos), cfg).features
        np.testing.assert_allclose(out.value[i], ref, atol=1e-12, rtol=0)
    # per-sample positions
    pos3 = np.stack([b.positions for b in batches])
    out3 = mha_tape(t.const(x), w, H, cfg.scheme, pos3, adapt, ape)
    for i in range(3):
        np.testing.assert_allclose(out3.value[i], mha_forward(batches[i], cfg).features, atol=1e-12, rtol=0)


def test_score_csv(rng):
    text = score_matrix_csv(np.arange(6.0).reshape(2, 3))
    assert text.splitlines() == ["k0,k1,k2", "0,1,2", "3,4,5"]


def test_identity_init_with_each_variant_tape():
    t = ad.Tape()
    for v in (AdaptVariant.SVD, AdaptVariant.ORTHOGONAL, AdaptVariant.NORMAL):
        p = init_identity(4, v)
        a = adapt_matrices_tape(v, {f: t.leaf(getattr(p, f)[None], f) for f in p.present_fields()}, 4)
        assert np.max(np.abs(a.value[0] - np.eye(4))) <= 1e-14
