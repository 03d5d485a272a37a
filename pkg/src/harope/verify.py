"""Invariant suites behind ``harope verify``.

Each suite returns a list of :class:`Check` rows (property name, worst
observed error, tolerance). Matrix exponentials go through the
``numerics`` module attribute at call time so a patched ``expm`` is seen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from harope import adapt
from harope import autodiff as ad
from harope import numerics as nx
from harope.adapt import AdaptBank, AdaptVariant, init_identity
from harope.attention import MHAConfig, TokenBatch, adapt_matrices_tape, make_scheme, mha_forward, mha_tape
from harope.rotary import (GridPosition, apply_rotary_nd, make_rotary_config, rotation_matrix_nd,
                           separable_score)


@dataclass
class Check:
    name: str
    max_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_err)) and self.max_err <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name:<40s} max_err={self.max_err:.3e}  tol={self.tol:.0e}"


def _pos(rng, axes, scale=50.0):
    return GridPosition(tuple(rng.uniform(-scale, scale, axes)))


def random_svd_params(rng, dim, spread=1.0) -> adapt.HeadAdaptParams:
    p = init_identity(dim, AdaptVariant.SVD)
    return p.with_vector(p.vector() + spread * rng.uniform(-1, 1, p.vector().size))


def score_loss_tape(q, k, r, dim):
    """Loss builder q^T A^T R A k for grad_check over SVD leaves skew_u, skew_v, sigma_raw."""
    def f(tape, leaves):
        a = adapt_matrices_tape(AdaptVariant.SVD, {n: ad.reshape(v, (1, -1)) for n, v in leaves.items()}, dim)
        a = ad.reshape(a, (dim, dim))
        return ad.sum(ad.mul(tape.const(q[None]) @ ad.transpose(a) @ r @ a, k[None]))
    return f


def suite_rotary(rng, n=200) -> list[Check]:
    comp = inv = norm = sep = rel = 0.0
    for _ in range(n):
        axes = int(rng.integers(1, 4))
        d = 2 * axes * int(rng.integers(1, 9))
        cfg = make_rotary_config(d, axes)
        m, p = _pos(rng, axes), _pos(rng, axes)
        rm, rp = rotation_matrix_nd(m, cfg), rotation_matrix_nd(p, cfg)
        comp = max(comp, np.linalg.norm(rm @ rp - rotation_matrix_nd(m + p, cfg)))
        inv = max(inv, np.linalg.norm(rm.T @ rm - np.eye(d)),
                  np.linalg.norm(rm.T - rotation_matrix_nd(GridPosition(tuple(-c for c in m.coords)), cfg)))
        v = rng.standard_normal(d)
        norm = max(norm, abs(np.linalg.norm(apply_rotary_nd(v, m, cfg)) - np.linalg.norm(v)))
        q, k = rng.standard_normal((2, d))
        full = float(apply_rotary_nd(q, m, cfg) @ apply_rotary_nd(k, p, cfg))
        sep = max(sep, abs(full - separable_score(q, k, m, p, cfg)))
        rel = max(rel, abs(full - float(q @ rotation_matrix_nd(p - m, cfg) @ k)))
    return [Check("rotary.composition", comp, 1e-11), Check("rotary.transpose_inverse", inv, 1e-11),
            Check("rotary.norm_preservation", norm, 1e-12), Check("rotary.separability", sep, 1e-10),
            Check("rotary.relative_offset", rel, 1e-10)]


def suite_numerics(rng, n=100) -> list[Check]:
    ref = orth = rot = skew = sp = 0.0
    for _ in range(n):
        d = int(rng.integers(2, 12))
        m = rng.standard_normal((d, d)) * rng.uniform(0.01, 4.0)
        want = scipy.linalg.expm(m)
        ref = max(ref, np.linalg.norm(nx.expm(m) - want) / max(1.0, np.linalg.norm(want)))
        s = nx.skew_to_matrix(rng.uniform(-3, 3, nx.skew_size(d)), d)
        orth = max(orth, nx.orthogonality_defect(nx.expm(s)))
        skew = max(skew, np.abs(nx.skew_to_matrix(nx.matrix_to_skew(s), d) - s).max())
        th = rng.uniform(-10, 10)
        c, sn = math.cos(th), math.sin(th)
        rot = max(rot, np.abs(nx.expm(np.array([[0.0, th], [-th, 0.0]])) - np.array([[c, sn], [-sn, c]])).max())
        y = rng.uniform(1e-3, 20.0, 8)
        sp = max(sp, np.max(np.abs(nx.softplus(nx.softplus_inv(y)) - y) / y))
    return [Check("numerics.expm_reference", ref, 1e-12), Check("numerics.expm_skew_orthogonal", orth, 1e-12),
            Check("numerics.expm_plane_rotation", rot, 1e-12), Check("numerics.skew_round_trip", skew, 0.0),
            Check("numerics.softplus_inverse", sp, 1e-12)]


def suite_adapt(rng, n=200) -> list[Check]:
    rel = fact = orth = ident = 0.0
    for _ in range(n):
        axes = int(rng.integers(1, 4))
        d = 2 * axes * int(rng.integers(1, 5))
        cfg = make_rotary_config(d, axes)
        p = random_svd_params(rng, d)
        a = adapt.build_adapt_matrix(p)
        q, k = rng.standard_normal((2, d))
        pq, pk = _pos(rng, axes), _pos(rng, axes)
        rq, rk = adapt.apply_harope(q, k, pq, pk, p, cfg, a)
        rel = max(rel, abs(float(rq @ rk) - adapt.adapted_score(q, k, pk - pq, p, cfg, a)))
        u = scipy.linalg.expm(nx.skew_to_matrix(p.skew_u, d))
        v = scipy.linalg.expm(nx.skew_to_matrix(p.skew_v, d))
        fact = max(fact, np.abs(a - (u * nx.softplus(p.sigma_raw)) @ v.T).max())
        uu, _, vv = adapt.svd_factors(p)
        orth = max(orth, nx.orthogonality_defect(uu), nx.orthogonality_defect(vv))
    for variant in AdaptVariant:
        ident = max(ident, np.abs(adapt.build_adapt_matrix(init_identity(6, variant)) - np.eye(6)).max())
    bank = AdaptBank(3, False, [random_svd_params(rng, 4) for _ in range(3)])
    text = adapt.dump_checkpoint([bank])
    rt = 0.0 if adapt.dump_checkpoint(adapt.parse_checkpoint(text)) == text else 1.0
    return [Check("adapt.relative_offset", rel, 1e-10), Check("adapt.svd_factorization", fact, 1e-12),
            Check("adapt.orthogonal_factors", orth, 1e-12), Check("adapt.identity_init", ident, 1e-15),
            Check("adapt.checkpoint_round_trip", rt, 0.0)]


def suite_autodiff(rng, n=5) -> list[Check]:
    grad = tape_expm = 0.0
    d = 8
    cfg = make_rotary_config(d, 2)
    for _ in range(n):
        q, k = rng.standard_normal((2, d))
        r = rotation_matrix_nd(_pos(rng, 2, 5.0), cfg)
        p = random_svd_params(rng, d)
        rep = ad.grad_check(score_loss_tape(q, k, r, d), {f: getattr(p, f) for f in ("skew_u", "skew_v", "sigma_raw")})
        grad = max(grad, rep.worst)
        s = rng.uniform(-2, 2, (3, nx.skew_size(d)))
        t = ad.Tape()
        e = ad.expm(ad.skew(t.leaf(s), d)).value
        tape_expm = max(tape_expm, max(np.abs(e[i] - nx.expm(nx.skew_to_matrix(s[i], d))).max() for i in range(3)))
    return [Check("autodiff.harope_score_gradcheck", grad, 1e-4), Check("autodiff.tape_expm", tape_expm, 1e-12)]


def suite_attention(rng, n=20) -> list[Check]:
    heads, d = 2, 8
    D = heads * d
    identity = trans = tape_err = 0.0
    for _ in range(n):
        rope = MHAConfig.random(heads, d, make_scheme("RoPE_ND_axial", d, D, heads, (8, 8)), rng)
        ha = MHAConfig(heads, d, make_scheme("HARoPE", d, D, heads, (8, 8)), rope.w_q, rope.w_k, rope.w_v, rope.w_o)
        b = TokenBatch(rng.standard_normal((5, D)), rng.integers(0, 8, (5, 2)))
        identity = max(identity, np.abs(mha_forward(b, ha).features - mha_forward(b, rope).features).max())
        ha.scheme.bank.params[:] = [random_svd_params(rng, d) for _ in range(heads)]
        out = mha_forward(b, ha).features
        trans = max(trans, np.abs(mha_forward(b.shifted(rng.uniform(-20, 20, 2)), ha).features - out).max())
        t = ad.Tape()
        w = {k: t.const(getattr(ha, k)) for k in ("w_q", "w_k", "w_v", "w_o")}
        a = adapt_matrices_tape(AdaptVariant.SVD, {f: t.const(v) for f, v in ha.scheme.bank.stacked().items()}, d)
        tape_err = max(tape_err, np.abs(mha_tape(t.const(b.features[None]), w, heads, ha.scheme, b.positions, a).value[0]
                                        - out).max())
    return [Check("attention.identity_recovers_axial", identity, 1e-10),
            Check("attention.translation_invariance", trans, 1e-9),
            Check("attention.tape_matches_reference", tape_err, 1e-12)]


SUITES = {"rotary": suite_rotary, "numerics": suite_numerics, "adapt": suite_adapt,
          "autodiff": suite_autodiff, "attention": suite_attention}


def run_suites(names, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for name in names:
        out.extend(SUITES[name](rng))
    return out
