"""Oracle checks run by ``attnquant validate``.

Each check draws a seeded tiny instance, compares the production path with
an oracle from :mod:`attnquant.oracle` and reports the worst discrepancy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import oracle
from .hessian import HessianFactors, LayerKind, build_factors, dampen
from .linalg import cholesky_lower, inverse_cholesky_upper, kron
from .model import AttentionBlock, CalibrationSet
from .quant import QuantConfig, fit_row_scales
from .solver import boa_quantize_head, boa_quantize_layer, gptq_core, prepare_head_factors


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: worst={self.worst:.3e} tol={self.tolerance:.0e}"


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(b), np.finfo(float).tiny)
    return float(np.linalg.norm(a - b) / scale)


def random_spd(rng, n, floor=0.5):
    m = rng.standard_normal((n, n))
    return m @ m.T / n + floor * np.eye(n)


def random_block(rng, d, heads, causal=False):
    w = {n: rng.standard_normal((d, d)) / np.sqrt(d) for n in ("w_q", "w_k", "w_v", "w_out")}
    return AttentionBlock(heads=heads, causal=causal, **w)


def check_quadratic_identity(seeds, max_dim=4):
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        r, c = rng.integers(1, max_dim + 1, size=2)
        m1 = rng.standard_normal((rng.integers(1, 5), r))
        m2 = rng.standard_normal((c, rng.integers(1, 5)))
        fd = oracle.fd_quadratic_hessian(m1, m2)
        worst = max(worst, rel_err(fd, 2.0 * kron(m2 @ m2.T, m1.T @ m1)))
    return CheckResult("quadratic Hessian identity", worst < 1e-5, worst, 1e-5)


def exact_hessian_errors(rng, d, heads, seq_len):
    """Relative FD-vs-closed-form errors for value/out and FD-vs-analytic for query/key."""
    block = random_block(rng, d, heads)
    x = rng.standard_normal((d, seq_len))
    calib = CalibrationSet((x,))
    errs = {}
    for h in range(heads):
        fd = oracle.fd_attention_hessian(block, x, LayerKind.VALUE, h)
        f = build_factors(LayerKind.VALUE, block, calib, h)
        errs.setdefault("value", []).append(rel_err(fd, kron(f.h_col, f.h_row)))
        fd = oracle.fd_attention_hessian(block, x, LayerKind.OUT, h)
        f = build_factors(LayerKind.OUT, block, calib, h, out_policy="per_head")
        errs.setdefault("out", []).append(rel_err(fd, kron(f.h_col, f.h_row)))
        for kind in (LayerKind.QUERY, LayerKind.KEY):
            fd = oracle.fd_attention_hessian(block, x, kind, h)
            jac = oracle.attention_jacobian(block, x, kind, h)
            errs.setdefault(kind.value, []).append(rel_err(fd, 2.0 * jac.T @ jac))
    return {k: max(v) for k, v in errs.items()}


def check_exact_hessians(seeds, d=4, heads=2, seq_len=3):
    worst = {}
    for s in seeds:
        for k, v in exact_hessian_errors(np.random.default_rng(s), d, heads, seq_len).items():
            worst[k] = max(worst.get(k, 0.0), v)
    return [
        CheckResult(f"{k} Hessian matches finite differences", v < 1e-5, v, 1e-5)
        for k, v in sorted(worst.items())
    ]


def check_kron_cholesky(seeds):
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        a, b = random_spd(rng, 4), random_spd(rng, 3)
        lhs = cholesky_lower(np.linalg.inv(kron(a, b)))
        rhs = kron(inverse_cholesky_upper(a).T, inverse_cholesky_upper(b).T)
        worst = max(worst, rel_err(rhs, lhs))
    return CheckResult("Cholesky of Kronecker inverse factorizes", worst < 1e-8, worst, 1e-8)


def row_equivalence_error(rng, d_h, cols, bits=2, damp=0.01):
    """Max gap between the BoA head path and materialized OBS, per weight."""
    w = rng.standard_normal((d_h, cols))
    f = dampen(
        HessianFactors(random_spd(rng, cols), random_spd(rng, d_h), LayerKind.QUERY), damp
    )
    config = QuantConfig(bits=bits)
    grids = fit_row_scales(w, f.h_col, config)
    res = boa_quantize_head(
        w, inverse_cholesky_upper(f.h_col), inverse_cholesky_upper(f.h_row), grids
    )
    u_col = inverse_cholesky_upper(f.h_col)
    presnap = res.dequantized + res.e_rows * np.diag(u_col)[None, :]

    h_full = kron(f.h_col, f.h_row)
    order = [c * d_h + r for r in range(d_h) for c in range(cols)]
    cell_grids = [grids[i % d_h] for i in range(d_h * cols)]
    obs = oracle.obs_full_update(h_full, oracle.vec(w), order, cell_grids)
    gap = max(
        float(np.max(np.abs(oracle.vec(presnap) - obs.presnap))),
        float(np.max(np.abs(oracle.vec(res.dequantized) - obs.weights))),
    )
    if not np.array_equal(oracle.vec(res.codes), obs.codes):
        gap = np.inf
    return gap


def check_row_equivalence(seeds):
    worst = 0.0
    for s in seeds:
        rng = np.random.default_rng(s)
        worst = max(worst, row_equivalence_error(rng, int(rng.integers(2, 4)),
                                                 int(rng.integers(2, 5))))
    return CheckResult("row update matches materialized OBS", worst < 1e-8, worst, 1e-8)


def _layer_instance(rng, d, heads, seq_len, n_samples=2):
    block = random_block(rng, d, heads)
    calib = CalibrationSet(tuple(rng.standard_normal((d, seq_len)) for _ in range(n_samples)))
    return block, calib


def check_gptq_degeneracy(seeds, d=4, heads=2, seq_len=3):
    ok = True
    config = QuantConfig(bits=3)
    for s in seeds:
        rng = np.random.default_rng(s)
        block, calib = _layer_instance(rng, d, heads, seq_len)
        kind = [LayerKind.QUERY, LayerKind.KEY, LayerKind.VALUE][s % 3]
        name = {"query": "w_q", "key": "w_k", "value": "w_v"}[kind.value]
        w = getattr(block, name)
        factors = [build_factors(kind, block, calib, h) for h in range(heads)]
        fs = prepare_head_factors(factors, identity_row=True)
        boa = boa_quantize_layer(kind, block, w, fs, config)
        for h in range(heads):
            rows = block.head_rows(h)
            grids = fit_row_scales(w[rows], fs.factors[h].h_col, config)
            codes, _ = gptq_core(w[rows], fs.u_col[h], grids)
            ok &= bool(np.array_equal(codes, boa.codes[rows]))
    return CheckResult("identity row factor reduces to GPTQ", ok, 0.0 if ok else 1.0, 0.0)


def check_scale_invariance(seeds, d=4, heads=2, seq_len=3, factor=4.0):
    ok = True
    config = QuantConfig(bits=3)
    for s in seeds:
        rng = np.random.default_rng(s)
        block, calib = _layer_instance(rng, d, heads, seq_len)
        for kind, name in ((LayerKind.QUERY, "w_q"), (LayerKind.VALUE, "w_v")):
            base = [build_factors(kind, block, calib, h) for h in range(heads)]
            ref = boa_quantize_layer(kind, block, getattr(block, name),
                                     prepare_head_factors(base), config)
            for col, row in ((factor, 1.0), (1.0, factor), (factor, factor)):
                scaled = prepare_head_factors([f.scaled(col, row) for f in base])
                out = boa_quantize_layer(kind, block, getattr(block, name), scaled, config)
                ok &= bool(np.array_equal(ref.codes, out.codes))
    return CheckResult("codes invariant to Hessian scaling", ok, 0.0 if ok else 1.0, 0.0)


def run_validation(d=4, heads=2, seq_len=3, seed=0, n_seeds=5):
    seeds = [seed + i for i in range(n_seeds)]
    results = [check_quadratic_identity(seeds)]
    results += check_exact_hessians(seeds, d, heads, seq_len)
    results += [
        check_kron_cholesky(seeds),
        check_row_equivalence(seeds),
        check_gptq_degeneracy(seeds, d, heads, seq_len),
        check_scale_invariance(seeds, d, heads, seq_len),
    ]
    return results
