"""
Cross-row compensation: BoA against GPTQ
========================================

GPTQ treats every output row independently; BoA also pushes each row's
rounding error into the not-yet-quantized rows of the same head. With an
identity row factor the two coincide, and on a materialized Kronecker
Hessian BoA is the same as sequential OBS in row-major order.
"""

import numpy as np

from attnquant import oracle
from attnquant.hessian import HessianFactors, LayerKind, dampen
from attnquant.linalg import inverse_cholesky_upper, kron
from attnquant.quant import QuantConfig, fit_row_scales
from attnquant.solver import boa_quantize_head, gptq_core

rng = np.random.default_rng(8)
d_h, cols = 2, 3
w = rng.standard_normal((d_h, cols))


def random_spd(n):
    m = rng.standard_normal((n, n))
    return m @ m.T / n + 0.5 * np.eye(n)


f = dampen(HessianFactors(random_spd(cols), random_spd(d_h), LayerKind.QUERY))
u_col, u_row = inverse_cholesky_upper(f.h_col), inverse_cholesky_upper(f.h_row)
grids = fit_row_scales(w, f.h_col, QuantConfig(bits=2))
h_full = kron(f.h_col, f.h_row)


def loss(w_hat):
    return oracle.quadratic_loss(h_full, oracle.vec(w_hat - w))


# GPTQ ignores the row factor
codes, _ = gptq_core(w, u_col, grids)
scale = np.array([g.scale for g in grids])[:, None]
zero = np.array([g.zero for g in grids])[:, None]
print("gptq loss", loss(scale * (codes - zero)))

# BoA uses it
boa = boa_quantize_head(w, u_col, u_row, grids)
print("boa  loss", loss(boa.dequantized))

# identity row factor: BoA reproduces the GPTQ codes
same = boa_quantize_head(w, u_col, np.eye(d_h), grids)
print("identity row factor matches gptq:", np.array_equal(same.codes, codes))

# OBS over the full Hessian, quantizing row 0 first, then row 1, ...
order = [c * d_h + r for r in range(d_h) for c in range(cols)]
obs = oracle.obs_full_update(h_full, oracle.vec(w), order, [grids[i % d_h] for i in range(w.size)])
print("max gap to materialized OBS:", np.max(np.abs(obs.weights - oracle.vec(boa.dequantized))))

# the global optimum over all 2-bit assignments
codes_opt, best = oracle.exhaustive_min_assignment(
    h_full, oracle.vec(w), [grids[i % d_h] for i in range(w.size)])
print("exhaustive optimum", best)
