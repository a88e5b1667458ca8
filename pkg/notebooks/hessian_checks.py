"""
Checking the Kronecker-factored Hessians
========================================

The attention output error is quadratic in the value and out weights, so
their Hessians factor exactly. Finite differences of the full forward pass
confirm that; query and key are checked against the analytic Jacobian.
"""

import numpy as np

from attnquant import oracle
from attnquant.hessian import LayerKind, build_factors
from attnquant.linalg import kron
from attnquant.model import AttentionBlock, CalibrationSet

rng = np.random.default_rng(0)
d, heads, seq_len = 4, 2, 3
block = AttentionBlock(heads=heads, **{n: rng.standard_normal((d, d)) / 2
                                       for n in ("w_q", "w_k", "w_v", "w_out")})
x = rng.standard_normal((d, seq_len))
calib = CalibrationSet((x,))

# value: kron(h_col, h_row) against the brute-force Hessian
f = build_factors(LayerKind.VALUE, block, calib, head=0)
fd = oracle.fd_attention_hessian(block, x, LayerKind.VALUE, 0)
print("value  rel err", np.linalg.norm(fd - kron(f.h_col, f.h_row)) / np.linalg.norm(fd))

# out, with the per-head column factor
f = build_factors(LayerKind.OUT, block, calib, head=1, out_policy="per_head")
fd = oracle.fd_attention_hessian(block, x, LayerKind.OUT, 1)
print("out    rel err", np.linalg.norm(fd - kron(f.h_col, f.h_row)) / np.linalg.norm(fd))

# query and key are not quadratic; compare the Gauss-Newton term instead
for kind in (LayerKind.QUERY, LayerKind.KEY):
    jac = oracle.attention_jacobian(block, x, kind, 0)
    fd = oracle.fd_attention_hessian(block, x, kind, 0)
    print(f"{kind.value:6s} rel err", np.linalg.norm(fd - 2 * jac.T @ jac) / np.linalg.norm(fd))

# how far the relaxed query/key factors sit from the exact Hessian (no threshold implied)
for kind in (LayerKind.QUERY, LayerKind.KEY):
    f = build_factors(kind, block, calib, head=0)
    print(kind.value, oracle.relaxed_factor_report(block, x, kind, 0, f))
