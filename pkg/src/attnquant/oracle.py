"""Brute-force references for checking the factored Hessians and updates.

Everything here materializes objects the production path never builds
(full Kronecker Hessians, Jacobians of the attention map, all integer
assignments), so sizes are capped and meant for tiny problems only.

Vectorization is column-major throughout: ``vec(W)`` stacks the columns of
``W``, hence ``vec(M1 @ W @ M2) == kron(M2.T, M1) @ vec(W)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .hessian import LayerKind
from .linalg import DimensionOverflow, inverse_cholesky_upper, symmetrize
from .model import mha_forward
from .quant import quantize_values

__all__ = [
    "SearchSpaceTooLarge",
    "vec",
    "unvec",
    "fd_quadratic_hessian",
    "fd_attention_hessian",
    "attention_jacobian",
    "head_weight_slice",
    "relaxation_bound_sides",
    "relaxed_factor_report",
    "ObsResult",
    "obs_full_update",
    "exhaustive_min_assignment",
    "quadratic_loss",
    "MAX_HESSIAN_ELEMENTS",
    "MAX_ASSIGNMENTS",
]

MAX_HESSIAN_ELEMENTS = 2**16
MAX_ASSIGNMENTS = 2**20
QUADRATIC_STEP = 1e-4
ATTENTION_STEP = 1e-5


class SearchSpaceTooLarge(ValueError):
    pass


def vec(m):
    return np.asarray(m, dtype=np.float64).reshape(-1, order="F")


def unvec(v, shape):
    return np.asarray(v, dtype=np.float64).reshape(shape, order="F")


def _check_size(n):
    if n * n > MAX_HESSIAN_ELEMENTS:
        raise DimensionOverflow(f"{n}x{n} Hessian exceeds {MAX_HESSIAN_ELEMENTS} elements")


def _central_hessian(f, n, step):
    # Mixed central differences; exact up to rounding for quadratics.
    hess = np.zeros((n, n))
    eye = np.eye(n) * step
    for i in range(n):
        for j in range(i, n):
            val = (
                f(eye[i] + eye[j])
                - f(eye[i] - eye[j])
                - f(-eye[i] + eye[j])
                + f(-eye[i] - eye[j])
            ) / (4.0 * step * step)
            hess[i, j] = hess[j, i] = val
    return hess


def fd_quadratic_hessian(m1, m2, shape=None, step=QUADRATIC_STEP):
    """Finite-difference Hessian of ``||m1 @ dW @ m2||_F**2`` at ``dW = 0``."""
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if shape is None:
        shape = (m1.shape[1], m2.shape[0])
    if shape != (m1.shape[1], m2.shape[0]):
        raise ValueError(f"dW shape {shape} does not conform with {m1.shape}, {m2.shape}")
    n = shape[0] * shape[1]
    _check_size(n)

    def f(v):
        r = m1 @ unvec(v, shape) @ m2
        return float(np.sum(r * r))

    return _central_hessian(f, n, step)


def head_weight_slice(block, kind, head):
    """Name of the block weight and the index selecting the head's sub-block."""
    kind = LayerKind(kind)
    rows = block.head_rows(head)
    if kind is LayerKind.OUT:
        return "w_out", (slice(None), rows)
    name = {LayerKind.QUERY: "w_q", LayerKind.KEY: "w_k", LayerKind.VALUE: "w_v"}[kind]
    return name, (rows, slice(None))


def _perturbed_output(block, x, kind, head):
    name, index = head_weight_slice(block, kind, head)
    base = getattr(block, name)
    shape = base[index].shape

    def out(v):
        w = base.copy()
        w[index] += unvec(v, shape)
        return vec(mha_forward(block.with_weights(**{name: w}), x).output)

    return out, shape[0] * shape[1]


def fd_attention_hessian(block, x, kind, head, step=ATTENTION_STEP):
    """Gauss-Newton Hessian ``2 J^T J`` of the attention output error.

    ``J`` is the central-difference Jacobian of ``vec(MHA(x))`` with respect
    to ``vec`` of the head's weight slice (``d_h x d`` for query/key/value,
    ``d x d_h`` for out). The residual vanishes at the full-precision
    weights, so this is the exact second-order term there.
    """
    out, n = _perturbed_output(block, x, kind, head)
    _check_size(n)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        cols.append((out(e) - out(-e)) / (2.0 * step))
    jac = np.stack(cols, axis=1)
    return 2.0 * jac.T @ jac


def _softmax_jacobians(a):
    # per query row i: diag(a_i) - a_i a_i^T  (L x L each)
    return np.einsum("ij,jk->ijk", a, np.eye(a.shape[1])) - np.einsum("ij,ik->ijk", a, a)


def attention_jacobian(block, x, kind, head):
    """Analytic Jacobian of ``vec(MHA(x))`` w.r.t. the head weight slice.

    Query and key use the exact softmax linearization; value and out are
    linear in their weights.
    """
    kind = LayerKind(kind)
    tr = mha_forward(block, x)
    d, d_h = block.d, block.d_h
    w_out_h = block.w_out[:, block.head_rows(head)]
    q, k, v, a = tr.q[head], tr.k[head], tr.v[head], tr.attn[head]
    scale = 1.0 / np.sqrt(d_h)
    n = d * d_h
    jsm = _softmax_jacobians(a) if kind in (LayerKind.QUERY, LayerKind.KEY) else None
    cols = []
    for idx in range(n):
        if kind is LayerKind.OUT:
            dw = unvec(np.eye(n)[idx], (d, d_h))
            dout = dw @ tr.x_out[block.head_rows(head)]
        else:
            dw = unvec(np.eye(n)[idx], (d_h, d))
            if kind is LayerKind.VALUE:
                dout = w_out_h @ (a @ (dw @ x).T).T
            else:
                # masked logits carry zero softmax mass, so J_i ignores them
                if kind is LayerKind.QUERY:
                    ds = ((dw @ x).T @ k.T) * scale
                else:
                    ds = (q @ (dw @ x)) * scale
                da = np.einsum("ijk,ik->ij", jsm, ds)
                dout = w_out_h @ (da @ v).T
        cols.append(vec(dout))
    return np.stack(cols, axis=1)


def relaxation_bound_sides(block, x, head, dw):
    """Both sides of the bound used to relax the query Hessian.

    Returns ``(lhs, rhs)`` with ``lhs`` the norm of the linearized output
    change for a query perturbation ``dw`` (``d_h x d``) and
    ``rhs = ||T||_HS * ||K_h dw X||_F``, where ``T`` maps the logit
    perturbation to the output change and ``||T||_HS`` is its Frobenius
    (Hilbert-Schmidt) norm, i.e. ``sqrt(sum_i ||W_out,h V_h^T J_i||_F**2)/sqrt(d_h)``
    over the per-row softmax Jacobians ``J_i``.
    """
    tr = mha_forward(block, x)
    k, v, a = tr.k[head], tr.v[head], tr.attn[head]
    w_out_h = block.w_out[:, block.head_rows(head)]
    d_h = block.d_h
    jsm = _softmax_jacobians(a)
    g = k @ dw @ x  # L x L, column i is the logit change of query i
    da_t = np.einsum("ijk,ki->ji", jsm, g) / np.sqrt(d_h)
    lhs = float(np.linalg.norm(w_out_h @ v.T @ da_t))
    m = w_out_h @ v.T
    t_hs = np.sqrt(sum(np.sum((m @ jsm[i]) ** 2) for i in range(jsm.shape[0]))) / np.sqrt(d_h)
    rhs = float(t_hs * np.linalg.norm(g))
    return lhs, rhs


def relaxed_factor_report(block, x, kind, head, factors):
    """Compare relaxed query/key factors with the exact Gauss-Newton Hessian.

    ``factors`` is the head's :class:`~attnquant.hessian.HessianFactors`
    built from the single sample ``x``. Returns the relative Frobenius gap
    after the best scalar fit (the factors are only defined up to scale),
    that scale, and whether the diagonal energy per weight row and per
    weight column peaks at the same index in both. Informational only.
    """
    exact = fd_attention_hessian(block, x, kind, head)
    approx = np.kron(factors.h_col, factors.h_row)
    alpha = float(np.sum(exact * approx) / np.sum(approx * approx))
    gap = float(np.linalg.norm(exact - alpha * approx) / np.linalg.norm(exact))
    shape = (block.d_h, block.d)
    e_diag, a_diag = unvec(np.diag(exact), shape), unvec(np.diag(approx), shape)
    return {
        "relative_gap": gap,
        "scale": alpha,
        "row_argmax_agrees": bool(np.argmax(e_diag.sum(1)) == np.argmax(a_diag.sum(1))),
        "col_argmax_agrees": bool(np.argmax(e_diag.sum(0)) == np.argmax(a_diag.sum(0))),
    }


@dataclass
class ObsResult:
    weights: np.ndarray
    codes: np.ndarray
    presnap: np.ndarray


def _grid_vectors(grids, n):
    if len(grids) != n:
        raise ValueError(f"{len(grids)} grids for {n} weights")
    scale = np.array([g.scale for g in grids], dtype=np.float64)
    zero = np.array([g.zero for g in grids], dtype=np.float64)
    maxq = np.array([g.maxq for g in grids], dtype=np.float64)
    return scale, zero, maxq


def obs_full_update(h_full, w_vec, quant_order, grids, path="fixed"):
    """Sequential Optimal-Brain-Surgeon quantization on a materialized Hessian.

    Entries are quantized in ``quant_order``; after each one, the remaining
    entries receive the compensating update. ``path="recomputed"`` factors the
    remaining principal submatrix at every step, ``path="fixed"`` reads rows
    of one ``Chol(inv(H)).T`` computed in quantization order. ``grids`` holds
    one grid per entry of ``w_vec``. ``presnap`` records each entry's value
    just before it was rounded.
    """
    h = symmetrize(h_full)
    n = h.shape[0]
    if h.size > MAX_HESSIAN_ELEMENTS:
        raise DimensionOverflow(f"Hessian with {h.size} elements exceeds cap")
    order = [int(i) for i in quant_order]
    if sorted(order) != list(range(n)):
        raise ValueError("quant_order must be a permutation of all indices")
    w = np.array(w_vec, dtype=np.float64)
    scale, zero, maxq = _grid_vectors(grids, n)
    codes = np.zeros(n, dtype=np.int64)
    presnap = np.zeros(n)

    if path == "fixed":
        u = inverse_cholesky_upper(h[np.ix_(order, order)])
    elif path != "recomputed":
        raise ValueError(f"unknown path {path!r}")

    for step, q in enumerate(order):
        rest = order[step + 1 :]
        presnap[q] = w[q]
        c, val = quantize_values(w[q], scale[q], zero[q], maxq[q])
        codes[q] = int(c)
        err = w[q] - float(val)
        w[q] = float(val)
        if not rest:
            continue
        if path == "fixed":
            row = u[step, step + 1 :] / u[step, step]
        else:
            sub = [q] + rest
            u_sub = inverse_cholesky_upper(h[np.ix_(sub, sub)])
            row = u_sub[0, 1:] / u_sub[0, 0]
        w[rest] -= err * row
    return ObsResult(w, codes, presnap)


def quadratic_loss(h_full, dw_vec):
    dw = np.asarray(dw_vec, dtype=np.float64)
    return float(dw @ h_full @ dw)


def exhaustive_min_assignment(h_full, w_vec, grids):
    """Global minimizer of ``dw^T H dw`` over all grid codes.

    Ties keep the lexicographically smallest code vector. Returns
    ``(codes, loss)``.
    """
    h = np.asarray(h_full, dtype=np.float64)
    w = np.asarray(w_vec, dtype=np.float64)
    n = w.shape[0]
    scale, zero, maxq = _grid_vectors(grids, n)
    levels = [int(m) + 1 for m in maxq]
    total = int(np.prod(levels, dtype=object))
    if total > MAX_ASSIGNMENTS:
        raise SearchSpaceTooLarge(f"{total} assignments exceed {MAX_ASSIGNMENTS}")
    codes = np.array(list(itertools.product(*(range(k) for k in levels))), dtype=np.int64)
    dw = scale * (codes - zero) - w
    losses = np.einsum("ni,ij,nj->n", dw, h, dw)
    best = int(np.argmin(losses))
    return codes[best], float(losses[best])
