"""Quantization engines: RTN, the GPTQ column loop and BoA.

BoA quantizes a projection head-row by head-row. The ``j``-th rows of all
heads are stacked and run through the GPTQ column loop together (heads are
treated as independent), then each head's not-yet-quantized rows receive
the cross-row compensation

    W_h[j+1:] -= outer(U_row[j, j+1:], E_h @ U_col) / U_row[j, j]

where ``U = Chol(inv(H)).T`` for the column and row Hessian factors and
``E_h`` is the normalized column error of head ``h``'s row ``j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .hessian import LayerKind, build_all_factors, dampen
from .linalg import inverse_cholesky_upper
from .model import (
    AttentionBlock,
    ShapeMismatch,
    attention_recon_error,
    layer_recon_error,
    mha_forward,
)
from .quant import fit_row_scales, grid_arrays, quantize_values

__all__ = [
    "QuantResult",
    "HeadFactorSet",
    "prepare_head_factors",
    "rtn_quantize",
    "gptq_core",
    "row_update",
    "boa_quantize_head",
    "boa_quantize_layer",
    "quantize_block",
    "BlockQuantization",
    "LAYER_KINDS",
]

LAYER_KINDS = {
    "w_q": LayerKind.QUERY,
    "w_k": LayerKind.KEY,
    "w_v": LayerKind.VALUE,
    "w_out": LayerKind.OUT,
}


@dataclass
class QuantResult:
    codes: np.ndarray
    grids: list
    dequantized: np.ndarray
    e_rows: np.ndarray | None = None
    metrics: dict = field(default_factory=dict)

    @property
    def scales(self):
        return np.array([g.scale for g in self.grids])

    @property
    def zeros(self):
        return np.array([g.zero for g in self.grids], dtype=np.int64)


@dataclass(frozen=True)
class HeadFactorSet:
    """Damped factors of every head plus their inverse-Cholesky matrices.

    A single entry (``len == 1``) stands for a factor set shared by all
    rows of the layer.
    """

    factors: tuple
    u_col: tuple
    u_row: tuple

    def __len__(self):
        return len(self.factors)


def prepare_head_factors(factors, damp_fraction=0.01, identity_row=False):
    """Dampen ``factors`` and precompute ``Chol(inv(h)).T`` for both sides.

    ``identity_row`` replaces every row factor by the identity, which
    reduces BoA to GPTQ.
    """
    damped, u_cols, u_rows = [], [], []
    for f in factors:
        if identity_row:
            f = type(f)(f.h_col, np.eye(f.h_row.shape[0]), f.kind, f.head)
        f = dampen(f, damp_fraction)
        damped.append(f)
        u_cols.append(inverse_cholesky_upper(f.h_col))
        u_rows.append(inverse_cholesky_upper(f.h_row))
    return HeadFactorSet(tuple(damped), tuple(u_cols), tuple(u_rows))


def _result(codes, grids, e_rows=None):
    scale, zero, _ = grid_arrays(grids)
    deq = scale * (codes - zero)
    return QuantResult(codes, list(grids), deq, e_rows)


def rtn_quantize(w, grids):
    """Round every entry of ``w`` to the nearest point of its row's grid."""
    w = np.asarray(w, dtype=np.float64)
    if len(grids) != w.shape[0]:
        raise ShapeMismatch(f"{len(grids)} grids for {w.shape[0]} rows")
    scale, zero, maxq = grid_arrays(grids)
    codes, _ = quantize_values(w, scale, zero, maxq)
    return _result(codes, grids)


def gptq_core(w_stack, u_col, grids):
    """Column-sequential quantization with error feedback.

    ``u_col`` is either one ``C x C`` upper-triangular matrix shared by all
    rows or an ``R x C x C`` stack with one matrix per row. Returns the
    integer codes and the normalized error matrix ``E`` (``R x C``).
    """
    w = np.array(w_stack, dtype=np.float64)
    rows, cols = w.shape
    u = np.asarray(u_col, dtype=np.float64)
    if u.ndim == 2:
        u = u[None]
    if u.shape[1:] != (cols, cols) or u.shape[0] not in (1, rows):
        raise ShapeMismatch(f"u_col {u.shape} does not match weight {w.shape}")
    if len(grids) != rows:
        raise ShapeMismatch(f"{len(grids)} grids for {rows} rows")
    scale, zero, maxq = grid_arrays(grids)
    scale, zero, maxq = scale[:, 0], zero[:, 0], maxq[:, 0]

    codes = np.zeros((rows, cols), dtype=np.int64)
    err = np.zeros((rows, cols))
    for j in range(cols):
        c, q = quantize_values(w[:, j], scale, zero, maxq)
        codes[:, j] = c
        err[:, j] = (w[:, j] - q) / u[:, j, j]
        w[:, j:] -= err[:, j, None] * u[:, j, j:]
    return codes, err


def row_update(w_head, e_row, u_row, u_col, j):
    """Compensate rows ``j+1:`` of one head for the quantization of row ``j``.

    Returns a new array; row ``j`` and earlier rows are left unchanged.
    """
    w = np.array(w_head, dtype=np.float64)
    e = np.asarray(e_row, dtype=np.float64).reshape(-1)
    u_row = np.asarray(u_row, dtype=np.float64)
    u_col = np.asarray(u_col, dtype=np.float64)
    n, c = w.shape
    if u_row.shape != (n, n) or u_col.shape != (c, c) or e.shape != (c,):
        raise ShapeMismatch("row_update operand shapes do not conform")
    if not 0 <= j < n:
        raise ShapeMismatch(f"row {j} out of range for {n} rows")
    if j + 1 < n:
        w[j + 1 :] -= np.outer(u_row[j, j + 1 :], e @ u_col) / u_row[j, j]
    return w


def _boa_rows(w, head_slices, u_cols, u_rows, grids):
    """Head-simultaneous BoA loop on a working copy of ``w``."""
    w = np.array(w, dtype=np.float64)
    n_heads = len(head_slices)
    d_h = head_slices[0].stop - head_slices[0].start
    codes = np.zeros(w.shape, dtype=np.int64)
    err = np.zeros(w.shape)
    u_stack = np.stack(u_cols)
    for j in range(d_h):
        idx = [s.start + j for s in head_slices]
        c, e = gptq_core(w[idx], u_stack, [grids[i] for i in idx])
        codes[idx] = c
        err[idx] = e
        scale, zero, _ = grid_arrays([grids[i] for i in idx])
        w[idx] = scale * (c - zero)
        for h in range(n_heads):
            s = head_slices[h]
            w[s] = row_update(w[s], e[h], u_rows[h], u_cols[h], j)
    return codes, err


def boa_quantize_head(w_head, u_col, u_row, grids):
    """BoA on a single head block (``d_h x C``) with given factors."""
    w_head = np.asarray(w_head, dtype=np.float64)
    codes, err = _boa_rows(w_head, [slice(0, w_head.shape[0])], [u_col], [u_row], grids)
    return _result(codes, grids, err)


def boa_quantize_layer(kind, block, w, factors, config, calib=None):
    """Quantize one projection of ``block`` with BoA.

    ``factors`` is a :class:`HeadFactorSet` (one entry per head, or one
    shared entry). Query, key and value rows are processed head-wise; the
    out projection, whose row factor is the identity, runs the GPTQ loop
    directly. When ``calib`` is given, ``metrics`` holds the layer
    reconstruction error and the attention error with only this layer
    quantized.
    """
    kind = LayerKind(kind)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (block.d, block.d):
        raise ShapeMismatch(f"weight {w.shape} does not match block width {block.d}")
    if kind is LayerKind.OUT:
        if len(factors) == 1:
            h_col, u_col = factors.factors[0].h_col, factors.u_col[0]
        elif len(factors) == block.heads:
            # per-head policy: block-diagonal column factor over head columns
            h_col = sla.block_diag(*(f.h_col for f in factors.factors))
            u_col = sla.block_diag(*factors.u_col)
        else:
            raise ShapeMismatch(f"{len(factors)} out factor sets for {block.heads} heads")
        grids = fit_row_scales(w, h_col, config)
        codes, err = gptq_core(w, u_col, grids)
    else:
        if len(factors) not in (1, block.heads):
            raise ShapeMismatch(f"{len(factors)} factor sets for {block.heads} heads")
        pick = (lambda h: h) if len(factors) > 1 else (lambda h: 0)
        slices = [block.head_rows(h) for h in range(block.heads)]
        grids = [None] * block.d
        for h, s in enumerate(slices):
            fitted = fit_row_scales(w[s], factors.factors[pick(h)].h_col, config)
            grids[s] = fitted
        u_cols = [factors.u_col[pick(h)] for h in range(block.heads)]
        u_rows = [factors.u_row[pick(h)] for h in range(block.heads)]
        codes, err = _boa_rows(w, slices, u_cols, u_rows, grids)
    result = _result(codes, grids, err)
    if calib is not None:
        name = _NAMES[kind]
        inputs = _layer_inputs(kind, block, calib)
        result.metrics["layer_recon_error"] = layer_recon_error(w, result.dequantized, inputs)
        result.metrics["attention_recon_error"] = attention_recon_error(
            block, block.with_weights(**{name: result.dequantized}), calib
        )
    return result


_NAMES = {v: k for k, v in LAYER_KINDS.items()}


def _layer_inputs(kind, block, calib):
    if kind is LayerKind.OUT:
        return [mha_forward(block, x).x_out for x in calib]
    return list(calib)


@dataclass
class BlockQuantization:
    block: AttentionBlock
    quantized: AttentionBlock
    layers: dict
    metrics: dict


def quantize_block(block, calib, config, identity_row=False, factor_scale=1.0):
    """Quantize all four projections of ``block`` with ``config.method``.

    Factors come from the full-precision block, so the layers are quantized
    independently of each other. RTN fits its scales against the damped
    GPTQ column factor and then rounds. ``identity_row`` (BoA only) swaps
    in the GPTQ factors with identity rows, so BoA must reproduce GPTQ.
    ``factor_scale`` multiplies every factor before damping.
    """
    method = config.method
    layers = {}
    for name, kind in LAYER_KINDS.items():
        w = getattr(block, name)
        if method == "boa" and not identity_row:
            fkind = kind
        else:
            fkind = kind if kind is LayerKind.OUT else LayerKind.GPTQ_BASELINE
        factors = build_all_factors(fkind, block, calib, out_policy=config.out_policy)
        factors = [f.scaled(factor_scale, factor_scale) for f in factors]
        if method == "rtn":
            h_col = dampen(factors[0], config.damp_fraction).h_col
            res = rtn_quantize(w, fit_row_scales(w, h_col, config))
        else:
            fs = prepare_head_factors(factors, config.damp_fraction, identity_row=identity_row)
            if method == "gptq" and kind is not LayerKind.OUT:
                # GPTQ: one shared column factor, rows never interact
                res = _gptq_shared(w, fs, config)
            else:
                res = boa_quantize_layer(kind, block, w, fs, config)
        res.metrics["layer_recon_error"] = layer_recon_error(
            w, res.dequantized, _layer_inputs(kind, block, calib)
        )
        layers[name] = res
    quantized = block.with_weights(**{n: r.dequantized for n, r in layers.items()})
    metrics = {"attention_recon_error": attention_recon_error(block, quantized, calib)}
    return BlockQuantization(block, quantized, layers, metrics)


def _gptq_shared(w, fs, config):
    h_col = fs.factors[0].h_col
    grids = fit_row_scales(w, h_col, config)
    codes, err = gptq_core(w, fs.u_col[0], grids)
    return _result(codes, grids, err)
