"""Kronecker-factored Hessians for the four attention projections.

Each layer Hessian is approximated as ``kron(h_col, h_row)`` under
column-major vectorization of the weight, so ``h_col`` couples input
columns and ``h_row`` couples output rows of one head:

=============  ===============================  ==========================
kind           h_col                            h_row
=============  ===============================  ==========================
GPTQ_BASELINE  sum 2 X X^T                      I
QUERY          sum 2 X X^T                      sum K_h^T K_h
KEY            sum 2 X X^T                      sum Q_h^T Q_h
VALUE          sum 2 X A_h^T A_h X^T            W_out,h^T W_out,h
OUT            sum 2 X_out X_out^T              I
=============  ===============================  ==========================

The query/key row factors are the relaxed forms that drop the softmax
Jacobian; positive constant factors are irrelevant to the quantizer.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import mha_forward

__all__ = [
    "LayerKind",
    "HessianFactors",
    "EmptyCalibration",
    "HeadOutOfRange",
    "build_factors",
    "build_all_factors",
    "dampen",
    "ALL_HEADS",
]

ALL_HEADS = None


class LayerKind(enum.Enum):
    QUERY = "query"
    KEY = "key"
    VALUE = "value"
    OUT = "out"
    GPTQ_BASELINE = "gptq_baseline"


class EmptyCalibration(ValueError):
    pass


class HeadOutOfRange(IndexError):
    pass


@dataclass(frozen=True)
class HessianFactors:
    h_col: np.ndarray
    h_row: np.ndarray
    kind: LayerKind
    head: int | None = ALL_HEADS

    def scaled(self, col=1.0, row=1.0):
        return HessianFactors(self.h_col * col, self.h_row * row, self.kind, self.head)


def _traces(block, calib):
    samples = list(calib)
    if not samples:
        raise EmptyCalibration("no calibration samples")
    return samples, [mha_forward(block, x) for x in samples]


def build_factors(kind, block, calib, head=ALL_HEADS, out_policy="full", traces=None):
    """Accumulate the factors of ``kind`` for one head over ``calib``.

    ``head`` may be ``None`` only for ``OUT`` with ``out_policy="full"``,
    which uses the Gram matrix of the full stacked attention output. With
    ``out_policy="per_head"`` the out factor covers the head's columns.
    ``traces`` lets callers reuse forward passes already computed for
    ``calib``.
    """
    kind = LayerKind(kind)
    if traces is None:
        samples, traces = _traces(block, calib)
    else:
        samples = list(calib)
        if not samples:
            raise EmptyCalibration("no calibration samples")
    d, d_h = block.d, block.d_h

    full_out = kind is LayerKind.OUT and out_policy == "full"
    if full_out:
        head = ALL_HEADS
    elif head is None or not 0 <= head < block.heads:
        raise HeadOutOfRange(f"head {head} not in [0, {block.heads})")

    if kind in (LayerKind.GPTQ_BASELINE, LayerKind.QUERY, LayerKind.KEY):
        h_col = np.zeros((d, d))
        for x in samples:
            h_col += 2.0 * (x @ x.T)
        if kind is LayerKind.GPTQ_BASELINE:
            h_row = np.eye(d_h)
        else:
            h_row = np.zeros((d_h, d_h))
            for tr in traces:
                m = tr.k[head] if kind is LayerKind.QUERY else tr.q[head]
                h_row += m.T @ m
    elif kind is LayerKind.VALUE:
        h_col = np.zeros((d, d))
        for x, tr in zip(samples, traces):
            xa = x @ tr.attn[head].T
            h_col += 2.0 * (xa @ xa.T)
        w_out_h = block.w_out[:, block.head_rows(head)]
        h_row = w_out_h.T @ w_out_h
    elif kind is LayerKind.OUT:
        if full_out:
            h_col = np.zeros((d, d))
            for tr in traces:
                h_col += 2.0 * (tr.x_out @ tr.x_out.T)
        elif out_policy == "per_head":
            h_col = np.zeros((d_h, d_h))
            rows = block.head_rows(head)
            for tr in traces:
                xo = tr.x_out[rows]
                h_col += 2.0 * (xo @ xo.T)
        else:
            raise ValueError(f"unknown out_policy {out_policy!r}")
        h_row = np.eye(d)
    else:  # pragma: no cover - enum is exhaustive
        raise ValueError(kind)
    return HessianFactors(h_col, h_row, kind, head)


def build_all_factors(kind, block, calib, out_policy="full"):
    """Factors for every head of ``kind`` (a single entry for full OUT)."""
    samples, traces = _traces(block, calib)
    kind = LayerKind(kind)
    if kind is LayerKind.OUT and out_policy == "full":
        return [build_factors(kind, block, samples, traces=traces)]
    return [
        build_factors(kind, block, samples, head=h, out_policy=out_policy, traces=traces)
        for h in range(block.heads)
    ]


def _dampen_matrix(m, damp_fraction):
    mean_diag = float(np.mean(np.diag(m)))
    lam = damp_fraction * mean_diag if mean_diag > 0 else damp_fraction
    return m + lam * np.eye(m.shape[0])


def dampen(f, damp_fraction=0.01):
    """Add ``damp_fraction * mean(diag)`` times the identity to both factors.

    A factor whose diagonal mean is zero gets ``damp_fraction * I``.
    """
    if not damp_fraction > 0:
        raise ValueError("damp_fraction must be positive")
    return HessianFactors(
        _dampen_matrix(f.h_col, damp_fraction),
        _dampen_matrix(f.h_row, damp_fraction),
        f.kind,
        f.head,
    )
