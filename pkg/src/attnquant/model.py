"""Multi-head attention block, forward pass and reconstruction errors.

Conventions: an input sequence ``x`` is ``d x L`` (columns are tokens).
Head ``h`` owns rows ``[h*d_h, (h+1)*d_h)`` of ``w_q``/``w_k``/``w_v`` and
the same range of columns of ``w_out``. The block is bias-free.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "ShapeMismatch",
    "AttentionBlock",
    "CalibrationSet",
    "ForwardTrace",
    "softmax_rows",
    "mha_forward",
    "attention_recon_error",
    "layer_recon_error",
    "LAYER_NAMES",
]

LAYER_NAMES = ("w_q", "w_k", "w_v", "w_out")


class ShapeMismatch(ValueError):
    pass


@dataclass(frozen=True)
class AttentionBlock:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_out: np.ndarray
    heads: int
    causal: bool = False

    def __post_init__(self):
        for name in LAYER_NAMES:
            m = np.asarray(getattr(self, name), dtype=np.float64)
            object.__setattr__(self, name, m)
        d = self.w_q.shape[0]
        for name in LAYER_NAMES:
            if getattr(self, name).shape != (d, d):
                raise ShapeMismatch(
                    f"{name} has shape {getattr(self, name).shape}, expected {(d, d)}"
                )
        if self.heads < 1 or d % self.heads:
            raise ShapeMismatch(f"d={d} is not divisible by heads={self.heads}")

    @property
    def d(self):
        return self.w_q.shape[0]

    @property
    def d_h(self):
        return self.d // self.heads

    def head_rows(self, h):
        if not 0 <= h < self.heads:
            raise IndexError(f"head {h} out of range for {self.heads} heads")
        return slice(h * self.d_h, (h + 1) * self.d_h)

    def with_weights(self, **weights):
        return replace(self, **weights)


@dataclass(frozen=True)
class CalibrationSet:
    samples: tuple

    def __post_init__(self):
        samples = tuple(np.asarray(x, dtype=np.float64) for x in self.samples)
        if not samples:
            raise ValueError("calibration set needs at least one sample")
        d = samples[0].shape[0]
        for x in samples:
            if x.ndim != 2 or x.shape[0] != d:
                raise ShapeMismatch(f"sample shape {x.shape} does not have {d} rows")
        object.__setattr__(self, "samples", samples)

    @property
    def d(self):
        return self.samples[0].shape[0]

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)


@dataclass
class ForwardTrace:
    """Intermediates of one forward pass; per-head lists are indexed by head."""

    q: list = field(default_factory=list)
    k: list = field(default_factory=list)
    v: list = field(default_factory=list)
    attn: list = field(default_factory=list)
    x_out: np.ndarray = None
    output: np.ndarray = None


def softmax_rows(logits):
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def mha_forward(block, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != block.d:
        raise ShapeMismatch(f"input shape {x.shape} does not have {block.d} rows")
    seq = x.shape[1]
    scale = 1.0 / np.sqrt(block.d_h)
    mask = None
    if block.causal:
        mask = np.triu(np.ones((seq, seq), dtype=bool), k=1)

    trace = ForwardTrace()
    blocks = []
    for h in range(block.heads):
        rows = block.head_rows(h)
        q = (block.w_q[rows] @ x).T
        k = (block.w_k[rows] @ x).T
        v = (block.w_v[rows] @ x).T
        logits = (q @ k.T) * scale
        if mask is not None:
            logits = np.where(mask, -np.inf, logits)
        a = softmax_rows(logits)
        trace.q.append(q)
        trace.k.append(k)
        trace.v.append(v)
        trace.attn.append(a)
        blocks.append((a @ v).T)
    trace.x_out = np.vstack(blocks)
    trace.output = block.w_out @ trace.x_out
    return trace


def _check_same_dims(a, b):
    if a.d != b.d or a.heads != b.heads:
        raise ShapeMismatch(
            f"blocks differ: (d={a.d}, H={a.heads}) vs (d={b.d}, H={b.heads})"
        )


def attention_recon_error(block, quantized, calib):
    """Sum over samples of the squared Frobenius change in the block output."""
    _check_same_dims(block, quantized)
    total = 0.0
    for x in calib:
        diff = mha_forward(block, x).output - mha_forward(quantized, x).output
        total += float(np.sum(diff * diff))
    return total


def layer_recon_error(w, w_hat, calib):
    """Sum over samples of ``||(w_hat - w) @ x||_F**2``."""
    w = np.asarray(w, dtype=np.float64)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if w.shape != w_hat.shape:
        raise ShapeMismatch(f"{w.shape} vs {w_hat.shape}")
    delta = w_hat - w
    total = 0.0
    for x in calib:
        if x.shape[0] != w.shape[1]:
            raise ShapeMismatch(f"sample has {x.shape[0]} rows, weight has {w.shape[1]} cols")
        r = delta @ x
        total += float(np.sum(r * r))
    return total
