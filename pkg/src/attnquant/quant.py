"""Uniform affine quantizer and Hessian-weighted per-row scale search."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SUPPORTED_BITS",
    "QuantGrid",
    "QuantConfig",
    "default_clip_grid",
    "round_half_away",
    "quantize_affine",
    "quantize_values",
    "fit_row_scales",
    "grid_arrays",
]

SUPPORTED_BITS = (2, 3, 4, 8)


def default_clip_grid(clip_min=0.5, steps=51):
    """Descending clip ratios from 1.0 to ``clip_min`` inclusive."""
    if steps < 1 or not 0 < clip_min <= 1:
        raise ValueError("need steps >= 1 and 0 < clip_min <= 1")
    if steps == 1:
        return (1.0,)
    grid = np.linspace(1.0, clip_min, steps)
    return tuple(float(np.round(r, 12)) for r in grid)


@dataclass(frozen=True)
class QuantGrid:
    bits: int
    scale: float
    zero: int

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(f"bits must be one of {SUPPORTED_BITS}, got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not 0 <= self.zero <= self.maxq:
            raise ValueError(f"zero point {self.zero} outside [0, {self.maxq}]")

    @property
    def maxq(self):
        return 2**self.bits - 1


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 3
    method: str = "boa"
    damp_fraction: float = 0.01
    clip_grid: tuple = field(default_factory=default_clip_grid)
    out_policy: str = "full"
    seed: int = 0

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise ValueError(
                f"unsupported bit-width {self.bits}; supported widths are "
                + ", ".join(map(str, SUPPORTED_BITS))
            )
        if self.method not in ("rtn", "gptq", "boa"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.out_policy not in ("full", "per_head"):
            raise ValueError(f"unknown out_policy {self.out_policy!r}")
        if not self.damp_fraction > 0:
            raise ValueError("damp_fraction must be positive")
        grid = tuple(float(r) for r in self.clip_grid)
        if not grid or 1.0 not in grid:
            raise ValueError("clip_grid must be nonempty and contain 1.0")
        if any(not 0 < r <= 1 for r in grid) or list(grid) != sorted(grid, reverse=True):
            raise ValueError("clip_grid must be sorted descending within (0, 1]")
        object.__setattr__(self, "clip_grid", grid)

    def as_dict(self):
        return {
            "bits": self.bits,
            "method": self.method,
            "damp_fraction": self.damp_fraction,
            "clip_grid": list(self.clip_grid),
            "out_policy": self.out_policy,
            "seed": self.seed,
        }


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize_values(x, scale, zero, maxq):
    """Vectorized quantizer; ``scale``/``zero`` broadcast against ``x``."""
    codes = np.clip(round_half_away(x / scale) + zero, 0, maxq)
    return codes.astype(np.int64), scale * (codes - zero)


def quantize_affine(x, grid):
    """Return ``(code, value)`` for scalar ``x`` on ``grid``."""
    code, value = quantize_values(float(x), grid.scale, grid.zero, grid.maxq)
    return int(code), float(value)


def grid_arrays(grids):
    """Per-row ``(scale, zero, maxq)`` as column vectors for broadcasting."""
    scale = np.array([g.scale for g in grids], dtype=np.float64)[:, None]
    zero = np.array([g.zero for g in grids], dtype=np.float64)[:, None]
    maxq = np.array([g.maxq for g in grids], dtype=np.float64)[:, None]
    return scale, zero, maxq


def _degenerate_grid(c, bits):
    # A constant row c is stored exactly as scale * (1 - 0) or scale * (0 - 1).
    if c > 0:
        return QuantGrid(bits, float(c), 0)
    if c < 0:
        return QuantGrid(bits, float(-c), 1)
    return QuantGrid(bits, 1.0, 0)


def fit_row_scales(w, h_col, config):
    """Pick, per row, the clip ratio minimizing ``dw @ h_col @ dw.T``.

    For ratio ``r`` the asymmetric grid spans ``[r*min(row), r*max(row)]``.
    Ties go to the larger ratio (earlier in the descending grid).
    """
    w = np.asarray(w, dtype=np.float64)
    h_col = np.asarray(h_col, dtype=np.float64)
    if w.ndim != 2 or h_col.shape != (w.shape[1], w.shape[1]):
        raise ValueError(f"weight {w.shape} does not match h_col {h_col.shape}")
    bits = config.bits
    maxq = 2**bits - 1
    lo = w.min(axis=1)
    hi = w.max(axis=1)
    degenerate = hi == lo
    span = np.where(degenerate, 1.0, hi - lo)

    best_score = np.full(w.shape[0], np.inf)
    best_scale = np.ones(w.shape[0])
    best_zero = np.zeros(w.shape[0])
    for ratio in config.clip_grid:
        scale = ratio * span / maxq
        zero = np.clip(round_half_away(-ratio * lo / scale), 0, maxq)
        _, deq = quantize_values(w, scale[:, None], zero[:, None], maxq)
        dw = deq - w
        score = np.einsum("ij,jk,ik->i", dw, h_col, dw)
        better = score < best_score
        best_score = np.where(better, score, best_score)
        best_scale = np.where(better, scale, best_scale)
        best_zero = np.where(better, zero, best_zero)

    grids = []
    for i in range(w.shape[0]):
        if degenerate[i]:
            grids.append(_degenerate_grid(lo[i], bits))
        else:
            grids.append(QuantGrid(bits, float(best_scale[i]), int(best_zero[i])))
    return grids
