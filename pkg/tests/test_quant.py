import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnquant.quant import (
    QuantConfig,
    QuantGrid,
    default_clip_grid,
    fit_row_scales,
    quantize_affine,
    round_half_away,
)

from conftest import spd


def test_grid_validation():
    with pytest.raises(ValueError):
        QuantGrid(5, 1.0, 0)
    with pytest.raises(ValueError):
        QuantGrid(2, 0.0, 0)
    with pytest.raises(ValueError):
        QuantGrid(2, 1.0, 4)


def test_config_validation():
    with pytest.raises(ValueError, match="2, 3, 4, 8"):
        QuantConfig(bits=16)
    with pytest.raises(ValueError):
        QuantConfig(clip_grid=(0.9, 0.8))
    with pytest.raises(ValueError):
        QuantConfig(clip_grid=(0.9, 1.0))
    cfg = QuantConfig()
    assert len(cfg.clip_grid) == 51 and cfg.clip_grid[0] == 1.0 and cfg.clip_grid[-1] == 0.5
    assert cfg.bits == 3 and cfg.method == "boa" and cfg.damp_fraction == 0.01


def test_default_grid_steps():
    grid = default_clip_grid()
    np.testing.assert_allclose(np.diff(grid), -0.01, atol=1e-12)
    assert default_clip_grid(0.8, 1) == (1.0,)


def test_round_half_away_from_zero():
    np.testing.assert_array_equal(round_half_away([0.5, 1.5, 2.5, -0.5, -1.5, 0.49]),
                                  [1, 2, 3, -1, -2, 0])


def test_quantize_examples():
    assert quantize_affine(9.7, QuantGrid(2, 1.0, 0)) == (3, 3.0)
    assert quantize_affine(-0.4, QuantGrid(2, 1.0, 1)) == (1, 0.0)
    g = QuantGrid(3, 0.25, 2)
    for q in range(8):
        x = 0.25 * (q - 2)
        assert quantize_affine(x, g) == (q, x)


@settings(max_examples=200, deadline=None)
@given(
    x=st.floats(-100, 100),
    y=st.floats(-100, 100),
    bits=st.sampled_from([2, 3, 4, 8]),
    scale=st.floats(1e-3, 10),
    zero_frac=st.floats(0, 1),
)
def test_quantizer_properties(x, y, bits, scale, zero_frac):
    g = QuantGrid(bits, scale, int(round(zero_frac * (2**bits - 1))))
    cx, vx = quantize_affine(x, g)
    assert 0 <= cx <= g.maxq
    assert quantize_affine(vx, g) == (cx, vx)
    cy, _ = quantize_affine(y, g)
    if x <= y:
        assert cx <= cy


def brute_force_scales(row, h_col, bits, ratios):
    """Independent re-scoring of every clip ratio with explicit loops."""
    maxq = 2**bits - 1
    lo, hi = min(row), max(row)
    best = None
    for r in ratios:
        s = r * (hi - lo) / maxq
        z = min(max(round_half_away(-r * lo / s), 0), maxq)
        dw = []
        for x in row:
            q = min(max(round_half_away(x / s) + z, 0), maxq)
            dw.append(s * (q - z) - x)
        score = sum(dw[i] * h_col[i, j] * dw[j] for i in range(len(row)) for j in range(len(row)))
        if best is None or score < best[0]:
            best = (score, s, int(z))
    return best


def test_fit_matches_exhaustive_rescoring():
    rng = np.random.default_rng(11)
    config = QuantConfig(bits=2)
    for _ in range(10):
        w = rng.standard_normal((3, 8))
        h = spd(rng, 8)
        grids = fit_row_scales(w, h, config)
        for row, g in zip(w, grids):
            _, s, z = brute_force_scales(row, h, 2, config.clip_grid)
            assert g.scale == pytest.approx(s, rel=1e-14) and g.zero == z


def test_on_grid_row_has_zero_score():
    config = QuantConfig(bits=2)
    row = np.array([[-1.0, 0.0, 1.0, 2.0, 0.0, 1.0]])
    (g,) = fit_row_scales(row, np.eye(6), config)
    assert (g.scale, g.zero) == (1.0, 1)


@pytest.mark.parametrize("c", [2.7, -0.3, 0.0])
def test_constant_row_is_exact(c):
    (g,) = fit_row_scales(np.full((1, 5), c), np.eye(5), QuantConfig(bits=3))
    _, v = quantize_affine(c, g)
    assert v == c


def test_scale_search_invariances():
    rng = np.random.default_rng(2)
    config = QuantConfig(bits=3)
    w = rng.standard_normal((6, 5))
    h = spd(rng, 5)
    base = fit_row_scales(w, h, config)
    assert fit_row_scales(w, 4.0 * h, config) == base
    only_one = QuantConfig(bits=3, clip_grid=(1.0,))
    for row, g, g1 in zip(w, base, fit_row_scales(w, h, only_one)):
        def score(grid):
            dw = np.array([quantize_affine(x, grid)[1] - x for x in row])
            return dw @ h @ dw
        assert score(g) <= score(g1)
