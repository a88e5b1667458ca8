import numpy as np
import pytest

from attnquant import oracle
from attnquant.hessian import (
    EmptyCalibration,
    HeadOutOfRange,
    HessianFactors,
    LayerKind,
    build_all_factors,
    build_factors,
    dampen,
)
from attnquant.linalg import cholesky_lower, kron
from attnquant.model import AttentionBlock, CalibrationSet

from conftest import make_block, make_calib

ALL_KINDS = list(LayerKind)


def test_gptq_identity_input(rng):
    b = make_block(rng, 4, 2)
    f = build_factors(LayerKind.GPTQ_BASELINE, b, CalibrationSet((np.eye(4),)), head=0)
    np.testing.assert_array_equal(f.h_col, 2 * np.eye(4))
    np.testing.assert_array_equal(f.h_row, np.eye(2))


def test_query_with_zero_keys(rng):
    b = make_block(rng, 4, 2).with_weights(w_k=np.zeros((4, 4)))
    f = build_factors(LayerKind.QUERY, b, make_calib(rng, 4, 3, 2), head=1)
    np.testing.assert_array_equal(f.h_row, np.zeros((2, 2)))


def test_value_hand_example():
    # d=2, H=2, d_h=1, X = I; large diagonal logits make A_0 equal I to machine precision
    c = np.sqrt(40.0)
    w_q = np.array([[c, -c], [0.0, 0.0]])
    w_out = np.array([[2.0, 0.0], [0.0, 1.0]])
    b = AttentionBlock(w_q, w_q.copy(), np.eye(2), w_out, heads=2)
    f = build_factors(LayerKind.VALUE, b, CalibrationSet((np.eye(2),)), head=0)
    np.testing.assert_allclose(f.h_col, 2 * np.eye(2), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(f.h_row, [[4.0]])


def test_errors(rng):
    b = make_block(rng, 4, 2)
    with pytest.raises(HeadOutOfRange):
        build_factors(LayerKind.QUERY, b, make_calib(rng, 4, 3, 1), head=2)
    with pytest.raises(HeadOutOfRange):
        build_factors(LayerKind.VALUE, b, make_calib(rng, 4, 3, 1))
    with pytest.raises(EmptyCalibration):
        build_factors(LayerKind.QUERY, b, [], head=0)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_factors_are_symmetric_psd(kind):
    rng = np.random.default_rng(5)
    b = make_block(rng, 6, 3)
    calib = make_calib(rng, 6, 5, 3)
    for f in build_all_factors(kind, b, calib):
        for m in (f.h_col, f.h_row):
            np.testing.assert_allclose(m, m.T, rtol=1e-10, atol=1e-12)
            for _ in range(20):
                v = rng.standard_normal(m.shape[0])
                assert v @ m @ v >= -1e-12


@pytest.mark.parametrize("kind", [LayerKind.QUERY, LayerKind.KEY, LayerKind.VALUE, LayerKind.OUT])
def test_accumulation_is_additive(kind):
    rng = np.random.default_rng(9)
    b = make_block(rng, 4, 2)
    s1, s2 = make_calib(rng, 4, 3, 2), make_calib(rng, 4, 3, 3)
    both = CalibrationSet(s1.samples + s2.samples)
    for f, f1, f2 in zip(*(build_all_factors(kind, b, c) for c in (both, s1, s2))):
        np.testing.assert_allclose(f.h_col, f1.h_col + f2.h_col, rtol=1e-10, atol=1e-12)
        if kind in (LayerKind.QUERY, LayerKind.KEY):
            np.testing.assert_allclose(f.h_row, f1.h_row + f2.h_row, rtol=1e-10, atol=1e-12)


def test_column_factor_sharing(rng):
    b = make_block(rng, 6, 3)
    calib = make_calib(rng, 6, 4, 2)
    q = build_all_factors(LayerKind.QUERY, b, calib)
    assert all(np.array_equal(q[0].h_col, f.h_col) for f in q)
    v = build_all_factors(LayerKind.VALUE, b, calib)
    assert not np.allclose(v[0].h_col, v[1].h_col)


def test_out_policies(rng):
    b = make_block(rng, 4, 2)
    calib = make_calib(rng, 4, 3, 2)
    (full,) = build_all_factors(LayerKind.OUT, b, calib, out_policy="full")
    per = build_all_factors(LayerKind.OUT, b, calib, out_policy="per_head")
    assert full.h_col.shape == (4, 4) and per[0].h_col.shape == (2, 2)
    np.testing.assert_allclose(full.h_col[2:, 2:], per[1].h_col, rtol=1e-14)


def test_value_and_out_match_exact_hessian():
    rng = np.random.default_rng(3)
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    calib = CalibrationSet((x,))
    for h in range(2):
        fv = build_factors(LayerKind.VALUE, b, calib, h)
        fd = oracle.fd_attention_hessian(b, x, LayerKind.VALUE, h)
        np.testing.assert_allclose(fd, kron(fv.h_col, fv.h_row), rtol=1e-6, atol=1e-8)


def test_dampen_examples():
    f = HessianFactors(np.eye(3), np.zeros((3, 3)), LayerKind.QUERY, 0)
    g = dampen(f, 0.01)
    np.testing.assert_allclose(g.h_col, 1.01 * np.eye(3), rtol=1e-15)
    np.testing.assert_allclose(g.h_row, 0.01 * np.eye(3), rtol=1e-15)
    g = dampen(HessianFactors(np.diag([2.0, 4.0]), np.eye(1), LayerKind.OUT), 0.01)
    np.testing.assert_allclose(g.h_col, np.diag([2.03, 4.03]), rtol=1e-15)
    cholesky_lower(g.h_col)
    with pytest.raises(ValueError):
        dampen(f, 0.0)


def test_dampened_dead_factor_factorizes(rng):
    b = make_block(rng, 4, 2).with_weights(w_k=np.zeros((4, 4)))
    f = dampen(build_factors(LayerKind.QUERY, b, make_calib(rng, 4, 3, 1), 0))
    cholesky_lower(f.h_row)
    cholesky_lower(f.h_col)
