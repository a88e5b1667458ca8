import numpy as np
import pytest

from attnquant import oracle
from attnquant.hessian import LayerKind, build_factors
from attnquant.linalg import DimensionOverflow, kron
from attnquant.model import CalibrationSet
from attnquant.quant import QuantConfig, QuantGrid, fit_row_scales
from attnquant.solver import rtn_quantize

from conftest import make_block, spd


def test_vec_convention(rng):
    m1, dw, m2 = rng.standard_normal((2, 3)), rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(oracle.vec(m1 @ dw @ m2), kron(m2.T, m1) @ oracle.vec(dw),
                               rtol=1e-12)
    np.testing.assert_array_equal(oracle.unvec(oracle.vec(dw), dw.shape), dw)


def test_fd_quadratic_simple_cases(rng):
    np.testing.assert_allclose(oracle.fd_quadratic_hessian(np.eye(2), np.eye(3)), 2 * np.eye(6),
                               atol=1e-9)
    z = oracle.fd_quadratic_hessian(np.zeros((2, 2)), rng.standard_normal((3, 3)))
    np.testing.assert_array_equal(z, 0.0)
    m1, m2 = rng.standard_normal((3, 2)), rng.standard_normal((2, 3))
    fd = oracle.fd_quadratic_hessian(m1, m2)
    closed = 2 * kron(m2 @ m2.T, m1.T @ m1)
    assert np.linalg.norm(fd - closed) / np.linalg.norm(closed) < 1e-5
    np.testing.assert_allclose(fd, fd.T, rtol=1e-6)
    assert np.linalg.eigvalsh(fd).min() > -1e-6


def test_fd_size_cap():
    with pytest.raises(DimensionOverflow):
        oracle.fd_quadratic_hessian(np.ones((1, 20)), np.ones((20, 1)))


@pytest.mark.parametrize("kind", [LayerKind.QUERY, LayerKind.KEY, LayerKind.VALUE, LayerKind.OUT])
def test_analytic_jacobian_matches_fd(kind):
    rng = np.random.default_rng(4)
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    for h in range(2):
        jac = oracle.attention_jacobian(b, x, kind, h)
        fd = oracle.fd_attention_hessian(b, x, kind, h)
        np.testing.assert_allclose(fd, 2 * jac.T @ jac, rtol=1e-5, atol=1e-8)


def test_causal_jacobian_matches_fd():
    rng = np.random.default_rng(8)
    b = make_block(rng, 4, 2, causal=True)
    x = rng.standard_normal((4, 4))
    for kind in (LayerKind.QUERY, LayerKind.KEY):
        jac = oracle.attention_jacobian(b, x, kind, 1)
        np.testing.assert_allclose(oracle.fd_attention_hessian(b, x, kind, 1), 2 * jac.T @ jac,
                                   rtol=1e-5, atol=1e-8)


def test_out_hessian_closed_form():
    rng = np.random.default_rng(6)
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    calib = CalibrationSet((x,))
    full = build_factors(LayerKind.OUT, b, calib)
    for h in range(2):
        r = b.head_rows(h)
        expected = kron(full.h_col[r, r], np.eye(4))
        fd = oracle.fd_attention_hessian(b, x, LayerKind.OUT, h)
        assert np.linalg.norm(fd - expected) / np.linalg.norm(expected) < 1e-5


def test_query_hessian_vanishes_for_single_token():
    rng = np.random.default_rng(0)
    b = make_block(rng, 4, 2).with_weights(w_q=np.zeros((4, 4)), w_k=np.zeros((4, 4)))
    fd = oracle.fd_attention_hessian(b, rng.standard_normal((4, 1)), LayerKind.QUERY, 0)
    np.testing.assert_allclose(fd, 0.0, atol=1e-12)


def test_relaxation_bound_on_attention(rng):
    for _ in range(20):
        b = make_block(rng, 4, 2)
        x = rng.standard_normal((4, 5))
        lhs, rhs = oracle.relaxation_bound_sides(b, x, 1, rng.standard_normal((2, 4)))
        assert lhs <= rhs


def test_relaxation_lhs_is_linearized_change(rng):
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    dw = rng.standard_normal((2, 4))
    jac = oracle.attention_jacobian(b, x, LayerKind.QUERY, 0)
    lhs, _ = oracle.relaxation_bound_sides(b, x, 0, dw)
    assert lhs == pytest.approx(np.linalg.norm(jac @ oracle.vec(dw)), rel=1e-10)


def grids_for(w, bits=2):
    return [QuantGrid(bits, float(s), int(z)) for s, z in
            ((max(np.ptp(w), 1e-3) / (2**bits - 1), 1),) * len(w)]


def test_obs_on_grid_and_single_entry(rng):
    h = spd(rng, 3)
    g = [QuantGrid(2, 0.5, 1)] * 3
    w = np.array([-0.5, 0.0, 1.0])
    res = oracle.obs_full_update(h, w, [2, 0, 1], g)
    np.testing.assert_array_equal(res.weights, w)
    np.testing.assert_array_equal(res.codes, [0, 1, 3])
    one = oracle.obs_full_update([[2.0]], [0.3], [0], [QuantGrid(2, 0.5, 1)])
    assert one.codes[0] == 2 and one.weights[0] == 0.5


def test_obs_paths_agree(rng):
    for _ in range(20):
        n = 6
        h = spd(rng, n)
        w = rng.standard_normal(n)
        order = rng.permutation(n)
        g = [QuantGrid(3, 0.3, 4)] * n
        a = oracle.obs_full_update(h, w, order, g, path="fixed")
        b = oracle.obs_full_update(h, w, order, g, path="recomputed")
        np.testing.assert_array_equal(a.codes, b.codes)
        np.testing.assert_allclose(a.presnap, b.presnap, rtol=0, atol=1e-8)


def test_obs_beats_rtn_mostly():
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        h = spd(rng, 4)
        w = rng.standard_normal(4)
        (grid,) = fit_row_scales(w[None], np.eye(4), QuantConfig(bits=2))
        obs = oracle.obs_full_update(h, w, range(4), [grid] * 4)
        rtn = rtn_quantize(w[None], [grid]).dequantized[0]
        wins += oracle.quadratic_loss(h, obs.weights - w) <= oracle.quadratic_loss(h, rtn - w)
    assert wins >= 95


def test_exhaustive_cases(rng):
    g = [QuantGrid(2, 0.5, 1)] * 3
    w = np.array([0.5, -0.5, 1.0])
    codes, loss = oracle.exhaustive_min_assignment(spd(rng, 3), w, g)
    np.testing.assert_array_equal(codes, [2, 0, 3])
    assert loss == 0.0
    w = rng.standard_normal(4)
    h = np.diag(rng.uniform(0.5, 2, 4))
    codes, _ = oracle.exhaustive_min_assignment(h, w, [QuantGrid(2, 0.5, 1)] * 4)
    np.testing.assert_array_equal(codes, rtn_quantize(w[None], [QuantGrid(2, 0.5, 1)]).codes[0])


def test_exhaustive_tie_break_and_cap():
    # w halfway between codes 1 and 2 under H = I: both tie, smallest code vector wins
    codes, _ = oracle.exhaustive_min_assignment(np.eye(1), [0.25], [QuantGrid(2, 0.5, 1)])
    assert codes[0] == 1
    with pytest.raises(oracle.SearchSpaceTooLarge):
        oracle.exhaustive_min_assignment(np.eye(11), np.zeros(11), [QuantGrid(2, 1.0, 0)] * 11)


def test_relaxed_factor_report_fields(rng):
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    for kind in (LayerKind.QUERY, LayerKind.KEY):
        f = build_factors(kind, b, CalibrationSet((x,)), 0)
        rep = oracle.relaxed_factor_report(b, x, kind, 0, f)
        assert 0.0 <= rep["relative_gap"] <= 1.0 and rep["scale"] > 0
        assert isinstance(rep["row_argmax_agrees"], bool)


def test_relaxed_factor_report_exact_for_value(rng):
    # value factors are exact, so the gap vanishes at unit scale
    b = make_block(rng, 4, 2)
    x = rng.standard_normal((4, 3))
    f = build_factors(LayerKind.VALUE, b, CalibrationSet((x,)), 1)
    rep = oracle.relaxed_factor_report(b, x, LayerKind.VALUE, 1, f)
    assert rep["relative_gap"] < 1e-5 and rep["scale"] == pytest.approx(1.0, rel=1e-5)
    assert rep["row_argmax_agrees"] and rep["col_argmax_agrees"]
