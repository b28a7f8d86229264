import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpadam.optim import (
    AdamState,
    HyperParams,
    adam_step,
    amsgrad_step,
    baseline_step,
    bias_correct,
    momentum_step,
    radam_rectifier,
    radam_rho,
    radam_step,
    sgd_step,
    warpadam_step,
)
from warpadam.tensor import NumericError, ShapeError
from warpadam.warp import WarpMatrix

from conftest import rel_err


def fresh(shape, amsgrad=False):
    return AdamState.zeros(shape, amsgrad=amsgrad)


# ---------------------------------------------------------------------------
# bias correction

def test_bias_correct_first_step_values():
    m_hat, v_hat = bias_correct(np.array(0.05), np.array(0.00025), 1, 0.9, 0.999)
    assert m_hat == pytest.approx(0.5)
    assert v_hat == pytest.approx(0.25)


def test_bias_correct_asymptotic_identity():
    m = np.array([0.3, -0.2])
    v = np.array([0.7, 0.1])
    # correction factor -> 1 as t grows; exact once beta^t underflows
    m_hat, v_hat = bias_correct(m, v, 10_000, 0.9, 0.999)
    assert rel_err(m_hat, m) < 1e-12
    assert rel_err(v_hat, v) < 1e-4
    m_hat, v_hat = bias_correct(m, v, 1_000_000, 0.9, 0.999)
    assert np.array_equal(m_hat, m)
    assert np.array_equal(v_hat, v)


def test_bias_correct_rejects_t_zero():
    with pytest.raises(ValueError):
        bias_correct(np.zeros(1), np.zeros(1), 0, 0.9, 0.999)


# ---------------------------------------------------------------------------
# adam

def test_adam_zero_gradient_is_fixed_point():
    w = np.array([1.0, -2.0, 3.0])
    state, w2 = adam_step(fresh(w.shape), w, np.zeros_like(w), HyperParams())
    assert np.array_equal(w2, w)
    assert state.t == 1


def test_adam_hand_worked_scalar():
    h = HyperParams(eta=0.1, beta1=0.9, beta2=0.999, epsilon=0.0)
    state, w2 = adam_step(fresh(()), np.array(1.0), np.array(0.5), h)
    assert state.m == pytest.approx(0.05)
    assert state.v == pytest.approx(0.00025)
    m_hat, v_hat = bias_correct(state.m, state.v, state.t, h.beta1, h.beta2)
    assert m_hat == pytest.approx(0.5)
    assert v_hat == pytest.approx(0.25)
    assert w2 == pytest.approx(0.9)


def test_adam_first_step_is_sign_step():
    rng = np.random.default_rng(5)
    g = rng.normal(size=8)
    h = HyperParams(eta=0.01, epsilon=0.0)
    w = rng.normal(size=8)
    _, w2 = adam_step(fresh(w.shape), w, g, h)
    assert np.allclose(w2, w - h.eta * np.sign(g), atol=1e-12)


def test_adam_shape_and_numeric_errors():
    with pytest.raises(ShapeError):
        adam_step(fresh((3,)), np.zeros(3), np.zeros(4), HyperParams())
    with pytest.raises(NumericError):
        adam_step(fresh((2,)), np.zeros(2), np.array([1.0, np.nan]), HyperParams())


def test_adam_purity():
    rng = np.random.default_rng(6)
    w = rng.normal(size=4)
    g = rng.normal(size=4)
    state = fresh(w.shape)
    w_snap, g_snap, m_snap = w.copy(), g.copy(), state.m.copy()
    s1, w1 = adam_step(state, w, g, HyperParams())
    s2, w2 = adam_step(state, w, g, HyperParams())
    assert np.array_equal(w1, w2) and np.array_equal(s1.m, s2.m)
    assert np.array_equal(w, w_snap) and np.array_equal(g, g_snap)
    assert np.array_equal(state.m, m_snap) and state.t == 0


def test_hyperparams_validation():
    with pytest.raises(ValueError):
        HyperParams(eta=0.0)
    with pytest.raises(ValueError):
        HyperParams(beta1=1.0)
    with pytest.raises(ValueError):
        HyperParams(epsilon=-1e-9)


# ---------------------------------------------------------------------------
# warpadam

def test_warpadam_identity_reduces_to_adam_bitwise():
    rng = np.random.default_rng(7)
    w_a = rng.normal(size=6)
    w_w = w_a.copy()
    sa, sw = fresh((6,)), fresh((6,))
    warp = WarpMatrix.identity(6)
    h = HyperParams(eta=0.05)
    for _ in range(25):
        g = rng.normal(size=6)
        sa, w_a = adam_step(sa, w_a, g, h)
        sw, w_w = warpadam_step(sw, w_w, g, warp, h)
        assert np.array_equal(w_a, w_w)
        assert np.array_equal(sa.m, sw.m) and np.array_equal(sa.v, sw.v)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2 ** 31 - 1), st.integers(1, 8))
def test_warpadam_identity_reduction_property(dim, seed, steps):
    rng = np.random.default_rng(seed)
    w_a = rng.normal(size=dim)
    w_w = w_a.copy()
    sa, sw = fresh((dim,)), fresh((dim,))
    warp = WarpMatrix.identity(dim)
    for _ in range(steps):
        g = rng.normal(size=dim)
        sa, w_a = adam_step(sa, w_a, g, HyperParams())
        sw, w_w = warpadam_step(sw, w_w, g, warp, HyperParams())
    assert np.array_equal(w_a, w_w)


def test_warpadam_coordinate_swap():
    # swapping P moves the coordinate the raw gradient never touched
    h = HyperParams(eta=0.1, epsilon=1e-8)
    warp = WarpMatrix.dense([[0.0, 1.0], [1.0, 0.0]])
    state, w2 = warpadam_step(fresh((2,)), np.zeros(2), np.array([1.0, 0.0]), warp, h)
    assert np.allclose(state.m, [0.0, 0.1 * 1.0])
    assert w2[0] == pytest.approx(0.0, abs=1e-15)
    assert w2[1] == pytest.approx(-0.1, rel=1e-3)


def test_warpadam_positive_scale_cancels():
    rng = np.random.default_rng(8)
    h = HyperParams(eta=0.02, epsilon=0.0)
    c = 3.7
    warp = WarpMatrix.dense(c * np.eye(5))
    w_a = rng.normal(size=5)
    w_w = w_a.copy()
    sa, sw = fresh((5,)), fresh((5,))
    for _ in range(20):
        g = rng.normal(size=5)
        sa, w_a = adam_step(sa, w_a, g, h)
        sw, w_w = warpadam_step(sw, w_w, g, warp, h)
    assert rel_err(w_w, w_a) < 1e-12


def test_warpadam_diagonal_scale_degeneracy():
    rng = np.random.default_rng(9)
    h = HyperParams(eta=0.02, epsilon=0.0)
    scales = rng.uniform(0.1, 10.0, size=7)
    warp = WarpMatrix.diagonal(scales)
    w_a = rng.normal(size=7)
    w_w = w_a.copy()
    sa, sw = fresh((7,)), fresh((7,))
    for _ in range(50):
        g = rng.normal(size=7)
        sa, w_a = adam_step(sa, w_a, g, h)
        sw, w_w = warpadam_step(sw, w_w, g, warp, h)
        assert rel_err(w_w, w_a) < 1e-10


def test_warpadam_first_step_bias_exactness():
    rng = np.random.default_rng(10)
    g = rng.normal(size=4)
    warp = WarpMatrix.dense(rng.normal(size=(4, 4)))
    state, _ = warpadam_step(fresh((4,)), np.zeros(4), g, warp, HyperParams())
    pg = warp.apply(g)
    m_hat, v_hat = bias_correct(state.m, state.v, 1, 0.9, 0.999)
    # (1-b)*x/(1-b) is one rounding away from x; demand <= 2 ulp agreement
    assert rel_err(m_hat, pg, floor=1e-300) < 4e-16
    assert rel_err(v_hat, pg * pg, floor=1e-300) < 4e-16


def test_warpadam_dimension_mismatch():
    with pytest.raises(ShapeError):
        warpadam_step(fresh((3,)), np.zeros(3), np.ones(3), WarpMatrix.identity(4), HyperParams())


def test_warpadam_update_variant_differs_and_reduces():
    rng = np.random.default_rng(11)
    g = rng.normal(size=3)
    w = rng.normal(size=3)
    dense = WarpMatrix.dense(rng.normal(size=(3, 3)))
    h = HyperParams(eta=0.1)
    _, w_std = warpadam_step(fresh((3,)), w, g, dense, h)
    _, w_var = warpadam_step(fresh((3,)), w, g, dense, h, warp_update=True)
    assert not np.allclose(w_std, w_var)
    ident = WarpMatrix.identity(3)
    _, a = warpadam_step(fresh((3,)), w, g, ident, h)
    _, b = warpadam_step(fresh((3,)), w, g, ident, h, warp_update=True)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# baselines

def test_sgd_hand_value():
    _, w2 = sgd_step(fresh(()), np.array(1.0), np.array(2.0), HyperParams(eta=0.1))
    assert w2 == pytest.approx(0.8)


def test_momentum_accumulates_velocity():
    h = HyperParams(eta=0.1, momentum=0.5)
    s, w = fresh(()), np.array(0.0)
    s, w = momentum_step(s, w, np.array(1.0), h)   # u=1,   w=-0.1
    s, w = momentum_step(s, w, np.array(1.0), h)   # u=1.5, w=-0.25
    assert s.m == pytest.approx(1.5)
    assert w == pytest.approx(-0.25)


def test_amsgrad_vmax_monotone():
    rng = np.random.default_rng(12)
    s = fresh((5,), amsgrad=True)
    w = rng.normal(size=5)
    prev = s.v_max.copy()
    for _ in range(40):
        s, w = amsgrad_step(s, w, rng.normal(size=5), HyperParams())
        assert np.all(s.v_max >= prev)
        prev = s.v_max.copy()


def test_zero_gradient_forever_fixed_points():
    rng = np.random.default_rng(13)
    w0 = rng.normal(size=4)
    h = HyperParams(eta=0.05, weight_decay=0.0)
    for kind in ("sgd", "momentum", "amsgrad", "radam"):
        s, w = fresh((4,), amsgrad=True), w0.copy()
        for _ in range(10):
            s, w = baseline_step(kind, s, w, np.zeros(4), h)
        assert np.array_equal(w, w0), kind
    s, w = fresh((4,)), w0.copy()
    for _ in range(10):
        s, w = adam_step(s, w, np.zeros(4), h)
    assert np.array_equal(w, w0)


def test_adamw_zero_gradient_decays_geometrically():
    h = HyperParams(eta=0.1, weight_decay=0.2)
    w = np.array([2.0, -4.0])
    s = fresh((2,))
    for t in range(1, 6):
        s, w = baseline_step("adamw", s, w, np.zeros(2), h)
        assert np.allclose(w, np.array([2.0, -4.0]) * (1 - 0.1 * 0.2) ** t)


def test_radam_t1_is_plain_momentum_step():
    h = HyperParams(eta=0.1, beta2=0.999)
    rho_inf, rho_1 = radam_rho(1, h.beta2)
    assert rho_inf == pytest.approx(1999.0)
    assert rho_1 == pytest.approx(1.0, abs=1e-9)
    assert rho_1 <= 4.0
    g = np.array([0.3, -0.8])
    _, w2 = radam_step(fresh((2,)), np.zeros(2), g, h)
    # un-rectified branch: w - eta * m_hat, and m_hat_1 == g up to rounding
    assert rel_err(w2, -h.eta * g) < 1e-12


def test_radam_rectifier_limits():
    rho_inf, rho_t = radam_rho(100_000, 0.999)
    assert abs(rho_t - rho_inf) < 1e-6
    assert abs(radam_rectifier(rho_t, rho_inf) - 1.0) < 1e-6


def test_radam_rectified_branch_uses_denominator():
    h = HyperParams(eta=0.1, beta2=0.9)   # rho_inf = 19, rectification kicks in fast
    s, w = fresh((1,)), np.array([0.0])
    for _ in range(12):
        s, w = radam_step(s, w, np.array([1.0]), h)
    rho_inf, rho_t = radam_rho(12, h.beta2)
    assert rho_t > 4.0


def test_baseline_unknown_kind():
    with pytest.raises(ValueError):
        baseline_step("lion", fresh((1,)), np.zeros(1), np.zeros(1), HyperParams())
