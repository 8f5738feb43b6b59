import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mossm import ssm as S
from mossm import tensor as T
from mossm.errors import NonPositiveDelta, ShapeMismatch


def test_zoh_closed_form():
    d = S.zoh_discretize(-1.0, 1.0, math.log(2.0))
    assert abs(d.abar - 0.5) < 1e-10
    assert abs(d.bbar - 0.5) < 1e-10


def test_zoh_a_to_zero_limit():
    d = S.zoh_discretize(0.0, 2.0, 0.3)
    assert d.abar == 1.0
    assert d.bbar == pytest.approx(0.6, abs=1e-15)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(NonPositiveDelta):
        S.zoh_discretize(-1.0, 1.0, 0.0)


def test_phi_guard_continuous():
    # just below and just above the switch the two branches agree to rounding
    for z in (-1e-8, 1e-8):
        lo, hi = S._phi(z * (1 - 1e-9)), S._phi(z * (1 + 1e-9))
        assert abs(lo - hi) < 1e-12
        assert abs(hi - 1.0) < 1e-8
    zs = -np.logspace(-12, 1, 400)
    exact = np.array([math.expm1(z) / z for z in zs])
    np.testing.assert_allclose(S._phi(zs), exact, rtol=1e-12, atol=1e-12)


def _disc(abar, bbar):
    return S.DiscretizedParams(np.asarray(abar, float), np.asarray(bbar, float))


def test_scan_zero_input():
    y = S.scan_sequential(_disc(np.full((1, 4, 1, 2), 0.7), np.ones((1, 4, 1, 2))), np.zeros((1, 4, 1)), np.ones((1, 4, 2)))
    np.testing.assert_array_equal(y, 0)


def test_scan_hand_recurrence():
    disc = _disc(np.full((1, 3, 1, 1), 0.5), np.full((1, 3, 1, 1), 0.5))
    y = S.scan_sequential(disc, np.array([[[1.0], [0.0], [0.0]]]), np.ones((1, 3, 1)))
    np.testing.assert_allclose(y.ravel(), [0.5, 0.25, 0.125], atol=1e-15)


def test_scan_memoryless(rng):
    bbar = rng.standard_normal((1, 5, 2, 3))
    x = rng.standard_normal((1, 5, 2))
    C = rng.standard_normal((1, 5, 3))
    y = S.scan_sequential(_disc(np.zeros_like(bbar), bbar), x, C)
    np.testing.assert_allclose(y, np.einsum("blcn,bln->blc", bbar, C) * x, atol=1e-12)


def _random_disc(r, B, L, C, N):
    return _disc(r.uniform(0.3, 0.999, (B, L, C, N)), r.standard_normal((B, L, C, N)) * 0.3)


@pytest.mark.parametrize("block", [1, 3, 7, 64])
def test_blocked_equals_sequential(rng, block):
    disc = _random_disc(rng, 2, 50, 3, 4)
    x = rng.standard_normal((2, 50, 3))
    C = rng.standard_normal((2, 50, 4))
    h0 = rng.standard_normal((2, 3, 4))
    a = S.scan_sequential(disc, x, C, h0)
    b = S.scan_blocked(disc, x, C, h0, block=block)
    if block == 1:
        np.testing.assert_array_equal(a, b)
    else:
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_block_equal_to_length(rng):
    disc = _random_disc(rng, 1, 40, 2, 3)
    x = rng.standard_normal((1, 40, 2))
    C = rng.standard_normal((1, 40, 3))
    np.testing.assert_allclose(S.scan_sequential(disc, x, C), S.scan_blocked(disc, x, C, block=40), atol=1e-10)


def test_selective_scan_shape_check(rng):
    p = S.init_ssm_params(3, 4, rng)
    with pytest.raises(ShapeMismatch):
        S.selective_scan(np.zeros((1, 5, 2)), p)


def _project_step(xt, W):
    # scalar arithmetic, channels summed left to right
    out = np.array([xt[0] * W[0, n] for n in range(W.shape[1])])
    for c in range(1, W.shape[0]):
        out = out + np.array([xt[c] * W[c, n] for n in range(W.shape[1])])
    return out


def selective_scan_oracle(x, p):
    """Per-step projections and discretization, then the plain sequential scan."""
    B, L, C = x.shape
    N = p.A.shape[1]
    abar, bbar, Cs = np.empty((B, L, C, N)), np.empty((B, L, C, N)), np.empty((B, L, N))
    for b in range(B):
        for t in range(L):
            xt = x[b, t]
            delta = np.logaddexp(0.0, _project_step(xt, p.W_delta) + p.delta_bias)
            d = S.zoh_discretize(p.A, _project_step(xt, p.W_B)[None, :], delta[:, None])
            abar[b, t], bbar[b, t], Cs[b, t] = d.abar, d.bbar, _project_step(xt, p.W_C)
    y = S.scan_sequential(S.DiscretizedParams(abar, bbar), x, Cs)
    return y + p.D * x if p.D is not None else y


def test_selective_scan_decomposition_exact(rng):
    p = S.init_ssm_params(2, 3, rng)
    x = rng.standard_normal((4, 8, 2))
    np.testing.assert_array_equal(S.selective_scan(x, p), selective_scan_oracle(x, p))


def test_selection_disabled_is_fixed_ssm(rng):
    p = S.init_ssm_params(2, 3, rng, use_d=False)
    p.W_delta[:] = 0
    x = rng.standard_normal((1, 6, 2))
    delta = np.logaddexp(0.0, p.delta_bias)
    # zero B, C projections: B and C are zero, so output is zero regardless of x
    p.W_B[:] = 0
    p.W_C[:] = 0
    np.testing.assert_array_equal(S.selective_scan(x, p), 0)
    assert np.all(delta > 0)


def test_pure_skip_limit(rng):
    p = S.init_ssm_params(3, 2, rng)
    p.A_log[:] = 50.0          # A -> -inf: abar -> 0, bbar -> 0
    x = rng.standard_normal((2, 5, 3))
    np.testing.assert_allclose(S.selective_scan(x, p), x, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(1, 40))
def test_stability_bound(seed, L):
    r = np.random.default_rng(seed)
    p = S.init_ssm_params(2, 3, r)
    x = r.uniform(-1, 1, (1, L, 2))
    delta = np.logaddexp(0.0, x @ p.W_delta + p.delta_bias)
    Bt, Ct = x @ p.W_B, x @ p.W_C
    d = S.zoh_discretize(p.A, Bt[:, :, None, :], delta[..., None])
    y = S.selective_scan(x, p)
    bound = np.abs(Ct).max() * np.abs(d.bbar).max() * np.abs(x).max() / (1 - d.abar.max()) + np.abs(p.D * x)
    assert np.all(np.abs(y) <= bound + 1e-12)


def test_selective_scan_tape_matches_numpy(rng):
    p = S.init_ssm_params(3, 4, rng)
    x = rng.standard_normal((2, 9, 3))
    y = S.selective_scan_tape(T.Tensor(x), *(T.Tensor(v) for v in (p.A_log, p.W_delta, p.delta_bias, p.W_B, p.W_C, p.D)))
    np.testing.assert_allclose(y.data, S.selective_scan(x, p), atol=1e-13)


@pytest.mark.parametrize("block", [None, 4])
def test_ssm_scan_gradients(rng, block):
    B, L, C, N = 2, 11, 3, 2
    x = T.parameter(rng.standard_normal((B, L, C)), "x")
    delta = T.parameter(rng.uniform(0.05, 0.8, (B, L, C)), "delta")
    A = T.parameter(-rng.uniform(0.5, 2.0, (C, N)), "A")
    Bt = T.parameter(rng.standard_normal((B, L, N)), "B")
    Ct = T.parameter(rng.standard_normal((B, L, N)), "C")
    D = T.parameter(rng.standard_normal(C), "D")
    reset = np.zeros((B, L))
    reset[:, 5] = 1
    w = rng.standard_normal((B, L, C))
    rep = T.finite_diff_check(lambda: T.sum(T.mul(S.ssm_scan(x, delta, A, Bt, Ct, D, reset=reset, block=block), w)),
                              [x, delta, A, Bt, Ct, D], tol=1e-6)
    assert rep.passed, rep.per_input


def test_reset_splits_sequences(rng):
    x = rng.standard_normal((1, 10, 2))
    delta = rng.uniform(0.1, 0.5, (1, 10, 2))
    A = -rng.uniform(0.5, 2.0, (2, 3))
    Bt = rng.standard_normal((1, 10, 3))
    Ct = rng.standard_normal((1, 10, 3))
    reset = np.zeros(10)
    reset[6] = 1
    joint = S.ssm_scan(x, delta, A, Bt, Ct, reset=reset).data
    first = S.ssm_scan(x[:, :6], delta[:, :6], A, Bt[:, :6], Ct[:, :6]).data
    second = S.ssm_scan(x[:, 6:], delta[:, 6:], A, Bt[:, 6:], Ct[:, 6:]).data
    np.testing.assert_allclose(joint, np.concatenate([first, second], axis=1), atol=1e-13)


def test_selective_scan_tape_gradients(rng):
    p = S.init_ssm_params(3, 2, rng)
    x = T.parameter(rng.standard_normal((1, 7, 3)), "x")
    params = [T.parameter(v, n) for n, v in (("A_log", p.A_log), ("W_delta", p.W_delta), ("delta_bias", p.delta_bias),
                                              ("W_B", p.W_B), ("W_C", p.W_C), ("D", p.D))]
    w = rng.standard_normal((1, 7, 3))
    rep = T.finite_diff_check(lambda: T.sum(T.mul(S.selective_scan_tape(x, *params), w)), [x] + params, tol=1e-3)
    assert rep.passed, rep.per_input


def test_init_ranges(rng):
    p = S.init_ssm_params(64, 16, rng)
    np.testing.assert_allclose(p.A[0], -np.arange(1, 17), rtol=1e-14)
    dt = np.logaddexp(0.0, p.delta_bias)
    assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 1e-1 + 1e-12


def test_bench_harness():
    r = S.bench_scans(length=200, channels=4, state=4, repeats=1)
    assert r["max_abs_diff"] < 1e-9
    assert r["blocked_tokens_per_s"] > 0 and r["sequential_tokens_per_s"] > 0


def test_blocked_speedup_at_bench_defaults():
    # L=1000, block=64, small per-step slab
    r = S.bench_scans(length=1000, block=64, repeats=5)
    assert r["max_abs_diff"] < 1e-10
    assert r["speedup"] >= 2.0, r


@pytest.mark.parametrize("z", [-1e-12, -3e-7, -2e-5, -0.3])
def test_ssm_scan_grad_A_near_zero(z):
    # one step from a zero state: y = C * B * x * expm1(z) / A with z = delta * A, so
    # dy/dA = C B x delta^2 phi'(z), with phi'(z) = (z e^z - expm1(z)) / z^2
    delta, A = 1e-3, z / 1e-3
    x = np.array([[[0.7]]])
    Bt, Ct = np.array([[[1.3]]]), np.array([[[-0.4]]])
    A_t = T.parameter(np.array([[A]]))
    with T.Tape() as tape:
        loss = T.sum(S.ssm_scan(x, np.array([[[delta]]]), A_t, Bt, Ct))
    tape.backward(loss)
    if abs(z) < 1e-4:
        dphi = 0.5 + z / 3 + z * z / 8
    else:
        dphi = (z * np.exp(z) - np.expm1(z)) / (z * z)
    expected = -0.4 * 1.3 * 0.7 * delta ** 2 * dphi
    assert A_t.grad[0, 0] == pytest.approx(expected, rel=1e-9)


def test_ssm_scan_rejects_zero_A(rng):
    x = rng.standard_normal((1, 3, 2))
    A = -np.ones((2, 2))
    A[1, 0] = 0.0
    with pytest.raises(ValueError):
        S.ssm_scan(x, np.full_like(x, 0.1), A, rng.standard_normal((1, 3, 2)), rng.standard_normal((1, 3, 2)))
