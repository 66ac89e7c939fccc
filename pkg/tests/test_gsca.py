from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from nask import tensor as T
from nask.errors import ConfigurationError, DimensionError
from nask.gsca import (
    GscaConfig,
    GscaParams,
    attention_cost,
    attention_map,
    global_channel_weights,
    group_attention,
    gsca_forward,
    measure_attention_macs,
)
from nask.tensor import Tape, Tensor, backward

from conftest import central_difference, rel_err


def naive_group_attention(theta, phi, g, softmax=True):
    cg, h, w = theta.shape
    hw = h * w
    th = theta.reshape(cg, hw)
    ph = phi.reshape(cg, hw)
    gg = g.reshape(cg, hw)
    a = np.zeros((hw, hw))
    for i in range(hw):
        for j in range(hw):
            s = 0.0
            for k in range(cg):
                s += th[k, i] * ph[k, j]
            a[i, j] = s
    if softmax:
        for i in range(hw):
            m = max(a[i])
            e = [np.exp(v - m) for v in a[i]]
            tot = sum(e)
            a[i] = [v / tot for v in e]
    out = np.zeros((cg, hw))
    for i in range(hw):
        for k in range(cg):
            s = 0.0
            for j in range(hw):
                s += a[i, j] * gg[k, j]
            out[k, i] = s
    return out.reshape(cg, h, w)


def test_single_position_softmax_returns_g(rng):
    parts = [Tensor(rng.normal(size=(3, 1, 1))) for _ in range(3)]
    out = group_attention(*parts, normalization="softmax")
    assert np.array_equal(out.data, parts[2].data)


def test_linear_mode_associativity(rng):
    th, ph, g = (rng.normal(size=(2, 3, 4)) for _ in range(3))
    out = group_attention(Tensor(th), Tensor(ph), Tensor(g), "linear").data
    theta = th.reshape(2, 12).T
    phi = ph.reshape(2, 12)
    gg = g.reshape(2, 12).T
    ref = (theta @ (phi @ gg)).T.reshape(2, 3, 4)
    assert np.max(np.abs(out - ref)) < 1e-9


@pytest.mark.parametrize("softmax", [True, False])
def test_group_attention_matches_loops(rng, softmax):
    th, ph, g = (rng.normal(size=(2, 4, 4)) for _ in range(3))
    mode = "softmax" if softmax else "linear"
    out = group_attention(Tensor(th), Tensor(ph), Tensor(g), mode).data
    assert np.max(np.abs(out - naive_group_attention(th, ph, g, softmax))) < 1e-9


def test_group_attention_shape_mismatch():
    with pytest.raises(DimensionError):
        group_attention(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 3, 4))),
                        Tensor(np.ones((2, 3, 3))))


def test_softmax_attention_rows_sum_to_one(rng):
    th, ph = rng.normal(scale=3, size=(2, 4, 6, 6))
    a = attention_map(Tensor(th), Tensor(ph))
    assert a.shape == (36, 36)
    assert np.max(np.abs(a.sum(axis=1) - 1)) < 1e-9


def test_channel_weights_constant_when_fc_zero(rng):
    params = GscaParams.init(8, rng)
    params.fc_w = Tensor(np.zeros_like(params.fc_w.data))
    params.fc_b = Tensor(np.zeros(8))
    lam = global_channel_weights(Tensor(rng.normal(size=(8, 5, 5))), params).data
    assert np.array_equal(lam, np.full(8, 0.5))


def test_channel_weights_match_independent_composition(rng):
    params = GscaParams.init(8, rng)
    for t in (params.branch_b1, params.branch_b2, params.fc_b):
        t.data[:] = rng.normal(size=t.shape)
    x = rng.normal(size=(8, 6, 5))
    lam = global_channel_weights(Tensor(x), params).data
    assert np.all((lam > 0) & (lam < 1))

    def conv(inp, w, b):
        out = np.zeros((w.shape[0],) + inp.shape[1:])
        for o in range(w.shape[0]):
            for i in range(w.shape[1]):
                out[o] += ndimage.correlate(inp[i], w[o, i], mode="constant", cval=0.0)
            out[o] += b[o]
        return out

    y = np.maximum(conv(x, params.branch_w1.data, params.branch_b1.data), 0)
    y = np.maximum(conv(y, params.branch_w2.data, params.branch_b2.data), 0)
    z = params.fc_w.data @ y.mean(axis=(1, 2)) + params.fc_b.data
    ref = 1 / (1 + np.exp(-z))
    assert np.max(np.abs(lam - ref)) < 1e-12


def test_residual_identity_when_bypassed(rng):
    cfg = GscaConfig(groups=2, channels=8)
    params = GscaParams.init(8, rng)
    x = rng.normal(size=(8, 4, 4))
    z = gsca_forward(Tensor(x), params, cfg, bypass_channel_weights=True).data
    assert np.array_equal(z, x)


def test_single_group_is_unsplit_attention(rng):
    cfg = GscaConfig(groups=1, channels=4)
    params = GscaParams.init(4, rng)
    x = Tensor(rng.normal(size=(4, 3, 3)))
    z = gsca_forward(x, params, cfg).data
    y = group_attention(T.conv2d(x, params.theta_w), T.conv2d(x, params.phi_w),
                        T.conv2d(x, params.g_w))
    lam = global_channel_weights(x, params)
    ref = x.data + y.data * lam.data[:, None, None]
    assert np.max(np.abs(z - ref)) < 1e-12


def test_groups_must_divide_channels():
    with pytest.raises(ConfigurationError):
        GscaConfig(groups=3, channels=8)
    with pytest.raises(ConfigurationError):
        attention_cost(4, 4, 8, 3)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 5), w=st.integers(1, 5), cg=st.integers(1, 3),
       g=st.sampled_from([1, 2, 4]), seed=st.integers(0, 2**16))
def test_shape_preserved(h, w, cg, g, seed):
    r = np.random.default_rng(seed)
    c = cg * g
    cfg = GscaConfig(groups=g, channels=c)
    x = Tensor(r.normal(size=(c, h, w)))
    assert gsca_forward(x, GscaParams.init(c, r), cfg).shape == (c, h, w)


def test_group_permutation_equivariance(rng):
    c, g = 8, 4
    cg = c // g
    cfg = GscaConfig(groups=g, channels=c)
    params = GscaParams.init(c, rng)
    # keep theta/phi/g block diagonal so groups only see their own channels
    for name in ("theta_w", "phi_w", "g_w"):
        w = getattr(params, name).data
        mask = np.kron(np.eye(g), np.ones((cg, cg)))
        w[:, :, 0, 0] *= mask
    x = rng.normal(size=(c, 3, 3))
    group_perm = [2, 0, 3, 1]
    perm = np.concatenate([np.arange(p * cg, (p + 1) * cg) for p in group_perm])

    permuted = GscaParams(**{k: Tensor(v.data.copy()) for k, v in params.named_tensors().items()})
    for name in ("theta_w", "phi_w", "g_w"):
        getattr(permuted, name).data[:] = getattr(params, name).data[perm][:, perm]
    permuted.branch_w1.data[:] = params.branch_w1.data[:, perm]
    permuted.fc_w.data[:] = params.fc_w.data[perm]
    permuted.fc_b.data[:] = params.fc_b.data[perm]

    z = gsca_forward(Tensor(x), params, cfg).data
    zp = gsca_forward(Tensor(x[perm]), permuted, cfg).data
    assert np.max(np.abs(zp - z[perm])) < 1e-12


def _gsca_grad_check(g, h, w, seed, c=8):
    r = np.random.default_rng(seed)
    cfg = GscaConfig(groups=g, channels=c)
    params = GscaParams.init(c, r)
    for t in (params.branch_b1, params.branch_b2, params.fc_b):
        t.data[:] = r.normal(scale=0.5, size=t.shape)
    x = Tensor(r.normal(size=(c, h, w)), requires_grad=True)
    probe = Tensor(r.normal(size=(c, h, w)))
    named = params.named_tensors()
    with Tape() as tape:
        loss = (gsca_forward(x, params, cfg) * probe).sum()
    backward(tape, loss)
    errors = {}

    def loss_of(target):
        def f(v):
            saved = target.data
            target.data = v
            try:
                with T.no_tape():
                    return (gsca_forward(x, params, cfg) * probe).sum().item()
            finally:
                target.data = saved
        return f

    for name, t in [("x", x)] + sorted(named.items()):
        numeric = central_difference(loss_of(t), t.data)
        errors[name] = rel_err(t.grad, numeric)
    return errors


def test_gsca_gradients_small():
    errors = _gsca_grad_check(g=2, h=4, w=4, seed=7)
    assert max(errors.values()) < 1e-4, errors


def test_cost_model_examples():
    assert attention_cost(4, 4, 8, 4, "paper") == 4096
    for g in (1, 2, 4, 8):
        ratio = Fraction(attention_cost(4, 4, 8, g, "paper"), attention_cost(4, 4, 8, 1, "paper"))
        assert ratio == Fraction(1, g)
        assert attention_cost(4, 4, 8, g, "implemented") == 2 * 16 ** 2 * 8 == 4096


@pytest.mark.parametrize("h,w,c,g", [(4, 4, 8, 1), (4, 4, 8, 2), (4, 4, 8, 8), (3, 5, 6, 3)])
def test_instrumented_macs_equal_implemented_model(h, w, c, g):
    assert measure_attention_macs(h, w, c, g) == attention_cost(h, w, c, g, "implemented")
