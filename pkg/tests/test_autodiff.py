"""Gradient and contract checks for the taped reverse-mode core."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import peel.autodiff as ad
from peel.autodiff import ContractViolation

TOL = 1e-4


def _params(rng, *shapes):
    return [ad.param(rng.standard_normal(s), name=f"p{i}", dtype=np.float64)
            for i, s in enumerate(shapes)]


def test_matmul_gelu_chain_gradients():
    rng = np.random.default_rng(0)
    pt = _params(rng, (3, 5), (5, 4))
    err = ad.grad_check(lambda ts: ad.mean(ad.gelu(ad.matmul(ts[0], ts[1]))), pt)
    assert err < TOL


def test_elementwise_op_gradients():
    rng = np.random.default_rng(1)

    def loss(ts):
        x, y = ts
        z = ad.add(ad.mul(x, y), ad.sub(ad.square(x), ad.scale(y, 0.3)))
        z = ad.div(z, ad.shift(ad.exp(ad.neg(ad.square(y))), 1.0))
        return ad.mean(ad.log(ad.shift(ad.square(z), 0.1)))

    assert ad.grad_check(loss, _params(rng, (4, 3), (4, 3))) < TOL


def test_softmax_logsumexp_gradients():
    rng = np.random.default_rng(2)

    def loss(ts):
        sm = ad.tensor_sum(ad.softmax(ts[0], axis=-1), axis=-1)
        return ad.mean(ad.sub(ad.logsumexp(ts[0], axis=-1), sm))

    assert ad.grad_check(loss, _params(rng, (3, 6))) < TOL


def test_layer_norm_gradients():
    rng = np.random.default_rng(3)
    pt = _params(rng, (4, 6), (6,), (6,))
    err = ad.grad_check(lambda ts: ad.mean(ad.layer_norm(ts[0], ts[1], ts[2])), pt)
    assert err < TOL


def test_attention_gradients_and_causality():
    rng = np.random.default_rng(4)

    def loss(ts):
        q = ad.reshape(ts[0], (2, 2, 3, 4))
        k = ad.reshape(ts[1], (2, 2, 3, 4))
        v = ad.reshape(ts[2], (2, 2, 3, 4))
        return ad.mean(ad.causal_attention(q, k, v))

    shapes = [(2, 2, 3, 4)] * 3
    assert ad.grad_check(loss, _params(rng, *shapes)) < TOL

    q = rng.standard_normal((1, 1, 5, 4)).astype(np.float32)
    k = rng.standard_normal((1, 1, 5, 4)).astype(np.float32)
    v = rng.standard_normal((1, 1, 5, 4)).astype(np.float32)
    with ad.paused():
        base = ad.causal_attention(ad.constant(q), ad.constant(k), ad.constant(v)).data
        k2, v2 = k.copy(), v.copy()
        k2[:, :, 3:] += 5.0
        v2[:, :, 3:] -= 7.0
        out = ad.causal_attention(ad.constant(q), ad.constant(k2), ad.constant(v2)).data
    np.testing.assert_array_equal(base[:, :, :3], out[:, :, :3])
    assert not np.allclose(base[:, :, 3:], out[:, :, 3:])


def test_mix_stack_and_structural_op_gradients():
    rng = np.random.default_rng(5)

    def loss(ts):
        coeffs, a, b, table = ts
        mixed = ad.mix_stack(coeffs, [a, b])
        ids = np.array([0, 2, 1])
        rows = ad.gather_rows(table, ids)
        top = ad.narrow(ad.concat([mixed, rows], axis=-1), 1, 1, 3)
        return ad.mean(ad.mul(top, top))

    assert ad.grad_check(loss, _params(rng, (3, 2), (5,), (5,), (3, 5))) < TOL


def test_bmm_transpose_mean_pool_gradients():
    rng = np.random.default_rng(6)

    def loss(ts):
        y = ad.bmm(ts[0], ad.transpose(ts[1], (0, 2, 1)))
        return ad.mean(ad.mean_pool(y, axis=1))

    assert ad.grad_check(loss, _params(rng, (2, 3, 4), (2, 3, 4))) < TOL


def test_sigmoid_softplus_gradients():
    rng = np.random.default_rng(7)
    pt = _params(rng, (5, 3))
    err = ad.grad_check(
        lambda ts: ad.mean(ad.add(ad.sigmoid(ts[0]), ad.softplus(ts[0]))), pt)
    assert err < TOL


def test_softplus_at_zero_is_log_two():
    with ad.paused():
        out = ad.softplus(ad.constant(np.zeros(1, dtype=np.float64))).data
    np.testing.assert_allclose(out, np.log(2.0), rtol=1e-12)


def test_backward_requires_scalar_loss():
    tape = ad.Tape()
    x = ad.param(np.ones((2, 2)), name="x")
    with ad.recording(tape):
        y = ad.square(x)
    with pytest.raises(ContractViolation):
        ad.backward(tape, y, params=[x])


def test_gradients_accumulate_across_reuse():
    x = ad.param(np.array([2.0]), name="x", dtype=np.float64)
    tape = ad.Tape()
    with ad.recording(tape):
        y = ad.tensor_sum(ad.add(ad.square(x), ad.scale(x, 3.0)))
    store = ad.backward(tape, y, params=[x])
    np.testing.assert_allclose(store.of(x), [7.0])


@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.9))
@settings(max_examples=25, deadline=None)
def test_dropout_is_unbiased_and_off_at_eval(seed, p):
    rng = np.random.default_rng(seed)
    x = ad.constant(np.ones((400, 16), dtype=np.float64))
    with ad.paused():
        kept = ad.dropout(x, p, np.random.default_rng(seed), training=True).data
        off = ad.dropout(x, p, rng, training=False).data
    np.testing.assert_array_equal(off, x.data)
    assert abs(kept.mean() - 1.0) < 0.15
    scale = 1.0 / (1.0 - p)
    nonzero = kept[kept != 0.0]
    np.testing.assert_allclose(nonzero, scale, rtol=1e-6)


def test_narrow_bounds_are_checked():
    x = ad.constant(np.ones((2, 5)))
    with pytest.raises(ContractViolation):
        ad.narrow(x, 1, 3, 4)


def test_grad_check_rejects_nonfinite():
    def loss(ts):
        return ad.tensor_sum(ad.log(ts[0]))

    bad = [ad.param(np.array([-1.0]), name="neg", dtype=np.float64)]
    with pytest.raises(ContractViolation):
        ad.grad_check(loss, bad)
