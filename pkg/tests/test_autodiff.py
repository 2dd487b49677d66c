"""Finite-difference checks for every autodiff primitive."""

import numpy as np
import pytest

import relight.autodiff as ad


def numeric_grad(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at x (float64)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_unary(op, x, tol=1e-7):
    t = ad.Tensor(x.copy(), requires_grad=True)
    out = op(t)
    w = np.random.default_rng(0).normal(size=out.data.shape)
    ad.backward(out, w)

    def f(xv):
        return float((op(ad.Tensor(xv)).data * w).sum())

    num = numeric_grad(f, x)
    assert np.allclose(t.grad, num, rtol=1e-5, atol=tol), np.abs(t.grad - num).max()


RNG = np.random.default_rng(42)


@pytest.mark.parametrize(
    "op",
    [ad.exp, ad.log, ad.tanh, ad.silu, ad.gelu, ad.softmax, ad.layernorm, ad.neg],
    ids=lambda o: o.__name__,
)
def test_unary_grads(op):
    x = RNG.uniform(0.2, 2.0, size=(3, 5)) if op is ad.log else RNG.normal(size=(3, 5))
    check_unary(op, x)


def test_add_mul_broadcast_grads():
    a = ad.Tensor(RNG.normal(size=(4, 3)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(3,)), requires_grad=True)
    out = ad.mul(ad.add(a, b), b)
    w = RNG.normal(size=(4, 3))
    ad.backward(out, w)

    def f_a(av):
        return float(((av + b.data) * b.data * w).sum())

    def f_b(bv):
        return float(((a.data + bv) * bv * w).sum())

    assert np.allclose(a.grad, numeric_grad(f_a, a.data.copy()), atol=1e-7)
    assert np.allclose(b.grad, numeric_grad(f_b, b.data.copy()), atol=1e-7)


def test_shared_cotangent_not_corrupted():
    # add hands the same cotangent array to both parents; a second path then
    # accumulates into one of them. The other parent's grad must stay intact.
    a = ad.Tensor(RNG.normal(size=(3,)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(3,)), requires_grad=True)
    out = ad.add(ad.add(a, b), ad.mul(a, b))
    ad.backward(out, np.ones(3))
    assert np.allclose(b.grad, 1.0 + a.data)
    assert np.allclose(a.grad, 1.0 + b.data)


def test_matmul_grads():
    a = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(4, 5)), requires_grad=True)
    out = ad.matmul(a, b)
    w = RNG.normal(size=out.data.shape)
    ad.backward(out, w)

    def f_a(av):
        return float(((av @ b.data) * w).sum())

    def f_b(bv):
        return float(((a.data @ bv) * w).sum())

    assert np.allclose(a.grad, numeric_grad(f_a, a.data.copy()), atol=1e-7)
    assert np.allclose(b.grad, numeric_grad(f_b, b.data.copy()), atol=1e-7)


def test_linear_grads():
    x = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    w = ad.Tensor(RNG.normal(size=(4, 6)), requires_grad=True)
    b = ad.Tensor(RNG.normal(size=(6,)), requires_grad=True)
    out = ad.linear(x, w, b)
    cot = RNG.normal(size=out.data.shape)
    ad.backward(out, cot)
    for t, f in [
        (x, lambda v: float(((v @ w.data + b.data) * cot).sum())),
        (w, lambda v: float(((x.data @ v + b.data) * cot).sum())),
        (b, lambda v: float(((x.data @ w.data + v) * cot).sum())),
    ]:
        assert np.allclose(t.grad, numeric_grad(f, t.data.copy()), atol=1e-7)


def test_reshape_transpose_getitem_concat_stack():
    x = ad.Tensor(RNG.normal(size=(2, 3, 4)), requires_grad=True)
    y = ad.transpose(ad.reshape(x, (6, 4)), (1, 0))
    z = ad.getitem(y, (slice(None), slice(0, 3)))
    w = ad.concat([z, z], axis=0)
    s = ad.stack([w, w], axis=0)
    cot = RNG.normal(size=s.data.shape)
    ad.backward(s, cot)

    def f(xv):
        yv = xv.reshape(6, 4).transpose(1, 0)
        zv = yv[:, 0:3]
        wv = np.concatenate([zv, zv], axis=0)
        sv = np.stack([wv, wv], axis=0)
        return float((sv * cot).sum())

    assert np.allclose(x.grad, numeric_grad(f, x.data.copy()), atol=1e-7)


def test_sum_mean_broadcast_to():
    x = ad.Tensor(RNG.normal(size=(3, 4)), requires_grad=True)
    out = ad.sum_(ad.broadcast_to(ad.mean(x, axis=1, keepdims=True), (3, 4)), axis=0)
    cot = RNG.normal(size=(4,))
    ad.backward(out, cot)

    def f(xv):
        return float((np.broadcast_to(xv.mean(axis=1, keepdims=True), (3, 4)).sum(axis=0) * cot).sum())

    assert np.allclose(x.grad, numeric_grad(f, x.data.copy()), atol=1e-7)


def test_attention_matches_reference_and_grads():
    B, H, T, d = 2, 2, 5, 4
    q = ad.Tensor(RNG.normal(size=(B, H, T, d)), requires_grad=True)
    k = ad.Tensor(RNG.normal(size=(B, H, T, d)), requires_grad=True)
    v = ad.Tensor(RNG.normal(size=(B, H, T, d)), requires_grad=True)
    out = ad.attention(q, k, v)

    p = ad.attention_probs(q.data, k.data)
    ref = np.einsum("bhij,bhjd->bhid", p, v.data)
    assert np.allclose(out.data, ref, atol=1e-12)

    cot = RNG.normal(size=out.data.shape)
    ad.backward(out, cot)

    def make_f(name):
        def f(val):
            args = {"q": q.data, "k": k.data, "v": v.data}
            args[name] = val
            pp = ad.attention_probs(args["q"], args["k"])
            oo = np.einsum("bhij,bhjd->bhid", pp, args["v"])
            return float((oo * cot).sum())

        return f

    for t, name in [(q, "q"), (k, "k"), (v, "v")]:
        num = numeric_grad(make_f(name), t.data.copy())
        assert np.allclose(t.grad, num, atol=1e-6), np.abs(t.grad - num).max()


def test_attention_rows_sum_to_one():
    q = RNG.normal(size=(1, 2, 7, 6))
    k = RNG.normal(size=(1, 2, 7, 6))
    p = ad.attention_probs(q, k)
    assert np.abs(p.sum(axis=-1) - 1.0).max() <= 1e-6


def test_no_grad_blocks_graph():
    x = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, 2.0)
    assert not y.requires_grad and y.backward_fn is None


def test_dtype_preserved():
    x = ad.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ad.gelu(ad.linear(x, ad.Tensor(np.eye(2, dtype=np.float32))))
    assert y.data.dtype == np.float32
    ad.backward(y, np.ones((2, 2), dtype=np.float32))
    assert x.grad.dtype == np.float32
