"""Finite-difference checks for every autodiff op, plus graph mechanics."""

import numpy as np
import pytest

from bidiseq import autodiff as ad


def numeric_grad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        hi = fn()
        flat[k] = orig - h
        lo = fn()
        flat[k] = orig
        gf[k] = (hi - lo) / (2 * h)
    return g


def check_op(build, *shapes, seed=0, h=1e-6, tol=1e-6):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=s) for s in shapes]
    vars_ = [ad.Var.param(a) for a in arrays]
    out = build(*vars_)
    out.backward()
    for a, v in zip(arrays, vars_):
        num = numeric_grad(lambda: float(build(*[ad.Var(x) for x in arrays]).data), a, h=h)
        np.testing.assert_allclose(v.grad, num, rtol=tol, atol=tol)


class TestElementwise:
    def test_add_mul_broadcast(self):
        check_op(lambda a, b: ((a + b) * a).sum(), (3, 4), (4,))

    def test_scalar_mixing(self):
        check_op(lambda a: (a * 2.5 + 1.0).sum(), (5,))

    def test_relu(self):
        check_op(lambda a: ad.relu(a).sum(), (4, 3), seed=3)

    def test_exp_log(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(0.5, 2.0, size=(3, 3))
        v = ad.Var.param(x)
        out = ad.log(ad.exp(v) + 1.0).sum()
        out.backward()
        num = numeric_grad(lambda: float(ad.log(ad.exp(ad.Var(x)) + 1.0).sum().data), x)
        np.testing.assert_allclose(v.grad, num, atol=1e-6)


class TestMatmulShapes:
    def test_2d(self):
        check_op(lambda a, b: (a @ b).sum(), (3, 4), (4, 5))

    def test_batched(self):
        check_op(lambda a, b: (a @ b).sum(), (2, 3, 4), (2, 4, 5))

    def test_broadcast_weights(self):
        check_op(lambda a, b: (a @ b).sum(), (2, 3, 4), (4, 5))


class TestShapeOps:
    def test_reshape_transpose(self):
        check_op(lambda a: ad.transpose(ad.reshape(a, (2, 6)), (1, 0)).sum(), (3, 4))

    def test_concat(self):
        check_op(lambda a, b: ad.concat([a, b], axis=0).sum(), (2, 3), (4, 3))

    def test_stack(self):
        check_op(lambda a, b: (ad.stack([a, b], axis=0) * 1.5).sum(), (2, 3), (2, 3))

    def test_take_slice(self):
        check_op(lambda a: a[1:3].sum(), (5, 2))

    def test_take_fancy_repeated_indices(self):
        idx = np.array([0, 2, 2, 1])
        check_op(lambda a: (a[idx] * np.arange(1, 5)[:, None]).sum(), (3, 2))


class TestReductions:
    def test_sum_axis(self):
        check_op(lambda a: (ad.sum_(a, axis=1) * np.array([1.0, -2.0, 0.5])).sum(), (3, 4))

    def test_mean(self):
        check_op(lambda a: ad.mean(a, axis=0).sum(), (4, 2))


class TestLogDomain:
    def test_logaddexp(self):
        check_op(lambda a, b: ad.logaddexp(a, b).sum(), (4,), (4,))

    def test_logaddexp_neginf_absorbing(self):
        a = ad.Var.param(np.array([0.3, -1.0]))
        b = ad.Var(np.array([-np.inf, -np.inf]))
        out = ad.logaddexp(a, b).sum()
        out.backward()
        np.testing.assert_allclose(out.data, a.data.sum())
        np.testing.assert_allclose(a.grad, np.ones(2))

    def test_logaddexp_both_neginf_no_nan(self):
        a = ad.Var.param(np.array([-np.inf]))
        b = ad.Var(np.array([-np.inf]))
        out = ad.logaddexp(a, b) + ad.Var(np.array([0.0]))
        assert np.isneginf(out.data).all()

    def test_logsumexp(self):
        check_op(lambda a: ad.logsumexp(a, axis=1).sum(), (3, 5))

    def test_logsumexp_with_neginf_entries(self):
        x = np.array([[0.1, -np.inf, 0.4]])
        v = ad.Var.param(x.copy())
        out = ad.logsumexp(v, axis=1).sum()
        out.backward()
        assert np.isfinite(out.data)
        assert v.grad[0, 1] == 0.0
        np.testing.assert_allclose(v.grad.sum(), 1.0, atol=1e-12)

    def test_log_softmax(self):
        check_op(lambda a: (ad.log_softmax(a, axis=-1) * np.arange(6).reshape(2, 3)).sum(), (2, 3))

    def test_softmax(self):
        check_op(lambda a: (ad.softmax(a, axis=-1) * np.arange(6).reshape(2, 3)).sum(), (2, 3))

    def test_log_softmax_normalizes(self):
        rng = np.random.default_rng(0)
        x = ad.Var(rng.normal(size=(4, 7)))
        probs = np.exp(ad.log_softmax(x).data)
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)


class TestLayerNorm:
    def test_grads(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 5))
        g = rng.normal(size=5)
        b = rng.normal(size=5)
        w = rng.normal(size=(3, 5))

        def build(xv, gv, bv):
            return (ad.layer_norm(xv, gv, bv) * w).sum()

        vx, vg, vb = ad.Var.param(x), ad.Var.param(g), ad.Var.param(b)
        build(vx, vg, vb).backward()
        for arr, var in ((x, vx), (g, vg), (b, vb)):
            num = numeric_grad(
                lambda: float(build(ad.Var(x), ad.Var(g), ad.Var(b)).data), arr
            )
            np.testing.assert_allclose(var.grad, num, atol=1e-5)


class TestGraphMechanics:
    def test_grad_accumulates_on_reuse(self):
        x = ad.Var.param(np.array(2.0))
        y = x * x + x * 3.0
        y.backward()
        np.testing.assert_allclose(x.grad, 7.0)

    def test_no_grad_builds_no_graph(self):
        x = ad.Var.param(np.ones(3))
        with ad.no_grad():
            y = (x * 2.0).sum()
        assert y._backward is None and not y.needs_grad

    def test_deep_chain_is_iterative(self):
        x = ad.Var.param(np.array(1.0))
        y = x
        for _ in range(5000):
            y = y + 1.0
        y.backward()
        np.testing.assert_allclose(x.grad, 1.0)

    def test_backward_requires_scalar(self):
        x = ad.Var.param(np.ones(3))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_dropout_zero_rate_identity(self):
        x = ad.Var.param(np.ones(4))
        rng = np.random.default_rng(0)
        y = ad.dropout(x, 0.0, rng)
        assert y is x or np.array_equal(y.data, x.data)

    def test_dropout_masks_and_scales(self):
        rng = np.random.default_rng(7)
        x = ad.Var.param(np.ones((100, 10)))
        y = ad.dropout(x, 0.4, rng)
        vals = np.unique(y.data)
        assert set(np.round(vals, 6)) <= {0.0, np.round(1 / 0.6, 6)}
        y.sum().backward()
        np.testing.assert_allclose(x.grad, (y.data > 0) / 0.6)
