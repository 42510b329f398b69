"""Tests for the reverse-mode autodiff engine.

Analytic gradients are checked against central finite differences (the
independent oracle) for every primitive, plus structural contracts: additive
accumulation, topological-order invariance, and the gradient-reversal rule.
"""

import math

import numpy as np
import pytest

from relmatch import autodiff as ad


def fd_check(build, params, step=1e-5):
    return ad.grad_check(build, params, step=step)


class TestForwardValues:
    def test_tanh_at_zero(self):
        out = ad.tanh(ad.leaf(np.zeros(3)))
        assert np.all(out.value == 0.0)

    def test_softmax_uniform(self):
        out = ad.softmax(ad.leaf(np.zeros(3)))
        np.testing.assert_allclose(out.value, np.full(3, 1.0 / 3.0), atol=1e-15)

    def test_cosine_orthogonal(self):
        out = ad.cosine(ad.leaf([1.0, 0.0]), ad.leaf([0.0, 1.0]))
        assert abs(float(out.value)) < 1e-12

    def test_cosine_zero_vector_is_near_zero(self):
        out = ad.cosine(ad.leaf([0.0, 0.0]), ad.leaf([1.0, 2.0]))
        assert abs(float(out.value)) < 1e-6

    def test_max_pool_first_tie_wins(self):
        m = ad.leaf([[1.0, 5.0], [1.0, 5.0], [0.0, 0.0]])
        out = ad.max_pool_rows(m, 0, 2)
        ad.backward(ad.mean_all(out))
        # gradient lands on row 0 only (lowest index on ties)
        assert np.all(m.grad[0] == 0.5)
        assert np.all(m.grad[1:] == 0.0)

    def test_cross_entropy_values(self):
        probs = ad.leaf([0.5, 0.25, 0.25])
        assert abs(float(ad.cross_entropy(probs, 0).value) - math.log(2.0)) < 1e-12
        certain = ad.leaf([1.0, 0.0])
        assert float(ad.cross_entropy(certain, 0).value) == 0.0

    def test_max_excluding(self):
        v = ad.leaf([0.4, 0.7, 0.1])
        assert float(ad.max_excluding(v, 0).value) == 0.7
        assert float(ad.max_excluding(v, 1).value) == 0.4


class TestShapeErrors:
    def test_add_mismatch(self):
        with pytest.raises(ad.ShapeError, match="add"):
            ad.add(ad.leaf(np.zeros(2)), ad.leaf(np.zeros(3)))

    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError, match="matmul"):
            ad.matmul(ad.leaf(np.zeros((2, 3))), ad.leaf(np.zeros((2, 3))))

    def test_backward_needs_scalar(self):
        with pytest.raises(ad.ShapeError, match="scalar"):
            ad.backward(ad.leaf(np.zeros(2)))

    def test_span_out_of_bounds(self):
        with pytest.raises(ad.ShapeError, match="max_pool_rows"):
            ad.max_pool_rows(ad.leaf(np.zeros((3, 2))), 1, 3)


class TestBackwardBasics:
    def test_quadratic(self):
        p = ad.leaf([1.0, 2.0])
        loss = ad.dot(p, p)
        ad.backward(loss)
        np.testing.assert_allclose(p.grad, [2.0, 4.0], rtol=0, atol=0)

    def test_tanh_chain(self):
        w = ad.leaf(np.asarray(0.3).reshape(()))
        # loss = tanh(w * x) at x = 1
        loss = ad.tanh(ad.scale(w, 1.0))
        ad.backward(loss)
        expected = 1.0 - math.tanh(0.3) ** 2
        assert abs(float(w.grad) - expected) < 1e-12
        assert abs(expected - 0.91513) < 1e-5

    def test_accumulation_is_additive(self):
        x = ad.leaf([3.0])
        y = ad.mul(x, x)  # x used twice
        ad.backward(ad.mean_all(y))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_unreachable_leaf_keeps_no_grad(self):
        x = ad.leaf([1.0, 2.0])
        z = ad.leaf([5.0, 5.0])
        ad.backward(ad.dot(x, x))
        assert z.grad is None

    def test_constants_are_skipped(self):
        c = ad.const([1.0, 2.0])
        x = ad.leaf([3.0, 4.0])
        ad.backward(ad.dot(c, x))
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_topological_order_invariance(self):
        rng = np.random.default_rng(7)
        a0 = rng.normal(size=4)
        b0 = rng.normal(size=4)

        def build_left_first(a, b):
            left = ad.dot(a, a)
            right = ad.tanh(ad.dot(a, b))
            return ad.add(left, right)

        def build_right_first(a, b):
            right = ad.tanh(ad.dot(a, b))
            left = ad.dot(a, a)
            return ad.add(left, right)

        a1, b1 = ad.leaf(a0), ad.leaf(b0)
        ad.backward(build_left_first(a1, b1))
        a2, b2 = ad.leaf(a0), ad.leaf(b0)
        ad.backward(build_right_first(a2, b2))
        assert np.array_equal(a1.grad, a2.grad)
        assert np.array_equal(b1.grad, b2.grad)


class TestGRL:
    def test_forward_identity_bitwise(self):
        x = ad.leaf([0.1, -2.5, 3.75])
        out = ad.grl(x, 0.5)
        assert np.array_equal(out.value, x.value)

    def test_backward_negates_and_scales(self):
        x = ad.leaf([1.0, 2.0])
        w = ad.const([3.0, 4.0])
        loss = ad.dot(ad.grl(x, 0.5), w)
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [-1.5, -2.0])

    def test_lambda_zero_gives_zero_gradient(self):
        x = ad.leaf([1.0, 2.0])
        loss = ad.dot(ad.grl(x, 0.0), ad.const([3.0, 4.0]))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [0.0, 0.0])

    def test_matches_identity_graph_times_minus_lambda(self):
        rng = np.random.default_rng(11)
        x0 = rng.normal(size=5)
        w0 = rng.normal(size=(5, 3))
        lam = 0.7

        def run(with_grl):
            x = ad.leaf(x0)
            w = ad.leaf(w0)
            h = ad.grl(x, lam) if with_grl else x
            loss = ad.cross_entropy(ad.softmax(ad.matmul(h, w)), 1)
            ad.backward(loss)
            return x.grad, w.grad

        gx_grl, gw_grl = run(True)
        gx_id, gw_id = run(False)
        np.testing.assert_allclose(gx_grl, -lam * gx_id, atol=1e-15)
        # the classifier weight is downstream of the reversal: untouched
        np.testing.assert_allclose(gw_grl, gw_id, atol=1e-15)

    def test_rejects_bad_lambda(self):
        with pytest.raises(ValueError):
            ad.grl(ad.leaf([1.0]), -0.1)


class TestFiniteDifferences:
    """Every primitive against the central-difference oracle."""

    def test_quadratic_is_exact(self):
        err = fd_check(lambda p: ad.dot(p["x"], p["x"]), {"x": np.array([1.0, 2.0, -0.5])})
        assert err < 1e-8

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_dense_composite(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "w": rng.normal(size=(4, 3)),
            "v": rng.normal(size=(3, 4)),
            "x": rng.normal(size=4),
            "b": rng.normal(size=3),
        }

        def build(p):
            h = ad.tanh(ad.add(ad.matmul(p["x"], p["w"]), p["b"]))
            back = ad.matmul(h, p["v"])
            return ad.mean_all(ad.mul(ad.sub(back, p["x"]), ad.scale(back, 0.5)))

        assert fd_check(build, params) < 1e-6

    @pytest.mark.parametrize("seed", [3, 4])
    def test_softmax_cross_entropy(self, seed):
        rng = np.random.default_rng(seed)
        params = {"z": rng.normal(size=6)}

        def build(p):
            return ad.cross_entropy(ad.softmax(p["z"]), 2)

        assert fd_check(build, params) < 1e-6

    @pytest.mark.parametrize("seed", [5, 6])
    def test_cosine(self, seed):
        rng = np.random.default_rng(seed)
        params = {
            "a": rng.normal(size=5) + 0.5,
            "b": rng.normal(size=5) - 0.5,
        }
        assert fd_check(lambda p: ad.cosine(p["a"], p["b"]), params) < 1e-6

    def test_norm_and_div(self):
        rng = np.random.default_rng(8)
        params = {"v": rng.normal(size=4) + 1.0}

        def build(p):
            n = ad.add_scalar(ad.norm(p["v"]), 1e-12)
            return ad.mean_all(ad.div_by_scalar(p["v"], n))

        assert fd_check(build, params) < 1e-6

    def test_pooling_concat_select(self):
        rng = np.random.default_rng(9)
        params = {"m": rng.normal(size=(5, 3))}

        def build(p):
            pooled = ad.max_pool_rows(p["m"], 1, 3)
            row = ad.select_row(p["m"], 0)
            both = ad.concat([pooled, row])
            return ad.dot(both, both)

        assert fd_check(build, params) < 1e-6

    def test_gather_and_slice(self):
        rng = np.random.default_rng(10)
        params = {"t": rng.normal(size=(6, 3))}

        def build(p):
            g = ad.gather_rows(p["t"], [0, 2, 2, 5])
            s = ad.slice_rows(p["t"], 1, 4)
            return ad.add(ad.mean_all(ad.tanh(g)), ad.mean_all(s))

        assert fd_check(build, params) < 1e-6

    def test_attention_style_block(self):
        rng = np.random.default_rng(12)
        params = {
            "x": rng.normal(size=(4, 3)),
            "q": rng.normal(size=(3, 3)),
            "k": rng.normal(size=(3, 3)),
        }

        def build(p):
            scores = ad.scale(
                ad.matmul(ad.matmul(p["x"], p["q"]), ad.transpose(ad.matmul(p["x"], p["k"]))),
                1.0 / math.sqrt(3.0),
            )
            att = ad.matmul(ad.softmax(scores), p["x"])
            return ad.mean_all(att)

        assert fd_check(build, params) < 1e-6

    def test_margin_style_block(self):
        rng = np.random.default_rng(13)
        params = {"s": rng.normal(size=5)}

        def build(p):
            delta = ad.sub(ad.select_index(p["s"], 1), ad.max_excluding(p["s"], 1))
            return ad.mean_all(ad.hinge(ad.add_scalar(ad.scale(delta, -1.0), 0.3)))

        assert fd_check(build, params) < 1e-6

    def test_scalar_ops(self):
        rng = np.random.default_rng(14)
        params = {"a": rng.normal(size=()) + 2.0, "v": rng.normal(size=3)}

        def build(p):
            scaled = ad.scalar_mul(p["a"], p["v"])
            stacked = ad.stack_scalars([ad.norm(scaled), ad.dot(p["v"], p["v"]), p["a"]])
            return ad.mean_all(stacked)

        assert fd_check(build, params) < 1e-6


class TestGradCheckAPI:
    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda p: ad.dot(p["x"], p["x"]), {"x": np.ones(2)}, step=0.0)

    def test_reports_nonfinite_op(self):
        def build(p):
            zero = ad.sub(ad.mean_all(p["x"]), ad.mean_all(p["x"]))
            with np.errstate(divide="ignore", invalid="ignore"):
                bad = ad.div_by_scalar(p["x"], zero)
            return ad.mean_all(bad)

        with pytest.raises(ad.NonFiniteError, match="div_by_scalar"):
            ad.grad_check(build, {"x": np.ones(2)})
