import gc
import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krflux import autodiff as ad
from krflux.autodiff import Mat, NonFiniteValue, ParamVector, Tape

from util import fd_grad, rel_err


def grad_check(fn, x, h=1e-4):
    """Reverse gradient of sum(fn(x)) against central differences."""
    tape = Tape()
    leaf = tape.leaf(x)
    out = ad.vsum(fn(leaf))
    g = tape.gradient(out, [leaf])[0]
    fd = fd_grad(lambda v: float(np.sum(ad.value_of(fn(v)))), x, h)
    return rel_err(g, fd)


class TestParamVector:
    def test_segments_cover(self):
        p = ParamVector()
        p.add("a", [1.0, 2.0])
        p.add("b", [3.0])
        np.testing.assert_array_equal(p.segment("b"), [3.0])
        assert len(p) == 3

    def test_duplicate_rejected(self):
        p = ParamVector()
        p.add("a", [1.0])
        with pytest.raises(ValueError):
            p.add("a", [2.0])

    def test_overlap_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), {"a": (0, 2), "b": (1, 2)})

    def test_gap_rejected(self):
        with pytest.raises(ValueError):
            ParamVector(np.zeros(3), {"a": (0, 2)})

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteValue):
            ParamVector([np.nan], {"a": (0, 1)})

    def test_dict_round_trip(self):
        p = ParamVector()
        p.add("x", [0.1, -2.5])
        p.add("y", [1e-300])
        q = ParamVector.from_dict(p.to_dict())
        np.testing.assert_array_equal(p.values, q.values)
        assert q.segments == p.segments


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
    "log_softplus": ad.log_softplus,
    "square": ad.square,
    "neg": ad.neg,
    "log": lambda x: ad.log(ad.add(ad.square(x), 1.0)),
    "sqrt": lambda x: ad.sqrt(ad.add(ad.square(x), 0.5)),
    "power": lambda x: ad.power(ad.add(ad.square(x), 1.0), 1.5),
    "mean": lambda x: ad.mean(x, axis=0),
    "reshape": lambda x: ad.mul(ad.reshape(x, (4, 3)), np.arange(12.0).reshape(4, 3)),
    "transpose": lambda x: ad.mul(ad.transpose(ad.reshape(x, (4, 3))), np.arange(12.0).reshape(3, 4)),
    "getitem": lambda x: ad.mul(ad.getitem(x, [0, 0, 5]), np.array([1.0, 2.0, 3.0])),
    "slice": lambda x: ad.square(ad.getitem(x, slice(2, 7))),
}

BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.add(ad.square(b), 1.0)),
    "logaddexp": ad.logaddexp,
    "dot": lambda a, b: ad.dot(a, b),
    "stack": lambda a, b: ad.mul(ad.stack([a, b]), np.arange(24.0).reshape(2, 12)),
    "concatenate": lambda a, b: ad.square(ad.concatenate([a, b])),
}


class TestPrimitives:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary_gradients(self, name):
        x = np.random.default_rng(1).normal(size=12)
        assert grad_check(UNARY[name], x) < 1e-5

    @pytest.mark.parametrize("name", sorted(BINARY))
    def test_binary_gradients(self, name):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=12), rng.normal(size=12)
        fn = BINARY[name]
        assert grad_check(lambda v: fn(v, b), a) < 1e-5
        assert grad_check(lambda v: fn(a, v), b) < 1e-5

    def test_broadcast_gradient(self):
        rng = np.random.default_rng(3)
        row = rng.normal(size=(1, 4))
        mat = rng.normal(size=(3, 4))
        assert grad_check(lambda v: ad.mul(v, mat), row) < 1e-5
        assert grad_check(lambda v: ad.add(ad.square(v), mat), row) < 1e-5

    def test_matmul_gradients(self):
        rng = np.random.default_rng(4)
        x, w = rng.normal(size=(5, 3)), rng.normal(size=(3, 2))
        assert grad_check(lambda v: ad.matmul(v, w), x) < 1e-5
        assert grad_check(lambda v: ad.matmul(x, v), w) < 1e-5

    def test_vsum_axis(self):
        x = np.random.default_rng(5).normal(size=(3, 4))
        assert grad_check(lambda v: ad.square(ad.vsum(v, axis=1)), x) < 1e-5

    def test_softplus_tails_stable(self):
        x = np.array([-800.0, -40.0, 0.0, 40.0, 800.0])
        sp = ad.softplus(x)
        assert np.all(np.isfinite(sp))
        np.testing.assert_allclose(ad.log_softplus(x)[:2], x[:2], rtol=1e-12)
        np.testing.assert_allclose(sp[-1], 800.0)

    def test_gradient_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.leaf(np.array([1.5]))
        y = ad.add(ad.mul(x, x), ad.mul(3.0, x))
        np.testing.assert_allclose(tape.gradient(ad.vsum(y), [x])[0], [2 * 1.5 + 3.0])

    def test_unused_leaf_has_zero_gradient(self):
        tape = Tape()
        x, z = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
        g = tape.gradient(ad.vsum(ad.exp(x)), [x, z])
        np.testing.assert_array_equal(g[1], np.zeros(3))

    def test_non_finite_forward_detected(self):
        p = ParamVector([-1.0], {"a": (0, 1)})
        with pytest.raises(NonFiniteValue):
            ad.forward_eval(lambda b: ad.vsum(ad.log(b["a"])), p)

    def test_non_scalar_root_rejected(self):
        p = ParamVector([1.0, 2.0], {"a": (0, 2)})
        with pytest.raises(ad.DimensionMismatch):
            ad.forward_eval(lambda b: b["a"], p)

    def test_operands_on_different_tapes(self):
        a, b = Tape().leaf(np.ones(1)), Tape().leaf(np.ones(1))
        with pytest.raises(ValueError):
            ad.add(a, b)

    def test_bound_segments_share_leaf(self):
        p = ParamVector()
        p.add("a", [1.0, 2.0])
        p.add("b", [3.0])
        val, g = ad.value_and_grad(lambda b: ad.vsum(ad.mul(b["a"], b["b"])), p)
        assert val == 9.0
        np.testing.assert_array_equal(g, [3.0, 3.0, 3.0])


class TestTapeLifetime:
    def test_dropped_graph_freed_without_cycle_collector(self):
        p = ParamVector()
        p.add("w", [1.0, 2.0])
        gc.disable()
        try:
            b = Tape().bind(p)
            loss = ad.vsum(ad.square(b["w"]))
            b.gradient(loss)
            tape_ref, loss_ref = weakref.ref(b.tape), weakref.ref(loss)
            del b, loss
            assert tape_ref() is None and loss_ref() is None
        finally:
            gc.enable()

    def test_live_root_keeps_ancestors(self):
        """Intermediates dropped by the caller still carry gradient while the root lives."""
        tape = Tape()
        x = tape.leaf(np.array([3.0]))
        y = ad.vsum(ad.square(ad.square(x)))  # x**4, intermediate x**2 unreferenced here
        gc.collect()
        np.testing.assert_allclose(tape.gradient(y, [x])[0], [4 * 27.0])


class TestMat:
    @pytest.mark.parametrize("d", [1, 2, 3, 4, 5, 6, 7, 8])
    def test_adjugate_identity(self, d):
        m = np.random.default_rng(d).normal(size=(d, d))
        mat = Mat.from_array(m)
        adj = ad.adjugate(mat).to_array()
        np.testing.assert_allclose(adj @ m, np.linalg.det(m) * np.eye(d), atol=1e-10 * max(1, abs(np.linalg.det(m))))

    @pytest.mark.parametrize("d", [2, 3, 5, 6])
    def test_det_gradient(self, d):
        m0 = np.random.default_rng(10 + d).normal(size=(d, d))

        def fn(v):
            mat = Mat(d, d, [ad.getitem(v, i) if isinstance(v, ad.Var) else v[i] for i in range(d * d)])
            return ad.det(mat)

        assert grad_check(fn, m0.ravel()) < 1e-5

    @pytest.mark.parametrize("d", [2, 3, 6])
    def test_adjugate_gradient(self, d):
        m0 = np.random.default_rng(20 + d).normal(size=(d, d)) + 2 * np.eye(d)
        weights = np.random.default_rng(0).normal(size=d * d)

        def fn(v):
            mat = Mat(d, d, [ad.getitem(v, i) if isinstance(v, ad.Var) else v[i] for i in range(d * d)])
            adj = ad.adjugate(mat)
            acc = 0.0
            for k, e in enumerate(adj.entries):
                acc = ad.add(acc, ad.mul(weights[k], e))
            return acc

        assert grad_check(fn, m0.ravel()) < 1e-5

    def test_adjugate_of_singular_matrix(self):
        m = np.array([[1.0, 2.0], [2.0, 4.0]])
        adj = ad.adjugate(Mat.from_array(m)).to_array()
        np.testing.assert_allclose(adj @ m, np.zeros((2, 2)), atol=1e-14)

    def test_structural_zeros_skipped(self):
        mat = Mat(2, 2, [2.0, 0.0, 1.0, 3.0])
        assert ad.det(mat) == 6.0
        assert mat.matmul(Mat.identity(2)).entries[1] == 0.0

    def test_logdet_triangular(self):
        mat = Mat(2, 2, [2.0, 0.0, 5.0, 3.0])
        np.testing.assert_allclose(ad.logdet_triangular(mat), np.log(6.0))
        with pytest.raises(ad.NonPositiveDiagonal):
            ad.logdet_triangular(Mat(2, 2, [2.0, 0.0, 5.0, -3.0]))
        with pytest.raises(ValueError):
            ad.logdet_triangular(Mat(2, 2, [2.0, 1.0, 5.0, 3.0]))

    def test_shape_errors(self):
        with pytest.raises(ad.DimensionMismatch):
            Mat(2, 2, [1.0, 2.0, 3.0])
        with pytest.raises(ad.DimensionMismatch):
            ad.det(Mat(1, 2, [1.0, 2.0]))

    def test_batched_entries(self):
        a = np.array([1.0, 2.0, 3.0])
        mat = Mat(2, 2, [a, 1.0, 0.0, a])
        np.testing.assert_allclose(ad.det(mat), a * a)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=1, max_value=5), st.integers(min_value=0, max_value=10_000))
def test_adjugate_property(d, seed):
    m = np.random.default_rng(seed).uniform(-2, 2, size=(d, d))
    adj = ad.adjugate(Mat.from_array(m)).to_array()
    np.testing.assert_allclose(m @ adj, np.linalg.det(m) * np.eye(d), atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=8))
def test_sigmoid_softplus_relation(xs):
    x = np.array(xs)
    np.testing.assert_allclose(ad.sigmoid(x) + ad.sigmoid(-x), 1.0, rtol=1e-12)
    np.testing.assert_allclose(ad.softplus(x) - ad.softplus(-x), x, atol=1e-12)
