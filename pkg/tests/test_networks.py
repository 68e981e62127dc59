import numpy as np
import pytest

from krflux import autodiff as ad
from krflux.autodiff import DimensionMismatch, Tape
from krflux.networks import (MlpHandle, MlpSpec, init_params, mlp_eval, mlp_forward, mlp_jet,
                             mlp_partial_last, tanh_jet)

from util import fd_grad, mlp_params, rel_err


@pytest.fixture
def net():
    spec = MlpSpec(3, hidden_layers=3, hidden_width=4)
    return MlpHandle(spec, "net"), mlp_params(spec, 7)


class TestSpec:
    def test_param_count(self):
        spec = MlpSpec(2)
        assert spec.n_params == (2 * 5 + 5) + 4 * (5 * 5 + 5) + (5 + 1)
        assert len(init_params(spec, 0)) == spec.n_params

    def test_invalid(self):
        with pytest.raises(ValueError):
            MlpSpec(0)
        with pytest.raises(ValueError):
            MlpSpec(2, activation="relu")

    def test_init_deterministic(self):
        spec = MlpSpec(2)
        np.testing.assert_array_equal(init_params(spec, 3), init_params(spec, 3))
        assert not np.array_equal(init_params(spec, 3), init_params(spec, 4))

    def test_wrong_segment_length(self, net):
        h, p = net
        other = MlpHandle(MlpSpec(3, 2, 4), "net")
        with pytest.raises(DimensionMismatch):
            mlp_forward(Tape().bind(p), other, np.zeros((1, 3)))


class TestJet:
    def test_value_matches_forward(self, net):
        h, p = net
        u = np.random.default_rng(0).normal(size=(6, 3))
        f, _, _ = mlp_jet(Tape().bind(p), h, u, [0, 2])
        plain = ad.value_of(mlp_forward(Tape().bind(p), h, u))[:, 0]
        np.testing.assert_allclose(ad.value_of(f), plain, rtol=1e-14)

    def test_first_derivatives(self, net):
        h, p = net
        u = np.random.default_rng(1).normal(size=(5, 3))
        _, df, _ = mlp_jet(Tape().bind(p), h, u, [0, 1, 2])
        df = ad.value_of(df)
        eps = 1e-5
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            fd = (mlp_eval(h, (u + e)[:, :2], (u + e)[:, 2], p) - mlp_eval(h, (u - e)[:, :2], (u - e)[:, 2], p))
            np.testing.assert_allclose(df[k], fd / (2 * eps), rtol=1e-7, atol=1e-9)

    @pytest.mark.parametrize("second", [0, 1, 2])
    def test_second_derivatives(self, net, second):
        h, p = net
        u = np.random.default_rng(2).normal(size=(4, 3))
        _, _, d2f = mlp_jet(Tape().bind(p), h, u, [0, 1, 2], second=second)
        d2f = ad.value_of(d2f)
        eps = 1e-4
        e = np.zeros(3)
        e[second] = eps
        _, dp, _ = mlp_jet(Tape().bind(p), h, u + e, [0, 1, 2])
        _, dm, _ = mlp_jet(Tape().bind(p), h, u - e, [0, 1, 2])
        np.testing.assert_allclose(d2f, (ad.value_of(dp) - ad.value_of(dm)) / (2 * eps), rtol=1e-6, atol=1e-8)

    def test_partial_last(self, net):
        h, p = net
        x, t = np.array([0.3, -0.2]), 0.4
        _, df, _ = mlp_jet(Tape().bind(p), h, np.array([[0.3, -0.2, 0.4]]), [1])
        assert mlp_partial_last(h, x, t, p) == pytest.approx(float(ad.value_of(df)[0, 0]), rel=1e-14)

    def test_parameter_gradient_of_jet(self, net):
        """Reverse sweep through value, first and second derivative channels."""
        h, p = net
        u = np.random.default_rng(3).normal(size=(7, 3))
        c = np.random.default_rng(4).normal(size=(3, 3, 7))

        def loss(b):
            f, df, d2f = mlp_jet(b, h, u, [0, 1, 2], second=1)
            return ad.add(ad.vsum(ad.mul(f, c[0, 0])),
                          ad.add(ad.vsum(ad.mul(df, c[1])), ad.vsum(ad.mul(d2f, c[2]))))

        _, g = ad.value_and_grad(loss, p)
        fd = fd_grad(lambda v: ad.forward_eval(loss, p.with_values(v)), p.values)
        assert rel_err(g, fd) < 1e-6

    def test_input_gradient_through_jet(self, net):
        h, p = net
        u0 = np.random.default_rng(5).normal(size=(2, 3))

        def f(uv):
            tape = Tape()
            u = tape.leaf(uv.reshape(2, 3)) if not isinstance(uv, ad.Var) else uv
            _, df, d2 = mlp_jet(tape.bind(p), h, u, [0, 2], second=0)
            return tape, u, ad.add(ad.vsum(ad.square(df)), ad.vsum(d2))

        tape, u, out = f(u0.ravel())
        g = tape.gradient(out, [u])[0].ravel()
        fd = fd_grad(lambda v: float(ad.value_of(f(v)[2])), u0.ravel())
        assert rel_err(g, fd) < 1e-6

    def test_tanh_jet_vjp(self):
        rng = np.random.default_rng(6)
        z0 = rng.normal(size=(7, 2, 3))
        weights = rng.normal(size=z0.shape)

        def fn(zv):
            return ad.vsum(ad.mul(tanh_jet(zv, 3, 2), weights))

        tape = Tape()
        leaf = tape.leaf(z0)
        g = tape.gradient(fn(leaf), [leaf])[0]
        fd = fd_grad(lambda v: float(fn(v.reshape(z0.shape))), z0.ravel()).reshape(z0.shape)
        assert rel_err(g, fd) < 1e-7

    def test_dimension_checks(self, net):
        h, p = net
        with pytest.raises(DimensionMismatch):
            mlp_jet(Tape().bind(p), h, np.zeros((2, 4)), [0])
        with pytest.raises(DimensionMismatch):
            mlp_eval(h, np.zeros((2, 3)), 0.0, p)


class TestDeepNetwork:
    def test_five_by_five_gradient(self):
        spec = MlpSpec(3, 5, 5)
        h = MlpHandle(spec, "net")
        p = mlp_params(spec, 11)
        u = np.random.default_rng(12).normal(size=(100, 3))

        def loss(b):
            return ad.vsum(ad.square(mlp_forward(b, h, u)))

        _, g = ad.value_and_grad(loss, p)
        fd = fd_grad(lambda v: ad.forward_eval(loss, p.with_values(v)), p.values)
        assert rel_err(g, fd) < 1e-5
