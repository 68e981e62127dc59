import numpy as np
import pytest

from krflux import autodiff as ad
from krflux.autodiff import DimensionMismatch, ParamVector
from krflux.dynamics import (DoubleWell, DynamicsModel, FullDiffusion, IsotropicDiffusion, LogSumExpWells,
                             NeuralPotential, Quadratic, diffusion_matrix, min_eigenvalue, potential_gradient,
                             potential_value)

from util import fd_grad, rel_err

POTENTIALS = [Quadratic, DoubleWell, LogSumExpWells, lambda d: NeuralPotential(d, hidden_layers=2, hidden_width=4)]


def params_for(model, seed=0):
    p = ParamVector()
    init = model.initial(seed) if model.kind == "neural" else model.initial()
    p.add(model.segment, init + np.random.default_rng(seed).normal(scale=0.5, size=len(init)))
    return p


class TestPotentials:
    @pytest.mark.parametrize("make", POTENTIALS)
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_gradient_matches_value(self, make, d):
        model = make(d)
        p = params_for(model, d)
        x = np.random.default_rng(d).normal(size=(5, d))
        g = potential_gradient(model, x, p)
        for i in range(5):
            fd = fd_grad(lambda v: float(potential_value(model, v[None, :], p)[0]), x[i], h=1e-5)
            np.testing.assert_allclose(g[i], fd, rtol=1e-7, atol=1e-9)

    @pytest.mark.parametrize("make", POTENTIALS)
    def test_parameter_gradient(self, make):
        model = make(2)
        p = params_for(model, 1)
        x = np.random.default_rng(2).normal(size=(6, 2))

        def loss(b):
            return ad.vsum(ad.square(model.grad(b, x)))

        _, g = ad.value_and_grad(loss, p)
        fd = fd_grad(lambda v: ad.forward_eval(loss, p.with_values(v)), p.values, h=1e-5)
        assert rel_err(g, fd) < 1e-6

    def test_quadratic_closed_form(self):
        model = Quadratic(2)
        p = ParamVector()
        p.add("psi", [2.0, 3.0, -1.0, -1.0])
        x = np.array([[1.0, 2.0]])
        assert potential_value(model, x, p)[0] == pytest.approx(0.5 * (2 + 12) - 3)
        np.testing.assert_allclose(potential_gradient(model, x, p), [[1.0, 5.0]])

    def test_doublewell_closed_form(self):
        model = DoubleWell(2)
        p = ParamVector()
        p.add("psi", [1.0, 1.0, -1.5, -1.5])
        x = np.array([[1.0, 1.0]])
        assert potential_value(model, x, p)[0] == pytest.approx(0.25 * 4 - 1.5)
        np.testing.assert_allclose(potential_gradient(model, x, p), [[2 * 1 - 1.5, 2 * 1 - 1.5]])

    def test_lse_wells_symmetric_minima(self):
        model = LogSumExpWells(3)
        p = ParamVector()
        p.add("psi", [1.0] * 3 + [-1.0] * 3)
        g = potential_gradient(model, np.array([[-1.0] * 3, [1.0] * 3, [0.0] * 3]), p)
        # at a well centre only the other well's exp(-12) tail pulls
        tail = 2 * (-2.0) / (1 + np.exp(12.0))
        np.testing.assert_allclose(g, [[tail] * 3, [-tail] * 3, [0.0] * 3], rtol=1e-12, atol=1e-15)

    def test_lse_wells_far_field_stable(self):
        model = LogSumExpWells(2)
        p = ParamVector()
        p.add("psi", model.initial())
        x = np.array([[300.0, -300.0]])
        assert np.all(np.isfinite(potential_value(model, x, p)))
        assert np.all(np.isfinite(potential_gradient(model, x, p)))

    @pytest.mark.parametrize("model", [Quadratic(2), DoubleWell(2), LogSumExpWells(2)])
    def test_initial_point_not_stationary(self, model):
        """Every structured parameter must receive gradient through grad Psi at the initial values."""
        p = ParamVector()
        p.add("psi", model.initial())
        x, c = np.random.default_rng(0).normal(size=(2, 20, 2))
        _, g = ad.value_and_grad(lambda b: ad.vsum(ad.mul(model.grad(b, x), c)), p)
        assert np.all(np.abs(g) > 1e-3)

    def test_dimension_checked(self):
        model = Quadratic(2)
        p = ParamVector()
        p.add("psi", model.initial())
        with pytest.raises(DimensionMismatch):
            potential_value(model, np.zeros((3, 3)), p)

    def test_names(self):
        assert Quadratic(2).names() == [f"theta_psi_{i}" for i in range(1, 5)]
        assert LogSumExpWells(2).names() == ["theta_psi_1_1", "theta_psi_1_2", "theta_psi_2_1", "theta_psi_2_2"]


class TestDiffusion:
    def test_isotropic(self):
        model = IsotropicDiffusion(3)
        p = ParamVector()
        p.add("diff", [0.3])
        np.testing.assert_array_equal(diffusion_matrix(model, p), 0.3 * np.eye(3))

    def test_full_is_symmetrised(self):
        model = FullDiffusion(2)
        p = ParamVector()
        p.add("diff", [0.1, 0.4, -0.2, 0.2])
        np.testing.assert_allclose(diffusion_matrix(model, p), [[0.1, 0.1], [0.1, 0.2]])
        assert model.named(p.segment("diff"))["theta_D_12"] == pytest.approx(0.1)

    def test_full_initial_positive_definite(self):
        dyn = DynamicsModel(Quadratic(3), FullDiffusion(3))
        p = ParamVector()
        dyn.add_params(p)
        assert min_eigenvalue(dyn, p) == pytest.approx(0.5)


class TestDynamicsModel:
    @pytest.mark.parametrize("pot", ["quadratic", "doublewell", "lse_wells", "neural"])
    @pytest.mark.parametrize("diff", ["isotropic", "full"])
    def test_round_trip(self, pot, diff):
        spec = {"potential": pot, "diffusion": diff, "dim": 2}
        dyn = DynamicsModel.from_dict(spec)
        assert DynamicsModel.from_dict(dyn.to_dict()) == dyn

    def test_named_values(self):
        dyn = DynamicsModel(Quadratic(2), IsotropicDiffusion(2))
        p = ParamVector()
        dyn.add_params(p)
        named = dyn.named_values(p)
        assert list(named) == ["theta_D", "theta_psi_1", "theta_psi_2", "theta_psi_3", "theta_psi_4"]
        assert named["theta_D"] == 0.5

    def test_neural_has_no_named_potential(self):
        dyn = DynamicsModel(NeuralPotential(2), IsotropicDiffusion(2))
        p = ParamVector()
        dyn.add_params(p)
        assert list(dyn.named_values(p)) == ["theta_D"]

    def test_constant_offset_invisible_to_gradient(self):
        """Adding a constant to the potential leaves grad Psi unchanged."""
        model = NeuralPotential(2, hidden_layers=1, hidden_width=3)
        p = params_for(model)
        x = np.random.default_rng(0).normal(size=(4, 2))
        g0 = potential_gradient(model, x, p)
        q = p.copy()
        q.values[-1] += 5.0  # output bias
        np.testing.assert_array_equal(potential_gradient(model, x, q), g0)
        np.testing.assert_allclose(potential_value(model, x, q) - potential_value(model, x, p), 5.0)
