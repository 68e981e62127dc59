"""Potential and diffusion families for the Fokker-Planck drift -grad Psi and tensor D."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Bound, DimensionMismatch, Mat, ParamVector, Tape
from .networks import MlpHandle, MlpSpec, init_params, mlp_jet

log = logging.getLogger(__name__)


def _check(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise DimensionMismatch(f"expected points of dimension {dim}, got {x.shape}")
    return x


@dataclass(frozen=True)
class Quadratic:
    """Psi = 1/2 sum a_i x_i^2 + sum b_i x_i; parameters (a_1..a_d, b_1..b_d)."""

    dim: int
    segment: str = "psi"
    kind = "quadratic"

    @property
    def n_params(self):
        return 2 * self.dim

    def names(self):
        return [f"theta_psi_{i + 1}" for i in range(self.n_params)]

    def initial(self):
        return np.zeros(self.n_params)

    def value(self, p: Bound, x):
        th = p[self.segment]
        a, b = ad.getitem(th, slice(0, self.dim)), ad.getitem(th, slice(self.dim, None))
        return ad.vsum(ad.add(ad.mul(ad.mul(a, 0.5), x * x), ad.mul(b, x)), axis=-1)

    def grad(self, p: Bound, x):
        th = p[self.segment]
        a, b = ad.getitem(th, slice(0, self.dim)), ad.getitem(th, slice(self.dim, None))
        return ad.add(ad.mul(a, x), b)


@dataclass(frozen=True)
class DoubleWell:
    """Psi = 1/4 (sum a_i x_i^2)^2 + 1/2 sum b_i x_i^2; parameters (a, b)."""

    dim: int
    segment: str = "psi"
    kind = "doublewell"

    @property
    def n_params(self):
        return 2 * self.dim

    def names(self):
        return [f"theta_psi_{i + 1}" for i in range(self.n_params)]

    def initial(self):
        # grad Psi is quadratic in a, so a = 0 would be a stationary point
        return np.concatenate([np.full(self.dim, 0.5), np.zeros(self.dim)])

    def _split(self, p):
        th = p[self.segment]
        return ad.getitem(th, slice(0, self.dim)), ad.getitem(th, slice(self.dim, None))

    def value(self, p: Bound, x):
        a, b = self._split(p)
        q = ad.vsum(ad.mul(a, x * x), axis=-1)
        quad = ad.vsum(ad.mul(b, x * x), axis=-1)
        return ad.add(ad.mul(0.25, ad.square(q)), ad.mul(0.5, quad))

    def grad(self, p: Bound, x):
        a, b = self._split(p)
        q = ad.vsum(ad.mul(a, x * x), axis=-1)
        qa = ad.mul(ad.reshape(q, q.shape + (1,)), a)
        return ad.mul(ad.add(qa, b), x)


@dataclass(frozen=True)
class LogSumExpWells:
    """Psi = -log(exp(-|x + c1|^2) + exp(-|x + c2|^2)); parameters (c1, c2)."""

    dim: int
    segment: str = "psi"
    kind = "lse_wells"

    @property
    def n_params(self):
        return 2 * self.dim

    def names(self):
        return [f"theta_psi_{w}_{i + 1}" for w in (1, 2) for i in range(self.dim)]

    def initial(self):
        return np.concatenate([np.full(self.dim, 0.5), np.full(self.dim, -0.5)])

    def _energies(self, p, x):
        th = p[self.segment]
        c1, c2 = ad.getitem(th, slice(0, self.dim)), ad.getitem(th, slice(self.dim, None))
        r1, r2 = ad.add(c1, x), ad.add(c2, x)
        return r1, r2, ad.vsum(ad.square(r1), axis=-1), ad.vsum(ad.square(r2), axis=-1)

    def value(self, p: Bound, x):
        _, _, e1, e2 = self._energies(p, x)
        return ad.neg(ad.logaddexp(ad.neg(e1), ad.neg(e2)))

    def grad(self, p: Bound, x):
        r1, r2, e1, e2 = self._energies(p, x)
        w1 = ad.sigmoid(ad.sub(e2, e1))
        w1 = ad.reshape(w1, w1.shape + (1,))
        return ad.mul(2.0, ad.add(ad.mul(w1, r1), ad.mul(ad.sub(1.0, w1), r2)))


@dataclass(frozen=True)
class NeuralPotential:
    dim: int
    segment: str = "psi"
    hidden_layers: int = 5
    hidden_width: int = 5
    kind = "neural"

    @property
    def handle(self) -> MlpHandle:
        return MlpHandle(MlpSpec(self.dim, self.hidden_layers, self.hidden_width), self.segment)

    @property
    def n_params(self):
        return self.handle.spec.n_params

    def names(self):
        return []

    def initial(self, seed: int = 0):
        return init_params(self.handle.spec, seed)

    def _jet(self, p, x):
        x2 = x.reshape(-1, self.dim)
        f, df, _ = mlp_jet(p, self.handle, x2, list(range(self.dim)))
        return f, df

    def value(self, p: Bound, x):
        f, _ = self._jet(p, x)
        return ad.reshape(f, x.shape[:-1])

    def grad(self, p: Bound, x):
        _, df = self._jet(p, x)
        return ad.reshape(ad.transpose(df), x.shape)


@dataclass(frozen=True)
class IsotropicDiffusion:
    """D = theta_D * I."""

    dim: int
    segment: str = "diff"
    kind = "isotropic"

    @property
    def n_params(self):
        return 1

    def names(self):
        return ["theta_D"]

    def initial(self):
        return np.array([0.5])

    def matrix(self, p: Bound) -> Mat:
        th = ad.getitem(p[self.segment], 0)
        return Mat(self.dim, self.dim, [th if i == j else 0.0 for i in range(self.dim) for j in range(self.dim)])

    def named(self, raw) -> dict:
        return {"theta_D": float(raw[0])}


@dataclass(frozen=True)
class FullDiffusion:
    """D = (Dt + Dt^T) / 2 for a free d x d matrix Dt."""

    dim: int
    segment: str = "diff"
    kind = "full"

    @property
    def n_params(self):
        return self.dim * self.dim

    def names(self):
        return [f"theta_D_{i + 1}{j + 1}" for i in range(self.dim) for j in range(self.dim)]

    def initial(self):
        return (0.5 * np.eye(self.dim)).ravel()

    def matrix(self, p: Bound) -> Mat:
        th = p[self.segment]
        d = self.dim
        entries = []
        for i in range(d):
            for j in range(d):
                if i == j:
                    entries.append(ad.getitem(th, i * d + i))
                else:
                    entries.append(ad.mul(0.5, ad.add(ad.getitem(th, i * d + j), ad.getitem(th, j * d + i))))
        return Mat(d, d, entries)

    def named(self, raw) -> dict:
        m = np.asarray(raw).reshape(self.dim, self.dim)
        sym = 0.5 * (m + m.T)
        return {f"theta_D_{i + 1}{j + 1}": float(sym[i, j]) for i in range(self.dim) for j in range(self.dim)}


POTENTIALS = {"quadratic": Quadratic, "doublewell": DoubleWell, "lse_wells": LogSumExpWells,
              "neural": NeuralPotential}
DIFFUSIONS = {"isotropic": IsotropicDiffusion, "full": FullDiffusion}


@dataclass(frozen=True)
class DynamicsModel:
    potential: object
    diffusion: object
    init_seed: int = field(default=0)

    @property
    def dim(self) -> int:
        return self.potential.dim

    def add_params(self, params: ParamVector, init: dict | None = None) -> None:
        init = init or {}
        pot = self.potential
        pot_init = pot.initial(self.init_seed) if pot.kind == "neural" else pot.initial()
        params.add(pot.segment, init.get("potential", pot_init))
        params.add(self.diffusion.segment, init.get("diffusion", self.diffusion.initial()))

    def named_values(self, params: ParamVector) -> dict[str, float]:
        """Reportable dynamics parameters (diffusion as the symmetrised D)."""
        out = dict(self.diffusion.named(params.segment(self.diffusion.segment)))
        if self.potential.kind != "neural":
            out.update(zip(self.potential.names(), map(float, params.segment(self.potential.segment))))
        return out

    def to_dict(self) -> dict:
        out = {"potential": self.potential.kind, "diffusion": self.diffusion.kind, "dim": self.dim}
        if self.potential.kind == "neural":
            out.update(hidden_layers=self.potential.hidden_layers, hidden_width=self.potential.hidden_width,
                       init_seed=self.init_seed)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "DynamicsModel":
        d = data["dim"]
        if data["potential"] == "neural":
            pot = NeuralPotential(d, hidden_layers=data.get("hidden_layers", 5),
                                  hidden_width=data.get("hidden_width", 5))
        else:
            pot = POTENTIALS[data["potential"]](d)
        return cls(pot, DIFFUSIONS[data["diffusion"]](d), data.get("init_seed", 0))


def min_eigenvalue(model: DynamicsModel, params: ParamVector) -> float:
    mat = model.diffusion.matrix(Tape().bind(params)).to_array()
    return float(np.linalg.eigvalsh(mat).min())


# ---------------------------------------------------------------------------
# numeric wrappers


def potential_value(model, x, params: ParamVector):
    x = _check(x, model.dim)
    return ad.value_of(model.value(Tape().bind(params), x))


def potential_gradient(model, x, params: ParamVector):
    x = _check(x, model.dim)
    return ad.value_of(model.grad(Tape().bind(params), x))


def diffusion_matrix(model, params: ParamVector) -> np.ndarray:
    return model.matrix(Tape().bind(params)).to_array()
