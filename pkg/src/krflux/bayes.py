"""Mean-field Gaussian variational inference over map and dynamics parameters."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteValue, ParamVector, Tape, Var
from .dynamics import DynamicsModel
from .sde import SnapshotDataset
from .training import AdamState, LossConfig, TrainReport, adam_step, importance_weights, weighted_square_sum
from .transport import TriangularMapModel, map_jet

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class MeanFieldPosterior:
    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have equal length")
        if not (np.all(np.isfinite(self.mu)) and np.all(np.isfinite(self.log_sigma))):
            raise NonFiniteValue("posterior parameters must be finite")

    @classmethod
    def around(cls, values) -> "MeanFieldPosterior":
        """Centred at values with stddev 0.01 (|value| + 0.1)."""
        values = np.asarray(values, dtype=np.float64)
        return cls(values.copy(), np.log(0.01 * (np.abs(values) + 0.1)))

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)


@dataclass
class LikelihoodScales:
    log_sigma1: float = 0.0
    log_sigma2: float = 0.0


def kl_diag_gaussians(q: MeanFieldPosterior | tuple, prior_mu=0.0, prior_sigma=1.0):
    """KL(q || prior) for diagonal Gaussians, summed over coordinates.

    ``q`` may be a MeanFieldPosterior or a (mu, log_sigma) pair of tape variables.
    """
    mu, log_sig = (q.mu, q.log_sigma) if isinstance(q, MeanFieldPosterior) else q
    prior_mu = np.asarray(prior_mu, dtype=np.float64)
    prior_sigma = np.asarray(prior_sigma, dtype=np.float64)
    if isinstance(q, MeanFieldPosterior):
        shape = np.broadcast_shapes(q.mu.shape, prior_mu.shape, prior_sigma.shape)
        if shape != q.mu.shape:
            raise ValueError("prior shape does not match the posterior")
    var_ratio = ad.exp(ad.mul(2.0, ad.sub(log_sig, np.log(prior_sigma))))
    maha = ad.div(ad.square(ad.sub(mu, prior_mu)), prior_sigma ** 2)
    terms = ad.sub(ad.add(var_ratio, maha), ad.add(1.0, ad.mul(2.0, ad.sub(log_sig, np.log(prior_sigma)))))
    out = ad.mul(0.5, ad.vsum(terms))
    return float(out) if not isinstance(out, Var) else out


def reparam_sample(q: MeanFieldPosterior | tuple, seed):
    """mu + exp(log_sigma) * eps with eps ~ N(0, I)."""
    mu, log_sig = (q.mu, q.log_sigma) if isinstance(q, MeanFieldPosterior) else q
    eps = np.random.default_rng(seed).standard_normal(np.shape(ad.value_of(mu)))
    return ad.add(mu, ad.mul(ad.exp(log_sig), eps))


def gaussian_nll(x, mean, log_sigma):
    """-log N(x | mean, sigma^2)."""
    z = ad.mul(ad.sub(x, mean), ad.exp(ad.neg(log_sigma)))
    return ad.add(ad.add(ad.mul(0.5, ad.square(z)), log_sigma), HALF_LOG_2PI)


class SegmentView:
    """Named slices of a flat tape variable, mimicking a bound ParamVector."""

    def __init__(self, theta, segments: dict[str, tuple[int, int]]):
        self.theta = theta
        self.segments = segments
        self._cache = {}

    def __getitem__(self, name):
        if name not in self._cache:
            off, n = self.segments[name]
            self._cache[name] = ad.getitem(self.theta, slice(off, off + n))
        return self._cache[name]


def split_params(params: ParamVector, map_model: TriangularMapModel) -> tuple[ParamVector, ParamVector]:
    """(Theta_1, Theta_2): map segments and everything else."""
    map_names = {h.segment for h in map_model.components}
    p1, p2 = ParamVector(), ParamVector()
    for name, (off, n) in sorted(params.segments.items(), key=lambda kv: kv[1][0]):
        (p1 if name in map_names else p2).add(name, params.values[off:off + n])
    return p1, p2


@dataclass
class FrozenFlux:
    """Map-dependent residual pieces at fixed points under a frozen Theta_1."""

    x: np.ndarray
    t: np.ndarray  # (M,)
    flux: np.ndarray  # (M, d)
    rho: np.ndarray  # (M,)
    glog: np.ndarray  # (M, d)
    weights: np.ndarray  # (M,)

    @classmethod
    def build(cls, map_model, theta1: ParamVector, dataset: SnapshotDataset, cfg: LossConfig, seed):
        rng = np.random.default_rng(seed)
        xs, ts = [], []
        for x, t in zip(dataset.samples, dataset.times):
            n = cfg.pde_for(len(x))
            xs.append(x if n == len(x) else x[np.sort(rng.choice(len(x), size=n, replace=False))])
            ts.append(np.full(len(xs[-1]), t))
        x, t = np.concatenate(xs), np.concatenate(ts)
        mj = map_jet(Tape().bind(theta1), map_model, x, t, order=2)
        logr = ad.value_of(mj.log_density())
        w = np.empty_like(logr)
        for ti in np.unique(t):
            idx = t == ti
            w[idx] = importance_weights(logr[idx])
        flux = np.stack([ad.value_of(f) for f in mj.mass_flux()], axis=-1)
        glog = np.stack([np.broadcast_to(ad.value_of(g), logr.shape) for g in mj.grad_log_density()], axis=-1)
        return cls(x, t, flux, np.exp(logr), glog, w)

    def loss(self, p, dyn: DynamicsModel):
        """sum_j w_j |flux + rho (grad Psi + D grad log rho)|^2 as a function of Theta_2."""
        d = dyn.dim
        gpsi = dyn.potential.grad(p, self.x)
        dmat = dyn.diffusion.matrix(p)
        res = []
        for i in range(d):
            inner = ad.getitem(gpsi, (slice(None), i))
            for j in range(d):
                inner = ad._add0(inner, ad._mul0(dmat[i, j], self.glog[:, j]))
            res.append(ad.add(self.flux[:, i], ad.mul(self.rho, inner)))
        return weighted_square_sum(res, self.weights)


@dataclass
class BayesConfig:
    epochs: int = 500
    lr: float = 1e-3
    betas: tuple[float, float] = (0.8, 0.999)
    eps: float = 1e-8
    n_mc: int = 1
    seed: int = 0
    n_pilot: int = 8  # draws used to initialise the likelihood scales
    prior_sigma1: float = 1.0  # N(0, s^2) prior on the map weights
    prior_sigma2: float = 1.0  # N(0, s^2) prior on the dynamics parameters

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if self.epochs <= 0 or self.n_mc <= 0 or self.lr <= 0 or self.n_pilot < 2:
            raise ValueError("epochs, n_mc and lr must be positive and n_pilot at least 2")
        if self.prior_sigma1 <= 0 or self.prior_sigma2 <= 0:
            raise ValueError("prior widths must be positive")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out


@dataclass
class ElboState:
    """Running minima of the two discrepancy statistics."""

    nll_min: float = math.inf
    pde_min: float = math.inf


def pack_variational(q1: MeanFieldPosterior, q2: MeanFieldPosterior, scales: LikelihoodScales) -> ParamVector:
    v = ParamVector()
    v.add("q1.mu", q1.mu)
    v.add("q1.log_sigma", q1.log_sigma)
    v.add("q2.mu", q2.mu)
    v.add("q2.log_sigma", q2.log_sigma)
    v.add("scales", [scales.log_sigma1, scales.log_sigma2])
    return v


def elbo_loss(p, map_model, dyn, theta1: ParamVector, theta2: ParamVector, batch_x, batch_t,
              frozen: FrozenFlux, state: ElboState, lam: float, seed, n_mc: int = 1,
              prior_sigma=(1.0, 1.0), update_state: bool = True):
    """Negative ELBO on a variational ParamVector bound as ``p``.

    Returns (loss, parts) where parts holds the detached pieces. The running
    minima in ``state`` are updated with the observed statistics first, so both
    discrepancies are non-negative.
    """
    q1 = (p["q1.mu"], p["q1.log_sigma"])
    q2 = (p["q2.mu"], p["q2.log_sigma"])
    sc = p["scales"]
    ls1, ls2 = ad.getitem(sc, 0), ad.getitem(sc, 1)
    kl1 = kl_diag_gaussians(q1, 0.0, prior_sigma[0])
    kl2 = kl_diag_gaussians(q2, 0.0, prior_sigma[1])
    seeds = np.random.SeedSequence(seed).spawn(2 * n_mc)
    lik1, lik2 = 0.0, 0.0
    nll_vals, pde_vals = [], []
    for s in range(n_mc):
        th1 = SegmentView(reparam_sample(q1, seeds[2 * s]), theta1.segments)
        th2 = SegmentView(reparam_sample(q2, seeds[2 * s + 1]), theta2.segments)
        mj = map_jet(th1, map_model, batch_x, batch_t, order=1)
        nll = ad.neg(ad.mean(mj.log_density()))
        pde = frozen.loss(th2, dyn)
        nll_vals.append(float(ad.value_of(nll)))
        pde_vals.append(float(ad.value_of(pde)))
        nmin = min(state.nll_min, nll_vals[-1])
        pmin = min(state.pde_min, pde_vals[-1])
        lik1 = ad.add(lik1, gaussian_nll(ad.sub(nll, nmin), 0.0, ls1))
        lik2 = ad.add(lik2, gaussian_nll(pde, pmin, ls2))
        if update_state:
            state.nll_min, state.pde_min = nmin, pmin
    lik1 = ad.mul(lik1, 1.0 / n_mc)
    lik2 = ad.mul(lik2, 1.0 / n_mc)
    loss = ad.add(ad.add(kl1, lik1), ad.mul(lam, ad.add(kl2, lik2)))
    parts = {"kl1": float(ad.value_of(kl1)), "kl2": float(ad.value_of(kl2)),
             "lik1": float(ad.value_of(lik1)), "lik2": float(ad.value_of(lik2)),
             "nll": float(np.mean(nll_vals)), "pde": float(np.mean(pde_vals))}
    return loss, parts


@dataclass
class BayesReport:
    variational: ParamVector
    names: list[str]
    elbo: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    deterministic: dict = field(default_factory=dict)

    def posterior(self) -> dict:
        mu = self.variational.segment("q2.mu")
        sd = np.exp(self.variational.segment("q2.log_sigma"))
        return {n: {"mean": float(m), "std": float(s)} for n, m, s in zip(self.names, mu, sd)}

    def to_dict(self) -> dict:
        sc = self.variational.segment("scales")
        return {"posterior": self.posterior(), "elbo_loss": self.elbo,
                "sigma1": float(np.exp(sc[0])), "sigma2": float(np.exp(sc[1])),
                "deterministic": self.deterministic, "config": self.config, "seeds": self.seeds,
                "variational": self.variational.to_dict()}


def theta2_names(dyn: DynamicsModel, theta2: ParamVector) -> list[str]:
    """Names for each raw Theta_2 entry, in vector order."""
    names = []
    for name, _ in sorted(theta2.segments.items(), key=lambda kv: kv[1][0]):
        if name == dyn.potential.segment:
            pot = dyn.potential.names() or [f"psi_{i + 1}" for i in range(dyn.potential.n_params)]
            names.extend(pot)
        else:
            names.extend(dyn.diffusion.names())
    return names


def pilot_scales(map_model, dyn, theta1, theta2, q1, q2, frozen, state: ElboState, batch, lam, seed, n_pilot,
                 prior=(1.0, 1.0)) -> tuple[LikelihoodScales, tuple[np.ndarray, np.ndarray]]:
    """Starting likelihood scales from pilot draws of the initial posterior.

    Evaluates the ELBO discrepancies for ``n_pilot`` draws (updating the running
    minima in ``state``) and returns log-scales at the RMS discrepancy, the
    maximiser of each Gaussian pseudo-likelihood, plus the discrepancies.
    """
    var = pack_variational(q1, q2, LikelihoodScales())
    nll_vals, pde_vals = [], []
    for k in range(n_pilot):
        x, t = batch(np.random.default_rng(np.random.SeedSequence([seed, 4, k])))
        _, parts = elbo_loss(Tape().bind(var), map_model, dyn, theta1, theta2, x, t, frozen, state, lam,
                             [seed, 5, k], 1, prior)
        nll_vals.append(parts["nll"])
        pde_vals.append(parts["pde"])
    d1 = np.array(nll_vals) - state.nll_min
    d2 = np.array(pde_vals) - state.pde_min
    floor = 1e-12  # all-equal pilots would give log(0)
    log_rms = [float(np.log(max(np.sqrt(np.mean(d ** 2)), floor))) for d in (d1, d2)]
    return LikelihoodScales(*log_rms), (d1, d2)


def bayes_fit(dataset: SnapshotDataset, map_model: TriangularMapModel, dyn: DynamicsModel,
              det: TrainReport, loss_cfg: LossConfig, cfg: BayesConfig, callback=None) -> BayesReport:
    """Variational refinement started from a deterministic fit."""
    theta1, theta2 = split_params(det.params, map_model)
    frozen = FrozenFlux.build(map_model, theta1, dataset, loss_cfg, [cfg.seed, 1])
    state = ElboState(pde_min=float(ad.value_of(frozen.loss(Tape().bind(theta2), dyn))))
    q1, q2 = MeanFieldPosterior.around(theta1.values), MeanFieldPosterior.around(theta2.values)
    prior = (cfg.prior_sigma1, cfg.prior_sigma2)

    def batch(rng):
        xs, ts = [], []
        for x, t in zip(dataset.samples, dataset.times):
            b = loss_cfg.batch_for(len(x))
            xs.append(x if b == len(x) else x[rng.choice(len(x), size=b, replace=False)])
            ts.append(np.full(len(xs[-1]), t))
        return np.concatenate(xs), np.concatenate(ts)

    scales, _ = pilot_scales(map_model, dyn, theta1, theta2, q1, q2, frozen, state, batch, loss_cfg.lam,
                             cfg.seed, cfg.n_pilot, prior)
    var = pack_variational(q1, q2, scales)
    adam = AdamState.zeros(len(var))
    rep = BayesReport(var, theta2_names(dyn, theta2), config={"bayes": cfg.to_dict(), "loss": loss_cfg.to_dict()},
                      seeds={"seed": cfg.seed, "deterministic_seed": loss_cfg.seed},
                      deterministic=dict(zip(theta2_names(dyn, theta2), map(float, theta2.values))))
    for epoch in range(cfg.epochs):
        x, t = batch(np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, epoch])))
        tape = Tape()
        p = tape.bind(rep.variational)
        loss, _ = elbo_loss(p, map_model, dyn, theta1, theta2, x, t, frozen, state, loss_cfg.lam,
                            [cfg.seed, 3, epoch], cfg.n_mc, prior)
        value = float(ad.value_of(loss))
        grads = p.gradient(loss)
        if not (math.isfinite(value) and np.all(np.isfinite(grads))):
            raise NonFiniteValue(f"non-finite ELBO at step {epoch}")
        new, adam = adam_step(adam, rep.variational.values, grads, cfg.lr, cfg.betas, cfg.eps)
        rep.variational = rep.variational.with_values(new)
        rep.elbo.append(value)
        if callback is not None:
            callback(rep)
    return rep
