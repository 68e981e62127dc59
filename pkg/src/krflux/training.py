"""Likelihood + flux-residual objective, Adam, and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Bound, NonFiniteValue, ParamVector, Tape
from .dynamics import DynamicsModel, min_eigenvalue
from .sde import SnapshotDataset
from .transport import MapJet, TriangularMapModel, log_pullback_density, map_jet

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    lam: float = 0.1
    pde_sampler: str = "data"  # "data" (importance weights 1/rho) or "uniform" (inflated bounding box)
    inflation: float = 1.5
    n_pde_points: int | None = None  # per snapshot; None -> min(N, 512)
    batch_size: int | None = None  # per snapshot; None -> full batch if N <= 1000 else 256
    shared_batch: bool = False  # reuse the likelihood minibatch as the PDE points
    epochs: int = 3000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.8, 0.999)
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be a finite non-negative number")
        if self.epochs <= 0:
            raise ValueError("epochs must be positive")
        if self.pde_sampler not in ("data", "uniform"):
            raise ValueError("pde_sampler must be 'data' or 'uniform'")
        if self.inflation < 1.0:
            raise ValueError("inflation must be >= 1")
        if self.lr <= 0 or self.eps <= 0 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("invalid optimizer settings")
        for name in ("n_pde_points", "batch_size"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.shared_batch and self.pde_sampler != "data":
            raise ValueError("shared_batch requires the data sampler")

    def batch_for(self, n: int) -> int:
        if self.batch_size is not None:
            return min(self.batch_size, n)
        return n if n <= 1000 else 256

    def pde_for(self, n: int) -> int:
        if self.pde_sampler == "uniform" and self.n_pde_points is not None:
            return self.n_pde_points  # box draws are not limited by the sample count
        return min(n, self.n_pde_points if self.n_pde_points is not None else 512)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "LossConfig":
        return cls(**data)


# ---------------------------------------------------------------------------
# loss terms


def nll_term(p: Bound, map_model: TriangularMapModel, xs, ts):
    """Mean of -log rho over the given points; ``xs`` is a list of (n_i, d) arrays, one per time in ``ts``."""
    x, t = _stack(xs, ts)
    if len(x) == 0:
        raise ValueError("empty likelihood batch")
    mj = map_jet(p, map_model, x, t, order=1)
    return ad.neg(ad.mean(mj.log_density()))


def _stack(xs, ts):
    x = np.concatenate([np.asarray(a, dtype=np.float64).reshape(len(a), -1) for a in xs])
    t = np.concatenate([np.full(len(a), float(ti)) for a, ti in zip(xs, ts)])
    return x, t


def flux_residual(p: Bound, mj: MapJet, dyn: DynamicsModel, x: np.ndarray):
    """Components of rho v + rho grad Psi + D grad rho at the jet's points."""
    d = dyn.dim
    rho = ad.exp(mj.log_density())
    flux = mj.mass_flux()
    glog = mj.grad_log_density()
    gpsi = dyn.potential.grad(p, x)
    dmat = dyn.diffusion.matrix(p)
    out = []
    for i in range(d):
        inner = ad.getitem(gpsi, (slice(None), i))
        for j in range(d):
            inner = ad._add0(inner, ad._mul0(dmat[i, j], glog[j]))
        out.append(ad.add(flux[i], ad.mul(rho, inner)))
    return out


def weighted_square_sum(res, weights):
    acc = 0.0
    for r in res:
        acc = ad._add0(acc, ad.square(r))
    return ad.vsum(ad.mul(acc, weights))


def pde_residual_term(p: Bound, map_model: TriangularMapModel, dyn: DynamicsModel, t, points, weights):
    """sum_j w_j |rho v + rho grad Psi + D grad rho|^2 at (points, t)."""
    points = np.asarray(points, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or not np.all(np.isfinite(points)):
        raise ValueError("points must be finite and weights non-negative")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (len(points),))
    mj = map_jet(p, map_model, points, tt, order=2)
    return weighted_square_sum(flux_residual(p, mj, dyn, points), weights)


def pde_points(dataset: SnapshotDataset, i: int, cfg: LossConfig, seed, map_model=None,
               params: ParamVector | None = None):
    """Integration points and weights for the flux residual at snapshot i."""
    rng = np.random.default_rng(seed)
    x = dataset.samples[i]
    n = cfg.pde_for(len(x))
    if cfg.pde_sampler == "uniform":
        lo, hi = x.min(axis=0), x.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.5 * cfg.inflation * (hi - lo)
        pts = rng.uniform(mid - half, mid + half, size=(n, dataset.dim))
        return pts, np.full(n, float(np.prod(2 * half)) / n)
    pts = x if n == len(x) else x[np.sort(rng.choice(len(x), size=n, replace=False))]
    if map_model is None or params is None:
        raise ValueError("importance weights need the current map")
    return pts, importance_weights(log_pullback_density(map_model, pts, dataset.times[i], params))


def importance_weights(log_rho: np.ndarray) -> np.ndarray:
    """w_j = 1 / (n rho(x_j)), so sum_j w_j h(x_j) estimates the integral of h."""
    log_rho = np.asarray(log_rho, dtype=np.float64)
    return np.exp(-log_rho) / len(log_rho)


@dataclass
class Batch:
    """Points for one loss evaluation, pooled across snapshots."""

    nll_x: np.ndarray
    nll_t: np.ndarray
    pde_x: np.ndarray | None = None
    pde_t: np.ndarray | None = None
    pde_w: np.ndarray | None = None
    shared: bool = False


def draw_batch(dataset: SnapshotDataset, cfg: LossConfig, epoch_seed, map_model=None, params=None) -> Batch:
    ss = np.random.SeedSequence(epoch_seed)
    nll_seed, pde_seed = ss.spawn(2)
    rng = np.random.default_rng(nll_seed)
    xs, ts = [], []
    for x, t in zip(dataset.samples, dataset.times):
        b = cfg.batch_for(len(x))
        xs.append(x if b == len(x) else x[rng.choice(len(x), size=b, replace=False)])
        ts.append(np.full(len(xs[-1]), t))
    nll_x, nll_t = np.concatenate(xs), np.concatenate(ts)
    if cfg.lam == 0:
        return Batch(nll_x, nll_t)
    if cfg.shared_batch:
        return Batch(nll_x, nll_t, nll_x, nll_t, None, shared=True)
    pseeds = pde_seed.spawn(len(dataset))
    px, pt, pw = [], [], []
    for i, t in enumerate(dataset.times):
        pts, w = _pde_draw(dataset, i, cfg, pseeds[i])
        px.append(pts)
        pt.append(np.full(len(pts), t))
        pw.append(w)
    out = Batch(nll_x, nll_t, np.concatenate(px), np.concatenate(pt), None)
    if cfg.pde_sampler == "uniform":
        out.pde_w = np.concatenate(pw)
    return out


def _pde_draw(dataset, i, cfg, seed):
    """Points without weights for the data sampler (weights come from the live map)."""
    if cfg.pde_sampler == "uniform":
        return pde_points(dataset, i, cfg, seed)
    rng = np.random.default_rng(seed)
    x = dataset.samples[i]
    n = cfg.pde_for(len(x))
    return (x if n == len(x) else x[np.sort(rng.choice(len(x), size=n, replace=False))]), None


def _group_weights(log_rho: np.ndarray, t: np.ndarray) -> np.ndarray:
    w = np.empty_like(log_rho)
    for ti in np.unique(t):
        idx = t == ti
        w[idx] = importance_weights(log_rho[idx])
    return w


def batch_loss(p: Bound, map_model, dyn, batch: Batch, lam: float):
    """(total, nll, pde) tape variables for a drawn batch."""
    if batch.shared:
        mj = map_jet(p, map_model, batch.nll_x, batch.nll_t, order=2)
        logr = mj.log_density()
        nll = ad.neg(ad.mean(logr))
        w = _group_weights(ad.value_of(logr), batch.nll_t)
        pde = weighted_square_sum(flux_residual(p, mj, dyn, batch.nll_x), w)
        return ad.add(nll, ad.mul(lam, pde)), nll, pde
    mj = map_jet(p, map_model, batch.nll_x, batch.nll_t, order=1)
    nll = ad.neg(ad.mean(mj.log_density()))
    if batch.pde_x is None:
        return nll, nll, None
    mj2 = map_jet(p, map_model, batch.pde_x, batch.pde_t, order=2)
    w = batch.pde_w
    if w is None:
        w = _group_weights(ad.value_of(mj2.log_density()), batch.pde_t)
    pde = weighted_square_sum(flux_residual(p, mj2, dyn, batch.pde_x), w)
    return ad.add(nll, ad.mul(lam, pde)), nll, pde


def total_loss(p: Bound, map_model, dyn, dataset, params: ParamVector, cfg: LossConfig, epoch_seed):
    """nll + lam * sum over snapshots of the flux residual, on the epoch's batch."""
    batch = draw_batch(dataset, cfg, epoch_seed, map_model, params)
    return batch_loss(p, map_model, dyn, batch, cfg.lam)[0]


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)

    def to_dict(self) -> dict:
        return {"m": self.m.tolist(), "v": self.v.tolist(), "step": self.step}

    @classmethod
    def from_dict(cls, data) -> "AdamState":
        return cls(np.asarray(data["m"], dtype=np.float64), np.asarray(data["v"], dtype=np.float64),
                   int(data["step"]))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float = 1e-3,
              betas=(0.8, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    if not (len(params) == len(grads) == len(state.m)):
        raise ValueError("parameter, gradient and moment lengths differ")
    b1, b2 = betas
    step = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    return params - lr * mhat / (np.sqrt(vhat) + eps), AdamState(m, v, step)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainReport:
    params: ParamVector
    adam: AdamState
    epoch: int
    loss: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)
    pde: list[float] = field(default_factory=list)
    theta2: list[dict] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"epochs_run": self.epoch, "loss": self.loss, "nll": self.nll, "pde": self.pde,
                "theta2": self.theta2, "final_theta2": self.theta2[-1] if self.theta2 else {},
                "config": self.config, "warnings": self.warnings, "params": self.params.to_dict()}


class TrainingAborted(NonFiniteValue):
    def __init__(self, msg, report: TrainReport):
        super().__init__(msg)
        self.report = report


def epoch_seed(seed: int, epoch: int) -> list[int]:
    return [int(seed), int(epoch)]


def fit(dataset: SnapshotDataset, map_model: TriangularMapModel, dyn: DynamicsModel, cfg: LossConfig,
        params: ParamVector | None = None, resume: TrainReport | None = None, callback=None) -> TrainReport:
    """Jointly optimize map and dynamics parameters with Adam.

    ``resume`` continues a previous report (its params, optimizer state and
    curves) up to ``cfg.epochs`` total epochs.
    """
    if dataset.dim != map_model.dim or dataset.dim != dyn.dim:
        raise ad.DimensionMismatch("dataset, map and dynamics dimensions differ")
    if resume is not None:
        rep = TrainReport(resume.params.copy(), AdamState(resume.adam.m.copy(), resume.adam.v.copy(),
                                                          resume.adam.step),
                          resume.epoch, list(resume.loss), list(resume.nll), list(resume.pde),
                          list(resume.theta2), cfg.to_dict(), list(resume.warnings))
    else:
        if params is None:
            params = ParamVector()
            map_model.add_params(params, cfg.seed)
            dyn.add_params(params)
        params.validate()
        rep = TrainReport(params.copy(), AdamState.zeros(len(params)), 0, config=cfg.to_dict())
    pd_warned = False
    while rep.epoch < cfg.epochs:
        seed = epoch_seed(cfg.seed, rep.epoch)
        batch = draw_batch(dataset, cfg, seed, map_model, rep.params)
        tape = Tape()
        p = tape.bind(rep.params)
        total, nll, pde = batch_loss(p, map_model, dyn, batch, cfg.lam)
        value = float(ad.value_of(total))
        grads = p.gradient(total)
        if not (math.isfinite(value) and np.all(np.isfinite(grads))):
            raise TrainingAborted(f"non-finite loss or gradient at epoch {rep.epoch}", rep)
        new_values, rep.adam = adam_step(rep.adam, rep.params.values, grads, cfg.lr, cfg.betas, cfg.eps)
        rep.params = rep.params.with_values(new_values)
        rep.epoch += 1
        rep.loss.append(value)
        rep.nll.append(float(ad.value_of(nll)))
        rep.pde.append(float(ad.value_of(pde)) if pde is not None else 0.0)
        rep.theta2.append(dyn.named_values(rep.params))
        if min_eigenvalue(dyn, rep.params) <= 0:
            if not pd_warned:
                msg = f"diffusion tensor not positive definite at epoch {rep.epoch}"
                log.warning(msg)
                rep.warnings.append(msg)
                pd_warned = True
        else:
            pd_warned = False
        if callback is not None:
            callback(rep)
    return rep
