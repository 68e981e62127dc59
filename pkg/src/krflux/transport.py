"""Time-indexed monotone triangular transport maps.

Component k of the map is

    S_k(x, t) = f_k(x_1..x_{k-1}, 0, t) + int_0^{x_k} softplus(d_k f_k(x_1..x_{k-1}, y, t)) dy

with one tanh network f_k per component and the integral done by composite
Simpson on per-sample nodes. The pullback of a standard normal through S
gives the density trajectory rho(x, t); the adjugate form of the mass flux
rho * v avoids forming determinants or inverses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Bound, DimensionMismatch, Mat, ParamVector, Tape
from .networks import MlpHandle, MlpSpec, init_params, mlp_jet

LOG_2PI = float(np.log(2.0 * np.pi))


class OddPartitionCount(ValueError):
    pass


class BracketFailure(RuntimeError):
    pass


def simpson_weights(n: int) -> np.ndarray:
    if n < 2 or n % 2:
        raise OddPartitionCount(f"Simpson's rule needs an even partition count >= 2, got {n}")
    w = np.ones(n + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w


def simpson_0_to_x(f, x, n: int = 20):
    """Composite Simpson estimate of the signed integral of f from 0 to x.

    ``f`` maps an array of nodes (..., n + 1) to integrand values of the same
    shape; it may return tape variables. ``x`` may be a scalar or an array.
    """
    w = simpson_weights(n)
    x = np.asarray(x, dtype=np.float64)
    nodes = x[..., None] * (np.arange(n + 1) / n)
    vals = f(nodes)
    return ad.mul(ad.vsum(ad.mul(vals, w), axis=-1), x / (3.0 * n))


@dataclass(frozen=True)
class ReferenceDensity:
    """Standard normal on R^d."""

    dim: int

    def log_density(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        return -0.5 * self.dim * LOG_2PI - 0.5 * np.sum(z * z, axis=-1)


@dataclass(frozen=True)
class TriangularMapModel:
    dim: int
    components: tuple[MlpHandle, ...]
    n_quad: int = 20

    def __post_init__(self):
        if len(self.components) != self.dim:
            raise DimensionMismatch("one network per component is required")
        for k, h in enumerate(self.components):
            if h.spec.input_dim != k + 2:
                raise DimensionMismatch(f"component {k + 1} must read {k + 1} coordinates and time")
        simpson_weights(self.n_quad)

    @classmethod
    def build(cls, dim: int, hidden_layers: int = 5, hidden_width: int = 5,
              n_quad: int = 20, prefix: str = "map") -> "TriangularMapModel":
        comps = tuple(MlpHandle(MlpSpec(k + 2, hidden_layers, hidden_width), f"{prefix}.f{k + 1}")
                      for k in range(dim))
        return cls(dim, comps, n_quad)

    def add_params(self, params: ParamVector, seed: int) -> None:
        for k, h in enumerate(self.components):
            params.add(h.segment, init_params(h.spec, seed + 7919 * k))

    def to_dict(self) -> dict:
        spec = self.components[0].spec
        return {"dim": self.dim, "hidden_layers": spec.hidden_layers,
                "hidden_width": spec.hidden_width, "n_quad": self.n_quad,
                "prefix": self.components[0].segment.rsplit(".", 1)[0]}

    @classmethod
    def from_dict(cls, data: dict) -> "TriangularMapModel":
        return cls.build(data["dim"], data["hidden_layers"], data["hidden_width"],
                         data["n_quad"], data.get("prefix", "map"))


@dataclass
class MapJet:
    """Batched map quantities at M points; lists are indexed by component."""

    S: list
    log_diag: list
    jac: Mat | None = None
    dSdt: list | None = None
    grad_log_diag: list | None = None

    def log_density(self):
        """log rho = log eta(S) + sum_k log g(d_k f_k)."""
        d = len(self.S)
        acc = -0.5 * d * LOG_2PI
        for s, ld in zip(self.S, self.log_diag):
            acc = ad.add(ad.sub(acc, ad.mul(0.5, ad.square(s))), ld)
        return acc

    def log_reference(self):
        acc = -0.5 * len(self.S) * LOG_2PI
        for s in self.S:
            acc = ad.sub(acc, ad.mul(0.5, ad.square(s)))
        return acc

    def grad_log_density(self) -> list:
        """d/dx_j log rho = -sum_k S_k dS_k/dx_j + sum_k d/dx_j log g(d_k f_k)."""
        d = len(self.S)
        out = []
        for j in range(d):
            acc = 0.0
            for k in range(j, d):
                acc = ad._add0(acc, ad._neg0(ad._mul0(self.S[k], self.jac[k, j])))
                acc = ad._add0(acc, ad.getitem(self.grad_log_diag[k], j))
            out.append(acc)
        return out

    def mass_flux(self) -> list:
        """rho v = -eta(S) adj(grad S) dS/dt."""
        eta = ad.exp(self.log_reference())
        adj_dt = ad.adjugate(self.jac).matvec(self.dSdt)
        return [ad.neg(ad.mul(eta, v)) for v in adj_dt]


def _as_batch(x, t, dim: int):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != dim:
        raise DimensionMismatch(f"expected points of dimension {dim}, got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],)).copy()
    return x2, t, single


def _component(p: Bound, model: TriangularMapModel, c: int, x: np.ndarray, t: np.ndarray, order: int):
    """S_c and friends for component c (0-based) at points x (M, >= c+1).

    Quadrature nodes are laid out node-major, so per-node arrays are (n+1, M).
    """
    h = model.components[c]
    n = model.n_quad
    m = x.shape[0]
    w = simpson_weights(n)[:, None]
    xc = x[:, c]
    u = np.empty((n + 1, m, c + 2))
    u[:, :, :c] = x[None, :, :c]
    u[:, :, c] = (np.arange(n + 1) / n)[:, None] * xc[None, :]
    u[:, :, c + 1] = t[None, :]
    u = u.reshape((n + 1) * m, c + 2)
    if order == 1:
        f, df, _ = mlp_jet(p, h, u, [c])
        a = ad.reshape(df, (n + 1, m))
    else:
        f, df, d2f = mlp_jet(p, h, u, list(range(c + 2)), second=c)
        d1 = ad.reshape(df, (c + 2, n + 1, m))
        d2 = ad.reshape(d2f, (c + 2, n + 1, m))
        a = ad.getitem(d1, c)
    f0 = ad.getitem(f, slice(0, m))
    scale = xc / (3.0 * n)
    s_c = ad.add(f0, ad.mul(ad.vsum(ad.mul(ad.softplus(a), w), axis=0), scale))
    a_end = ad.getitem(a, n)
    log_diag = ad.log_softplus(a_end)
    if order == 1:
        return s_c, log_diag, None
    q = ad.mul(ad.sigmoid(a), w)
    acc = ad.vsum(ad.mul(q, d2), axis=1)
    row = ad.add(ad.getitem(d1, (slice(None), 0)), ad.mul(acc, scale))
    # d/da log softplus(a) = sigmoid(a) / softplus(a)
    ratio = ad.exp(ad.sub(ad.neg(ad.softplus(ad.neg(a_end))), log_diag))
    gld = ad.mul(ratio, ad.getitem(d2, (slice(0, c + 1), n)))
    return s_c, log_diag, (row, ad.exp(log_diag), gld)


def map_jet(p: Bound, model: TriangularMapModel, x, t, order: int = 1) -> MapJet:
    """Evaluate the map at points x (M, d), times t (M,).

    order 1 gives S and the log-diagonal (enough for the likelihood); order 2
    adds the spatial Jacobian, dS/dt and the gradient of the log-diagonal.
    """
    x, t, _ = _as_batch(x, t, model.dim)
    d = model.dim
    S, logd, extras = [], [], []
    for c in range(d):
        s_c, ld, ex = _component(p, model, c, x, t, order)
        S.append(s_c)
        logd.append(ld)
        extras.append(ex)
    if order == 1:
        return MapJet(S, logd)
    entries = []
    for k in range(d):
        row, diag, _ = extras[k]
        for j in range(d):
            if j < k:
                entries.append(ad.getitem(row, j))
            elif j == k:
                entries.append(diag)
            else:
                entries.append(0.0)
    dsdt = [ad.getitem(extras[k][0], k + 1) for k in range(d)]
    return MapJet(S, logd, Mat(d, d, entries), dsdt, [ex[2] for ex in extras])


# ---------------------------------------------------------------------------
# numeric wrappers


def _numeric(model, params, x, t, order):
    xb, tb, single = _as_batch(x, t, model.dim)
    mj = map_jet(Tape().bind(params), model, xb, tb, order)
    return mj, single


def _vec(parts, single):
    arr = np.stack([np.broadcast_to(ad.value_of(p), ad.value_of(parts[0]).shape) for p in parts], axis=-1)
    return arr[0] if single else arr


def eval_component(model: TriangularMapModel, k: int, x, t, params: ParamVector):
    """S_k (k is 1-based) at x holding the first k coordinates."""
    xb = np.atleast_1d(np.asarray(x, dtype=np.float64))
    single = xb.ndim == 1
    xb = xb[None, :] if single else xb
    if xb.shape[1] != k:
        raise DimensionMismatch(f"component {k} reads {k} coordinates, got {xb.shape[1]}")
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],)).copy()
    s, _, _ = _component(Tape().bind(params), model, k - 1, xb, tb, 1)
    out = ad.value_of(s)
    return float(out[0]) if single else out


def eval_map(model, x, t, params):
    mj, single = _numeric(model, params, x, t, 1)
    return _vec(mj.S, single)


def spatial_jacobian(model, x, t, params) -> np.ndarray:
    mj, single = _numeric(model, params, x, t, 2)
    arr = mj.jac.to_array()
    if np.any(np.diagonal(arr, axis1=-2, axis2=-1) <= 0):
        raise ad.NonPositiveDiagonal("map lost monotonicity")
    return arr[0] if single else arr


def log_pullback_density(model, x, t, params):
    mj, single = _numeric(model, params, x, t, 1)
    out = ad.value_of(mj.log_density())
    return float(out[0]) if single else out


def time_derivative(model, x, t, params):
    mj, single = _numeric(model, params, x, t, 2)
    return _vec(mj.dSdt, single)


def velocity(model, x, t, params):
    """v = -(grad S)^{-1} dS/dt by forward substitution."""
    jac = spatial_jacobian(model, x, t, params)
    dsdt = time_derivative(model, x, t, params)
    return _forward_substitute(jac, -dsdt)


def _forward_substitute(lower: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    d = rhs.shape[-1]
    out = np.zeros_like(rhs)
    for i in range(d):
        acc = rhs[..., i] - np.sum(lower[..., i, :i] * out[..., :i], axis=-1)
        out[..., i] = acc / lower[..., i, i]
    return out


def mass_flux(model, x, t, params):
    mj, single = _numeric(model, params, x, t, 2)
    return _vec(mj.mass_flux(), single)


def grad_log_density(model, x, t, params):
    mj, single = _numeric(model, params, x, t, 2)
    return _vec(mj.grad_log_density(), single)


# ---------------------------------------------------------------------------
# inversion and the 1-D oracle


def invert_map(model: TriangularMapModel, z, t, params: ParamVector, tol: float = 1e-10,
               max_iter: int = 200) -> np.ndarray:
    """Solve S(x, t) = z one coordinate at a time (safeguarded Newton on a bracket)."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    m, d = z.shape
    tb = np.broadcast_to(np.asarray(t, dtype=np.float64), (m,)).copy()
    x = np.zeros((m, d))
    for c in range(d):
        def comp(xc):
            pts = x[:, :c + 1].copy()
            pts[:, c] = xc
            s, ld, _ = _component(Tape().bind(params), model, c, pts, tb, 1)
            return ad.value_of(s), np.exp(ad.value_of(ld))

        lo, hi = np.full(m, -1.0), np.full(m, 1.0)
        for _ in range(60):
            s_lo, _ = comp(lo)
            s_hi, _ = comp(hi)
            bad_lo, bad_hi = s_lo > z[:, c], s_hi < z[:, c]
            if not (bad_lo.any() or bad_hi.any()):
                break
            lo = np.where(bad_lo, 2.0 * lo, lo)
            hi = np.where(bad_hi, 2.0 * hi, hi)
        else:
            raise BracketFailure("could not bracket the inverse map")
        xc = 0.5 * (lo + hi)
        for _ in range(max_iter):
            s, ds = comp(xc)
            r = s - z[:, c]
            lo = np.where(r < 0, xc, lo)
            hi = np.where(r >= 0, xc, hi)
            if np.all((np.abs(r) < tol) | (hi - lo < tol)):
                break
            step = xc - r / ds
            outside = (step <= lo) | (step >= hi) | ~np.isfinite(step)
            xc = np.where(outside, 0.5 * (lo + hi), step)
        x[:, c] = xc
    return x


def sample_pullback(model, params, t, n: int, seed: int) -> np.ndarray:
    """Draw from rho(., t) by pushing reference samples through S^{-1}."""
    z = np.random.default_rng(seed).standard_normal((n, model.dim))
    return invert_map(model, z, t, params)


def monotone_rearrangement_1d(source_cdf, reference_cdf, x, lo: float = -50.0, hi: float = 50.0,
                              tol: float = 1e-12) -> np.ndarray:
    """F^{-1}(G(x)) with G the source and F the reference CDF, by bisection."""
    x = np.asarray(x, dtype=np.float64)
    target = np.asarray(source_cdf(x), dtype=np.float64)
    a = np.full(target.shape, lo)
    b = np.full(target.shape, hi)
    if np.any(reference_cdf(a) > target) or np.any(reference_cdf(b) < target):
        raise BracketFailure(f"quantile not bracketed in [{lo}, {hi}]")
    while np.max(b - a) > tol:
        mid = 0.5 * (a + b)
        if np.all((mid == a) | (mid == b)):  # no representable midpoint left
            break
        below = reference_cdf(mid) < target
        a = np.where(below, mid, a)
        b = np.where(below, b, mid)
    out = 0.5 * (a + b)
    return float(out) if out.ndim == 0 else out
