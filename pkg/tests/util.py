"""Shared helpers for the test suite: finite differences and exact linear maps."""

import numpy as np

from krflux.autodiff import ParamVector
from krflux.networks import MlpSpec
from krflux.transport import TriangularMapModel


def fd_grad(f, x, h=1e-4):
    """Central differences of scalar f at the flat array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), floor))


def inv_softplus(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


def linear_map(mean, cov, drift=None):
    """Exact map pulling N(0, I) back to N(mean + t * drift, cov) with linear component networks.

    S(x, t) = A (x - mean - t drift) with A = chol(cov)^{-1} lower triangular.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    d = len(mean)
    drift = np.zeros(d) if drift is None else np.asarray(drift, dtype=float)
    a = np.linalg.inv(np.linalg.cholesky(np.atleast_2d(cov)))
    model = TriangularMapModel.build(d, hidden_layers=0)
    params = ParamVector()
    for k, h in enumerate(model.components):
        w = np.zeros(k + 2)
        w[:k] = a[k, :k]
        w[k] = inv_softplus(a[k, k])
        w[k + 1] = -a[k, :k + 1] @ drift[:k + 1]
        b = -a[k, :k + 1] @ mean[:k + 1]
        params.add(h.segment, np.concatenate([w, [b]]))
    return model, params, a


def small_map(d, seed=0, layers=2, width=3, n_quad=20, scale=1.0):
    model = TriangularMapModel.build(d, layers, width, n_quad)
    params = ParamVector()
    model.add_params(params, seed)
    params.values *= scale
    return model, params


def mlp_params(spec: MlpSpec, seed):
    from krflux.networks import init_params

    p = ParamVector()
    p.add("net", init_params(spec, seed))
    return p
