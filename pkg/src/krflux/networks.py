"""Feed-forward tanh networks with exact input derivatives.

Input derivatives are propagated forward as a *jet*: an array of shape
``(channels, width, batch)`` whose channel 0 holds activations, the next ``C``
channels first derivatives along chosen input directions, and optionally ``C``
more channels holding the mixed second derivatives ``d_k d_m`` for one fixed
direction ``k``. The jet is built from ordinary tape operations plus one fused
tanh primitive, so parameter gradients of any derivative come from a single
reverse sweep.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import autodiff as ad
from .autodiff import Bound, DimensionMismatch, ParamVector, Var


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_layers: int = 5
    hidden_width: int = 5
    output_dim: int = 1
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or self.hidden_layers < 0:
            raise ValueError("network dimensions must be positive")
        if self.hidden_layers and self.hidden_width <= 0:
            raise ValueError("hidden width must be positive")
        if self.activation != "tanh":
            raise ValueError("only tanh activations are supported")

    def layer_shapes(self) -> list[tuple[int, int]]:
        widths = [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def n_params(self) -> int:
        return sum((n_in + 1) * n_out for n_in, n_out in self.layer_shapes())

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_layers": self.hidden_layers,
                "hidden_width": self.hidden_width, "output_dim": self.output_dim,
                "activation": self.activation}


@dataclass(frozen=True)
class MlpHandle:
    spec: MlpSpec
    segment: str


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Xavier-uniform weights, zero biases; layout per layer is W (row-major) then b."""
    rng = np.random.default_rng(seed)
    chunks = []
    for n_in, n_out in spec.layer_shapes():
        limit = np.sqrt(6.0 / (n_in + n_out))
        chunks.append(rng.uniform(-limit, limit, size=n_in * n_out))
        chunks.append(np.zeros(n_out))
    return np.concatenate(chunks)


def _layers(p: Bound, h: MlpHandle) -> list[tuple[Var, Var]]:
    seg = p[h.segment]
    if seg.shape[0] != h.spec.n_params:
        raise DimensionMismatch(f"segment {h.segment!r} has {seg.shape[0]} values, "
                                f"network needs {h.spec.n_params}")
    out, off = [], 0
    for n_in, n_out in h.spec.layer_shapes():
        w = ad.reshape(ad.getitem(seg, slice(off, off + n_in * n_out)), (n_in, n_out))
        off += n_in * n_out
        b = ad.getitem(seg, slice(off, off + n_out))
        off += n_out
        out.append((w, b))
    return out


@njit(cache=True)
def _tanh_jet_fwd(z, c, second):
    k_all, w, nb = z.shape
    out = np.empty_like(z)
    for i in range(w):
        for b in range(nb):
            a = np.tanh(z[0, i, b])
            s = 1.0 - a * a
            out[0, i, b] = a
            for k in range(c):
                out[1 + k, i, b] = s * z[1 + k, i, b]
            if second >= 0:
                f = 2.0 * a * s * z[1 + second, i, b]
                for k in range(c):
                    out[1 + c + k, i, b] = s * z[1 + c + k, i, b] - f * z[1 + k, i, b]
    return out


@njit(cache=True)
def _tanh_jet_bwd(z, g, c, second):
    k_all, w, nb = z.shape
    gz = np.empty_like(z)
    for i in range(w):
        for b in range(nb):
            a = np.tanh(z[0, i, b])
            s = 1.0 - a * a
            as2 = 2.0 * a * s
            g1z1 = 0.0
            for k in range(c):
                g1z1 += g[1 + k, i, b] * z[1 + k, i, b]
                gz[1 + k, i, b] = s * g[1 + k, i, b]
            dz0 = g[0, i, b] * s - as2 * g1z1
            if second >= 0:
                z1s = z[1 + second, i, b]
                g2z1 = 0.0
                g2z2 = 0.0
                for k in range(c):
                    g2 = g[1 + c + k, i, b]
                    g2z1 += g2 * z[1 + k, i, b]
                    g2z2 += g2 * z[1 + c + k, i, b]
                    gz[1 + c + k, i, b] = s * g2
                    gz[1 + k, i, b] -= as2 * z1s * g2
                gz[1 + second, i, b] -= as2 * g2z1
                dz0 -= as2 * g2z2 + 2.0 * s * (1.0 - 3.0 * a * a) * g2z1 * z1s
            gz[0, i, b] = dz0
    return gz


def tanh_jet(z, n_dirs: int, second: int | None):
    """Apply tanh to a jet of pre-activations.

    ``z`` has shape (K, w, B) with K = 1 + n_dirs (+ n_dirs when ``second``
    indexes the direction of the mixed second derivatives). With a = tanh(z0)
    and s = 1 - a^2 the channels map to a, s z1 and s z2 - 2 a s z1[second] z1.
    """
    zv = np.ascontiguousarray(ad.value_of(z))
    sec = -1 if second is None else int(second)
    out = _tanh_jet_fwd(zv, n_dirs, sec)
    if not isinstance(z, Var):
        return out
    return z.tape.record(out, (z,), lambda g: (_tanh_jet_bwd(zv, np.ascontiguousarray(g), n_dirs, sec),))


def jet_linear(x, w, b):
    """Affine layer on a jet: channel 0 gets ``w^T x + b``, the rest ``w^T x``."""
    xv, wv, bv = ad.value_of(x), ad.value_of(w), ad.value_of(b)
    out = np.matmul(wv.T, xv)
    out[0] += bv[:, None]
    tape = ad._tape_of(x, w, b)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(x, Var):
        parents.append(x)
        fns.append(lambda g: np.matmul(wv, g))
    if isinstance(w, Var):
        parents.append(w)
        fns.append(lambda g: np.matmul(xv, np.swapaxes(g, 1, 2)).sum(axis=0))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g: g[0].sum(axis=1))
    return tape.record(out, parents, lambda g: [f(g) for f in fns])


def input_jet(u, dirs: list[int], second: int | None):
    """Seed jet (K, n_in, B) for inputs u (B, n_in): one-hot tangents along ``dirs``."""
    uv = ad.value_of(u)
    n_b, n_in = uv.shape
    c = len(dirs)
    k = 1 + c + (c if second is not None else 0)
    seed = np.zeros((k, n_in, n_b))
    for i, d in enumerate(dirs):
        seed[1 + i, d] = 1.0
    if not isinstance(u, Var):
        seed[0] = uv.T
        return seed
    mask = np.zeros((k, 1, 1))
    mask[0] = 1.0
    return ad.add(seed, ad.mul(ad.transpose(u), mask))


def mlp_jet(p: Bound, h: MlpHandle, u, dirs: list[int], second: int | None = None):
    """Value and derivatives of a scalar network at inputs u (B, n_in).

    Returns ``(f, df, d2f)``: f of shape (B,), df (len(dirs), B) holding
    d f / d u[dirs[i]], and d2f (len(dirs), B) holding
    d^2 f / d u[dirs[second]] d u[dirs[i]] (None if ``second`` is None).
    """
    uv = ad.value_of(u)
    if uv.ndim != 2 or uv.shape[1] != h.spec.input_dim:
        raise DimensionMismatch(f"expected inputs (B, {h.spec.input_dim}), got {uv.shape}")
    if h.spec.output_dim != 1:
        raise DimensionMismatch("jets are defined for scalar networks")
    c = len(dirs)
    x = input_jet(u, dirs, second)
    layers = _layers(p, h)
    for i, (w, b) in enumerate(layers):
        x = jet_linear(x, w, b)
        if i < len(layers) - 1:
            x = tanh_jet(x, c, second)
    f = ad.getitem(x, (0, 0))
    df = ad.getitem(x, (slice(1, 1 + c), 0))
    d2f = ad.getitem(x, (slice(1 + c, None), 0)) if second is not None else None
    return f, df, d2f


def mlp_forward(p: Bound, h: MlpHandle, u):
    """Plain forward pass, output shape (B, output_dim)."""
    x = u
    layers = _layers(p, h)
    for i, (w, b) in enumerate(layers):
        x = ad.add(ad.matmul(x, w), b)
        if i < len(layers) - 1:
            x = ad.tanh(x)
    return x


def _net_input(h: MlpHandle, x, t) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    batched = x.ndim == 2
    x2 = x if batched else x[None, :]
    if x2.shape[1] != h.spec.input_dim - 1:
        raise DimensionMismatch(f"network expects {h.spec.input_dim - 1} spatial inputs, got {x2.shape[1]}")
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (x2.shape[0],))
    return np.column_stack([x2, t]), batched


def mlp_eval(h: MlpHandle, x, t, params: ParamVector):
    """f(x, t) for a point x (k,) or a batch (B, k)."""
    u, batched = _net_input(h, x, t)
    p = ad.Tape().bind(params)
    out = ad.value_of(mlp_forward(p, h, u))[:, 0]
    return out if batched else float(out[0])


def mlp_partial_last(h: MlpHandle, x, t, params: ParamVector):
    """Exact d f / d x_k (the last spatial input)."""
    u, batched = _net_input(h, x, t)
    p = ad.Tape().bind(params)
    _, df, _ = mlp_jet(p, h, u, [h.spec.input_dim - 2])
    out = ad.value_of(df)[0]
    return out if batched else float(out[0])
