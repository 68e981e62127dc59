"""Define-by-run reverse-mode differentiation over batched float64 arrays.

Every node on a :class:`Tape` holds a numpy array; elementwise operations
broadcast, so one node can carry a whole batch of samples. Matrices too small
to be worth vectorising (Jacobians of a d <= 8 map) are kept as :class:`Mat`
grids of per-entry nodes, which lets cofactor expansion run through the tape.
"""

from __future__ import annotations

import weakref
from collections.abc import Callable, Iterable, Sequence
from typing import Union

import numpy as np
from scipy.special import expit


class NonFiniteValue(FloatingPointError):
    """A NaN or infinity appeared in a forward or backward sweep."""


class DimensionMismatch(ValueError):
    pass


class NonPositiveDiagonal(ValueError):
    """A triangular Jacobian lost its positive diagonal."""


# ---------------------------------------------------------------------------
# parameters


class ParamVector:
    """Flat float64 array with disjoint named segments covering it exactly."""

    def __init__(self, values=None, segments: dict[str, tuple[int, int]] | None = None):
        self.values = np.zeros(0) if values is None else np.array(values, dtype=np.float64)
        self.segments: dict[str, tuple[int, int]] = dict(segments or {})
        self.validate()

    def add(self, name: str, values) -> None:
        if name in self.segments:
            raise ValueError(f"duplicate segment {name!r}")
        values = np.asarray(values, dtype=np.float64).ravel()
        self.segments[name] = (len(self.values), len(values))
        self.values = np.concatenate([self.values, values])
        self.validate()

    def segment(self, name: str) -> np.ndarray:
        off, n = self.segments[name]
        return self.values[off:off + n]

    def set_segment(self, name: str, values) -> None:
        off, n = self.segments[name]
        values = np.asarray(values, dtype=np.float64).ravel()
        if len(values) != n:
            raise DimensionMismatch(f"segment {name!r} has length {n}, got {len(values)}")
        self.values[off:off + n] = values

    def validate(self) -> None:
        covered = np.zeros(len(self.values), dtype=int)
        for name, (off, n) in self.segments.items():
            if off < 0 or n < 0 or off + n > len(self.values):
                raise ValueError(f"segment {name!r} out of range")
            covered[off:off + n] += 1
        if np.any(covered != 1):
            raise ValueError("segments must be disjoint and cover the vector")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteValue("parameter vector contains non-finite values")

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def with_values(self, values) -> "ParamVector":
        return ParamVector(values, self.segments)

    def __len__(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        ordered = sorted(self.segments.items(), key=lambda kv: kv[1][0])
        return {
            "values": [float(v) for v in self.values],
            "segments": [[name, off, n] for name, (off, n) in ordered],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ParamVector":
        segments = {name: (int(off), int(n)) for name, off, n in data["segments"]}
        return cls(np.array(data["values"], dtype=np.float64), segments)


# ---------------------------------------------------------------------------
# tape


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Var:
    """A node on a tape. Arithmetic with numpy arrays or floats is recorded."""

    __slots__ = ("value", "tape", "parents", "vjp", "index", "__weakref__")
    __array_ufunc__ = None  # make ndarray <op> Var dispatch to Var.__rop__

    def __init__(self, value, tape: "Tape", parents=(), vjp=None):
        self.value = value
        self.tape = tape
        self.parents = parents
        self.vjp = vjp
        self.index = -1

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape}, index={self.index})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return vsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


Operand = Union[Var, np.ndarray, float]


class Tape:
    """Append-only record of operations; inputs always precede outputs."""

    def __init__(self):
        # weak: nodes own the tape, and anything a live node depends on stays alive through its parents;
        # strong refs here would make every graph a cycle left for the garbage collector
        self._nodes: list[weakref.ref] = []

    @property
    def nodes(self) -> list[Var]:
        """Live nodes in recording order."""
        return [n for n in (r() for r in self._nodes) if n is not None]

    def record(self, value, parents: Sequence[Var], vjp) -> Var:
        """Append a node; ``vjp(g)`` returns one gradient per parent."""
        node = Var(np.asarray(value, dtype=np.float64), self, tuple(parents), vjp)
        node.index = len(self._nodes)
        self._nodes.append(weakref.ref(node))
        return node

    def leaf(self, value) -> Var:
        return self.record(np.array(value, dtype=np.float64), (), None)

    def bind(self, params: ParamVector) -> "Bound":
        return Bound(self, params)

    def check_finite(self) -> None:
        for node in self.nodes:
            if not np.all(np.isfinite(node.value)):
                raise NonFiniteValue(f"non-finite value at tape node {node.index}")

    def gradient(self, root: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Sweep backward from ``root`` (seeded with ones) and return d root / d wrt."""
        if root.tape is not self:
            raise ValueError("root belongs to another tape")
        wanted = {v.index for v in wrt}
        kept: dict[int, np.ndarray] = {}
        grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
        for ref in reversed(self._nodes[:root.index + 1]):
            node = ref()
            if node is None:
                continue
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.index in wanted:
                kept[node.index] = g
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                prev = grads.get(parent.index)
                grads[parent.index] = pg if prev is None else prev + pg
        return [kept.get(v.index, np.zeros_like(v.value)) for v in wrt]


class Bound:
    """A ParamVector attached to a tape as a single leaf; segments are views."""

    def __init__(self, tape: Tape, params: ParamVector):
        self.tape = tape
        self.params = params
        self.leaf = tape.leaf(params.values)
        self._cache: dict[str, Var] = {}

    def __getitem__(self, name: str) -> Var:
        seg = self._cache.get(name)
        if seg is None:
            off, n = self.params.segments[name]
            seg = getitem(self.leaf, slice(off, off + n))
            self._cache[name] = seg
        return seg

    def gradient(self, root: Var) -> np.ndarray:
        return self.tape.gradient(root, [self.leaf])[0]


def forward_eval(graph: Callable[[Bound], Var], params: ParamVector) -> float:
    """Evaluate a scalar graph built by ``graph(bound_params)``."""
    tape = Tape()
    root = graph(tape.bind(params))
    tape.check_finite()
    return _scalar(root)


def reverse_gradient(graph: Callable[[Bound], Var], params: ParamVector) -> np.ndarray:
    return value_and_grad(graph, params, check_all=True)[1]


def value_and_grad(
    graph: Callable[[Bound], Var], params: ParamVector, check_all: bool = False
) -> tuple[float, np.ndarray]:
    tape = Tape()
    bound = tape.bind(params)
    root = graph(bound)
    if check_all:
        tape.check_finite()
    value = _scalar(root)
    grad = bound.gradient(root)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteValue("non-finite gradient")
    return value, grad


def _scalar(root) -> float:
    value = root.value if isinstance(root, Var) else np.asarray(root)
    if value.size != 1:
        raise DimensionMismatch(f"graph root must be scalar, got shape {value.shape}")
    value = float(value.reshape(()))
    if not np.isfinite(value):
        raise NonFiniteValue("graph root is not finite")
    return value


# ---------------------------------------------------------------------------
# primitives


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is not None and x.tape is not tape:
                raise ValueError("operands live on different tapes")
            tape = x.tape
    return tape


def _binary(a, b, out, ga, gb):
    """Record ``out = f(a, b)``; ga/gb map the output grad to each operand."""
    tape = _tape_of(a, b)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(a, Var):
        parents.append(a)
        fns.append(lambda g, s=a.value.shape: _unbroadcast(ga(g), s))
    if isinstance(b, Var):
        parents.append(b)
        fns.append(lambda g, s=b.value.shape: _unbroadcast(gb(g), s))
    return tape.record(out, parents, lambda g: [f(g) for f in fns])


def _unary(x: Var, out, dfn):
    if not isinstance(x, Var):
        return out
    return x.tape.record(out, (x,), lambda g: (dfn(g),))


def add(a, b):
    return _binary(a, b, value_of(a) + value_of(b), lambda g: g, lambda g: g)


def sub(a, b):
    return _binary(a, b, value_of(a) - value_of(b), lambda g: g, lambda g: -g)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x):
    return _unary(x, -value_of(x), lambda g: -g)


def power(x, exponent: float):
    xv = value_of(x)
    return _unary(x, xv ** exponent, lambda g: g * exponent * xv ** (exponent - 1))


def square(x):
    xv = value_of(x)
    return _unary(x, xv * xv, lambda g: 2.0 * g * xv)


def exp(x):
    out = np.exp(value_of(x))
    return _unary(x, out, lambda g: g * out)


def log(x):
    xv = value_of(x)
    return _unary(x, np.log(xv), lambda g: g / xv)


def sqrt(x):
    out = np.sqrt(value_of(x))
    return _unary(x, out, lambda g: 0.5 * g / out)


def tanh(x):
    out = np.tanh(value_of(x))
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def sigmoid(x):
    out = expit(value_of(x))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def softplus(x):
    xv = value_of(x)
    return _unary(x, np.logaddexp(0.0, xv), lambda g: g * expit(xv))


def log_softplus(x):
    """log(softplus(x)), accurate when softplus underflows toward 0."""
    xv = value_of(x)
    sp = np.logaddexp(0.0, xv)
    tail = xv < -30.0
    with np.errstate(divide="ignore"):
        out = np.where(tail, xv, np.log(np.where(tail, 1.0, sp)))
        ratio = np.where(tail, 1.0, expit(xv) / np.where(tail, 1.0, sp))
    return _unary(x, out, lambda g: g * ratio)


def logaddexp(a, b):
    av, bv = value_of(a), value_of(b)
    out = np.logaddexp(av, bv)
    wa = np.exp(av - out)
    return _binary(a, b, out, lambda g: g * wa, lambda g: g * (1.0 - wa))


def matmul(x, w):
    """``x @ w`` for x of shape (..., n) and a 2-D w of shape (n, m)."""
    xv, wv = value_of(x), value_of(w)
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0]:
        raise DimensionMismatch(f"cannot multiply {xv.shape} by {wv.shape}")
    n, m = wv.shape
    x2 = xv.reshape(-1, n)
    out = (x2 @ wv).reshape(xv.shape[:-1] + (m,))
    tape = _tape_of(x, w)
    if tape is None:
        return out
    parents, fns = [], []
    if isinstance(x, Var):
        parents.append(x)
        fns.append(lambda g: (g.reshape(-1, m) @ wv.T).reshape(xv.shape))
    if isinstance(w, Var):
        parents.append(w)
        fns.append(lambda g: x2.T @ g.reshape(-1, m))
    return tape.record(out, parents, lambda g: [f(g) for f in fns])


def dot(a, b):
    """Inner product over the last axis."""
    return vsum(mul(a, b), axis=-1)


def vsum(x, axis=None):
    xv = value_of(x)
    out = xv.sum(axis=axis)
    if not isinstance(x, Var):
        return out

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return x.tape.record(out, (x,), vjp)


def mean(x, axis=None):
    xv = value_of(x)
    count = xv.size if axis is None else xv.shape[axis]
    return mul(vsum(x, axis), 1.0 / count)


def reshape(x, shape):
    xv = value_of(x)
    return _unary(x, xv.reshape(shape), lambda g: g.reshape(xv.shape))


def transpose(x, axes=None):
    xv = value_of(x)
    inverse = None if axes is None else np.argsort(axes)
    return _unary(x, np.transpose(xv, axes), lambda g: np.transpose(g, inverse))


def getitem(x, index):
    xv = value_of(x)
    out = xv[index]
    if not isinstance(x, Var):
        return out
    fancy = _is_fancy(index)

    def vjp(g):
        full = np.zeros_like(xv)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return x.tape.record(out, (x,), vjp)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def stack(xs: Sequence[Operand], axis: int = 0):
    values = [np.broadcast_to(value_of(x), np.broadcast_shapes(*[value_of(y).shape for y in xs]))
              for x in xs]
    out = np.stack(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    parents = [x for x in xs if isinstance(x, Var)]
    slots = [i for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        parts = np.moveaxis(g, axis, 0)
        return [_unbroadcast(parts[i], xs[i].value.shape) for i in slots]

    return tape.record(out, parents, vjp)


def concatenate(xs: Sequence[Operand], axis: int = 0):
    values = [value_of(x) for x in xs]
    out = np.concatenate(values, axis=axis)
    tape = _tape_of(*xs)
    if tape is None:
        return out
    bounds = np.cumsum([0] + [v.shape[axis] for v in values])
    parents = [x for x in xs if isinstance(x, Var)]
    slots = [i for i, x in enumerate(xs) if isinstance(x, Var)]

    def vjp(g):
        moved = np.moveaxis(g, axis, 0)
        return [np.moveaxis(moved[bounds[i]:bounds[i + 1]], 0, axis) for i in slots]

    return tape.record(out, parents, vjp)


# ---------------------------------------------------------------------------
# small matrices


def _is_zero(x) -> bool:
    return not isinstance(x, (Var, np.ndarray)) and x == 0


def _mul0(a, b):
    if _is_zero(a) or _is_zero(b):
        return 0.0
    if not isinstance(a, (Var, np.ndarray)) and a == 1:
        return b
    return mul(a, b)


def _add0(a, b):
    if _is_zero(a):
        return b
    if _is_zero(b):
        return a
    return add(a, b)


def _neg0(a):
    return 0.0 if _is_zero(a) else neg(a)


class Mat:
    """Row-major grid of entries, each a Var, an array of batch values, or a float.

    Entries equal to the float 0 are structural zeros and are skipped in
    products, which keeps cofactor expansion of triangular matrices cheap.
    """

    def __init__(self, rows: int, cols: int, entries: Iterable):
        entries = list(entries)
        if rows <= 0 or cols <= 0 or rows * cols != len(entries):
            raise DimensionMismatch(f"{rows}x{cols} matrix needs {rows * cols} entries, got {len(entries)}")
        for e in entries:
            if not np.all(np.isfinite(value_of(e))):
                raise NonFiniteValue("matrix entry is not finite")
        self.rows, self.cols, self.entries = rows, cols, entries

    @classmethod
    def from_array(cls, arr) -> "Mat":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatch("from_array expects a 2-D array")
        return cls(arr.shape[0], arr.shape[1], [float(v) for v in arr.ravel()])

    @classmethod
    def identity(cls, d: int) -> "Mat":
        return cls(d, d, [1.0 if i == j else 0.0 for i in range(d) for j in range(d)])

    def __getitem__(self, ij):
        i, j = ij
        return self.entries[i * self.cols + j]

    def row(self, i: int) -> list:
        return self.entries[i * self.cols:(i + 1) * self.cols]

    def transpose(self) -> "Mat":
        return Mat(self.cols, self.rows, [self[i, j] for j in range(self.cols) for i in range(self.rows)])

    def matvec(self, vec: Sequence) -> list:
        if len(vec) != self.cols:
            raise DimensionMismatch("matvec size mismatch")
        out = []
        for i in range(self.rows):
            acc = 0.0
            for j in range(self.cols):
                acc = _add0(acc, _mul0(self[i, j], vec[j]))
            out.append(acc)
        return out

    def matmul(self, other: "Mat") -> "Mat":
        if self.cols != other.rows:
            raise DimensionMismatch("matmul size mismatch")
        entries = []
        for i in range(self.rows):
            for j in range(other.cols):
                acc = 0.0
                for k in range(self.cols):
                    acc = _add0(acc, _mul0(self[i, k], other[k, j]))
                entries.append(acc)
        return Mat(self.rows, other.cols, entries)

    def to_array(self) -> np.ndarray:
        """Values as an array of shape batch + (rows, cols)."""
        vals = [value_of(e) for e in self.entries]
        shape = np.broadcast_shapes(*[v.shape for v in vals])
        arr = np.stack([np.broadcast_to(v, shape) for v in vals], axis=-1)
        return arr.reshape(shape + (self.rows, self.cols))


def _det_entries(m: list[list]) -> object:
    n = len(m)
    if n == 1:
        return m[0][0]
    if n == 2:
        return _add0(_mul0(m[0][0], m[1][1]), _neg0(_mul0(m[0][1], m[1][0])))
    acc = 0.0
    for j in range(n):
        if _is_zero(m[0][j]):
            continue
        minor = [row[:j] + row[j + 1:] for row in m[1:]]
        term = _mul0(m[0][j], _det_entries(minor))
        acc = _add0(acc, term if j % 2 == 0 else _neg0(term))
    return acc


def _grid(m: Mat) -> list[list]:
    return [m.row(i) for i in range(m.rows)]


def det(m: Mat):
    if m.rows != m.cols:
        raise DimensionMismatch("determinant of a non-square matrix")
    if m.rows > 5:
        return _det_lu(m)
    return _det_entries(_grid(m))


def adjugate(m: Mat) -> Mat:
    """Transpose of the cofactor matrix; adj(m) m = det(m) I even when singular."""
    if m.rows != m.cols:
        raise DimensionMismatch("adjugate of a non-square matrix")
    d = m.rows
    if d > 8:
        raise DimensionMismatch("adjugate supports d <= 8")
    if d == 1:
        return Mat(1, 1, [1.0])
    if d > 5:
        return _adjugate_lu(m)
    grid = _grid(m)
    cof = {}
    for i in range(d):
        for j in range(d):
            minor = [row[:j] + row[j + 1:] for r, row in enumerate(grid) if r != i]
            c = _det_entries(minor)
            cof[i, j] = c if (i + j) % 2 == 0 else _neg0(c)
    return Mat(d, d, [cof[j, i] for i in range(d) for j in range(d)])


def _stacked(m: Mat):
    shapes = [value_of(e).shape for e in m.entries]
    batch = np.broadcast_shapes(*shapes)
    flat = stack([e if isinstance(e, Var) else np.broadcast_to(value_of(e), batch) for e in m.entries], axis=-1)
    return reshape(flat, batch + (m.rows, m.cols)), batch


def _adjugate_lu(m: Mat) -> Mat:
    """adj = det * inv through LU, for the d > 5 fallback (needs det != 0)."""
    a, batch = _stacked(m)
    av = value_of(a)
    sign, logabs = np.linalg.slogdet(av)
    dv = sign * np.exp(logabs)
    inv = np.linalg.inv(av)
    out = dv[..., None, None] * inv

    def vjp(g):
        inv_t = np.swapaxes(inv, -1, -2)
        trace = np.sum(g * inv, axis=(-2, -1))
        return dv[..., None, None] * (trace[..., None, None] * inv_t - inv_t @ g @ inv_t)

    res = _unary(a, out, vjp)
    d = m.rows
    return Mat(d, d, [getitem(res, (..., i, j)) for i in range(d) for j in range(d)])


def _det_lu(m: Mat):
    a, batch = _stacked(m)
    av = value_of(a)
    sign, logabs = np.linalg.slogdet(av)
    dv = sign * np.exp(logabs)
    inv_t = np.swapaxes(np.linalg.inv(av), -1, -2)
    return _unary(a, dv, lambda g: (g * dv)[..., None, None] * inv_t)


def logdet_triangular(m: Mat):
    """Sum of log-diagonal of a lower-triangular matrix with positive diagonal."""
    if m.rows != m.cols:
        raise DimensionMismatch("logdet of a non-square matrix")
    for i in range(m.rows):
        for j in range(i + 1, m.cols):
            if np.any(value_of(m[i, j]) != 0):
                raise ValueError("matrix is not lower triangular")
    acc = 0.0
    for i in range(m.rows):
        diag = m[i, i]
        if np.any(value_of(diag) <= 0):
            raise NonPositiveDiagonal(f"diagonal entry {i} is not positive")
        acc = _add0(acc, log(diag) if isinstance(diag, Var) else np.log(value_of(diag)))
    return acc
