"""Small reverse-mode autodiff over float64 numpy arrays.

Only the operations the solver needs are provided. Each forward op records
its parents and a closure mapping the output gradient to parent gradients;
``backward`` walks the recorded graph once in reverse topological order.
The GRU cell and the GRU sequence scan are fused ops with hand-written
gradients so that the per-token encoder loop does not build a deep graph.
"""

from __future__ import annotations

import contextlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import expit

DTYPE = np.float64

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float64 array that remembers how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, data={self.data!r})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


class Parameter(Tensor):
    """A named leaf tensor whose gradient accumulates across backward calls."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise ops ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return expit(z)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


# reductions and reshaping ---------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(np.sum(x.data, axis=axis), (x,), backward)


def tmean(x: Tensor, axis=None) -> Tensor:
    count = x.data.size if axis is None else x.shape[axis]
    return tsum(x, axis) * (1.0 / count)


def take(x: Tensor, index) -> Tensor:
    """Index along the first axis (int, slice, or integer array)."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        if isinstance(index, np.ndarray) or isinstance(index, list):
            np.add.at(full, np.asarray(index), g)
        else:
            full[index] += g
        return (full,)

    idx = np.asarray(index) if isinstance(index, list) else index
    return _record(x.data[idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shaped tensors along a new leading axis."""
    tensors = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors]), tensors, backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def max_element(x: Tensor) -> Tensor:
    """Scalar maximum of a 1-D tensor; the gradient goes to the first argmax."""
    i = int(np.argmax(x.data))
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[i] = g
        return (out,)

    return _record(x.data[i], (x,), backward)


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 and bd.ndim == 1:
            return g * bd, g * ad
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        if bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g @ bd.T, ad.T @ g

    return _record(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for a vector or a batch of row vectors."""
    xd, w = x.data, weight.data
    out = xd @ w.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ w
        gw = np.outer(g, xd) if xd.ndim == 1 else g.T @ xd
        if bias is None:
            return gx, gw
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


# GRU kernels ----------------------------------------------------------------
#
# r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
# z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
# n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
# h' = (1 - z) * n + z * h
#
# Weights are stacked gate-wise in the order (r, z, n).

def _gru_forward(x, h, wi, wh, bi, bh):
    # x and h may each be a vector or a row batch; projections are taken
    # before broadcasting so a shared vector is multiplied once
    d = h.shape[-1]
    gi = x @ wi.T + bi
    gh = h @ wh.T + bh
    r = _sigmoid(gi[..., :d] + gh[..., :d])
    z = _sigmoid(gi[..., d:2 * d] + gh[..., d:2 * d])
    hn = gh[..., 2 * d:]
    n = np.tanh(gi[..., 2 * d:] + r * hn)
    out = n + z * (h - n)
    return out, (x, h, r, z, n, hn)


def _reduce_rows(g: np.ndarray, ndim: int) -> np.ndarray:
    return g.sum(axis=0) if g.ndim > ndim else g


def _gru_backward(cache, g, wi, wh):
    x, h, r, z, n, hn = cache
    dn_pre = g * (1.0 - z) * (1.0 - n * n)
    dz_pre = g * (h - n) * z * (1.0 - z)
    dr_pre = dn_pre * hn * r * (1.0 - r)
    dgi = np.concatenate([dr_pre, dz_pre, dn_pre], axis=-1)
    dgh = np.concatenate([dr_pre, dz_pre, dn_pre * r], axis=-1)
    dgi_x = _reduce_rows(dgi, x.ndim)
    dgh_h = _reduce_rows(dgh, h.ndim)
    dx = dgi_x @ wi
    dh = _reduce_rows(g * z, h.ndim) + dgh_h @ wh
    dwi = np.outer(dgi_x, x) if x.ndim == 1 else dgi_x.T @ x
    dwh = np.outer(dgh_h, h) if h.ndim == 1 else dgh_h.T @ h
    dbi = _reduce_rows(dgi, 1)
    dbh = _reduce_rows(dgh, 1)
    return dx, dh, dwi, dwh, dbi, dbh


def gru_cell(x: Tensor, h: Tensor, wi: Tensor, wh: Tensor, bi: Tensor, bh: Tensor) -> Tensor:
    """Fused GRU cell. ``x`` and ``h`` may be vectors or row batches; a vector
    operand is shared across the rows of a batched one."""
    x, h = as_tensor(x), as_tensor(h)
    out, cache = _gru_forward(x.data, h.data, wi.data, wh.data, bi.data, bh.data)

    def backward(g):
        return _gru_backward(cache, g, wi.data, wh.data)

    return _record(out, (x, h, wi, wh, bi, bh), backward)


def _scan_kernel(gi: np.ndarray, wh: np.ndarray, bh: np.ndarray):
    """Step K independent GRUs in lockstep.

    ``gi`` (L, K, 3d) holds precomputed input projections in processing
    order; ``wh`` (K, 3d, d), ``bh`` (K, 3d). Returns states (L, K, d) and the
    per-step caches needed by :func:`_scan_kernel_backward`.
    """
    steps, k, three_d = gi.shape
    d = three_d // 3
    h = np.zeros((k, d), dtype=DTYPE)
    whT = np.transpose(wh, (0, 2, 1))
    outs = np.empty((steps, k, d), dtype=DTYPE)
    prev = np.empty((steps, k, d), dtype=DTYPE)
    rs = np.empty((steps, k, d), dtype=DTYPE)
    zs = np.empty((steps, k, d), dtype=DTYPE)
    ns = np.empty((steps, k, d), dtype=DTYPE)
    hns = np.empty((steps, k, d), dtype=DTYPE)
    for t in range(steps):
        gh = np.matmul(h[:, None, :], whT)[:, 0, :] + bh
        g = gi[t]
        rz = _sigmoid(g[:, :2 * d] + gh[:, :2 * d])
        r, z = rz[:, :d], rz[:, d:]
        hn = gh[:, 2 * d:]
        n = np.tanh(g[:, 2 * d:] + r * hn)
        prev[t] = h
        h = n + z * (h - n)
        outs[t], rs[t], zs[t], ns[t], hns[t] = h, r, z, n, hn
    return outs, (prev, rs, zs, ns, hns)


def _scan_kernel_backward(g_out: np.ndarray, cache, wh: np.ndarray):
    prev, rs, zs, ns, hns = cache
    steps, k, d = g_out.shape
    dgi = np.empty((steps, k, 3 * d), dtype=DTYPE)
    dgh = np.empty((steps, k, 3 * d), dtype=DTYPE)
    carry = np.zeros((k, d), dtype=DTYPE)
    for t in range(steps - 1, -1, -1):
        g = g_out[t] + carry
        r, z, n = rs[t], zs[t], ns[t]
        dn_pre = g * (1.0 - z) * (1.0 - n * n)
        dr_pre = dn_pre * hns[t] * r * (1.0 - r)
        dz_pre = g * (prev[t] - n) * z * (1.0 - z)
        dgi[t, :, :d] = dr_pre
        dgi[t, :, d:2 * d] = dz_pre
        dgi[t, :, 2 * d:] = dn_pre
        dgh[t, :, :2 * d] = dgi[t, :, :2 * d]
        dgh[t, :, 2 * d:] = dn_pre * r
        carry = g * z + np.matmul(dgh[t][:, None, :], wh)[:, 0, :]
    dwh = np.matmul(dgh.transpose(1, 2, 0), prev.transpose(1, 0, 2))
    dbh = dgh.sum(axis=0)
    return dgi, dwh, dbh


def _multi_scan(xs: Tensor, params: Sequence[Sequence[Tensor]], reverse: Sequence[bool]) -> Tensor:
    """Run one GRU per entry of ``params`` over the rows of ``xs``; returns
    (L, K*d) with direction k's state for row t in columns k*d:(k+1)*d. A
    reversed direction's row t summarizes ``xs[t:]``."""
    steps = xs.shape[0]
    k = len(params)
    wi = [p[0].data for p in params]
    wh = np.stack([p[1].data for p in params])
    bh = np.stack([p[3].data for p in params])
    d = wh.shape[2]
    gi = np.empty((steps, k, 3 * d), dtype=DTYPE)
    for j, p in enumerate(params):
        proj = xs.data @ wi[j].T + p[2].data
        gi[:, j] = proj[::-1] if reverse[j] else proj
    outs, cache = _scan_kernel(gi, wh, bh)
    aligned = np.empty((steps, k * d), dtype=DTYPE)
    for j in range(k):
        aligned[:, j * d:(j + 1) * d] = outs[::-1, j] if reverse[j] else outs[:, j]

    def backward(g):
        g_steps = np.empty((steps, k, d), dtype=DTYPE)
        for j in range(k):
            block = g[:, j * d:(j + 1) * d]
            g_steps[:, j] = block[::-1] if reverse[j] else block
        dgi, dwh, dbh = _scan_kernel_backward(g_steps, cache, wh)
        dxs = np.zeros_like(xs.data)
        grads = []
        for j in range(k):
            gi_j = dgi[::-1, j] if reverse[j] else dgi[:, j]
            dxs += gi_j @ wi[j]
            grads.extend([gi_j.T @ xs.data, dwh[j], gi_j.sum(axis=0), dbh[j]])
        return (dxs, *grads)

    flat = [t for p in params for t in p]
    return _record(aligned, (xs, *flat), backward)


def gru_scan(xs: Tensor, wi: Tensor, wh: Tensor, bi: Tensor, bh: Tensor, reverse: bool = False) -> Tensor:
    """GRU over the rows of ``xs`` from a zero initial state; (L, d) states."""
    return _multi_scan(xs, [(wi, wh, bi, bh)], [reverse])


def bigru_scan(xs: Tensor, forward_params: Sequence[Tensor], backward_params: Sequence[Tensor]) -> Tensor:
    """Bidirectional GRU; row t is [forward state t, backward state t]."""
    return _multi_scan(xs, [forward_params, backward_params], [False, True])


# backward pass ----------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable Parameter.grad.

    Intermediate tensors on the path receive ``.grad`` as well. A recorded
    graph can be traversed only once.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; rebuild the forward pass")
    loss._consumed = True
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, Parameter):
            node.grad = node.grad + g
            continue
        node.grad = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# parameter containers and layers ------------------------------------------------

class ParamSet:
    """Ordered, name-unique collection of parameters (the model's theta)."""

    def __init__(self) -> None:
        self._params: dict[str, Parameter] = {}

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for name, p in self._params.items():
            value = np.asarray(state[name], dtype=DTYPE)
            if value.shape != p.shape:
                raise ShapeError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dim: int
    output_dim: int
    hidden_layers: int = 2
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if min(self.input_dim, self.hidden_dim, self.output_dim) < 1:
            raise ValueError("MLP dimensions must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim] + [self.hidden_dim] * self.hidden_layers + [self.output_dim]
        return list(zip(dims[:-1], dims[1:]))


@dataclass(frozen=True)
class GruCellSpec:
    input_dim: int
    hidden_dim: int

    def __post_init__(self):
        if min(self.input_dim, self.hidden_dim) < 1:
            raise ValueError("GRU dimensions must be >= 1")


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def mlp_forward(spec: MlpSpec, params: Sequence[Parameter], x: Tensor, name: str = "mlp") -> Tensor:
    """ReLU MLP; ``params`` alternates weight, bias per layer. No activation
    after the last layer."""
    layers = spec.layer_dims()
    if len(params) != 2 * len(layers):
        raise ShapeError(f"{name}: expected {2 * len(layers)} parameters, got {len(params)}")
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"{name}: layer 0 expects input dim {spec.input_dim}, got {x.shape[-1]}")
    h = x
    for i in range(len(layers)):
        h = linear(h, params[2 * i], params[2 * i + 1])
        if i < len(layers) - 1:
            h = relu(h)
    return h


def gru_cell_forward(spec: GruCellSpec, params: Sequence[Parameter], x: Tensor, hidden: Tensor,
                     name: str = "gru") -> Tensor:
    if x.shape[-1] != spec.input_dim:
        raise ShapeError(f"{name}: expected input dim {spec.input_dim}, got {x.shape[-1]}")
    if hidden.shape[-1] != spec.hidden_dim:
        raise ShapeError(f"{name}: expected hidden dim {spec.hidden_dim}, got {hidden.shape[-1]}")
    return gru_cell(x, hidden, *params)


class Mlp:
    def __init__(self, spec: MlpSpec, store: ParamSet, name: str, rng: np.random.Generator):
        self.spec, self.name = spec, name
        self.params: list[Parameter] = []
        for i, (fan_in, fan_out) in enumerate(spec.layer_dims()):
            self.params.append(store.add(f"{name}.{i}.weight", uniform_init(rng, (fan_out, fan_in), fan_in)))
            self.params.append(store.add(f"{name}.{i}.bias", np.zeros(fan_out)))

    def __call__(self, x: Tensor) -> Tensor:
        return mlp_forward(self.spec, self.params, x, self.name)


class GruCell:
    def __init__(self, spec: GruCellSpec, store: ParamSet, name: str, rng: np.random.Generator):
        self.spec, self.name = spec, name
        d, k = spec.hidden_dim, spec.input_dim
        self.params = [
            store.add(f"{name}.w_input", uniform_init(rng, (3 * d, k), d)),
            store.add(f"{name}.w_hidden", uniform_init(rng, (3 * d, d), d)),
            store.add(f"{name}.b_input", uniform_init(rng, (3 * d,), d)),
            store.add(f"{name}.b_hidden", uniform_init(rng, (3 * d,), d)),
        ]

    def __call__(self, x: Tensor, hidden: Tensor) -> Tensor:
        return gru_cell_forward(self.spec, self.params, x, hidden, self.name)

    def scan(self, xs: Tensor, reverse: bool = False) -> Tensor:
        return gru_scan(xs, *self.params, reverse=reverse)


# optimizer --------------------------------------------------------------------

class Adam:
    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# finite differences --------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    max_abs_analytic: float
    max_abs_numeric: float
    coords_checked: int


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]

    @property
    def max_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failing(self, tol: float) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.max_rel_error > tol]

    def __getitem__(self, name: str) -> GradCheckEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients
    from turning round-off into huge ratios."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def finite_difference_check(closure: Callable[[], Tensor], params: Iterable[Parameter],
                            step: float = 1e-5, max_coords: int | None = None,
                            rng: np.random.Generator | None = None,
                            floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of ``closure()`` with central differences.

    ``closure`` must rebuild the forward graph from the current parameter
    values on every call. With ``max_coords`` set, each parameter is checked
    on a random subset of that many coordinates.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = closure()
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    with no_grad():
        first = closure().item()
        second = closure().item()
    if first != second or first != loss.item():
        raise RuntimeError("closure is not deterministic: repeated evaluations differ")

    rng = rng or np.random.default_rng(0)
    entries = []
    for p in params:
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.zeros(len(coords))
        with no_grad():
            for k, i in enumerate(coords):
                original = flat[i]
                flat[i] = original + step
                plus = closure().item()
                flat[i] = original - step
                minus = closure().item()
                flat[i] = original
                numeric[k] = (plus - minus) / (2.0 * step)
        a = analytic[p.name].reshape(-1)[coords]
        err = relative_error(a, numeric, floor)
        entries.append(GradCheckEntry(
            name=p.name,
            max_rel_error=float(err.max()) if err.size else 0.0,
            max_abs_analytic=float(np.abs(a).max()) if a.size else 0.0,
            max_abs_numeric=float(np.abs(numeric).max()) if numeric.size else 0.0,
            coords_checked=len(coords),
        ))
    for p in params:
        p.zero_grad()
    return GradCheckReport(entries)


# checkpoints ---------------------------------------------------------------------

CHECKPOINT_MAGIC = b"DMWPCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ParamSet, meta: dict) -> None:
    """Write ``magic | u64 header length | JSON header | raw little-endian float64``.

    The header holds the format version, the caller's ``meta`` (config echo,
    vocabulary) and the ordered parameter table. Output is byte-deterministic.
    """
    table, offset, blobs = [], 0, []
    for p in params:
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        table.append({"name": p.name, "shape": list(p.shape), "offset": offset})
        offset += len(raw)
        blobs.append(raw)
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "meta": meta, "params": table},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + length].decode("utf-8"))
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    body = blob[16 + length:]
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        state[entry["name"]] = values.astype(DTYPE).reshape(entry["shape"])
    return header["meta"], state
