"""Dense 2-D tensors with tape-based reverse-mode differentiation.

Every loss in the package is assembled from the primitives here.  A forward
pass records each op whose inputs require gradients onto the active
:class:`Tape`; :func:`backward` replays that record once, in reverse, and
then clears it.  All values are float64.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ContractError, DimensionError, NumericalError

LEAKY_SLOPE = 0.2


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")
    # numpy defers to our reflected operators
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _not_scalar(t):
    raise ContractError(f"item() on non-scalar tensor of shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    def __len__(self):
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []


_default_tape = Tape()
_active: list[Tape] = [_default_tape]
_grad_enabled = [True]


def current_tape() -> Tape:
    return _active[-1]


@contextmanager
def recording(tape: Tape | None = None):
    """Record ops onto ``tape`` (a fresh one by default) inside the block."""
    tape = tape if tape is not None else Tape()
    _active.append(tape)
    try:
        yield tape
    finally:
        _active.pop()


@contextmanager
def no_grad():
    _grad_enabled.append(False)
    try:
        yield
    finally:
        _grad_enabled.pop()


def grad_enabled() -> bool:
    return _grad_enabled[-1]


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite values produced by op '{op}'")
    needs = _grad_enabled[-1] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
        _active[-1].record(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def rbf_mixture(sqdist, bandwidths) -> Tensor:
    """Mean over bandwidths b of ``exp(-sqdist / b)``, as a single op."""
    sqdist = as_tensor(sqdist)
    bws = [float(b) for b in bandwidths]
    # bandwidths that halve one another reuse the previous term by squaring
    order = sorted(range(len(bws)), key=lambda i: -bws[i])
    terms = [None] * len(bws)
    prev = None
    for i in order:
        if prev is not None and bws[prev] == 2.0 * bws[i]:
            terms[i] = terms[prev] * terms[prev]
        else:
            terms[i] = np.exp(-sqdist.data / bws[i])
        prev = i
    out = sum(terms) / len(bws)

    def bw(g):
        return (g * sum(-t / b for t, b in zip(terms, bws)) / len(bws),)

    return _make(out, (sqdist,), bw, "rbf_mixture")


# ------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return (g @ b.data.T if a.requires_grad else None,
                a.data.T @ g if b.requires_grad else None)

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), "transpose")


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis, keepdims) * (1.0 / n)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    widths = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, widths, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), parts, bw, "concat_cols")


def _selector(idx: np.ndarray, n_src: int, weight: float = 1.0) -> sparse.csr_matrix:
    rows = np.repeat(np.arange(idx.shape[0]), idx.shape[1] if idx.ndim == 2 else 1)
    return sparse.csr_matrix((np.full(idx.size, weight), (rows, idx.reshape(-1))),
                             shape=(idx.shape[0], n_src))


def take_rows(a, idx) -> Tensor:
    """Rows ``a[idx]``; repeated indices accumulate gradient."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.intp)

    def bw(g):
        return (_selector(idx, a.shape[0]).T @ g,)

    return _make(a.data[idx], (a,), bw, "take_rows")


def gather_mean(a, neighbors) -> Tensor:
    """Row i of the output is the mean of ``a[neighbors[i]]``."""
    a = as_tensor(a)
    nb = np.asarray(neighbors, dtype=np.intp)
    sel = _selector(nb, a.shape[0], 1.0 / nb.shape[1])
    return _make(sel @ a.data, (a,), lambda g: (sel.T @ g,), "gather_mean")


def pick(a, cols) -> Tensor:
    """Vector of ``a[i, cols[i]]``."""
    a = as_tensor(a)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.shape[0])

    def bw(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _make(a.data[rows, cols], (a,), bw, "pick")


# ------------------------------------------------------------------ softmax


def softmax_rows(x, scale: float = 1.0) -> Tensor:
    """Row-wise softmax of ``x / scale`` with max subtraction."""
    if not scale > 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    x = as_tensor(x)
    z = x.data / scale
    e = np.exp(z - z.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return ((out * (g - (g * out).sum(axis=1, keepdims=True))) / scale,)

    return _make(out, (x,), bw, "softmax_rows")


def log_softmax_rows(x, scale: float = 1.0) -> Tensor:
    if not scale > 0:
        raise ContractError(f"softmax scale must be positive, got {scale}")
    x = as_tensor(x)
    z = x.data / scale
    z = z - z.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    p = np.exp(out)

    def bw(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / scale,)

    return _make(out, (x,), bw, "log_softmax_rows")


# --------------------------------------------------------------- composites


def normalize_rows(x, eps: float = 1e-12) -> Tensor:
    x = as_tensor(x)
    return x / sqrt((x * x).sum(axis=1, keepdims=True) + eps)


def cosine_matrix(a, b) -> Tensor:
    """Pairwise cosine similarity between rows of ``a`` and rows of ``b``."""
    return normalize_rows(a) @ normalize_rows(b).T


def pairwise_sqdist(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = (b * b).sum(axis=1, keepdims=True)
    return aa + bb.T - 2.0 * (a @ b.T)


def cross_entropy(logits, targets) -> Tensor:
    """Summed softmax cross-entropy of row logits against integer targets."""
    return -pick(log_softmax_rows(logits), targets).sum()


# ----------------------------------------------------------------- backward


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` of every leaf reachable from ``loss``.

    Returns a map from leaf tensor to its gradient; the tape is reset.
    """
    tape = tape if tape is not None else current_tape()
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    leaves: dict[Tensor, np.ndarray] = {}
    seed = np.ones_like(loss.data)
    if loss._backward is None:
        leaves[loss] = seed
    else:
        pending: dict[int, np.ndarray] = {id(loss): seed}
        for node in reversed(tape.nodes):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    leaves[parent] = leaves[parent] + pg if parent in leaves else pg
                else:
                    key = id(parent)
                    pending[key] = pending[key] + pg if key in pending else pg
    for leaf, g in leaves.items():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
    tape.reset()
    return leaves


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adaptive-moment optimizer with global gradient-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = 5.0):
        if not lr > 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.clip_norm = clip_norm
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        """Apply one update from the accumulated ``.grad`` fields.

        Returns the pre-clipping global gradient norm.
        """
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                bad = int(np.sum(~np.isfinite(g)))
                raise NumericalError(f"non-finite gradient in parameter '{name}' ({bad} entries)")
            grads[name] = g
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if self.clip_norm is not None and norm > self.clip_norm:
            factor = self.clip_norm / norm
            grads = {k: g * factor for k, g in grads.items()}
        st = self.state
        st.step += 1
        bc1 = 1.0 - st.beta1 ** st.step
        bc2 = 1.0 - st.beta2 ** st.step
        for name, p in self.params.items():
            g = grads[name]
            st.m[name] = st.beta1 * st.m[name] + (1.0 - st.beta1) * g
            st.v[name] = st.beta2 * st.v[name] + (1.0 - st.beta2) * g * g
            update = st.lr * (st.m[name] / bc1) / (np.sqrt(st.v[name] / bc2) + st.eps)
            p.data = p.data - update
        return norm


# -------------------------------------------------------------- grad oracle


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Worst elementwise relative error between tape and central-difference gradients.

    Relative error uses the denominator ``max(|g|, |g_fd|, 1e-8)``.
    """
    if not h > 0:
        raise ContractError("finite-difference step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with recording() as tape:
        loss = f(xt)
        backward(loss, tape)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += h
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * h
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(p.data)) for p in params)
