"""Dense arrays with a small reverse-mode differentiation engine.

Every differentiable quantity in the decoder is a :class:`Tensor`. Primitive
operations record their inputs and an analytic backward closure; calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order and accumulates gradients into leaf tensors (parameters and inputs
created with ``requires_grad=True``).

Binary element-wise operations require operands of identical shape. The only
implicit expansion is for non-differentiable constants (plain numpy arrays or
Python scalars), which are broadcast up front; differentiable expansion goes
through :func:`broadcast_to`, whose backward sums over the expanded axes.
"""

from __future__ import annotations

import contextlib
import math
from collections import Counter
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericalError

# Set to False to skip the post-op finiteness check (benchmarks only).
CHECK_FINITE = True

_grad_enabled = True
_flop_counters: list[Counter] = []
_flop_tags: list[str] = ["other"]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Build no graph inside the block; outputs are constants."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_flops() -> Iterator[Counter]:
    """Collect per-tag floating point operation counts of executed primitives."""
    counter: Counter = Counter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


@contextlib.contextmanager
def flop_tag(tag: str) -> Iterator[None]:
    _flop_tags.append(tag)
    try:
        yield
    finally:
        _flop_tags.pop()


def _add_flops(n: int) -> None:
    if _flop_counters:
        tag = _flop_tags[-1]
        for c in _flop_counters:
            c[tag] += int(n)


class Tensor:
    """Immutable n-d array node.

    ``op`` and ``inputs`` are empty for leaves. ``grad`` is only populated on
    leaves that require a gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "op", "inputs", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = ""
        self.inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_error(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:
        tag = f" op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; all routes go through the primitives below
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis, keepdims)


def _scalar_error(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class Parameter(Tensor):
    """Named trainable leaf; ``grad`` always has the parameter's shape."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise NumericalError(f"non-finite values produced by '{op}'")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        out.op = op
        out.inputs = tuple(inputs)
        out._backward = backward
    else:
        out.op = ""
        out.inputs = ()
        out._backward = None
    return out


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Coerce operands; constants are cast and broadcast to the tensor's shape."""
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        if a.shape != b.shape:
            raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape))
    if isinstance(b, Tensor):
        return Tensor(np.broadcast_to(np.asarray(a, dtype=b.dtype), b.shape)), b
    raise ContractError("at least one operand must be a Tensor")


# ---------------------------------------------------------------------------
# element-wise binary

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _add_flops(a.size)
    return _make(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _add_flops(a.size)
    return _make(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    _add_flops(a.size)
    return _make(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    _add_flops(a.size)
    return _make(out, "div", (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    c = float(c)
    _add_flops(a.size)
    return _make(a.data * a.dtype.type(c), "scale", (a,), lambda g: (g * g.dtype.type(c),))


def shift(a: Tensor, c: float) -> Tensor:
    """Add a Python scalar."""
    _add_flops(a.size)
    return _make(a.data + a.dtype.type(c), "shift", (a,), lambda g: (g,))


# ---------------------------------------------------------------------------
# element-wise unary

def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    _add_flops(4 * x.size)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1 - out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _add_flops(x.size)
    return _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    _add_flops(x.size)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    d = x.data
    if (d <= 0).any():
        raise NumericalError("log of non-positive value")
    _add_flops(x.size)
    return _make(np.log(d), "log", (x,), lambda g: (g / d,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1)
        return (np.where(out > 0, g / (2 * safe), 0).astype(g.dtype),)

    _add_flops(x.size)
    return _make(out, "sqrt", (x,), bw)


def absolute(x: Tensor) -> Tensor:
    s = np.sign(x.data)
    _add_flops(x.size)
    return _make(np.abs(x.data), "abs", (x,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d ``[n,k] @ [k,m]`` or batched 3-d ``[b,n,k] @ [b,k,m]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    ad, bd = a.data, b.data
    out = ad @ bd
    batch = a.shape[0] if a.ndim == 3 else 1
    _add_flops(batch * a.shape[-2] * b.shape[-1] * (2 * a.shape[-1] - 1))

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(out, "matmul", (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``[B, Cin]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data
    _add_flops(2 * x.shape[0] * x.shape[1] * weight.shape[1])

    def bw(g):
        grads = (g @ wd.T, xd.T @ g)
        if bias is not None:
            grads += (g.sum(axis=0),)
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", inputs, bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    _add_flops(4 * x.size)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), bw)


# ---------------------------------------------------------------------------
# structural

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)
    shape = x.shape
    axes = tuple(range(x.ndim)) if axis is None else (
        (axis,) if isinstance(axis, int) else tuple(axis))
    axes = tuple(a % x.ndim for a in axes) if x.ndim else ()
    _add_flops(x.size - out.size)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(g, shape).copy(),)

    return _make(out, "sum", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    s = sum(x, axis, keepdims)
    return scale(s, s.size / x.size)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc
    old = x.shape
    return _make(out, "reshape", (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,),
                 lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    out = np.array(out, dtype=x.dtype)
    shape, dtype = x.shape, x.dtype

    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make(out, "getitem", (x,), bw)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    lead = len(shape) - len(src)
    red = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(src) if n == 1 and shape[i + lead] != 1)

    def bw(g):
        r = g.sum(axis=red, keepdims=True) if red else g
        return (r.reshape(src),)

    return _make(out, "broadcast", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ref = xs[0]
    ax = axis % ref.ndim
    for t in xs[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise DimensionError(f"concat: {t.shape} incompatible with {ref.shape} on axis {axis}")
    out = np.concatenate([t.data for t in xs], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(out, "concat", xs, bw)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    ax = axis % (xs[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in xs], axis=ax)


def detach(x: Tensor) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = x.data
    out.requires_grad = False
    out.grad = None
    out.op = ""
    out.inputs = ()
    out._backward = None
    out.name = None
    return out


# ---------------------------------------------------------------------------
# graph and reverse pass

class Graph:
    """Recorded primitive applications reachable from an output, inputs first."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in reversed(node.inputs):
                if id(parent) not in seen and parent.requires_grad:
                    stack_.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if not n.inputs]


def backward(seed: Tensor, graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(seed)/d(leaf) into every reachable leaf's ``grad``.

    Returns a mapping from leaf tensor to the gradient contributed by this
    call. Leaves that the seed does not depend on are untouched.
    """
    if seed.size != 1:
        raise ContractError(f"backward seed must be scalar, got shape {seed.shape}")
    if not seed.requires_grad:
        return {}
    graph = graph or Graph.trace(seed)
    grads: dict[int, np.ndarray] = {id(seed): np.ones_like(seed.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.inputs:
            result[node] = g
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            continue
        parts = node._backward(g)
        for parent, pg in zip(node.inputs, parts):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return result


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    ``fn`` maps the given tensors to a scalar tensor; every input is perturbed
    coordinate by coordinate. Use float64 inputs.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    out = fn(*inputs)
    if out.size != 1:
        raise ContractError(f"grad_check function must return a scalar, got {out.shape}")
    backward(out)
    worst = 0.0
    for which, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            # keep outputs in the input dtype: the difference is where precision matters
            with no_grad():
                fp = fn(*inputs).data.reshape(-1)[0]
            flat[i] = orig - step
            with no_grad():
                fm = fn(*inputs).data.reshape(-1)[0]
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericalError(f"non-finite output perturbing input {which} coordinate {i}")
            numeric = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = float(abs(a - numeric) / max(1e-12, abs(a) + abs(numeric)))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# parameter containers

class Module:
    """Attribute-registered parameters and sub-modules, in assignment order."""

    def __setattr__(self, key, value):
        if isinstance(value, Parameter) and not value.name:
            value.name = key
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{prefix}{key}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32,
                 init_scale: float = 1.0, bias_init: float = 0.0):
        std = init_scale / math.sqrt(cin)
        self.weight = Parameter(rng.normal(0.0, std, size=(cin, cout)), dtype=dtype)
        self.bias = Parameter(np.full(cout, bias_init), dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return linear(x, self.weight, self.bias)
        lead = x.shape[:-1]
        y = linear(reshape(x, (-1, x.shape[-1])), self.weight, self.bias)
        return reshape(y, lead + (self.weight.shape[1],))
