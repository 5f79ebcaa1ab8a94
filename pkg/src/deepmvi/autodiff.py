"""Dense float64 tensors with a define-by-run reverse-mode tape.

Operations record themselves on the innermost active :class:`Tape` whenever
at least one input requires a gradient.  Outside a tape every operation is a
plain numpy computation.  Broadcasting is limited to scalar-with-tensor; any
other expansion goes through :func:`broadcast_to` so its backward rule is
explicit.

Example
-------
>>> w = Tensor([[1.0, 2.0]], requires_grad=True)
>>> x = Tensor([[3.0], [4.0]])
>>> with Tape() as tape:
...     y = matmul(w, x)
>>> tape.backward(y)
>>> w.grad
array([[3., 4.]])
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DimensionError, EmptyAttentionError, NumericalDomainError

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; everything routes through the recorded ops below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations; replay with :meth:`backward`.

    Gradients accumulate into ``.grad`` of leaf tensors only (tensors with
    ``requires_grad`` that were not produced by a recorded op).  Replaying the
    same tape twice therefore doubles every leaf gradient.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        for node in self.nodes:
            node.out._node = None
        self.nodes = []

    def backward(self, output: Tensor, seed=None):
        if seed is None:
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=np.float64)}
        if output._node is None and output.requires_grad:
            _accumulate_leaf(output, grads[id(output)])
            return
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    _accumulate_leaf(inp, gi)
                else:
                    key = id(inp)
                    grads[key] = grads[key] + gi if key in grads else gi


def _accumulate_leaf(t, g):
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalDomainError("operation produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._node = None
    out.name = None
    tape = _ACTIVE[-1] if _ACTIVE else None
    out.requires_grad = tape is not None and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        node = _Node(out, tuple(inputs), backward)
        out._node = node
        tape.nodes.append(node)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.data.size == 1


def _unbroadcast(g, shape):
    # only scalar broadcasting is legal, so reduce fully when shapes differ
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def _check_binary(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not agree")


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _record(A @ B, (a, b), backward)


def bmm(a, b) -> Tensor:
    """Batched product of ``[n, m, k]`` and ``[n, k, q]`` tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]
            or a.shape[2] != b.shape[1]):
        raise DimensionError(f"bmm: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.transpose(0, 2, 1), A.transpose(0, 2, 1) @ g

    return _record(A @ B, (a, b), backward)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "mul")
    A, B = a.data, b.data
    return _record(A * B, (a, b),
                   lambda g: (_unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b, "div")
    A, B = a.data, b.data
    if np.any(B == 0):
        raise NumericalDomainError("div: zero in denominator")
    out = A / B
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g / B, A.shape),
                              _unbroadcast(-g * out / B, B.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    A = a.data
    return _record(A * A, (a,), lambda g: (2.0 * g * A,))


_UNARY = {"relu": relu, "exp": exp, "neg": neg, "abs": absolute, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name; ``scale`` takes its factor as ``b``."""
    if op == "scale":
        return scale(a, b)
    if op in _UNARY:
        if b is not None:
            raise DimensionError(f"{op} is unary")
        return _UNARY[op](a)
    if op in _BINARY:
        return _BINARY[op](a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------- shape ops


def broadcast_to(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"broadcast_to: cannot expand {src} to {shape}") from None
    lead = len(shape) - len(src)

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _record(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: {src} -> {shape}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes).copy(), (a,), lambda g: (g.transpose(inv),))


def getitem(a, index) -> Tensor:
    a = _as_tensor(a)
    src = a.shape

    basic = _is_basic(index)

    def backward(g):
        full = np.zeros(src)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record(np.array(a.data[index]), (a,), backward)


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in parts)


def take(a, indices, axis=0) -> Tensor:
    """Gather along ``axis`` with integer indices (repeats allowed)."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    src = a.shape

    flat_idx = idx.reshape(-1)
    unique = np.unique(flat_idx).size == flat_idx.size

    def backward(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0).reshape((idx.size,) + moved.shape[1:])
        if unique:
            moved[flat_idx] = gm
        else:
            np.add.at(moved, flat_idx, gm)
        return (full,)

    return _record(np.take(a.data, idx, axis=axis), (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ---------------------------------------------------------------- attention


def softmax_masked(logits, mask) -> Tensor:
    """Softmax over the last axis restricted to entries with ``mask == 1``.

    Masked entries are exactly zero.  Every row needs at least one unmasked
    entry, otherwise :class:`EmptyAttentionError` is raised.
    """
    logits = _as_tensor(logits)
    m = np.asarray(mask, dtype=bool)
    if m.shape != logits.shape:
        raise DimensionError(f"softmax_masked: mask {m.shape} vs logits {logits.shape}")
    if not np.all(m.any(axis=-1)):
        raise EmptyAttentionError("every attention candidate is masked")
    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _record(out, (logits,), backward)


# ---------------------------------------------------------------- checking


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` receives ``inputs`` positionally and must return a scalar tensor.
    The error at each coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*inputs)
    if out.data.size != 1:
        raise DimensionError("grad_check: f must return a scalar")
    tape.backward(out)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = _eval_scalar(f, inputs)
            flat[i] = orig - eps
            lo = _eval_scalar(f, inputs)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def _eval_scalar(f, inputs) -> float:
    try:
        val = float(f(*inputs).data.reshape(-1)[0])
    except NumericalDomainError as exc:
        raise NumericalDomainError(f"grad_check: f not finite at perturbed point ({exc})") from exc
    if not np.isfinite(val):
        raise NumericalDomainError("grad_check: f not finite at perturbed point")
    return val
