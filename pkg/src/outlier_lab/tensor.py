"""Dense float64 tensors with tape-based reverse-mode autodiff.

Only the primitives the transformer needs are provided.  Every primitive
computes its value eagerly with numpy and, when an active :class:`Tape` is
recording and some input requires a gradient, appends a node holding the
vector-Jacobian product closure.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, 2.0], requires_grad=True)
    ...     loss = sum_axis(mul(x, x))
    ...     tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar, used sparingly in the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op, inputs, output, vjp):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives.

    A tape is confined to the thread that entered it.  Nodes are appended in
    execution order, which is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, vjp: Callable) -> None:
        output.node_id = len(self.nodes)
        self.nodes.append(_Node(op, tuple(inputs), output, vjp))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].output is not loss:
            raise ValueError("backward: loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            in_grads = node.vjp(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if inp.node_id is None:
                    # leaf
                    inp.grad = ig.copy() if inp.grad is None else inp.grad + ig
                elif key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def backward(loss: Tensor) -> None:
    """Backpropagate through the innermost active tape."""
    tape = _active_tape()
    if tape is None:
        raise ValueError("backward: no active tape")
    tape.backward(loss)


def _emit(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(op, inputs, out, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# primitives ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # (..., n, k) @ (k, m): one GEMM over the folded leading dims
        k, m = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (m,))

        def vjp2(g):
            g2 = g.reshape(-1, m)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _emit("matmul", (a, b), out, vjp2)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}") from None

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), out, vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", (a, b), out, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit("mul", (a, b), out, vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    out = x.data * c
    return _emit("scale", (x,), out, lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _emit("exp", (x,), out, lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(~(x.data > 0)):
        raise DomainError(f"log: input must be strictly positive (min={np.min(x.data)!r})")
    out = np.log(x.data)
    return _emit("log", (x,), out, lambda g: (g / x.data,))


def sum_axis(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum_axis", (x,), np.asarray(out), vjp)


def max_axis(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    x = as_tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gx = np.zeros_like(x.data)
        ge = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), ge, axis=axis)
        return (gx,)

    return _emit("max_axis", (x,), out, vjp)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``.  Gradient flows only where ``lo < x < hi``."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    inside = (x.data > lo) & (x.data < hi)
    return _emit("clip", (x,), out, lambda g: (g * inside,))


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    x = as_tensor(x)
    ins = [x]
    d = x.shape[-1]
    if gain is not None:
        gain = as_tensor(gain)
        if gain.shape != (d,):
            raise ShapeError(f"layer_norm: gain shape {gain.shape} does not match feature size {d}")
        ins.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (d,):
            raise ShapeError(f"layer_norm: bias shape {bias.shape} does not match feature size {d}")
        ins.append(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gh = g * gain.data if gain is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gain is not None:
            res.append((g * xhat).reshape(-1, d).sum(axis=0))
        if bias is not None:
            res.append(g.reshape(-1, d).sum(axis=0))
        return tuple(res)

    return _emit("layer_norm", ins, out, vjp)


_GELU_C = 0.7978845608028654  # sqrt(2 / pi)
_GELU_K = 0.044715


def gelu(x) -> Tensor:
    """GELU, tanh form: ``0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))``."""
    x = as_tensor(x)
    xd = x.data
    x2 = xd * xd
    th = x2 * _GELU_K
    th += 1.0
    th *= xd
    th *= _GELU_C
    np.tanh(th, out=th)
    out = th + 1.0
    out *= xd
    out *= 0.5

    def vjp(g):
        # d/dx = 0.5 (1 + th) + 0.5 x (1 - th^2) C (1 + 3 K x^2)
        d = x2 * (3.0 * _GELU_K)
        d += 1.0
        d *= _GELU_C
        d *= xd
        s = th * th
        np.subtract(1.0, s, out=s)
        d *= s
        d += th
        d += 1.0
        d *= 0.5
        d *= g
        return (d,)

    return _emit("gelu", (x,), out, vjp)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError(f"embedding_lookup: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_lookup: ids out of range for table {table.shape}")
    out = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _emit("embedding_lookup", (table,), out, vjp)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _emit("transpose", (x,), out, lambda g: (np.transpose(g, inv),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True with ``value``."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask, value, x.data)
    keep = ~mask
    return _emit("masked_fill", (x,), out, lambda g: (_unbroadcast(g * keep, x.shape),))


IGNORE_INDEX = -100


def cross_entropy(logits, targets) -> Tensor:
    """Mean token cross-entropy over rows whose target is not ``IGNORE_INDEX``.

    ``logits`` is (N, V); ``targets`` is (N,) of ints.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if logits.data.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    valid = targets != IGNORE_INDEX
    n = int(valid.sum())
    if n == 0:
        raise ValueError("cross_entropy: no target positions")
    t = np.where(valid, targets, 0)
    if t.min() < 0 or t.max() >= logits.shape[1]:
        raise ShapeError("cross_entropy: target id out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(t))
    nll = lse - z[rows, t]
    out = np.asarray(nll[valid].sum() / n)

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        p *= (valid / n)[:, None]
        return (p * g,)

    return _emit("cross_entropy", (logits,), out, vjp)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "scale": scale,
    "exp": exp,
    "log": log,
    "sum_axis": sum_axis,
    "max_axis": max_axis,
    "clip": clip,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "embedding_lookup": embedding_lookup,
    "transpose": transpose,
    "reshape": reshape,
    "masked_fill": masked_fill,
    "cross_entropy": cross_entropy,
}


def primitive_forward(op_kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("clip", [x], lo=0, hi=1)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **attrs)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``f`` and central differences.

    Inputs sitting on a clip boundary or a max tie are outside the contract;
    the caller must keep away from them.
    """
    x0 = np.array(as_tensor(x).data, dtype=DTYPE)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
        tape.backward(y)
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x0)
    numeric = np.empty_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
