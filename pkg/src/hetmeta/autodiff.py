"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

A :class:`Tape` records every primitive applied to tensors it tracks while it
is active (inside its ``with`` block). Gradients are obtained with
:func:`backward` / :meth:`Tape.gradient`. Vector-Jacobian products are
themselves written in terms of primitives, so running ``backward`` while an
enclosing tape is active records the gradient computation on that tape and
makes gradients of gradients available::

    with Tape() as outer:
        outer.watch(w)
        with Tape() as inner:
            inner.watch(w)
            y = f(w)
        (g,) = inner.gradient(y, [w])     # recorded on ``outer``
        z = sum_(g * g)
    (h,) = outer.gradient(z, [w])
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "GradMap",
    "backward",
    "primitive_forward",
    "PRIMITIVES",
    "VJP_RULES",
    "NUMPY_VJP_RULES",
    "composite_backward",
    "linear",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "slice_",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sum_",
    "broadcast_to",
    "softmax",
    "log_softmax",
    "cross_entropy_loss",
    "as_tensor",
]


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class Tensor:
    """An n-dimensional float64 array that tapes can record operations on."""

    __slots__ = ("data",)
    __array_priority__ = 1000

    def __init__(self, data):
        self.data = np.array(data, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.data!r})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)


def _wrap(arr: np.ndarray) -> Tensor:
    t = object.__new__(Tensor)
    t.data = arr
    return t


def as_tensor(x) -> Tensor:
    """Return ``x`` unchanged if it is a Tensor, else a fresh constant Tensor."""
    if isinstance(x, Tensor):
        return x
    return _wrap(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# Tapes


_tape_ids = itertools.count()


class _ActiveStack(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []


_active = _ActiveStack()


class Tape:
    """Ordered record of primitive applications on tracked tensors.

    A tensor is tracked once it is passed to :meth:`watch` (a leaf) or is the
    output of a primitive recorded here. Recording only happens while the tape
    is active. Tapes opened inside another tape's block get that tape as
    ``parent``.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.entries: list[tuple] = []
        self.parent: Tape | None = None
        self._tracked: dict[int, Tensor] = {}
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = _active.tapes
        self.parent = stack[-1] if stack else None
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active.tapes
        if not stack or stack[-1] is not self:
            raise RuntimeError("tapes must be exited in LIFO order")
        stack.pop()

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensors, got {type(t).__name__}")
            self._tracked[id(t)] = t
            self._leaves[id(t)] = t

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def gradient(self, output: Tensor, sources: Sequence[Tensor], seed=None) -> list[Tensor]:
        gm = backward(self, output, seed)
        return [gm[s] for s in sources]


class GradMap(Mapping):
    """Gradients keyed by leaf identity; unreached leaves read as exact zeros."""

    def __init__(self, leaves: Iterable[Tensor], grads: dict[int, Tensor]):
        self._leaves = {id(t): t for t in leaves}
        self._grads = grads

    def __getitem__(self, leaf: Tensor) -> Tensor:
        g = self._grads.get(id(leaf))
        if g is not None:
            return g
        if id(leaf) not in self._leaves:
            raise KeyError("tensor is not a leaf of this tape")
        return _wrap(np.zeros_like(leaf.data))

    def __iter__(self):
        return iter(self._leaves.values())

    def __len__(self) -> int:
        return len(self._leaves)

    def __contains__(self, leaf) -> bool:
        return id(leaf) in self._leaves

    def reached(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads


def _record(name: str, out_arr: np.ndarray, inputs: tuple, ctx) -> Tensor:
    out = _wrap(out_arr)
    tapes = _active.tapes
    if tapes:
        for tape in tapes:
            tracked = tape._tracked
            for t in inputs:
                if id(t) in tracked:
                    tape.entries.append((name, inputs, out, ctx))
                    tracked[id(out)] = out
                    break
    return out


class _Options(threading.local):
    def __init__(self):
        self.numpy_backward = True


_options = _Options()


class composite_backward:
    """Context manager forcing backward sweeps through the recorded-primitive
    VJP rules even when no enclosing tape is active."""

    def __enter__(self):
        self._prev = _options.numpy_backward
        _options.numpy_backward = False
        return self

    def __exit__(self, *exc):
        _options.numpy_backward = self._prev


def backward(tape: Tape, output: Tensor, seed=None) -> GradMap:
    """Reverse sweep over ``tape`` from ``output``; returns gradients of all leaves.

    ``seed`` defaults to 1 and must otherwise match ``output``'s shape. Any
    tape active during the call records the sweep. With no active tape the
    sweep runs on plain arrays (``NUMPY_VJP_RULES``).
    """
    if id(output) not in tape._tracked:
        raise ValueError("backward: output was not produced under this tape")
    if seed is None:
        if output.size != 1:
            raise ShapeError(f"backward: non-scalar output {output.shape} needs an explicit seed")
        seed = _wrap(np.ones_like(output.data))
    else:
        seed = as_tensor(seed)
        if seed.shape != output.shape:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    if not _active.tapes and _options.numpy_backward:
        return _backward_numpy(tape, output, seed)
    tracked = tape._tracked
    leaves = tape._leaves
    grads: dict[int, Tensor] = {id(output): seed}
    leaf_grads: dict[int, Tensor] = {}
    if id(output) in leaves:
        leaf_grads[id(output)] = seed
    for name, inputs, out, ctx in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(id(t) in tracked for t in inputs)
        in_grads = VJP_RULES[name](g, inputs, out, ctx, needs)
        for t, need, gi in zip(inputs, needs, in_grads):
            if not need or gi is None:
                continue
            k = id(t)
            prev = grads.get(k)
            acc = gi if prev is None else add(prev, gi)
            grads[k] = acc
            if k in leaves:
                leaf_grads[k] = acc
    return GradMap(leaves.values(), leaf_grads)


def _backward_numpy(tape: Tape, output: Tensor, seed: Tensor) -> GradMap:
    tracked = tape._tracked
    leaves = tape._leaves
    grads: dict[int, np.ndarray] = {id(output): seed.data}
    leaf_grads: dict[int, np.ndarray] = {}
    if id(output) in leaves:
        leaf_grads[id(output)] = seed.data
    rules = NUMPY_VJP_RULES
    for name, inputs, out, ctx in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(id(t) in tracked for t in inputs)
        in_grads = rules[name](g, inputs, out, ctx, needs)
        for t, need, gi in zip(inputs, needs, in_grads):
            if not need or gi is None:
                continue
            k = id(t)
            prev = grads.get(k)
            acc = gi if prev is None else prev + gi
            grads[k] = acc
            if k in leaves:
                leaf_grads[k] = acc
    return GradMap(leaves.values(), {k: _wrap(np.array(v, dtype=np.float64)) for k, v in leaf_grads.items()})


# ---------------------------------------------------------------------------
# Shape helpers


def _suffix_compatible(a: tuple, b: tuple) -> bool:
    n = min(len(a), len(b))
    return n == 0 or a[len(a) - n :] == b[len(b) - n :]


def _elementwise(name: str, a, b) -> tuple[Tensor, Tensor]:
    a = a if type(a) is Tensor else as_tensor(a)
    b = b if type(b) is Tensor else as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb and not _suffix_compatible(sa, sb):
        raise ShapeError(f"{name}: incompatible shapes {sa} and {sb}")
    return a, b


def _unbroadcast(g: Tensor, shape: tuple) -> Tensor:
    extra = g.data.ndim - len(shape)
    if extra <= 0:
        return g
    return sum_(g, axis=tuple(range(extra)))


def _unbroadcast_np(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra <= 0:
        return g
    return g.sum(axis=tuple(range(extra)))


# ---------------------------------------------------------------------------
# Primitives. Each has a forward function, a VJP rule written in primitives
# (differentiable, used under an enclosing tape) and a plain-array twin.


def add(a, b) -> Tensor:
    a, b = _elementwise("add", a, b)
    return _record("add", a.data + b.data, (a, b), None)


def _add_vjp(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast(g, a.data.shape) if needs[0] else None,
        _unbroadcast(g, b.data.shape) if needs[1] else None,
    )


def _add_vjp_np(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast_np(g, a.data.shape) if needs[0] else None,
        _unbroadcast_np(g, b.data.shape) if needs[1] else None,
    )


def sub(a, b) -> Tensor:
    a, b = _elementwise("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), None)


def _sub_vjp(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast(g, a.data.shape) if needs[0] else None,
        _unbroadcast(neg(g), b.data.shape) if needs[1] else None,
    )


def _sub_vjp_np(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast_np(g, a.data.shape) if needs[0] else None,
        _unbroadcast_np(-g, b.data.shape) if needs[1] else None,
    )


def mul(a, b) -> Tensor:
    a, b = _elementwise("mul", a, b)
    return _record("mul", a.data * b.data, (a, b), None)


def _mul_vjp(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast(mul(g, b), a.data.shape) if needs[0] else None,
        _unbroadcast(mul(g, a), b.data.shape) if needs[1] else None,
    )


def _mul_vjp_np(g, inputs, out, ctx, needs):
    a, b = inputs
    return (
        _unbroadcast_np(g * b.data, a.data.shape) if needs[0] else None,
        _unbroadcast_np(g * a.data, b.data.shape) if needs[1] else None,
    )


def div(a, b) -> Tensor:
    a, b = _elementwise("div", a, b)
    return _record("div", a.data / b.data, (a, b), None)


def _div_vjp(g, inputs, out, ctx, needs):
    a, b = inputs
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(div(g, b), a.data.shape)
    if needs[1]:
        gb = _unbroadcast(neg(div(mul(g, out), b)), b.data.shape)
    return ga, gb


def _div_vjp_np(g, inputs, out, ctx, needs):
    a, b = inputs
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast_np(g / b.data, a.data.shape)
    if needs[1]:
        gb = _unbroadcast_np(-(g * out.data) / b.data, b.data.shape)
    return ga, gb


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), None)


def _neg_vjp(g, inputs, out, ctx, needs):
    return (neg(g),)


def _neg_vjp_np(g, inputs, out, ctx, needs):
    return (-g,)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes; batch axes broadcast from the left."""
    a = a if type(a) is Tensor else as_tensor(a)
    b = b if type(b) is Tensor else as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2] or not _suffix_compatible(sa[:-2], sb[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {sa} and {sb}")
    return _record("matmul", a.data @ b.data, (a, b), None)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.data.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(t, tuple(axes))


def _matmul_vjp(g, inputs, out, ctx, needs):
    a, b = inputs
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(matmul(g, _swap_last(b)), a.data.shape)
    if needs[1]:
        gb = _unbroadcast(matmul(_swap_last(a), g), b.data.shape)
    return ga, gb


def _matmul_vjp_np(g, inputs, out, ctx, needs):
    a, b = inputs
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast_np(g @ np.swapaxes(b.data, -1, -2), a.data.shape)
    if needs[1]:
        gb = _unbroadcast_np(np.swapaxes(a.data, -1, -2) @ g, b.data.shape)
    return ga, gb


def linear(x, weight, bias=None) -> Tensor:
    """Fused ``x @ weight.T (+ bias)`` for ``x: [B, in]``, ``weight: [out, in]``."""
    x = x if type(x) is Tensor else as_tensor(x)
    w = weight if type(weight) is Tensor else as_tensor(weight)
    sx, sw = x.data.shape, w.data.shape
    if len(sx) != 2 or len(sw) != 2 or sx[1] != sw[1]:
        raise ShapeError(f"linear: incompatible shapes {sx} and {sw}")
    out = x.data @ w.data.T
    if bias is None:
        return _record("linear", out, (x, w), None)
    b = bias if type(bias) is Tensor else as_tensor(bias)
    if b.data.shape != (sw[0],):
        raise ShapeError(f"linear: bias shape {b.data.shape} does not match weight {sw}")
    out += b.data
    return _record("linear", out, (x, w, b), None)


def _linear_vjp(g, inputs, out, ctx, needs):
    x, w = inputs[0], inputs[1]
    res = [
        matmul(g, w) if needs[0] else None,
        matmul(transpose(g), x) if needs[1] else None,
    ]
    if len(inputs) == 3:
        res.append(sum_(g, axis=0) if needs[2] else None)
    return res


def _linear_vjp_np(g, inputs, out, ctx, needs):
    x, w = inputs[0], inputs[1]
    res = [
        g @ w.data if needs[0] else None,
        g.T @ x.data if needs[1] else None,
    ]
    if len(inputs) == 3:
        res.append(g.sum(axis=0) if needs[2] else None)
    return res


def transpose(a, axes: tuple | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.data.shape}")
    return _record("transpose", a.data.transpose(axes), (a,), axes)


def _transpose_vjp(g, inputs, out, axes, needs):
    return (transpose(g, tuple(int(i) for i in np.argsort(axes))),)


def _transpose_vjp_np(g, inputs, out, axes, needs):
    return (g.transpose(np.argsort(axes)),)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot reshape {a.data.shape} to {shape}")
    return _record("reshape", a.data.reshape(shape), (a,), None)


def _reshape_vjp(g, inputs, out, ctx, needs):
    return (reshape(g, inputs[0].data.shape),)


def _reshape_vjp_np(g, inputs, out, ctx, needs):
    return (g.reshape(inputs[0].data.shape),)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: empty input list")
    nd = ts[0].data.ndim
    if nd == 0:
        raise ShapeError("concat: cannot concatenate scalars")
    ax = axis % nd
    ref = ts[0].data.shape
    for t in ts[1:]:
        s = t.data.shape
        if len(s) != nd or s[:ax] + s[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: incompatible shapes {ref} and {s} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = [0]
    for t in ts:
        bounds.append(bounds[-1] + t.data.shape[ax])
    return _record("concat", out, ts, (ax, bounds))


def _concat_index(ndim, ax, lo, hi):
    idx = [slice(None)] * ndim
    idx[ax] = slice(lo, hi)
    return tuple(idx)


def _concat_vjp(g, inputs, out, ctx, needs):
    ax, bounds = ctx
    nd = g.data.ndim
    return [
        slice_(g, _concat_index(nd, ax, bounds[i], bounds[i + 1])) if need else None
        for i, need in enumerate(needs)
    ]


def _concat_vjp_np(g, inputs, out, ctx, needs):
    ax, bounds = ctx
    return [
        g[_concat_index(g.ndim, ax, bounds[i], bounds[i + 1])] if need else None
        for i, need in enumerate(needs)
    ]


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack: empty input list")
    ref = ts[0].data.shape
    for t in ts[1:]:
        if t.data.shape != ref:
            raise ShapeError(f"stack: incompatible shapes {ref} and {t.data.shape}")
    ax = axis % (len(ref) + 1)
    return _record("stack", np.stack([t.data for t in ts], axis=ax), ts, ax)


def _stack_index(ndim, ax, i):
    idx = [slice(None)] * ndim
    idx[ax] = i
    return tuple(idx)


def _stack_vjp(g, inputs, out, ax, needs):
    return [slice_(g, _stack_index(g.data.ndim, ax, i)) if need else None for i, need in enumerate(needs)]


def _stack_vjp_np(g, inputs, out, ax, needs):
    return [g[_stack_index(g.ndim, ax, i)] if need else None for i, need in enumerate(needs)]


def _normalize_index(index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for i in index:
        if not isinstance(i, (slice, int, np.integer)):
            raise TypeError(f"slice: only basic indexing is supported, got {type(i).__name__}")
    return index


def slice_(a, index) -> Tensor:
    """Basic indexing with ints and slices."""
    a = as_tensor(a)
    index = _normalize_index(index)
    try:
        out = a.data[index]
    except IndexError as e:
        raise ShapeError(f"slice: {e} for shape {a.data.shape}") from None
    return _record("slice", np.asarray(out), (a,), index)


def _slice_vjp(g, inputs, out, index, needs):
    return (_embed(g, inputs[0].data.shape, index),)


def _slice_vjp_np(g, inputs, out, index, needs):
    buf = np.zeros(inputs[0].data.shape)
    buf[index] = g
    return (buf,)


def _embed(g, shape: tuple, index: tuple) -> Tensor:
    """Adjoint of slicing: zeros of ``shape`` with ``g`` written at ``index``."""
    g = as_tensor(g)
    buf = np.zeros(shape)
    buf[index] = g.data
    return _record("embed", buf, (g,), index)


def _embed_vjp(g, inputs, out, index, needs):
    return (slice_(g, index),)


def _embed_vjp_np(g, inputs, out, index, needs):
    return (g[index],)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), None)


def _sigmoid_vjp(g, inputs, out, ctx, needs):
    return (mul(g, mul(out, sub(1.0, out))),)


def _sigmoid_vjp_np(g, inputs, out, ctx, needs):
    s = out.data
    return (g * (s * (1.0 - s)),)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    return _record("tanh", np.tanh(a.data), (a,), None)


def _tanh_vjp(g, inputs, out, ctx, needs):
    return (mul(g, sub(1.0, mul(out, out))),)


def _tanh_vjp_np(g, inputs, out, ctx, needs):
    y = out.data
    return (g * (1.0 - y * y),)


def exp(a) -> Tensor:
    a = as_tensor(a)
    return _record("exp", np.exp(a.data), (a,), None)


def _exp_vjp(g, inputs, out, ctx, needs):
    return (mul(g, out),)


def _exp_vjp_np(g, inputs, out, ctx, needs):
    return (g * out.data,)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), None)


def _log_vjp(g, inputs, out, ctx, needs):
    return (div(g, inputs[0]),)


def _log_vjp_np(g, inputs, out, ctx, needs):
    return (g / inputs[0].data,)


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, (int, np.integer)):
        axis = (axis,)
    axes = tuple(sorted(int(a) % ndim for a in axis))
    if len(set(axes)) != len(axes):
        raise ShapeError(f"sum: repeated axis in {axis}")
    return axes


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    nd = a.data.ndim
    if nd == 0:
        return _record("sum", a.data.copy(), (a,), ((), keepdims))
    axes = _norm_axes(axis, nd)
    return _record("sum", np.sum(a.data, axis=axes, keepdims=keepdims), (a,), (axes, keepdims))


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _sum_vjp(g, inputs, out, ctx, needs):
    axes, keepdims = ctx
    shape = inputs[0].data.shape
    if not keepdims and axes:
        g = reshape(g, _keepdims_shape(shape, axes))
    return (broadcast_to(g, shape),)


def _sum_vjp_np(g, inputs, out, ctx, needs):
    axes, keepdims = ctx
    shape = inputs[0].data.shape
    if not keepdims and axes:
        g = np.reshape(g, _keepdims_shape(shape, axes))
    return (np.broadcast_to(g, shape),)


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast (size-1 axes and new leading axes)."""
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.data.shape} to {shape}") from None
    return _record("broadcast_to", out, (a,), None)


def _broadcast_axes(shape, gshape):
    extra = len(gshape) - len(shape)
    axes = list(range(extra))
    axes += [extra + i for i, s in enumerate(shape) if s == 1 and gshape[extra + i] != 1]
    return extra, tuple(axes)


def _broadcast_vjp(g, inputs, out, ctx, needs):
    shape = inputs[0].data.shape
    extra, axes = _broadcast_axes(shape, g.data.shape)
    if not axes:
        return (g,)
    r = sum_(g, axis=axes, keepdims=True)
    if extra:
        r = reshape(r, shape)
    return (r,)


def _broadcast_vjp_np(g, inputs, out, ctx, needs):
    shape = inputs[0].data.shape
    extra, axes = _broadcast_axes(shape, g.shape)
    if not axes:
        return (g,)
    return (g.sum(axis=axes, keepdims=True).reshape(shape),)


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    x = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(x)
    return _record("softmax", e / np.sum(e, axis=-1, keepdims=True), (a,), None)


def _softmax_vjp(g, inputs, out, ctx, needs):
    inner = sum_(mul(g, out), axis=-1, keepdims=True)
    return (mul(out, sub(g, broadcast_to(inner, out.data.shape))),)


def _softmax_vjp_np(g, inputs, out, ctx, needs):
    y = out.data
    return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)


def log_softmax(a) -> Tensor:
    """Numerically stable log of :func:`softmax` over the last axis."""
    a = as_tensor(a)
    x = a.data - np.max(a.data, axis=-1, keepdims=True)
    out = x - np.log(np.sum(np.exp(x), axis=-1, keepdims=True))
    return _record("log_softmax", out, (a,), None)


def _log_softmax_vjp(g, inputs, out, ctx, needs):
    gs = broadcast_to(sum_(g, axis=-1, keepdims=True), out.data.shape)
    return (sub(g, mul(exp(out), gs)),)


def _log_softmax_vjp_np(g, inputs, out, ctx, needs):
    return (g - np.exp(out.data) * np.sum(g, axis=-1, keepdims=True),)


VJP_RULES: dict[str, Callable] = {
    "add": _add_vjp,
    "sub": _sub_vjp,
    "mul": _mul_vjp,
    "div": _div_vjp,
    "neg": _neg_vjp,
    "matmul": _matmul_vjp,
    "linear": _linear_vjp,
    "transpose": _transpose_vjp,
    "reshape": _reshape_vjp,
    "concat": _concat_vjp,
    "stack": _stack_vjp,
    "slice": _slice_vjp,
    "embed": _embed_vjp,
    "sigmoid": _sigmoid_vjp,
    "tanh": _tanh_vjp,
    "exp": _exp_vjp,
    "log": _log_vjp,
    "sum": _sum_vjp,
    "broadcast_to": _broadcast_vjp,
    "softmax": _softmax_vjp,
    "log_softmax": _log_softmax_vjp,
}

NUMPY_VJP_RULES: dict[str, Callable] = {
    "add": _add_vjp_np,
    "sub": _sub_vjp_np,
    "mul": _mul_vjp_np,
    "div": _div_vjp_np,
    "neg": _neg_vjp_np,
    "matmul": _matmul_vjp_np,
    "linear": _linear_vjp_np,
    "transpose": _transpose_vjp_np,
    "reshape": _reshape_vjp_np,
    "concat": _concat_vjp_np,
    "stack": _stack_vjp_np,
    "slice": _slice_vjp_np,
    "embed": _embed_vjp_np,
    "sigmoid": _sigmoid_vjp_np,
    "tanh": _tanh_vjp_np,
    "exp": _exp_vjp_np,
    "log": _log_vjp_np,
    "sum": _sum_vjp_np,
    "broadcast_to": _broadcast_vjp_np,
    "softmax": _softmax_vjp_np,
    "log_softmax": _log_softmax_vjp_np,
}

PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "linear": linear,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "stack": lambda *ts, axis=0: stack(ts, axis=axis),
    "slice": slice_,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sum": sum_,
    "broadcast_to": broadcast_to,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def primitive_forward(op: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply primitive ``op`` by name (records on any active tape tracking an input)."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **kwargs)


def cross_entropy_loss(logits, labels) -> Tensor:
    """Mean softmax cross-entropy.

    ``logits`` is ``[N_way]`` with an integer ``labels``, or ``[B, N_way]`` with
    ``B`` integer labels.
    """
    logits = as_tensor(logits)
    single = logits.data.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.data.shape[0]))
    labels = np.atleast_1d(np.asarray(labels))
    if logits.data.ndim != 2 or labels.shape != (logits.data.shape[0],):
        raise ShapeError(
            f"cross_entropy_loss: logits {logits.data.shape} do not match labels {labels.shape}"
        )
    n_way = logits.data.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_way):
        raise ValueError(f"cross_entropy_loss: label out of range [0, {n_way})")
    weights = np.zeros(logits.data.shape)
    weights[np.arange(labels.size), labels.astype(np.int64)] = -1.0 / labels.size
    return sum_(mul(log_softmax(logits), _wrap(weights)))
