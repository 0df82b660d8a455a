"""Dense float32 tensors with a reverse-mode tape.

Every operation records a node holding a forward function, a backward
function and the context the backward needs. Keeping the forward function
on the node lets a finished graph be replayed with new leaf values, which is
what the hardware-in-the-loop proxy graph relies on.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, UsageError

DTYPE = np.float32


def _as_array(value) -> np.ndarray:
    return np.asarray(value, dtype=DTYPE)


class Tensor:
    """An immutable-by-convention array plus its slot on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_fwd", "_bwd", "_ctx")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._op = "leaf"
        self._fwd = None
        self._bwd = None
        self._ctx = None

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def op(self) -> str:
        return self._op

    @property
    def parents(self) -> tuple["Tensor", ...]:
        return self._parents

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def backward(self, grad=None):
        backward(self, grad)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _record(op: str, parents: Sequence[Tensor], fwd: Callable, bwd: Callable) -> Tensor:
    """Run ``fwd`` on the parents' arrays and attach the node to the tape.

    ``fwd(*arrays) -> (out, ctx)``; ``bwd(ctx, grad_out, *arrays)`` returns one
    gradient (or None) per parent.
    """
    out_data, ctx = fwd(*(p.data for p in parents))
    out = Tensor(out_data)
    out._parents = tuple(parents)
    out._op = op
    out._fwd = fwd
    out._bwd = bwd
    out._ctx = ctx
    out.requires_grad = any(p.requires_grad for p in parents)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ----------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data)
    return _record(
        "add",
        (a, b),
        lambda x, y: ((x + y).astype(DTYPE), None),
        lambda ctx, g, x, y: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data)
    return _record(
        "sub",
        (a, b),
        lambda x, y: ((x - y).astype(DTYPE), None),
        lambda ctx, g, x, y: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _check_broadcast(a.data, b.data)
    return _record(
        "mul",
        (a, b),
        lambda x, y: ((x * y).astype(DTYPE), None),
        lambda ctx, g, x, y: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)),
    )


def power(a, exponent: float) -> Tensor:
    a = tensor(a)
    return _record(
        "pow",
        (a,),
        lambda x: ((x**exponent).astype(DTYPE), None),
        lambda ctx, g, x: ((g * exponent * x ** (exponent - 1)).astype(DTYPE),),
    )


def relu(a) -> Tensor:
    """Rectifier; the gradient at exactly zero is taken as zero."""
    a = tensor(a)
    return _record(
        "relu",
        (a,),
        lambda x: (np.maximum(x, 0).astype(DTYPE), None),
        lambda ctx, g, x: (g * (x > 0),),
    )


# ----------------------------------------------------------------------
# shape and reduction


def reshape(a, shape) -> Tensor:
    a = tensor(a)
    shape = tuple(int(s) for s in shape)

    def fwd(x):
        try:
            return x.reshape(shape), x.shape
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {x.shape} to {shape}") from exc

    return _record("reshape", (a,), fwd, lambda ctx, g, x: (g.reshape(ctx),))


def flatten(a) -> Tensor:
    a = tensor(a)
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    a = tensor(a)
    axes = None if axes is None else tuple(axes)

    def fwd(x):
        return np.ascontiguousarray(np.transpose(x, axes)), None

    def bwd(ctx, g, x):
        inv = None if axes is None else tuple(np.argsort(axes))
        return (np.transpose(g, inv),)

    return _record("transpose", (a,), fwd, bwd)


def tsum(a) -> Tensor:
    a = tensor(a)
    return _record(
        "sum",
        (a,),
        lambda x: (np.asarray(x.sum(dtype=np.float64), dtype=DTYPE), None),
        lambda ctx, g, x: (np.broadcast_to(g, x.shape).astype(DTYPE),),
    )


def tmean(a) -> Tensor:
    a = tensor(a)
    return _record(
        "mean",
        (a,),
        lambda x: (np.asarray(x.mean(dtype=np.float64), dtype=DTYPE), None),
        lambda ctx, g, x: ((np.broadcast_to(g, x.shape) / x.size).astype(DTYPE),),
    )


# ----------------------------------------------------------------------
# linear algebra and layers


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner extents differ: {a.shape} @ {b.shape}")
    return _record(
        "matmul",
        (a, b),
        lambda x, w: (x @ w, None),
        lambda ctx, g, x, w: (g @ w.T, x.T @ g),
    )


def dense(x, w, b=None) -> Tensor:
    out = matmul(x, w)
    return out if b is None else add(out, b)


def _out_extent(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"extent {size} (pad {pad}) incompatible with kernel {k} stride {stride}"
        )
    return span // stride + 1


def im2col(a, kernel: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Unfold an NCHW tensor into a ``(N*OH*OW, C*k*k)`` patch matrix."""
    a = tensor(a)
    if a.data.ndim != 4:
        raise DimensionError(f"im2col expects NCHW input, got {a.shape}")
    n, c, h, w = a.shape
    oh = _out_extent(h, kernel, stride, pad)
    ow = _out_extent(w, kernel, stride, pad)

    def fwd(x):
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        # (N, C, OH', OW', k, k) view; one copy when reordering to patch rows
        win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
        win = win[:, :, ::stride, ::stride]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(x.shape[0] * oh * ow, -1)
        return np.ascontiguousarray(cols, dtype=DTYPE), None

    def bwd(ctx, g, x):
        nb = x.shape[0]
        g6 = g.reshape(nb, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros((nb, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
        for i in range(kernel):
            for j in range(kernel):
                dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g6[:, :, i, j]
        return (dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp,)

    return _record("im2col", (a,), fwd, bwd)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution lowered to im2col followed by one matrix product.

    ``w`` is the lowered kernel of shape ``(C*k*k, C_out)``; the kernel size is
    inferred from it, so a ``(C_out, C, k, k)`` array must be reshaped by the
    caller with :func:`lower_kernel`.
    """
    x, w = tensor(x), tensor(w)
    n, c, h, wd = x.shape
    k = int(round(np.sqrt(w.shape[0] / c)))
    if k * k * c != w.shape[0]:
        raise DimensionError(f"kernel rows {w.shape[0]} do not match {c} input channels")
    oh = _out_extent(h, k, stride, pad)
    ow = _out_extent(wd, k, stride, pad)
    out = matmul(im2col(x, k, stride, pad), w)
    if b is not None:
        out = add(out, b)
    return transpose(reshape(out, (n, oh, ow, w.shape[1])), (0, 3, 1, 2))


def lower_kernel(kernel: np.ndarray) -> np.ndarray:
    """(C_out, C, k, k) -> (C*k*k, C_out), matching the im2col column order."""
    cout = kernel.shape[0]
    return np.ascontiguousarray(kernel.reshape(cout, -1).T)


def maxpool2d(a, kernel: int = 2, stride: int | None = None) -> Tensor:
    a = tensor(a)
    stride = kernel if stride is None else stride
    if a.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects NCHW input, got {a.shape}")
    _, _, h, w = a.shape
    oh = _out_extent(h, kernel, stride, 0)
    ow = _out_extent(w, kernel, stride, 0)

    tiled = kernel == stride

    def windows(x):
        for i in range(kernel):
            for j in range(kernel):
                yield i, j, x[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]

    def fwd(x):
        if tiled:
            n, c = x.shape[:2]
            blocks = x.reshape(n, c, oh, kernel, ow, kernel).transpose(0, 1, 2, 4, 3, 5)
            blocks = blocks.reshape(n, c, oh, ow, kernel * kernel)
            arg = blocks.argmax(axis=-1)
            best = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
            return best, arg
        best = None
        arg = np.zeros(x.shape[:2] + (oh, ow), dtype=np.int64)
        for idx, (_, _, win) in enumerate(windows(x)):
            if best is None:
                best = win.copy()
                continue
            better = win > best
            best[better] = win[better]
            arg[better] = idx
        return best, arg

    def bwd(arg, g, x):
        if tiled:
            n, c = x.shape[:2]
            blocks = np.zeros((n, c, oh, ow, kernel * kernel), dtype=DTYPE)
            np.put_along_axis(blocks, arg[..., None], g[..., None], axis=-1)
            blocks = blocks.reshape(n, c, oh, ow, kernel, kernel).transpose(0, 1, 2, 4, 3, 5)
            return (blocks.reshape(x.shape),)
        dx = np.zeros_like(x)
        for idx, (i, j, _) in enumerate(windows(x)):
            dx[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g * (arg == idx)
        return (dx,)

    return _record("maxpool2d", (a,), fwd, bwd)


def log_softmax(a) -> Tensor:
    a = tensor(a)

    def fwd(z):
        shifted = z - z.max(axis=1, keepdims=True)
        out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return out.astype(DTYPE), None

    def bwd(ctx, g, z):
        shifted = z - z.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        return ((g - p * g.sum(axis=1, keepdims=True)).astype(DTYPE),)

    return _record("log_softmax", (a,), fwd, bwd)


def softmax(z: np.ndarray) -> np.ndarray:
    """Plain-array softmax along the class axis (no tape)."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under softmax(``logits``)."""
    logits = tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} incompatible with labels {labels.shape}")
    rows = np.arange(labels.shape[0])
    scale = 1.0 / labels.shape[0] if reduction == "mean" else 1.0

    def fwd(z):
        shifted = z.astype(np.float64) - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1))
        nll = lse - shifted[rows, labels]
        return np.asarray(nll.sum() * scale, dtype=DTYPE), None

    def bwd(ctx, g, z):
        p = softmax(z)
        p[rows, labels] -= 1.0
        return ((p * (float(g) * scale)).astype(DTYPE),)

    return _record("softmax_cross_entropy", (logits,), fwd, bwd)


# ----------------------------------------------------------------------
# non-differentiable regions


def ste(a, transform: Callable[[np.ndarray], np.ndarray], name: str = "ste") -> Tensor:
    """Apply ``transform`` forward; pass the incoming gradient through unchanged."""
    a = tensor(a)
    return _record(
        name,
        (a,),
        lambda x: (_as_array(transform(x)), None),
        lambda ctx, g, x: (g,),
    )


def quantize(x: np.ndarray, step: float) -> np.ndarray:
    """Round to the nearest multiple of ``step`` (ties to even)."""
    return (np.round(np.asarray(x, dtype=np.float64) / step) * step).astype(DTYPE)


def pin(a, value: np.ndarray) -> Tensor:
    """Forward yields ``value`` regardless of ``a``; gradient flows to ``a``.

    Used to override forward quantities (cached activations, observed logits)
    while keeping the chain rule intact.
    """
    a = tensor(a)
    value = _as_array(value)
    if value.shape != a.shape:
        raise DimensionError(f"pinned value {value.shape} does not match {a.shape}")
    return _record("pin", (a,), lambda x: (value, None), lambda ctx, g, x: (g,))


def custom(op: str, parents: Sequence[Tensor], fwd: Callable, bwd: Callable) -> Tensor:
    """Record a user-defined op; see :func:`_record` for the calling contract."""
    return _record(op, [tensor(p) for p in parents], fwd, bwd)


# ----------------------------------------------------------------------
# graph traversal


def topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad=None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(node) into ``.grad`` of every grad-requiring node.

    Returns the raw gradient table keyed by node id (leaves included).
    """
    if not loss.requires_grad:
        raise UsageError("backward called on a graph with no grad-requiring leaves")
    if grad is None:
        if loss.data.size != 1:
            raise UsageError("backward on a non-scalar output needs an explicit gradient")
        grad = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {id(loss): _as_array(grad)}
    for node in reversed(topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node.is_leaf:
            continue
        parent_grads = node._bwd(node._ctx, g, *(p.data for p in node._parents))
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _as_array(pg)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return grads


def replay(root: Tensor, overrides: dict[Tensor, np.ndarray] | None = None) -> Tensor:
    """Recompute every node of ``root``'s graph in place.

    Leaves listed in ``overrides`` take the new values first. Gradients are
    cleared so a following :func:`backward` sees the replayed forward.
    """
    overrides = overrides or {}
    for leaf, value in overrides.items():
        value = _as_array(value)
        if value.shape != leaf.data.shape:
            raise DimensionError(f"override {value.shape} does not match leaf {leaf.shape}")
        leaf.data = value
    for node in topological_order(root):
        node.grad = None
        if not node.is_leaf:
            node.data, node._ctx = node._fwd(*(p.data for p in node._parents))
    return root


def zero_grad(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
