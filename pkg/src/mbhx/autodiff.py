"""Dense tensors with reverse-mode automatic differentiation.

Images use the ``(batch, channel, height, width)`` layout.  Every operation
returns a new :class:`Tensor`; the graph is recorded only when at least one
operand requires a gradient.  Operations keep the floating dtype of their
inputs, so float64 graphs are used for gradient checks and float32 graphs for
training.

Dense convolutions lower to one matrix product over an im2col buffer whose
rows are ordered (channel, kernel row, kernel column); depthwise convolutions
accumulate kernel offsets in row-major order.  Either way the summation order
is fixed, so results are bit-reproducible for a fixed numpy/BLAS build and
thread count.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractViolation, NumericError

__all__ = [
    "Tensor",
    "add",
    "backward",
    "concat_channels",
    "conv2d",
    "depthwise_conv2d",
    "max_pool2d",
    "mul",
    "reduce_mean_abs",
    "reduce_mean_sq",
    "relu",
    "repeat_channels",
    "scalar_mul",
    "separable_conv2d",
    "sigmoid",
    "slice_channels",
    "sub",
    "sum_all",
    "upsample_bilinear",
]

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A value in the differentiation graph.

    ``grad`` is allocated (zero-filled) only for tensors with
    ``requires_grad=True`` and keeps accumulating across :func:`backward`
    calls until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 parents: tuple["Tensor", ...] = (), backward_fn: BackwardFn | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > 4:
            raise ContractViolation(f"tensors have at most 4 dimensions, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise NumericError(f"non-finite value in tensor {name or ''} of shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self.parents = parents
        self._backward = backward_fn
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    if any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=False, parents=parents, backward_fn=backward_fn)
        # interior nodes carry the flag but no persistent grad buffer
        out.requires_grad = True
        return out
    return Tensor(data)


def _require_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ContractViolation(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _require_image(op: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ContractViolation(f"{op}: expected a 4-d NCHW tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# backward pass


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto whatever the leaves already hold; call
    :meth:`Tensor.zero_grad` between steps.
    """
    if root.data.size != 1:
        raise ContractViolation(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(_topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is not None:
                node.grad += g
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# elementwise family


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _node(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("sub", a, b)
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("mul", a, b)
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    """Logistic function, kept strictly inside (0, 1) even where it saturates."""
    info = np.finfo(a.dtype)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    s = np.clip(s, info.tiny, 1.0 - info.epsneg).astype(a.dtype)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reduce_mean_abs(a: Tensor, b: Tensor) -> Tensor:
    """Mean of |a - b|; the subgradient at a == b is 0."""
    _require_same_shape("reduce_mean_abs", a, b)
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)

    def bw(g):
        ga = sign * (g / n)
        return ga, -ga

    return _node(np.asarray(np.abs(diff).mean()), (a, b), bw)


def reduce_mean_sq(a: Tensor, b: Tensor) -> Tensor:
    """Mean of (a - b)**2."""
    _require_same_shape("reduce_mean_sq", a, b)
    diff = a.data - b.data
    n = diff.size

    def bw(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _node(np.asarray(np.square(diff).mean()), (a, b), bw)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_image("concat_channels", a)
    _require_image("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ContractViolation(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _node(np.concatenate([a.data, b.data], axis=1), (a, b),
                 lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    _require_image("slice_channels", a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ContractViolation(f"slice_channels: bad range [{start}, {stop}) for shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return _node(a.data[:, start:stop].copy(), (a,), bw)


def repeat_channels(a: Tensor, n: int) -> Tensor:
    """Broadcast a single-channel image to ``n`` identical channels."""
    _require_image("repeat_channels", a)
    if a.shape[1] != 1:
        raise ContractViolation(f"repeat_channels: expected 1 channel, got shape {a.shape}")
    return _node(np.repeat(a.data, n, axis=1), (a,), lambda g: (g.sum(axis=1, keepdims=True),))


# ---------------------------------------------------------------------------
# convolutions


def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ContractViolation(f"padding must be 'same' or 'valid', got {padding!r}")
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ContractViolation(f"input {h}x{w} too small for a {k}x{k} kernel")
    return pad, ho, wo


def _window(xp: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def _check_kernel(op: str, x: Tensor, kernel: Tensor, depthwise: bool) -> int:
    _require_image(op, x)
    ks = kernel.shape
    if depthwise:
        ok = len(ks) == 3 and ks[0] == x.shape[1] and ks[1] == ks[2]
    else:
        ok = len(ks) == 4 and ks[1] == x.shape[1] and ks[2] == ks[3]
    if not ok or ks[-1] % 2 == 0:
        raise ContractViolation(f"{op}: kernel shape {ks} incompatible with input shape {x.shape}")
    return ks[-1]


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Rows ordered (channel, kernel row, kernel col); columns (batch, y, x)."""
    n, c = xp.shape[:2]
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, shape=(c, k, k, n, ho, wo), strides=(sc, sh, sw, sn, sh * stride, sw * stride), writeable=False)
    return win.reshape(c * k * k, n * ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """Cross-correlation of ``x`` (N,C,H,W) with ``kernel`` (O,C,k,k), k odd.

    With ``padding='same'`` the output extent is ``ceil(H / stride)``.
    """
    k = _check_kernel("conv2d", x, kernel, depthwise=False)
    if stride < 1:
        raise ContractViolation(f"conv2d: stride must be positive, got {stride}")
    n, c, h, w = x.shape
    o = kernel.shape[0]
    if bias is not None and bias.shape != (o,):
        raise ContractViolation(f"conv2d: bias shape {bias.shape} does not match kernel shape {kernel.shape}")
    pad, ho, wo = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    wmat = kernel.data.reshape(o, c * k * k)
    out = np.matmul(wmat, cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    else:
        out = np.ascontiguousarray(out)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        gx = gw = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gmat).reshape(c, k, k, n, ho, wo)
            gxp = np.zeros((n, c) + xp.shape[2:], dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    _window(gxp, i, j, stride, ho, wo)[...] += gcols[:, i, j].transpose(1, 0, 2, 3)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if kernel.requires_grad:
            gw = np.matmul(gmat, cols.T).reshape(kernel.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out, parents, bw)


def depthwise_conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """Per-channel cross-correlation with ``kernel`` of shape (C,k,k)."""
    k = _check_kernel("depthwise_conv2d", x, kernel, depthwise=True)
    n, c, h, w = x.shape
    pad, ho, wo = _conv_geometry(h, w, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wd = kernel.data
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += _window(xp, i, j, stride, ho, wo) * wd[None, :, i, j, None, None]

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    _window(gxp, i, j, stride, ho, wo)[...] += g * wd[None, :, i, j, None, None]
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        if kernel.requires_grad:
            gw = np.zeros(wd.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gw[:, i, j] = (g * _window(xp, i, j, stride, ho, wo)).sum(axis=(0, 2, 3))
        return gx, gw

    return _node(out, (x, kernel), bw)


def separable_conv2d(x: Tensor, depthwise_kernel: Tensor, pointwise_kernel: Tensor,
                     bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Depthwise k×k pass (same padding, optional stride) then a 1×1 pointwise conv.

    ``pointwise_kernel`` has shape (O,C,1,1).
    """
    if pointwise_kernel.data.ndim != 4 or pointwise_kernel.shape[2:] != (1, 1):
        raise ContractViolation(
            f"separable_conv2d: pointwise kernel must be (O,C,1,1), got {pointwise_kernel.shape}")
    mid = depthwise_conv2d(x, depthwise_kernel, stride=stride, padding="same")
    return conv2d(mid, pointwise_kernel, bias, stride=1, padding="same")


# ---------------------------------------------------------------------------
# resampling


def _bilinear_matrix(n_in: int, factor: int, dtype) -> np.ndarray:
    """Row i holds the weights producing output sample i (align_corners=False)."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m.astype(dtype)


def upsample_bilinear(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling by 2 or 4 with the align_corners=False convention.

    Output sample ``i`` reads source coordinate ``(i + 0.5) / factor - 0.5``,
    clamped to the valid range.
    """
    _require_image("upsample_bilinear", x)
    if factor not in (2, 4):
        raise ContractViolation(f"upsample_bilinear: factor must be 2 or 4, got {factor}")
    _, _, h, w = x.shape
    mh = _bilinear_matrix(h, factor, x.dtype)
    mw = _bilinear_matrix(w, factor, x.dtype)
    out = np.matmul(np.matmul(mh, x.data), mw.T)
    return _node(out, (x,), lambda g: (np.matmul(np.matmul(mh.T, g), mw),))


def max_pool2d(x: Tensor) -> Tensor:
    """2×2 max pooling, stride 2, ceil mode (odd extents keep their last row/column)."""
    _require_image("max_pool2d", x)
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    xp = x.data
    if (h % 2) or (w % 2):
        xp = np.pad(xp, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
                    constant_values=-np.inf)
    win = xp.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gwin = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gxp = gwin.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (gxp[:, :, :h, :w],)

    return _node(out, (x,), bw)
