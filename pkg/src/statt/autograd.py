"""Reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: every operation returns a new :class:`Tensor` that records
its parents and a closure mapping the output gradient to parent gradient
contributions.  :func:`backward` sweeps the reachable graph in reverse
construction order (every consumer is visited before its producers) and
accumulates gradients additively across fan-out.

float32 is the training precision; :func:`grad_check` requires float64.
Values are stored row-major; no implicit broadcasting is performed beyond
batched application of :func:`affine` over leading axes and scalar
:func:`scale` factors, which keeps shape rules auditable.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericalError, ShapeError

__all__ = [
    "Tensor",
    "backward",
    "grad_or_zeros",
    "zero_grads",
    "no_grad",
    "set_finite_check",
    "add",
    "hadamard",
    "scale",
    "affine",
    "activation",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "log",
    "clamp_min",
    "mean",
    "reduce_sum",
    "concat",
    "stack",
    "narrow",
    "reshape",
    "transpose",
    "conv2d",
    "transposed_conv2d",
    "maxpool2d",
    "time_weighted_sum",
    "grad_check",
    "GradCheckReport",
]

_ids = itertools.count()
_grad_enabled = True
_finite_check = False


def set_finite_check(enabled: bool) -> None:
    """Toggle per-op NaN/Inf screening.

    Off by default: the training loop checks losses and gradients at the
    points where aborting has a defined meaning, and the full-array scan
    is measurable overhead on large graphs.
    """
    global _finite_check
    _finite_check = bool(enabled)


@contextmanager
def no_grad():
    """Skip graph construction inside the context (pure value compute)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A dense float array plus its place in the computation graph.

    ``data`` is treated as immutable once the tensor has been consumed by
    an operation; only leaf parameters may be updated in place (by the
    optimizer or the gradient checker) between graph constructions.
    """

    __slots__ = ("id", "data", "grad", "requires_grad", "op", "parents", "_vjp",
                 "meta")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.id = next(_ids)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], None] | None = None
        self.meta = None  # op-specific state (pool argmax, clamp floor)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.dtype})"


def _node(op: str, parents: tuple[Tensor, ...], data: np.ndarray,
          vjp: Callable[[np.ndarray], None]) -> Tensor:
    if _finite_check and not np.all(np.isfinite(data)):
        raise NumericalError(f"{op}: non-finite values in output")
    out = Tensor(data)
    out.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._vjp = vjp
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _lift(v, like: Tensor | None = None) -> Tensor:
    if isinstance(v, Tensor):
        return v
    dtype = like.dtype if like is not None else None
    return Tensor(v, dtype=dtype)


def _check_same(op: str, x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{op}: operand shapes differ, {x.shape} vs {y.shape}")
    if x.dtype != y.dtype:
        raise ShapeError(f"{op}: operand dtypes differ, {x.dtype} vs {y.dtype}")


def _reachable(root: Tensor) -> list[Tensor]:
    """Every node reachable from ``root`` via parents, construction order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[Tensor] = [root]
    while stack:
        node = stack.pop()
        if node.id in seen:
            continue
        seen.add(node.id)
        order.append(node)
        stack.extend(node.parents)
    order.sort(key=lambda n: n.id)
    return order


def backward(root: Tensor) -> None:
    """Propagate d(root)/d(node) into ``.grad`` over the reachable graph.

    The root must be scalar.  Parameters that do not appear in the graph
    are untouched (their gradient is zero by convention; see
    :func:`grad_or_zeros`).
    """
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    # Parents are always constructed before their consumers, so descending
    # construction id visits every node after all of its consumers.
    root.grad = np.ones_like(root.data)
    for node in reversed(_reachable(root)):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def grad_or_zeros(t: Tensor) -> np.ndarray:
    """Gradient of a leaf, with unreachable-from-root parameters as zeros."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return t.grad


def zero_grads(params) -> None:
    tensors = params.values() if isinstance(params, Mapping) else params
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(x, y) -> Tensor:
    x = _lift(x)
    y = _lift(y, like=x)
    _check_same("add", x, y)

    def vjp(g):
        _accum(x, g)
        _accum(y, g)

    return _node("add", (x, y), x.data + y.data, vjp)


def hadamard(x, y) -> Tensor:
    """Elementwise product of two same-shape tensors."""
    x = _lift(x)
    y = _lift(y, like=x)
    _check_same("hadamard", x, y)

    def vjp(g):
        if x.requires_grad:
            _accum(x, g * y.data)
        if y.requires_grad:
            _accum(y, g * x.data)

    return _node("hadamard", (x, y), x.data * y.data, vjp)


def scale(x: Tensor, s) -> Tensor:
    """Multiply a tensor by a scalar (python float or scalar tensor)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: factor must be scalar, got shape {s.shape}")
        factor = s.data.reshape(())

        def vjp(g):
            if x.requires_grad:
                _accum(x, g * factor)
            if s.requires_grad:
                _accum(s, np.sum(g * x.data).reshape(s.shape).astype(s.dtype))

        return _node("scale", (x, s), x.data * factor, vjp)

    c = x.dtype.type(s)

    def vjp_const(g):
        _accum(x, g * c)

    return _node("scale", (x,), x.data * c, vjp_const)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    def vjp(g):
        _accum(x, g * (x.data > 0))

    return _node("relu", (x,), np.maximum(x.data, 0), vjp)


def _sigmoid_values(v: np.ndarray) -> np.ndarray:
    # Piecewise form avoids exp overflow for large negative inputs.
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid_values(x.data)

    def vjp(g):
        _accum(x, g * (y * (1.0 - y)))

    return _node("sigmoid", (x,), y, vjp)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def vjp(g):
        _accum(x, g * (1.0 - y * y))

    return _node("tanh", (x,), y, vjp)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(
            f"unknown activation {kind!r}, expected one of {sorted(_ACTIVATIONS)}"
        ) from None
    return fn(x)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax along one axis, stabilized by max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        _accum(x, y * (g - dot))

    return _node("softmax", (x,), y, vjp)


def log(x: Tensor) -> Tensor:
    def vjp(g):
        _accum(x, g / x.data)

    return _node("log", (x,), np.log(x.data), vjp)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the clamped region gets zero gradient."""
    f = x.dtype.type(floor)

    def vjp(g):
        _accum(x, g * (x.data >= f))

    out = _node("clamp_min", (x,), np.maximum(x.data, f), vjp)
    out.meta = float(f)
    return out


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------

def _normalize_axes(ndim: int, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for a in axes:
        if not -ndim <= a < ndim:
            raise ShapeError(f"axis {a} out of range for {ndim}-d tensor")
        out.append(a % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes in {tuple(axes)}")
    return tuple(sorted(out))


def mean(x: Tensor, axes=None) -> Tensor:
    """Mean over the given axes (all axes when omitted)."""
    axes = _normalize_axes(x.ndim, axes)
    count = 1
    for a in axes:
        count *= x.shape[a]
    y = np.mean(x.data, axis=axes)

    def vjp(g):
        gg = np.expand_dims(g, axes) if axes else g
        _accum(x, np.broadcast_to(gg / count, x.shape))

    return _node("mean", (x,), y, vjp)


def reduce_sum(x: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(x.ndim, axes)
    y = np.sum(x.data, axis=axes)

    def vjp(g):
        gg = np.expand_dims(g, axes) if axes else g
        _accum(x, np.broadcast_to(gg, x.shape))

    return _node("sum", (x,), y, vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ShapeError("concat: need at least one tensor")
    ref = xs[0]
    if not -ref.ndim <= axis < ref.ndim:
        raise ShapeError(f"concat: axis {axis} out of range for shape {ref.shape}")
    axis = axis % ref.ndim
    for i, t in enumerate(xs[1:], start=1):
        a = list(ref.shape)
        b = list(t.shape)
        a[axis] = b[axis] = -1
        if a != b or t.ndim != ref.ndim:
            raise ShapeError(
                f"concat: input {i} shape {t.shape} incompatible with {ref.shape} "
                f"along axis {axis}"
            )
    y = np.concatenate([t.data for t in xs], axis=axis)

    def vjp(g):
        start = 0
        for t in xs:
            size = t.shape[axis]
            sl = tuple(
                slice(start, start + size) if d == axis else slice(None)
                for d in range(t.ndim)
            )
            _accum(t, g[sl])
            start += size

    return _node("concat", tuple(xs), y, vjp)


def stack(xs: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    xs = [_lift(x) for x in xs]
    if not xs:
        raise ShapeError("stack: need at least one tensor")
    for i, t in enumerate(xs[1:], start=1):
        if t.shape != xs[0].shape:
            raise ShapeError(f"stack: input {i} shape {t.shape} != {xs[0].shape}")
    y = np.stack([t.data for t in xs])

    def vjp(g):
        for i, t in enumerate(xs):
            _accum(t, g[i])

    return _node("stack", tuple(xs), y, vjp)


def narrow(x: Tensor, axis: int, start: int, size: int) -> Tensor:
    """Contiguous slice of length ``size`` starting at ``start`` on one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"narrow: axis {axis} out of range for shape {x.shape}")
    axis = axis % x.ndim
    if size <= 0 or start < 0 or start + size > x.shape[axis]:
        raise ShapeError(
            f"narrow: window [{start}, {start + size}) outside axis {axis} "
            f"of length {x.shape[axis]}"
        )
    sl = tuple(
        slice(start, start + size) if d == axis else slice(None) for d in range(x.ndim)
    )

    def vjp(g):
        if x.requires_grad:
            buf = np.zeros_like(x.data)
            buf[sl] = g
            _accum(x, buf)

    return _node("narrow", (x,), x.data[sl], vjp)


def reshape(x: Tensor, shape) -> Tensor:
    def vjp(g):
        _accum(x, g.reshape(x.shape))

    return _node("reshape", (x,), x.data.reshape(shape), vjp)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(a % x.ndim for a in axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inverse = tuple(np.argsort([a % x.ndim for a in axes]))

    def vjp(g):
        _accum(x, np.transpose(g, inverse))

    return _node("transpose", (x,), np.transpose(x.data, axes), vjp)


# ---------------------------------------------------------------------------
# linear / convolutional ops
# ---------------------------------------------------------------------------

def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w.T + b with w of shape [m, n].

    ``x`` may carry arbitrary leading axes; the contraction is over its
    last axis.  ``b`` (shape [m]) is optional so recurrent cells can sum
    two affine maps while adding each bias exactly once.
    """
    if w.ndim != 2:
        raise ShapeError(f"affine: weight must be 2-d, got shape {w.shape}")
    m, n = w.shape
    if x.ndim < 1 or x.shape[-1] != n:
        raise ShapeError(
            f"affine: last axis of x is {x.shape[-1] if x.ndim else None}, "
            f"weight expects {n}"
        )
    if b is not None and b.shape != (m,):
        raise ShapeError(f"affine: bias shape {b.shape} != ({m},)")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gf = g.reshape(-1, m)
        if x.requires_grad:
            _accum(x, (gf @ w.data).reshape(x.shape))
        if w.requires_grad:
            _accum(w, gf.T @ x.data.reshape(-1, n))
        if b is not None and b.requires_grad:
            _accum(b, gf.sum(axis=0))

    return _node("affine", parents, y, vjp)


def _im2col(xb: np.ndarray, k: int, pad: int):
    """[B,C,H,W] -> ([B*H'*W', k*k*C] window matrix, H', W').

    Window rows are flattened in (dy, dx, channel) order: keeping the
    channel axis innermost makes the gather copy contiguous k*C-element
    runs instead of k-element ones, which is markedly faster.
    """
    xt = np.ascontiguousarray(xb.transpose(0, 2, 3, 1))
    if pad:
        xt = np.pad(xt, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xt, (k, k), axis=(1, 2))
    b, ho, wo, c = win.shape[:4]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * c)
    return cols, ho, wo


def _kernel_matrix(w: np.ndarray) -> np.ndarray:
    """[Co,Ci,k,k] -> [k*k*Ci, Co] in the _im2col row order."""
    return np.ascontiguousarray(w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0]))


def _corr(xb: np.ndarray, w: np.ndarray, pad: int, want_cols: bool = False):
    """Batched cross-correlation: xb [B,Ci,H,W], w [Co,Ci,k,k].

    Returns (y, cols) where cols is the window matrix when requested
    (reused by conv2d's kernel-gradient path) and None otherwise.
    """
    co = w.shape[0]
    k = w.shape[2]
    cols, ho, wo = _im2col(xb, k, pad)
    y = cols @ _kernel_matrix(w)
    y = np.ascontiguousarray(
        y.reshape(xb.shape[0], ho, wo, co).transpose(0, 3, 1, 2)
    )
    return y, (cols if want_cols else None)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-d cross-correlation plus per-channel bias.

    ``x`` is [Cin,H,W] or batched [B,Cin,H,W]; ``kernel`` is
    [Cout,Cin,k,k] with odd k; ``padding`` is "same" (zero padded,
    spatial size preserved) or "valid".
    """
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,k,k], got {kernel.shape}")
    co, ci, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    if padding not in ("same", "valid"):
        raise ConfigError(f"conv2d: padding must be 'same' or 'valid', got {padding!r}")
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3-d or 4-d, got shape {x.shape}")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    if xb.shape[1] != ci:
        raise ShapeError(
            f"conv2d: input channel axis has {xb.shape[1]}, kernel expects {ci}"
        )
    if bias.shape != (co,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({co},)")
    pad = (k - 1) // 2 if padding == "same" else 0
    if xb.shape[2] + 2 * pad < k or xb.shape[3] + 2 * pad < k:
        raise ShapeError(
            f"conv2d: spatial size {xb.shape[2:]} too small for k={k} ({padding})"
        )
    want_cols = _grad_enabled and kernel.requires_grad
    y, cols = _corr(xb, kernel.data, pad, want_cols=want_cols)
    y += bias.data[None, :, None, None]

    def vjp(g):
        gb = g if batched else g[None]
        if bias.requires_grad:
            _accum(bias, gb.sum(axis=(0, 2, 3)))
        if kernel.requires_grad:
            gf = np.ascontiguousarray(gb.transpose(0, 2, 3, 1)).reshape(-1, co)
            dkm = cols.T @ gf                       # [k*k*Ci, Co]
            _accum(kernel, dkm.reshape(k, k, ci, co).transpose(3, 2, 0, 1))
        if x.requires_grad:
            flipped = np.flip(kernel.data, axis=(2, 3)).transpose(1, 0, 2, 3)
            dx, _ = _corr(gb, np.ascontiguousarray(flipped), k - 1 - pad)
            _accum(x, dx if batched else dx[0])

    return _node("conv2d", (x, kernel, bias), y if batched else y[0], vjp)


def transposed_conv2d(x: Tensor, kernel: Tensor, stride: int = 2) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel (doubles H and W).

    ``kernel`` is [Cin,Cout,2,2].  With k == stride == 2 each output cell
    receives exactly one contribution, so no overlap handling is needed.
    """
    if stride != 2:
        raise ConfigError(f"transposed_conv2d: only stride 2 is supported, got {stride}")
    if kernel.ndim != 4 or kernel.shape[2:] != (2, 2):
        raise ShapeError(
            f"transposed_conv2d: kernel must be [Cin,Cout,2,2], got {kernel.shape}"
        )
    ci, co = kernel.shape[:2]
    if x.ndim not in (3, 4):
        raise ShapeError(f"transposed_conv2d: input must be 3-d or 4-d, got {x.shape}")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    if xb.shape[1] != ci:
        raise ShapeError(
            f"transposed_conv2d: input channel axis has {xb.shape[1]}, "
            f"kernel expects {ci}"
        )
    b, _, h, w = xb.shape
    xm = np.ascontiguousarray(xb.transpose(0, 2, 3, 1)).reshape(-1, ci)
    km = kernel.data.reshape(ci, -1)                # columns ordered (Co, ky, kx)
    y6 = (xm @ km).reshape(b, h, w, co, 2, 2)
    y = np.ascontiguousarray(y6.transpose(0, 3, 1, 4, 2, 5)).reshape(
        b, co, 2 * h, 2 * w
    )

    def vjp(g):
        gb = g if batched else g[None]
        gm = np.ascontiguousarray(
            gb.reshape(b, co, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5)
        ).reshape(-1, co * 4)
        if x.requires_grad:
            dx = (gm @ km.T).reshape(b, h, w, ci)
            dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
            _accum(x, dx if batched else dx[0])
        if kernel.requires_grad:
            _accum(kernel, (xm.T @ gm).reshape(kernel.shape))

    return _node("transposed_conv2d", (x, kernel), y if batched else y[0], vjp)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 non-overlapping max pooling; ties route gradient to the first
    maximal element in row-major order within the window."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"maxpool2d: input must be 3-d or 4-d, got shape {x.shape}")
    batched = x.ndim == 4
    xb = x.data if batched else x.data[None]
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d: spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    blocks = np.ascontiguousarray(
        xb.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5)
    ).reshape(b, c, h2, w2, 4)
    idx = np.argmax(blocks, axis=-1)
    y = np.max(blocks, axis=-1)

    def vjp(g):
        gb = g if batched else g[None]
        buf = np.zeros((b, c, h2, w2, 4), dtype=gb.dtype)
        np.put_along_axis(buf, idx[..., None], gb[..., None], axis=-1)
        dx = np.ascontiguousarray(
            buf.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        ).reshape(b, c, h, w)
        _accum(x, dx if batched else dx[0])

    out = _node("maxpool2d", (x,), y if batched else y[0], vjp)
    out.meta = idx
    return out


def time_weighted_sum(x: Tensor, w: Tensor) -> Tensor:
    """Weighted sum over the leading (time) axis.

    ``x`` is [T, ...] with weights [T], or [T, B, ...] with per-item
    weights [T, B].  Output drops the time axis.
    """
    if w.ndim == 1:
        if x.shape[0] != w.shape[0]:
            raise ShapeError(
                f"time_weighted_sum: {x.shape[0]} steps vs {w.shape[0]} weights"
            )
        y = np.tensordot(w.data, x.data, axes=(0, 0))

        def vjp(g):
            if x.requires_grad:
                wview = w.data.reshape((w.shape[0],) + (1,) * (x.ndim - 1))
                _accum(x, wview * g[None])
            if w.requires_grad:
                _accum(w, x.data.reshape(x.shape[0], -1) @ g.reshape(-1))

        return _node("time_weighted_sum", (x, w), y, vjp)
    if w.ndim == 2:
        if x.ndim < 2 or x.shape[:2] != w.shape:
            raise ShapeError(
                f"time_weighted_sum: x leading dims {x.shape[:2]} vs weights {w.shape}"
            )
        y = np.einsum("tb...,tb->b...", x.data, w.data)

        def vjp_b(g):
            if x.requires_grad:
                wview = w.data.reshape(w.shape + (1,) * (x.ndim - 2))
                _accum(x, wview * g[None])
            if w.requires_grad:
                xf = x.data.reshape(x.shape[0], x.shape[1], -1)
                _accum(w, np.einsum("tbk,bk->tb", xf, g.reshape(g.shape[0], -1)))

        return _node("time_weighted_sum", (x, w), y, vjp_b)
    raise ShapeError(f"time_weighted_sum: weights must be 1-d or 2-d, got {w.shape}")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Result of a finite-difference sweep over sampled parameter scalars.

    ``samples`` counts comparisons that entered the maximum; ``crossed``
    counts probes discarded because the +/-eps evaluations disagreed on
    some activation switch state (see :func:`grad_check`).
    """

    max_relative_error: float
    samples: int
    evaluations: int
    crossed: int = 0
    per_tensor: dict[str, float] = field(default_factory=dict)
    per_tensor_samples: dict[str, int] = field(default_factory=dict)
    worst: dict | None = None
    skipped_tensors: list[str] = field(default_factory=list)

    def by_group(self) -> dict[str, float]:
        """Max relative error keyed by the name prefix before the first dot."""
        out: dict[str, float] = {}
        for name, err in self.per_tensor.items():
            group = name.split(".", 1)[0]
            out[group] = max(out.get(group, 0.0), err)
        return out

    def samples_by_group(self) -> dict[str, int]:
        """Valid probe counts keyed by the name prefix before the first dot."""
        out: dict[str, int] = {}
        for name, n in self.per_tensor_samples.items():
            group = name.split(".", 1)[0]
            out[group] = out.get(group, 0) + n
        return out


@contextmanager
def _grad_forced():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = True
    try:
        yield
    finally:
        _grad_enabled = prev


def _switch_states(root: Tensor) -> list[np.ndarray]:
    """Branch decisions of every piecewise-linear op reachable from root.

    relu and clamp_min contribute their pass-through masks, maxpool2d its
    per-window argmax.  Two forward passes with identical switch states
    compute the same smooth composition, so a central difference between
    them is a valid derivative estimate.
    """
    states: list[np.ndarray] = []
    for node in _reachable(root):
        if node.op == "relu":
            states.append(node.data > 0)
        elif node.op == "clamp_min":
            states.append(node.data > node.meta)
        elif node.op == "maxpool2d":
            states.append(node.meta)
    return states


def _states_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, params: Mapping[str, Tensor], eps: float = 1e-3,
               samples: int = 100, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``f(params)`` must rebuild the graph on every call and return a scalar
    tensor.  For each sampled parameter scalar p the numeric estimate is
    (f(p+eps) - f(p-eps)) / (2 eps) and the relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator.

    A central difference is meaningless when the +/-eps interval straddles
    a relu/maxpool/clamp switch point: the secant then mixes two linear
    pieces and disagrees with the (correct) one-sided analytic value.
    Probes whose two evaluations disagree on any switch state are
    discarded (counted in ``crossed``) and replacement coordinates are
    drawn, so ``samples`` valid comparisons are always collected.  An
    implementation bug is still caught: it corrupts clean probes too.

    When ``samples`` covers the tensor count, one valid coordinate of
    every parameter tensor is sampled first (tensors whose coordinates all
    cross switches -- e.g. biases that rigidly shift a full channel -- are
    listed in ``skipped_tensors``) before the remainder is drawn
    size-weighted.  Requires float64 parameters.
    """
    if eps <= 0:
        raise ContractError(f"grad_check: eps must be positive, got {eps}")
    if samples < 1:
        raise ContractError(f"grad_check: samples must be >= 1, got {samples}")
    names = list(params)
    if not names:
        raise ContractError("grad_check: empty parameter set")
    for name in names:
        if params[name].dtype != np.float64:
            raise ContractError(
                f"grad_check: parameter {name!r} is {params[name].dtype}, "
                "64-bit precision is required"
            )

    with _grad_forced():
        zero_grads(params)
        root = f(params)
        if not isinstance(root, Tensor) or root.size != 1:
            raise ContractError("grad_check: f must return a scalar tensor")
        if not math.isfinite(float(root.data)):
            raise NumericalError("grad_check: f is non-finite at the unperturbed point")
        backward(root)
    analytic = {name: grad_or_zeros(params[name]).copy() for name in names}
    report = GradCheckReport(0.0, 0, 1)

    def probe(name: str, idx: int, delta: float):
        t = params[name]
        saved = t.data.flat[idx]
        t.data.flat[idx] = saved + delta
        try:
            with _grad_forced():
                out = f(params)
        finally:
            t.data.flat[idx] = saved
        value = float(out.data)
        if not math.isfinite(value):
            raise NumericalError(
                f"grad_check: f is non-finite while perturbing {name}[{idx}]"
            )
        return value, _switch_states(out)

    def compare(name: str, idx: int) -> bool:
        """Run one probe pair; record it if valid, else count the crossing."""
        report.evaluations += 2
        plus, st_plus = probe(name, idx, eps)
        minus, st_minus = probe(name, idx, -eps)
        if not _states_equal(st_plus, st_minus):
            report.crossed += 1
            return False
        numeric = (plus - minus) / (2.0 * eps)
        exact = float(analytic[name].flat[idx])
        rel = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
        report.samples += 1
        report.per_tensor_samples[name] = report.per_tensor_samples.get(name, 0) + 1
        if rel > report.per_tensor.get(name, 0.0):
            report.per_tensor[name] = rel
        if rel > report.max_relative_error:
            report.max_relative_error = rel
            report.worst = {
                "name": name,
                "index": idx,
                "analytic": exact,
                "numeric": numeric,
                "relative_error": rel,
            }
        return True

    rng = np.random.default_rng(seed)
    if samples >= len(names):
        # Coverage phase: one valid coordinate per tensor, best effort.
        for name in names:
            size = params[name].size
            tries = rng.permutation(size)[: min(size, 24)]
            if not any(compare(name, int(idx)) for idx in tries):
                report.skipped_tensors.append(name)

    sizes = np.array([params[name].size for name in names])
    bounds = np.cumsum(sizes)
    total = int(bounds[-1])
    budget = 20 * samples + 100
    while report.samples < samples:
        if report.evaluations >= 2 * budget:
            raise ContractError(
                f"grad_check: could not collect {samples} switch-clean probes "
                f"in {budget} draws ({report.crossed} crossings); the "
                "evaluation point sits too close to activation boundaries"
            )
        flat = int(rng.integers(total))
        ti = int(np.searchsorted(bounds, flat, side="right"))
        compare(names[ti], flat - (int(bounds[ti - 1]) if ti else 0))
    return report
