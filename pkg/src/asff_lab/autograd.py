"""Dense 4-D tensors with reverse-mode differentiation.

Everything here operates on arrays in (batch, channels, height, width)
layout, stored row-major in that axis order.  The operator set is exactly
what the fusion pipeline needs: convolution, bilinear resizing, 2x2 max
pooling, a source-axis softmax, elementwise arithmetic, a weighted sum
that broadcasts single-channel weight maps across channels, and a stable
binary cross-entropy on logits.

Gradients are accumulated by walking the recorded graph in reverse
topological order; the walk visits each node exactly once and is fully
deterministic, so repeated backward passes over the same graph produce
bitwise-identical gradients.

Storage defaults to float32.  Every operation preserves the dtype of its
inputs, and float64 tensors are supported throughout for high-precision
test modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ALLOWED_DTYPES = (np.float32, np.float64)

# Toggled off only for throwaway benchmarking; the library contract is that
# tensors never hold NaN/Inf after a forward or backward pass.
FINITE_CHECKS = True


class DimensionError(ValueError):
    """Shape mismatch that names the offending axis."""

    def __init__(self, op: str, axis: str, expected, got):
        self.op = op
        self.axis = axis
        self.expected = expected
        self.got = got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class NumericError(ArithmeticError):
    """Non-finite values appeared where the contract forbids them."""


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op}: produced non-finite values")


class Tensor:
    """A dense (N, C, H, W) array with optional gradient and graph linkage."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise DimensionError("tensor", "ndim", 4, arr.ndim)
        _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same values with no graph linkage or gradient."""
        return Tensor(self.data, requires_grad=False, name=self.name)

    def accumulate_grad(self, inc: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += inc

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, op={self._op}{tag})"

    # Operator sugar so model code reads naturally; all dispatch to the
    # module-level ops below.
    def __add__(self, other):
        return add_scalar(self, other) if np.isscalar(other) else add(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if np.isscalar(other) else sub(self, other)

    def __mul__(self, other):
        return scale(self, other) if np.isscalar(other) else mul(self, other)

    def __truediv__(self, other):
        return scale(self, 1.0 / other) if np.isscalar(other) else div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    __radd__ = __add__
    __rmul__ = __mul__


def zeros(shape, dtype=np.float32, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def full(shape, value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype))


def scalar(value: float, dtype=np.float32) -> Tensor:
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


def randn(rng: np.random.Generator, shape, std: float = 1.0, dtype=np.float32,
          requires_grad: bool = False, name: str | None = None) -> Tensor:
    data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=requires_grad, name=name)


def _result(op: str, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    """Wrap an op output; constants are pruned from the graph."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _same_dtype(op: str, *tensors: Tensor) -> None:
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise DimensionError(op, "dtype", dt.name, t.data.dtype.name)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        for axis, (x, y) in enumerate(zip(a.shape, b.shape)):
            if x != y:
                raise DimensionError(op, "NCHW"[axis], x, y)


# ---------------------------------------------------------------------------
# Graph inspection and backward
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OpRecord:
    op: str
    input_ids: tuple[int, ...]
    output_id: int


class Graph:
    """Topologically ordered record of the operations below a root tensor.

    Every input id precedes the record that consumes it, so a single
    reverse walk of ``records`` visits each operation exactly once.
    """

    def __init__(self, ordered: list[Tensor]):
        self._ordered = ordered
        self.records = [
            OpRecord(t._op, tuple(id(p) for p in t._parents), id(t))
            for t in ordered if t._parents
        ]

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        return cls(_toposort(root))

    def tensors(self) -> list[Tensor]:
        return list(self._ordered)

    def __len__(self) -> int:
        return len(self.records)


def _toposort(root: Tensor) -> list[Tensor]:
    # Iterative post-order DFS; parent order is the op-recorded order, so the
    # resulting schedule is deterministic for a fixed graph.
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
        for parent in reversed(node._parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, parameters: tuple[Tensor, ...] = (),
             seed: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(tensor) into ``grad`` for every reachable tensor.

    Without ``seed``, ``loss`` must be scalar-shaped (1, 1, 1, 1) and is
    seeded with one.  With ``seed`` the walk starts from ``loss`` with the
    given cotangent, which lets callers push a specific upstream gradient
    through a subgraph.  Parameters listed in ``parameters`` that are
    unreachable receive an all-zeros gradient rather than an error.
    """
    if seed is None:
        if loss.shape != (1, 1, 1, 1):
            raise ValueError(f"backward: loss must have shape (1,1,1,1), got {loss.shape}")
        loss.grad = np.ones_like(loss.data)
    else:
        if seed.shape != loss.data.shape:
            raise DimensionError("backward", "seed", loss.data.shape, seed.shape)
        loss.grad = np.array(seed, dtype=loss.data.dtype)
    for node in reversed(_toposort(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
            _check_finite(node.grad, f"backward:{node._op}")
    for p in parameters:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Elementwise operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    _same_dtype("add", a, b)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    _same_dtype("sub", a, b)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    _same_dtype("mul", a, b)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    _same_dtype("div", a, b)
    out_data = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g / b.data)
        if b.requires_grad:
            b.accumulate_grad(-g * out_data / b.data)

    return _result("div", out_data, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result("scale", a.data * s, (a,), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = a.data.dtype.type(s)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _result("add_scalar", a.data + s, (a,), bw)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _result("relu", np.where(mask, a.data, a.data.dtype.type(0)), (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_data = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _result("exp", out_data, (a,), bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first operand."""
    _same_shape("maximum", a, b)
    _same_dtype("maximum", a, b)
    take_a = a.data >= b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * take_a)
        if b.requires_grad:
            b.accumulate_grad(g * ~take_a)

    return _result("maximum", np.where(take_a, a.data, b.data), (a, b), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise min; on ties the gradient routes to the first operand."""
    _same_shape("minimum", a, b)
    _same_dtype("minimum", a, b)
    take_a = a.data <= b.data

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(g * take_a)
        if b.requires_grad:
            b.accumulate_grad(g * ~take_a)

    return _result("minimum", np.where(take_a, a.data, b.data), (a, b), bw)


def weighted_sum(maps: list[Tensor], weights: Tensor) -> Tensor:
    """Per-position weighted sum of feature maps.

    ``weights`` has one channel per map; each weight channel is a scalar
    per spatial position, broadcast across all channels of its map.  This
    is the only broadcasting the library performs.
    """
    if len(maps) < 2:
        raise ValueError("weighted_sum: needs at least two maps")
    if weights.shape[1] != len(maps):
        raise DimensionError("weighted_sum", "C", len(maps), weights.shape[1])
    first = maps[0]
    for m in maps[1:]:
        _same_shape("weighted_sum", first, m)
    _same_dtype("weighted_sum", first, *maps[1:], weights)
    n, _, h, w = first.shape
    if weights.shape[0] != n:
        raise DimensionError("weighted_sum", "N", n, weights.shape[0])
    if weights.shape[2:] != (h, w):
        raise DimensionError("weighted_sum", "H", (h, w), weights.shape[2:])

    out_data = weights.data[:, 0:1] * maps[0].data
    for k in range(1, len(maps)):
        out_data = out_data + weights.data[:, k:k + 1] * maps[k].data

    def bw(g):
        for k, m in enumerate(maps):
            if m.requires_grad:
                m.accumulate_grad(g * weights.data[:, k:k + 1])
        if weights.requires_grad:
            inc = np.empty_like(weights.data)
            for k, m in enumerate(maps):
                inc[:, k] = np.sum(g * m.data, axis=1)
            weights.accumulate_grad(inc)

    return _result("weighted_sum", out_data, (*maps, weights), bw)


def elementwise(kind: str, *operands, **kwargs) -> Tensor:
    """Dispatcher over the elementwise family: add, mul, scale, weighted_sum."""
    if kind == "add":
        return add(*operands)
    if kind == "mul":
        return mul(*operands)
    if kind == "scale":
        return scale(*operands, **kwargs)
    if kind == "weighted_sum":
        return weighted_sum(list(operands[:-1]), operands[-1])
    raise ValueError(f"elementwise: unknown kind {kind!r}")


def concat_channels(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_channels: empty input")
    first = parts[0]
    for p in parts[1:]:
        for axis in (0, 2, 3):
            if p.shape[axis] != first.shape[axis]:
                raise DimensionError("concat_channels", "NCHW"[axis], first.shape[axis], p.shape[axis])
    _same_dtype("concat_channels", *parts)
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def bw(g):
        for p, g_part in zip(parts, np.split(g, splits, axis=1)):
            if p.requires_grad:
                p.accumulate_grad(g_part)

    return _result("concat_channels", np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    """View of channels [start, stop); the backward pass scatters into place."""
    if not 0 <= start < stop <= a.shape[1]:
        raise DimensionError("slice_channels", "C", f"0<=start<stop<={a.shape[1]}", (start, stop))

    def bw(g):
        if a.requires_grad:
            if a.grad is None:
                a.grad = np.zeros_like(a.data)
            a.grad[:, start:stop] += g

    return _result("slice_channels", a.data[:, start:stop].copy(), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    """Full reduction to a (1,1,1,1) scalar tensor."""

    def bw(g):
        if a.requires_grad:
            a.accumulate_grad(np.broadcast_to(g.reshape(()), a.shape).copy())

    return _result("sum_all", a.data.sum(dtype=a.data.dtype).reshape(1, 1, 1, 1), (a,), bw)


# ---------------------------------------------------------------------------
# Convolution / resizing / pooling
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """2-D convolution (cross-correlation) with square kernels of size 1 or 3.

    Output spatial size is floor((H + 2*pad - k)/stride) + 1 per axis.
    Backward produces gradients for the input, the weight, and the bias.
    """
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d: kernel must be square with k in {{1,3}}, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: stride must be 1 or 2, got {stride}")
    n, c, h, w = x.shape
    if c != cin:
        raise DimensionError("conv2d", "C", cin, c)
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError("conv2d", "H", f">={kh - 2 * pad}", h)
    _same_dtype("conv2d", x, weight, *((bias,) if bias is not None else ()))
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise DimensionError("conv2d", "C", (1, cout, 1, 1), bias.shape)

    k = kh
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, ho, wo, k, k), (sn, sc, sh * stride, sw * stride, sh, sw))
    # (N*Ho*Wo, C*k*k) x (C*k*k, Cout): one BLAS call keeps this fast and
    # run-to-run deterministic.
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(cout, c * k * k)
    out_data = (cols @ wmat.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out_data = out_data + bias.data
    out_data = np.ascontiguousarray(out_data)

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)).reshape(1, cout, 1, 1))
        if weight.requires_grad:
            weight.accumulate_grad((gmat.T @ cols).reshape(cout, c, k, k))
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.data.dtype)
            for u in range(k):
                for v in range(k):
                    dxp[:, :, u:u + stride * ho:stride, v:v + stride * wo:stride] += \
                        dcols[:, :, :, :, u, v].transpose(0, 3, 1, 2)
            x.accumulate_grad(dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out_data, parents, bw)


def _linear_resample_matrix(size_out: int, size_in: int, scale: int, dtype) -> np.ndarray:
    """Row-stochastic 1-D bilinear sampling matrix (size_out x size_in).

    Source coordinate for destination d is (d + 0.5)/scale - 0.5, clamped
    to the borders; each row holds the two interpolation weights.
    """
    m = np.zeros((size_out, size_in), dtype=np.float64)
    for d in range(size_out):
        s = (d + 0.5) / scale - 0.5
        s = min(max(s, 0.0), size_in - 1.0)
        i0 = int(np.floor(s))
        i1 = min(i0 + 1, size_in - 1)
        t = s - i0
        m[d, i0] += 1.0 - t
        m[d, i1] += t
    return m.astype(dtype)


def interpolate_bilinear(x: Tensor, scale_factor: int) -> Tensor:
    """Bilinear upsampling by an integer factor >= 2.

    Constant inputs map to constant outputs (the sampling weights at each
    output position sum to one exactly for power-of-two factors).
    """
    if not isinstance(scale_factor, (int, np.integer)) or scale_factor < 2:
        raise ValueError(f"interpolate_bilinear: scale must be an integer >= 2, got {scale_factor}")
    n, c, h, w = x.shape
    ry = _linear_resample_matrix(h * scale_factor, h, scale_factor, x.data.dtype)
    rx = _linear_resample_matrix(w * scale_factor, w, scale_factor, x.data.dtype)
    out_data = np.matmul(np.matmul(ry, x.data), rx.T)

    def bw(g):
        if x.requires_grad:
            x.accumulate_grad(np.matmul(np.matmul(ry.T, g), rx))

    return _result("interpolate_bilinear", np.ascontiguousarray(out_data), (x,), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; H and W must be even.

    The gradient routes to the argmax position of each window; ties go to
    the lowest flat index within the window.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: H and W must be even, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # first max wins: the lowest flat index
    out_data = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        if not x.requires_grad:
            return
        dwin = np.zeros_like(win)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x.accumulate_grad(dx)

    return _result("maxpool2", np.ascontiguousarray(out_data), (x,), bw)


def softmax_over_sources(stack: Tensor) -> Tensor:
    """Softmax across axis 1 (the source-level axis) of an (N,S,H,W) stack.

    Computed with max-subtraction so arbitrarily large control values do
    not overflow; per position the outputs lie in [0,1] and sum to 1.
    """
    s = stack.shape[1]
    if s < 2:
        raise DimensionError("softmax_over_sources", "C", ">=2", s)
    z = stack.data - stack.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        if stack.requires_grad:
            dot = np.sum(g * out_data, axis=1, keepdims=True)
            stack.accumulate_grad(out_data * (g - dot))

    return _result("softmax_over_sources", out_data, (stack,), bw)


def bce_with_logits(logits: Tensor, targets: Tensor, weights: Tensor) -> Tensor:
    """Per-cell binary cross-entropy on logits, scaled by a loss-weight map.

    Uses the overflow-free form max(x,0) - x*t + log1p(exp(-|x|)).  Targets
    and weights are constants; cells with weight zero contribute exactly
    zero loss and zero gradient.
    """
    _same_shape("bce_with_logits", logits, targets)
    _same_shape("bce_with_logits", logits, weights)
    _same_dtype("bce_with_logits", logits, targets, weights)
    if targets.requires_grad or weights.requires_grad:
        raise ValueError("bce_with_logits: targets and weights must not require grad")
    x = logits.data
    t = targets.data
    per_cell = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out_data = weights.data * per_cell

    def bw(g):
        if logits.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-x))
            logits.accumulate_grad(g * weights.data * (sig - t))

    return _result("bce_with_logits", out_data, (logits, targets, weights), bw)
