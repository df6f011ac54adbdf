"""Reverse-mode automatic differentiation on float32 numpy arrays.

A Tape records every differentiable operation executed inside its `with`
block; insertion order doubles as the topological order, so backpropagation
is a single reverse sweep that visits each node exactly once.  Outside a
tape the same functions run forward-only, which is the inference path.

Convolutions are lowered to im2col + GEMM.  Three array-level primitives
(`conv_forward`, `conv_input_grad`, `conv_kernel_grad`) provide forward and
adjoint in both directions, so conv2d_transpose is literally the adjoint of
conv2d with the kernel reinterpreted, and the inner-product identity
<conv(x), y> == <x, conv_T(y)> holds by construction.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_f32 = np.float32


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values it must not."""


# ---------------------------------------------------------------------------
# tape machinery


class DiffTensor:
    """A float32 array plus an optional gradient buffer.

    `node_id` is the position in the active tape for op outputs; leaves
    (parameters, constants) keep node_id None.  Constants set track=False so
    backward never allocates gradients for them.
    """

    __slots__ = ("values", "grad", "node_id", "name", "track")

    def __init__(self, values: np.ndarray, name: str = "", track: bool = True):
        # asarray keeps 0-d scalars 0-d (ascontiguousarray would promote to 1-d)
        self.values = np.asarray(values, dtype=_f32, order="C")
        self.grad: np.ndarray | None = None
        self.node_id: int | None = None
        self.name = name
        self.track = track

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        tag = self.name or "tensor"
        return f"DiffTensor({tag}, shape={self.values.shape})"


def param(values: np.ndarray, name: str = "") -> DiffTensor:
    """A trainable leaf: gradient buffer preallocated to zeros."""
    t = DiffTensor(values, name=name)
    t.grad = np.zeros_like(t.values)
    return t


def constant(values: np.ndarray, name: str = "") -> DiffTensor:
    """A non-trainable leaf; backward skips it."""
    return DiffTensor(values, name=name, track=False)


class _Node:
    __slots__ = ("op", "out", "inputs", "back")

    def __init__(self, op, out, inputs, back):
        self.op = op
        self.out = out
        self.inputs = inputs
        self.back = back


_ACTIVE: "Tape | None" = None


class Tape:
    """Ordered record of differentiable ops; reverse sweep = backprop."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc) -> None:
        global _ACTIVE
        _ACTIVE = self._prev
        self._prev = None

    def backward(self, loss: DiffTensor) -> None:
        """Populate .grad on every tensor reachable from `loss`.

        The loss must be a scalar recorded on this tape; a tape can only be
        walked once because op closures may reuse saved buffers.
        """
        if self._spent:
            raise RuntimeError("tape already consumed; rerun the forward pass")
        if loss.values.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.values.shape}")
        if loss.node_id is None or loss.node_id >= len(self.nodes) or self.nodes[loss.node_id].out is not loss:
            raise ValueError("loss was not recorded on this tape")
        self._spent = True
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes[: loss.node_id + 1]):
            g = node.out.grad
            if g is None:
                continue
            node.back(g)


def _accum(t: DiffTensor, g: np.ndarray) -> None:
    if not t.track and t.node_id is None:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _record(op: str, values: np.ndarray, inputs: tuple, back: Callable[[np.ndarray], None]) -> DiffTensor:
    out = DiffTensor(values)
    tape = _ACTIVE
    if tape is not None:
        out.node_id = len(tape.nodes)
        tape.nodes.append(_Node(op, out, inputs, back))
    return out


def _as_tensor(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return constant(np.asarray(x, dtype=_f32))


def zero_grads(params: dict[str, DiffTensor]) -> None:
    for p in params.values():
        p.grad = np.zeros_like(p.values)


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, g)

    return _record("add", a.values + b.values, (a, b), back)


def sub(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        _accum(a, g)
        _accum(b, -g)

    return _record("sub", a.values - b.values, (a, b), back)


def mul(a, b) -> DiffTensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def back(g):
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return _record("mul", a.values * b.values, (a, b), back)


def div(a, b) -> DiffTensor:
    """Elementwise a / b; caller guarantees b is bounded away from zero."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"div shape mismatch {a.shape} vs {b.shape}")
    out = a.values / b.values

    def back(g):
        _accum(a, g / b.values)
        _accum(b, -g * out / b.values)

    return _record("div", out, (a, b), back)


def affine(t, scale_: float, shift: float = 0.0) -> DiffTensor:
    """scale_ * t + shift with python-float coefficients."""
    t = _as_tensor(t)
    s = _f32(scale_)

    def back(g):
        _accum(t, g * s)

    return _record("affine", t.values * s + _f32(shift), (t,), back)


def scale(t, scale_: float) -> DiffTensor:
    return affine(t, scale_, 0.0)


def relu(t) -> DiffTensor:
    """max(x, 0); the subgradient at exactly 0 is 0."""
    t = _as_tensor(t)
    mask = t.values > 0

    def back(g):
        _accum(t, g * mask)

    return _record("relu", np.where(mask, t.values, _f32(0.0)), (t,), back)


def leaky_relu(t, slope: float = 0.01) -> DiffTensor:
    t = _as_tensor(t)
    s = _f32(slope)
    mask = t.values > 0

    def back(g):
        _accum(t, np.where(mask, g, g * s))

    return _record("leaky_relu", np.where(mask, t.values, t.values * s), (t,), back)


def sigmoid(t) -> DiffTensor:
    t = _as_tensor(t)
    # split by sign for float32 stability at large |x|
    v = t.values
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)

    def back(g):
        _accum(t, g * out * (1.0 - out))

    return _record("sigmoid", out, (t,), back)


def sqrt(t) -> DiffTensor:
    """Elementwise sqrt with subgradient 0 at exactly 0."""
    t = _as_tensor(t)
    out = np.sqrt(t.values)

    def back(g):
        d = np.zeros_like(out)
        nz = out > 0
        d[nz] = g[nz] * 0.5 / out[nz]
        _accum(t, d)

    return _record("sqrt", out, (t,), back)


def sum_axes(t, axes: tuple[int, ...] | None = None) -> DiffTensor:
    """Sum over the given axes (None = all), dropping reduced dims."""
    t = _as_tensor(t)
    if axes is None:
        axes = tuple(range(t.values.ndim))
    out = t.values.sum(axis=axes, dtype=_f32)

    def back(g):
        _accum(t, np.broadcast_to(np.expand_dims(g, axes), t.values.shape))

    return _record("sum", np.asarray(out, dtype=_f32), (t,), back)


def mean_all(t) -> DiffTensor:
    t = _as_tensor(t)
    return scale(sum_axes(t, None), 1.0 / float(t.size))


# ---------------------------------------------------------------------------
# convolution primitives (plain arrays; shared by forward and adjoint ops)


def _check_nchw(x: np.ndarray, what: str) -> None:
    if x.ndim != 4:
        raise ValueError(f"{what} must be 4-D (N, C, H, W), got shape {x.shape}")


def conv_out_size(size: int, k: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0:
        raise ValueError(f"kernel {k} with stride {stride}, padding {padding} does not fit extent {size}")
    return out


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    v = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    v = v[:, :, ::stride, ::stride][:, :, :oh, :ow]
    cols = np.ascontiguousarray(v.transpose(0, 2, 3, 1, 4, 5)).reshape(n, oh * ow, c * kh * kw)
    return cols, oh, ow


def _col2im(cols: np.ndarray, in_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column gradients back to image layout."""
    n, c, h, w = in_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = conv_out_size(h, kh, stride, padding)
    ow = conv_out_size(w, kw, stride, padding)
    acc = np.zeros((n, c, hp, wp), dtype=_f32)
    g = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
    for i in range(kh):
        for j in range(kw):
            acc[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += g[:, :, :, :, i, j]
    if padding:
        acc = acc[:, :, padding : padding + h, padding : padding + w]
    return acc


def conv_forward(x: np.ndarray, kernel: np.ndarray, stride: int, padding: int) -> np.ndarray:
    """Cross-correlation of (N, C, H, W) with kernel (O, C, kh, kw)."""
    _check_nchw(x, "conv input")
    _check_nchw(kernel, "conv kernel")
    o, c, kh, kw = kernel.shape
    if x.shape[1] != c:
        raise ValueError(f"conv channel mismatch: input has {x.shape[1]}, kernel expects {c}")
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    out = cols @ kernel.reshape(o, -1).T
    return np.ascontiguousarray(out.transpose(0, 2, 1).reshape(x.shape[0], o, oh, ow))


def conv_input_grad(dy: np.ndarray, kernel: np.ndarray, stride: int, padding: int, in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of conv_forward in its first argument."""
    o, c, kh, kw = kernel.shape
    n = dy.shape[0]
    dcols = dy.reshape(n, o, -1).transpose(0, 2, 1) @ kernel.reshape(o, -1)
    return _col2im(dcols, (n, c, in_hw[0], in_hw[1]), kh, kw, stride, padding)


def conv_kernel_grad(x: np.ndarray, dy: np.ndarray, stride: int, padding: int, kshape) -> np.ndarray:
    """Adjoint of conv_forward in its kernel argument."""
    o, c, kh, kw = kshape
    cols, oh, ow = _im2col(x, kh, kw, stride, padding)
    dyf = dy.reshape(x.shape[0], o, oh * ow)
    dk = np.einsum("nop,npk->ok", dyf, cols, dtype=_f32, casting="same_kind")
    return np.ascontiguousarray(dk.reshape(o, c, kh, kw))


# ---------------------------------------------------------------------------
# structured ops


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> DiffTensor:
    """2-D cross-correlation; kernel layout (out_ch, in_ch, kh, kw)."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    out = conv_forward(x.values, kernel.values, stride, padding)
    in_hw = x.values.shape[2:]
    kshape = kernel.values.shape

    def back(g):
        _accum(x, conv_input_grad(g, kernel.values, stride, padding, in_hw))
        _accum(kernel, conv_kernel_grad(x.values, g, stride, padding, kshape))

    return _record("conv2d", out, (x, kernel), back)


def conv2d_transpose(x, kernel, stride: int = 1, padding: int = 0) -> DiffTensor:
    """Transposed convolution; kernel layout (in_ch, out_ch, kh, kw).

    Forward equals the input-gradient of conv2d with the same kernel, so
    output extent is (H - 1) * stride - 2 * padding + kh.
    """
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    _check_nchw(x.values, "conv_transpose input")
    _check_nchw(kernel.values, "conv_transpose kernel")
    ic, oc, kh, kw = kernel.values.shape
    if x.values.shape[1] != ic:
        raise ValueError(f"conv_transpose channel mismatch: input has {x.values.shape[1]}, kernel expects {ic}")
    n, _, h, w = x.values.shape
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h <= 0 or out_w <= 0:
        raise ValueError("conv_transpose output extent is not positive")
    out = conv_input_grad(x.values, kernel.values, stride, padding, (out_h, out_w))
    kshape = kernel.values.shape

    def back(g):
        _accum(x, conv_forward(g, kernel.values, stride, padding))
        _accum(kernel, conv_kernel_grad(g, x.values, stride, padding, kshape))

    return _record("conv2d_transpose", out, (x, kernel), back)


def add_channel_bias(t, bias) -> DiffTensor:
    """Add a per-channel bias vector to an (N, C, H, W) tensor."""
    t, bias = _as_tensor(t), _as_tensor(bias)
    _check_nchw(t.values, "bias input")
    if bias.values.shape != (t.values.shape[1],):
        raise ValueError(f"bias shape {bias.values.shape} does not match {t.values.shape[1]} channels")

    def back(g):
        _accum(t, g)
        _accum(bias, g.sum(axis=(0, 2, 3), dtype=_f32))

    return _record("bias", t.values + bias.values[None, :, None, None], (t, bias), back)


def avg_pool2(t) -> DiffTensor:
    """2x2 average pooling, stride 2; spatial extents must be even."""
    t = _as_tensor(t)
    _check_nchw(t.values, "avg_pool2 input")
    n, c, h, w = t.values.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even extents, got {h}x{w}")
    out = t.values.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5), dtype=_f32)

    def back(g):
        gi = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * _f32(0.25)
        _accum(t, gi)

    return _record("avg_pool2", out, (t,), back)


def concat_channels(parts: Sequence) -> DiffTensor:
    """Concatenate (N, C_i, H, W) tensors along the channel axis."""
    ts = [_as_tensor(p) for p in parts]
    if not ts:
        raise ValueError("concat_channels needs at least one input")
    for t in ts:
        _check_nchw(t.values, "concat input")
    ref = ts[0].values.shape
    for t in ts[1:]:
        if t.values.shape[0] != ref[0] or t.values.shape[2:] != ref[2:]:
            raise ValueError(f"concat spatial/batch mismatch: {t.values.shape} vs {ref}")
    out = np.concatenate([t.values for t in ts], axis=1)
    splits = np.cumsum([t.values.shape[1] for t in ts])[:-1]

    def back(g):
        for t, gi in zip(ts, np.split(g, splits, axis=1)):
            _accum(t, gi)

    return _record("concat", out, tuple(ts), back)


def replicate_pad(t, pad: int) -> DiffTensor:
    """Edge-replicating spatial padding of an (N, C, H, W) tensor."""
    t = _as_tensor(t)
    _check_nchw(t.values, "replicate_pad input")
    if pad < 0:
        raise ValueError("pad must be non-negative")
    if pad == 0:
        return affine(t, 1.0)
    n, c, h, w = t.values.shape
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    out = t.values[:, :, rows[:, None], cols[None, :]]

    def back(g):
        acc = np.zeros((n, c, h, w + 2 * pad), dtype=_f32)
        np.add.at(acc, (slice(None), slice(None), rows, slice(None)), g)
        acc2 = np.zeros((n, c, h, w), dtype=_f32)
        np.add.at(acc2, (slice(None), slice(None), slice(None), cols), acc)
        _accum(t, acc2)

    return _record("replicate_pad", out, (t,), back)


_BILINEAR_CACHE: dict[tuple[int, int], np.ndarray] = {}


def bilinear_weights(in_size: int, out_size: int) -> np.ndarray:
    """Row-stochastic (out, in) interpolation matrix, half-pixel centers."""
    key = (in_size, out_size)
    w = _BILINEAR_CACHE.get(key)
    if w is not None:
        return w
    w = np.zeros((out_size, in_size), dtype=_f32)
    ratio = in_size / out_size
    for d in range(out_size):
        src = (d + 0.5) * ratio - 0.5
        src = min(max(src, 0.0), in_size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, in_size - 1)
        frac = src - lo
        w[d, lo] += _f32(1.0 - frac)
        w[d, hi] += _f32(frac)
    _BILINEAR_CACHE[key] = w
    return w


def bilinear_upsample(t, factor: int) -> DiffTensor:
    """Integer-factor bilinear upsampling with half-pixel alignment."""
    t = _as_tensor(t)
    _check_nchw(t.values, "bilinear input")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n, c, h, w = t.values.shape
    wh = bilinear_weights(h, h * factor)
    ww = bilinear_weights(w, w * factor)
    a = np.tensordot(t.values, wh, axes=([2], [1]))           # (n, c, w, H_out)
    a = a.transpose(0, 1, 3, 2)                               # (n, c, H_out, w)
    out = np.tensordot(a, ww, axes=([3], [1])).astype(_f32)   # (n, c, H_out, W_out)

    def back(g):
        b = np.tensordot(g, ww, axes=([3], [0]))              # (n, c, H_out, w)
        b = np.tensordot(b.transpose(0, 1, 3, 2), wh, axes=([3], [0]))  # (n, c, w, h)
        _accum(t, np.ascontiguousarray(b.transpose(0, 1, 3, 2), dtype=_f32))

    return _record("bilinear", np.ascontiguousarray(out), (t,), back)


def softmax_channels(t) -> DiffTensor:
    """Softmax across the channel axis of (N, C, H, W), per location."""
    t = _as_tensor(t)
    _check_nchw(t.values, "softmax input")
    v = t.values - t.values.max(axis=1, keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=1, keepdims=True, dtype=_f32)

    def back(g):
        inner = (g * out).sum(axis=1, keepdims=True, dtype=_f32)
        _accum(t, out * (g - inner))

    return _record("softmax_c", out.astype(_f32), (t,), back)


def softmax_spatial(t) -> DiffTensor:
    """Softmax across the joint spatial axes of (N, C, H, W), per channel."""
    t = _as_tensor(t)
    _check_nchw(t.values, "softmax input")
    v = t.values - t.values.max(axis=(2, 3), keepdims=True)
    e = np.exp(v)
    out = e / e.sum(axis=(2, 3), keepdims=True, dtype=_f32)

    def back(g):
        inner = (g * out).sum(axis=(2, 3), keepdims=True, dtype=_f32)
        _accum(t, out * (g - inner))

    return _record("softmax_s", out.astype(_f32), (t,), back)


def gram_locations(t) -> DiffTensor:
    """Per-image location-by-location Gram matrix.

    (N, C, H, W) -> (N, H*W, H*W): flatten locations, g = s^T s per image.
    """
    t = _as_tensor(t)
    _check_nchw(t.values, "gram input")
    n, c, h, w = t.values.shape
    s = t.values.reshape(n, c, h * w)
    out = np.einsum("ncp,ncq->npq", s, s, dtype=_f32, casting="same_kind")

    def back(g):
        sym = g + g.transpose(0, 2, 1)
        ds = np.einsum("ncp,npq->ncq", s, sym, dtype=_f32, casting="same_kind")
        _accum(t, ds.reshape(n, c, h, w))

    return _record("gram", np.ascontiguousarray(out), (t,), back)


def cosine_distance_map(a, b, counter: list[int] | None = None) -> DiffTensor:
    """Per-location cosine distance between channel vectors.

    (N, C, H, W) x2 -> (N, H, W) of 1 - cos.  A zero-norm vector on either
    side makes the location's cosine 0 (distance 1) with zero gradient;
    such locations are tallied into `counter[0]` when given.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"cosine shape mismatch {a.shape} vs {b.shape}")
    _check_nchw(a.values, "cosine input")
    av, bv = a.values, b.values
    dot = (av * bv).sum(axis=1, dtype=_f32)
    na = np.sqrt((av * av).sum(axis=1, dtype=_f32))
    nb = np.sqrt((bv * bv).sum(axis=1, dtype=_f32))
    denom = na * nb
    ok = denom > 0
    if counter is not None:
        counter[0] += int(ok.size - ok.sum())
    safe = np.where(ok, denom, _f32(1.0))
    cos = np.where(ok, dot / safe, _f32(0.0))
    out = _f32(1.0) - cos

    def back(g):
        # d(1-cos)/da = -(b/denom - cos * a/na^2), zero where degenerate
        gm = np.where(ok, -g, _f32(0.0))[:, None, :, :]
        inv_d = np.where(ok, 1.0 / safe, _f32(0.0))[:, None, :, :]
        na2 = np.where(na > 0, na * na, _f32(1.0))[:, None, :, :]
        nb2 = np.where(nb > 0, nb * nb, _f32(1.0))[:, None, :, :]
        cze = np.where(ok, cos, _f32(0.0))[:, None, :, :]
        _accum(a, gm * (bv * inv_d - cze * av / na2))
        _accum(b, gm * (av * inv_d - cze * bv / nb2))

    return _record("cosine_map", out, (a, b), back)
