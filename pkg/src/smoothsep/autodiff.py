"""Minimal reverse-mode differentiation engine over dense numpy tensors.

Design notes:

* define-by-run: every primitive records a backward closure when any
  operand requires gradients; the tape is rebuilt each step, so a fresh
  gradient w.r.t. a per-iteration noise tensor is always available.
* float32 storage by default; reductions accumulate in float64.  A
  float64 mode (``dtype=np.float64`` on the leaves) exists for
  finite-difference verification, where float32 rounding would swamp
  the check tolerances.
* broadcasting is deliberately restricted to scalar-with-tensor and
  exact-shape elementwise; everything else raises ShapeMismatch.
* ``gradients`` computes d(loss)/d(t) for an explicit list of tensors
  and prunes the backward sweep to paths that can reach them, so a
  gradient w.r.t. an input noise tensor does not pay for weight
  gradients.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operand shapes do not conform to the primitive's shape rule."""


class NonFiniteValue(ArithmeticError):
    """A primitive produced NaN or Inf."""


class NotScalarLoss(ValueError):
    """Backward was requested from a non-scalar tensor."""


_deterministic = True


def set_deterministic(flag: bool) -> None:
    """Toggle the global determinism flag.

    With the flag on (default) primitive kernels run with a fixed
    accumulation order and results are reproducible bit for bit across
    identical runs.  Nothing in this engine parallelizes internally, so
    the flag currently only pins the contract (and is consulted by the
    trainer for log content).
    """
    global _deterministic
    _deterministic = bool(flag)


def deterministic() -> bool:
    return _deterministic


_grad_enabled = True


class no_grad:
    """Context manager that suppresses graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class _Node:
    """One recorded primitive application: inputs plus backward closure.

    ``backward(grad_out, needs)`` returns one gradient per input;
    entries whose ``needs`` flag is False may be returned as None.
    """

    __slots__ = ("inputs", "backward")

    def __init__(self, inputs, backward):
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense rank-N array with an optional slot in the compute graph."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all routed through the module-level primitives.
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


_as_tensor = as_tensor


def _check_finite(arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteValue("primitive produced NaN or Inf")


def _make(out_data: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    _check_finite(out_data)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = _Node(inputs, backward)
    else:
        out.requires_grad = False
        out.node = None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} "
                        "(only exact-shape or scalar broadcasting)")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the (possibly scalar) operand shape."""
    if grad.shape == shape:
        return grad
    return np.sum(grad, dtype=np.float64).astype(grad.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "add")

    def backward(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None,
                _reduce_to(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "sub")

    def backward(g, needs):
        return (_reduce_to(g, a.shape) if needs[0] else None,
                _reduce_to(-g, b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "mul")

    def backward(g, needs):
        return (_reduce_to(g * b.data, a.shape) if needs[0] else None,
                _reduce_to(g * a.data, b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _binary_shapes(a, b, "div")

    def backward(g, needs):
        ga = _reduce_to(g / b.data, a.shape) if needs[0] else None
        gb = (_reduce_to(-g * a.data / (b.data * b.data), b.shape)
              if needs[1] else None)
        return ga, gb

    return _make(a.data / b.data, (a, b), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, sh: int, sw: int,
            ph: int, pw: int):
    """Patch matrix [B, Cin*kh*kw, Ho*Wo] built by kh*kw shifted-slice
    assignments into a contiguous 5-D buffer (no strided reshapes)."""
    bsz, cin, h, w = x.shape
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    cols = np.empty((bsz, cin, kh * kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = x[:, :, i:i + sh * ho:sh,
                                       j:j + sw * wo:sw]
    return cols.reshape(bsz, cin * kh * kw, ho * wo), ho, wo


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation: x[B,Cin,H,W] * w[Cout,Cin,kh,kw] (+ b[Cout])."""
    x = _as_tensor(x)
    w = _as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv2d: input {x.shape}, kernel {w.shape}")
    cout, cin, kh, kw = w.shape
    bsz, _, h, wdt = x.shape
    sh = sw = int(stride)
    ph = pw = int(padding)
    if h + 2 * ph < kh or wdt + 2 * pw < kw:
        raise ShapeMismatch("conv2d: kernel larger than padded input")
    if b is not None:
        b = _as_tensor(b, x)
        if b.shape != (cout,):
            raise ShapeMismatch(f"conv2d: bias {b.shape}, expected ({cout},)")

    cols, ho, wo = _im2col(x.data, kh, kw, sh, sw, ph, pw)
    w2d = w.data.reshape(cout, -1)
    out3 = np.matmul(w2d, cols)                      # [B, Cout, Ho*Wo]
    if b is not None:
        out3 += b.data[:, None]
    out = out3.reshape(bsz, cout, ho, wo)

    def backward(g, needs):
        g3 = np.ascontiguousarray(g).reshape(bsz, cout, ho * wo)
        gw = None
        if needs[1]:
            gw = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0)
            gw = gw.reshape(w.shape)
        gx = None
        if needs[0]:
            dcols = np.matmul(w2d.T, g3).reshape(bsz, cin, kh * kw, ho, wo)
            canvas = np.zeros((bsz, cin, h + 2 * ph, wdt + 2 * pw),
                              dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    canvas[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += \
                        dcols[:, :, i * kw + j]
            gx = canvas[:, :, ph:ph + h, pw:pw + wdt] if (ph or pw) else canvas
        if b is not None:
            gb = g3.sum(axis=(0, 2), dtype=np.float64).astype(g.dtype) \
                if needs[2] else None
            return gx, gw, gb
        return gx, gw

    inputs = (x, w) if b is None else (x, w, b)
    return _make(out, inputs, backward)


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    out = np.maximum(d, d * slope) if 0 <= slope <= 1 else \
        np.where(d > 0, d, d * slope)

    def backward(g, needs):
        return (np.where(d > 0, g, g * slope),)

    return _make(out, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)

    def backward(g, needs):
        return (g * y * (1.0 - y),)

    return _make(y, (x,), backward)


def softmax(x, axis: int) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g, needs):
        inner = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _make(y, (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="raise", invalid="raise"):
        try:
            out = np.log(x.data)
        except FloatingPointError as exc:
            raise NonFiniteValue("log of non-positive value") from exc

    def backward(g, needs):
        return (g / x.data,)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions (float64 accumulation, cast back to the storage dtype)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _expand_reduced(g, in_shape, axes, keepdims):
    if not keepdims:
        shape = list(in_shape)
        for a in axes:
            shape[a] = 1
        g = g.reshape(shape)
    return np.broadcast_to(g, in_shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g, needs):
        return (_expand_reduced(g, x.shape, axes, keepdims).astype(g.dtype),)

    return _make(out, (x,), backward)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64)
    out = np.asarray(out / count, dtype=x.dtype)

    def backward(g, needs):
        expanded = _expand_reduced(g, x.shape, axes, keepdims)
        return ((expanded / count).astype(g.dtype),)

    return _make(out, (x,), backward)


def l2_norm(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    axes = _axis_tuple(axis, x.data.ndim)
    sq = np.sum(np.square(x.data, dtype=np.float64), axis=axes,
                keepdims=keepdims)
    out = np.asarray(np.sqrt(sq), dtype=x.dtype)

    def backward(g, needs):
        denom = _expand_reduced(np.maximum(out, np.finfo(x.dtype).tiny),
                                x.shape, axes, keepdims)
        gexp = _expand_reduced(g, x.shape, axes, keepdims)
        return ((gexp * x.data / denom).astype(g.dtype),)

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# structure


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    ndim = ts[0].data.ndim
    axis = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim:
            raise ShapeMismatch("concat: rank mismatch")
        for a in range(ndim):
            if a != axis and t.shape[a] != ts[0].shape[a]:
                raise ShapeMismatch(
                    f"concat: shapes {ts[0].shape} vs {t.shape} on axis {a}")
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, needs):
        outs = []
        for i, t in enumerate(ts):
            if not needs[i]:
                outs.append(None)
                continue
            sl = [slice(None)] * ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(outs)

    return _make(np.concatenate([t.data for t in ts], axis=axis),
                 tuple(ts), backward)


def slice_(x, bounds) -> Tensor:
    """Sub-tensor selection; ``bounds`` is one (start, stop) pair per axis."""
    x = _as_tensor(x)
    if len(bounds) != x.data.ndim:
        raise ShapeMismatch("slice: one (start, stop) pair per axis required")
    sl = tuple(slice(int(b0), int(b1)) for b0, b1 in bounds)

    def backward(g, needs):
        canvas = np.zeros(x.shape, dtype=g.dtype)
        canvas[sl] = g
        return (canvas,)

    return _make(np.ascontiguousarray(x.data[sl]), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)

    def backward(g, needs):
        return (g.reshape(x.shape),)

    return _make(x.data.reshape(shape), (x,), backward)


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(int(a) for a in axes)
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def take(x, indices, axis: int = 0) -> Tensor:
    """Row gather along one axis (duplicate indices accumulate on backward)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch("take: indices must be 1-D")
    unique = idx.size == np.unique(idx).size

    def backward(g, needs):
        canvas = np.zeros(x.shape, dtype=g.dtype)
        view = canvas if axis == 0 else canvas.swapaxes(0, axis)
        gv = g if axis == 0 else g.swapaxes(0, axis)
        if unique:
            view[idx] = gv
        else:
            np.add.at(view, idx, gv)
        return (canvas,)

    return _make(np.ascontiguousarray(np.take(x.data, idx, axis=axis)),
                 (x,), backward)


def upsample2d(x, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the two trailing spatial axes."""
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeMismatch("upsample2d: expected rank-4 [B,C,H,W]")
    f = int(factor)
    out = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)
    bsz, c, h, w = x.shape

    def backward(g, needs):
        g6 = g.reshape(bsz, c, h, f, w, f)
        return (g6.sum(axis=(3, 5), dtype=np.float64).astype(g.dtype),)

    return _make(out, (x,), backward)


def stop_gradient(t) -> Tensor:
    """Value-equal tensor detached from the graph."""
    t = _as_tensor(t)
    return Tensor(t.data.copy(), requires_grad=False, dtype=t.dtype)


# ---------------------------------------------------------------------------
# dispatcher keyed by primitive name


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "matmul": matmul,
    "conv2d": conv2d,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "softmax": softmax,
    "log": log,
    "sum": tsum,
    "mean": tmean,
    "l2_norm": l2_norm,
    "concat": concat,
    "slice": slice_,
    "reshape": reshape,
    "transpose": transpose,
    "take": take,
    "upsample2d": upsample2d,
}


def apply_primitive(kind: str, operands, **attrs) -> Tensor:
    """Apply a primitive by name to a list of operands."""
    if kind not in PRIMITIVES:
        raise KeyError(f"unknown primitive kind {kind!r}")
    fn = PRIMITIVES[kind]
    if kind == "concat":
        return fn(operands, **attrs)
    return fn(*operands, **attrs)


# ---------------------------------------------------------------------------
# backward


def _toposort(loss: Tensor):
    """Reverse-topological preparation: returns (ordered tensors, seen ids)."""
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in seen:
                    stack.append((inp, False))
    return order, seen


def gradients(loss: Tensor, wrt: Sequence[Tensor],
              with_detached_flags: bool = False):
    """d(loss)/d(t) for each t in ``wrt``.

    Tensors that never entered the recorded graph receive a zero
    gradient; ``with_detached_flags=True`` additionally returns one
    boolean per tensor marking that case (distinguishing it from a
    legitimate zero gradient).  Forward values are never mutated.
    """
    if loss.size != 1:
        raise NotScalarLoss(f"loss has shape {loss.shape}")
    order, seen = _toposort(loss)
    wrt_ids = {id(t) for t in wrt}

    # A tensor is "needed" if a wrt tensor is reachable from it.
    needed = set()
    for t in order:  # inputs precede consumers
        if id(t) in wrt_ids:
            needed.add(id(t))
        elif t.node is not None and any(id(i) in needed for i in t.node.inputs):
            needed.add(id(t))

    accum: dict[int, np.ndarray] = {
        id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    for t in reversed(order):
        if t.node is None:
            continue
        g = accum.pop(id(t), None)
        if g is None:
            continue
        inputs = t.node.inputs
        needs = tuple(id(i) in needed for i in inputs)
        if not any(needs):
            continue
        in_grads = t.node.backward(g, needs)
        for inp, ig in zip(inputs, in_grads):
            if ig is None or id(inp) not in needed:
                continue
            prev = accum.get(id(inp))
            # accumulation is never in place: backward closures may
            # return aliased arrays shared between inputs
            accum[id(inp)] = ig if prev is None else prev + ig

    grads = []
    flags = []
    for t in wrt:
        g = accum.get(id(t))
        if g is None:
            g = np.zeros(t.shape, dtype=t.dtype)
        grads.append(Tensor(g, dtype=t.dtype))
        flags.append(id(t) not in seen)
    if with_detached_flags:
        return grads, flags
    return grads
