from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from django.core.exceptions import ValidationError
from scipy.special import expit

logger = logging.getLogger(__name__)


# -------------------------
# Precision / debug switches
# -------------------------

_DTYPES = {"float32": np.float32, "float64": np.float64}

# process-wide default from settings; precision() overrides it per context
_default_dtype = np.float32
_precision_override: contextvars.ContextVar[Optional[type]] = contextvars.ContextVar("precision", default=None)
_check_finite = False

_active_tape: contextvars.ContextVar[Optional["GradTape"]] = contextvars.ContextVar("active_tape", default=None)

# op name -> factor applied to that op's backward output (fault injection)
_backward_faults: dict[str, float] = {}


def configure(*, dtype="float32", check_finite=False) -> None:
    global _check_finite
    set_default_dtype(dtype)
    _check_finite = bool(check_finite)
    logger.debug("tensor configured dtype=%s check_finite=%s", np.dtype(_default_dtype).name, _check_finite)


def get_default_dtype():
    override = _precision_override.get()
    return _default_dtype if override is None else override


def _resolve_dtype(dtype) -> type:
    if isinstance(dtype, str):
        if dtype not in _DTYPES:
            raise ValidationError(
                "Unsupported precision %(dtype)s (use float32 or float64).",
                code="bad_value",
                params={"dtype": dtype},
            )
        dtype = _DTYPES[dtype]
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValidationError(
            "Unsupported precision %(dtype)s (use float32 or float64).",
            code="bad_value",
            params={"dtype": np.dtype(dtype).name},
        )
    return dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = _resolve_dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Switch the default precision for the current context (float64 for oracle tests)."""
    token = _precision_override.set(_resolve_dtype(dtype))
    try:
        yield
    finally:
        _precision_override.reset(token)


@contextlib.contextmanager
def inject_backward_fault(op: str, factor: float = 1.5):
    """Scale the backward rule of one op. Test harness hook for the grad-check."""
    _backward_faults[op] = float(factor)
    try:
        yield
    finally:
        _backward_faults.pop(op, None)


# -------------------------
# Values
# -------------------------

class Tensor:
    """Dense N-d array in [batch, channel, height, width] layout for images."""

    __slots__ = ("data", "param")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or get_default_dtype(), order="C")
        self.param = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = arr
        out.param = None
        return out

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValidationError(
                "item() needs a single-element tensor, got shape %(shape)s.",
                code="non_scalar",
                params={"shape": self.shape},
            )
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype.name})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Parameter:
    """A trainable tensor with a stable dotted name, e.g. g.block1.shortcut.Wg.kernel."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = Tensor(value)
        self.value.param = self
        self.grad = np.zeros_like(self.value.data)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


# -------------------------
# Tape
# -------------------------

@dataclass
class TapeRecord:
    op: str
    output: Tensor
    inputs: tuple
    backward: Callable[[np.ndarray], tuple]


class GradTape:
    """
    Records primitive ops while active:

        with GradTape() as tape:
            loss = ...
        grads = backward(tape, loss)

    Owned by one training thread; never share a tape.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self.gradients: Optional[GradientMap] = None
        self._token = None

    def __enter__(self) -> "GradTape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)

    def ops(self) -> list[str]:
        return [rec.op for rec in self.records]


@contextlib.contextmanager
def no_tape():
    """Run ops without recording, even inside an active tape."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class GradientMap:
    """tensor -> accumulated gradient; tensors the loss never touched map to zeros."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None or self._tensors.get(id(tensor)) is not tensor:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor: Tensor) -> bool:
        return id(tensor) in self._grads and self._tensors.get(id(tensor)) is tensor

    def __len__(self):
        return len(self._grads)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    if _check_finite and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"Non-finite output from {op}.")
    result = Tensor._wrap(out)
    tape = _active_tape.get()
    if tape is not None:
        tape.records.append(TapeRecord(op, result, tuple(inputs), backward_fn))
    return result


def backward(tape: GradTape, loss: Tensor, params: Optional[Iterable[Parameter]] = None) -> GradientMap:
    """
    Reverse-mode sweep over the tape in exact reverse recording order.

    If params is given, every parameter's .grad is overwritten: the exact
    gradient when the loss reaches it, zeros otherwise.
    """
    if loss.size != 1:
        raise ValidationError(
            "backward() needs a scalar loss, got shape %(shape)s.",
            code="non_scalar",
            params={"shape": loss.shape},
        )

    grads = {id(loss): np.ones_like(loss.data)}
    tensors = {id(loss): loss}

    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None or tensors.get(id(rec.output)) is not rec.output:
            continue
        factor = _backward_faults.get(rec.op)
        for tensor, g in zip(rec.inputs, rec.backward(g_out)):
            if g is None:
                continue
            if factor is not None:
                g = g * factor
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                tensors[key] = tensor

    gradients = GradientMap(grads, tensors)
    tape.gradients = gradients

    if params is not None:
        for p in params:
            p.grad = np.array(gradients[p.value], dtype=p.value.dtype, copy=True)
    return gradients


# -------------------------
# Errors
# -------------------------

def _shape_error(op, a, b, code="shape_mismatch") -> ValidationError:
    return ValidationError(
        "%(op)s: shape mismatch %(a)s vs %(b)s.",
        code=code,
        params={"op": op, "a": list(a), "b": list(b)},
    )


def _require_rank(op, x: Tensor, rank: int):
    if x.ndim != rank:
        raise ValidationError(
            "%(op)s expects a rank-%(rank)s tensor, got shape %(shape)s.",
            code="shape_mismatch",
            params={"op": op, "rank": rank, "shape": list(x.shape)},
        )


# -------------------------
# Elementwise
# -------------------------

_ELEMENTWISE = ("add", "sub", "mul")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """a op b for equal shapes, or tensor op python-scalar. No other broadcasting."""
    if op not in _ELEMENTWISE:
        raise ValidationError("Unknown elementwise op %(op)s.", code="bad_value", params={"op": op})
    a = as_tensor(a)

    if isinstance(b, Tensor):
        if a.shape != b.shape:
            raise _shape_error(op, a.shape, b.shape)
        x, y = a.data, b.data
        if op == "add":
            return _record("add", x + y, (a, b), lambda g: (g, g))
        if op == "sub":
            return _record("sub", x - y, (a, b), lambda g: (g, -g))
        return _record("mul", x * y, (a, b), lambda g: (g * y, g * x))

    if np.ndim(b) != 0:
        raise _shape_error(op, a.shape, np.shape(b))
    s = float(b)
    if op == "add":
        return add_scalar(a, s)
    if op == "sub":
        return add_scalar(a, -s)
    return scale(a, s)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("scale", x.data * s, (x,), lambda g: (g * s,))


def add_scalar(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record("add_scalar", x.data + s, (x,), lambda g: (g,))


def one_minus(x: Tensor) -> Tensor:
    return _record("one_minus", 1.0 - x.data, (x,), lambda g: (-g,))


def log(x: Tensor, floor: float = 1e-12) -> Tensor:
    """Natural log with the input clamped at `floor`."""
    xd = x.data
    clamped = np.maximum(xd, floor)

    def _backward(g):
        return (g * (xd > floor) / clamped,)

    return _record("log", np.log(clamped), (x,), _backward)


# -------------------------
# Linear algebra
# -------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_rank("matmul", a, 2)
    _require_rank("matmul", b, 2)
    if a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape, code="dim_mismatch")
    x, y = a.data, b.data
    return _record("matmul", x @ y, (a, b), lambda g: (g @ y.T, x.T @ g))


def _im2col(x: np.ndarray, kh: int, kw: int, pad: int):
    n, c, h, w = x.shape
    oh, ow = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    col = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            col[:, :, i, j] = xp[:, :, i:i + oh, j:j + ow]
    return col, oh, ow


def _col2im(dcol: np.ndarray, x_shape, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = dcol.shape[4], dcol.shape[5]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=dcol.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + oh, j:j + ow] += dcol[:, :, i, j]
    if pad:
        return dxp[:, :, pad:pad + h, pad:pad + w]
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation (no kernel flip); 1x1 and 3x3 kernels only."""
    _require_rank("conv2d", x, 4)
    _require_rank("conv2d", kernel, 4)
    co, ci, kh, kw = kernel.shape
    if kh not in (1, 3) or kw not in (1, 3):
        raise ValidationError(
            "conv2d supports 1x1 and 3x3 kernels, got %(kh)sx%(kw)s.",
            code="kernel_size",
            params={"kh": kh, "kw": kw},
        )
    if x.shape[1] != ci:
        raise _shape_error("conv2d", x.shape, kernel.shape, code="channel_mismatch")
    if bias is not None and bias.shape != (co,):
        raise _shape_error("conv2d bias", bias.shape, (co,))
    if padding == "same":
        pad = (kh - 1) // 2
        if kh != kw:
            raise ValidationError("same padding needs a square kernel.", code="kernel_size")
    elif padding == "valid":
        pad = 0
    else:
        raise ValidationError("Unknown padding %(p)s.", code="bad_value", params={"p": padding})

    xd, kd = x.data, kernel.data
    col, oh, ow = _im2col(xd, kh, kw, pad)
    out = np.tensordot(col, kd, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.reshape(1, co, 1, 1)
    out = np.ascontiguousarray(out)

    def _backward(g):
        dk = np.tensordot(g, col, axes=([0, 2, 3], [0, 4, 5]))
        dcol = np.tensordot(g, kd, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        dx = _col2im(dcol, xd.shape, kh, kw, pad)
        if bias is None:
            return dx, dk
        return dx, dk, g.sum(axis=(0, 2, 3))

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _record("conv2d", out, inputs, _backward)


# -------------------------
# Shape ops
# -------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise _shape_error("reshape", x.shape, shape) from None
    src = x.shape
    return _record("reshape", out, (x,), lambda g: (g.reshape(src),))


def concat_channels(a: Tensor, c: Tensor) -> Tensor:
    """Concatenate along axis 1, `a` first."""
    if a.ndim < 2 or a.ndim != c.ndim or a.shape[0] != c.shape[0] or a.shape[2:] != c.shape[2:]:
        raise _shape_error("concat_channels", a.shape, c.shape)
    ca = a.shape[1]
    out = np.concatenate([a.data, c.data], axis=1)
    return _record("concat_channels", out, (a, c), lambda g: (g[:, :ca], g[:, ca:]))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise _shape_error("channel_slice", x.shape, (start, stop))
    src_shape, dtype = x.shape, x.dtype

    def _backward(g):
        dx = np.zeros(src_shape, dtype=dtype)
        dx[:, start:stop] = g
        return (dx,)

    return _record("channel_slice", np.ascontiguousarray(x.data[:, start:stop]), (x,), _backward)


def split_channels(x: Tensor, sizes: Sequence[int]) -> tuple:
    if sum(sizes) != x.shape[1]:
        raise _shape_error("split_channels", x.shape, tuple(sizes))
    parts, start = [], 0
    for size in sizes:
        parts.append(channel_slice(x, start, start + size))
        start += size
    return tuple(parts)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank("upsample_nearest2x", x, 4)
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _record(
        "upsample_nearest2x",
        out,
        (x,),
        lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),),
    )


def avgpool2x(x: Tensor) -> Tensor:
    _require_rank("avgpool2x", x, 4)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValidationError(
            "avgpool2x needs even spatial extents, got %(h)sx%(w)s.",
            code="odd_extent",
            params={"h": h, "w": w},
        )
    out = x.data.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))
    return _record(
        "avgpool2x",
        out,
        (x,),
        lambda g: ((g * 0.25).repeat(2, axis=2).repeat(2, axis=3),),
    )


def global_sum_pool(x: Tensor) -> Tensor:
    _require_rank("global_sum_pool", x, 4)
    shape = x.shape
    return _record(
        "global_sum_pool",
        x.data.sum(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None], shape).copy(),),
    )


def reduce_sum(x: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims), dtype=x.dtype)

    def _backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("reduce_sum", out, (x,), _backward)


def mean(x: Tensor) -> Tensor:
    """Mean over every element, as a scalar tensor."""
    return scale(reduce_sum(x), 1.0 / x.size)


# -------------------------
# Activations
# -------------------------

def activation(kind: str, x: Tensor) -> Tensor:
    xd = x.data
    if kind == "relu":
        return _record("relu", np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))
    if kind == "sigmoid":
        info = np.finfo(xd.dtype)
        s = np.clip(expit(xd), info.tiny, 1.0 - info.epsneg)
        return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "tanh":
        t = np.tanh(xd)
        return _record("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))
    raise ValidationError("Unknown activation %(kind)s.", code="bad_value", params={"kind": kind})


def relu(x: Tensor) -> Tensor:
    return activation("relu", x)


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


# -------------------------
# Per-channel helpers used by the layers
# -------------------------

def _channel_view(v: np.ndarray, ndim: int) -> np.ndarray:
    # (c,) -> (1, c, 1, ...) ; (b, c) -> (b, c, 1, ...)
    if v.ndim == 1:
        v = v.reshape(1, -1)
    return v.reshape(v.shape + (1,) * (ndim - 2))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b a [c] vector laid along axis 1."""
    if b.ndim != 1 or x.ndim < 2 or b.shape[0] != x.shape[1]:
        raise _shape_error("bias_add", x.shape, b.shape)
    axes = tuple(i for i in range(x.ndim) if i != 1)
    out = x.data + _channel_view(b.data, x.ndim)
    return _record("bias_add", out, (x, b), lambda g: (g, g.sum(axis=axes)))


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """
    x * gamma + beta per channel. gamma/beta are [c] (shared) or [b, c]
    (per sample, as conditional BN produces them).
    """
    c = x.shape[1]
    for t in (gamma, beta):
        ok = (t.shape == (c,)) or (t.shape == (x.shape[0], c))
        if not ok:
            raise _shape_error("channel_affine", x.shape, t.shape)
    xd = x.data
    gv = _channel_view(gamma.data, x.ndim)
    out = xd * gv + _channel_view(beta.data, x.ndim)

    def _reduce_like(g, target_shape):
        if len(target_shape) == 1:
            axes = tuple(i for i in range(g.ndim) if i != 1)
        else:
            axes = tuple(range(2, g.ndim))
        return g.sum(axis=axes) if axes else g

    def _backward(g):
        return g * gv, _reduce_like(g * xd, gamma.shape), _reduce_like(g, beta.shape)

    return _record("channel_affine", out, (x, gamma, beta), _backward)


def standardize(x: Tensor, eps: float = 1e-5, mean=None, var=None) -> Tensor:
    """
    Per-channel standardization over every axis but 1.

    With mean/var omitted the batch statistics are used (biased variance) and
    the backward rule differentiates through them; with mean/var given this is
    a fixed affine map.
    """
    if x.ndim < 2:
        raise _shape_error("standardize", x.shape, ("b", "c", "..."))
    axes = tuple(i for i in range(x.ndim) if i != 1)
    xd = x.data

    if mean is not None:
        mu = _channel_view(np.asarray(mean, dtype=xd.dtype), x.ndim)
        inv = 1.0 / np.sqrt(_channel_view(np.asarray(var, dtype=xd.dtype), x.ndim) + eps)
        return _record("standardize_fixed", (xd - mu) * inv, (x,), lambda g: (g * inv,))

    n = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    centered = xd - mu
    sigma2 = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(sigma2 + eps)
    xhat = centered * inv

    def _backward(g):
        sum_g = g.sum(axis=axes, keepdims=True)
        sum_gx = (g * xhat).sum(axis=axes, keepdims=True)
        return (inv / n * (n * g - sum_g - xhat * sum_gx),)

    return _record("standardize", xhat, (x,), _backward)


def take_rows(table: Tensor, ids) -> Tensor:
    """Row gather for embeddings; backward accumulates into the selected rows only."""
    _require_rank("take_rows", table, 2)
    idx = np.asarray(ids, dtype=np.int64).reshape(-1)
    k = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ValidationError(
            "Class id out of range [0, %(k)s): %(ids)s.",
            code="class_range",
            params={"k": k, "ids": idx.tolist()},
        )
    shape, dtype = table.shape, table.dtype

    def _backward(g):
        dt = np.zeros(shape, dtype=dtype)
        np.add.at(dt, idx, g)
        return (dt,)

    return _record("take_rows", table.data[idx], (table,), _backward)


def spectral_scale(w: Tensor, u: np.ndarray, v: np.ndarray, floor: float = 1e-12) -> Tensor:
    """W / (u^T W v) with W viewed as [out, rest] and u, v held constant."""
    wd = w.data
    wm = wd.reshape(wd.shape[0], -1)
    sigma = float(u @ wm @ v)
    clamped = sigma < floor
    sigma = max(sigma, floor)
    uv = np.outer(u, v).reshape(wd.shape).astype(wd.dtype, copy=False)

    def _backward(g):
        dw = g / sigma
        if not clamped:
            dw = dw - (float((g * wd).sum()) / (sigma * sigma)) * uv
        return (dw,)

    return _record("spectral_scale", wd / sigma, (w,), _backward)
