"""Dense float64 tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a C-contiguous ``numpy`` float64 array, so ``values``
is always a flat row-major buffer of length ``prod(shape)``.  Operations build
an expression DAG; ``backward()`` linearizes it into a :class:`Tape` (inputs
strictly before outputs) and replays the recorded backward rules in reverse.
Forward functions never mutate their inputs; ``reshape``/``transpose`` copy.

Everything runs in float64 on purpose: the test suite leans on central finite
differences, which need the precision far more than this code needs speed.
"""

from __future__ import annotations

import contextlib
import weakref
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "TapeRecord",
    "DimensionError",
    "ConfigurationError",
    "no_grad",
    "grad_enabled",
    "ActivationMeter",
    "matmul",
    "concat",
    "gather_rows",
    "slice_axis",
    "straight_through",
    "conv2d",
    "upsample_nearest",
    "downsample_nearest",
    "cross_entropy",
    "glorot_uniform",
    "zeros_param",
]

_SQRT_HALF = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ConfigurationError(ValueError):
    """A size, factor, ratio or flag violates an operation's precondition."""


_grad_enabled = True
_active_meter: Optional["ActivationMeter"] = None


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording; intermediate tensors become free-standing."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ActivationMeter:
    """Tracks live/peak float counts of tensors allocated while active.

    Under ``no_grad`` intermediates are released as soon as references drop,
    so ``peak`` reflects the real simultaneous footprint; with the graph
    recording (training) everything stays alive until backward, and ``peak``
    degenerates to total-allocated, which is still a valid upper bound.
    """

    def __init__(self):
        self.current = 0
        self.peak = 0
        self.total = 0

    def _alloc(self, n: int) -> None:
        self.current += n
        self.total += n
        if self.current > self.peak:
            self.peak = self.current

    def _free(self, n: int) -> None:
        self.current -= n

    def __enter__(self) -> "ActivationMeter":
        global _active_meter
        self._outer = _active_meter
        _active_meter = self
        return self

    def __exit__(self, *exc):
        global _active_meter
        _active_meter = self._outer
        return False


class Tensor:
    """Dense N-dimensional float64 value with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        # always copy: the payload must never alias caller-owned memory
        self.data = np.array(data, dtype=np.float64, order="C")
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self.op = ""
        meter = _active_meter
        if meter is not None:
            meter._alloc(self.data.size)
            weakref.finalize(self, meter._free, self.data.size)

    # -- contract views -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.data.reshape(-1)

    @property
    def gradient(self) -> Optional[np.ndarray]:
        return None if self.grad is None else self.grad.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node(self) -> Optional["TapeRecord"]:
        """Back-reference into the recorded graph; None for leaves."""
        if self._backward is None:
            return None
        return TapeRecord(id(self), tuple(id(p) for p in self._parents), self.op, self._backward)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}, op={self.op!r})"

    # -- autodiff ------------------------------------------------------------
    def backward(self) -> None:
        """Reverse-accumulate d(self)/d(leaf) for every reachable leaf."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {self.shape}")
        tape = Tape.from_root(self)
        self.grad = np.ones_like(self.data)
        for t in reversed(tape.ops):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    def detach(self) -> "Tensor":
        """Copy of the value with no graph attachment."""
        return _fresh(self.data.copy())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may be a view the caller reuses
        else:
            self.grad += g

    # -- arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops -------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        try:
            out_data = self.data.reshape(shape).copy()
        except ValueError:
            raise DimensionError(f"cannot reshape {self.shape} to {tuple(shape)}") from None
        src_shape = self.shape

        def backward(g, a=self):
            a.accumulate_grad(g.reshape(src_shape))

        return _result(out_data, (self,), backward, "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.data.ndim)))
        inv = np.argsort(axes)

        def backward(g, a=self):
            a.accumulate_grad(np.ascontiguousarray(g.transpose(inv)))

        return _result(np.ascontiguousarray(self.data.transpose(axes)), (self,), backward, "transpose")

    # -- reductions --------------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g, a=self, axis=axis, keepdims=keepdims):
            a.accumulate_grad(_spread(g, a.data.shape, axis, keepdims))

        return _result(np.asarray(out_data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        count = self.data.size if axis is None else int(np.prod([self.data.shape[a] for a in _axis_tuple(axis, self.data.ndim)]))

        def backward(g, a=self, axis=axis, keepdims=keepdims, count=count):
            a.accumulate_grad(_spread(g, a.data.shape, axis, keepdims) / count)

        return _result(np.asarray(out_data), (self,), backward, "mean")

    # -- pointwise ------------------------------------------------------------------
    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def backward(g, a=self, y=out_data):
            a.accumulate_grad(g * y)

        return _result(out_data, (self,), backward, "exp")

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def backward(g, a=self):
            a.accumulate_grad(g / a.data)

        return _result(out_data, (self,), backward, "log")

    def relu(self) -> "Tensor":
        out_data = np.maximum(self.data, 0.0)

        def backward(g, a=self):
            a.accumulate_grad(g * (a.data > 0.0))

        return _result(out_data, (self,), backward, "relu")

    def gelu(self) -> "Tensor":
        # exact erf form; derivative = Phi(x) + x * phi(x)
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
        out_data = x * cdf

        def backward(g, a=self, cdf=cdf):
            x = a.data
            a.accumulate_grad(g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI))

        return _result(out_data, (self,), backward, "gelu")

    def softmax(self, axis: int) -> "Tensor":
        if not -self.data.ndim <= axis < self.data.ndim:
            raise DimensionError(f"softmax axis {axis} invalid for shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def backward(g, a=self, y=y, axis=axis):
            a.accumulate_grad(y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return _result(y, (self,), backward, "softmax")


# -- construction helpers ------------------------------------------------------


def _fresh(data: np.ndarray) -> Tensor:
    """Wrap an array the caller just allocated, without re-copying."""
    t = Tensor.__new__(Tensor)
    t.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
    t.grad = None
    t.requires_grad = False
    t._parents = ()
    t._backward = None
    t.op = ""
    meter = _active_meter
    if meter is not None:
        meter._alloc(t.data.size)
        weakref.finalize(t, meter._free, t.data.size)
    return t


def _result(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    out = _fresh(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else _fresh(np.asarray(x, dtype=np.float64))


def _axis_tuple(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduction gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape).copy()
    if not keepdims:
        g = np.expand_dims(g, _axis_tuple(axis, len(shape)))
    return np.broadcast_to(g, shape).copy()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    t = _fresh(rng.uniform(-limit, limit, size=tuple(shape)))
    t.requires_grad = True
    return t


def zeros_param(shape: Sequence[int]) -> Tensor:
    t = _fresh(np.zeros(tuple(shape)))
    t.requires_grad = True
    return t


# -- binary elementwise ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out_data = a.data / b.data
    except ValueError:
        raise DimensionError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _result(out_data, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g, a=a, c=c):
        a.accumulate_grad(g * c)

    return _result(a.data * c, (a,), backward, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product, or batched 3-D with equal leading dimension."""
    if a.data.ndim == b.data.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: inner dims disagree for {a.shape} x {b.shape}")
    elif a.data.ndim == b.data.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"matmul: batched shapes {a.shape} x {b.shape} incompatible")
    else:
        raise DimensionError(f"matmul: unsupported ranks for {a.shape} x {b.shape}")
    out_data = a.data @ b.data

    def backward(g, a=a, b=b):
        if a.requires_grad:
            a.accumulate_grad(g @ b.data.swapaxes(-1, -2))
        if b.requires_grad:
            b.accumulate_grad(a.data.swapaxes(-1, -2) @ g)

    return _result(out_data, (a, b), backward, "matmul")


# -- structural ops ------------------------------------------------------------------


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g, parts=parts, splits=splits, axis=axis):
        for p, gp in zip(parts, np.split(g, splits, axis=axis)):
            if p.requires_grad:
                p.accumulate_grad(gp)

    return _result(out_data, parts, backward, "concat")


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of a 2-D tensor; backward scatter-adds (repeats allowed)."""
    if x.data.ndim != 2:
        raise DimensionError(f"gather_rows expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64).copy()
    out_data = x.data[idx].copy()

    def backward(g, x=x, idx=idx):
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        x.accumulate_grad(buf)

    return _result(out_data, (x,), backward, "gather_rows")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out_data = x.data[sl].copy()

    def backward(g, x=x, sl=sl):
        buf = np.zeros_like(x.data)
        buf[sl] = g
        x.accumulate_grad(buf)

    return _result(out_data, (x,), backward, "slice")


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the hard values exactly; route gradient to the soft relaxation."""
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise DimensionError(f"straight_through: hard {hard.shape} vs soft {soft.shape}")

    def backward(g, soft=soft):
        soft.accumulate_grad(g)

    return _result(hard.copy(), (soft,), backward, "straight_through")


# -- spatial ops -------------------------------------------------------------------------


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of x[C,H,W] with w[O,C,k,k], zero padding.

    Output size must be exact: (H + 2*pad - k) divisible by stride.
    """
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise DimensionError(f"conv2d: need x[C,H,W], w[O,C,k,k]; got {x.shape}, {w.shape}")
    C, H, W = x.shape
    O, Ci, kh, kw = w.shape
    if Ci != C or kh != kw:
        raise DimensionError(f"conv2d: weight {w.shape} incompatible with input {x.shape}")
    k = kh
    if k not in (1, 2, 3, 4):
        raise ConfigurationError(f"conv2d: kernel size {k} unsupported")
    if stride < 1 or pad < 0:
        raise ConfigurationError(f"conv2d: bad stride/pad ({stride}, {pad})")
    if (H + 2 * pad - k) % stride or (W + 2 * pad - k) % stride:
        raise ConfigurationError(
            f"conv2d: non-integral output for input {H}x{W}, k={k}, stride={stride}, pad={pad}"
        )
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1

    if pad:
        xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
        xp[:, pad : pad + H, pad : pad + W] = x.data
    else:
        xp = x.data
    cols = np.empty((C, k, k, Ho, Wo))
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    cols2 = cols.reshape(C * k * k, Ho * Wo)
    out_data = (w.data.reshape(O, -1) @ cols2).reshape(O, Ho, Wo)

    def backward(g, x=x, w=w, cols2=cols2, k=k, stride=stride, pad=pad, Ho=Ho, Wo=Wo):
        C, H, W = x.shape
        O = w.shape[0]
        g2 = g.reshape(O, -1)
        if w.requires_grad:
            w.accumulate_grad((g2 @ cols2.T).reshape(w.shape))
        if x.requires_grad:
            dcols = (w.data.reshape(O, -1).T @ g2).reshape(C, k, k, Ho, Wo)
            dxp = np.zeros((C, H + 2 * pad, W + 2 * pad))
            for i in range(k):
                for j in range(k):
                    dxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, i, j]
            x.accumulate_grad(dxp[:, pad : pad + H, pad : pad + W])

    return _result(out_data, (x, w), backward, "conv2d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel factor x factor; backward sums the replicas."""
    if x.data.ndim != 3:
        raise DimensionError(f"upsample_nearest expects [C,H,W], got {x.shape}")
    if factor < 1:
        raise ConfigurationError(f"upsample_nearest: factor {factor} < 1")
    out_data = x.data.repeat(factor, axis=1).repeat(factor, axis=2)

    def backward(g, x=x, f=factor):
        C, H, W = x.shape
        x.accumulate_grad(g.reshape(C, H, f, W, f).sum(axis=(2, 4)))

    return _result(out_data, (x,), backward, "upsample_nearest")


def downsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Keep the top-left pixel of each factor x factor block."""
    if x.data.ndim != 3:
        raise DimensionError(f"downsample_nearest expects [C,H,W], got {x.shape}")
    if factor < 1:
        raise ConfigurationError(f"downsample_nearest: factor {factor} < 1")
    C, H, W = x.shape
    if H % factor or W % factor:
        raise ConfigurationError(f"downsample_nearest: {H}x{W} not divisible by {factor}")
    out_data = x.data[:, ::factor, ::factor].copy()

    def backward(g, x=x, f=factor):
        buf = np.zeros_like(x.data)
        buf[:, ::f, ::f] = g
        x.accumulate_grad(buf)

    return _result(out_data, (x,), backward, "downsample_nearest")


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean pixel-wise negative log-softmax over non-ignored pixels.

    logits is [K,H,W]; labels an int map [H,W] with entries in [0,K) or equal
    to ignore_index.  All pixels ignored -> loss 0 with zero gradient.
    """
    if logits.data.ndim != 3:
        raise DimensionError(f"cross_entropy expects logits [K,H,W], got {logits.shape}")
    K, H, W = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (H, W):
        raise DimensionError(f"cross_entropy: labels {labels.shape} vs logits {logits.shape}")
    valid = labels != ignore_index
    lab = np.where(valid, labels, 0).astype(np.int64)
    if lab.min() < 0 or lab.max() >= K:
        raise ConfigurationError("cross_entropy: label outside [0, K)")
    n_valid = int(valid.sum())

    shifted = logits.data - logits.data.max(axis=0, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
    if n_valid == 0:
        picked = 0.0
    else:
        picked = -logp[lab, np.arange(H)[:, None], np.arange(W)[None, :]][valid].mean()
    out_data = np.asarray(picked)

    def backward(g, logits=logits, logp=logp, lab=lab, valid=valid, n_valid=n_valid):
        if n_valid == 0:
            return
        K, H, W = logits.shape
        d = np.exp(logp)
        d[lab, np.arange(H)[:, None], np.arange(W)[None, :]] -= 1.0
        d *= valid / n_valid
        logits.accumulate_grad(d * g)

    return _result(out_data, (logits,), backward, "cross_entropy")


# -- tape introspection ---------------------------------------------------------------


@dataclass(frozen=True)
class TapeRecord:
    output_id: int
    input_ids: tuple
    op: str
    backward_rule: Optional[Callable]


class Tape:
    """Topologically ordered operation list for one expression DAG."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list = []
        seen = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    @property
    def records(self) -> list:
        return [
            TapeRecord(id(t), tuple(id(p) for p in t._parents), t.op, t._backward)
            for t in self.ops
        ]

    def leaves(self) -> list:
        return [t for t in self.ops if not t._parents and t.requires_grad]
