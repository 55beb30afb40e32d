"""Dense tensors with a recorded operation graph and reverse-mode gradients.

The graph is implicit: every operation result keeps references to its
parents together with a closure that maps the output gradient to parent
gradients. ``Tensor.backward`` walks that graph once in reverse
topological order and deposits gradients on the trainable leaves.
Everything runs on numpy arrays; float64 is the default so gradient
checks are stable, float32 can be requested for training runs.

A recorded graph has a single owner: do not share tensors under
construction across threads. Independent graphs are fine to evaluate
concurrently; parameter tensors may move between owners only between
optimizer steps.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Mapping, Sequence

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(ValueError):
    """An operation received (or a check found) NaN/Inf values."""


def as_dtype(precision: str) -> np.dtype:
    try:
        return {"float32": np.dtype(np.float32), "float64": np.dtype(np.float64)}[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}, expected float32/float64") from None


class Tensor:
    """A numpy array plus the backward rule that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; all routing goes through the module-level ops
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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, pow_const(other, -1.0))

    def __getitem__(self, key):
        return slice_(self, key)

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; accumulates ``.grad`` on leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.data.shape}")
        order = _toposort(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            out_grad = flowing.pop(id(node), None)
            if out_grad is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = out_grad if node.grad is None else node.grad + out_grad
                continue
            for parent, pg in zip(node._parents, node._backward(out_grad)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + pg
                else:
                    flowing[key] = pg


def _toposort(root: Tensor) -> list[Tensor]:
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
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _coerce(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def gradients(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar loss for each parameter; zeros when unreachable."""
    for p in params:
        p.grad = None
    loss.backward()
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _result(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    return _result(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a, factor: float) -> Tensor:
    a = _coerce(a)
    c = float(factor)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def pow_const(a, p: float) -> Tensor:
    a = _coerce(a)
    p = float(p)
    data = a.data**p
    return _result(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def exp(a) -> Tensor:
    a = _coerce(a)
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: (g * data,))


def log(a) -> Tensor:
    a = _coerce(a)
    if np.any(a.data <= 0):
        raise NonFiniteError("log: input must be strictly positive")
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def matmul(a, b) -> Tensor:
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(data, (a, b), backward)


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    axes = _axis_tuple(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if a.ndim else 1
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _result(data, (a,), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: needs at least one input")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis % p.ndim] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        ax = axis % parts[0].ndim
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=ax) for i in range(len(parts))
        )

    return _result(data, parts, backward)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _coerce(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def swap_last(a) -> Tensor:
    """Transpose the trailing two axes (matrix transpose, batch-aware)."""
    a = _coerce(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def slice_(a, key) -> Tensor:
    """Basic indexing only (ints, slices, ellipsis); no index arrays."""
    a = _coerce(a)
    data = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g  # basic keys never alias, so assignment is exact
        return (full,)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# fused neural ops


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by a row-max shift."""
    a = _coerce(a)
    if a.ndim < 1:
        raise ShapeError("softmax_rows: input must have at least one axis")
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (a,), backward)


def conv1d(x, w, b) -> Tensor:
    """Length-preserving 1-D convolution, zero-padded, stride 1.

    x: (batch, in_channels, length); w: (out_channels, in_channels, k);
    b: (out_channels,). Even kernels pad one extra sample on the right.
    """
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    if x.ndim != 3 or w.ndim != 3 or b.ndim != 1:
        raise ShapeError(f"conv1d: expected x(B,C,L) w(O,C,K) b(O,), got {x.shape} {w.shape} {b.shape}")
    if x.shape[1] != w.shape[1] or w.shape[0] != b.shape[0]:
        raise ShapeError(f"conv1d: channel mismatch, x {x.shape}, w {w.shape}, b {b.shape}")
    batch, _, length = x.shape
    k = w.shape[2]
    pad_left, pad_right = (k - 1) // 2, k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad_left, pad_right)))
    out = np.empty((batch, w.shape[0], length), dtype=x.dtype)
    out[:] = b.data[None, :, None]
    for off in range(k):
        out += np.einsum("bcl,oc->bol", xp[:, :, off : off + length], w.data[:, :, off])

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for off in range(k):
            gw[:, :, off] = np.einsum("bcl,bol->oc", xp[:, :, off : off + length], g)
            gxp[:, :, off : off + length] += np.einsum("oc,bol->bcl", w.data[:, :, off], g)
        gx = gxp[:, :, pad_left : pad_left + length]
        return gx, gw, g.sum(axis=(0, 2))

    return _result(out, (x, w, b), backward)


def maxpool1d(x) -> Tensor:
    """Max pooling with kernel 2 and stride 2; an odd trailing sample is dropped."""
    x = _coerce(x)
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: expected (B,C,L), got {x.shape}")
    length = x.shape[2]
    out_len = length // 2
    if out_len == 0:
        raise ShapeError(f"maxpool1d: length {length} pools to zero")
    left = x.data[:, :, 0 : 2 * out_len : 2]
    right = x.data[:, :, 1 : 2 * out_len : 2]
    take_left = left >= right
    out = np.where(take_left, left, right)

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, 0 : 2 * out_len : 2] = np.where(take_left, g, 0.0)
        gx[:, :, 1 : 2 * out_len : 2] = np.where(take_left, 0.0, g)
        return (gx,)

    return _result(out, (x,), backward)


def mse(a, b) -> Tensor:
    """Mean of squared differences (no 1/2 factor)."""
    a = _coerce(a)
    b = _coerce(b, like=a)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = sub(a, b)
    return mean(mul(diff, diff))


@dataclasses.dataclass
class BatchNormState:
    """Running statistics for one batchnorm layer (per-channel)."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm1d(x, gamma, beta, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalization of a (batch, channels, length) tensor.

    Training uses batch statistics (biased variance) and refreshes the
    running estimates; evaluation freezes to the stored running stats.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if x.ndim != 3:
        raise ShapeError(f"batchnorm1d: expected (B,C,L), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batchnorm1d: gamma/beta must be ({channels},), got {gamma.shape}/{beta.shape}")
    if training:
        mu = mean(x, axis=(0, 2), keepdims=True)
        var = mean(mul(sub(x, mu), sub(x, mu)), axis=(0, 2), keepdims=True)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mu.data.reshape(channels)
        state.running_var = (1 - m) * state.running_var + m * var.data.reshape(channels)
        inv_std = pow_const(add(var, Tensor(np.full_like(var.data, state.eps))), -0.5)
        normalized = mul(sub(x, mu), inv_std)
    else:
        rm = state.running_mean.reshape(1, channels, 1).astype(x.dtype)
        rv = state.running_var.reshape(1, channels, 1).astype(x.dtype)
        inv = 1.0 / np.sqrt(rv + state.eps)
        normalized = mul(sub(x, Tensor(rm)), Tensor(inv))
    g = reshape(gamma, (1, channels, 1))
    b = reshape(beta, (1, channels, 1))
    return add(mul(normalized, g), b)


# ---------------------------------------------------------------------------
# op-kind dispatcher

OP_KINDS = (
    "matmul",
    "conv1d",
    "relu",
    "softmax_rows",
    "maxpool1d",
    "batchnorm1d",
    "concat",
    "mean",
    "sum",
    "mse",
    "log",
    "exp",
    "scale",
)


def forward(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Validated entry point for the supported operation kinds.

    Rejects unknown kinds, non-finite tensor inputs, and incompatible
    shapes (the error names the op and the offending shapes).
    """
    if op_kind not in OP_KINDS:
        raise ValueError(f"unknown op kind {op_kind!r}; supported: {', '.join(OP_KINDS)}")
    flat_inputs = inputs[0] if op_kind == "concat" and len(inputs) == 1 else inputs
    for item in flat_inputs:
        if isinstance(item, Tensor) and not np.all(np.isfinite(item.data)):
            raise NonFiniteError(f"{op_kind}: non-finite values in input of shape {item.shape}")
    if op_kind == "matmul":
        return matmul(*inputs)
    if op_kind == "conv1d":
        return conv1d(*inputs)
    if op_kind == "relu":
        return relu(*inputs)
    if op_kind == "softmax_rows":
        return softmax_rows(*inputs)
    if op_kind == "maxpool1d":
        return maxpool1d(*inputs)
    if op_kind == "batchnorm1d":
        return batchnorm1d(*inputs, **kwargs)
    if op_kind == "concat":
        return concat(list(flat_inputs), **kwargs)
    if op_kind == "mean":
        return mean(*inputs, **kwargs)
    if op_kind == "sum":
        return sum_(*inputs, **kwargs)
    if op_kind == "mse":
        return mse(*inputs)
    if op_kind == "log":
        return log(*inputs)
    if op_kind == "exp":
        return exp(*inputs)
    return scale(*inputs)


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclasses.dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients against central differences."""

    max_rel_error: float
    worst_param: str | None
    worst_index: int
    tol: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"gradcheck {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}, worst {self.worst_param}[{self.worst_index}])"
        )


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values on every call. Relative error uses max(|analytic|, |numeric|,
    1e-8) as the denominator. Parameters must be float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not isinstance(params, Mapping):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"finite_difference_check requires float64 parameters, {name} is {p.dtype}")

    analytic = dict(zip(params.keys(), gradients(loss_fn(), list(params.values()))))
    worst = (0.0, None, -1)
    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.ravel()
        grad_flat = analytic[name].ravel()
        param_worst = 0.0
        for idx in range(flat.size):
            saved = flat[idx]
            flat[idx] = saved + eps
            f_plus = float(loss_fn().data)
            flat[idx] = saved - eps
            f_minus = float(loss_fn().data)
            flat[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(grad_flat[idx] - numeric) / max(abs(grad_flat[idx]), abs(numeric), 1e-8)
            if rel > param_worst:
                param_worst = rel
            if rel > worst[0]:
                worst = (rel, name, idx)
        per_param[name] = param_worst
    return GradCheckReport(worst[0], worst[1], worst[2], tol, per_param)
