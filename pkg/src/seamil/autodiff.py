"""Dense float64 tensors with a single-use reverse-mode tape.

Layers are written as plain functions over :class:`Tensor`.  When a
:class:`Tape` is active (``with Tape() as tape:``) every op whose inputs
require gradients is recorded together with its backward rule, and
``tape.backward(loss)`` walks the record in reverse.

Spatial tensors are channels-last: ``H x W x C`` or batched ``N x H x W x C``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "Tensor",
    "Tape",
    "Parameter",
    "backward",
    "add",
    "sub",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "tsum",
    "mean",
    "relu",
    "sigmoid",
    "tanh",
    "softmax",
    "activation",
    "dense",
    "conv2d",
    "max_pool2d",
    "global_pool",
    "bce_loss",
    "sgd_step",
    "BCE_EPS",
]

BCE_EPS = 1e-7


class ContractError(RuntimeError):
    """A caller broke an operation's documented precondition."""


class DimensionError(ValueError):
    """Tensor shapes do not fit together."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


@dataclass
class _Record:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops for one forward pass."""

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise ContractError("tape already consumed by backward()")
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple[Tensor, ...], rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        if tape.consumed:
            raise ContractError("cannot record onto a consumed tape")
        tape.records.append(_Record(out, inputs, rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls (cleared by :func:`sgd_step`);
    the tape itself can be used once.
    """
    if tape.consumed:
        raise ContractError("backward() called twice on the same tape")
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    tape.consumed = True
    produced = {id(r.output) for r in tape.records}
    if id(loss) not in produced and not loss.requires_grad:
        raise ContractError("loss is not on the tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # what is left belongs to leaves
    leaves = {}
    for rec in tape.records:
        for inp in rec.inputs:
            leaves[id(inp)] = inp
    leaves[id(loss)] = loss
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
    tape.records = []


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _result(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def tsum(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    return _result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),)
    )


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid_np(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, log-sum-exp stabilised."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _result(s, (a,), rule)


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "softmax": softmax}


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(a)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weights + bias`` for row-vector batches ``x`` of shape ``B x n``."""
    if x.data.ndim != 2 or weights.data.ndim != 2:
        raise DimensionError(f"dense expects 2-D input/weights, got {x.shape}, {weights.shape}")
    if x.shape[1] != weights.shape[0]:
        raise DimensionError(
            f"dense: input width {x.shape[1]} != weight rows {weights.shape[0]}"
        )
    out = matmul(x, weights)
    if bias is None:
        return out
    if bias.size != weights.shape[1]:
        raise DimensionError(f"dense: bias size {bias.size} != {weights.shape[1]} outputs")
    return add(out, reshape(bias, (1, weights.shape[1])))


# ---------------------------------------------------------------------------
# spatial ops


def _batched(x: np.ndarray, what: str) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"{what}: expected H x W x C or N x H x W x C, got {x.shape}")


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation with a ``k x k x Cin x Cout`` kernel.

    The padded input is flattened row-major so that every kernel tap
    ``(a, b)`` reads one contiguous slice at offset ``a * Wp + b``; each tap
    is then a single BLAS matmul.  Output columns past ``Wo`` wrap around
    the row and are discarded.  Strides > 1 subsample the stride-1 result.
    """
    xb, squeeze = _batched(x.data, "conv2d")
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d kernel must be k x k x Cin x Cout, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if xb.shape[3] != cin:
        raise DimensionError(
            f"conv2d channel axis mismatch: input has {xb.shape[3]}, kernel expects {cin}"
        )
    if stride < 1 or k < 1:
        raise ContractError("conv2d needs k >= 1 and stride >= 1")
    if padding == "same":
        lo, hi = (k - 1) // 2, k // 2
    elif padding == "valid":
        lo = hi = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    n, h, w, _ = xb.shape
    hp, wp = h + lo + hi, w + lo + hi
    h1, w1 = hp - k + 1, wp - k + 1  # stride-1 output extent
    if h1 < 1 or w1 < 1:
        raise DimensionError(f"conv2d: kernel {k} larger than padded input {h}x{w}")
    extra = 1 if k > 1 else 0
    xp = np.pad(xb, ((0, 0), (lo, hi + extra), (lo, hi), (0, 0))) if (lo or hi or extra) else xb
    xf = xp.reshape(n, -1, cin)
    span = h1 * wp
    kd = kernel.data
    offsets = [(a, b, a * wp + b) for a in range(k) for b in range(k)]

    full = None
    for a, b, off in offsets:
        term = xf[:, off : off + span] @ kd[a, b]
        full = term if full is None else full + term
    full = full.reshape(n, h1, wp, cout)
    out = full[:, ::stride, :w1:stride]
    ho, wo = out.shape[1], out.shape[2]
    out = np.ascontiguousarray(out)

    def rule(g):
        gb = g[None] if squeeze else g
        gfull = np.zeros((n, h1, wp, cout))
        gfull[:, : stride * ho : stride, : stride * wo : stride][:, :, :wo] = gb
        gf = gfull.reshape(n, span, cout)
        gk = np.empty_like(kd)
        for a, b, off in offsets:
            tap = xf[:, off : off + span]
            gk[a, b] = sum(tap[i].T @ gf[i] for i in range(n))
        gx = None
        if x.requires_grad:
            gxf = np.zeros_like(xf)
            for a, b, off in offsets:
                gxf[:, off : off + span] += gf @ kd[a, b].T
            gx = gxf.reshape(xp.shape)[:, lo : lo + h, lo : lo + w]
            if squeeze:
                gx = gx[0]
        return gx, gk

    return _result(out[0] if squeeze else out, (x, kernel), rule)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size x size`` max pooling; ties go to the first element."""
    xb, squeeze = _batched(x.data, "max_pool2d")
    n, h, w, c = xb.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by {size}")
    win = (
        xb.reshape(n, h // size, size, w // size, size, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // size, w // size, c, size * size)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        gb = g[None] if squeeze else g
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], gb[..., None], axis=-1)
        gx = (
            gw.reshape(n, h // size, w // size, c, size, size)
            .transpose(0, 1, 4, 2, 5, 3)
            .reshape(n, h, w, c)
        )
        return ((gx[0] if squeeze else gx),)

    return _result(out[0] if squeeze else out, (x,), rule)


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Per-channel spatial mean or max: ``H x W x C -> 1 x 1 x C``.

    Batched input ``N x H x W x C`` gives ``N x 1 x 1 x C``.  The max
    gradient is routed to the first maximal element in row-major order.
    """
    xb, squeeze = _batched(x.data, "global_pool")
    n, h, w, c = xb.shape
    if h < 1 or w < 1:
        raise DimensionError("global_pool on empty spatial extent")
    flat = xb.reshape(n, h * w, c)
    if mode == "avg":
        out = flat.mean(axis=1)

        def rule(g):
            gb = (g[None] if squeeze else g).reshape(n, 1, c)
            gx = np.broadcast_to(gb / (h * w), (n, h * w, c)).reshape(n, h, w, c)
            return ((gx[0] if squeeze else gx).copy(),)

    elif mode == "max":
        idx = flat.argmax(axis=1)
        out = np.take_along_axis(flat, idx[:, None, :], axis=1)[:, 0]

        def rule(g):
            gb = (g[None] if squeeze else g).reshape(n, 1, c)
            gx = np.zeros_like(flat)
            np.put_along_axis(gx, idx[:, None, :], gb, axis=1)
            gx = gx.reshape(n, h, w, c)
            return ((gx[0] if squeeze else gx),)

    else:
        raise ValueError(f"global_pool mode must be 'avg' or 'max', got {mode!r}")
    out = out.reshape(n, 1, 1, c)
    return _result(out[0] if squeeze else out, (x,), rule)


def bce_loss(prediction: Tensor, label) -> Tensor:
    """Mean binary cross-entropy; predictions are clamped to ``[eps, 1-eps]``."""
    y = np.asarray(label, dtype=np.float64)
    p_raw = prediction.data
    p = np.clip(p_raw, BCE_EPS, 1.0 - BCE_EPS)
    inside = (p_raw >= BCE_EPS) & (p_raw <= 1.0 - BCE_EPS)
    y = np.broadcast_to(y, p.shape)
    n = p.size
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n

    def rule(g):
        dp = (-(y / p) + (1.0 - y) / (1.0 - p)) * inside / n
        return (float(g) * dp,)

    return _result(np.asarray(loss), (prediction,), rule)


# ---------------------------------------------------------------------------
# parameters and optimisation


class Parameter:
    """Named trainable tensor; frozen parameters keep receiving gradients but never move."""

    __slots__ = ("name", "tensor", "frozen", "velocity")

    def __init__(self, name: str, value, frozen: bool = False):
        self.name = name
        self.tensor = Tensor(value, requires_grad=True, name=name)
        self.frozen = frozen
        self.velocity: np.ndarray | None = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, frozen={self.frozen})"


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0) -> None:
    """In-place ``p <- p - lr * grad`` on every non-frozen parameter, then clear grads."""
    params = list(params)
    missing = [p.name for p in params if not p.frozen and p.tensor.grad is None]
    if missing:
        raise ContractError(f"no gradient for trainable parameter(s): {', '.join(missing)}")
    for p in params:
        g = p.tensor.grad
        if not p.frozen:
            if momentum:
                v = g if p.velocity is None else momentum * p.velocity + g
                p.velocity = v
                step = v
            else:
                step = g
            if lr:
                p.tensor.data = p.tensor.data - lr * step
        p.tensor.grad = None
