"""Dense float32 tensors with reverse-mode automatic differentiation.

Only the handful of operations the gaze networks need are provided:
convolution, max pooling, affine layers, ReLU, concatenation, flattening
and the elementwise arithmetic used by the losses.  Every operation
records a closure that maps the output gradient to input gradients;
:func:`backward` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError

DTYPE = np.float32

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block (inference mode)."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """N-dimensional float32 array with an optional gradient buffer."""

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def dims(self) -> tuple[int, ...]:
        return self.data.shape

    shape = dims

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tensor_sum(self)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.dims != b.dims:
        raise DimensionError(f"{op}: operand dims {a.dims} and {b.dims} differ")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data + DTYPE(b), (a,), lambda g: (g,))
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return _result(a.data - DTYPE(b), (a,), lambda g: (g,))
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = DTYPE(b)
        return _result(a.data * s, (a,), lambda g: (g * s,))
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def tensor_sum(a: Tensor) -> Tensor:
    shape = a.dims
    return _result(
        np.asarray(a.data.sum(dtype=DTYPE), dtype=DTYPE),
        (a,),
        lambda g: (np.full(shape, g, dtype=DTYPE),),
    )


# ---------------------------------------------------------------------------
# network layers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    kernel_h: int
    kernel_w: int
    in_channels: int
    out_channels: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if min(self.kernel_h, self.kernel_w, self.stride) < 1:
            raise ContractError(f"kernel and stride must be >= 1: {self}")
        if self.pad < 0:
            raise ContractError(f"pad must be >= 0: {self}")
        if min(self.in_channels, self.out_channels) < 1:
            raise ContractError(f"channel counts must be >= 1: {self}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (
            (h + 2 * self.pad - self.kernel_h) // self.stride + 1,
            (w + 2 * self.pad - self.kernel_w) // self.stride + 1,
        )


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    # (N, Ho, Wo, C, kh, kw) so the column layout matches weight.reshape(K, -1)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, spec: ConvSpec) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [K,C,kh,kw]."""
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects a 4-d input, got dims {x.dims}", axis="rank")
    n, c, h, w = x.dims
    k, kh, kw, s, p = spec.out_channels, spec.kernel_h, spec.kernel_w, spec.stride, spec.pad
    if c != spec.in_channels:
        raise DimensionError(
            f"conv2d input has {c} channels, spec expects {spec.in_channels}", axis="channels"
        )
    if weight.dims != (k, c, kh, kw):
        raise DimensionError(
            f"conv2d weight dims {weight.dims} != {(k, c, kh, kw)}", axis="weight"
        )
    if bias is not None and bias.dims != (k,):
        raise DimensionError(f"conv2d bias dims {bias.dims} != {(k,)}", axis="bias")
    if h + 2 * p < kh:
        raise DimensionError(f"conv2d kernel height {kh} exceeds padded height {h + 2 * p}", axis="height")
    if w + 2 * p < kw:
        raise DimensionError(f"conv2d kernel width {kw} exceeds padded width {w + 2 * p}", axis="width")

    ho, wo = spec.output_hw(h, w)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    if kh == kw == 1 and s == 1:
        cols = np.ascontiguousarray(xp.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
    else:
        cols = _im2col(xp, kh, kw, s, ho, wo)
    wmat = weight.data.reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, k)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = (g2.T @ cols).reshape(weight.dims)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros(xp.shape, dtype=DTYPE)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
            gx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def pool_output_size(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Max over ``window``x``window`` cells; ties resolve to the first row-major index."""
    if x.ndim != 4:
        raise DimensionError(f"maxpool2d expects a 4-d input, got dims {x.dims}", axis="rank")
    if window < 1 or stride < 1:
        raise ContractError("pool window and stride must be >= 1")
    n, c, h, w = x.dims
    if window > h:
        raise DimensionError(f"pool window {window} larger than height {h}", axis="height")
    if window > w:
        raise DimensionError(f"pool window {window} larger than width {w}", axis="width")
    ho, wo = pool_output_size(h, window, stride), pool_output_size(w, window, stride)
    win = sliding_window_view(x.data, (window, window), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    win = win.reshape(n, c, ho, wo, window * window)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        di, dj = np.divmod(arg, window)
        rows = np.arange(ho)[:, None] * stride + di
        cols = np.arange(wo)[None, :] * stride + dj
        base = (np.arange(n * c) * (h * w)).reshape(n, c, 1, 1)
        flat = (base + rows * w + cols).ravel()
        gx = np.zeros(n * c * h * w, dtype=DTYPE)
        np.add.at(gx, flat, g.ravel())
        return (gx.reshape(n, c, h, w),)

    return _result(np.ascontiguousarray(out), (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` [N,D], ``weight`` [M,D]."""
    if x.ndim != 2:
        raise DimensionError(f"fully_connected expects [N,D] input, got {x.dims}", axis="rank")
    if weight.ndim != 2 or weight.dims[1] != x.dims[1]:
        raise DimensionError(
            f"fully_connected inner dims disagree: input {x.dims}, weight {weight.dims}", axis="inner"
        )
    if bias is not None and bias.dims != (weight.dims[0],):
        raise DimensionError(f"fully_connected bias dims {bias.dims} != {(weight.dims[0],)}", axis="bias")
    out = x.data @ weight.data.T
    if bias is not None:
        out += bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if bias.requires_grad else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, DTYPE(0)), (x,), lambda g: (g * mask,))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ContractError("concat needs at least one tensor")
    if len(parts) == 1:
        return parts[0]
    ref = parts[0]
    ax = axis % ref.ndim
    for t in parts[1:]:
        if t.ndim != ref.ndim:
            raise DimensionError(f"concat rank mismatch: {ref.dims} vs {t.dims}", axis="rank")
        for d in range(ref.ndim):
            if d != ax and t.dims[d] != ref.dims[d]:
                raise DimensionError(
                    f"concat along axis {ax}: dims {ref.dims} and {t.dims} differ on axis {d}", axis=d
                )
    bounds = np.cumsum([t.dims[ax] for t in parts])[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, bounds, axis=ax))

    return _result(np.concatenate([t.data for t in parts], axis=ax), parts, backward)


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of every axis after the batch axis."""
    shape = x.dims
    n = shape[0]
    return _result(x.data.reshape(n, -1), (x,), lambda g: (g.reshape(shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.dims[1] != b.dims[0]:
        raise DimensionError(f"matmul dims {a.dims} @ {b.dims} do not chain", axis="inner")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every leaf requiring grad."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got dims {loss.dims}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    pending: dict[int, np.ndarray] = {id(loss): np.ones(loss.dims, dtype=DTYPE)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.requires_grad:
                g = np.asarray(g, dtype=DTYPE)
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pg if key not in pending else pending[key] + pg


# ---------------------------------------------------------------------------
# parameters and optimisation
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    """Named trainable tensors, their momentum buffers and the owning architecture."""

    tensors: dict[str, Tensor]
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    config: Any = None

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameter_count(self) -> int:
        return int(sum(t.data.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
            {k: v.copy() for k, v in self.velocity.items()},
            self.config,
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        for name in sorted(self.velocity):
            h.update(b"v:" + name.encode())
            h.update(self.velocity[name].tobytes())
        return h.hexdigest()


def sgd_step(params: ModelParams, lr: float, momentum: float, weight_decay: float) -> None:
    """One momentum-SGD update; velocity buffers live in ``params.velocity``.

    v <- momentum * v + (grad + weight_decay * param);  param <- param - lr * v
    """
    for name, t in params.tensors.items():
        if t.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    lr, momentum, weight_decay = DTYPE(lr), DTYPE(momentum), DTYPE(weight_decay)
    for name, t in params.tensors.items():
        v = params.velocity.get(name)
        step = t.grad + weight_decay * t.data
        v = step if v is None else momentum * v + step
        params.velocity[name] = v
        t.data = t.data - lr * v
