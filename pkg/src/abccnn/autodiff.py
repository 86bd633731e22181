"""Dense float64 tensors with a tape-based reverse-mode gradient.

Every op appends a record to the tape in execution order; ``backward`` walks the
records reachable from the loss in reverse creation order, so each record is
visited exactly once. Gradients are only stored on leaf tensors that were
created with ``requires_grad=True`` and they accumulate until ``zero_grad``.

Ops accept an optional leading batch axis wherever that is cheap to support.
"""

from __future__ import annotations

import itertools
import struct
from typing import BinaryIO, Callable, Sequence

import numpy as np

DTYPE = np.float64

_counter = itertools.count()


class DimensionError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NumericalError(FloatingPointError):
    pass


class _Record:
    __slots__ = ("seq", "inputs", "backward")

    def __init__(self, inputs: Sequence["Tensor"], backward: Callable):
        self.seq = next(_counter)
        self.inputs = tuple(inputs)
        self.backward = backward


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._record is not None

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self):
        return sum_all(self)

    def backward(self) -> None:
        backward(self)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    return Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError("non-finite value produced by op")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._record = None
    if any(t.tracked for t in inputs):
        out._record = _Record(inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.tracked:
        return
    # collect reachable records; sequence numbers give the execution order
    nodes: dict[int, Tensor] = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._record is not None:
            nodes[t._record.seq] = t
            stack.extend(i for i in t._record.inputs if i.tracked)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss._record is None:
        loss.grad += grads[id(loss)]
        return
    for seq in sorted(nodes, reverse=True):
        t = nodes[seq]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t._record.backward(g)
        for inp, ig in zip(t._record.inputs, in_grads):
            if ig is None or not inp.tracked:
                continue
            if inp._record is None:
                inp.grad += ig
            elif id(inp) in grads:
                grads[id(inp)] = grads[id(inp)] + ig
            else:
                grads[id(inp)] = ig


# ---------------------------------------------------------------- elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def log(a: Tensor, floor: float = 0.0) -> Tensor:
    x = np.maximum(a.data, floor) if floor > 0 else a.data
    if np.any(x <= 0):
        raise NumericalError("log of non-positive value")
    mask = a.data >= floor
    return _make(np.log(x), (a,), lambda g: (np.where(mask, g / x, 0.0),))


SCALED_TANH_A = 1.7159
SCALED_TANH_B = 2.0 / 3.0
_SCALED_TANH_CAP = np.nextafter(SCALED_TANH_A, 0.0)


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "sigmoid":
        y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
        return _make(y, (x,), lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(x.data)
        return _make(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "scaled_tanh":
        t = np.tanh(SCALED_TANH_B * x.data)
        # keep the open bound even where tanh rounds to +-1
        y = np.clip(SCALED_TANH_A * t, -_SCALED_TANH_CAP, _SCALED_TANH_CAP)
        return _make(
            y,
            (x,),
            lambda g: (g * SCALED_TANH_A * SCALED_TANH_B * (1.0 - t * t),),
        )
    raise ConfigError(f"unknown activation kind {kind!r}")


def sigmoid(x: Tensor) -> Tensor:
    return activation("sigmoid", x)


def tanh(x: Tensor) -> Tensor:
    return activation("tanh", x)


def scaled_tanh(x: Tensor) -> Tensor:
    return activation("scaled_tanh", x)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a: Tensor) -> Tensor:
    return _make(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Row gather ``table[index]``; gradient scatters back with repeats summed."""
    index = np.asarray(index, dtype=np.intp)
    if table.ndim != 2:
        raise DimensionError("take_rows expects a 2-d table")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise DimensionError("row index out of range")

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[index], (table,), bw)


def pick(x: Tensor, index) -> Tensor:
    """``x[..., index]`` per row: (A,) with an int, or (B, A) with B indices."""
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(x.shape[0]) if x.ndim == 2 else None

    def bw(g):
        out = np.zeros_like(x.data)
        if rows is None:
            out[index] = g
        else:
            np.add.at(out, (rows, index), g)
        return (out,)

    data = x.data[index] if rows is None else x.data[rows, index]
    return _make(np.asarray(data, dtype=DTYPE), (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for x of shape (..., i) and w of shape (o, i)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"cannot apply weight {w.shape} to input {x.shape}")

    def bw(g):
        gx = g @ w.data
        gw = g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1])
        return gx, gw

    return _make(x.data @ w.data.T, (x, w), bw)


def affine(W: Tensor, x: Tensor, b: Tensor) -> Tensor:
    """``W x + b`` applied along the last axis of ``x``."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: W{W.shape}, x{x.shape}, b{b.shape} do not conform")

    def bw(g):
        gx = g @ W.data
        gW = g.reshape(-1, W.shape[0]).T @ x.data.reshape(-1, W.shape[1])
        gb = g.reshape(-1, W.shape[0]).sum(axis=0)
        return gW, gx, gb

    return _make(x.data @ W.data.T + b.data, (W, x, b), bw)


def conv2d_same(inp: Tensor, kernel: Tensor) -> Tensor:
    """Zero-padded cross-correlation keeping the spatial size.

    ``inp`` is (C,H,W) or (B,C,H,W). ``kernel`` is (K,C,kh,kw), shared by the
    batch, or (B,K,C,kh,kw) with one kernel bank per batch entry.
    """
    batched = inp.ndim == 4
    if inp.ndim not in (3, 4):
        raise DimensionError(f"conv2d_same input must be 3-d or 4-d, got {inp.shape}")
    x = inp.data if batched else inp.data[None]
    per_item = kernel.ndim == 5
    if kernel.ndim not in (4, 5) or (per_item and not batched):
        raise DimensionError(f"bad kernel shape {kernel.shape}")
    k = kernel.data if per_item else kernel.data[None]
    B, C, H, W = x.shape
    K, Ck, kh, kw = k.shape[1:]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
    if Ck != C:
        raise DimensionError(f"kernel has {Ck} channels, input has {C}")
    if per_item and k.shape[0] != B:
        raise DimensionError("per-item kernel batch does not match input batch")
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    # patches: (B, C, H, W, kh, kw)
    patches = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    if per_item:
        out = np.einsum("bchwyx,bkcyx->bkhw", patches, k, optimize=True)
    else:
        out = np.einsum("bchwyx,kcyx->bkhw", patches, k[0], optimize=True)

    def bw(g):
        if per_item:
            gk = np.einsum("bchwyx,bkhw->bkcyx", patches, g if batched else g[None], optimize=True)
        else:
            gk = np.einsum("bchwyx,bkhw->kcyx", patches, g if batched else g[None], optimize=True)
        gb = g if batched else g[None]
        gpad = np.zeros_like(padded)
        for dy in range(kh):
            for dx in range(kw):
                if per_item:
                    contrib = np.einsum("bkhw,bkc->bchw", gb, k[:, :, :, dy, dx])
                else:
                    contrib = np.einsum("bkhw,kc->bchw", gb, k[0, :, :, dy, dx])
                gpad[:, :, dy : dy + H, dx : dx + W] += contrib
        gx = gpad[:, :, ph : ph + H, pw : pw + W]
        return (gx if batched else gx[0]), gk

    return _make(out if batched else out[0], (inp, kernel), bw)


def softmax_spatial(z: Tensor) -> Tensor:
    """Softmax over the last two axes jointly (one distribution per map)."""
    if z.ndim < 2:
        raise DimensionError("softmax_spatial needs at least two axes")
    e = np.exp(z.data - z.data.max(axis=(-2, -1), keepdims=True))
    m = e / e.sum(axis=(-2, -1), keepdims=True)

    def bw(g):
        return (m * (g - (g * m).sum(axis=(-2, -1), keepdims=True)),)

    return _make(m, (z,), bw)


def softmax(z: Tensor) -> Tensor:
    """Softmax over the last axis."""
    e = np.exp(z.data - z.data.max(axis=-1, keepdims=True))
    p = e / e.sum(axis=-1, keepdims=True)
    return _make(p, (z,), lambda g: (p * (g - (g * p).sum(axis=-1, keepdims=True)),))


def channel_scale(I: Tensor, m: Tensor) -> Tensor:
    """Multiply every channel of ``I`` (…,C,H,W) by the map ``m`` (…,H,W)."""
    if I.ndim < 3 or m.ndim != I.ndim - 1 or I.shape[-2:] != m.shape[-2:] or I.shape[:-3] != m.shape[:-2]:
        raise DimensionError(f"channel_scale: map {m.shape} does not match features {I.shape}")
    mm = m.data[..., None, :, :]
    return _make(I.data * mm, (I, m), lambda g: (g * mm, (g * I.data).sum(axis=-3)))


def where_mask(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where mask is true, else ``b`` (mask is a constant)."""
    mask = np.asarray(mask, dtype=bool)
    return _make(
        np.where(mask, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[], Tensor], x: Tensor, h: float = 1e-4, floor: float = 1e-8) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` is re-evaluated with ``x.data`` perturbed in place, so it must close
    over ``x`` rather than copy it. Entries smaller than ``floor`` in both
    gradients are compared absolutely.
    """
    if not x.requires_grad:
        raise ContractError("grad_check target must require grad")
    out = f()
    if out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    saved = x.grad.copy()
    x.grad = np.zeros_like(x.data)
    out.backward()
    analytic = x.grad.copy()
    x.grad = saved
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().data.item()
        flat[i] = orig - h
        fm = f().data.item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


# ---------------------------------------------------------------- serialization


def write_tensor(fh: BinaryIO, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise EOFError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank))
    n = int(np.prod(shape)) if rank else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise EOFError("truncated tensor payload")
    return np.frombuffer(buf, dtype="<f8").astype(DTYPE).reshape(shape)
