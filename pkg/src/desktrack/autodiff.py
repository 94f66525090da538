"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding its parents and a closure that pushes the
output gradient back into them. ``Tensor.backward`` walks the graph in
reverse topological order. Broadcasting is limited to numpy's rules and is
undone in the backward pass by summing over the broadcast axes.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""


class GradError(RuntimeError):
    """A differentiation contract was violated (non-scalar loss, missing grad, ...)."""


class MaskError(ValueError):
    """An attention mask leaves a query row with no allowed key."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    # -- graph traversal --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` tensor."""
        if self.data.size != 1:
            raise GradError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _parents=tuple(parents) if requires else (), op=op)
    if requires:
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from exc


# -- arithmetic ---------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "add")

    def backward(g):
        return ((a, unbroadcast(g, a.shape)), (b, unbroadcast(g, b.shape)))

    return _node(a.data + b.data, (a, b), "add", backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "mul")

    def backward(g):
        return (
            (a, unbroadcast(g * b.data, a.shape) if a.requires_grad else None),
            (b, unbroadcast(g * a.data, b.shape) if b.requires_grad else None),
        )

    return _node(a.data * b.data, (a, b), "mul", backward)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "div")
    out = a.data / b.data

    def backward(g):
        return (
            (a, unbroadcast(g / b.data, a.shape) if a.requires_grad else None),
            (b, unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None),
        )

    return _node(out, (a, b), "div", backward)


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data**exponent
    return _node(out, (a,), "pow", lambda g: ((a, g * exponent * a.data ** (exponent - 1)),))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "minimum")
    pick_a = a.data <= b.data

    def backward(g):
        return ((a, unbroadcast(g * pick_a, a.shape)), (b, unbroadcast(g * ~pick_a, b.shape)))

    return _node(np.where(pick_a, a.data, b.data), (a, b), "minimum", backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.data, b.data, "maximum")
    pick_a = a.data >= b.data

    def backward(g):
        return ((a, unbroadcast(g * pick_a, a.shape)), (b, unbroadcast(g * ~pick_a, b.shape)))

    return _node(np.where(pick_a, a.data, b.data), (a, b), "maximum", backward)


def relu(a: Tensor) -> Tensor:
    return maximum(a, 0.0)


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _node(np.abs(a.data), (a,), "abs", lambda g: ((a, g * sign),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: ((a, g * out * (1.0 - out)),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)), computed without overflow."""
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _node(out, (a,), "softplus", lambda g: ((a, g * _sigmoid(x)),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return ((a, g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)),)

    return _node(out, (a,), "gelu", backward)


# -- shape ops ----------------------------------------------------------------
def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(src)),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), "transpose", lambda g: ((a, g.transpose(inv)),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return ((a, full),)

    return _node(a.data[index], (a,), "getitem", backward)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    src = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, src).copy()),)

    return _node(a.data.sum(axis=axis, keepdims=keepdims), (a,), "sum", backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {[x.shape for x in tensors]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            out.append((t, g[tuple(sl)]))
        return out

    return _node(np.concatenate([t.data for t in tensors], axis=ax), tensors, "concat", backward)


def concat_last_dim(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def expand_rows(a: Tensor, n: int) -> Tensor:
    """[..., D] -> [..., n, D] by repeating along a new row axis."""
    out = np.broadcast_to(a.data[..., None, :], a.shape[:-1] + (n, a.shape[-1])).copy()
    return _node(out, (a,), "expand_rows", lambda g: ((a, g.sum(axis=-2)),))


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Select whole slices along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return ((a, full),)

    return _node(np.take(a.data, idx, axis=axis), (a,), "take", backward)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Batched row gather: a [B, N, D], indices [B, K] -> [B, K, D]."""
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim != 3 or idx.ndim != 2 or idx.shape[0] != a.shape[0]:
        raise ShapeError(f"take_rows: expected [B,N,D] and [B,K], got {a.shape} and {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[1]):
        raise ShapeError("take_rows: index out of range")
    out = np.take_along_axis(a.data, idx[:, :, None], axis=1)

    def backward(g):
        full = np.zeros_like(a.data)
        for b in range(a.shape[0]):
            np.add.at(full[b], idx[b], g[b])
        return ((a, full),)

    return _node(out, (a,), "take_rows", backward)


def scatter_rows(values: Tensor, indices: np.ndarray, n_rows: int, fill: float = 0.0) -> Tensor:
    """Batched row scatter: values [B, K, D] placed at rows ``indices`` [B, K] of a
    [B, n_rows, D] output; other rows hold the constant ``fill`` (no gradient)."""
    idx = np.asarray(indices, dtype=np.int64)
    if values.ndim != 3 or idx.shape != values.shape[:2]:
        raise ShapeError(f"scatter_rows: values {values.shape} vs indices {idx.shape}")
    for b in range(idx.shape[0]):
        if len(np.unique(idx[b])) != idx.shape[1]:
            raise ShapeError("scatter_rows: duplicate target rows")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise ShapeError("scatter_rows: index out of range")
    out = np.full((values.shape[0], n_rows, values.shape[2]), fill, dtype=DTYPE)
    np.put_along_axis(out, idx[:, :, None], values.data, axis=1)

    def backward(g):
        return ((values, np.take_along_axis(g, idx[:, :, None], axis=1)),)

    return _node(out, (values,), "scatter_rows", backward)


def max_over_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Column-wise max over the row axis (-2). Gradient goes to the first argmax.

    ``mask`` ([..., R] bool) restricts which rows compete; every column must
    have at least one candidate row.
    """
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:-1]:
            raise ShapeError(f"max_over_rows: mask {mask.shape} vs rows {x.shape[:-1]}")
        if not mask.any(axis=-1).all():
            raise ShapeError("max_over_rows: empty row selection")
        x = np.where(mask[..., None], x, -np.inf)
    arg = np.argmax(x, axis=-2)  # first index on ties
    out = np.take_along_axis(a.data, arg[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, arg[..., None, :], g[..., None, :], axis=-2)
        return ((a, full),)

    return _node(out, (a,), "max_over_rows", backward)


# -- linear algebra -------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ((a, ga), (b, gb))

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def matmul_macs(a_shape: tuple[int, ...], b_shape: tuple[int, ...]) -> int:
    """Multiply-accumulate count of ``a @ b`` including broadcast batch axes."""
    batch = np.broadcast_shapes(a_shape[:-2], b_shape[:-2])
    return int(np.prod(batch, dtype=np.int64)) * a_shape[-2] * a_shape[-1] * b_shape[-1]


class MacCounter:
    """Counts the multiply-accumulates of every matmul routed through it."""

    def __init__(self):
        self.total = 0
        self.per_scope: dict[str, int] = {}
        self.scope = ""

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        macs = matmul_macs(_lift(a).shape, _lift(b).shape)
        self.total += macs
        self.per_scope[self.scope] = self.per_scope.get(self.scope, 0) + macs
        return matmul(a, b)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gain`` and shift by ``bias``."""
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs features {x.shape[-1]}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        return (
            (x, gx),
            (gain, (g * xhat).sum(axis=red) if gain.requires_grad else None),
            (bias, g.sum(axis=red) if bias.requires_grad else None),
        )

    return _node(out, (x, gain, bias), "layernorm", backward)


def masked_softmax(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    The mask broadcasts against ``logits``. Raises ``MaskError`` if any row
    has no allowed key instead of producing NaNs.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(mask.shape, logits.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}") from exc
    if mask.shape[-1] != logits.shape[-1]:
        raise ShapeError("masked_softmax: mask must span the key axis")
    if not mask.any(axis=-1).all():
        raise MaskError("masked_softmax: a query row has no allowed key")
    out = np.where(mask, logits.data, -np.inf)
    out -= out.max(axis=-1, keepdims=True)
    np.exp(out, out=out)  # exp(-inf) == 0 at masked cells
    out /= out.sum(axis=-1, keepdims=True)

    def backward(g):
        gl = g * out
        gl -= out * gl.sum(axis=-1, keepdims=True)
        return ((logits, gl),)

    return _node(out, (logits,), "masked_softmax", backward)


# -- optimisation -------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay over a fixed, named parameter set."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
        weight_decay: float = 1e-4,
    ):
        self.params = params
        self.learning_rate = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise GradError(f"optimizer step with missing grads: {missing[:5]}")
        self.step_count += 1
        b1, b2, lr = self.beta1, self.beta2, self.learning_rate
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.epsilon)
            p.data = p.data - lr * (update + self.weight_decay * p.data)


def parameters_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}


# -- gradient checking ----------------------------------------------------------
def finite_difference(fn: Callable[[], float], param: Tensor, index: tuple, step: float = 1e-5) -> float:
    """Central difference of ``fn`` with respect to one coordinate of ``param``."""
    orig = param.data[index]
    param.data[index] = orig + step
    up = fn()
    param.data[index] = orig - step
    down = fn()
    param.data[index] = orig
    return (up - down) / (2 * step)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


# -- checkpoints --------------------------------------------------------------
CHECKPOINT_MAGIC = b"CPDA"
CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write parameters in a flat little-endian binary layout.

    Layout: ``b"CPDA"``, u32 version, then for each parameter in sorted name
    order: u32 name length, UTF-8 name, u32 rank, rank x u32 dims, float64 data.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name in sorted(params):
        arr = params[name]
        arr = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8")  # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            pos = _read_entry(buf, pos, out)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    return out


def _read_entry(buf: bytes, pos: int, out: dict[str, np.ndarray]) -> int:
    (nlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    name = buf[pos : pos + nlen].decode("utf-8")
    pos += nlen
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if pos + 8 * count > len(buf):
        raise struct.error("data runs past end of file")
    out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(DTYPE)
    return pos + 8 * count


def iter_leaves(params: dict[str, Tensor]) -> Iterable[tuple[str, Tensor]]:
    return sorted(params.items())
