"""Dense float64 tensors with a record-on-execute reverse-mode tape.

Every differentiable op builds a node that remembers its inputs and a
closure mapping the output gradient to input gradients. ``backward`` orders
the reachable nodes into a :class:`Tape` and replays it in reverse.
"""

from __future__ import annotations

import struct
from typing import Callable, Iterable, Sequence

import numpy as np

MAGIC = b"MMT1"


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, op={self.op}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def backward(self):
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# broadcasting policy: equal shapes, a scalar, or one shape a trailing suffix
# of the other (leading-axes broadcast only)


def _check_broadcast(a: tuple, b: tuple, op: str):
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: cannot broadcast shapes {list(a)} and {list(b)}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp")


def relu(a: Tensor) -> Tensor:
    m = a.data > 0
    return _make(a.data * m, (a,), lambda g: (g * m,), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU (smooth everywhere, so gradchecks stay clean)."""
    x = a.data
    x2 = x * x
    u = _GELU_C * x * (1.0 + 0.044715 * x2)
    th = np.tanh(u)
    y = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(y, (a,), bw, "gelu")


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes of ``a`` and ``b`` must match exactly, or ``b`` may be a
    plain matrix shared across all of ``a``'s leading axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {list(a.shape)} and {list(b.shape)}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: leading axes differ for shapes {list(a.shape)} and {list(b.shape)}")
    if b.ndim > a.ndim:
        raise ShapeError(f"matmul: cannot broadcast shapes {list(a.shape)} and {list(b.shape)}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def tsum(a: Tensor, axis=None) -> Tensor:
    y = a.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y, dtype=np.float64), (a,), bw, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / float(n))


def getitem(a: Tensor, index) -> Tensor:
    y = a.data[index]

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(y, dtype=np.float64), (a,), bw, "getitem")


def take(table: Tensor, idx) -> Tensor:
    """Row gather: ``table[idx]`` with scatter-add backward (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"take: index out of range for table with {table.shape[0]} rows")
    y = table.data[idx]

    def bw(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (out,)

    return _make(y, (table,), bw, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _make(np.stack([t.data for t in tensors], axis=axis), tensors, bw, "stack")


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def bw(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make(y, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {list(gain.shape)} / bias {list(bias.shape)} must match last axis {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    y = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(y, (x, gain, bias), bw, "layer_norm")


def cross_entropy(logits: Tensor, targets, mask=None, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[..., V]``; ``targets`` holds an integer id per leading
    position. Positions where ``mask`` is false are ignored. With
    ``weights`` the result is the weighted sum instead of the plain mean
    (used for per-sequence averaging in a batch). No unmasked position
    gives a loss of exactly 0 with zero gradient.
    """
    V = logits.shape[-1]
    targets = np.asarray(targets, dtype=np.int64)
    lead = logits.shape[:-1]
    if targets.shape != lead:
        raise ShapeError(f"cross_entropy: targets {list(targets.shape)} vs logits {list(logits.shape)}")
    mask = np.ones(lead, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(targets[mask] >= V) or np.any(targets[mask] < 0):
        raise ValueError(f"cross_entropy: target id outside vocabulary of size {V}")
    n = int(mask.sum())
    if weights is None:
        w = mask / n if n else np.zeros(lead)
    else:
        w = np.where(mask, np.asarray(weights, dtype=np.float64), 0.0)

    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(w * picked).sum()

    def bw(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * w[..., None] * (p - onehot),)

    return _make(np.asarray(loss, dtype=np.float64), (logits,), bw, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes differ, {list(pred.shape)} vs {list(target.shape)}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        return g * 2.0 * diff / n, -g * 2.0 * diff / n

    return _make(np.asarray((diff * diff).mean()), (pred, target), bw, "mse")


# ---------------------------------------------------------------------------
# reverse mode


class Tape:
    """Topologically ordered list of the op nodes reachable from a root.

    ``run`` accumulates into leaf ``.grad`` buffers, so running twice
    without zeroing doubles every gradient.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

    def __len__(self):
        return len(self.nodes)

    def run(self, seed: np.ndarray | None = None):
        grads: dict[int, np.ndarray] = {id(self.root): np.ones_like(self.root.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, gp in zip(node._parents, node._backward(g)):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = gp if prev is None else prev + gp


def backward(loss: Tensor) -> Tape | None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ValueError(f"backward: root must be a scalar, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return None
    tape = Tape(loss)
    tape.run()
    return tape


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zero_grads(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (``x.data`` is restored)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = float(f(x).data)
        flat[i] = old - h
        fm = float(f(x).data)
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference scaled by the larger of the two max-norms."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Relative error between autodiff and central differences, per parameter."""
    zero_grads(params)
    backward(f())
    errs = []
    for p in params:
        auto = p.grad if p.grad is not None else np.zeros_like(p.data)
        num = finite_diff_grad(lambda _x: f(), p, h)
        errs.append(relative_error(auto, num))
    zero_grads(params)
    return errs


# ---------------------------------------------------------------------------
# MMT1 serialisation


def dumps(t) -> bytes:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f8", order="C")
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not an MMT1 tensor: bad magic bytes")
    (rank,) = struct.unpack_from("<I", buf, 4)
    shape = struct.unpack_from(f"<{rank}I", buf, 8)
    off = 8 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    if len(buf) - off != 8 * n:
        raise ValueError(f"MMT1 payload holds {len(buf) - off} bytes, expected {8 * n}")
    return np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)


def save(path, t):
    with open(path, "wb") as fh:
        fh.write(dumps(t))


def load(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads(fh.read())
