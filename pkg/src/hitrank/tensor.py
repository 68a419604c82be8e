"""
Dense float64 tensors with reverse-mode gradient accumulation.

Only the operations the rating networks need are provided: dense layers,
valid 2-D cross-correlation, max pooling, ReLU, elementwise arithmetic,
row gathering and reductions. Every op records a closure that maps the
output gradient to input gradients; :func:`backward` walks the recorded
graph in reverse topological order.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from typing import BinaryIO, Callable, Iterable, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_nonscalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return gather(self, idx)


def _raise_nonscalar(t: Tensor):
    raise ShapeError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    s = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


# ------------------------------------------------------------- shape / index


def reshape(a: ArrayLike, shape: Tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def gather(a: ArrayLike, idx) -> Tensor:
    """Row selection ``a[idx]`` along the leading axis (repeats allowed)."""
    a = as_tensor(a)
    idx = np.asarray(idx) if not isinstance(idx, (int, np.integer, slice)) else idx

    def back(g):
        out = np.zeros_like(a.data)
        if isinstance(idx, np.ndarray) and idx.dtype != bool:
            np.add.at(out, idx, g)
        else:
            out[idx] += g
        return (out,)

    return _make(a.data[idx], (a,), back)


def concat(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Join two tensors end to end as one flat vector."""
    a, b = as_tensor(a), as_tensor(b)
    n = a.data.size
    out = np.concatenate([a.data.reshape(-1), b.data.reshape(-1)])
    return _make(out, (a, b), lambda g: (g[:n].reshape(a.shape), g[n:].reshape(b.shape)))


def total(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    return _make(np.asarray(a.data.sum() / n), (a,),
                 lambda g: (np.full(a.shape, float(g) / n),))


# ------------------------------------------------------------------- layers


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul needs (n,k)@(k,m), got {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def dense_forward(x: ArrayLike, weights: ArrayLike, bias: ArrayLike) -> Tensor:
    """``x @ weights + bias`` for ``x[batch, in]``, ``weights[in, out]``, ``bias[out]``."""
    x, weights, bias = as_tensor(x), as_tensor(weights), as_tensor(bias)
    if x.ndim != 2 or weights.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense expects 2-D input/weights and 1-D bias, got "
                         f"{x.shape}, {weights.shape}, {bias.shape}")
    if x.shape[1] != weights.shape[0] or weights.shape[1] != bias.shape[0]:
        raise ShapeError(f"dense extents disagree: {x.shape} @ {weights.shape} + {bias.shape}")
    out = x.data @ weights.data + bias.data

    def back(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(out, (x, weights, bias), back)


def _pair(v) -> Tuple[int, int]:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


def conv2d_forward(x: ArrayLike, kernels: ArrayLike, bias: ArrayLike, stride=1) -> Tensor:
    """Valid (unpadded) 2-D cross-correlation; kernels are applied without flipping.

    ``x[batch, c_in, H, W]`` and ``kernels[c_out, c_in, kH, kW]`` give
    ``out[batch, c_out, (H-kH)//sH + 1, (W-kW)//sW + 1]``.
    """
    x, kernels, bias = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim != 4 or kernels.ndim != 4 or bias.ndim != 1:
        raise ShapeError(f"conv2d expects 4-D input/kernels and 1-D bias, got "
                         f"{x.shape}, {kernels.shape}, {bias.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = kernels.shape
    sh, sw = _pair(stride)
    if Ck != C or bias.shape[0] != O:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}, "
                         f"bias {bias.shape}")
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {H}x{W}")
    if sh < 1 or sw < 1:
        raise ShapeError("stride must be positive")
    Ho, Wo = (H - kh) // sh + 1, (W - kw) // sw + 1

    win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    kflat = kernels.data.reshape(O, C * kh * kw)
    out = (cols @ kflat.T + bias.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def back(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        dk = (gf.T @ cols).reshape(kernels.shape)
        db = gf.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (gf @ kflat).reshape(B, Ho, Wo, C, kh, kw)
            dx = np.zeros_like(x.data)
            if kh * kw <= Ho * Wo:
                for i in range(kh):
                    for j in range(kw):
                        dx[:, :, i:i + sh * (Ho - 1) + 1:sh, j:j + sw * (Wo - 1) + 1:sw] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2))
            else:
                for p in range(Ho):
                    for q in range(Wo):
                        dx[:, :, p * sh:p * sh + kh, q * sw:q * sw + kw] += dcols[:, p, q]
        return dx, dk, db

    return _make(np.ascontiguousarray(out), (x, kernels, bias), back)


def pool_max(x: ArrayLike, window, stride=None) -> Tensor:
    """Max over (possibly overlapping) windows of the last two axes.

    The gradient of each output cell goes to the first maximal element of its
    window in row-major order.
    """
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError("pool_max needs at least 2 spatial axes")
    ph, pw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    H, W = x.shape[-2:]
    if ph > H or pw > W or ph < 1 or pw < 1:
        raise ShapeError(f"pool window {ph}x{pw} does not fit input {H}x{W}")
    lead = x.shape[:-2]
    Ho, Wo = (H - ph) // sh + 1, (W - pw) // sw + 1
    win = sliding_window_view(x.data, (ph, pw), axis=(-2, -1))[..., ::sh, ::sw, :, :]
    flat = win.reshape(*lead, Ho, Wo, ph * pw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def back(g):
        rows = np.arange(Ho)[:, None] * sh + arg // pw
        cols = np.arange(Wo)[None, :] * sw + arg % pw
        n_lead = int(np.prod(lead, dtype=np.int64))
        base = (np.arange(n_lead) * (H * W)).reshape(*lead, 1, 1)
        flat_idx = (base + rows * W + cols).reshape(-1)
        dx = np.bincount(flat_idx, weights=g.reshape(-1), minlength=x.data.size)
        return (dx.reshape(x.shape),)

    return _make(out, (x,), back)


# --------------------------------------------------------------- autodiff


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, params: Optional["ParamSet"] = None, accumulate: bool = False) -> None:
    """Backpropagate a scalar loss into every leaf that requires a gradient.

    By default the gradients of ``params`` are reset first, so each call
    yields exactly d(loss)/d(param). With ``accumulate=True`` the new
    gradients are added to whatever the leaves already hold.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if params is not None and not accumulate:
        params.zero_grad()
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    if not accumulate:
        for node in order:
            if node._backward is None:
                node.grad = np.zeros_like(node.data)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# -------------------------------------------------------------- parameters


class ParamSet:
    """Ordered, named parameter tensors; each carries a shape-matched ``grad``."""

    def __init__(self, items: Iterable[Tuple[str, Tensor]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        t.grad = np.zeros_like(t.data)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def grads(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.grad) for k, t in self._params.items())

    def values(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, t.data) for k, t in self._params.items())

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for t in self._params.values()])

    def copy(self) -> "ParamSet":
        return ParamSet((k, Tensor(t.data.copy())) for k, t in self._params.items())

    def load_values(self, other: "ParamSet") -> None:
        if other.names() != self.names():
            raise KeyError("parameter names differ")
        for k, t in self._params.items():
            if other[k].shape != t.shape:
                raise ShapeError(f"shape mismatch for {k}: {other[k].shape} vs {t.shape}")
            t.data = other[k].data.copy()

    def merged(self, other: "ParamSet", prefix_self: str, prefix_other: str) -> "ParamSet":
        """A view-like set holding the same Tensor objects under prefixed names."""
        out = ParamSet()
        for k, t in self._params.items():
            out._params[prefix_self + k] = t
        for k, t in other._params.items():
            out._params[prefix_other + k] = t
        return out

    # -- checkpoint format -------------------------------------------------
    # b"HRPS" | u16 version | u32 count | per param: u16 name_len, name utf-8,
    # u8 ndim, u32 dims..., little-endian float64 values (row-major)

    MAGIC = b"HRPS"
    VERSION = 1

    def to_bytes(self) -> bytes:
        parts = [self.MAGIC, struct.pack("<HI", self.VERSION, len(self._params))]
        for name, t in self._params.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<H", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<B", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "ParamSet":
        ps, end = cls._read(buf, 0)
        if end != len(buf):
            raise ValueError("trailing bytes after parameter set")
        return ps

    @classmethod
    def _read(cls, buf: bytes, pos: int) -> Tuple["ParamSet", int]:
        if buf[pos:pos + 4] != cls.MAGIC:
            raise ValueError("not a parameter-set checkpoint")
        version, count = struct.unpack_from("<HI", buf, pos + 4)
        if version != cls.VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos += 10
        out = cls()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (ndim,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", buf, pos)
            pos += 4 * ndim
            n = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(DTYPE).reshape(shape)
            pos += 8 * n
            out.add(name, Tensor(data))
        return out, pos

    def save(self, fh: Union[str, BinaryIO]) -> None:
        if isinstance(fh, (str, bytes)) or hasattr(fh, "__fspath__"):
            with open(fh, "wb") as f:
                f.write(self.to_bytes())
        else:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamSet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def glorot_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class SGD:
    """Plain SGD with optional heavy-ball momentum: ``v = mu*v + g; p -= lr*v``."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, momentum: float = 0.9):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self._velocity = {k: np.zeros_like(t.data) for k, t in params.items()}

    def step(self) -> None:
        for k, t in self.params.items():
            v = self._velocity[k]
            if self.momentum:
                v *= self.momentum
                v += t.grad
            else:
                v = t.grad
                self._velocity[k] = v
            t.data = t.data - self.lr * v
