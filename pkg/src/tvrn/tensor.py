"""Dense tensors with a reverse-mode differentiation tape.

Recording follows the gradient-tape model: operations executed while a
:class:`Tape` is active are appended to it whenever one of their inputs is
tracked (a leaf with ``requires_grad`` or a watched / recorded tensor).
Outside a tape nothing is recorded, so inference pays no bookkeeping cost.

Shapes are fixed per op; the only broadcasting is against Python scalars.
The layout convention for image-like data is ``[B, C, H, W]`` (a missing
batch axis is accepted by :func:`conv2d`).
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InvalidGeometryError, InvalidShapeError, TapeError

LEAKY_SLOPE = 0.1
_EXP_LIMIT = 80.0

_dtype_stack: list[np.dtype] = [np.dtype(np.float32)]
_tapes: list["Tape"] = []


@contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Gradient checks run under ``float64``: central differences in float32
    cannot resolve a 1e-4 relative error.
    """
    _dtype_stack.append(np.dtype(dtype))
    try:
        yield
    finally:
        _dtype_stack.pop()


def get_default_dtype() -> np.dtype:
    return _dtype_stack[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=_dtype_stack[-1])
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = array
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise InvalidShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tape:
    """Append-only record of differentiable operations.

    A tape answers exactly one :meth:`gradient` query; re-use requires
    recording again.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._tracked: set[int] = set()
        self._used = False

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc):
        _tapes.remove(self)
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._tracked.add(id(t))

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def gradient(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        return self.gradients([(target, sources)])[0]

    def gradients(self, queries) -> list[list[np.ndarray]]:
        """Answer several ``(target, sources)`` queries over one recording.

        Each query is an independent reverse sweep; backward closures are
        pure, so sharing the forward record is exact.
        """
        if self._used:
            raise TapeError("tape already consumed; record the graph again")
        self._used = True
        return [self._sweep(t, s) for t, s in queries]

    def _sweep(self, target: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        if target.size != 1:
            raise InvalidShapeError(f"gradient target must be scalar, got {target.shape}")
        wanted = {id(s) for s in sources}
        found: dict[int, np.ndarray] = {}
        grads: dict[int, np.ndarray] = {id(target): np.ones_like(target.data)}
        for node in reversed(self.nodes):
            key = id(node.out)
            g = grads.pop(key, None)
            if g is None:
                continue
            if key in wanted:
                found[key] = g
            parent_grads = node.backward(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not self.is_tracked(p):
                    continue
                pk = id(p)
                prev = grads.get(pk)
                grads[pk] = pg if prev is None else prev + pg
        out = []
        for s in sources:
            g = found.get(id(s), grads.get(id(s)))
            out.append(np.zeros_like(s.data) if g is None else np.asarray(g, dtype=s.data.dtype))
        return out


def _record(out: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    t = Tensor._wrap(out)
    if _tapes:
        tape = _tapes[-1]
        if any(isinstance(p, Tensor) and tape.is_tracked(p) for p in parents):
            tape.nodes.append(_Node(t, parents, backward))
            tape._tracked.add(id(t))
    return t


def _tracked(t: Tensor) -> bool:
    """Whether the innermost active tape needs a gradient for ``t``."""
    return bool(_tapes) and _tapes[-1].is_tracked(t)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# --------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data + a.data.dtype.type(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return _record(a.data - a.data.dtype.type(b), (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        s = a.data.dtype.type(b)
        return _record(a.data * s, (a,), lambda g: (g * s,))
    b = as_tensor(b)
    _check_same(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    clipped = np.clip(a.data, -_EXP_LIMIT, _EXP_LIMIT)
    out = np.exp(clipped)
    inside = clipped == a.data
    return _record(out, (a,), lambda g: (g * out * inside,))


def sigmoid(a: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    out = out.astype(a.data.dtype, copy=False)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    pos = a.data > 0
    factor = np.where(pos, 1.0, slope).astype(a.data.dtype)
    return _record(a.data * factor, (a,), lambda g: (g * factor,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(out, (a,), lambda g: (g * inside,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * sign,))


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.data.dtype, copy=False)
    sig = (0.5 * (1.0 + np.tanh(0.5 * a.data))).astype(a.data.dtype, copy=False)
    return _record(out, (a,), lambda g: (g * sig,))


def round_ste(a: Tensor, scale: float = 255.0) -> Tensor:
    """Quantize to multiples of ``1/scale``; the backward pass is the identity."""
    out = (np.round(a.data * scale) / scale).astype(a.data.dtype, copy=False)
    return _record(out, (a,), lambda g: (g,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": mul,
    "scalar-mul": mul,
    "exp": exp,
    "sigmoid": sigmoid,
    "leaky-relu": leaky_relu,
}


def elementwise(kind: str, a: Tensor, b=None, **kwargs) -> Tensor:
    """Dispatch by op name; ``clamp`` takes ``lo``/``hi`` keywords."""
    if kind == "clamp":
        return clamp(a, kwargs.get("lo", 0.0), kwargs.get("hi", 1.0))
    fn = _ELEMENTWISE[kind]
    return fn(a) if b is None else fn(a, b)


# --------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _record(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record(np.asarray(a.data.mean(), dtype=a.data.dtype), (a,),
                   lambda g: (np.full(shape, g / n, dtype=g.dtype),))


def l1(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference."""
    _check_same(a, b, "l1")
    diff = a.data - b.data
    sign = np.sign(diff)
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=a.data.dtype)
    return _record(out, (a, b), lambda g: (sign * (g / n), -sign * (g / n)))


def l2(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared difference."""
    _check_same(a, b, "l2")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    return _record(out, (a, b), lambda g: (diff * (2 * g / n), -diff * (2 * g / n)))


def reduce(kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    if kind == "mean":
        return mean(a)
    if kind == "sum":
        return sum_all(a)
    if kind == "l1-distance":
        return l1(a, b)
    raise ValueError(f"unknown reduction {kind!r}")


# --------------------------------------------------------------------------
# structure


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        # repeated fancy indices must accumulate, not overwrite
        np.add.at(full, index, g)
        return (full,)

    return _record(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShapeError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]
    return _record(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise InvalidShapeError(f"stack: {exc}") from None
    n = len(tensors)
    return _record(out, tuple(tensors),
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def detach(a: Tensor) -> Tensor:
    return Tensor._wrap(a.data)


def reassign(a: Tensor, values) -> Tensor:
    """Forward yields ``values``; backward routes the gradient to ``a`` unchanged.

    This is the ``x.data <- v.data`` trick: the value of a differentiable
    estimate is replaced by the true (non-differentiable) result while the
    estimate's gradient path is kept.
    """
    v = values.data if isinstance(values, Tensor) else np.asarray(values)
    if v.shape != a.shape:
        raise InvalidShapeError(f"reassign: shape mismatch {a.shape} vs {v.shape}")
    return _record(v.astype(a.data.dtype, copy=True), (a,), lambda g: (g,))


def grad_transform(a: Tensor, fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    """Identity forward; the incoming gradient is replaced by ``fn(grad)``."""
    return _record(a.data, (a,), lambda g: (fn(g),))


# --------------------------------------------------------------------------
# convolution and friends


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise InvalidGeometryError(
            f"conv2d: extent {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size")
    return span // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Cross-correlation of ``x [B,C,H,W]`` (or ``[C,H,W]``) with ``w [O,C,kh,kw]``."""
    if x.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), w, b, stride, padding)
        return reshape(out, out.shape[1:])
    if x.ndim != 4 or w.ndim != 4:
        raise InvalidShapeError(f"conv2d: bad ranks {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Ck, kh, kw = w.shape
    if Ck != C:
        raise InvalidShapeError(f"conv2d: input has {C} channels, kernel expects {Ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidGeometryError("conv2d: kernel extents must be odd")
    if padding < 0:
        raise InvalidGeometryError("conv2d: padding must be non-negative")
    Ho = _conv_out(H, kh, stride, padding)
    Wo = _conv_out(W, kw, stride, padding)
    xd, wd = x.data, w.data
    # pixel-major im2col: rows are output pixels, columns (kh, kw, C)
    xp = np.pad(xd.transpose(0, 2, 3, 1), ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    w2 = wd.transpose(2, 3, 1, 0).reshape(kh * kw * C, O)
    out = cols @ w2
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2))
    need_x = _tracked(x)

    def backward(g):
        gt = g.transpose(0, 2, 3, 1)
        g2 = np.ascontiguousarray(gt).reshape(B * Ho * Wo, O)
        gw = np.ascontiguousarray((g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2))
        gx = None
        if need_x and stride == 1:
            # input gradient = full correlation with the flipped kernel
            ph, pw = kh - 1 - padding, kw - 1 - padding
            gp = np.pad(gt, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
            wf = wd[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(kh * kw * O, C)
            gx = (_im2col(gp, kh, kw, 1, H, W) @ wf).reshape(B, H, W, C)
        elif need_x:
            gcols = (g2 @ w2.T).reshape(B, Ho, Wo, kh, kw, C)
            gx = np.zeros((B, H + 2 * padding, W + 2 * padding, C), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, i, j]
            gx = gx[:, padding:padding + H, padding:padding + W]
        if gx is not None:
            gx = np.ascontiguousarray(gx.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """``xp [B, Hp, Wp, C]`` -> ``[B*Ho*Wo, kh*kw*C]``."""
    v = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    if stride > 1:
        v = v[:, ::stride, ::stride]
    v = v[:, :Ho, :Wo]
    B, C = xp.shape[0], xp.shape[3]
    return np.ascontiguousarray(v.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, kh * kw * C)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x [B,I] @ w[O,I]^T + b[O]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"linear: {x.shape} x {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out = out + b.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if b is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return _record(out, (x, w) if b is None else (x, w, b), backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply ``x [B,C,H,W]`` channel-wise by ``s [B,C]``."""
    if x.ndim != 4 or s.shape != x.shape[:2]:
        raise InvalidShapeError(f"channel_scale: {x.shape} with {s.shape}")
    xd, sd = x.data, s.data
    sb = sd[:, :, None, None]
    return _record(xd * sb, (x, s), lambda g: (g * sb, (g * xd).sum(axis=(2, 3))))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of ``[B,C,H,W]``."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape
    return _record(out, (x,),
                   lambda g: (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),))


def avg_pool2x(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise InvalidGeometryError(f"avg_pool2x: odd extent {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return ((g / 4).repeat(2, axis=2).repeat(2, axis=3),)

    return _record(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    n = H * W
    return _record(x.data.mean(axis=(2, 3)), (x,),
                   lambda g: (np.broadcast_to(g[:, :, None, None] / n, (B, C, H, W)).copy(),))


def spatial_linear(x: Tensor, ops: Sequence) -> Tensor:
    """Apply a fixed linear operator per batch item over the flattened H*W grid.

    ``ops[b]`` is an (H*W x H*W) matrix (dense or scipy sparse) shared by all
    channels of item ``b``. The operator is treated as a constant; only the
    gradient with respect to ``x`` is propagated (via the transpose).
    """
    B, C, H, W = x.shape
    if len(ops) != B:
        raise InvalidShapeError(f"spatial_linear: {len(ops)} operators for batch {B}")
    xd = x.data.reshape(B, C, H * W)
    out = np.empty_like(xd)
    for i, op in enumerate(ops):
        out[i] = (op @ xd[i].T).T
    out = out.reshape(B, C, H, W)

    def backward(g):
        gd = g.reshape(B, C, H * W)
        gx = np.empty_like(gd)
        for i, op in enumerate(ops):
            gx[i] = (op.T @ gd[i].T).T
        return (gx.reshape(B, C, H, W),)

    return _record(out, (x,), backward)


# --------------------------------------------------------------------------
# finite differences


def _scalar_value(v) -> float:
    if isinstance(v, Tensor):
        return float(np.asarray(v.data, dtype=np.float64).reshape(-1)[0])
    return float(v)


def fd_gradient(f: Callable[[Tensor], object], x: Tensor, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, copy=True)
    grad = np.zeros(base.shape, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        plus = base.copy()
        plus.reshape(-1)[i] += eps
        minus = base.copy()
        minus.reshape(-1)[i] -= eps
        fp = _scalar_value(f(Tensor._wrap(plus)))
        fm = _scalar_value(f(Tensor._wrap(minus)))
        flat[i] = (fp - fm) / (2 * eps)
    return grad.astype(base.dtype)


def fd_directional(f: Callable[[Tensor], object], x: Tensor, direction: np.ndarray,
                   eps: float) -> float:
    """Central difference of ``f`` along ``direction``."""
    base = x.data
    d = np.asarray(direction, dtype=base.dtype)
    fp = _scalar_value(f(Tensor._wrap(base + eps * d)))
    fm = _scalar_value(f(Tensor._wrap(base - eps * d)))
    return (fp - fm) / (2 * eps)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a||, ||b||)``; zero when both vanish."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


# --------------------------------------------------------------------------
# binary dump


_MAGIC = b"TVT1"


def write_tensor(fh, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype="<f4")
    fh.write(_MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> np.ndarray | None:
    """Read one record; ``None`` at a clean end of file."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != _MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    raw = fh.read(4)
    if len(raw) != 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack("<I", raw)
    raw = fh.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", raw)
    if any(s == 0 for s in shape):
        raise FormatError(f"tensor extents must be positive, got {shape}")
    count = int(np.prod(shape)) if rank else 1
    payload = fh.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def save_tensors(path, arrays: Iterable[np.ndarray]) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            write_tensor(fh, a)


def load_tensors(path) -> list[np.ndarray]:
    out = []
    with open(path, "rb") as fh:
        while (arr := read_tensor(fh)) is not None:
            out.append(arr)
    return out
