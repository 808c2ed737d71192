"""Dense tensors with reverse-mode automatic differentiation.

The primitive set is closed: every differentiable computation in the package
is composed from the functions in this module plus the three spatial kernels
in :mod:`tempalign.warp`. Broadcasting is limited to tensor/scalar arithmetic
and to per-channel bias addition; everything else demands matching shapes.
"""
from __future__ import annotations

import contextlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "ShapeError", "NonFiniteError", "no_grad", "tensor",
    "zeros", "ones", "zeros_like", "add", "sub", "mul", "scale", "add_scalar",
    "matmul", "bias_add", "conv2d", "relu", "sigmoid", "tanh", "exp", "log",
    "sum", "mean", "log_softmax", "concat", "global_avg_pool", "blur_pool", "reshape",
    "getitem", "take", "backward", "dump_tensor", "load_tensor", "dumps_tensor",
    "loads_tensor",
]

_FLOATS = (np.dtype(np.float32), np.dtype(np.float64))


class ShapeError(ValueError):
    """Operand shapes violate an op's shape rule."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or inf from finite inputs."""


class Graph:
    """Records primitive applications made while it is the active graph.

    Gradients do not need a Graph (each tensor links to its parents); the
    recorder exists so callers can inspect what a forward pass executed,
    e.g. ``graph.count("grid_sample")``.
    """

    def __init__(self):
        self.nodes: list[tuple[str, Tensor]] = []

    def count(self, op: str) -> int:
        return len([name for name, _ in self.nodes if name == op])

    def ops(self) -> list[str]:
        return [name for name, _ in self.nodes]

    def __enter__(self):
        _STATE.graphs.append(self)
        return self

    def __exit__(self, *exc):
        _STATE.graphs.remove(self)
        return False


class _State:
    def __init__(self):
        self.graphs: list[Graph] = []
        self.grad_enabled = True


_STATE = _State()


@contextlib.contextmanager
def no_grad():
    """Disable parent tracking; outputs are plain leaves."""
    prev = _STATE.grad_enabled
    _STATE.grad_enabled = False
    try:
        yield
    finally:
        _STATE.grad_enabled = prev


class Tensor:
    """A float32/float64 array plus the bookkeeping needed for backward."""

    __slots__ = ("data", "requires_grad", "name", "op", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOATS:
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else arr.copy()
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{tag})"

    def __len__(self):
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not a primitive")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def tensor(data, requires_grad=False, name=None, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=np.float64, requires_grad=False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap a primitive's output and link it into the autodiff graph."""
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: non-finite output from inputs of shapes "
                             f"{[p.shape for p in parents]}")
    out = Tensor(data, dtype=parents[0].dtype if parents else None)
    out.op = op
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    for g in _STATE.graphs:
        g.nodes.append((op, out))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, b)
    if not isinstance(a, Tensor):
        return add_scalar(b, a)
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add_scalar(a, -b)
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    if not isinstance(a, Tensor):
        return scale(b, a)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", x.data * x.dtype.type(c), (x,), lambda g: (g * g.dtype.type(c),))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _make("add_scalar", x.data + x.dtype.type(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make("relu", np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1 - y * y),))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make
        y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    d = x.data
    if np.any(d <= 0):
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(d), (x,), lambda g: (g / d,))


# -- linear algebra ----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D matrix product ``[m,k] @ [k,n] -> [m,n]``."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector along axis 1 (the one sanctioned broadcast)."""
    if x.ndim < 2 or b.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match channels of {x.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return _make("bias_add", x.data + b.data.reshape(view), (x, b),
                 lambda g: (g, g.sum(axis=axes)))


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, ho: int, wo: int) -> np.ndarray:
    """Patches as one ``[C*kh*kw, N*ho*wo]`` matrix so a conv is a single GEMM."""
    n, c = xp.shape[:2]
    xt = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, n, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw]
    return cols.reshape(c * kh * kw, n * ho * wo)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Cross-correlation of ``x [N,C,H,W]`` with ``w [O,C,kh,kw]``, zero padded."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {o} output channels")
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    cols = _im2col(xp, kh, kw, sh, sw, ho, wo)
    wm = w.data.reshape(o, -1)
    out = wm @ cols
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def backward_fn(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        gw = (g2 @ cols.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (wm.T @ g2).reshape(c, kh, kw, n, ho, wo)
            gxp = np.zeros((c, n) + xp.shape[2:], dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gcols[:, i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + wd].transpose(1, 0, 2, 3)
        grads = (gx, gw)
        if b is not None:
            grads += (g2.sum(axis=1),)
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return _make("conv2d", out, parents, backward_fn)


# -- reductions --------------------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axes)), (x,), backward_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    shape = x.shape

    def backward_fn(g):
        return (np.broadcast_to(np.expand_dims(g, axes), shape) / g.dtype.type(count),)

    return _make("mean", np.asarray(x.data.mean(axis=axes)), (x,), backward_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    d = x.data
    shifted = d - d.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    """``[N,C,H,W] -> [N,C]``."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected 4-D input, got {x.shape}")
    n, c, h, w = x.shape

    def backward_fn(g):
        return (np.broadcast_to(g[:, :, None, None] / g.dtype.type(h * w), x.shape).copy(),)

    return _make("global_avg_pool", x.data.mean(axis=(2, 3)), (x,), backward_fn)



def _blur_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 1)
    xp = np.pad(x, pad)

    def sl(start):
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + n, 2)
        return xp[tuple(idx)]

    return (sl(0) + 2 * sl(1) + sl(2)) * x.dtype.type(0.25)


def _blur_axis_adjoint(g: np.ndarray, axis: int, n: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n + 2
    gp = np.zeros(shape, g.dtype)

    def sl(start):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(start, start + n, 2)
        return tuple(idx)

    q = g * g.dtype.type(0.25)
    gp[sl(0)] += q
    gp[sl(1)] += 2 * q
    gp[sl(2)] += q
    idx = [slice(None)] * g.ndim
    idx[axis] = slice(1, n + 1)
    return gp[tuple(idx)]


def blur_pool(x: Tensor) -> Tensor:
    """Fixed ``[1,2,1]/4`` low-pass in each spatial axis, then stride 2.

    ``[N,C,H,W] -> [N,C,H/2,W/2]`` with zero padding; output ``i`` is centred
    on input ``2i`` like a 3x3 stride-2 convolution. Filtering before the
    subsampling keeps features close to shift-equivariant.
    """
    if x.ndim != 4:
        raise ShapeError(f"blur_pool: expected 4-D input, got {x.shape}")
    h, w = x.shape[2:]
    if h % 2 or w % 2:
        raise ShapeError(f"blur_pool: spatial extents must be even, got {h}x{w}")
    y = _blur_axis(_blur_axis(x.data, 2), 3)

    def backward_fn(g):
        return (_blur_axis_adjoint(_blur_axis_adjoint(g, 3, w), 2, h),)

    return _make("blur_pool", y, (x,), backward_fn)

# -- structural --------------------------------------------------------------

def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, backward_fn)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing goes through :func:`take`."""
    if not isinstance(idx, tuple):
        idx = (idx,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in idx):
        raise TypeError("getitem supports slices and integers only; use take()")

    def backward_fn(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _make("slice", np.array(x.data[idx]), (x,), backward_fn)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis`` (repeats allowed, gradients summed)."""
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.ndim

    def backward_fn(g):
        full = np.zeros_like(x.data)
        gm = np.moveaxis(g, ax, 0)
        fm = np.moveaxis(full, ax, 0)
        np.add.at(fm, idx, gm)
        return (full,)

    return _make("take", np.take(x.data, idx, axis=ax), (x,), backward_fn)


# -- reverse pass ------------------------------------------------------------

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: dict[str, Tensor] | Iterable[Tensor] | None = None,
             grad_output: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a gradient array for every tensor in ``params`` (a name->tensor
    mapping or an iterable of named tensors). Parameters the loss does not
    reach get zeros of their own shape. With ``params=None`` every named
    trainable leaf reached from ``loss`` is returned.
    """
    if grad_output is None:
        if loss.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grad_output = np.ones_like(loss.data)
    grads: dict[int, np.ndarray] = {}
    order = _topo(loss) if loss.requires_grad else [loss]
    grads[id(loss)] = np.asarray(grad_output, dtype=loss.dtype).reshape(loss.shape)
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    if params is None:
        params = {n.name: n for n in order if n.name is not None and n._backward is None}
    elif not isinstance(params, dict):
        params = {p.name: p for p in params}
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
    return out


# -- serialization -----------------------------------------------------------

_MAGIC = b"TACT"
_VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def dumps_tensor(x: Tensor | np.ndarray) -> bytes:
    """Serialize to the TACT binary layout (little-endian throughout)."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.dtype not in _DTYPE_TAGS:
        arr = arr.astype(np.float64)
    header = _MAGIC + struct.pack("<HBB", _VERSION, _DTYPE_TAGS[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes()


def loads_tensor(buf: bytes, offset: int = 0) -> tuple[Tensor, int]:
    """Parse one TACT blob at ``offset``; returns the tensor and the end offset."""
    if buf[offset:offset + 4] != _MAGIC:
        raise ValueError("not a TACT tensor (bad magic)")
    version, tag, rank = struct.unpack_from("<HBB", buf, offset + 4)
    if version != _VERSION:
        raise ValueError(f"unsupported TACT version {version}")
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown TACT dtype tag {tag}")
    pos = offset + 8
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    count = int(np.prod(shape)) if rank else 1
    end = pos + count * dtype.itemsize
    if end > len(buf):
        raise ValueError("truncated TACT tensor")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return Tensor(data.astype(_TAG_DTYPES[tag])), end


def dump_tensor(x: Tensor | np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(x))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())[0]
