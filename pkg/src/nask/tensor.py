"""Small dense tensor library with tape-based reverse-mode differentiation.

Only the operations used by the detection pipeline are provided. Every
tensor stores a C-contiguous float64 numpy array. Operations executed while
a :class:`Tape` is active, and touching at least one tensor that requires a
gradient, are recorded on that tape; :func:`backward` then walks the tape in
reverse.

    >>> x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(tape, loss)
    >>> x.grad
    array([2., 4., 6.])
"""

import contextlib
import json
import struct
from typing import Callable, List, NamedTuple, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError, UnsupportedOpError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "no_tape",
    "count_macs",
    "matmul",
    "conv2d",
    "softmax",
    "bilinear_sample",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "clamp",
    "smooth_l1",
    "concat",
    "scale_channels",
    "avg_pool2",
    "upsample2",
    "save_tensor",
    "load_tensor",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class Tensor:
    """Dense float64 array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data.copy()

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these dispatch to recorded ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise UnsupportedOpError("tensor / tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


class Node(NamedTuple):
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and operations are recorded on
    the innermost active one only.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self._produced = set()

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, op, inputs, output, back):
        self.nodes.append(Node(op, tuple(inputs), output, back))
        self._produced.add(id(output))

    def backward(self, loss):
        backward(self, loss)


_TAPES: List[Tape] = []


@contextlib.contextmanager
def no_tape():
    """Temporarily disable recording (e.g. for inference or oracle code)."""
    saved = _TAPES[:]
    _TAPES.clear()
    try:
        yield
    finally:
        _TAPES[:] = saved


def _emit(op, inputs, out_data, back):
    """Wrap ``out_data`` and record ``back`` if any input needs a gradient."""
    needs = bool(_TAPES) and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        _TAPES[-1].record(op, inputs, out, back)
    return out


def backward(tape: Tape, loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor on ``tape``
    that requires a gradient. Calling twice without ``zero_grad`` adds."""
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._produced and not loss.requires_grad:
        raise ContractError("loss was not produced on this tape")
    if not np.all(np.isfinite(loss.data)):
        raise NumericError("loss is not finite")
    grads = {id(loss): np.ones_like(loss.data)}
    seen = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        in_grads = node.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                seen[key] = t
    for key, t in seen.items():
        if not t.requires_grad:
            continue
        g = grads[key].reshape(t.shape)
        t.grad = g.copy() if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# MAC instrumentation


class MacCounter:
    def __init__(self):
        self.macs = 0


_COUNTERS: List[MacCounter] = []


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates performed by :func:`matmul` in the block."""
    counter = MacCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.remove(counter)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit("add_scalar", (a,), a.data + s, lambda g: (g,))
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a, b):
    if not isinstance(b, Tensor):
        return add(a, -float(b))
    _check_same(a, b, "sub")
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def neg(a):
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def mul(a, b):
    if not isinstance(b, Tensor):
        s = float(b)
        return _emit("mul_scalar", (a,), a.data * s, lambda g: (g * s,))
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def tsum(a):
    shape = a.shape
    return _emit("sum", (a,), np.array(a.data.sum()), lambda g: (np.full(shape, g.item()),))


def mean(a, axis=None):
    if axis is None:
        n = a.data.size
        shape = a.shape
        return _emit("mean", (a,), np.array(a.data.mean()),
                     lambda g: (np.full(shape, g.item() / n),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    shape = a.shape
    out = a.data.mean(axis=axes)

    def back(g):
        g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape) / n,)

    return _emit("mean_axis", (a,), out, back)


def reshape(a, shape):
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _emit("reshape", (a,), out, lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _emit("transpose", (a,), a.data.transpose(axes),
                 lambda g: (g.transpose(inv),))


def getitem(a, index):
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)  # repeated indices accumulate
        return (full,)

    return _emit("getitem", (a,), a.data[index], back)


def concat(tensors: Sequence[Tensor], axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of empty sequence")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), out, back)


def relu(a):
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,))


def sigmoid(a):
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))


def exp(a):
    out = np.exp(a.data)
    return _emit("exp", (a,), out, lambda g: (g * out,))


def log(a):
    x = a.data
    if np.any(x <= 0):
        raise NumericError("log of non-positive value")
    return _emit("log", (a,), np.log(x), lambda g: (g / x,))


def clamp(a, lo=None, hi=None):
    """Clip values; the gradient is zero where clipping was active."""
    x = a.data
    out = np.clip(x, lo, hi)
    keep = out == x
    return _emit("clamp", (a,), out, lambda g: (g * keep,))


def smooth_l1(a):
    """Elementwise 0.5*d**2 for |d| < 1, |d| - 0.5 otherwise."""
    d = a.data
    ad = np.abs(d)
    small = ad < 1.0
    out = np.where(small, 0.5 * d * d, ad - 0.5)
    return _emit("smooth_l1", (a,), out,
                 lambda g: (g * np.where(small, d, np.sign(d)),))


def scale_channels(x, lam):
    """Multiply channel ``i`` of a C x H x W tensor by ``lam[i]``."""
    if x.ndim != 3 or lam.shape != (x.shape[0],):
        raise DimensionError(f"scale_channels: {x.shape} vs {lam.shape}")
    xd, ld = x.data, lam.data

    def back(g):
        return g * ld[:, None, None], (g * xd).sum(axis=(1, 2))

    return _emit("scale_channels", (x, lam), xd * ld[:, None, None], back)


def avg_pool2(x):
    """2x2 average pooling with stride 2 on a C x H x W tensor."""
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial size, got {x.shape}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))

    def back(g):
        return (np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0,)

    return _emit("avg_pool2", (x,), out, back)


def upsample2(x):
    """Nearest-neighbour 2x upsampling of a C x H x W tensor."""
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return _emit("upsample2", (x,), out, back)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    """Matrix product of an M x K and a K x N tensor."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    for counter in _COUNTERS:
        counter.macs += a.shape[0] * a.shape[1] * b.shape[1]
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, back)


def _im2col3(xp, h, w):
    # xp: C x (H+2) x (W+2) -> (C*9) x (H*W), ordering (c, ky, kx)
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky, kx] = xp[:, ky:ky + h, kx:kx + w]
    return cols.reshape(c * 9, h * w)


def conv2d(x, weight, bias=None):
    """Same-size 2-D convolution (cross-correlation) of a C_in x H x W tensor.

    ``weight`` has shape C_out x C_in x k x k with k = 1 or 3; the 3x3 case
    zero-pads by one pixel. ``bias`` is an optional length-C_out tensor.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise UnsupportedOpError(f"conv2d: bad kernel shape {weight.shape}")
    k = weight.shape[2]
    if k not in (1, 3):
        raise UnsupportedOpError(f"conv2d: only 1x1 and 3x3 kernels, got {k}x{k}")
    if x.ndim != 3 or x.shape[0] != weight.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise DimensionError(f"conv2d: bias {bias.shape} vs kernel {weight.shape}")
    cin, h, w = x.shape
    cout = weight.shape[0]
    wm = weight.data.reshape(cout, cin * k * k)
    if k == 1:
        cols = x.data.reshape(cin, h * w)
    else:
        cols = _im2col3(np.pad(x.data, ((0, 0), (1, 1), (1, 1))), h, w)
    out = wm @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(cout, h, w)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gm = g.reshape(cout, h * w)
        gw = (gm @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = wm.T @ gm
            if k == 1:
                gx = gcols.reshape(cin, h, w)
            else:
                gc = gcols.reshape(cin, 3, 3, h, w)
                gp = np.zeros((cin, h + 2, w + 2))
                for ky in range(3):
                    for kx in range(3):
                        gp[:, ky:ky + h, kx:kx + w] += gc[:, ky, kx]
                gx = gp[:, 1:-1, 1:-1]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=1))
        return tuple(grads)

    return _emit(f"conv{k}x{k}", inputs, out, back)


def softmax(x, axis=-1):
    """Numerically stable softmax along ``axis``."""
    d = x.data
    if not np.all(np.isfinite(d)):
        raise NumericError("softmax input is not finite")
    e = np.exp(d - d.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", (x,), out, back)


def bilinear_sample(x, ys, xs):
    """Sample a C x H x W tensor at real coordinates.

    ``ys`` and ``xs`` are equally shaped arrays (H' x W') of row and column
    positions; they are clamped to the map. Returns C x H' x W'.
    """
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    if ys.shape != xs.shape or ys.ndim != 2:
        raise DimensionError(f"bilinear_sample: grid shapes {ys.shape}, {xs.shape}")
    if ys.size == 0:
        raise DimensionError("bilinear_sample: empty grid")
    c, h, w = x.shape
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    d = x.data
    # nested lerps reproduce constant inputs exactly
    top = d[:, y0, x0] + wx * (d[:, y0, x1] - d[:, y0, x0])
    bot = d[:, y1, x0] + wx * (d[:, y1, x1] - d[:, y1, x0])
    out = top + wy * (bot - top)

    def back(g):
        flat = np.zeros((c, h * w))
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            idx = (yy * w + xx).ravel()
            vals = (g * ww).reshape(c, -1)
            for ch in range(c):
                flat[ch] += np.bincount(idx, weights=vals[ch], minlength=h * w)
        return (flat.reshape(c, h, w),)

    return _emit("bilinear_sample", (x,), out, back)


# ---------------------------------------------------------------------------
# serialization
#
# layout: uint32 LE header length | UTF-8 JSON {"shape", "name"} | float64 LE payload


def tensor_to_bytes(t, name=None):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    if name is None and isinstance(t, Tensor):
        name = t.name
    header = json.dumps({"shape": list(arr.shape), "name": name},
                        sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return struct.pack("<I", len(header)) + header + payload


def tensor_from_bytes(buf):
    (hlen,) = struct.unpack_from("<I", buf, 0)
    header = json.loads(buf[4:4 + hlen].decode("utf-8"))
    shape = tuple(header["shape"])
    data = np.frombuffer(buf, dtype="<f8", offset=4 + hlen)
    if data.size != int(np.prod(shape)):
        raise DimensionError(f"payload has {data.size} values, header says {shape}")
    return Tensor(data.reshape(shape).astype(np.float64), name=header.get("name"))


def save_tensor(path, t, name=None):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t, name))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
