"""
Dense tensors with recorded-graph reverse-mode differentiation.

Every op computes its forward result with numpy and, when any input requires
a gradient, records a closure that maps the output gradient to one gradient
per parent. `Tensor.backward` walks the graph once in reverse topological
order and accumulates `.grad` on leaves.

Layouts are NCHW. Broadcasting is limited to bias-add and the per-channel
affine; every other binary op needs identical shapes or a Python scalar.
"""
import contextlib
import io
import math
import struct
import threading
from collections import OrderedDict
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
import yaml

from src.exceptions import CheckpointError, ShapeMismatch

# Per-thread: evaluation workers run under no_grad while the caller trains
_state = threading.local()


def get_default_dtype():
    return getattr(_state, "dtype", np.float32)


def set_default_dtype(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _state.dtype = dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def float64_mode():
    """64-bit scalars for gradient checks; restores the previous dtype on exit."""
    previous = get_default_dtype()
    set_default_dtype(np.float64)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextlib.contextmanager
def no_grad():
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind in "biuf" and arr.dtype != get_default_dtype():
            arr = arr.astype(get_default_dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self):
        tag = f" '{self.name}'" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} dtype={self.dtype.name} requires_grad={self.requires_grad}>"

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    # --- graph traversal ---

    def _topological_order(self) -> List["Tensor"]:
        order, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulates d(self)/d(leaf) into every requires_grad leaf's `.grad`."""
        if grad is None:
            if self.size != 1:
                raise ShapeMismatch("backward", self.shape, (), "implicit gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)

        grads: Dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(self._topological_order()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeMismatch("backward", pg.shape, parent.shape, "gradient/parent shape")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # --- operator sugar ---

    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(self, other)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(self, other)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return mul(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def sum(self, axis=None, keepdims=False): return tensor_sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)
    def transpose(self, *axes): return transpose(self, axes[0] if len(axes) == 1 and isinstance(axes[0], (tuple, list)) else axes)
    def relu(self): return relu(self)
    def log(self): return log(self)
    def exp(self): return exp(self)


def parameter(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    result = Tensor(out, dtype=out.dtype)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward
    return result


# --- elementwise ---

def _binary_operands(op: str, a, b) -> Tuple[Optional[Tensor], Optional[Tensor], Optional[float], bool]:
    """Returns (tensor_a, tensor_b, scalar, scalar_is_left)."""
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if a_t and b_t:
        if a.shape != b.shape:
            raise ShapeMismatch(op, a.shape, b.shape)
        return a, b, None, False
    if a_t:
        return a, None, float(b), False
    if b_t:
        return None, b, float(a), True
    raise TypeError(f"{op}: at least one operand must be a Tensor")


def add(a, b) -> Tensor:
    ta, tb, s, _ = _binary_operands("add", a, b)
    if s is not None:
        t = ta if ta is not None else tb
        return _record(t.data + s, (t,), lambda g: (g,))
    return _record(ta.data + tb.data, (ta, tb), lambda g: (g, g))


def sub(a, b) -> Tensor:
    ta, tb, s, left = _binary_operands("sub", a, b)
    if s is not None:
        if left:
            return _record(s - tb.data, (tb,), lambda g: (-g,))
        return _record(ta.data - s, (ta,), lambda g: (g,))
    return _record(ta.data - tb.data, (ta, tb), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    ta, tb, s, _ = _binary_operands("mul", a, b)
    if s is not None:
        t = ta if ta is not None else tb
        return _record(t.data * s, (t,), lambda g: (g * s,))
    return _record(ta.data * tb.data, (ta, tb), lambda g: (g * tb.data, g * ta.data))


def div(a, b) -> Tensor:
    ta, tb, s, left = _binary_operands("div", a, b)
    if s is not None:
        if left:
            inv = 1.0 / tb.data
            return _record(s * inv, (tb,), lambda g: (-g * s * inv * inv,))
        return _record(ta.data / s, (ta,), lambda g: (g / s,))
    out = ta.data / tb.data
    return _record(out, (ta, tb), lambda g: (g / tb.data, -g * out / tb.data))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


# --- reductions and movement ---

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand_to(g: np.ndarray, shape: Tuple[int, ...], axes: Tuple[int, ...], keepdims: bool) -> np.ndarray:
    if not keepdims:
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).copy()


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    return _record(np.asarray(out), (x,), lambda g: (_expand_to(g, x.shape, axes, keepdims),))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    return _record(np.asarray(out), (x,), lambda g: (_expand_to(g, x.shape, axes, keepdims) / count,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch("reshape", x.shape, shape)
    return _record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeMismatch("transpose", x.shape, axes, "axes must permute every dimension")
    inverse = tuple(np.argsort(axes))
    return _record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch("concat", ref, x.shape, f"all dims but {axis} must match")
    splits = np.cumsum([x.shape[ax] for x in xs])[:-1]
    out = np.concatenate([x.data for x in xs], axis=ax)
    return _record(out, xs, lambda g: tuple(np.split(g, splits, axis=ax)))


def downsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Keeps every `factor`-th row and column of an NCHW map."""
    if factor == 1:
        return x
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeMismatch("downsample_nearest", x.shape, detail=f"H and W must be divisible by {factor}")
    out = x.data[:, :, ::factor, ::factor].copy()

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[:, :, ::factor, ::factor] = g
        return (dx,)
    return _record(out, (x,), backward)


# --- activations ---

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    return _record(out, (x,), lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def batch_affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel y = x * scale[c] + shift[c] on an NCHW map."""
    if x.ndim != 4 or scale.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeMismatch("batch_affine", x.shape, scale.shape, "scale/shift need one entry per channel")
    s = scale.data[None, :, None, None]
    out = x.data * s + shift.data[None, :, None, None]

    def backward(g):
        return g * s, (g * x.data).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    return _record(out, (x, scale, shift), backward)


# --- linear algebra ---

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(..., n, k) @ (..., k, m) with identical leading dims; batches run one at a time."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    lead = a.shape[:-2]
    a3 = a.data.reshape((-1,) + a.shape[-2:])
    b3 = b.data.reshape((-1,) + b.shape[-2:])
    out = np.stack([a3[i] @ b3[i] for i in range(a3.shape[0])]).reshape(lead + (a.shape[-2], b.shape[-1]))

    def backward(g):
        g3 = g.reshape((-1,) + g.shape[-2:])
        da = np.stack([g3[i] @ b3[i].T for i in range(g3.shape[0])]).reshape(a.shape)
        db = np.stack([a3[i].T @ g3[i] for i in range(g3.shape[0])]).reshape(b.shape)
        return da, db
    return _record(out, (a, b), backward)


def scale_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over (B, L, d) queries/keys and (B, L, c) values."""
    if q.ndim != 3 or q.shape != k.shape or v.ndim != 3 or v.shape[:2] != q.shape[:2]:
        raise ShapeMismatch("scale_dot_attention", q.shape, v.shape)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / math.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


# --- convolutions ---

def _im2col(xp: np.ndarray, k: int, stride: int) -> Tuple[np.ndarray, int, int]:
    """(C, Hp, Wp) -> (Ho * Wo, C * k * k) patch matrix."""
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[:3]
    return win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c * k * k), ho, wo


def _col2im(cols: np.ndarray, c: int, hp: int, wp: int, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of _im2col: scatters-adds patches back onto a (C, Hp, Wp) canvas."""
    patches = cols.reshape(ho, wo, c, k, k)
    out = np.zeros((c, hp, wp), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += patches[:, :, :, i, j].transpose(2, 0, 1)
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    x: (N, C, H, W), weight: (O, C, k, k), bias: (O,).
    Output: (N, O, (H + 2p - k) // s + 1, (W + 2p - k) // s + 1).
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatch("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch("conv2d bias", bias.shape, (weight.shape[0],))
    n, c, h, w = x.shape
    o, _, k, _ = weight.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeMismatch("conv2d", x.shape, weight.shape, "kernel larger than padded input")
    wmat = weight.data.reshape(o, c * k * k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    hp, wp = xp.shape[2:]

    cols, outs = [], []
    for i in range(n):
        col, ho, wo = _im2col(xp[i], k, stride)
        cols.append(col)
        outs.append((col @ wmat.T).T.reshape(o, ho, wo))
    out = np.stack(outs)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        dw = np.zeros_like(wmat)
        dx = np.zeros_like(xp)
        for i in range(n):
            gi = g[i].reshape(o, ho * wo)
            dw += gi @ cols[i]
            dx[i] = _col2im(gi.T @ wmat, c, hp, wp, k, stride, ho, wo)
        if padding:
            dx = dx[:, :, padding:hp - padding, padding:wp - padding]
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


def deconv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Transposed convolution, the exact adjoint of conv2d with the same weight.

    x: (N, C_in, H, W), weight: (C_in, C_out, k, k).
    Output: (N, C_out, (H - 1) * s - 2p + k, (W - 1) * s - 2p + k).
    """
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[0] != x.shape[1] or weight.shape[2] != weight.shape[3]:
        raise ShapeMismatch("deconv2d", x.shape, weight.shape)
    n, cin, h, w = x.shape
    _, cout, k, _ = weight.shape
    if bias is not None and bias.shape != (cout,):
        raise ShapeMismatch("deconv2d bias", bias.shape, (cout,))
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    if hf - 2 * padding <= 0 or wf - 2 * padding <= 0:
        raise ShapeMismatch("deconv2d", x.shape, weight.shape, "padding removes the whole output")
    wmat = weight.data.reshape(cin, cout * k * k)

    xs, outs = [], []
    for i in range(n):
        xi = x.data[i].reshape(cin, h * w)
        xs.append(xi)
        full = _col2im(xi.T @ wmat, cout, hf, wf, k, stride, h, w)
        outs.append(full[:, padding:hf - padding, padding:wf - padding])
    out = np.stack(outs)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        dw = np.zeros_like(wmat)
        dx = np.zeros_like(x.data)
        for i in range(n):
            cols, _, _ = _im2col(gp[i], k, stride)
            dx[i] = (cols @ wmat.T).T.reshape(cin, h, w)
            dw += xs[i] @ cols
        grads = [dx, dw.reshape(weight.shape)]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, backward)


# --- gradient checking ---

def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5,
                       indices: Optional[Iterable[int]] = None) -> np.ndarray:
    """
    Central finite differences of scalar fn() w.r.t. `tensor`, perturbing its data in place.
    With `indices` (flat positions), returns just those entries.
    """
    if not tensor.data.flags.c_contiguous or not tensor.data.flags.writeable:
        tensor.data = np.array(tensor.data, order="C")
    flat = tensor.data.reshape(-1)
    positions = range(flat.size) if indices is None else list(indices)
    out = []
    with no_grad():
        for i in positions:
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            out.append((plus - minus) / (2.0 * eps))
    out = np.asarray(out)
    return out.reshape(tensor.shape) if indices is None else out


# --- serialization ---

MAGIC = b"RSEGTNSR"
FORMAT_VERSION = 1
_DTYPE_CODES = {0: np.dtype('<f4'), 1: np.dtype('<f8'), 2: np.dtype('<i8'), 3: np.dtype('<i4')}
_CODE_OF = {np.dtype(v).newbyteorder('=').str: k for k, v in _DTYPE_CODES.items()}


def save_tensors(path: str, tensors: Dict[str, Union[Tensor, np.ndarray]], header: Optional[dict] = None):
    """
    Layout (little-endian): magic, u32 version, u32 header length, YAML header,
    u32 tensor count, then per tensor: u16 name length, name, u8 dtype code,
    u8 ndim, u32 dims, raw payload.
    """
    head = yaml.safe_dump(header or {}, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        key = np.dtype(arr.dtype).newbyteorder('=').str
        if key not in _CODE_OF:
            raise CheckpointError(f"cannot serialize dtype {arr.dtype} of '{name}'")
        code = _CODE_OF[key]
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_tensors(path: str) -> Tuple[dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as f:
        raw = f.read()
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"{path}: truncated file")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CheckpointError(f"{path}: not a tensor file")
    version, head_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    header = yaml.safe_load(bytes(take(head_len)).decode("utf-8")) or {}
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for '{name}'")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        tensors[name] = np.frombuffer(bytes(take(nbytes)), dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
    return header, tensors
