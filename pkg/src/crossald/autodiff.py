"""Minimal dense-tensor reverse-mode differentiation.

Tensors wrap numpy arrays. Every differentiable primitive records its
parents together with a closure mapping the upstream gradient to parent
gradients; :func:`backward` walks that graph once in reverse topological
order.

Values are 32-bit by default. Reductions and convolution inner products are
accumulated in 64-bit and rounded afterwards. :func:`precision` switches the
working dtype, which the finite-difference checks use to run in 64-bit.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "GradientMap",
    "ShapeError",
    "NonFiniteError",
    "GraphError",
    "precision",
    "get_dtype",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "shift",
    "exp",
    "log",
    "power",
    "sum",
    "mean",
    "maximum",
    "leaky_relu",
    "reshape",
    "detach",
    "conv2d",
    "avg_pool2",
    "upsample2",
    "concat",
    "softmax",
    "backward",
    "grad",
    "finite_difference_check",
]

LEAKY_SLOPE = 0.01

_dtype: type = np.float32
_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes violate a primitive's shape rule."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity entered or left a primitive."""


class GraphError(RuntimeError):
    """Malformed graph passed to :func:`backward`."""


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and op results."""
    global _dtype
    old = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = old


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Tensor:
    """Dense array plus an optional record of the op that produced it."""

    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op", "uid")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, _op=None):
        arr = np.asarray(data, dtype=_dtype)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if _op is None:
            _check_finite(arr, "leaf tensor")
            # leaves own their buffer; callers may mutate the source array
            arr = arr.copy()
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = tuple(_parents)
        self.backward_fn = _backward
        self.op = _op
        self.uid = next(_ids)

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
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        op = self.op or "leaf"
        return f"Tensor(shape={self.shape}, op={op}, requires_grad={self.requires_grad})"

    def __hash__(self) -> int:
        return self.uid

    # operators are sugar for the functions below; no broadcasting
    def __add__(self, other):
        return shift(self, other) if _is_scalar(other) else add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return shift(self, -float(other)) if _is_scalar(other) else sub(self, other)

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __mul__(self, other):
        return scale(self, other) if _is_scalar(other) else mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return scale(self, 1.0 / float(other)) if _is_scalar(other) else div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __pow__(self, p):
        return power(self, p)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    rg = any(p.requires_grad for p in parents)
    return Tensor(
        np.asarray(data, dtype=_dtype),
        requires_grad=rg,
        _parents=parents if rg else (),
        _backward=backward_fn if rg else None,
        _op=op,
    )


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    _check_finite(out, "div")
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * _dtype(c), (a,), lambda g: (g * _dtype(c),), "scale")


def shift(a: Tensor, c: float) -> Tensor:
    return _make(a.data + _dtype(c), (a,), lambda g: (g,), "shift")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    _check_finite(out, "exp")
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if (a.data <= 0).any():
        raise NonFiniteError("log of non-positive value")
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = ad ** _dtype(p)
    _check_finite(out, "power")
    return _make(out, (a,), lambda g: (g * _dtype(p) * ad ** _dtype(p - 1.0),), "power")


def maximum(a: Tensor, c: float) -> Tensor:
    """Elementwise max(a, c) against a constant; ties route gradient to ``a``."""
    mask = a.data >= c
    out = np.where(mask, a.data, _dtype(c))
    return _make(out, (a,), lambda g: (g * mask,), "maximum")


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    ad = a.data
    s = _dtype(slope)
    out = np.where(ad > 0, ad, ad * s)

    def _bw(g):
        return (np.where(ad > 0, g, g * s),)

    return _make(out, (a,), _bw, "leaky_relu")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, dtype=np.float64, keepdims=keepdims)
    shape = a.shape

    def _bw(g):
        if not keepdims:
            g = np.expand_dims(g.reshape(np.shape(out)), axes)
        return (np.broadcast_to(g, shape).astype(_dtype, copy=True),)

    return _make(out, (a,), _bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = math.prod(a.shape[ax] for ax in axes)
    return scale(sum(a, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------- structural


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if shape.count(-1) == 1:
        known = math.prod(s for s in shape if s != -1)
        if known and a.size % known == 0:
            shape = tuple(a.size // known if s == -1 else s for s in shape)
    if math.prod(shape) != a.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def detach(a: Tensor) -> Tensor:
    """Same values, no history: gradients stop here."""
    return Tensor(a.data)


def _as_batch(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 4:
        return x, False
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    raise ShapeError(f"{op}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Stride-1 convolution with zero 'same' padding.

    ``x`` is [Cin,H,W] or [B,Cin,H,W]; ``w`` is [Cout,Cin,k,k] with odd k
    (3 for the spatial layers, 1 for the projection); ``b`` is [Cout].
    """
    xb, squeeze = _as_batch(x, "conv2d")
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be [Cout,Cin,k,k] with odd k, got {w.shape}")
    if w.shape[1] != xb.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} has {xb.shape[1]} channels, kernel {w.shape} expects {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")

    B, cin, H, W = xb.shape
    cout, _, k, _ = w.shape
    pad = k // 2
    xp = np.pad(xb.data.astype(np.float64), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    wd = w.data.astype(np.float64)
    # taps as a [k*k*Cin, B*H*W] column block, contracted against the kernel in 64-bit
    cols = _im2col(xp, k, H, W)
    wmat = wd.transpose(0, 2, 3, 1).reshape(cout, k * k * cin)
    out = (wmat @ cols).reshape(cout, B, H, W).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.data.astype(np.float64)[None, :, None, None]

    need_x, need_w = xb.requires_grad, w.requires_grad

    def _bw(g):
        g64 = g.astype(np.float64).transpose(1, 0, 2, 3).reshape(cout, B * H * W)
        gx = gw = gb = None
        if need_x:
            if cin <= cout or k == 1:
                # scatter k*k shifted [Cin,...] blocks
                gcols = (wmat.T @ g64).reshape(k, k, cin, B, H, W)
                gxp = np.zeros((cin, B, H + 2 * pad, W + 2 * pad))
                for dy in range(k):
                    for dx in range(k):
                        gxp[:, :, dy:dy + H, dx:dx + W] += gcols[dy, dx]
                gx = gxp[:, :, pad:pad + H, pad:pad + W]
            else:
                # correlate the padded upstream gradient with the flipped kernel
                gp = np.pad(g64.reshape(cout, B, H, W), ((0, 0), (0, 0), (pad, pad), (pad, pad)))
                gcols = _im2col_cf(gp, k, H, W)
                wflip = wd[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(cin, k * k * cout)
                gx = (wflip @ gcols).reshape(cin, B, H, W)
            gx = gx.transpose(1, 0, 2, 3).astype(_dtype)
        if need_w:
            gw = (g64 @ cols.T).reshape(cout, k, k, cin).transpose(0, 3, 1, 2).astype(_dtype)
        if b is not None and b.requires_grad:
            gb = g64.sum(axis=1).astype(_dtype)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (xb, w, b) if b is not None else (xb, w)
    y = _make(out, parents, _bw, "conv2d")
    return _unbatch(y, squeeze)


def _im2col(xp: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """Columns [k*k*C, B*H*W] from a padded [B,C,H+k-1,W+k-1] array."""
    B, cin = xp.shape[:2]
    if k == 1:
        return xp.transpose(1, 0, 2, 3).reshape(cin, B * H * W)
    return _im2col_cf(xp.transpose(1, 0, 2, 3), k, H, W)


def _im2col_cf(xt: np.ndarray, k: int, H: int, W: int) -> np.ndarray:
    """Same as :func:`_im2col` for channel-first [C,B,H+k-1,W+k-1] input."""
    cin, B = xt.shape[:2]
    cols = np.empty((k, k, cin, B, H, W))
    for dy in range(k):
        for dx in range(k):
            cols[dy, dx] = xt[:, :, dy:dy + H, dx:dx + W]
    return cols.reshape(k * k * cin, B * H * W)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling, stride 2. Spatial dims must be even."""
    xb, squeeze = _as_batch(x, "avg_pool2")
    B, C, H, W = xb.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {x.shape}")
    out = xb.data.astype(np.float64).reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def _bw(g):
        return (np.repeat(np.repeat(g * _dtype(0.25), 2, axis=2), 2, axis=3),)

    return _unbatch(_make(out, (xb,), _bw, "avg_pool2"), squeeze)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    xb, squeeze = _as_batch(x, "upsample2")
    B, C, H, W = xb.shape
    out = np.repeat(np.repeat(xb.data, 2, axis=2), 2, axis=3)

    def _bw(g):
        return (g.astype(np.float64).reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)).astype(_dtype),)

    return _unbatch(_make(out, (xb,), _bw, "upsample2"), squeeze)


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis (0 for [C,H,W], 1 for [B,C,H,W])."""
    if not tensors:
        raise ShapeError("concat: no tensors")
    nd = tensors[0].ndim
    if nd not in (3, 4):
        raise ShapeError(f"concat: expected 3-d or 4-d tensors, got {tensors[0].shape}")
    axis = nd - 3
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:axis] != ref[:axis] or t.shape[axis + 1:] != ref[axis + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} disagree off the channel axis")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the channel axis at every pixel."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"softmax: expected [C,H,W] or [B,C,H,W], got {x.shape}")
    axis = x.ndim - 3
    z = x.data.astype(np.float64)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    y64 = e / e.sum(axis=axis, keepdims=True)
    y = y64.astype(_dtype)

    def _bw(g):
        g64 = g.astype(np.float64)
        return ((y64 * (g64 - (g64 * y64).sum(axis=axis, keepdims=True))).astype(_dtype),)

    return _make(y, (x,), _bw, "softmax")


# ---------------------------------------------------------------- backward


class GradientMap:
    """Gradients keyed by tensor identity."""

    def __init__(self):
        self._entries: dict[int, tuple[Tensor, np.ndarray]] = {}

    def _set(self, t: Tensor, g: np.ndarray) -> None:
        if g.shape != t.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
        self._entries[t.uid] = (t, g)

    def __getitem__(self, t: Tensor) -> np.ndarray:
        try:
            return self._entries[t.uid][1]
        except KeyError:
            raise KeyError(f"no gradient recorded for {t!r}") from None

    def get(self, t: Tensor, default=None):
        entry = self._entries.get(t.uid)
        return default if entry is None else entry[1]

    def __contains__(self, t: Tensor) -> bool:
        return t.uid in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return list(self._entries.values())


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            state[node.uid] = 2
            order.append(node)
            continue
        s = state.get(node.uid)
        if s == 2:
            continue
        if s == 1:
            raise GraphError("cycle detected in computation graph")
        state[node.uid] = 1
        stack.append((node, True))
        for p in node.parents:
            ps = state.get(p.uid)
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None and p.requires_grad:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> GradientMap:
    """Reverse-mode gradients of scalar ``root`` w.r.t. every leaf requiring grad.

    Leaves also get their ``grad`` attribute set to the result.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    result = GradientMap()
    if not root.requires_grad:
        return result
    grads: dict[int, np.ndarray] = {root.uid: np.ones(root.shape, dtype=root.data.dtype)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(node.uid, None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g
            result._set(node, g)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.uid)
            grads[parent.uid] = pg if prev is None else prev + pg
    return result


def grad(fn: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    """Gradient of scalar-valued ``fn`` at ``x`` as an array."""
    xt = Tensor(x, requires_grad=True)
    return backward(fn(xt))[xt]


def finite_difference_check(
    fn: Callable[[Tensor], Tensor],
    x: np.ndarray,
    step: float = 1e-3,
    probes: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / (|central| + 1e-8)``.

    With ``probes`` set, only that many randomly chosen coordinates are
    compared (the analytic gradient is still computed in one pass).
    """
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")
    x = np.asarray(x, dtype=_dtype)
    analytic = grad(fn, x).reshape(-1)
    flat = x.reshape(-1)
    if probes is None or probes >= flat.size:
        coords = np.arange(flat.size)
    else:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=probes, replace=False)

    worst = 0.0
    for i in coords:
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(x.shape))).item()
        fm = fn(Tensor(xm.reshape(x.shape))).item()
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"function returned non-finite value at coordinate {i}")
        central = (fp - fm) / (2.0 * step)
        err = abs(float(analytic[i]) - central) / (abs(central) + 1e-8)
        worst = max(worst, err)
    return worst
