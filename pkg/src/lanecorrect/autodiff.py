"""Minimal reverse-mode autodiff engine on numpy arrays.

Provides exactly the operations the correction network needs (2D/1D
convolution, bilinear sampling and upsampling, pooling, the usual
elementwise ops) plus a bias-corrected Adam step. Parameters and
activations default to float32; gradient checks may run everything in
float64 by constructing float64 tensors.

Single training steps are single-threaded by contract; tensors are
immutable after creation except for gradient accumulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_ALLOWED_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in _ALLOWED_DTYPES:
            dtype = data.dtype
        else:
            dtype = np.float32
    return np.ascontiguousarray(data, dtype=dtype)


class Tensor:
    """N-dimensional real array with optional gradient tracking.

    ``grad`` is populated by ``backward()`` on every tensor in the graph
    that has ``requires_grad``; repeated ``backward()`` calls without
    ``zero_grad()`` accumulate.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction used by ops ------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: tuple["Tensor", ...], backward_fn):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- reverse pass ----------------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad tensor reachable from
        this scalar. Raises on non-scalar tensors."""
        if self.data.size != 1:
            raise ValueError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _promote(other, self.dtype))

    def __radd__(self, other):
        return add(_promote(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _promote(other, self.dtype))

    def __rsub__(self, other):
        return sub(_promote(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _promote(other, self.dtype))

    def __rmul__(self, other):
        return mul(_promote(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _promote(-1.0, self.dtype))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or not isinstance(shape[0], (tuple, list)) else shape[0])

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes if axes else None)


def _promote(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), requires_grad=False, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# --------------------------------------------------------------------------
# elementwise and structural ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return Tensor._result(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return Tensor._result(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return Tensor._result(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * (x.data > 0),)

    return Tensor._result(out, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    out = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return Tensor._result(out, (x,), backward)


def clamp_min(x: Tensor, floor: float) -> Tensor:
    out = np.maximum(x.data, floor)

    def backward(g):
        return (g * (x.data > floor),)

    return Tensor._result(out, (x,), backward)


def absolute(x: Tensor) -> Tensor:
    out = np.abs(x.data)

    def backward(g):
        return (g * np.sign(x.data),)

    return Tensor._result(out, (x,), backward)


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise 0.5*x^2 for |x| < 1, |x| - 0.5 otherwise (C1 everywhere)."""
    a = np.abs(x.data)
    quad = a < 1.0
    out = np.where(quad, 0.5 * x.data * x.data, a - 0.5)

    def backward(g):
        return (g * np.where(quad, x.data, np.sign(x.data)),)

    return Tensor._result(out, (x,), backward)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False) * np.ones_like(x.data),)

    return Tensor._result(out, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.data.shape[axis]
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / n * np.ones_like(x.data),)

    return Tensor._result(out, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(x.data.shape),)

    return Tensor._result(out, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.ascontiguousarray(x.data.transpose(axes))
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return Tensor._result(out, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat of an empty tensor list")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col2d(xp: np.ndarray, kh: int, kw: int, stride: int):
    # xp: (C, Hp, Wp) already padded
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    c, ho, wo = win.shape[0], win.shape[1], win.shape[2]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols), ho, wo


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct 2D cross-correlation of a (C_in, H, W) map with a
    (C_out, C_in, kh, kw) kernel."""
    if x.ndim != 3 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects (C,H,W) input and (Co,Ci,kh,kw) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    c_in, h, w = x.shape
    c_out, ck, kh, kw = kernel.shape
    if ck != c_in:
        raise ValueError(f"kernel expects {ck} input channels, input has {c_in}")
    if kh < 1 or kw < 1:
        raise ValueError("kernel extents must be >= 1")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("padded input smaller than kernel support")

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols, ho, wo = _im2col2d(xp, kh, kw, stride)
    out = (kernel.data.reshape(c_out, -1) @ cols).reshape(c_out, ho, wo)

    def backward(g):
        gk = gx = None
        gm = g.reshape(c_out, -1)
        if kernel.requires_grad:
            gk = (gm @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            hp, wp = h + 2 * padding, w + 2 * padding
            # dilate by stride, pad by kernel-1 plus the stride remainder,
            # then correlate with the spatially flipped, channel-swapped kernel
            gd = np.zeros((c_out, (ho - 1) * stride + 1, (wo - 1) * stride + 1), dtype=g.dtype)
            gd[:, ::stride, ::stride] = g
            rh = (hp - kh) - (ho - 1) * stride
            rw = (wp - kw) - (wo - 1) * stride
            gp = np.pad(gd, ((0, 0), (kh - 1, kh - 1 + rh), (kw - 1, kw - 1 + rw)))
            kflip = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            cols_b, hb, wb = _im2col2d(gp, kh, kw, 1)
            gx_full = (kflip.reshape(c_in, -1) @ cols_b).reshape(c_in, hb, wb)
            gx = gx_full[:, padding:padding + h, padding:padding + w] if padding else gx_full
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return Tensor._result(out, (x, kernel), backward)


def conv1d(x: Tensor, kernel: Tensor, padding: int = 0) -> Tensor:
    """Direct 1D cross-correlation of a (C_in, L) sequence with a
    (C_out, C_in, k) kernel, k in {1, 3}."""
    if x.ndim != 2 or kernel.ndim != 3:
        raise ValueError(f"conv1d expects (C,L) input and (Co,Ci,k) kernel, "
                         f"got {x.shape} and {kernel.shape}")
    c_in, length = x.shape
    c_out, ck, k = kernel.shape
    if ck != c_in:
        raise ValueError(f"kernel expects {ck} input channels, input has {c_in}")
    if k not in (1, 3):
        raise ValueError(f"kernel width must be 1 or 3, got {k}")
    if length + 2 * padding < k:
        raise ValueError("padded input smaller than kernel support")

    xp = np.pad(x.data, ((0, 0), (padding, padding))) if padding else x.data
    lo = xp.shape[1] - k + 1
    win = sliding_window_view(xp, k, axis=1)  # (C, Lo, k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1).reshape(c_in * k, lo))
    out = (kernel.data.reshape(c_out, -1) @ cols).reshape(c_out, lo)

    def backward(g):
        gk = gx = None
        if kernel.requires_grad:
            gk = (g.reshape(c_out, -1) @ cols.T).reshape(kernel.shape)
        if x.requires_grad:
            gp = np.pad(g, ((0, 0), (k - 1, k - 1)))
            kflip = kernel.data[:, :, ::-1].transpose(1, 0, 2)
            winb = sliding_window_view(gp, k, axis=1)
            colsb = np.ascontiguousarray(winb.transpose(0, 2, 1).reshape(c_out * k, -1))
            gx_full = (kflip.reshape(c_in, -1) @ colsb).reshape(c_in, -1)
            gx = gx_full[:, padding:padding + length] if padding else gx_full
            gx = np.ascontiguousarray(gx)
        return gx, gk

    return Tensor._result(out, (x, kernel), backward)


# --------------------------------------------------------------------------
# sampling, upsampling, pooling
# --------------------------------------------------------------------------

def bilinear_sample_many(fm: Tensor, xs: np.ndarray, ys: np.ndarray) -> Tensor:
    """Bilinear samples of a (C, H, W) map at N (x, y) positions -> (C, N).

    Positions must already lie in [0, W-1] x [0, H-1]; clamping is the
    caller's job. Gradient flows to the four contributing cells of each
    sample."""
    if fm.ndim != 3:
        raise ValueError(f"expected (C,H,W) feature map, got {fm.shape}")
    c, h, w = fm.shape
    xs = np.asarray(xs, dtype=np.float64).reshape(-1)
    ys = np.asarray(ys, dtype=np.float64).reshape(-1)
    if xs.shape != ys.shape:
        raise ValueError("xs and ys must have matching lengths")
    if xs.size and (xs.min() < 0 or xs.max() > w - 1 or ys.min() < 0 or ys.max() > h - 1):
        raise ValueError("sample position outside the feature map")

    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0).astype(fm.data.dtype)
    fy = (ys - y0).astype(fm.data.dtype)

    w00 = (1 - fy) * (1 - fx)
    w01 = (1 - fy) * fx
    w10 = fy * (1 - fx)
    w11 = fy * fx
    d = fm.data
    out = (d[:, y0, x0] * w00 + d[:, y0, x1] * w01
           + d[:, y1, x0] * w10 + d[:, y1, x1] * w11)

    def backward(g):
        gd = np.zeros((c, h * w), dtype=g.dtype)
        for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
            np.add.at(gd, (slice(None), yy * w + xx), g * ww)
        return (gd.reshape(c, h, w),)

    return Tensor._result(np.ascontiguousarray(out), (fm,), backward)


def bilinear_sample(fm: Tensor, point: tuple[float, float]) -> Tensor:
    """Bilinear sample of a (C, H, W) map at one (x, y) position -> (C,)."""
    x, y = point
    out = bilinear_sample_many(fm, np.array([x]), np.array([y]))
    return reshape(out, (fm.shape[0],))


_LERP_CACHE: dict[tuple[int, int, str], np.ndarray] = {}


def _lerp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # corner-aligned pixel-center convention: output index o samples the
    # source at o * (n_in - 1) / (n_out - 1), so corner centers map to
    # corner centers exactly
    key = (n_in, n_out, np.dtype(dtype).str)
    cached = _LERP_CACHE.get(key)
    if cached is not None:
        return cached
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
    else:
        src = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(src).astype(np.int64), 0, n_in - 2)
        f = src - i0
        m[np.arange(n_out), i0] = 1.0 - f
        m[np.arange(n_out), i0 + 1] = f
    _LERP_CACHE[key] = m
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Upsample a (C, H, W) map by an integer factor with bilinear
    interpolation (corner-aligned pixel centers)."""
    if x.ndim != 3:
        raise ValueError(f"expected (C,H,W), got {x.shape}")
    if factor < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = x.shape
    ry = _lerp_matrix(h, factor * h, x.data.dtype)
    rx = _lerp_matrix(w, factor * w, x.data.dtype)
    out = (ry @ x.data) @ rx.T

    def backward(g):
        return (np.ascontiguousarray((ry.T @ g) @ rx),)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward)


def pool_over_positions(x: Tensor, mode: str) -> Tensor:
    """Reduce a (K, M) tensor over the M axis to (K, 1).

    ``mode='max'`` routes the gradient to the first maximal index per row;
    ``mode='mean'`` distributes it as 1/M."""
    if x.ndim != 2:
        raise ValueError(f"expected (K,M), got {x.shape}")
    k, m = x.shape
    if m < 1:
        raise ValueError("position axis must be non-empty")
    if mode == "max":
        idx = np.argmax(x.data, axis=1)
        out = x.data[np.arange(k), idx][:, None]

        def backward(g):
            gx = np.zeros_like(x.data)
            gx[np.arange(k), idx] = g[:, 0]
            return (gx,)

    elif mode == "mean":
        out = x.data.mean(axis=1, keepdims=True)

        def backward(g):
            return (np.broadcast_to(g / m, x.data.shape).astype(x.data.dtype, copy=False) * np.ones_like(x.data),)

    else:
        raise ValueError(f"unknown pooling mode {mode!r}")

    return Tensor._result(np.ascontiguousarray(out), (x,), backward)


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus the shared step counter."""

    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **kwargs) -> "AdamState":
        state = cls(**kwargs)
        for name, p in params.items():
            state.first_moment[name] = np.zeros_like(p.data)
            state.second_moment[name] = np.zeros_like(p.data)
        return state


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on ``params``."""
    state.step_count += 1
    t = state.step_count
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter "
                             f"'{name}' of shape {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)
    return params, state


def zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
