"""Dense tensors with reverse-mode gradients, on top of numpy.

Only the handful of layers the desk-scale model needs are provided. Every
differentiable op records a closure computing the vector-Jacobian product for
each parent; ``Tensor.backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-5


class NumericError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


# --------------------------------------------------------------------------
# Rng
# --------------------------------------------------------------------------

class Rng:
    """Seeded random stream.

    Identical seed and call sequence give an identical stream. ``child`` derives
    an independent substream keyed by integers, so work can be split (per image,
    per batch) without depending on call order.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in _key)
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *self.key])))

    def child(self, *key: int) -> "Rng":
        return Rng(self.seed, self.key + tuple(key))

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, x):
        return self._gen.permutation(x)

    def choice(self, a, size=None, replace=True):
        return self._gen.choice(a, size=size, replace=replace)

    def get_state(self) -> dict:
        return {"seed": self.seed, "key": list(self.key), "bit_generator": self._gen.bit_generator.state}

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state["bit_generator"]

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"], tuple(state["key"]))
        rng.set_state(state)
        return rng


# --------------------------------------------------------------------------
# Tensor
# --------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An ndarray plus an optional gradient and the op that produced it."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _vjp=None, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._vjp = _vjp
        self.name = name

    # -- basic properties
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self):
        return self.data.shape[0]

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
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
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    def zero_grad(self) -> None:
        self.grad = None

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method sugar
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else None)
    if arr.dtype.kind != "f":
        arr = arr.astype(dtype or np.float64)
    return Tensor(arr)


def _make(data, parents: Sequence[Tensor], vjp) -> Tensor:
    track = any(p.requires_grad for p in parents)
    if track:
        return Tensor(data, True, tuple(parents), vjp)
    return Tensor(data)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


# --------------------------------------------------------------------------
# Elementwise and structural ops
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data + b.data
    return _make(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return _make(out, (a,), lambda g: (g * p * a.data ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a: Tensor, lo: float) -> Tensor:
    mask = a.data >= lo
    return _make(np.where(mask, a.data, lo).astype(a.dtype), (a,), lambda g: (g * mask,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tmax(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient goes to the first arg-max."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis).squeeze(axis)

    def vjp(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (full,)

    return _make(out, (a,), vjp)


def tmin(a: Tensor, axis: int) -> Tensor:
    return neg(tmax(neg(a), axis))


def reshape(a: Tensor, shape) -> Tensor:
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)
    return _make(out, tuple(tensors),
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))))


def matmul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    out = a.data @ b.data

    def vjp(g):
        ad, bd = a.data, b.data
        if bd.ndim == 1:
            ga = np.multiply.outer(g, bd)
            gb = np.tensordot(g, ad, axes=(tuple(range(g.ndim)), tuple(range(ad.ndim - 1))))
            return _unbroadcast(ga, a.shape), gb
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp)


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x[N,C,H,W]`` with ``w[Co,C,kh,kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}")
    if stride < 1:
        raise ValueError("conv2d stride must be >= 1")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ValueError(f"conv2d kernel {w.shape} larger than padded input {x.shape} (pad={pad})")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # im2col rows ordered (n, ho, wo), columns (c, i, j)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N * Ho * Wo, C * kh * kw)
    wmat = w.data.reshape(Co, -1)
    out = cols @ wmat.T
    if b is not None:
        out += b.data
    out = np.ascontiguousarray(out.reshape(N, Ho, Wo, Co).transpose(0, 3, 1, 2))
    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, Co)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(N, Ho, Wo, C, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = (gx, gw)
        if b is not None:
            grads = grads + (gm.sum(axis=0),)
        return grads

    return _make(out, parents, vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` shaped [out, in]."""
    y = matmul(x, transpose(w))
    return y if b is None else y + b


def _check_eps(eps: float) -> None:
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = NORM_EPS) -> Tensor:
    _check_eps(eps)
    if x.shape[2] * x.shape[3] < 1:
        raise ValueError("instance_norm needs H*W >= 1")
    mu = x.mean(axis=(2, 3), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    y = xc / sqrt(var + eps)
    return _affine(y, gamma, beta)


def _affine(y: Tensor, gamma, beta) -> Tensor:
    C = y.shape[1]
    if gamma is not None:
        y = y * reshape(gamma, (1, C, 1, 1))
    if beta is not None:
        y = y + reshape(beta, (1, C, 1, 1))
    return y


@dataclass
class RunningStats:
    """Running mean/var buffers for batch norm (not differentiated)."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    momentum: float = 0.1

    @property
    def initialized(self) -> bool:
        return self.mean is not None and self.var is not None


def batch_norm(x: Tensor, stats: RunningStats, gamma: Tensor | None = None, beta: Tensor | None = None,
               mode: str = "train", eps: float = NORM_EPS) -> Tensor:
    """Batch norm over (N, H, W). Train mode updates ``stats`` in place."""
    _check_eps(eps)
    N, C, H, W = x.shape
    if mode == "train":
        if N * H * W < 2:
            raise ValueError(f"batch_norm in train mode needs N*H*W >= 2 per channel, got {N * H * W}")
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=(0, 2, 3), keepdims=True)
        y = xc / sqrt(var + eps)
        m = stats.momentum
        bmean = mu.data.reshape(C)
        bvar = var.data.reshape(C)
        if stats.initialized:
            stats.mean = (1 - m) * stats.mean + m * bmean
            stats.var = (1 - m) * stats.var + m * bvar
        else:
            # first batch: blend with the conventional (0, 1) initial buffers
            stats.mean = m * bmean
            stats.var = (1 - m) * np.ones_like(bvar) + m * bvar
    elif mode == "eval":
        if not stats.initialized:
            raise ValueError("batch_norm in eval mode with uninitialized running stats")
        mu = stats.mean.reshape(1, C, 1, 1).astype(x.dtype)
        var = stats.var.reshape(1, C, 1, 1).astype(x.dtype)
        y = (x - mu) * (1.0 / np.sqrt(var + eps))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _affine(y, gamma, beta)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects [N,C,H,W] with H,W >= 1, got {x.shape}")
    return x.mean(axis=(2, 3))


def avg_pool_to(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Average-pool ``x`` down to spatial ``size``; source dims must be integer multiples."""
    N, C, H, W = x.shape
    th, tw = size
    if th > H or tw > W:
        raise ValueError(f"cannot pool {H}x{W} up to {th}x{tw}: upsampling unsupported")
    if H % th or W % tw:
        raise ValueError(f"{H}x{W} is not an integer multiple of {th}x{tw}")
    fh, fw = H // th, W // tw
    if fh == 1 and fw == 1:
        return x
    return reshape(x, (N, C, th, fh, tw, fw)).mean(axis=(3, 5))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis. ``mask`` marks entries that are treated as -inf."""
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if mask.all(axis=-1).any():
            raise ValueError("softmax_rows: a row is fully masked")
        z = np.where(mask, -np.inf, z)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), vjp)


def log_softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``logits[B,M]`` against integer ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    lp = log_softmax(logits)
    per = -getitem(lp, (np.arange(len(labels)), labels))
    if reduction == "none":
        return per
    if reduction == "sum":
        return per.sum()
    return per.mean()


# --------------------------------------------------------------------------
# Linear algebra
# --------------------------------------------------------------------------

class CholeskyError(np.linalg.LinAlgError):
    pass


def cholesky_psd(M, jitter: float = 0.0, max_jitter: float = 1e-2) -> np.ndarray:
    """Lower Cholesky factor of ``M + jitter*I``, escalating jitter x10 on failure."""
    M = np.asarray(M.data if isinstance(M, Tensor) else M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"cholesky_psd needs a square matrix, got {M.shape}")
    if not np.allclose(M, M.T, atol=1e-8, rtol=0):
        raise ValueError("cholesky_psd needs a symmetric matrix (within 1e-8)")
    if jitter < 0:
        raise ValueError("jitter must be >= 0")
    eye = np.eye(M.shape[0])
    j = jitter
    while True:
        try:
            return np.linalg.cholesky(M + j * eye)
        except np.linalg.LinAlgError:
            nxt = max(j * 10, 1e-10) if j > 0 else 1e-10
            if j >= max_jitter:
                pivot = np.linalg.eigvalsh(M + j * eye).min()
                raise CholeskyError(
                    f"matrix still indefinite at jitter {j:g}; smallest pivot (eigenvalue) {pivot:.3e}") from None
            j = min(nxt, max_jitter)


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_param: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, tiny: float = 1e-12) -> float:
    """Norm-wise relative error; zero when both vectors vanish."""
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if den < tiny:
        return float(num)
    return float(num / den)


def numeric_grad(f: Callable[[], float], p: Tensor, h: float) -> np.ndarray:
    g = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value at probe coordinate {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return g


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5,
                      tol: float = 1e-5) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f()`` with central differences.

    ``f`` must read the parameters' ``.data`` in place on every call.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def scalar():
        return float(f().data)

    errs = [relative_error(a, numeric_grad(scalar, p, h)) for a, p in zip(analytic, params)]
    return GradCheckReport(max(errs) if errs else 0.0, tol, errs)


def check_finite(t: Tensor | np.ndarray, what: str = "tensor") -> None:
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0]
        raise NumericError(f"{what} has a non-finite value at index {tuple(int(i) for i in bad)}")


# --------------------------------------------------------------------------
# Binary dump
# --------------------------------------------------------------------------

def dump_tensor(arr, fh) -> None:
    """Little-endian: rank u32, extents u32 each, then float64 values."""
    # asarray, not ascontiguousarray: the latter turns 0-d arrays into shape (1,)
    a = np.asarray(arr.data if isinstance(arr, Tensor) else arr, dtype="<f8", order="C")
    fh.write(struct.pack("<I", a.ndim))
    fh.write(struct.pack(f"<{a.ndim}I", *a.shape))
    fh.write(a.tobytes())


def load_tensor(fh) -> np.ndarray:
    head = fh.read(4)
    if len(head) != 4:
        raise ValueError("truncated tensor header")
    (rank,) = struct.unpack("<I", head)
    if rank > 16:
        raise ValueError(f"implausible tensor rank {rank}")
    ext = fh.read(4 * rank)
    if len(ext) != 4 * rank:
        raise ValueError("truncated tensor extents")
    shape = struct.unpack(f"<{rank}I", ext)
    n = int(np.prod(shape)) if rank else 1
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ValueError(f"truncated tensor payload: expected {8 * n} bytes, got {len(buf)}")
    return np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
