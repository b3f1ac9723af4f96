"""Reverse-mode autodiff over dense numpy arrays.

A define-by-run tape: every differentiable operation records its parents and
a vector-Jacobian closure on the result tensor. ``backward`` walks the tape
once in reverse topological order and then retires it, so a second backward
through the same graph raises instead of silently double-accumulating.
"""

from __future__ import annotations

import numpy as np

_DEFAULT_DTYPE = np.float64
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Select the scalar precision for newly created tensors (f32 or f64)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class no_grad:
    """Context manager that suppresses tape recording."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """Dense array plus optional tape node.

    ``data`` is always a numpy array in the run's default precision. Leaf
    tensors with ``requires_grad=True`` receive their gradient in ``.grad``
    after ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op", "_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._op = "leaf"
        self._done = False

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _make(data, parents, vjp, op):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out._done = False
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
            out._op = op
        else:
            out.requires_grad = False
            out._parents = ()
            out._vjp = None
            out._op = op
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff --------------------------------------------------------------

    def backward(self, params=None):
        return backward(self, params=params)

    # -- operator sugar ---------------------------------------------------------

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self, None)


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(root: Tensor, params=None):
    """Reverse sweep from a scalar root.

    Returns a dict mapping every requires_grad leaf reached by the sweep to
    its gradient array (also stored in ``.grad``). When ``params`` is given,
    the dict covers exactly those tensors, with zeros for any parameter the
    root does not depend on. The tape is retired afterwards: a second
    backward through it raises RuntimeError.
    """
    if not isinstance(root, Tensor):
        raise TypeError("backward expects a Tensor root")
    if root.data.size != 1:
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")
    if root._done:
        raise RuntimeError("backward already ran on this graph; rebuild the tape before calling again")

    # Iterative post-order topo sort (graphs can be thousands of nodes deep).
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        if node._parents and node._vjp is None and node is not root:
            raise RuntimeError("tape was already consumed by a previous backward")
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topo):
        if node._vjp is None:
            continue  # leaf; gradient stays in the dict for collection below
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
        node._vjp = None  # retire the node

    result: dict[Tensor, np.ndarray] = {}
    for node in topo:
        if node._parents == () and node.requires_grad:
            g = grads.get(id(node))
            if g is not None:
                # .grad accumulates across backward calls; the returned map
                # carries this tape's contribution only
                node.grad = g if node.grad is None else node.grad + g
                result[node] = g
        node._parents = ()
    root._done = True

    if params is not None:
        out = {}
        for p in params:
            if p in result:
                out[p] = result[p]
            else:
                out[p] = np.zeros_like(p.data)
                if p.requires_grad:
                    p.grad = out[p] if p.grad is None else p.grad
        return out
    return result


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data + b.data
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
        "add")


def sub(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data - b.data
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
        "sub")


def mul(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data * b.data
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape),
                   _unbroadcast(g * a.data, b.data.shape)),
        "mul")


def div(a, b):
    a, b = astensor(a), astensor(b)
    data = a.data / b.data
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.data.shape),
                   _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        "div")


def neg(a):
    a = astensor(a)
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p):
    a = astensor(a)
    p = float(p)
    data = a.data ** p
    return Tensor._make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "pow")


def exp(a):
    a = astensor(a)
    data = np.exp(a.data)
    return Tensor._make(data, (a,), lambda g: (g * data,), "exp")


def log(a):
    a = astensor(a)
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = astensor(a)
    data = np.sqrt(a.data)
    return Tensor._make(data, (a,), lambda g: (g * 0.5 / data,), "sqrt")


def tanh(a):
    a = astensor(a)
    data = np.tanh(a.data)
    return Tensor._make(data, (a,), lambda g: (g * (1.0 - data * data),), "tanh")


def sigmoid(a):
    """Logistic function; the branch-stable form stays inside (0,1) down to
    the underflow limit of exp."""
    a = astensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(data, (a,), lambda g: (g * data * (1.0 - data),), "sigmoid")


def softplus(a):
    a = astensor(a)
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.maximum(x, 0.0) + np.log1p(e)
    sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return Tensor._make(data, (a,), lambda g: (g * sig,), "softplus")


def sin(a):
    a = astensor(a)
    return Tensor._make(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), "sin")


def cos(a):
    a = astensor(a)
    return Tensor._make(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), "cos")


def absolute(a):
    a = astensor(a)
    return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def elu(a, alpha: float = 1.0):
    a = astensor(a)
    x = a.data
    pos = x > 0
    data = np.where(pos, x, alpha * np.expm1(np.minimum(x, 0.0)))
    return Tensor._make(data, (a,), lambda g: (g * np.where(pos, 1.0, data + alpha),), "elu")


def maximum(a, b):
    """Elementwise max; ties route the gradient to the first argument."""
    a, b = astensor(a), astensor(b)
    mask = a.data >= b.data
    data = np.where(mask, a.data, b.data)
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g * mask, a.data.shape),
                   _unbroadcast(g * ~mask, b.data.shape)),
        "maximum")


def minimum(a, b):
    a, b = astensor(a), astensor(b)
    mask = a.data <= b.data
    data = np.where(mask, a.data, b.data)
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g * mask, a.data.shape),
                   _unbroadcast(g * ~mask, b.data.shape)),
        "minimum")


def clip(a, lo: float, hi: float):
    return minimum(maximum(a, lo), hi)


def where(cond, a, b):
    """Select by a fixed boolean condition (not differentiated)."""
    a, b = astensor(a), astensor(b)
    cond = np.asarray(cond, dtype=bool)
    data = np.where(cond, a.data, b.data)
    return Tensor._make(
        data, (a, b),
        lambda g: (_unbroadcast(g * cond, a.data.shape),
                   _unbroadcast(g * ~cond, b.data.shape)),
        "where")


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b):
    """Matrix product; batched per numpy @ semantics, 1-D operands promoted."""
    a, b = astensor(a), astensor(b)
    data = a.data @ b.data
    a1, b1 = a.data.ndim == 1, b.data.ndim == 1

    def vjp(g):
        ad = a.data[None, :] if a1 else a.data
        bd = b.data[:, None] if b1 else b.data
        gm = g
        if a1:
            gm = np.expand_dims(gm, -2)
        if b1:
            gm = np.expand_dims(gm, -1)
        ga = _unbroadcast(gm @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ gm, bd.shape)
        if a1:
            ga = ga.reshape(a.data.shape)
        if b1:
            gb = gb.reshape(b.data.shape)
        return ga, gb

    return Tensor._make(data, (a, b), vjp, "matmul")


def sparse_matmul(sp, x):
    """Fixed sparse operator applied to a dense tensor: ``sp @ x``.

    ``sp`` is a scipy sparse matrix treated as a constant; only ``x`` is
    differentiated (vjp is ``sp.T @ g``).
    """
    x = astensor(x)
    spT = sp.T.tocsr()
    data = np.asarray(sp @ x.data)
    return Tensor._make(data, (x,), lambda g: (np.asarray(spT @ g),), "sparse_matmul")


# -- reductions, shaping ------------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    a = astensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return Tensor._make(np.asarray(data), (a,), vjp, "sum")


def tmean(a, axis=None, keepdims=False):
    a = astensor(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


def reshape(a, shape):
    a = astensor(a)
    old = a.data.shape
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None):
    a = astensor(a)
    data = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = np.argsort(axes)
    return Tensor._make(data, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1, ax2):
    a = astensor(a)
    return Tensor._make(np.swapaxes(a.data, ax1, ax2), (a,),
                        lambda g: (np.swapaxes(g, ax1, ax2),), "swapaxes")


def concat(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return Tensor._make(data, tuple(tensors), vjp, "concat")


def stack(tensors, axis=0):
    tensors = [astensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._make(data, tuple(tensors), vjp, "stack")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None
               for p in parts)


def getitem(a, idx):
    """Slice or fancy-index; duplicate fancy indices accumulate in the vjp."""
    a = astensor(a)
    data = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        out = np.zeros_like(a.data)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(np.asarray(data), (a,), vjp, "getitem")


def take_rows(a, indices):
    """Gather rows along the leading axis (cull/permute selection)."""
    a = astensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, indices, g)
        return (out,)

    return Tensor._make(data, (a,), vjp, "take_rows")


def softmax(a, axis=-1):
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return Tensor._make(data, (a,), vjp, "softmax")


# -- image ops -----------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (x.shape[2] - kh) // stride + 1
    ow = (x.shape[3] - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (n, c, oh, ow, kh, kw)
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * kh * kw)
    return np.ascontiguousarray(col), oh, ow


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0):
    """2-D convolution (cross-correlation), NCHW input, OIHW kernel."""
    x, w = astensor(x), astensor(w)
    b = astensor(b) if b is not None else None
    n, c, h, hw = x.data.shape
    o, ci, kh, kw = w.data.shape
    if ci != c:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {ci}")
    col, oh, ow = _im2col(x.data, kh, kw, stride, padding)
    wmat = w.data.reshape(o, c * kh * kw)
    out = col @ wmat.T  # (n, oh*ow, o)
    if b is not None:
        out = out + b.data
    data = out.transpose(0, 2, 1).reshape(n, o, oh, ow)

    def vjp(g):
        gmat = np.ascontiguousarray(g.reshape(n, o, oh * ow).transpose(0, 2, 1))
        gw = np.tensordot(gmat, col, axes=([0, 1], [0, 1])).reshape(o, c, kh, kw)
        # dX as a transposed convolution: dilate by the stride, pad, correlate
        # with the flipped kernel (keeps the heavy lifting inside matmul)
        if stride > 1:
            gd = np.zeros((n, o, (oh - 1) * stride + 1, (ow - 1) * stride + 1),
                          dtype=g.dtype)
            gd[:, :, ::stride, ::stride] = g
        else:
            gd = g
        ph, pw = kh - 1 - padding, kw - 1 - padding
        dh = h - (gd.shape[2] + 2 * ph - kh + 1)
        dw = hw - (gd.shape[3] + 2 * pw - kw + 1)
        gd = np.pad(gd, ((0, 0), (0, 0), (ph, ph + dh), (pw, pw + dw)))
        gwin = np.lib.stride_tricks.sliding_window_view(gd, (kh, kw), axis=(2, 3))
        gcol = np.ascontiguousarray(gwin.transpose(0, 2, 3, 1, 4, 5)).reshape(
            n, h * hw, o * kh * kw)
        wflip = w.data[:, :, ::-1, ::-1].reshape(o, c, kh * kw).transpose(1, 0, 2).reshape(
            c, o * kh * kw)
        gx = (gcol @ wflip.T).reshape(n, h, hw, c).transpose(0, 3, 1, 2)
        gb = gmat.sum(axis=(0, 1)) if b is not None else None
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    if b is None:
        return Tensor._make(data, parents, lambda g: vjp(g)[:2], "conv2d")
    return Tensor._make(data, parents, vjp, "conv2d")


_BAND_CACHE: dict = {}


def _band_matrix(n_in: int, kernel: tuple) -> np.ndarray:
    """(n_in - k + 1, n_in) valid-mode correlation matrix for a 1-D kernel."""
    key = (n_in, kernel)
    cached = _BAND_CACHE.get(key)
    if cached is None:
        k = len(kernel)
        n_out = n_in - k + 1
        cached = np.zeros((n_out, n_in))
        for j, val in enumerate(kernel):
            cached[np.arange(n_out), np.arange(n_out) + j] = val
        _BAND_CACHE[key] = cached
    return cached


def filter2d_separable(x, kernel_y, kernel_x):
    """Valid-mode correlation with an outer-product kernel on (..., H, W).

    Both passes are banded-matrix multiplications, so forward and vjp stay
    in BLAS. Used by SSIM (Gaussian window) and the Sobel terms.
    """
    x = astensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    a_y = _band_matrix(h, tuple(float(v) for v in kernel_y))
    a_x = _band_matrix(w, tuple(float(v) for v in kernel_x))
    data = a_y @ x.data @ a_x.T

    def vjp(g):
        return (a_y.T @ g @ a_x,)

    return Tensor._make(data, (x,), vjp, "filter2d")


_RESAMPLE_CACHE: dict = {}


def _resample_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) interpolation matrix, half-pixel centers."""
    key = (n_in, n_out, mode)
    cached = _RESAMPLE_CACHE.get(key)
    if cached is not None:
        return cached
    centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        i0 = np.clip(np.round(centers), 0, n_in - 1).astype(np.intp)
        m[rows, i0] = 1.0
    else:
        lo = np.floor(centers)
        frac = centers - lo
        i0 = np.clip(lo, 0, n_in - 1).astype(np.intp)
        i1 = np.clip(lo + 1, 0, n_in - 1).astype(np.intp)
        m[rows, i0] += 1.0 - frac
        m[rows, i1] += frac
    _RESAMPLE_CACHE[key] = m
    return m


def resample2d(x, out_h: int, out_w: int, mode: str = "bilinear"):
    """Nearest or bilinear resize of the trailing two axes (..., H, W).

    Expressed as small dense interpolation matrices applied to rows and
    columns, so both directions of the vjp are plain matmuls.
    """
    if mode not in ("nearest", "bilinear"):
        raise ValueError(f"unknown resample mode {mode!r}")
    x = astensor(x)
    h, w = x.data.shape[-2], x.data.shape[-1]
    a_h = _resample_matrix(h, out_h, mode)
    a_w = _resample_matrix(w, out_w, mode)
    data = a_h @ x.data @ a_w.T

    def vjp(g):
        return (a_h.T @ g @ a_w,)

    return Tensor._make(data, (x,), vjp, "resample2d")
