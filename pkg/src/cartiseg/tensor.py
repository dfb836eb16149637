"""Dense tensors with reverse-mode automatic differentiation.

Implements exactly the operators the segmentation networks need: 2D
convolution, 2x2 max-pooling, bilinear upsampling, batch normalization,
spatial (channel) dropout, additive Gaussian noise, ReLU/sigmoid, channel
concatenation and binary cross-entropy. Every operator records a backward
closure; calling ``backward`` on a scalar loss populates ``grad`` for all
reachable tensors that require gradients.

Arrays are float32 by default; pass float64 data for gradient-check runs.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

DEFAULT_DTYPE = np.float32

# Predictions are clamped to [BCE_EPS, 1 - BCE_EPS] before the log.
BCE_EPS = 1e-7


class GraphError(ValueError):
    """Raised for malformed graphs (non-scalar loss) or invalid op inputs."""


class _GradMode(threading.local):
    # per-thread so concurrent training/inference runs stay independent
    enabled = True


_grad_mode = _GradMode()


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference fast path)."""
    prev = _grad_mode.enabled
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = prev


class Tensor:
    """N-dimensional array node in the differentiation graph.

    ``data`` holds the values, ``grad`` the accumulated gradient (same
    shape, allocated lazily during backward). Non-leaf tensors keep their
    parent nodes and a backward closure.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.ndim else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracking(*tensors: Tensor) -> bool:
    return _grad_mode.enabled and any(t.requires_grad for t in tensors)


def _make_node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    out.requires_grad = True
    out._parents = tuple(parents)
    out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a gradient back to ``shape`` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor):
    """Run one reverse pass from a scalar loss.

    Graphs are built functionally and are acyclic by construction; every
    node's parents were created before it. Gradients accumulate into
    ``grad`` of each tensor with ``requires_grad`` reachable from ``loss``.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data
    if not _tracking(a, b):
        return Tensor(out_data)

    def _bw(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _make_node(out_data, (a, b), _bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data
    if not _tracking(a, b):
        return Tensor(out_data)

    def _bw(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _make_node(out_data, (a, b), _bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data
    if not _tracking(a, b):
        return Tensor(out_data)

    def _bw(g):
        if a.requires_grad or a._parents:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad or b._parents:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _make_node(out_data, (a, b), _bw)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    if not _tracking(x):
        return Tensor(out_data)
    mask = x.data > 0

    def _bw(g):
        _accumulate(x, g * mask)

    return _make_node(out_data, (x,), _bw)


def sigmoid(x: Tensor) -> Tensor:
    # Numerically stable split over sign.
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    if not _tracking(x):
        return Tensor(out_data)

    def _bw(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _make_node(out_data, (x,), _bw)


def tensor_sum(x: Tensor) -> Tensor:
    out_data = x.data.sum()
    if not _tracking(x):
        return Tensor(out_data)

    def _bw(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape))

    return _make_node(out_data, (x,), _bw)


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [(_as_tensor(t)) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    if not _tracking(*ts):
        return Tensor(out_data)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad or t._parents:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                _accumulate(t, g[tuple(idx)])

    return _make_node(out_data, ts, _bw)


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )
    return view.reshape(n, c * kh * kw, oh * ow)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with an (out, in, kh, kw) kernel."""
    n, c, h, w = x.data.shape
    oc, wc, kh, kw = weight.data.shape
    if wc != c:
        raise GraphError(f"kernel expects {wc} input channels, input has {c}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise GraphError(f"non-positive output extent {oh}x{ow} for input {h}x{w}, kernel {kh}x{kw}")

    if kh == 1 and kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride]
        out_data = np.einsum("nchw,oc->nohw", xs, weight.data[:, :, 0, 0], optimize=True)
        if bias is not None:
            out_data += bias.data.reshape(1, oc, 1, 1)
        parents = (x, weight) if bias is None else (x, weight, bias)
        if not _tracking(*parents):
            return Tensor(out_data)

        def _bw1(g):
            if bias is not None and (bias.requires_grad or bias._parents):
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if weight.requires_grad or weight._parents:
                dw = np.einsum("nohw,nchw->oc", g, xs, optimize=True)
                _accumulate(weight, dw.reshape(weight.data.shape))
            if x.requires_grad or x._parents:
                dxs = np.einsum("nohw,oc->nchw", g, weight.data[:, :, 0, 0], optimize=True)
                if stride == 1:
                    _accumulate(x, dxs)
                else:
                    dx = np.zeros_like(x.data)
                    dx[:, :, ::stride, ::stride] = dxs
                    _accumulate(x, dx)

        return _make_node(out_data, parents, _bw1)

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)          # (n, c*kh*kw, oh*ow)
    w2 = weight.data.reshape(oc, c * kh * kw)
    out_data = np.matmul(w2, cols).reshape(n, oc, oh, ow)
    if bias is not None:
        out_data += bias.data.reshape(1, oc, 1, 1)

    parents = (x, weight) if bias is None else (x, weight, bias)
    if not _tracking(*parents):
        return Tensor(out_data)

    def _bw(g):
        g2 = g.reshape(n, oc, oh * ow)
        if bias is not None and (bias.requires_grad or bias._parents):
            _accumulate(bias, g.sum(axis=(0, 2, 3)))
        if weight.requires_grad or weight._parents:
            dw = np.tensordot(g2, cols, axes=([0, 2], [0, 2]))
            _accumulate(weight, dw.reshape(weight.data.shape))
        if x.requires_grad or x._parents:
            dcols = np.matmul(w2.T, g2).reshape(n, c, kh, kw, oh, ow)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, dxp)

    return _make_node(out_data, parents, _bw)


# ---------------------------------------------------------------------------
# pooling / upsampling


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 max-pooling; gradient routes to the first (row-major) maximum."""
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise GraphError(f"maxpool2d needs even spatial extents, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    patches = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    out_data = patches.max(axis=-1)
    if not _tracking(x):
        return Tensor(out_data)
    argmax = patches.argmax(axis=-1)

    def _bw(g):
        g4 = np.zeros_like(patches)
        np.put_along_axis(g4, argmax[..., None], g[..., None], axis=-1)
        dx = g4.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _accumulate(x, dx)

    return _make_node(out_data, (x,), _bw)


_interp_cache: dict = {}


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix, half-pixel centers, edge-clamped."""
    key = (n_out, n_in, np.dtype(dtype).name)
    m = _interp_cache.get(key)
    if m is not None:
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.floor(src).astype(np.intp)
    i0 = np.minimum(i0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    m = np.zeros((n_out, n_in), dtype=dtype)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), (1.0 - w1).astype(dtype))
    np.add.at(m, (rows, i1), w1.astype(dtype))
    _interp_cache[key] = m
    return m


def upsample_bilinear(x: Tensor, factor: int = 2) -> Tensor:
    """Double H and W by separable bilinear interpolation."""
    if factor != 2:
        raise GraphError("only factor-2 upsampling is supported")
    n, c, h, w = x.data.shape
    my = _interp_matrix(2 * h, h, x.data.dtype)
    mx = _interp_matrix(2 * w, w, x.data.dtype)
    out_data = np.einsum("ih,nchw,jw->ncij", my, x.data, mx, optimize=True)
    if not _tracking(x):
        return Tensor(out_data)

    def _bw(g):
        dx = np.einsum("ih,ncij,jw->nchw", my, g, mx, optimize=True)
        _accumulate(x, dx)

    return _make_node(out_data, (x,), _bw)


# ---------------------------------------------------------------------------
# normalization / regularization


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor,
              running_mean: np.ndarray, running_var: np.ndarray,
              training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over the (N, H, W) axes.

    Training mode normalizes by batch statistics (population variance) and
    updates the running buffers in place; inference mode uses the buffers.
    """
    n, c, h, w = x.data.shape
    axes = (0, 2, 3)
    if training:
        m = n * h * w
        if m < 2:
            raise GraphError("batchnorm training mode needs at least 2 values per channel")
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean += momentum * (mu - running_mean)
        running_var += momentum * (var - running_var)
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out_data = gamma.data.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1)

    if not _tracking(x, gamma, beta):
        return Tensor(out_data)

    def _bw(g):
        if beta.requires_grad or beta._parents:
            _accumulate(beta, g.sum(axis=axes))
        if gamma.requires_grad or gamma._parents:
            _accumulate(gamma, (g * xhat).sum(axis=axes))
        if x.requires_grad or x._parents:
            dxhat = g * gamma.data.reshape(1, c, 1, 1)
            if training:
                m = n * h * w
                s1 = dxhat.sum(axis=axes).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(1, c, 1, 1)
                dx = (inv.reshape(1, c, 1, 1) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                dx = dxhat * inv.reshape(1, c, 1, 1)
            _accumulate(x, dx)

    return _make_node(out_data, (x, gamma, beta), _bw)


def spatial_dropout(x: Tensor, p: float, training: bool,
                    rng: np.random.Generator | None = None) -> Tensor:
    """Zero whole channels with probability p, scaling survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise GraphError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise GraphError("spatial_dropout in training mode needs an rng")
    n, c = x.data.shape[:2]
    keep = (rng.random((n, c)) >= p).astype(x.data.dtype)
    scale = keep / np.asarray(1.0 - p, dtype=x.data.dtype)
    factor = scale.reshape(n, c, 1, 1)
    out_data = x.data * factor
    if not _tracking(x):
        return Tensor(out_data)

    def _bw(g):
        _accumulate(x, g * factor)

    return _make_node(out_data, (x,), _bw)


def gaussian_noise(x: Tensor, level: float, training: bool,
                   rng: np.random.Generator | None = None) -> Tensor:
    """Add zero-mean Gaussian noise with standard deviation ``level``."""
    if level < 0:
        raise GraphError(f"noise level must be non-negative, got {level}")
    if not training or level == 0.0:
        return x
    if rng is None:
        raise GraphError("gaussian_noise in training mode needs an rng")
    noise = rng.standard_normal(x.data.shape, dtype=x.data.dtype) * x.data.dtype.type(level)
    out_data = x.data + noise
    if not _tracking(x):
        return Tensor(out_data)

    def _bw(g):
        _accumulate(x, g)

    return _make_node(out_data, (x,), _bw)


# ---------------------------------------------------------------------------
# loss


def bce_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    if pred.data.shape != target.data.shape:
        raise GraphError(f"prediction shape {pred.data.shape} != target shape {target.data.shape}")
    eps = pred.data.dtype.type(BCE_EPS)
    pc = np.clip(pred.data, eps, 1.0 - eps)
    y = target.data
    n = pc.size
    loss = float(-(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / n)
    out_data = np.asarray(loss, dtype=pred.data.dtype)
    if not _tracking(pred):
        return Tensor(out_data)
    inside = (pred.data > eps) & (pred.data < 1.0 - eps)

    def _bw(g):
        dp = (pc - y) / (pc * (1.0 - pc) * n)
        dp = np.where(inside, dp, 0.0).astype(pred.data.dtype)
        _accumulate(pred, g * dp)

    return _make_node(out_data, (pred,), _bw)
