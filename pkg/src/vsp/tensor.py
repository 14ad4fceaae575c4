"""Dense tensor core with reverse-mode autodiff.

Carries exactly the forward operators the projector needs (valid convolution,
adaptive average pooling, center cropping, linear maps, layer norm, row
softmax, concatenation, GELU and small arithmetic) together with their
gradients. Values are numpy arrays in float32 or float64; tensors are
immutable once built, and any NaN/Inf produced by an operation raises
instead of propagating.
"""

import contextlib
import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .rng import StreamRng


class TensorError(ValueError):
    """Shape or precondition violation."""


class NumericsError(ArithmeticError):
    """A non-finite value surfaced where only finite values are legal."""


_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(arr, context):
    if arr.size and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {context}")


class Tensor:
    """Immutable dense array node in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_backward", "_prev")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.array(data, dtype=dtype, copy=True)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        arr.setflags(write=False)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._backward = None
        self._prev = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise TensorError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}{tag})"

    # arithmetic sugar; heavy operators live as module functions below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def backward(self):
        """Reverse-mode pass from this scalar; fills .grad on reachable leaves."""
        if self.data.size != 1:
            raise TensorError("backward() requires a scalar loss")
        order = _topo_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward()


class Parameter(Tensor):
    """Named trainable leaf."""

    def __init__(self, data, name, dtype=None):
        if not name:
            raise TensorError("parameters must be named")
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)

    def with_data(self, data):
        """Fresh parameter with the same name and new values."""
        return Parameter(data, name=self.name, dtype=self.data.dtype)


def _own(arr):
    """Wrap a freshly computed array without copying."""
    t = Tensor.__new__(Tensor)
    arr.setflags(write=False)
    t.data = arr
    t.requires_grad = False
    t.grad = None
    t.name = None
    t._backward = None
    t._prev = ()
    return t


def _node(arr, prev, context):
    """Result node over `prev` inputs, with finiteness enforced."""
    _check_finite(arr, context)
    out = _own(arr)
    if _grad_enabled and any(p.requires_grad for p in prev):
        out.requires_grad = True
        out._prev = tuple(prev)
    return out


def _acc(node, g):
    if node.grad is None:
        node.grad = np.array(g)
    else:
        node.grad += g


def _topo_order(root):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in seen:
                stack.append((child, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_dtype(a, b, op):
    if a.data.dtype != b.data.dtype:
        raise TensorError(
            f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}"
        )


# ---------------------------------------------------------------------------
# elementwise and reduction operators


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype(a, b, "add")
    if a.shape != b.shape:
        raise TensorError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bk():
            if a.requires_grad:
                _acc(a, out.grad)
            if b.requires_grad:
                _acc(b, out.grad)
        out._backward = _bk
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype(a, b, "sub")
    if a.shape != b.shape:
        raise TensorError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bk():
            if a.requires_grad:
                _acc(a, out.grad)
            if b.requires_grad:
                _acc(b, -out.grad)
        out._backward = _bk
    return out


def mul(a, b):
    if isinstance(b, (int, float)):
        return scale(a, b)
    a, b = _as_tensor(a), _as_tensor(b)
    _same_dtype(a, b, "mul")
    if a.shape != b.shape:
        raise TensorError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bk():
            if a.requires_grad:
                _acc(a, out.grad * b.data)
            if b.requires_grad:
                _acc(b, out.grad * a.data)
        out._backward = _bk
    return out


def scale(a, c):
    """Multiply by a python scalar, preserving dtype."""
    c = float(c)
    out = _node(a.data * a.data.dtype.type(c), (a,), "scale")
    if out.requires_grad:
        def _bk():
            _acc(a, out.grad * c)
        out._backward = _bk
    return out


def sum_all(a):
    out = _node(a.data.sum(dtype=a.data.dtype).reshape(()), (a,), "sum")
    if out.requires_grad:
        def _bk():
            _acc(a, np.broadcast_to(out.grad, a.shape))
        out._backward = _bk
    return out


def mean_all(a):
    if a.size == 0:
        raise TensorError("mean of empty tensor")
    n = a.size
    out = _node((a.data.sum(dtype=a.data.dtype) / n).reshape(()), (a,), "mean")
    if out.requires_grad:
        def _bk():
            _acc(a, np.broadcast_to(out.grad / n, a.shape))
        out._backward = _bk
    return out


def reshape(a, shape):
    arr = a.data.reshape(shape)
    out = _node(np.ascontiguousarray(arr), (a,), "reshape")
    if out.requires_grad:
        def _bk():
            _acc(a, out.grad.reshape(a.shape))
        out._backward = _bk
    return out


def transpose(a):
    if a.ndim != 2:
        raise TensorError("transpose expects a 2-D tensor")
    out = _node(np.ascontiguousarray(a.data.T), (a,), "transpose")
    if out.requires_grad:
        def _bk():
            _acc(a, out.grad.T)
        out._backward = _bk
    return out


def matmul(a, b):
    _same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise TensorError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bk():
            if a.requires_grad:
                _acc(a, out.grad @ b.data.T)
            if b.requires_grad:
                _acc(b, a.data.T @ out.grad)
        out._backward = _bk
    return out


def log(a):
    """Natural log; rejects non-positive inputs instead of returning -inf."""
    if a.size and a.data.min() <= 0.0:
        raise NumericsError("log of non-positive value")
    out = _node(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bk():
            _acc(a, out.grad / a.data)
        out._backward = _bk
    return out


def gelu(a):
    """Exact (erf-based) GELU."""
    x = a.data
    inner = erf(x / np.sqrt(x.dtype.type(2.0))).astype(x.dtype, copy=False)
    out = _node(0.5 * x * (1.0 + inner), (a,), "gelu")
    if out.requires_grad:
        def _bk():
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            _acc(a, out.grad * (0.5 * (1.0 + inner) + x * pdf))
        out._backward = _bk
    return out


# ---------------------------------------------------------------------------
# structured operators


def linear(x, w, b=None):
    """y = x @ w + b for x of shape (n, d_in), w of shape (d_in, d_out)."""
    _same_dtype(x, w, "linear")
    if x.ndim != 2 or w.ndim != 2:
        raise TensorError("linear expects 2-D input and weight")
    if x.shape[1] != w.shape[0]:
        raise TensorError(
            f"linear: input dim {x.shape[1]} != weight dim {w.shape[0]}"
        )
    y = x.data @ w.data
    prev = [x, w]
    if b is not None:
        _same_dtype(x, b, "linear")
        if b.shape != (w.shape[1],):
            raise TensorError(f"linear: bias shape {b.shape} != ({w.shape[1]},)")
        y = y + b.data
        prev.append(b)
    out = _node(y, prev, "linear")
    if out.requires_grad:
        def _bk():
            g = out.grad
            if x.requires_grad:
                _acc(x, g @ w.data.T)
            if w.requires_grad:
                _acc(w, x.data.T @ g)
            if b is not None and b.requires_grad:
                _acc(b, g.sum(axis=0))
        out._backward = _bk
    return out


def layer_norm(x, gamma, beta, eps=1e-5):
    """Row-wise normalization to zero mean / unit variance, then affine."""
    if x.ndim != 2:
        raise TensorError("layer_norm expects a 2-D tensor")
    d = x.shape[1]
    if d < 2:
        raise TensorError("layer_norm needs at least 2 features per row")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise TensorError("layer_norm: gamma/beta must have one value per feature")
    _same_dtype(x, gamma, "layer_norm")
    _same_dtype(x, beta, "layer_norm")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = centered * inv_std
    out = _node(xhat * gamma.data + beta.data, (x, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bk():
            g = out.grad
            if gamma.requires_grad:
                _acc(gamma, (g * xhat).sum(axis=0))
            if beta.requires_grad:
                _acc(beta, g.sum(axis=0))
            if x.requires_grad:
                gx = g * gamma.data
                m1 = gx.mean(axis=1, keepdims=True)
                m2 = (gx * xhat).mean(axis=1, keepdims=True)
                _acc(x, inv_std * (gx - m1 - xhat * m2))
        out._backward = _bk
    return out


def softmax_rows(m):
    """Row softmax with max subtraction for overflow safety."""
    if m.ndim != 2:
        raise TensorError("softmax_rows expects a 2-D tensor")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = _node(y, (m,), "softmax_rows")
    if out.requires_grad:
        def _bk():
            g = out.grad
            dot = (g * y).sum(axis=1, keepdims=True)
            _acc(m, y * (g - dot))
        out._backward = _bk
    return out


def concat(parts, axis):
    """Concatenate tensors along `axis`; all other extents must agree."""
    if not parts:
        raise TensorError("concat of zero tensors")
    ndim = parts[0].ndim
    if not -ndim <= axis < ndim:
        raise TensorError(f"concat: axis {axis} out of range for {ndim}-D parts")
    axis = axis % ndim
    ref = parts[0]
    for p in parts[1:]:
        _same_dtype(ref, p, "concat")
        if p.ndim != ndim:
            raise TensorError("concat: rank mismatch")
        for ax in range(ndim):
            if ax != axis and p.shape[ax] != ref.shape[ax]:
                raise TensorError(
                    f"concat: shape mismatch on axis {ax}: "
                    f"{p.shape} vs {ref.shape}"
                )
    out = _node(
        np.concatenate([p.data for p in parts], axis=axis), parts, "concat"
    )
    if out.requires_grad:
        extents = [p.shape[axis] for p in parts]
        def _bk():
            offset = 0
            for p, ext in zip(parts, extents):
                if p.requires_grad:
                    idx = [slice(None)] * ndim
                    idx[axis] = slice(offset, offset + ext)
                    _acc(p, out.grad[tuple(idx)])
                offset += ext
        out._backward = _bk
    return out


def conv2d_valid(x, kernel, bias=None, stride=1):
    """Valid (no padding) 2-D convolution over an HxWxC grid.

    `kernel` has shape (K, K, C_in, C_out). Output position (i, j, o) is the
    dot product of the kernel with the input window at (i*stride, j*stride)
    plus the bias. The stride must tile the input exactly; configurations
    that would need padding are rejected rather than padded.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise TensorError("conv2d_valid expects HxWxC input and KxKxCixCo kernel")
    _same_dtype(x, kernel, "conv2d_valid")
    h, w, c_in = x.shape
    k1, k2, kc_in, c_out = kernel.shape
    if k1 != k2:
        raise TensorError("conv2d_valid: kernel must be square")
    k = k1
    if kc_in != c_in:
        raise TensorError(
            f"conv2d_valid: kernel channels {kc_in} != input channels {c_in}"
        )
    if k > h or k > w:
        raise TensorError(f"conv2d_valid: kernel {k} larger than input {h}x{w}")
    stride = int(stride)
    if stride < 1:
        raise TensorError("conv2d_valid: stride must be positive")
    if (h - k) % stride or (w - k) % stride:
        raise TensorError(
            f"conv2d_valid: stride {stride} does not tile {h}x{w} with kernel {k}"
        )
    h_out = (h - k) // stride + 1
    w_out = (w - k) // stride + 1

    # im2col: gather windows as rows, reduce to one matmul
    windows = sliding_window_view(x.data, (k, k), axis=(0, 1))
    windows = windows[::stride, ::stride]        # (h_out, w_out, C, k, k)
    cols = np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2))
    cols = cols.reshape(h_out * w_out, k * k * c_in)
    km = kernel.data.reshape(k * k * c_in, c_out)
    y = cols @ km
    prev = [x, kernel]
    if bias is not None:
        _same_dtype(x, bias, "conv2d_valid")
        if bias.shape != (c_out,):
            raise TensorError(f"conv2d_valid: bias shape {bias.shape} != ({c_out},)")
        y = y + bias.data
        prev.append(bias)
    out = _node(y.reshape(h_out, w_out, c_out), prev, "conv2d_valid")
    if out.requires_grad:
        def _bk():
            g = out.grad.reshape(h_out * w_out, c_out)
            if kernel.requires_grad:
                _acc(kernel, (cols.T @ g).reshape(kernel.shape))
            if bias is not None and bias.requires_grad:
                _acc(bias, g.sum(axis=0))
            if x.requires_grad:
                dcols = (g @ km.T).reshape(h_out, w_out, k, k, c_in)
                dx = np.zeros_like(x.data)
                for u in range(k):
                    for v in range(k):
                        dx[u:u + stride * h_out:stride,
                           v:v + stride * w_out:stride] += dcols[:, :, u, v]
                _acc(x, dx)
        out._backward = _bk
    return out


def pool_window(i, out_size, in_size):
    """[start, stop) input range feeding output cell i of adaptive pooling."""
    start = (i * in_size) // out_size
    stop = -((-(i + 1) * in_size) // out_size)  # ceil
    return start, stop


def adaptive_avg_pool2d(x, out_size):
    """Average-pool a square HxHxC grid to out_size x out_size x C.

    Cell (i, j) averages input rows [floor(i*H/S), ceil((i+1)*H/S)) and the
    matching columns; windows overlap when S does not divide H. out_size == H
    reproduces the input exactly and out_size == 1 is the global mean.
    """
    if x.ndim != 3:
        raise TensorError("adaptive_avg_pool2d expects an HxWxC tensor")
    h, w, c = x.shape
    if h != w:
        raise TensorError(f"adaptive_avg_pool2d: input must be square, got {h}x{w}")
    s = int(out_size)
    if s < 1:
        raise TensorError("adaptive_avg_pool2d: output size must be positive")
    if s > h:
        raise TensorError(f"adaptive_avg_pool2d: output size {s} exceeds input {h}")
    bounds = [pool_window(i, s, h) for i in range(s)]
    y = np.empty((s, s, c), dtype=x.data.dtype)
    for i, (r0, r1) in enumerate(bounds):
        for j, (c0, c1) in enumerate(bounds):
            y[i, j] = x.data[r0:r1, c0:c1].mean(axis=(0, 1), dtype=x.data.dtype)
    out = _node(y, (x,), "adaptive_avg_pool2d")
    if out.requires_grad:
        def _bk():
            dx = np.zeros_like(x.data)
            for i, (r0, r1) in enumerate(bounds):
                for j, (c0, c1) in enumerate(bounds):
                    count = (r1 - r0) * (c1 - c0)
                    dx[r0:r1, c0:c1] += out.grad[i, j] / count
            _acc(x, dx)
        out._backward = _bk
    return out


def center_crop(x, size):
    """Central size x size slice of a square grid; margins must be symmetric."""
    if x.ndim != 3:
        raise TensorError("center_crop expects an HxWxC tensor")
    h, w, _ = x.shape
    if h != w:
        raise TensorError(f"center_crop: input must be square, got {h}x{w}")
    s = int(size)
    if s < 1:
        raise TensorError("center_crop: size must be positive")
    if s > h:
        raise TensorError(f"center_crop: size {s} exceeds input {h}")
    if (h - s) % 2:
        raise TensorError(f"center_crop: margin {h - s} is odd, crop not centered")
    m = (h - s) // 2
    out = _node(x.data[m:m + s, m:m + s].copy(), (x,), "center_crop")
    if out.requires_grad:
        def _bk():
            dx = np.zeros_like(x.data)
            dx[m:m + s, m:m + s] = out.grad
            _acc(x, dx)
        out._backward = _bk
    return out


# ---------------------------------------------------------------------------
# gradients as a map, and the finite-difference oracle


def gradients(loss, params):
    """Gradient of a scalar loss for every parameter in `params`.

    Parameters not reachable from the loss get zero gradients of matching
    shape. Returns {name: ndarray}.
    """
    loss.backward()
    out = {}
    for name, p in params.items():
        out[name] = p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
    return out


def finite_diff_check(f, params, step=1e-5, samples_per_param=None, seed=0):
    """Max relative error between analytic and central-difference gradients.

    `f` maps a {name: Parameter} dict to a scalar Tensor and is re-evaluated
    at perturbed points. With `samples_per_param` set, that many coordinates
    of each parameter are probed (chosen from a seeded stream); otherwise
    every coordinate is probed. Relative error for one coordinate is
    |analytic - cd| / max(|analytic|, |cd|, 1e-8).
    """
    if step <= 0:
        raise TensorError("finite_diff_check: step must be positive")
    loss = f(params)
    if loss.size != 1:
        raise TensorError("finite_diff_check: f must return a scalar")
    analytic = gradients(loss, params)
    rng = StreamRng(seed)

    def probe(p_dict):
        with no_grad():
            value = f(p_dict).item()
        if not math.isfinite(value):
            raise NumericsError("non-finite loss at finite-difference probe point")
        return value

    worst = 0.0
    for name, p in params.items():
        n = p.size
        if n == 0:
            continue
        if samples_per_param is None or samples_per_param >= n:
            coords = range(n)
        else:
            u = rng.uniform(f"fd/{name}", samples_per_param)
            coords = np.unique((u * n).astype(int))
        flat = p.data.reshape(-1)
        for idx in coords:
            base = flat[idx]
            plus = p.data.copy().reshape(-1)
            plus[idx] = base + step
            minus = p.data.copy().reshape(-1)
            minus[idx] = base - step
            trial = dict(params)
            trial[name] = p.with_data(plus.reshape(p.shape))
            f_plus = probe(trial)
            trial[name] = p.with_data(minus.reshape(p.shape))
            f_minus = probe(trial)
            cd = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic[name].reshape(-1)[idx])
            rel = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
            worst = max(worst, rel)
    return worst
