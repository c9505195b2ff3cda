"""Dense tensors with reverse-mode automatic differentiation.

Only the operations the gait pipeline actually needs are implemented:
2D cross-correlation, LeakyReLU, max pooling, affine maps, a handful of
reductions and shape ops, and a generic escape hatch (`Tensor.from_op`)
that lets other modules define their own differentiable primitives.

Storage is float32 by default. Float64 exists so gradient checks have
numerical headroom, not as a performance mode.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32

_STATE = threading.local()


def _grad_enabled() -> bool:
    return getattr(_STATE, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph recording (inference mode).

    The flag is thread-local, so models running on other threads are
    unaffected.
    """

    def __enter__(self):
        self._prev = _grad_enabled()
        _STATE.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _STATE.grad_enabled = self._prev
        return False


def _as_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _accumulate(t: "Tensor", g: np.ndarray, own: bool = False) -> None:
    """Add g into t's gradient buffer.

    `own=True` promises g is freshly allocated and unaliased, letting the
    first accumulation adopt it without a copy.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        if own and g.dtype == t.data.dtype and g.shape == t.data.shape:
            t.grad = g
        else:
            t.grad = np.array(g, dtype=t.data.dtype,
                              copy=True).reshape(t.data.shape)
    else:
        t.grad += g


class Tensor:
    """A dense nd-array with an optional gradient buffer.

    Forward ops record a backward closure; calling :meth:`backward` on a
    scalar result walks the recorded graph in reverse topological order
    and accumulates gradients into ``.grad`` of every reachable tensor
    with ``requires_grad=True``. Gradients accumulate across calls; the
    caller zeroes them between optimization steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bw")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._bw: Callable[[np.ndarray], None] | None = None

    @staticmethod
    def from_op(data: np.ndarray, parents: Sequence["Tensor"],
                backward: Callable[[np.ndarray], None]) -> "Tensor":
        """Wrap an op result, recording `backward` if any parent needs grads.

        `backward` receives the gradient w.r.t. the result and must
        accumulate into the parents via :func:`accumulate_grad`.
        """
        record = _grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=record, dtype=data.dtype)
        if record:
            out._parents = tuple(parents)
            out._bw = backward
        return out

    # ---- basic introspection -------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # ---- autodiff -------------------------------------------------------

    def backward(self) -> None:
        """Backpropagate from a scalar result through the recorded graph.

        Leaf tensors (parameters, inputs) accumulate gradients across
        calls; intermediate results are transient and reset per pass.
        """
        if self.size != 1:
            raise ValueError(
                f"backward() requires a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        for node in topo:
            if node._bw is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    # ---- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, mul(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division not supported")
        return div_scalar(self, other)

    def sum(self) -> "Tensor":
        return t_sum(self)

    def mean(self) -> "Tensor":
        return t_mean(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def narrow(self, axis: int, start: int, length: int) -> "Tensor":
        return narrow(self, axis, start, length)


class Parameter(Tensor):
    """A named trainable tensor; always requires gradients."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


accumulate_grad = _accumulate


# ---- elementwise ops ------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data + s

        def bw(g):
            _accumulate(a, g)

        return Tensor.from_op(out, (a,), bw)
    _check_same_shape(a, b, "add")
    out = a.data + b.data

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Tensor.from_op(out, (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        s = float(b)
        out = a.data * s

        def bw(g):
            _accumulate(a, g * s)

        return Tensor.from_op(out, (a,), bw)
    _check_same_shape(a, b, "mul")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bw(g):
        _accumulate(a, g * bd)
        _accumulate(b, g * ad)

    return Tensor.from_op(out, (a, b), bw)


def div_scalar(a: Tensor, s) -> Tensor:
    s = float(s)
    out = a.data / s

    def bw(g):
        _accumulate(a, g / s)

    return Tensor.from_op(out, (a,), bw)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """Elementwise max(x, slope*x). The derivative at 0 is `slope`."""
    if slope < 0:
        raise ValueError(f"leaky_relu: slope must be >= 0, got {slope}")
    xd = x.data
    out = _kernels.leaky_forward(xd, slope)

    def bw(g):
        _accumulate(x, _kernels.leaky_backward(xd, np.ascontiguousarray(g),
                                               slope), own=True)

    return Tensor.from_op(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def sqrt(x: Tensor) -> Tensor:
    """Elementwise square root. Gradient at exactly 0 is defined as 0."""
    xd = x.data
    if np.any(xd < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(xd)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        _accumulate(x, np.where(out > 0, g * 0.5 / safe, 0.0).astype(xd.dtype))

    return Tensor.from_op(out, (x,), bw)


# ---- reductions and shape ops ----------------------------------------------


def t_sum(x: Tensor) -> Tensor:
    out = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bw(g):
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.data.dtype))

    return Tensor.from_op(out, (x,), bw)


def t_mean(x: Tensor) -> Tensor:
    n = x.size
    out = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bw(g):
        _accumulate(x, np.broadcast_to(g / n, x.shape).astype(x.data.dtype))

    return Tensor.from_op(out, (x,), bw)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = x.data.reshape(shape)
    orig = x.shape

    def bw(g):
        _accumulate(x, g.reshape(orig))

    return Tensor.from_op(out, (x,), bw)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        _accumulate(x, full)

    return Tensor.from_op(out, (x,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Stack same-shape tensors along a new axis."""
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            _accumulate(t, np.take(g, i, axis=axis))

    return Tensor.from_op(out, tuple(tensors), bw)


def gather_pairs(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """out[k] = x[rows[k], cols[k]] for a 2D tensor; scatter-add backward."""
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    out = x.data[rows, cols]

    def bw(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), g)
        _accumulate(x, dx)

    return Tensor.from_op(out, (x,), bw)


# ---- neural-net ops ---------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map: x[n, d_in] @ weight[d_out, d_in].T (+ bias)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ValueError(
            f"linear: expected 2D input and weight, got {xd.shape} and {wd.shape}")
    if xd.shape[1] != wd.shape[1]:
        raise ValueError(
            f"linear: input features {xd.shape[1]} do not match weight "
            f"features {wd.shape[1]} (input {xd.shape}, weight {wd.shape})")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        _accumulate(x, g @ wd)
        _accumulate(weight, g.T @ xd)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return Tensor.from_op(out, parents, bw)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Batched 2D cross-correlation with zero padding.

    x: [n, c_in, h, w]; weight: [c_out, c_in, kh, kw]; bias: [c_out].
    Output extents follow h' = (h + 2p - kh) // stride + 1. No kernel
    flip is applied (cross-correlation convention).
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4:
        raise ValueError(f"conv2d: expected 4D input, got {xd.shape}")
    if wd.ndim != 4:
        raise ValueError(f"conv2d: expected 4D weight, got {wd.shape}")
    n, cin, h, w = xd.shape
    cout, wcin, kh, kw = wd.shape
    if cin != wcin:
        raise ValueError(
            f"conv2d: input has {cin} channels but weight expects {wcin} "
            f"(input {xd.shape}, weight {wd.shape})")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input "
            f"{h + 2 * padding}x{w + 2 * padding}")

    if padding:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = xd
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1

    # im2col into a GEMM-friendly matrix: rows (n, oy, ox), cols (cin, ky, kx)
    cols = _kernels.im2col(np.ascontiguousarray(xp), oh, ow, kh, kw,
                           stride).reshape(n * oh * ow, cin * kh * kw)
    wflat = wd.reshape(cout, cin * kh * kw)
    out2d = cols @ wflat.T
    if bias is not None:
        if bias.data.shape != (cout,):
            raise ValueError(
                f"conv2d: bias shape {bias.data.shape} does not match "
                f"out channels {cout}")
        out2d += bias.data
    out = np.ascontiguousarray(
        out2d.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2))

    parents = [x, weight] + ([bias] if bias is not None else [])

    def bw(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if weight.requires_grad:
            _accumulate(weight, (g2d.T @ cols).reshape(wd.shape), own=True)
        if bias is not None:
            _accumulate(bias, g2d.sum(axis=0))
        if x.requires_grad:
            dview = (g2d @ wflat).reshape(n, oh, ow, cin, kh, kw)
            dxp = np.zeros((n, cin, h + 2 * padding, w + 2 * padding),
                           dtype=xd.dtype)
            _kernels.col2im_add(dview, kh, kw, stride, dxp)
            if padding:
                _accumulate(x, np.ascontiguousarray(
                    dxp[:, :, padding:padding + h, padding:padding + w]),
                    own=True)
            else:
                _accumulate(x, dxp, own=True)

    return Tensor.from_op(out, parents, bw)


def max_pool2d(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Windowed maximum over k x k patches.

    Gradient routes to the first (row-major within the window) maximal
    element, so all-equal windows send their gradient to the top-left cell.
    """
    if stride is None:
        stride = k
    xd = x.data
    if xd.ndim != 4:
        raise ValueError(f"max_pool2d: expected 4D input, got {xd.shape}")
    n, c, h, w = xd.shape
    if k < 1 or stride < 1:
        raise ValueError(f"max_pool2d: k and stride must be >= 1")
    if h < k or w < k:
        raise ValueError(f"max_pool2d: window {k} exceeds input {h}x{w}")
    out, arg = _kernels.maxpool_forward(np.ascontiguousarray(xd), k, stride)

    def bw(g):
        _accumulate(x, _kernels.maxpool_backward(
            arg, np.ascontiguousarray(g), k, stride, xd.shape), own=True)

    return Tensor.from_op(out, (x,), bw)


# ---- initialization and gradient checking -----------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int,
                    dtype=DEFAULT_DTYPE) -> np.ndarray:
    """He-uniform fan-in init: U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor,
                     eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at x.

    Evaluates (f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps) per element.
    `f` must be deterministic; gradients are not recorded during the
    probe evaluations.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_grad: eps must be > 0, got {eps}")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def eval_at(values: np.ndarray) -> float:
        with no_grad():
            r = f(Tensor(values.reshape(x.shape), dtype=base.dtype))
        if isinstance(r, Tensor):
            if r.size != 1:
                raise ValueError("finite_diff_grad: f must return a scalar")
            return r.item()
        return float(r)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = eval_at(flat)
        flat[i] = orig - eps
        fm = eval_at(flat)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(x.shape)
