"""Dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap a numpy array (float32 for training, float64 for gradient
checking) plus an optional gradient accumulator. Every differentiable
operation records its parents and a backward closure; ``Tensor.backward``
replays the recorded graph once in reverse topological order and
accumulates gradients out-of-place, so buffers shared through views are
never mutated.

All kernels are deterministic: identical inputs produce bit-identical
outputs. A multiply-accumulate counter can be enabled around a region of
code to instrument matmul/conv work (see ``count_macs``).
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, ContractError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (eval-mode forwards)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class MacCounter:
    """Multiply-accumulate instrumentation, bucketed by kernel family.

    ``matmul`` and ``conv`` buckets count one unit per multiply-add pair.
    ``other`` tallies output element counts of arithmetic the closed-form
    cost model does not cover (elementwise add/mul, softmax, layer norm,
    gelu); pure data movement is free.
    """

    def __init__(self):
        self.buckets: dict[str, int] = {"matmul": 0, "conv": 0, "other": 0}

    def add(self, bucket: str, n: int) -> None:
        self.buckets[bucket] = self.buckets.get(bucket, 0) + int(n)

    def total(self) -> int:
        return sum(self.buckets.values())

    def __getitem__(self, bucket: str) -> int:
        return self.buckets.get(bucket, 0)


_active_counter: Optional[MacCounter] = None


class count_macs:
    """``with count_macs() as c:`` records MACs of all ops run in the block."""

    def __enter__(self) -> MacCounter:
        global _active_counter
        self._prev = _active_counter
        self.counter = MacCounter()
        _active_counter = self.counter
        return self.counter

    def __exit__(self, *exc):
        global _active_counter
        _active_counter = self._prev
        return False


def _count(bucket: str, n: int) -> None:
    if _active_counter is not None:
        _active_counter.add(bucket, n)


def _as_array(data, dtype) -> np.ndarray:
    if isinstance(data, np.ndarray) and dtype is None:
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(np.float32)
    return np.asarray(data, dtype=np.float32 if dtype is None else dtype)


class Tensor:
    """N-dimensional array with optional gradient tracking.

    Invariants: ``grad`` (when present) has the same shape and dtype as
    ``data``; reshape/transpose style ops never change the multiset of
    stored values.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        out = _make(self.data.astype(dtype), (self,))
        if out.requires_grad:
            src_dtype = self.data.dtype

            def backward(g):
                _accum(self, g.astype(src_dtype))

            out._backward = backward
        return out

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate gradients of ``self`` w.r.t. every reachable tensor."""
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed gradient requires a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.data.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        _accum(self, grad)
        # Iterative topological sort; graphs from deep models exceed the
        # default recursion limit.
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis, keepdims)


# -- graph plumbing ----------------------------------------------------------


def _make(data: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = None
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        if x.data.dtype != like.data.dtype:
            raise TypeError(f"mixed dtypes {x.data.dtype} and {like.data.dtype}; cast explicitly")
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-dimensional tensor")
    return axis % ndim


# -- elementwise and reduction ops --------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _make(a.data + b.data, (a, b))
    _count("other", out.data.size)
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g, a.data.shape))
            _accum(b, _unbroadcast(g, b.data.shape))
        out._backward = backward
    return out


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    out = _make(a.data * b.data, (a, b))
    _count("other", out.data.size)
    if out.requires_grad:
        def backward(g):
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
            _accum(b, _unbroadcast(g * a.data, b.data.shape))
        out._backward = backward
    return out


def power(a: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("tensor exponents are not supported")
    out = _make(a.data ** exponent, (a,))
    if out.requires_grad:
        def backward(g):
            _accum(a, g * exponent * a.data ** (exponent - 1))
        out._backward = backward
    return out


def texp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = _make(y, (a,))
    if out.requires_grad:
        def backward(g):
            _accum(a, g * y)
        out._backward = backward
    return out


def tlog(a: Tensor) -> Tensor:
    out = _make(np.log(a.data), (a,))
    if out.requires_grad:
        def backward(g):
            _accum(a, g / a.data)
        out._backward = backward
    return out


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if out.requires_grad:
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))
        out._backward = backward
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.data.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / float(n))


# -- structural ops ------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = _make(a.data.reshape(shape), (a,))
    if out.requires_grad:
        src_shape = a.data.shape

        def backward(g):
            _accum(a, g.reshape(src_shape))

        out._backward = backward
    return out


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeError(f"axes {axes} are not a permutation of 0..{a.data.ndim - 1}")
    out = _make(np.ascontiguousarray(a.data.transpose(axes)), (a,))
    if out.requires_grad:
        inverse = tuple(np.argsort(axes))

        def backward(g):
            _accum(a, g.transpose(inverse))

        out._backward = backward
    return out


def getitem(a: Tensor, key) -> Tensor:
    picked = a.data[key]
    if not isinstance(picked, np.ndarray):
        picked = np.asarray(picked)
    out = _make(picked, (a,))
    if out.requires_grad:
        src_shape = a.data.shape

        def backward(g):
            buf = np.zeros(src_shape, dtype=g.dtype)
            buf[key] = g
            _accum(a, buf)

        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    axis = _check_axis(axis, tensors[0].data.ndim)
    out = _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        extents = [t.data.shape[axis] for t in tensors]

        def backward(g):
            start = 0
            for t, extent in zip(tensors, extents):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, start + extent)
                _accum(t, g[tuple(sl)])
                start += extent

        out._backward = backward
    return out


def pad(a: Tensor, pads: Sequence[tuple[int, int]]) -> Tensor:
    """Zero-pad each axis by (before, after)."""
    pads = tuple((int(lo), int(hi)) for lo, hi in pads)
    if len(pads) != a.data.ndim:
        raise ShapeError(f"{len(pads)} pad pairs for {a.data.ndim}-dimensional tensor")
    out = _make(np.pad(a.data, pads), (a,))
    if out.requires_grad:
        window = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, a.data.shape))

        def backward(g):
            _accum(a, g[window])

        out._backward = backward
    return out


def segment_mean(a: Tensor, segments: Sequence[np.ndarray]) -> Tensor:
    """Replace each row group of the second-to-last axis by its group mean.

    ``segments`` partitions the row index range; within each segment every
    row of the output equals the mean of the segment's input rows.
    """
    if a.data.ndim < 2:
        raise ShapeError(f"segment_mean requires >= 2 dimensions, got shape {a.data.shape}")
    y = np.empty_like(a.data)
    for idx in segments:
        y[..., idx, :] = a.data[..., idx, :].mean(axis=-2, keepdims=True)
    out = _make(y, (a,))
    if out.requires_grad:
        def backward(g):
            buf = np.empty_like(g)
            for idx in segments:
                buf[..., idx, :] = g[..., idx, :].mean(axis=-2, keepdims=True)
            _accum(a, buf)
        out._backward = backward
    return out


def gather_last(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``index`` positions along the last axis: ``out[..., k] = a[..., index[k]]``.

    The index array is a constant; gradients scatter-add back, so repeated
    indices are handled (used for both bias-table lookup and the pure
    channel permutations of the shuffle op).
    """
    index = np.asarray(index)
    if index.ndim != 1:
        raise ShapeError(f"gather index must be 1-dimensional, got shape {index.shape}")
    out = _make(np.ascontiguousarray(a.data[..., index]), (a,))
    if out.requires_grad:
        last = a.data.shape[-1]

        def backward(g):
            lead = g.shape[:-1]
            g2 = g.reshape(-1, index.size)
            buf = np.zeros((g2.shape[0], last), dtype=g.dtype)
            np.add.at(buf, (np.arange(g2.shape[0])[:, None], index[None, :]), g2)
            _accum(a, buf.reshape(*lead, last))

        out._backward = backward
    return out


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.data.dtype))
    if a.data.dtype != b.data.dtype:
        raise TypeError(f"mixed dtypes {a.data.dtype} and {b.data.dtype}")
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul requires 2-d operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"inner extents differ: {a.data.shape} @ {b.data.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"batch extents incompatible: {a.data.shape} @ {b.data.shape}") from exc
    m, k, n = a.data.shape[-2], a.data.shape[-1], b.data.shape[-1]
    _count("matmul", int(np.prod(y.shape[:-2], dtype=np.int64)) * m * k * n)
    out = _make(y, (a, b))
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape))
        out._backward = backward
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` over the last axis, flattening leading axes first.

    Flattening keeps the backward pass a single GEMM per operand instead of
    a large batched product.
    """
    lead = x.data.shape[:-1]
    y = matmul(reshape(x, (-1, x.data.shape[-1])), weight)
    if bias is not None:
        y = add(y, bias)
    return reshape(y, (*lead, weight.data.shape[-1]))


# -- neural-net kernels ----------------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Normalized exponentials along ``axis``; subtracts the axis max first."""
    axis = _check_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make(y, (x,))
    _count("other", out.data.size)
    if out.requires_grad:
        def backward(g):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _accum(x, y * (g - dot))
        out._backward = backward
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    axis = _check_axis(axis, x.data.ndim)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - logz
    out = _make(y, (x,))
    if out.requires_grad:
        def backward(g):
            _accum(x, g - np.exp(y) * g.sum(axis=axis, keepdims=True))
        out._backward = backward
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last (channel) axis to zero mean / unit variance, then affine."""
    c = x.data.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"layer_norm parameters must have shape ({c},); got gamma {gamma.data.shape}, beta {beta.data.shape}"
        )
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = _make(xhat * gamma.data + beta.data, (x, gamma, beta))
    _count("other", out.data.size)
    if out.requires_grad:
        def backward(g):
            if gamma.requires_grad:
                _accum(gamma, (g * xhat).reshape(-1, c).sum(axis=0))
            if beta.requires_grad:
                _accum(beta, g.reshape(-1, c).sum(axis=0))
            if x.requires_grad:
                gh = g * gamma.data
                term = gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
                _accum(x, term * inv)
        out._backward = backward
    return out


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form: ``0.5 x (1 + erf(x/sqrt(2)))``."""
    cdf = 0.5 * (1.0 + _erf(x.data * _INV_SQRT2))
    out = _make(x.data * cdf, (x,))
    _count("other", out.data.size)
    if out.requires_grad:
        def backward(g):
            pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
            _accum(x, g * (cdf + x.data * pdf))
        out._backward = backward
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor],
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation over channel-last maps.

    ``x`` is (B, H, W, Cin), ``weight`` is (K, K, Cin, Cout). Output extent
    per axis is ``(ext + 2*padding - K) // stride + 1``.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.data.shape} and {weight.data.shape}")
    kh, kw, cin, cout = weight.data.shape
    if kh != kw:
        raise ShapeError(f"conv2d kernel must be square, got {kh}x{kw}")
    if x.data.shape[-1] != cin:
        raise ShapeError(f"input channels {x.data.shape[-1]} != kernel channels {cin}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} != ({cout},)")
    b, h, w, _ = x.data.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ConfigError(
            f"conv2d output extent {oh}x{ow} is not positive for input {h}x{w}, "
            f"kernel {kh}, stride {stride}, padding {padding}"
        )
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    # im2col: one strided slice per kernel offset, then a single GEMM.
    cols = np.empty((b, oh, ow, kh, kw, cin), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            cols[:, :, :, ki, kj, :] = xp[
                :, ki : ki + stride * (oh - 1) + 1 : stride, kj : kj + stride * (ow - 1) + 1 : stride, :
            ]
    cols2 = cols.reshape(b * oh * ow, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    y = cols2 @ w2
    _count("conv", cols2.shape[0] * cols2.shape[1] * cout)
    if bias is not None:
        y = y + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    out = _make(y.reshape(b, oh, ow, cout), parents)
    if out.requires_grad:
        def backward(g):
            g2 = g.reshape(b * oh * ow, cout)
            if bias is not None and bias.requires_grad:
                _accum(bias, g2.sum(axis=0))
            if weight.requires_grad:
                _accum(weight, (cols2.T @ g2).reshape(kh, kw, cin, cout))
            if x.requires_grad:
                gcols = (g2 @ w2.T).reshape(b, oh, ow, kh, kw, cin)
                gxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        gxp[
                            :,
                            ki : ki + stride * (oh - 1) + 1 : stride,
                            kj : kj + stride * (ow - 1) + 1 : stride,
                            :,
                        ] += gcols[:, :, :, ki, kj, :]
                _accum(x, gxp[:, padding : padding + h, padding : padding + w, :] if padding else gxp)
        out._backward = backward
    return out


def drop_path(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Stochastic depth on the leading (batch) axis; identity when inactive."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ContractError("drop_path with rate > 0 requires an RNG in training mode")
    keep = 1.0 - rate
    mask_shape = (x.data.shape[0],) + (1,) * (x.data.ndim - 1)
    mask = (rng.random(mask_shape) < keep).astype(x.data.dtype) / keep
    return mul(x, Tensor(mask))


# -- gradient checking -------------------------------------------------------------


def grad_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    step: float = 1e-5,
    max_entries_per_param: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients of a scalar objective against central differences.

    ``fn`` re-evaluates the objective from the current parameter values.
    All parameters must be 64-bit. Returns the max over checked entries of
    ``|analytic - numeric| / max(1, |analytic|, |numeric|)``. By default
    every entry is checked; ``max_entries_per_param`` subsamples entries
    deterministically for large models.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        if not p.requires_grad:
            raise ContractError("grad_check parameters must require grad")
    for p in params:
        p.zero_grad()
    out = fn()
    if out.data.size != 1:
        raise ContractError(f"grad_check objective must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            idx = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idx = np.arange(n)
        afl = ana.reshape(-1)
        for i in idx:
            keep = flat[i]
            with no_grad():  # numeric evaluations need values only
                flat[i] = keep + step
                hi = fn().item()
                flat[i] = keep - step
                lo = fn().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            a = afl[i]
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            if err > worst:
                worst = err
    return worst
