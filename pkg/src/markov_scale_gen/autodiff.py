"""Reverse-mode tensor engine on top of numpy.

Every differentiable computation in this package is expressed through the
primitives defined here. Gradients are accumulated by a dynamic tape: each op
records its parents and a closure that maps the output gradient to parent
gradients, and ``Tensor.backward`` replays the tape in reverse topological
order. The binding contract is numerical: analytic gradients must agree with
central finite differences (see ``finite_diff_check``).

Float64 is the default dtype and the one the test suite runs at; float32 is
supported for faster CPU training.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible; names the op and shapes."""


class NumericError(RuntimeError):
    """Raised when a computation produces non-finite values it must not."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / sampling)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A numpy array with an optional gradient and tape linkage."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

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
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray, owned: bool = False) -> None:
        # owned=True promises g is a fresh array the caller will not reuse,
        # so it can become the grad buffer without a defensive copy
        if self.grad is None:
            if (
                owned
                and isinstance(g, np.ndarray)
                and g.base is None
                and g.flags.owndata
                and g.dtype == self.data.dtype
                and g.shape == self.data.shape
            ):
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, seed: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; scalar outputs seed with 1."""
        if seed is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward: implicit seed requires a scalar, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        self._accumulate(np.asarray(seed, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named learnable tensor; gradient shape always matches the data."""

    __slots__ = ("name",)

    def __init__(self, data, name: str, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _wrap(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcasted gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# element-wise ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("add", a.data, b.data)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            gb = _unbroadcast(g, b.shape)
            b._accumulate(gb, owned=gb is not g)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("sub", a.data, b.data)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            ga = _unbroadcast(g, a.shape)
            a._accumulate(ga, owned=ga is not g)
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(-g, owned=True)

    return _make(-a.data, (a,), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast("mul", a.data, b.data)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape), owned=True)
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def silu(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * s

    def backward(g):
        a._accumulate(g * s * (1.0 + a.data * (1.0 - s)), owned=True)

    return _make(out_data, (a,), backward)


def stop_gradient(a) -> Tensor:
    a = _wrap(a)
    return Tensor(a.data.copy())


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when rate == 0."""
    a = _wrap(a)
    if rate < 0.0 or rate >= 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype)
    scale = 1.0 / (1.0 - rate)
    out_data = a.data * keep * scale

    def backward(g):
        a._accumulate(g * keep * scale, owned=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# reductions and reshapes


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape))

    return _make(out_data, (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    count = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    if int(np.prod(shape)) != a.data.size and -1 not in tuple(shape):
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}")
    old_shape = a.shape

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return _make(a.data.reshape(shape), (a,), backward)


def moveaxis(a, src: int, dst: int) -> Tensor:
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.moveaxis(g, dst, src))

    return _make(np.moveaxis(a.data, src, dst), (a,), backward)


def swap_last(a) -> Tensor:
    """Transpose the last two axes."""
    a = _wrap(a)

    def backward(g):
        a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), backward)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Slice ``length`` entries starting at ``start`` along ``axis``."""
    a = _wrap(a)
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow: slice [{start}:{start + length}] outside axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def backward(g):
        gx = np.zeros(a.shape, dtype=g.dtype)
        gx[index] = g
        a._accumulate(gx, owned=True)

    return _make(a.data[index].copy(), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    parts = [_wrap(t) for t in tensors]
    if not parts:
        raise ShapeError("concat: need at least one tensor")
    ndims = {p.ndim for p in parts}
    if len(ndims) != 1:
        raise ShapeError(f"concat: rank mismatch {[p.shape for p in parts]}")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    ax = axis % parts[0].ndim
    sizes = [p.shape[ax] for p in parts]

    def backward(g):
        offset = 0
        for p, n in zip(parts, sizes):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[ax] = slice(offset, offset + n)
                p._accumulate(g[tuple(index)])
            offset += n

    return _make(out_data, tuple(parts), backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ: {a.shape} vs {b.shape}")
    _check_broadcast("matmul (batch dims)", a.data[..., :1, :1], b.data[..., :1, :1])
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape), owned=True)
        if b.requires_grad:
            if b.ndim == 2 and g.ndim > 2:
                # (..., n, w) @ (w, h): flatten the batch axes so the weight
                # gradient is a single (w, h) GEMM, no batched temp to reduce
                gf = g.reshape(-1, g.shape[-1])
                af = a.data.reshape(-1, a.shape[-1])
                b._accumulate(np.matmul(af.T, gf), owned=True)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accumulate(_unbroadcast(gb, b.shape), owned=True)

    return _make(out_data, (a, b), backward)


def softmax(a) -> Tensor:
    """Softmax along the last axis; -inf logits yield exact zeros."""
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        a._accumulate(out_data * (g - dot), owned=True)

    return _make(out_data, (a,), backward)


def layer_norm(a, gain, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale."""
    a, gain = _wrap(a), _wrap(gain)
    if gain.shape != a.shape[-1:]:
        raise ShapeError(f"layer_norm: gain shape {gain.shape} vs feature dim {a.shape[-1:]}")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out_data = xhat * gain.data
    parents = [a, gain]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != a.shape[-1:]:
            raise ShapeError(f"layer_norm: bias shape {bias.shape} vs feature dim {a.shape[-1:]}")
        out_data = out_data + bias.data
        parents.append(bias)

    def backward(g):
        if a.requires_grad:
            gx = g * gain.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(inv * (gx - m1 - xhat * m2), owned=True)
        if gain.requires_grad:
            gain._accumulate(_unbroadcast(g * xhat, gain.shape), owned=True)
        if bias is not None and bias.requires_grad:
            gb = _unbroadcast(g, bias.shape)
            bias._accumulate(gb, owned=gb is not g)

    return _make(out_data, tuple(parents), backward)


def embedding_lookup(table, indices) -> Tensor:
    """Gather rows of ``table`` (V x d) by an integer index array."""
    table = _wrap(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ShapeError(f"embedding_lookup: indices must be integers, got {idx.dtype}")
    if table.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(
            f"embedding_lookup: index out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out_data = table.data[idx]

    def backward(g):
        gt = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        table._accumulate(gt, owned=True)

    return _make(out_data, (table,), backward)


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` has vocabulary on the last axis; ``targets`` matches the
    leading axes. The mean runs over every target position.
    """
    logits = _wrap(logits)
    t = np.asarray(targets)
    if t.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets shape {t.shape} vs logits leading shape {logits.shape[:-1]}"
        )
    if t.size and (t.min() < 0 or t.max() >= logits.shape[-1]):
        raise IndexError(
            f"cross_entropy: target outside [0, {logits.shape[-1]}): min={t.min()}, max={t.max()}"
        )
    m = logits.data.max(axis=-1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=-1, keepdims=True)
    log_z = (m + np.log(z)).squeeze(-1)
    picked = np.take_along_axis(logits.data, t[..., None], axis=-1).squeeze(-1)
    count = max(t.size, 1)
    out_data = np.asarray((log_z - picked).sum() / count, dtype=logits.dtype)

    def backward(g):
        p = e / z
        onehot_grad = p.copy()
        np.subtract.at(
            onehot_grad.reshape(-1, logits.shape[-1]),
            (np.arange(t.size), t.reshape(-1)),
            1.0,
        )
        logits._accumulate(onehot_grad * (g / count), owned=True)

    return _make(out_data, (logits,), backward)


# ---------------------------------------------------------------------------
# grid interpolation


@lru_cache(maxsize=256)
def _resize_matrix(n_in: int, n_out: int, kernel: str, dtype_str: str) -> np.ndarray:
    """1-D interpolation matrix W (n_out x n_in); rows sum to 1 exactly.

    bilinear: half-pixel-center gather with edge clamping.
    nearest, upscaling: each output copies its nearest input (replication).
    nearest, downscaling: each input is assigned to its nearest output and
    outputs average their assigned inputs. For ratios where n_in is a
    multiple of n_out this is an exact block mean, which is what makes the
    tokenizer's greedy residual step non-increasing in reconstruction error.
    """
    dtype = np.dtype(dtype_str)
    w = np.zeros((n_out, n_in), dtype=dtype)
    if n_out == n_in:
        np.fill_diagonal(w, 1.0)
        return w
    if kernel == "bilinear":
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        for i in range(n_out):
            w[i, lo[i]] += 1.0 - frac[i]
            w[i, hi[i]] += frac[i]
    elif kernel == "nearest":
        if n_out > n_in:
            src = ((np.arange(n_out) + 0.5) * n_in // n_out).astype(int)
            w[np.arange(n_out), src] = 1.0
        else:
            dst = ((np.arange(n_in) + 0.5) * n_out // n_in).astype(int)
            counts = np.bincount(dst, minlength=n_out).astype(dtype)
            w[dst, np.arange(n_in)] = 1.0
            w /= counts[:, None]
    else:
        raise ValueError(f"unknown interpolation kernel: {kernel!r}")
    return w


def resize_array(x: np.ndarray, out_size: int, kernel: str = "bilinear") -> np.ndarray:
    """Non-differentiable resize of (..., S, S, C) arrays; same kernels as resize_grid."""
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != x.shape[-2]:
        raise ShapeError(f"resize_array: expected (..., S, S, C) with square grid, got {x.shape}")
    if x.shape[-2] == out_size:
        return x.copy()
    w = _resize_matrix(x.shape[-2], out_size, kernel, str(x.dtype))
    return np.einsum("iu,jv,...uvc->...ijc", w, w, x, optimize=True)


def resize_grid(a, out_size: int, kernel: str = "bilinear") -> Tensor:
    """Resample a square grid (..., S, S, C) to (..., out_size, out_size, C)."""
    a = _wrap(a)
    if a.ndim < 3 or a.shape[-3] != a.shape[-2]:
        raise ShapeError(f"resize_grid: expected (..., S, S, C) with square grid, got {a.shape}")
    if out_size < 1:
        raise ShapeError(f"resize_grid: out_size must be positive, got {out_size}")
    if a.shape[-2] == out_size:
        return a
    w = _resize_matrix(a.shape[-2], out_size, kernel, str(a.dtype))
    out_data = np.einsum("iu,jv,...uvc->...ijc", w, w, a.data, optimize=True)

    def backward(g):
        a._accumulate(np.einsum("iu,jv,...ijc->...uvc", w, w, g, optimize=True), owned=True)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution (tokenizer encoder / decoder)


def _extract_patches(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    view = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (B, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(view.transpose(0, 1, 2, 4, 5, 3))


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution over (B, H, W, Cin) with kernel (kh, kw, Cin, Cout)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape} vs kernel {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    b_, hp, wp, _ = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    patches = _extract_patches(xp, kh, kw, stride)  # (B, Ho, Wo, kh, kw, Cin)
    flat = patches.reshape(-1, kh * kw * cin)
    wflat = weight.data.reshape(kh * kw * cin, cout)
    out_data = (flat @ wflat).reshape(b_, ho, wo, cout)
    parents = [x, weight]
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} vs out channels ({cout},)")
        out_data = out_data + bias.data
        parents.append(bias)

    def backward(g):
        gflat = g.reshape(-1, cout)
        if weight.requires_grad:
            weight._accumulate((flat.T @ gflat).reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            gcols = (gflat @ wflat.T).reshape(b_, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    gxp[:, u : u + ho * stride : stride, v : v + wo * stride : stride] += gcols[
                        :, :, :, u, v, :
                    ]
            if padding:
                gxp = gxp[:, padding:-padding, padding:-padding, :]
            x._accumulate(gxp)

    return _make(out_data, tuple(parents), backward)


# ---------------------------------------------------------------------------
# contract surface


def primitive_set() -> dict[str, Callable]:
    """The catalog of required differentiable primitives."""
    return {
        "matmul": matmul,
        "add": add,
        "mul": mul,
        "softmax": softmax,
        "layer_norm": layer_norm,
        "embedding_lookup": embedding_lookup,
        "concat": concat,
        "resize_grid": resize_grid,
        "cross_entropy": cross_entropy,
    }


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` is a scalar-valued closure over ``params``. The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|). Raises
    ``NumericError`` if any evaluation is non-finite, naming the coordinate.
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: step must be positive, got {h}")
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if out.data.size != 1:
        raise ShapeError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
    if not np.isfinite(out.data):
        raise NumericError("finite_diff_check: f is non-finite at the base point")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                fp = f().item()
            flat[i] = orig - h
            with no_grad():
                fm = f().item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(
                    f"finite_diff_check: non-finite f at parameter {getattr(p, 'name', '?')}[{i}]"
                )
            numeric = (fp - fm) / (2.0 * h)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst
