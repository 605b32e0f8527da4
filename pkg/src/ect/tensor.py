"""Dense n-d tensor with reverse-mode autodiff on numpy buffers.

All kernels are deterministic (fixed reduction order via numpy/einsum on
contiguous buffers), so identical seeds and inputs give bit-identical
forward and backward results on the same platform.  Precision is a global
switch: float32 for training, float64 for verification / gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NumericsError(ArithmeticError):
    """A non-finite value (or forbidden zero divisor) appeared in checked mode."""


class UnsupportedOpError(NotImplementedError):
    """The op configuration is outside the supported envelope."""


_DTYPES = {"f32": np.float32, "f64": np.float64}
_default_dtype = np.float32
_check_finite = True


def set_default_dtype(name: str) -> None:
    global _default_dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(_DTYPES)}")
    _default_dtype = _DTYPES[name]


def default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


def set_check_finite(flag: bool) -> None:
    global _check_finite
    _check_finite = bool(flag)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default scalar precision ('f32' or 'f64')."""
    global _default_dtype
    prev = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = prev


def _chk(arr: np.ndarray, op: str) -> np.ndarray:
    if _check_finite and not np.all(np.isfinite(arr)):
        raise NumericsError(f"non-finite value produced by {op}")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A numpy-backed tensor that optionally participates in the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None
        self.name = name

    # -- inspection -------------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Reverse-mode sweep from a scalar sink, accumulating leaf gradients."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar sink, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._vjp is None:
                continue
            grads = node._vjp(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                p.grad += g

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable, op: str) -> Tensor:
    _chk(data, op)
    out = Tensor(data, dtype=data.dtype)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), vjp, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(data, (a, b), vjp, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    data = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), vjp, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _coerce(b, a)
    if _check_finite and np.any(b.data == 0):
        raise NumericsError("division by zero in checked mode")
    data = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp, "div")


def abs_(a: Tensor) -> Tensor:
    data = np.abs(a.data)
    sgn = np.sign(a.data)  # sign(0) = 0: fixed subgradient at the kink

    def vjp(g):
        return (g * sgn,)

    return _node(data, (a,), vjp, "abs")


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / data),)

    return _node(data, (a,), vjp, "sqrt")


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    x = a.data
    phi_cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
    data = x * phi_cdf
    pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)

    def vjp(g):
        return (g * (phi_cdf + x * pdf),)

    return _node(data.astype(a.data.dtype), (a,), vjp, "gelu")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype) + np.zeros_like(a.data),)

    return _node(np.asarray(data, dtype=a.data.dtype), (a,), vjp, "mean")


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        g = np.asarray(g)
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype) + np.zeros_like(a.data),)

    return _node(np.asarray(data, dtype=a.data.dtype), (a,), vjp, "sum")


# -- structural -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _node(data, (a,), vjp, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))

    def vjp(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return _node(data, (a,), vjp, "transpose")


def swap_last2(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.ascontiguousarray(np.take(g, range(offsets[i], offsets[i + 1]), axis=axis))
            for i in range(len(tensors))
        )

    return _node(data, tuple(tensors), vjp, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)
    data = np.ascontiguousarray(a.data[idx])

    def vjp(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _node(data, (a,), vjp, "narrow")


def take_flat(a: Tensor, flat_idx: np.ndarray, out_shape) -> Tensor:
    """Gather by flat index (pure permutation / duplication); scatter-add backward."""
    flat_idx = np.asarray(flat_idx, dtype=np.int64)
    data = a.data.reshape(-1)[flat_idx.reshape(-1)].reshape(out_shape)

    def vjp(g):
        acc = np.zeros(a.data.size, dtype=a.data.dtype)
        np.add.at(acc, flat_idx.reshape(-1), g.reshape(-1))
        return (acc.reshape(a.shape),)

    return _node(data, (a,), vjp, "take_flat")


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting on leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _node(data, (a, b), vjp, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max subtraction) along one axis."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _node(data, (a,), vjp, "softmax")


def l2_normalize_rows(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each slice along the last axis by max(its L2 norm, eps)."""
    norms = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    denom = np.maximum(norms, eps)
    clamped = norms <= eps
    data = a.data / denom

    def vjp(g):
        proj = (g * a.data).sum(axis=-1, keepdims=True)
        free = g / denom - a.data * (proj / (denom * denom * denom))
        return (np.where(clamped, g / eps, free),)

    return _node(data, (a,), vjp, "l2_normalize_rows")


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Last-axis layer normalization with learnable affine (composite of primitives)."""
    mu = mean(a, axis=-1, keepdims=True)
    d = sub(a, mu)
    var = mean(mul(d, d), axis=-1, keepdims=True)
    inv = div(d, sqrt(add(var, eps)))
    return add(mul(inv, gamma), beta)


# -- convolutions and pooling --------------------------------------------

def _conv2d_checks(x: Tensor, w: Tensor, stride: int, padding: int, groups: int):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input/weight, got {x.shape} / {w.shape}")
    B, Cin, H, W = x.shape
    Cout, Cin_g, kh, kw = w.shape
    if Cin % groups or Cout % groups:
        raise ShapeError(f"channels not divisible by groups: Cin={Cin}, Cout={Cout}, groups={groups}")
    if Cin_g != Cin // groups:
        raise ShapeError(f"weight expects {Cin_g} in-channels per group, input has {Cin // groups}")
    if kh > H + 2 * padding or kw > W + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {H + 2 * padding}x{W + 2 * padding}")
    Hout = (H + 2 * padding - kh) // stride + 1
    Wout = (W + 2 * padding - kw) // stride + 1
    return B, Cin, H, W, Cout, kh, kw, Hout, Wout


def conv2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over [B, C, H, W] with grouped channels."""
    B, Cin, H, W, Cout, kh, kw, Hout, Wout = _conv2d_checks(x, w, stride, padding, groups)
    cin_g, cout_g = Cin // groups, Cout // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((B, Cout, Hout, Wout), dtype=x.data.dtype)
    for gi in range(groups):
        xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
        wg = w.data[gi * cout_g:(gi + 1) * cout_g]
        acc = out[:, gi * cout_g:(gi + 1) * cout_g]
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride]
                acc += np.einsum("bchw,oc->bohw", xs, wg[:, :, i, j])

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for gi in range(groups):
            xg = xp[:, gi * cin_g:(gi + 1) * cin_g]
            wg = w.data[gi * cout_g:(gi + 1) * cout_g]
            go = g[:, gi * cout_g:(gi + 1) * cout_g]
            for i in range(kh):
                for j in range(kw):
                    xs = xg[:, :, i:i + stride * Hout:stride, j:j + stride * Wout:stride]
                    gw[gi * cout_g:(gi + 1) * cout_g, :, i, j] = np.einsum("bohw,bchw->oc", go, xs)
                    gxp[:, gi * cin_g:(gi + 1) * cin_g,
                        i:i + stride * Hout:stride,
                        j:j + stride * Wout:stride] += np.einsum("bohw,oc->bchw", go, wg[:, :, i, j])
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        return np.ascontiguousarray(gx), gw

    res = _node(out, (x, w), vjp, "conv2d")
    if bias is not None:
        res = add(res, reshape(bias, (1, -1, 1, 1)))
    return res


def conv_transpose2d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, stride: int = 2) -> Tensor:
    """Adjoint of a stride-2 2x2 convolution; the only supported configuration."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-d input/weight, got {x.shape} / {w.shape}")
    Cin, Cout, kh, kw = w.shape
    if stride != 2 or (kh, kw) != (2, 2):
        raise UnsupportedOpError(f"conv_transpose2d supports stride=2 kernel 2x2 only, got stride={stride}, kernel={kh}x{kw}")
    B, C, H, W = x.shape
    if C != Cin:
        raise ShapeError(f"input channels {C} != weight in-channels {Cin}")
    out = np.zeros((B, Cout, 2 * H, 2 * W), dtype=x.data.dtype)
    for i in range(2):
        for j in range(2):
            out[:, :, i::2, j::2] = np.einsum("bchw,co->bohw", x.data, w.data[:, :, i, j])

    def vjp(g):
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w.data)
        for i in range(2):
            for j in range(2):
                gs = g[:, :, i::2, j::2]
                gx += np.einsum("bohw,co->bchw", gs, w.data[:, :, i, j])
                gw[:, :, i, j] = np.einsum("bchw,bohw->co", x.data, gs)
        return gx, gw

    res = _node(out, (x, w), vjp, "conv_transpose2d")
    if bias is not None:
        res = add(res, reshape(bias, (1, -1, 1, 1)))
    return res


def conv1d(x: Tensor, w: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """1-d cross-correlation over [B, C, L], stride 1, groups 1."""
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d expects 3-d input/weight, got {x.shape} / {w.shape}")
    B, Cin, L = x.shape
    Cout, Cin_w, kl = w.shape
    if Cin_w != Cin:
        raise ShapeError(f"conv1d channel mismatch: input {Cin}, weight {Cin_w}")
    if kl > L + 2 * padding:
        raise ShapeError(f"kernel {kl} larger than padded length {L + 2 * padding}")
    Lout = L + 2 * padding - kl + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding)))
    out = np.zeros((B, Cout, Lout), dtype=x.data.dtype)
    for i in range(kl):
        out += np.einsum("bcl,oc->bol", xp[:, :, i:i + Lout], w.data[:, :, i])

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i in range(kl):
            gw[:, :, i] = np.einsum("bol,bcl->oc", g, xp[:, :, i:i + Lout])
            gxp[:, :, i:i + Lout] += np.einsum("bol,oc->bcl", g, w.data[:, :, i])
        gx = gxp[:, :, padding:padding + L] if padding else gxp
        return np.ascontiguousarray(gx), gw

    res = _node(out, (x, w), vjp, "conv1d")
    if bias is not None:
        res = add(res, reshape(bias, (1, -1, 1)))
    return res


def adaptive_avg_pool2d(x: Tensor, out_h: int = 2, out_w: int = 2) -> Tensor:
    """Mean pooling to a fixed output grid over the last two axes.

    Partition boundaries follow floor(i*H/out_h) .. floor((i+1)*H/out_h).
    """
    *lead, H, W = x.shape
    if H < out_h or W < out_w:
        raise ShapeError(f"input {H}x{W} smaller than pooling grid {out_h}x{out_w}")
    hb = [(i * H // out_h, (i + 1) * H // out_h) for i in range(out_h)]
    wb = [(j * W // out_w, (j + 1) * W // out_w) for j in range(out_w)]
    out = np.empty(tuple(lead) + (out_h, out_w), dtype=x.data.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            out[..., i, j] = x.data[..., h0:h1, w0:w1].mean(axis=(-1, -2))

    def vjp(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                area = (h1 - h0) * (w1 - w0)
                gx[..., h0:h1, w0:w1] += g[..., i:i + 1, j:j + 1] / area
        return (gx,)

    return _node(out, (x,), vjp, "adaptive_avg_pool2d")


def reflect_pad2d(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the last two axes (edge values not repeated)."""
    *lead, H, W = x.shape
    ridx = np.pad(np.arange(H), (pad_h, pad_h), mode="reflect")
    cidx = np.pad(np.arange(W), (pad_w, pad_w), mode="reflect")
    flat = (ridx[:, None] * W + cidx[None, :]).reshape(-1)
    lead_n = int(np.prod(lead)) if lead else 1
    base = np.arange(lead_n, dtype=np.int64)[:, None] * (H * W)
    idx = (base + flat[None, :]).reshape(tuple(lead) + (len(ridx), len(cidx)))
    return take_flat(x, idx, idx.shape)


# -- verification ---------------------------------------------------------

def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_coords_per_param: Optional[int] = None, seed: int = 0) -> float:
    """Compare backward() against central differences; return the max relative error.

    ``f`` re-runs the forward pass and returns the scalar sink.  Intended for
    64-bit mode; optionally probes a random coordinate subset per parameter.
    """
    for p in params:
        p.zero_grad()
    sink = f()
    sink.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n)
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = rng.choice(n, size=max_coords_per_param, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            fp = f().item()
            flat[c] = orig - eps
            fm = f().item()
            flat[c] = orig
            num = (fp - fm) / (2.0 * eps)
            a = an.reshape(-1)[c]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst
