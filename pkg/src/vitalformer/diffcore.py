"""Minimal reverse-mode autodiff on an append-only tape.

Every value is a float64 numpy array. Complex spectra are carried as real
arrays with a trailing axis of length 2 (real, imag), so the whole graph
stays real-valued and gradients are plain real arrays of matching shape.

Ops are registered by name in ``_OPS``. Each entry takes the input value
arrays plus keyword attributes and returns ``(out, vjp)`` where ``vjp``
maps the output cotangent to a list of input cotangents (``None`` for
inputs that receive nothing).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " vs ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class DiffTensor:
    """A node on a :class:`Tape`: forward values plus accumulated gradient."""

    __slots__ = ("tape", "node_id", "values", "grad")

    def __init__(self, tape: Tape, node_id: int, values: np.ndarray):
        self.tape = tape
        self.node_id = node_id
        self.values = values
        self.grad = np.zeros_like(values)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"DiffTensor(id={self.node_id}, shape={self.shape})"

    def _lift(self, other) -> DiffTensor:
        if isinstance(other, DiffTensor):
            return other
        return self.tape.constant(other)

    def __add__(self, other):
        return self.tape.record("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self.tape.record("add", [self._lift(other), self])

    def __sub__(self, other):
        return self.tape.record("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self.tape.record("sub", [self._lift(other), self])

    def __mul__(self, other):
        return self.tape.record("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self.tape.record("mul", [self._lift(other), self])

    def __truediv__(self, other):
        return self.tape.record("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self.tape.record("div", [self._lift(other), self])

    def __neg__(self):
        return self.tape.record("scale", [self], factor=-1.0)

    def __matmul__(self, other):
        return self.tape.record("matmul", [self, other])


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    output: int
    vjp: Callable[[np.ndarray], list] | None


class Tape:
    """Append-only record of a computation; backward walks it in reverse."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.tensors: list[DiffTensor] = []
        self._backward_done = False

    def _new(self, values: np.ndarray) -> DiffTensor:
        t = DiffTensor(self, len(self.tensors), values)
        self.tensors.append(t)
        return t

    def leaf(self, values) -> DiffTensor:
        t = self._new(np.array(values, dtype=np.float64))
        self.nodes.append(_Node("leaf", (), t.node_id, None))
        return t

    constant = leaf

    def record(self, op_kind: str, inputs: Sequence[DiffTensor], **attrs) -> DiffTensor:
        if self._backward_done:
            raise TapeError("tape already consumed by backward()")
        if op_kind not in _OPS:
            raise KeyError(f"unknown op {op_kind!r}")
        for x in inputs:
            if not isinstance(x, DiffTensor) or x.tape is not self:
                raise TapeError(f"{op_kind}: input not registered on this tape")
        out, vjp = _OPS[op_kind]([x.values for x in inputs], **attrs)
        t = self._new(np.asarray(out, dtype=np.float64))
        self.nodes.append(_Node(op_kind, tuple(x.node_id for x in inputs), t.node_id, vjp))
        return t

    def backward(self, loss: DiffTensor) -> None:
        if loss.tape is not self:
            raise TapeError("loss belongs to another tape")
        if loss.shape != ():
            raise ShapeError("backward", loss.shape, detail="loss must be scalar")
        if self._backward_done:
            raise TapeError("backward() called twice on the same tape")
        self._backward_done = True
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes[: loss.node_id + 1]):
            if node.vjp is None:
                continue
            g = self.tensors[node.output].grad
            if not g.any():
                continue
            for in_id, gi in zip(node.inputs, node.vjp(g)):
                if gi is not None:
                    self.tensors[in_id].grad += gi

    def release(self) -> None:
        """Drop recorded values and closures. Tensors refer back to the tape,
        so without this large intermediates wait for the cyclic collector."""
        self.nodes.clear()
        self.tensors.clear()
        self._backward_done = True

    # thin wrappers so model code reads naturally
    def __getattr__(self, name):
        if name in _OPS:
            return lambda *xs, **kw: self.record(name, list(xs), **kw)
        raise AttributeError(name)

    def max_with_argmax(self, x: DiffTensor) -> tuple[DiffTensor, int]:
        out = self.record("max", [x])
        return out, int(np.argmax(x.values))


# ---------------------------------------------------------------------------
# op implementations

_OPS: dict[str, Callable] = {}


def _op(name):
    def deco(fn):
        _OPS[name] = fn
        return fn
    return deco


def _check_binary(op, a, b):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape, detail="only scalar-with-tensor broadcasting")


def _unbroadcast(g, shape):
    return g.sum() if shape == () and g.shape != () else g


@_op("add")
def _add(xs):
    a, b = xs
    _check_binary("add", a, b)
    return a + b, lambda g: [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


@_op("sub")
def _sub(xs):
    a, b = xs
    _check_binary("sub", a, b)
    return a - b, lambda g: [_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)]


@_op("mul")
def _mul(xs):
    a, b = xs
    _check_binary("mul", a, b)
    return a * b, lambda g: [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


@_op("div")
def _div(xs):
    a, b = xs
    _check_binary("div", a, b)
    out = a / b
    return out, lambda g: [_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)]


@_op("scale")
def _scale(xs, factor: float):
    return xs[0] * factor, lambda g: [g * factor]


@_op("matmul")
def _matmul(xs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    return a @ b, lambda g: [g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g]


@_op("linear")
def _linear(xs):
    """x[..., k] @ w[k, n] + b[n]."""
    x, w, b = xs
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError("linear", x.shape, w.shape, b.shape)

    def vjp(g):
        x2 = x.reshape(-1, x.shape[-1])
        g2 = g.reshape(-1, g.shape[-1])
        return [g @ w.T, x2.T @ g2, g2.sum(axis=0)]

    return x @ w + b, vjp


@_op("broadcast_to")
def _broadcast_to(xs, shape):
    (x,) = xs
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x, shape).copy()
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(x.shape) if n == 1 and shape[lead + i] != 1
    )

    def vjp(g):
        return [g.sum(axis=axes, keepdims=True).reshape(x.shape)]

    return out, vjp


@_op("sigmoid")
def _sigmoid(xs):
    s = 0.5 * (1.0 + np.tanh(0.5 * xs[0]))
    return s, lambda g: [g * s * (1.0 - s)]


@_op("tanh")
def _tanh(xs):
    t = np.tanh(xs[0])
    return t, lambda g: [g * (1.0 - t * t)]


@_op("relu")
def _relu(xs):
    x = xs[0]
    return np.maximum(x, 0.0), lambda g: [g * (x > 0)]


_GELU_C = np.sqrt(2.0 / np.pi)


@_op("gelu")
def _gelu(xs):
    # tanh approximation; smooth everywhere
    x = xs[0]
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def vjp(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)]

    return out, vjp


@_op("exp")
def _exp(xs):
    e = np.exp(xs[0])
    return e, lambda g: [g * e]


@_op("log")
def _log(xs):
    x = xs[0]
    return np.log(x), lambda g: [g / x]


@_op("sqrt")
def _sqrt(xs):
    r = np.sqrt(xs[0])
    return r, lambda g: [g * 0.5 / r]


@_op("softmax")
def _softmax(xs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    s = e / e.sum(axis=-1, keepdims=True)
    return s, lambda g: [s * (g - (g * s).sum(axis=-1, keepdims=True))]


@_op("layernorm")
def _layernorm(xs, eps: float = 1e-5):
    x, gamma, beta = xs
    if gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gh = g * gamma
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return [dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)]

    return xhat * gamma + beta, vjp


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_op("sum")
def _sum(xs, axis=None, keepdims=False):
    x = xs[0]
    ax = _norm_axis(axis, x.ndim)
    out = x.sum(axis=ax, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return [np.broadcast_to(g, x.shape).copy()]

    return out, vjp


@_op("mean")
def _mean(xs, axis=None, keepdims=False):
    x = xs[0]
    ax = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in ax])) if ax else 1
    out, sum_vjp = _sum(xs, axis=axis, keepdims=keepdims)
    return out / count, lambda g: [sum_vjp(g)[0] / count]


@_op("reshape")
def _reshape(xs, shape):
    x = xs[0]
    try:
        out = x.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return out, lambda g: [g.reshape(x.shape)]


@_op("transpose")
def _transpose(xs, axes):
    x = xs[0]
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, tuple(axes))
    inv = np.argsort(axes)
    return x.transpose(axes), lambda g: [g.transpose(inv)]


@_op("concat")
def _concat(xs, axis=0):
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        raise ShapeError("concat", *[x.shape for x in xs]) from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return out, lambda g: list(np.split(g, bounds, axis=axis))


@_op("slice")
def _slice(xs, index):
    x = xs[0]
    out = x[index]

    def vjp(g):
        gx = np.zeros_like(x)
        gx[index] += g
        return [gx]

    return out, vjp


@_op("max")
def _max(xs):
    # full gradient to the first maximal element
    x = xs[0]
    k = int(np.argmax(x))

    def vjp(g):
        gx = np.zeros_like(x)
        gx.flat[k] = g
        return [gx]

    return x.flat[k], vjp


# -- spectral ops -----------------------------------------------------------

def _to_complex(z):
    return z[..., 0] + 1j * z[..., 1]


def _to_pair(c):
    return np.stack([c.real, c.imag], axis=-1)


@_op("rfft")
def _rfft(xs, n=None):
    """Real FFT over the last axis; output [..., n//2+1, 2]."""
    x = xs[0]
    m = x.shape[-1]
    n = m if n is None else int(n)
    if n < m:
        raise ShapeError("rfft", x.shape, (n,), detail="transform length shorter than input")
    out = _to_pair(np.fft.rfft(x, n=n))
    k = n // 2 + 1

    def vjp(g):
        # adjoint of the truncated DFT: Re(sum_k G_k e^{+2 pi i j k / n})
        full = np.zeros(x.shape[:-1] + (n,), dtype=complex)
        full[..., :k] = _to_complex(g)
        return [(np.fft.ifft(full, axis=-1).real * n)[..., :m]]

    return out, vjp


@_op("irfft")
def _irfft(xs, n):
    """Inverse real FFT of [..., K, 2] to n real samples."""
    z = xs[0]
    n = int(n)
    k = z.shape[-2]
    if z.shape[-1] != 2 or k != n // 2 + 1:
        raise ShapeError("irfft", z.shape, (n,), detail="expected [..., n//2+1, 2]")
    out = np.fft.irfft(_to_complex(z), n=n, axis=-1)
    weight = np.full(k, 2.0)
    weight[0] = 1.0
    if n % 2 == 0:
        weight[-1] = 1.0
    # imaginary parts of DC (and Nyquist for even n) do not reach the output
    imag_mask = np.ones(k)
    imag_mask[0] = 0.0
    if n % 2 == 0:
        imag_mask[-1] = 0.0

    def vjp(g):
        gz = np.fft.rfft(g, axis=-1) / n
        return [np.stack([gz.real * weight, gz.imag * weight * imag_mask], axis=-1)]

    return out, vjp


@_op("cmul_conj")
def _cmul_conj(xs):
    """a * conj(b) on [..., 2] complex pairs."""
    a, b = xs
    if a.shape != b.shape or a.shape[-1] != 2:
        raise ShapeError("cmul_conj", a.shape, b.shape)
    ar, ai, br, bi = a[..., 0], a[..., 1], b[..., 0], b[..., 1]
    out = np.stack([ar * br + ai * bi, ai * br - ar * bi], axis=-1)

    def vjp(g):
        gr, gi = g[..., 0], g[..., 1]
        ga = np.stack([gr * br - gi * bi, gr * bi + gi * br], axis=-1)
        gb = np.stack([gr * ar + gi * ai, gr * ai - gi * ar], axis=-1)
        return [ga, gb]

    return out, vjp


@_op("magsq")
def _magsq(xs):
    z = xs[0]
    if z.shape[-1] != 2:
        raise ShapeError("magsq", z.shape, detail="expected trailing complex axis")
    return (z * z).sum(axis=-1), lambda g: [2.0 * z * g[..., None]]


# -- convolution and pooling -----------------------------------------------

def _pad_amounts(size, k, stride, padding):
    if padding == "valid":
        return 0, 0, (size - k) // stride + 1
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + k - size, 0)
        return total // 2, total - total // 2, out
    raise ValueError(f"conv2d: unsupported padding {padding!r}")


@_op("conv2d")
def _conv2d(xs, stride: int = 1, padding: str = "same"):
    """NHWC input, kernel [kh, kw, cin, cout], bias [cout]."""
    x, w, b = xs
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[-1] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError("conv2d", x.shape, w.shape, b.shape)
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    pt, pb, ho = _pad_amounts(h, kh, stride, padding)
    pl, pr, wo = _pad_amounts(wd, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", x.shape, w.shape, detail="kernel larger than input")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wm = w.reshape(kh * kw * cin, cout)
    out = (cols @ wm + b).reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        dw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ wm.T).reshape(n, ho, wo, kh, kw, cin)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
        dx = dxp[:, pt:pt + h, pl:pl + wd, :]
        return [dx, dw, g2.sum(axis=0)]

    return out, vjp


@_op("avgpool2")
def _avgpool2(xs):
    """2x2 average pooling, stride 2, NHWC; odd trailing rows/cols dropped."""
    x = xs[0]
    n, h, w, c = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError("avgpool2", x.shape, detail="spatial extent below 2")
    xc = x[:, : 2 * h2, : 2 * w2]
    out = xc.reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def vjp(g):
        gx = np.zeros_like(x)
        gx[:, : 2 * h2, : 2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return [gx]

    return out, vjp


# ---------------------------------------------------------------------------
# finite-difference verification


def _released(run) -> np.ndarray:
    tape, _, out = run
    value = out.values
    tape.release()
    return value


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_index: tuple[int, ...] | None
    n_checked: int
    max_abs_err: float = 0.0


def grad_check(
    f: Callable[[Tape, DiffTensor], DiffTensor],
    x,
    eps: float = 1e-5,
    tol: float = 1e-4,
    coords: Sequence[tuple[int, ...]] | None = None,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    ``f`` builds a scalar graph on the tape it is handed from a leaf holding
    ``x``. A coordinate counts as matching when its absolute error is at or
    below ``abs_floor``; otherwise the error is relative to the larger of the
    two gradient magnitudes. ``coords`` restricts the check to a subset.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    x0 = np.array(x.values if isinstance(x, DiffTensor) else x, dtype=np.float64)

    def evaluate(values):
        tape = Tape()
        leaf = tape.leaf(values)
        out = f(tape, leaf)
        return tape, leaf, out

    tape, leaf, out = evaluate(x0)
    if not np.isfinite(out.values):
        raise FloatingPointError("forward value is not finite at the base point")
    tape.backward(out)
    analytic = leaf.grad.copy()
    tape.release()

    if coords is None:
        coords = list(np.ndindex(x0.shape))
    worst, worst_idx, worst_abs = 0.0, None, 0.0
    for idx in coords:
        idx = tuple(idx)
        xp = x0.copy()
        xp[idx] += eps
        xm = x0.copy()
        xm[idx] -= eps
        fp = _released(evaluate(xp))
        fm = _released(evaluate(xm))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"forward value is not finite at coordinate {idx}")
        numeric = (fp - fm) / (2 * eps)
        a = analytic[idx]
        err = abs(a - numeric)
        worst_abs = max(worst_abs, float(err))
        rel = 0.0 if err <= abs_floor else err / max(abs(a), abs(numeric))
        if rel > worst or worst_idx is None:
            worst, worst_idx = max(rel, worst), idx
    return GradCheckReport(float(worst), bool(worst <= tol), worst_idx, len(coords), worst_abs)
