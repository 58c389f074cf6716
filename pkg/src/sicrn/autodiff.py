"""Reverse-mode automatic differentiation on a linear tape.

A :class:`Tape` records primitive ops in execution order; :meth:`Tape.backward`
walks them once in reverse. Values are numpy arrays. Ops on Vars that carry no
tape simply evaluate, which is how inference and finite-difference probes run.

Gradient convention for complex values: the gradient of a real loss ``L``
with respect to ``z = x + iy`` is stored as ``dL/dx + i dL/dy``. Real and
imaginary parts are therefore independent real parameters, and the adjoint
of a linear map ``M`` is ``M^H``. Gradients flowing into a real-valued input
keep only their real part.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import numerics
from .errors import ArgumentError, NumericError, UsageError


class Var:
    """A value tracked (or not) by a tape."""

    __slots__ = ("value", "tape", "id", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape: "Tape | None" = None, id: int = -1, name: str | None = None):
        self.value = np.asarray(value)
        self.tape = tape
        self.id = id
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def grad(self) -> np.ndarray:
        if self.tape is None:
            raise UsageError("Var is not on a tape")
        return self.tape.grad(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, dtype={self.dtype}, id={self.id})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)
    __getitem__ = lambda self, idx: getitem(self, idx)


@dataclass
class _Node:
    id: int
    kind: str
    parents: tuple
    vjp: Callable | None


class Tape:
    """Ordered record of primitive ops; single-threaded."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._grads: dict[int, np.ndarray] = {}
        self._leaves: dict[int, Var] = {}

    def __len__(self):
        return len(self._nodes)

    def kinds(self) -> list[str]:
        return [n.kind for n in self._nodes]

    def var(self, value, name: str | None = None) -> Var:
        """Create a leaf (parameter or input) on this tape."""
        v = Var(value, self, len(self._nodes), name)
        self._nodes.append(_Node(v.id, "leaf", (), None))
        self._leaves[v.id] = v
        return v

    def _append(self, kind: str, parents: tuple, value, vjp) -> Var:
        v = Var(value, self, len(self._nodes))
        self._nodes.append(_Node(v.id, kind, parents, vjp))
        return v

    def backward(self, loss: Var) -> None:
        if not isinstance(loss, Var) or loss.tape is not self:
            raise UsageError("loss must be a Var recorded on this tape")
        if loss.value.size != 1 or loss.value.ndim != 0:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self._nodes[: loss.id + 1]):
            if node.vjp is None:
                continue
            g = grads.pop(node.id, None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not isinstance(parent, Var) or parent.tape is not self:
                    continue
                pg = _fit(pg, parent.value)
                prev = grads.get(parent.id)
                grads[parent.id] = pg if prev is None else prev + pg
        self._grads = {i: g for i, g in grads.items() if i in self._leaves}

    def clear(self) -> None:
        """Drop recorded nodes; Vars and tape reference each other, so this frees memory early."""
        self._nodes.clear()
        self._leaves.clear()

    def grad(self, var: Var) -> np.ndarray:
        g = self._grads.get(var.id)
        return np.zeros_like(var.value) if g is None else g


def _fit(g: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Sum broadcast axes away and drop the imaginary part for real inputs."""
    g = np.asarray(g)
    while g.ndim > like.ndim:
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, ls) in enumerate(zip(g.shape, like.shape)) if ls == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if not np.iscomplexobj(like) and np.iscomplexobj(g):
        g = g.real
    if g.dtype != like.dtype:
        g = g.astype(like.dtype)
    return g


def _val(x):
    if isinstance(x, Var):
        return x.value
    # python scalars stay weakly typed so they never promote float32 arrays
    return x if isinstance(x, (int, float, complex)) else np.asarray(x)


def _conj(v):
    return np.conj(v) if np.iscomplexobj(v) else v


def record(kind: str, inputs: Sequence, value, vjp: Callable) -> Var:
    """Wrap ``value`` in a Var, recording it when any input lives on a tape.

    ``vjp(g)`` maps the output gradient to one gradient (or None) per input.
    """
    tape = None
    for x in inputs:
        t = x.tape if isinstance(x, Var) else None
        if t is None:
            continue
        if tape is None:
            tape = t
        elif t is not tape:
            raise UsageError(f"{kind}: inputs live on different tapes")
    if tape is None:
        return Var(value)
    return tape._append(kind, tuple(inputs), value, vjp)


def constant(value) -> Var:
    return Var(value)


# ----------------------------------------------------------------- arithmetic


def add(a, b) -> Var:
    return record("add", (a, b), _val(a) + _val(b), lambda g: (g, g))


def sub(a, b) -> Var:
    return record("sub", (a, b), _val(a) - _val(b), lambda g: (g, -g))


def neg(a) -> Var:
    return record("neg", (a,), -_val(a), lambda g: (-g,))


def mul(a, b) -> Var:
    va, vb = _val(a), _val(b)
    kind = "complex-mul" if np.iscomplexobj(va) or np.iscomplexobj(vb) else "mul"
    return record(kind, (a, b), va * vb, lambda g: (g * _conj(vb), g * _conj(va)))


def div(a, b) -> Var:
    va, vb = _val(a), _val(b)
    out = va / vb
    return record("div", (a, b), out, lambda g: (g / _conj(vb), -g * _conj(out / vb)))


def matmul(a, b) -> Var:
    va, vb = _val(a), _val(b)
    if va.ndim < 2 or vb.ndim < 2:
        raise ArgumentError("matmul operands must be at least 2-D")

    def vjp(g):
        return (g @ _conj(vb).swapaxes(-1, -2), _conj(va).swapaxes(-1, -2) @ g)

    return record("matmul", (a, b), va @ vb, vjp)


def einsum(subscripts: str, a, b) -> Var:
    """Two-operand einsum; every index of one operand must appear in the other or the output."""
    ins, out = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb + out), (sb, sa + out)):
        if not set(s) <= set(other):
            raise ArgumentError(f"einsum {subscripts!r}: index only on one input")
    va, vb = _val(a), _val(b)

    def vjp(g):
        return (np.einsum(f"{out},{sb}->{sa}", g, _conj(vb)),
                np.einsum(f"{sa},{out}->{sb}", _conj(va), g))

    return record("einsum", (a, b), np.einsum(subscripts, va, vb), vjp)


# ----------------------------------------------------------------- elementwise


def exp(x) -> Var:
    y = np.exp(_val(x))
    return record("exp", (x,), y, lambda g: (g * _conj(y),))


def log(x) -> Var:
    v = _val(x)
    return record("log", (x,), np.log(v), lambda g: (g / _conj(v),))


def log10(x) -> Var:
    v = _val(x)
    return record("log10", (x,), np.log10(v), lambda g: (g / (v * np.log(10.0)),))


def square(x) -> Var:
    v = _val(x)
    return record("square", (x,), v * v, lambda g: (2.0 * g * _conj(v),))


def sqrt(x) -> Var:
    y = np.sqrt(_val(x))
    return record("sqrt", (x,), y, lambda g: (g / (2.0 * y),))


def abs2(x) -> Var:
    """|x|^2 for real or complex x."""
    v = _val(x)
    return record("abs2", (x,), (v * _conj(v)).real, lambda g: (2.0 * g * v,))


def tanh(x) -> Var:
    y = np.tanh(_val(x))
    return record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(x) -> Var:
    y = expit(_val(x))
    return record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def elu_value(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu(x) -> Var:
    v = _val(x)
    y = elu_value(v)
    return record("elu", (x,), y, lambda g: (g * np.where(v > 0, 1.0, y + 1.0),))


def real(x) -> Var:
    return record("real", (x,), np.real(_val(x)), lambda g: (g,))


def imag(x) -> Var:
    return record("imag", (x,), np.imag(_val(x)), lambda g: (1j * g,))


def conj(x) -> Var:
    return record("conj", (x,), _conj(_val(x)), lambda g: (_conj(g),))


def complex_(re, im) -> Var:
    vr, vi = _val(re), _val(im)
    out = vr + 1j * vi
    out = out.astype(numerics.complex_dtype(np.result_type(vr, vi)), copy=False)
    return record("complex", (re, im), out, lambda g: (g.real, g.imag))


# ----------------------------------------------------------------- shape ops


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(None), type(Ellipsis))) for i in items)


def getitem(x, idx) -> Var:
    v = _val(x)

    def vjp(g):
        z = np.zeros(v.shape, dtype=np.result_type(v, g))
        if _is_basic_index(idx):
            z[idx] = g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return record("slice", (x,), v[idx], vjp)


def reshape(x, shape) -> Var:
    v = _val(x)
    return record("reshape", (x,), v.reshape(shape), lambda g: (g.reshape(v.shape),))


def transpose(x, axes) -> Var:
    inv = np.argsort(axes)
    return record("transpose", (x,), np.transpose(_val(x), axes), lambda g: (np.transpose(g, inv),))


def flip(x, axis: int) -> Var:
    return record("flip", (x,), np.flip(_val(x), axis), lambda g: (np.flip(g, axis),))


def concat(xs: Sequence, axis: int = 0) -> Var:
    vals = [_val(x) for x in xs]
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return record("concat", tuple(xs), np.concatenate(vals, axis),
                  lambda g: tuple(np.split(g, bounds, axis)))


def stack(xs: Sequence, axis: int = 0) -> Var:
    vals = [_val(x) for x in xs]
    n = len(vals)
    return record("stack", tuple(xs), np.stack(vals, axis),
                  lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad(x, pad_width) -> Var:
    v = _val(x)
    crop = tuple(slice(lo, lo + s) for (lo, _), s in zip(pad_width, v.shape))
    return record("pad", (x,), np.pad(v, pad_width), lambda g: (g[crop],))


def sum(x, axis=None, keepdims: bool = False) -> Var:  # noqa: A001 - mirrors numpy
    v = _val(x)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, v.shape),)

    return record("sum", (x,), np.sum(v, axis=axis, keepdims=keepdims), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Var:
    v = _val(x)
    n = v.size // np.sum(v, axis=axis, keepdims=keepdims).size

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, v.shape),)

    return record("mean", (x,), np.mean(v, axis=axis, keepdims=keepdims), vjp)


# ----------------------------------------------------------------- transforms


def fft(x, axis: int = -1) -> Var:
    """Unnormalized DFT; adjoint is N times the inverse transform."""
    v = _val(x)
    n = v.shape[axis]
    return record("fft", (x,), np.fft.fft(v, axis=axis), lambda g: (n * np.fft.ifft(g, axis=axis),))


def ifft(x, axis: int = -1) -> Var:
    v = _val(x)
    n = v.shape[axis]
    return record("ifft", (x,), np.fft.ifft(v, axis=axis), lambda g: (np.fft.fft(g, axis=axis) / n,))


def rfft(x, n: int | None = None, axis: int = -1) -> Var:
    v = _val(x)
    n = v.shape[axis] if n is None else n
    ls = v.shape[axis]

    def vjp(g):
        full = np.zeros(g.shape[:axis % g.ndim] + (n,) + g.shape[axis % g.ndim + 1:], dtype=g.dtype)
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(0, g.shape[axis])
        full[tuple(idx)] = g
        back = n * np.fft.ifft(full, axis=axis)
        return (np.take(back, np.arange(ls), axis=axis).real,)

    return record("rfft", (x,), np.fft.rfft(v, n, axis=axis), vjp)


def irfft(x, n: int, axis: int = -1) -> Var:
    """Inverse real FFT; imaginary parts of the DC and Nyquist bins are ignored."""
    v = _val(x)
    nb = v.shape[axis]
    weight = np.full(nb, 2.0)
    weight[0] = 1.0
    if n % 2 == 0 and nb == n // 2 + 1:
        weight[-1] = 1.0
    shape = [1] * v.ndim
    shape[axis] = nb
    weight = weight.reshape(shape) / n

    def vjp(g):
        return (np.fft.rfft(g, n, axis=axis) * weight,)

    return record("irfft", (x,), np.fft.irfft(v, n, axis=axis), vjp)


def causal_conv(kernel, signal, axis: int = -1, method: str = "fft") -> Var:
    """Causal linear convolution along ``axis`` (kernel broadcasts elsewhere)."""
    k, u = _val(kernel), _val(signal)
    y = numerics.causal_conv(k, u, axis, method)

    def vjp(g):
        g_u, g_k = numerics.causal_conv_adjoints(k, u, g, axis)
        return (g_k, g_u)

    return record("causal-conv", (kernel, signal), y, vjp)


def toeplitz(kernel, length: int) -> Var:
    """Lower-triangular Toeplitz operator ``M[..., t, j] = k[..., t-j]`` of size ``length``."""
    k = _val(kernel)
    lk = k.shape[-1]
    if lk > length:
        raise ArgumentError(f"kernel length {lk} exceeds operator size {length}")
    m = numerics.toeplitz_lower(k, length)
    return record("toeplitz", (kernel,), m, lambda g: (numerics.toeplitz_lower_adjoint(g, lk),))


def ssm_kernel(abar, weight, length: int) -> Var:
    """``k[..., t] = Re(sum_n weight[..., n] * abar[..., n]**t)`` for t < length.

    Powers come from iterated elementwise multiplication (cumulative product).
    """
    a, w = _val(abar), _val(weight)
    if length < 1:
        raise ArgumentError("kernel length must be >= 1")
    powers = np.empty(a.shape + (length,), dtype=np.result_type(a, w))
    powers[..., 0] = 1.0
    if length > 1:
        powers[..., 1:] = a[..., None]
        powers = np.cumprod(powers, axis=-1)
    k = np.einsum("...n,...nt->...t", w, powers).real
    if not np.all(np.isfinite(k)):
        raise NumericError("SSM kernel overflowed (unstable state matrix?)")

    def vjp(g):
        g = g[..., None, :]
        g_w = np.sum(g * _conj(powers), axis=-1)
        t = np.arange(1, length)
        g_a = _conj(w) * np.sum(g[..., 1:] * t * _conj(powers[..., :-1]), axis=-1)
        return (g_a, g_w)

    return record("ssm-kernel", (abar, weight), k, vjp)


def overlap_add(frames, hop: int) -> Var:
    """Sum frames ``[..., T, n]`` at stride ``hop`` into ``[..., (T-1)*hop + n]``."""
    v = _val(frames)
    t_frames, n = v.shape[-2], v.shape[-1]
    length = (t_frames - 1) * hop + n
    out = np.zeros(v.shape[:-2] + (length,), dtype=v.dtype)
    for t in range(t_frames):
        out[..., t * hop: t * hop + n] += v[..., t, :]

    def vjp(g):
        win = np.lib.stride_tricks.sliding_window_view(g, n, axis=-1)
        return (np.array(win[..., ::hop, :][..., :t_frames, :]),)

    return record("overlap-add", (frames,), out, vjp)


# ----------------------------------------------------------------- layers


def conv2d(x, w, b) -> Var:
    """Stride-1 2-D convolution over (time, freq) of ``x[B, Cin, T, F]``.

    Time padding is causal (``kt - 1`` zeros in the past); frequency padding is
    split so F is preserved. ``w`` is ``[Cout, Cin, kt, kf]``, ``b`` is ``[Cout]``.
    """
    vx, vw, vb = _val(x), _val(w), _val(b)
    if vx.ndim != 4 or vw.ndim != 4 or vx.shape[1] != vw.shape[1]:
        raise ArgumentError(f"conv2d shape mismatch: x{vx.shape} w{vw.shape}")
    _, _, t_len, f_len = vx.shape
    kt, kf = vw.shape[2:]
    lo = (kf - 1) // 2
    xp = np.pad(vx, ((0, 0), (0, 0), (kt - 1, 0), (lo, kf - 1 - lo)))
    taps = [(a, c) for a in range(kt) for c in range(kf)]
    # im2col: one [B, Cin, taps, T, F] gather, one contraction
    cols = np.stack([xp[:, :, a:a + t_len, c:c + f_len] for a, c in taps], axis=2)
    wk = vw.reshape(vw.shape[0], vw.shape[1], kt * kf)
    y = np.tensordot(wk, cols, axes=([1, 2], [1, 2])).transpose(1, 0, 2, 3) + vb[None, :, None, None]

    def vjp(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 3, 4])).reshape(vw.shape)
        gcols = np.tensordot(wk, g, axes=([0], [1]))  # [Cin, taps, B, T, F]
        gx = np.zeros((xp.shape[1], xp.shape[0]) + xp.shape[2:], dtype=gcols.dtype)
        for j, (a, c) in enumerate(taps):
            gx[:, :, a:a + t_len, c:c + f_len] += gcols[:, j]
        gx = gx.transpose(1, 0, 2, 3)
        return (gx[:, :, kt - 1:, lo:lo + f_len], gw, g.sum(axis=(0, 2, 3)))

    return record("conv2d-stride1", (x, w, b), y, vjp)


def pointwise_conv(x, w, b) -> Var:
    """Per-position channel mixing: ``y[b,o,t,f] = sum_i w[o,i] x[b,i,t,f] + b[o]``."""
    vx, vw, vb = _val(x), _val(w), _val(b)
    if vx.ndim != 4 or vx.shape[1] != vw.shape[1]:
        raise ArgumentError(f"pointwise conv shape mismatch: x{vx.shape} w{vw.shape}")
    y = np.tensordot(vw, vx, axes=([1], [1])).transpose(1, 0, 2, 3) + vb[None, :, None, None]

    def vjp(g):
        gx = np.tensordot(vw, g, axes=([0], [1])).transpose(1, 0, 2, 3)
        gw = np.tensordot(g, vx, axes=([0, 2, 3], [0, 2, 3]))
        return (gx, gw, g.sum(axis=(0, 2, 3)))

    return record("pointwise-conv", (x, w, b), y, vjp)


def batchnorm(x, gamma, beta, running: dict, training: bool,
              momentum: float = 0.1, eps: float = 1e-5) -> Var:
    """Per-channel batch norm over (batch, time, freq) of ``x[B, C, T, F]``.

    Training mode normalizes with batch statistics and updates ``running``
    in place; inference mode is the frozen affine map.
    """
    vx, vg, vb = _val(x), _val(gamma), _val(beta)
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if not training:
        inv = 1.0 / np.sqrt(running["var"] + eps)
        xhat = (vx - running["mean"].reshape(shape)) * inv.reshape(shape)
        y = xhat * vg.reshape(shape) + vb.reshape(shape)

        def vjp_eval(g):
            return (g * (vg * inv).reshape(shape), (g * xhat).sum(axes), g.sum(axes))

        return record("batchnorm", (x, gamma, beta), y, vjp_eval)

    mu = vx.mean(axis=axes)
    var = vx.var(axis=axes)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (vx - mu.reshape(shape)) * inv.reshape(shape)
    y = xhat * vg.reshape(shape) + vb.reshape(shape)
    count = vx.size // vx.shape[1]
    unbiased = var * count / max(count - 1, 1)
    running["mean"] = (1 - momentum) * running["mean"] + momentum * mu
    running["var"] = (1 - momentum) * running["var"] + momentum * unbiased

    def vjp(g):
        gm = g.mean(axis=axes, keepdims=True)
        gxm = (g * xhat).mean(axis=axes, keepdims=True)
        gx = (vg * inv).reshape(shape) * (g - gm - xhat * gxm)
        return (gx, (g * xhat).sum(axes), g.sum(axes))

    return record("batchnorm", (x, gamma, beta), y, vjp)


def lstm_cell(x, h, c, w_in, w_rec, b) -> tuple[Var, Var]:
    """One LSTM step composed from primitives; gate order (input, forget, cell, output)."""
    z = add(add(matmul(x, w_in), matmul(h, w_rec)), b)
    hid = _val(w_rec).shape[0]
    i = sigmoid(getitem(z, (Ellipsis, slice(0, hid))))
    f = sigmoid(getitem(z, (Ellipsis, slice(hid, 2 * hid))))
    g = tanh(getitem(z, (Ellipsis, slice(2 * hid, 3 * hid))))
    o = sigmoid(getitem(z, (Ellipsis, slice(3 * hid, 4 * hid))))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return h_new, c_new


def lstm_sequence(xw, w_rec) -> Var:
    """Run the LSTM recurrence over ``xw[B, T, 4H]`` (input projection plus bias).

    Zero initial state. Fused op with a hand-written backward pass through
    time; it agrees with repeated :func:`lstm_cell` application.
    """
    vx, u = _val(xw), _val(w_rec)
    bsz, t_len, four_h = vx.shape
    hid = four_h // 4
    dtype = np.result_type(vx, u)
    h = np.zeros((bsz, hid), dtype)
    c = np.zeros((bsz, hid), dtype)
    hs = np.empty((bsz, t_len, hid), dtype)
    cache = []
    for t in range(t_len):
        z = vx[:, t] + h @ u
        i = expit(z[:, :hid])
        f = expit(z[:, hid:2 * hid])
        g = np.tanh(z[:, 2 * hid:3 * hid])
        o = expit(z[:, 3 * hid:])
        c_prev, h_prev = c, h
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        cache.append((i, f, g, o, c_prev, h_prev, tc))

    def vjp(gh):
        g_x = np.empty_like(vx, dtype=np.result_type(vx, gh))
        g_u = np.zeros_like(u)
        dh_next = np.zeros((bsz, hid), dtype)
        dc_next = np.zeros((bsz, hid), dtype)
        for t in range(t_len - 1, -1, -1):
            i, f, g, o, c_prev, h_prev, tc = cache[t]
            dh = gh[:, t] + dh_next
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = np.concatenate([dc * g * i * (1.0 - i), dc * c_prev * f * (1.0 - f),
                                 dc * i * (1.0 - g * g), do * o * (1.0 - o)], axis=1)
            g_x[:, t] = dz
            g_u += h_prev.T @ dz
            dh_next = dz @ u.T
            dc_next = dc * f
        return (g_x, g_u)

    return record("lstm", (xw, w_rec), hs, vjp)


# ----------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    errors: list[float]
    tol: float
    names: list[str] = field(default_factory=list)

    @property
    def worst(self) -> float:
        return max(self.errors, default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol


def rel_error(a, b, floor: float = 1e-8) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``; the floor keeps near-zero gradients from blowing up."""
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def _stencil(f, params, pi, j, h) -> float:
    vals = {}
    for step in (h, -h, 2 * h, -2 * h):
        probe = [q.copy() for q in params]
        probe[pi].ravel()[j] += step
        out = float(f(*[Var(q) for q in probe]).value)
        if not np.isfinite(out):
            raise NumericError(f"non-finite output probing parameter {pi} index {j}")
        vals[step] = out
    # fourth-order central difference
    return (8 * (vals[h] - vals[-h]) - (vals[2 * h] - vals[-2 * h])) / (12 * h)


def grad_check(f: Callable[..., Var], params: Sequence[np.ndarray], h=1e-3,
               tol: float = 1e-5, n_samples: int | None = None, rng=None,
               names: Sequence[str] | None = None, floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*vars)`` with finite differences.

    ``n_samples`` limits the number of coordinates probed per parameter
    (chosen with ``rng``); ``None`` probes every coordinate. Derivatives use
    the fourth-order central stencil. ``h`` may be a decreasing sequence of
    steps: each coordinate then uses the smaller step of the adjacent pair
    whose estimates agree best, which balances truncation against rounding
    without looking at the tape gradient. Entries smaller than the rounding
    noise of the quotient (about ``1e3 * eps * |f| / h``) are compared
    against that noise level instead of their own magnitude.
    """
    steps = [float(x) for x in np.atleast_1d(h)]
    params = [np.array(p, dtype=np.float64) for p in params]
    tape = Tape()
    leaves = [tape.var(p) for p in params]
    loss = f(*leaves)
    if not np.isfinite(loss.value):
        raise NumericError("non-finite loss at the base point")
    tape.backward(loss)
    base_floor = max(floor, 1e3 * np.finfo(np.float64).eps * max(abs(float(loss.value)), 1.0))
    rng = np.random.default_rng(0) if rng is None else rng
    errors = []
    for pi, (p, leaf) in enumerate(zip(params, leaves)):
        g_ad = leaf.grad.ravel()
        idx = np.arange(p.size)
        if n_samples is not None and n_samples < p.size:
            idx = rng.choice(p.size, n_samples, replace=False)
        worst = 0.0
        for j in idx:
            est = [_stencil(f, params, pi, j, s) for s in steps]
            k = 0
            if len(est) > 1:
                k = 1 + int(np.argmin(np.abs(np.diff(est))))
            g_fd = est[k]
            worst = max(worst, float(rel_error(g_ad[j], g_fd, max(floor, base_floor / steps[k]))))
        errors.append(worst)
    return GradCheckReport(errors, tol, list(names) if names else [])
