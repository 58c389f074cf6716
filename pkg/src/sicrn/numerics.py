"""Dense tensor helpers and FFT primitives.

Arrays are plain numpy ndarrays laid out row-major with axis order
(batch, channel, time, frequency). Compute dtype is float64/complex128 unless
a caller explicitly selects the 32-bit pair for speed.

Two FFT families live here:

* :class:`FftPlan` -- a self-contained mixed-radix (Cooley-Tukey, any radix)
  transform with a Bluestein chirp-z fallback for lengths that contain a large
  prime factor. 510 = 2*3*5*17 runs through the mixed-radix path.
* the convolution helpers (:func:`linear_conv_fft` and friends) which run on
  numpy's pocketfft because they sit on the training hot path.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ArgumentError

REAL_DTYPES = {"float64": np.float64, "float32": np.float32}
COMPLEX_OF = {np.dtype(np.float64): np.complex128, np.dtype(np.float32): np.complex64}

# largest prime handled by a direct butterfly; bigger factors go through chirp-z
MAX_RADIX = 31


def real_dtype(name: str) -> np.dtype:
    try:
        return np.dtype(REAL_DTYPES[name])
    except KeyError:
        raise ArgumentError(f"dtype={name!r} unsupported; use float64 or float32") from None


def complex_dtype(real: np.dtype) -> np.dtype:
    return np.dtype(COMPLEX_OF[np.dtype(real)])


def prime_factors(n: int) -> list[int]:
    out, p = [], 2
    while p * p <= n:
        while n % p == 0:
            out.append(p)
            n //= p
        p += 1
    if n > 1:
        out.append(n)
    return out


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@lru_cache(maxsize=256)
def _twiddles(n: int, p: int, sign: int) -> tuple[np.ndarray, np.ndarray]:
    m = n // p
    r = np.arange(p)
    tw = np.exp(sign * 2j * np.pi * (np.outer(r, np.arange(m)) % n) / n)
    butterfly = np.exp(sign * 2j * np.pi * (np.outer(r, r) % p) / p)
    return tw, butterfly


def _mixed_radix(x: np.ndarray, factors: tuple[int, ...], sign: int) -> np.ndarray:
    # decimation in time along the last axis, vectorized over leading axes
    n = x.shape[-1]
    if n == 1:
        return x
    p = factors[0]
    m = n // p
    sub = x.reshape(x.shape[:-1] + (m, p)).swapaxes(-1, -2)
    y = _mixed_radix(np.ascontiguousarray(sub), factors[1:], sign)
    tw, butterfly = _twiddles(n, p, sign)
    out = butterfly @ (y * tw)
    return out.reshape(x.shape)


@lru_cache(maxsize=64)
def _chirp(n: int, sign: int) -> tuple[np.ndarray, np.ndarray, int]:
    # k^2 mod 2n keeps the phase argument small and exact
    k = np.arange(n)
    w = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = next_pow2(2 * n - 1)
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(w)
    b[m - n + 1:] = np.conj(w[1:][::-1])
    fb = _mixed_radix(b, tuple(prime_factors(m)), -1)
    return w, fb, m


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    w, fb, m = _chirp(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * w
    pow2 = tuple(prime_factors(m))
    fa = _mixed_radix(a, pow2, -1)
    conv = np.conj(_mixed_radix(np.conj(fa * fb), pow2, -1)) / m
    return conv[..., :n] * w


@dataclass(frozen=True)
class FftPlan:
    """Reusable DFT of a fixed length along the last axis.

    ``direction="forward"`` computes the unnormalized DFT; ``"inverse"``
    applies the 1/N scaling. ``method`` is ``"mixed-radix"``, ``"chirp-z"``
    or ``"auto"`` (mixed-radix unless a prime factor exceeds ``MAX_RADIX``).
    """

    length: int
    direction: str = "forward"
    method: str = "auto"
    _factors: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.length) != self.length or self.length < 1:
            raise ArgumentError(f"FFT length must be a positive integer, got {self.length}")
        if self.direction not in ("forward", "inverse"):
            raise ArgumentError(f"direction={self.direction!r}")
        factors = tuple(prime_factors(self.length))
        method = self.method
        if method == "auto":
            method = "mixed-radix" if max(factors, default=1) <= MAX_RADIX else "chirp-z"
        if method not in ("mixed-radix", "chirp-z"):
            raise ArgumentError(f"method={self.method!r}")
        object.__setattr__(self, "method", method)
        object.__setattr__(self, "_factors", factors)

    @property
    def sign(self) -> int:
        return -1 if self.direction == "forward" else 1

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=complex)
        if x.shape[-1] != self.length:
            raise ArgumentError(f"input length {x.shape[-1]} != plan length {self.length}")
        if self.method == "mixed-radix":
            y = _mixed_radix(np.ascontiguousarray(x), self._factors, self.sign)
        else:
            y = _bluestein(x, self.sign)
        if self.direction == "inverse":
            y = y / self.length
        return y


def fft(x, plan: FftPlan | None = None) -> np.ndarray:
    """Forward DFT along the last axis."""
    x = np.asarray(x)
    if plan is None:
        plan = FftPlan(x.shape[-1], "forward")
    elif plan.direction != "forward":
        raise ArgumentError("fft() needs a forward plan")
    return plan(x)


def ifft(x, plan: FftPlan | None = None) -> np.ndarray:
    x = np.asarray(x)
    if plan is None:
        plan = FftPlan(x.shape[-1], "inverse")
    elif plan.direction != "inverse":
        raise ArgumentError("ifft() needs an inverse plan")
    return plan(x)


def rfft_frame(frame, win_length: int = 510, plan: FftPlan | None = None) -> np.ndarray:
    """Non-negative-frequency bins (``win_length // 2 + 1``) of a real frame.

    Accepts a batch of frames along leading axes.
    """
    frame = np.asarray(frame)
    if frame.shape[-1] != win_length:
        raise ArgumentError(f"frame length {frame.shape[-1]} != window length {win_length}")
    if plan is None:
        plan = _frame_plan(win_length)
    return plan(frame)[..., : win_length // 2 + 1]


@lru_cache(maxsize=16)
def _frame_plan(n: int) -> FftPlan:
    return FftPlan(n, "forward")


# --------------------------------------------------------------------------
# causal convolution along one axis (hot path, numpy pocketfft)


def _align(kernel, signal, axis: int):
    # left-pad ranks as broadcasting does, so ``axis`` means the same thing for both
    kernel = np.asarray(kernel)
    signal = np.asarray(signal)
    if kernel.size == 0 or signal.size == 0:
        raise ArgumentError("empty kernel or signal")
    nd = max(kernel.ndim, signal.ndim)
    kernel = kernel.reshape((1,) * (nd - kernel.ndim) + kernel.shape)
    signal = signal.reshape((1,) * (nd - signal.ndim) + signal.shape)
    axis = axis % nd
    lk, ls = kernel.shape[axis], signal.shape[axis]
    if lk > ls:
        raise ArgumentError(f"kernel length {lk} exceeds signal length {ls}")
    return kernel, signal, axis, lk, ls


def conv_length(lk: int, ls: int) -> int:
    return next_pow2(lk + ls - 1)


def linear_conv_fft(kernel, signal, axis: int = -1) -> np.ndarray:
    """Causal linear convolution ``y[t] = sum_{j<=t} k[j] u[t-j]``, truncated to len(u).

    ``kernel`` broadcasts against ``signal`` on every axis except ``axis``.
    """
    kernel, signal, axis, lk, ls = _align(kernel, signal, axis)
    n = conv_length(lk, ls)
    spec = np.fft.rfft(kernel, n, axis=axis) * np.fft.rfft(signal, n, axis=axis)
    y = np.fft.irfft(spec, n, axis=axis)
    return np.take(y, np.arange(ls), axis=axis)


def causal_conv_adjoints(kernel, signal, grad, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Adjoints of :func:`linear_conv_fft` with respect to signal and kernel.

    Returns ``(g_signal, g_kernel)`` where both are full broadcast shape; the
    kernel adjoint has ``len(kernel)`` taps along ``axis``.
    """
    kernel, signal, axis, lk, ls = _align(kernel, signal, axis)
    n = conv_length(lk, ls)
    g = np.fft.rfft(grad, n, axis=axis)
    # correlation: g_u[j] = sum_m k[m] g[j+m], g_k[m] = sum_j u[j] g[j+m]
    g_sig = np.fft.irfft(np.conj(np.fft.rfft(kernel, n, axis=axis)) * g, n, axis=axis)
    g_ker = np.fft.irfft(np.conj(np.fft.rfft(signal, n, axis=axis)) * g, n, axis=axis)
    return (np.take(g_sig, np.arange(ls), axis=axis),
            np.take(g_ker, np.arange(lk), axis=axis))


def toeplitz_lower(kernel: np.ndarray, length: int) -> np.ndarray:
    """Lower-triangular Toeplitz matrices ``M[..., t, j] = k[..., t-j]`` (zero for j > t)."""
    lk = kernel.shape[-1]
    lag = np.arange(length)[:, None] - np.arange(length)[None, :]
    valid = (lag >= 0) & (lag < lk)
    m = np.zeros(kernel.shape[:-1] + (length, length), dtype=kernel.dtype)
    m[..., valid] = kernel[..., lag[valid]]
    return m


@lru_cache(maxsize=64)
def _diag_index(length: int, lk: int) -> np.ndarray:
    # flat positions of the sub-diagonals t - j = d; the sentinel n*n points at a zero pad
    t = np.arange(length)[None, :]
    d = np.arange(lk)[:, None]
    idx = t * (length + 1) - d
    return np.where(t >= d, idx, length * length)


def toeplitz_lower_adjoint(grad: np.ndarray, lk: int) -> np.ndarray:
    """Adjoint of :func:`toeplitz_lower`: ``g_k[..., d] = sum_t G[..., t, t-d]``."""
    n = grad.shape[-1]
    flat = grad.reshape(grad.shape[:-2] + (n * n,))
    flat = np.concatenate([flat, np.zeros(flat.shape[:-1] + (1,), flat.dtype)], axis=-1)
    return flat[..., _diag_index(n, lk)].sum(axis=-1)


def direct_causal_conv(kernel, signal, axis: int = -1) -> np.ndarray:
    """Same contract as :func:`linear_conv_fft`, computed as a Toeplitz matmul.

    Every output tap only ever touches past inputs (future taps multiply exact
    zeros), so prefixes are bit-identical under future perturbation.
    """
    kernel, signal, axis, lk, ls = _align(kernel, signal, axis)
    k = np.moveaxis(kernel, axis, -1)
    u = np.moveaxis(signal, axis, -1)
    lead_k, lead_u = k.shape[:-1], u.shape[:-1]
    out_lead = np.broadcast_shapes(lead_k, lead_u)
    # axes where the kernel varies index a batch of distinct Toeplitz matrices
    kax = [i for i, s in enumerate(lead_k) if s != 1]
    rax = [i for i in range(len(out_lead)) if i not in kax]
    u = np.broadcast_to(u, out_lead + (ls,))
    perm = kax + rax
    ut = u.transpose(perm + [len(out_lead)])
    nk = int(np.prod([out_lead[i] for i in kax], dtype=int))
    nr = int(np.prod([out_lead[i] for i in rax], dtype=int))
    ut = ut.reshape(nk, nr, ls)
    mats = toeplitz_lower(k.reshape(nk, lk) if kax else k.reshape(1, lk), ls)
    y = np.matmul(ut, mats.transpose(0, 2, 1))
    y = y.reshape([out_lead[i] for i in perm] + [ls])
    inv = np.argsort(perm + [len(out_lead)])
    y = y.transpose(inv)
    return np.moveaxis(y, -1, axis)


def causal_conv(kernel, signal, axis: int = -1, method: str = "fft") -> np.ndarray:
    if method == "fft":
        return linear_conv_fft(kernel, signal, axis)
    if method == "direct":
        return direct_causal_conv(kernel, signal, axis)
    raise ArgumentError(f"conv method={method!r}; expected fft or direct")
