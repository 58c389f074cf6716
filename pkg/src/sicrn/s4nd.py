"""Two-axis (time x frequency) state-space layer with separable kernels.

Each axis runs its own diagonal SSM; with the readout factored as
``C = C_time (x) C_freq`` the 2-D impulse response is the outer product of
the two 1-D kernels, so the layer is a causal convolution along time followed
by one along frequency.

Time is always causal. Frequency is bidirectional by default: a low-to-high
pass plus a high-to-low pass with separate parameters, summed. Setting
``freq_rev=None`` gives the unidirectional (causal in both axes) map.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics
from .errors import ArgumentError, UsageError
from .ssm import ContinuousSSM, discretize, init_s4d_lin, materialize_kernel

ORACLE_MAX = 32


@dataclass
class S4ND2D:
    time: ContinuousSSM
    freq: ContinuousSSM
    D: np.ndarray | float = 0.0
    freq_rev: ContinuousSSM | None = None

    @property
    def bidirectional(self) -> bool:
        return self.freq_rev is not None


def init_s4nd(n_time: int, n_freq: int, rng=None, channels: int | None = None,
              bidirectional: bool = True, dt_range=(1e-3, 1e-1)) -> S4ND2D:
    rng = np.random.default_rng() if rng is None else rng
    t = init_s4d_lin(n_time, dt_range, rng, channels)
    f = init_s4d_lin(n_freq, dt_range, rng, channels)
    r = init_s4d_lin(n_freq, dt_range, rng, channels) if bidirectional else None
    return S4ND2D(t, f, t.D, r)


def axis_kernels(p: S4ND2D, L_t: int, L_f: int):
    kt = materialize_kernel(discretize(p.time), L_t).k
    kf = materialize_kernel(discretize(p.freq), L_f).k
    kr = materialize_kernel(discretize(p.freq_rev), L_f).k if p.bidirectional else None
    return kt, kf, kr


def kernel_2d(p: S4ND2D, L_t: int, L_f: int, direction: str = "forward") -> np.ndarray:
    """``K[..., i, j] = k_time[i] * k_freq[j]`` for one frequency direction."""
    if L_t < 1 or L_f < 1:
        raise ArgumentError("kernel extents must be >= 1")
    if direction == "reverse" and not p.bidirectional:
        raise ArgumentError("unidirectional layer has no reverse frequency kernel")
    kt, kf, kr = axis_kernels(p, L_t, L_f)
    kfreq = kf if direction == "forward" else kr
    return kt[..., :, None] * kfreq[..., None, :]


def apply_2d(p: S4ND2D, u, method: str = "fft") -> np.ndarray:
    """Separable causal convolution of ``u[..., T, F]`` plus the ``D`` skip.

    ``method`` selects the time-axis convolution ("fft" or "direct").
    """
    u = np.asarray(u, dtype=float)
    if u.ndim < 2:
        raise ArgumentError("input must be at least [T, F]")
    T, F = u.shape[-2:]
    kt, kf, kr = axis_kernels(p, T, F)
    v = numerics.causal_conv(kt[..., :, None], u, axis=-2, method=method)
    y = numerics.linear_conv_fft(kf[..., None, :], v, axis=-1)
    if p.bidirectional:
        y = y + np.flip(numerics.linear_conv_fft(kr[..., None, :], np.flip(v, -1), axis=-1), -1)
    D = np.asarray(p.D, dtype=float)
    return y + D[..., None, None] * u


def _conjugate_augmented(s: ContinuousSSM):
    # Re<C, x> realized by a complex state with conjugate twins, so the readout is real
    A = np.concatenate([s.A, np.conj(s.A)])
    B = np.concatenate([s.B, np.conj(s.B)])
    C = np.concatenate([s.C, np.conj(s.C)]) / 2
    dt = float(np.exp(s.log_dt))
    den = 1 - dt / 2 * A
    return (1 + dt / 2 * A) / den, dt * B / den, C


def _pde_pass(time: ContinuousSSM, freq: ContinuousSSM, u: np.ndarray) -> np.ndarray:
    a1, b1, c1 = _conjugate_augmented(time)
    a2, b2, c2 = _conjugate_augmented(freq)
    a1, a2 = a1[:, None], a2[None, :]
    b = np.outer(b1, b2)
    c = np.outer(c1, c2)
    T, F = u.shape
    x = np.zeros((T, F) + b.shape, dtype=complex)
    y = np.zeros((T, F))
    zero = np.zeros(b.shape, dtype=complex)
    for i in range(T):
        for j in range(F):
            up = x[i - 1, j] if i else zero
            left = x[i, j - 1] if j else zero
            diag = x[i - 1, j - 1] if i and j else zero
            x[i, j] = a1 * up + a2 * left - a1 * a2 * diag + b * u[i, j]
            y[i, j] = np.sum(c * x[i, j]).real
    return y


def oracle_pde(p: S4ND2D, u) -> np.ndarray:
    """Brute-force 2-D recurrence of the discretized two-axis system.

    Holds the full ``N_time x N_freq`` state at every grid point, starting from
    ``x = 0`` outside the grid, and updates it along both axes at once:

        x[i, j] = A1 x[i-1, j] + A2 x[i, j-1] - A1 A2 x[i-1, j-1] + (B1 (x) B2) u[i, j]

    which factors as ``(1 - A1 z1^-1)(1 - A2 z2^-1) X = B1 B2 U``. Only for a
    single channel on grids up to 32 x 32.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim != 2:
        raise ArgumentError("oracle takes a single [T, F] grid")
    if max(u.shape) > ORACLE_MAX:
        raise UsageError(f"oracle grid {u.shape} too large (max {ORACLE_MAX})")
    if np.ndim(p.time.A) != 1:
        raise UsageError("oracle takes unbatched (single-channel) parameters")
    y = _pde_pass(p.time, p.freq, u)
    if p.bidirectional:
        y = y + np.flip(_pde_pass(p.time, p.freq_rev, np.flip(u, 1)), 1)
    return y + float(p.D) * u
