"""Diagonal state-space layer: bilinear discretization, recurrence and kernel.

Continuous system ``h' = A h + B u``, ``y = Re<C, h> + D u`` with diagonal
complex ``A``. Parameters may carry leading channel axes; the state axis is
always last.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import numerics
from .errors import ArgumentError, NumericError


@dataclass
class ContinuousSSM:
    A: np.ndarray  # complex [..., N], Re(A) < 0 for stability
    B: np.ndarray  # complex [..., N]
    C: np.ndarray  # complex [..., N]
    D: np.ndarray | float = 0.0
    log_dt: np.ndarray | float = np.log(0.01)

    @property
    def dt(self):
        return np.exp(self.log_dt)

    @property
    def state_size(self) -> int:
        return self.A.shape[-1]


@dataclass
class DiscreteSSM:
    Abar: np.ndarray
    Bbar: np.ndarray
    Cbar: np.ndarray


@dataclass
class SSMKernel:
    k: np.ndarray

    @property
    def L(self) -> int:
        return self.k.shape[-1]


def discretize(p: ContinuousSSM) -> DiscreteSSM:
    """Bilinear (Tustin) transform of a diagonal SSM."""
    A = np.asarray(p.A, dtype=complex)
    dt = np.asarray(p.dt, dtype=float)[..., None]
    if np.any(dt <= 0):
        raise ArgumentError("step size must be positive")
    den = 1.0 - 0.5 * dt * A
    bad = np.argwhere(den == 0)
    if bad.size:
        idx = tuple(bad[0])
        raise NumericError(f"singular bilinear step at eigenvalue A{list(idx)} = {A[idx[-A.ndim:]]}")
    Abar = (1.0 + 0.5 * dt * A) / den
    Bbar = dt * np.asarray(p.B, dtype=complex) / den
    return DiscreteSSM(Abar, Bbar, np.asarray(p.C, dtype=complex))


def step_recurrent(d: DiscreteSSM, state, u_k, D=0.0):
    """One recurrence step; returns ``(state', y_k)``."""
    state = np.asarray(state)
    if not np.all(np.isfinite(state)):
        raise NumericError("non-finite SSM state")
    new = d.Abar * state + d.Bbar * np.asarray(u_k)[..., None]
    y = np.sum(d.Cbar * new, axis=-1).real + np.asarray(D) * u_k
    return new, y


def rollout(d: DiscreteSSM, u, D=0.0) -> np.ndarray:
    """Run :func:`step_recurrent` over the last axis of ``u`` from a zero state."""
    u = np.asarray(u, dtype=float)
    state = np.zeros(np.broadcast_shapes(d.Abar.shape, u.shape[:-1] + (1,)), dtype=complex)
    ys = []
    for t in range(u.shape[-1]):
        state, y = step_recurrent(d, state, u[..., t], D)
        ys.append(y)
    return np.stack(ys, axis=-1)


def materialize_kernel(d: DiscreteSSM, L: int) -> SSMKernel:
    """``k[t] = Re(sum_n Cbar_n Abar_n^t Bbar_n)`` for ``t < L``."""
    if L < 1:
        raise ArgumentError(f"kernel length must be >= 1, got {L}")
    k = ad.ssm_kernel(d.Abar, d.Cbar * d.Bbar, L).value
    return SSMKernel(k)


def apply_conv(d: DiscreteSSM, D, u, method: str = "fft") -> np.ndarray:
    """Convolutional mode: ``y = k * u + D u`` (causal, length preserved)."""
    u = np.asarray(u, dtype=float)
    if u.shape[-1] < 1:
        raise ArgumentError("empty input")
    k = materialize_kernel(d, u.shape[-1]).k
    return numerics.causal_conv(k, u, -1, method) + np.asarray(D, dtype=float)[..., None] * u


def init_s4d_lin(N: int, dt_range=(1e-3, 1e-1), rng=None, channels: int | None = None) -> ContinuousSSM:
    """S4D-Lin initialization: ``A_n = -1/2 + i pi n``, ``B = 1``, ``C ~ CN(0, 1/N)``, ``D = 1``."""
    if N < 2 or N % 2:
        raise ArgumentError(f"state size must be even and >= 2, got {N}")
    rng = np.random.default_rng() if rng is None else rng
    lead = () if channels is None else (channels,)
    A = np.broadcast_to(-0.5 + 1j * np.pi * np.arange(N), lead + (N,)).copy()
    B = np.ones(lead + (N,), dtype=complex)
    C = (rng.standard_normal(lead + (N,)) + 1j * rng.standard_normal(lead + (N,))) * np.sqrt(0.5 / N)
    lo, hi = np.log(dt_range[0]), np.log(dt_range[1])
    log_dt = rng.uniform(lo, hi, size=lead) if lead else float(rng.uniform(lo, hi))
    D = np.ones(lead) if lead else 1.0
    return ContinuousSSM(A, B, C, D, log_dt)


# --------------------------------------------------------------------------
# trainable parameterization used inside the network


def ssm_param_arrays(p: ContinuousSSM) -> dict[str, np.ndarray]:
    """Real storage for a (channel-batched) SSM.

    ``Re(A)`` is stored as ``log(-Re(A))`` so every update keeps the system stable.
    """
    if np.any(p.A.real >= 0):
        raise ArgumentError("Re(A) must be negative")
    return {
        "a_log": np.log(-p.A.real),
        "a_im": p.A.imag.copy(),
        "b_re": p.B.real.copy(), "b_im": p.B.imag.copy(),
        "c_re": p.C.real.copy(), "c_im": p.C.imag.copy(),
        "log_dt": np.asarray(p.log_dt, dtype=float).copy(),
    }


def continuous_from_arrays(arrs: dict[str, np.ndarray], D=0.0) -> ContinuousSSM:
    return ContinuousSSM(
        A=-np.exp(arrs["a_log"]) + 1j * arrs["a_im"],
        B=arrs["b_re"] + 1j * arrs["b_im"],
        C=arrs["c_re"] + 1j * arrs["c_im"],
        D=D, log_dt=arrs["log_dt"])


def kernel_var(v: dict[str, ad.Var], L: int) -> ad.Var:
    """Differentiable kernel ``[..., L]`` from the real parameter Vars."""
    A = ad.complex_(ad.neg(ad.exp(v["a_log"])), v["a_im"])
    dt = ad.reshape(ad.exp(v["log_dt"]), v["log_dt"].shape + (1,))
    half = ad.mul(ad.mul(dt, 0.5), A)
    den = ad.sub(1.0, half)
    abar = ad.div(ad.add(1.0, half), den)
    bbar = ad.div(ad.mul(dt, ad.complex_(v["b_re"], v["b_im"])), den)
    weight = ad.mul(ad.complex_(v["c_re"], v["c_im"]), bbar)
    return ad.ssm_kernel(abar, weight, L)
