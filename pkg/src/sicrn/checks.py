"""Finite-difference gradient checks for every tape primitive and the full model.

Each per-op case reduces the op output to a real scalar with fixed random
weights, so every output element contributes to the checked gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .blocks import Context, ParamStore, S4NDLayer
from .dsp_io import StftConfig, istft_var, stft_array
from .model import SICRNConfig, SICRNModel
from .ssm import init_s4d_lin, kernel_var, ssm_param_arrays

OP_TOL = 1e-5
END_TO_END_TOL = 1e-4
FD_LADDER = (1e-2, 1e-3, 1e-4, 1e-5)


class Projector:
    """``sum(w * y)`` with weights drawn once per output shape (real and imaginary parts separately)."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.weights: dict = {}

    def __call__(self, y: ad.Var) -> ad.Var:
        key = (y.shape, np.iscomplexobj(y.value))
        if key not in self.weights:
            self.weights[key] = [self.rng.standard_normal(y.shape) for _ in range(1 + key[1])]
        w = self.weights[key]
        if key[1]:
            return ad.add(ad.sum(ad.mul(ad.real(y), w[0])), ad.sum(ad.mul(ad.imag(y), w[1])))
        return ad.sum(ad.mul(y, w[0]))


@dataclass
class Case:
    name: str
    build: Callable  # rng -> (f, params)


def _cplx(re, im):
    return ad.complex_(re, im)


def _unary(fn, make=lambda rng, shape: rng.standard_normal(shape)):
    def build(rng):
        proj = Projector(int(rng.integers(2**31)))
        return (lambda x: proj(fn(x))), [make(rng, (3, 4))]
    return build


def _binary(fn, shapes=((3, 4), (3, 4)), make=None):
    def build(rng):
        proj = Projector(int(rng.integers(2**31)))
        params = [make(rng, s) if make else rng.standard_normal(s) for s in shapes]
        return (lambda a, b: proj(fn(a, b))), params
    return build


def _complex_unary(fn, shape=(3, 5)):
    def build(rng):
        proj = Projector(int(rng.integers(2**31)))
        return (lambda re, im: proj(fn(_cplx(re, im)))), [rng.standard_normal(shape), rng.standard_normal(shape)]
    return build


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.2, 2.0, shape)


def _conv_case(method):
    def build(rng):
        proj = Projector(int(rng.integers(2**31)))
        return (lambda k, u: proj(ad.causal_conv(k, u, axis=-1, method=method))), [
            rng.standard_normal((2, 6)), rng.standard_normal((3, 2, 9))]
    return build


def _ssm_kernel_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    mag = rng.uniform(0.3, 0.9, 4)
    ang = rng.uniform(-np.pi, np.pi, 4)

    def f(ar, ai, wr, wi):
        return proj(ad.ssm_kernel(_cplx(ar, ai), _cplx(wr, wi), 12))

    return f, [mag * np.cos(ang), mag * np.sin(ang), rng.standard_normal(4), rng.standard_normal(4)]


def _batchnorm_case(training):
    def build(rng):
        proj = Projector(int(rng.integers(2**31)))
        running = {"mean": rng.standard_normal(3), "var": rng.uniform(0.5, 2, 3)}

        def f(x, g, b):
            return proj(ad.batchnorm(x, g, b, dict(running), training))

        return f, [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal(3), rng.standard_normal(3)]
    return build


def _lstm_cell_case(rng):
    proj = Projector(int(rng.integers(2**31)))

    def f(x, h, c, w_in, w_rec, b):
        h2, c2 = ad.lstm_cell(x, h, c, w_in, w_rec, b)
        return ad.add(proj(h2), proj(c2))

    return f, [rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4)),
               rng.standard_normal((3, 16)) * 0.5, rng.standard_normal((4, 16)) * 0.5, rng.standard_normal(16)]


def _lstm_seq_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    return (lambda xw, u: proj(ad.lstm_sequence(xw, u))), [
        rng.standard_normal((2, 5, 12)), rng.standard_normal((3, 12)) * 0.5]


def _conv2d_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    return (lambda x, w, b: proj(ad.conv2d(x, w, b))), [
        rng.standard_normal((2, 3, 5, 6)), rng.standard_normal((4, 3, 2, 3)), rng.standard_normal(4)]


def _pointwise_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    return (lambda x, w, b: proj(ad.pointwise_conv(x, w, b))), [
        rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3)), rng.standard_normal(2)]


def _kernel_var_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    arrs = ssm_param_arrays(init_s4d_lin(4, (1e-2, 1e-1), rng, channels=2))
    keys = sorted(arrs)

    def f(*vals):
        return proj(kernel_var(dict(zip(keys, vals)), 10))

    return f, [arrs[k] for k in keys]


def _s4nd_layer_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    store = ParamStore("float64")
    layer = S4NDLayer(store, "s4nd", 2, (4, 4), True, rng, (1e-2, 1e-1))
    names = list(store.params)

    def f(x, *vals):
        ctx = Context(store, x.tape, training=True, time_method="direct")
        ctx.bind(dict(zip(names, vals)))
        ctx.extent = x.shape[2:]
        return proj(layer(ctx, x))

    return f, [rng.standard_normal((2, 2, 6, 5))] + [store.params[n].copy() for n in names]


def _istft_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    cfg = StftConfig(16, 4)
    shape = (2, 5, cfg.n_bins)
    return (lambda re, im: proj(istft_var(_cplx(re, im), cfg))), [
        rng.standard_normal(shape), rng.standard_normal(shape)]


def _si_snr_case(rng):
    from .training import si_snr_var
    target = rng.standard_normal((2, 32))
    return (lambda est: ad.sum(si_snr_var(est, target))), [target + 0.5 * rng.standard_normal((2, 32))]


def _einsum_case(rng):
    proj = Projector(int(rng.integers(2**31)))
    return (lambda a, b: proj(ad.einsum("bij,jk->bik", a, b))), [
        rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))]


CASES = [
    Case("add", _binary(ad.add, ((3, 4), (4,)))),
    Case("sub", _binary(ad.sub, ((3, 4), (3, 1)))),
    Case("neg", _unary(ad.neg)),
    Case("mul", _binary(ad.mul)),
    Case("complex-mul", lambda rng: _complex_mul(rng)),
    Case("div", _binary(ad.div, make=_away_from_zero)),
    Case("matmul", _binary(ad.matmul, ((2, 3, 4), (4, 5)))),
    Case("einsum", _einsum_case),
    Case("exp", _unary(ad.exp)),
    Case("log", _unary(ad.log, _positive)),
    Case("log10", _unary(ad.log10, _positive)),
    Case("square", _unary(ad.square)),
    Case("sqrt", _unary(ad.sqrt, _positive)),
    Case("abs2", _complex_unary(ad.abs2)),
    Case("tanh", _unary(ad.tanh)),
    Case("sigmoid", _unary(ad.sigmoid)),
    Case("elu", _unary(ad.elu, _away_from_zero)),
    Case("conj", _complex_unary(ad.conj)),
    Case("slice", _unary(lambda x: ad.getitem(x, (slice(1, 3), slice(None, None, 2))))),
    Case("reshape", _unary(lambda x: ad.reshape(x, (2, 6)))),
    Case("transpose", _unary(lambda x: ad.transpose(x, (1, 0)))),
    Case("flip", _unary(lambda x: ad.flip(x, 1))),
    Case("concat", _binary(lambda a, b: ad.concat([a, b], axis=1), ((3, 2), (3, 4)))),
    Case("stack", _binary(lambda a, b: ad.stack([a, b], axis=1))),
    Case("pad", _unary(lambda x: ad.pad(x, ((1, 0), (2, 1))))),
    Case("sum", _unary(lambda x: ad.sum(x, axis=0, keepdims=True))),
    Case("mean", _unary(lambda x: ad.mean(x, axis=1))),
    Case("fft", _complex_unary(lambda z: ad.fft(z, axis=-1))),
    Case("ifft", _complex_unary(lambda z: ad.ifft(z, axis=-1))),
    Case("rfft", _unary(lambda x: ad.rfft(x, axis=-1))),
    Case("irfft", _complex_unary(lambda z: ad.irfft(z, 8, axis=-1))),
    Case("causal-conv-fft", _conv_case("fft")),
    Case("causal-conv-direct", _conv_case("direct")),
    Case("toeplitz", _unary(lambda k: ad.toeplitz(k, 6))),
    Case("ssm-kernel", _ssm_kernel_case),
    Case("overlap-add", _unary(lambda x: ad.overlap_add(ad.reshape(x, (3, 4)), 2))),
    Case("conv2d-stride1", _conv2d_case),
    Case("pointwise-conv", _pointwise_case),
    Case("batchnorm-train", _batchnorm_case(True)),
    Case("batchnorm-eval", _batchnorm_case(False)),
    Case("lstm-cell", _lstm_cell_case),
    Case("lstm-sequence", _lstm_seq_case),
    Case("ssm-kernel-params", _kernel_var_case),
    Case("s4nd-layer", _s4nd_layer_case),
    Case("istft", _istft_case),
    Case("si-snr", _si_snr_case),
]


def _complex_mul(rng):
    proj = Projector(int(rng.integers(2**31)))
    shape = (3, 4)
    return (lambda ar, ai, br, bi: proj(ad.mul(_cplx(ar, ai), _cplx(br, bi)))), [
        rng.standard_normal(shape) for _ in range(4)]


def check_ops(tol: float = OP_TOL, seed: int = 0, only: list[str] | None = None) -> dict[str, ad.GradCheckReport]:
    """Run every per-op case; returns ``{name: report}``."""
    out = {}
    for case in CASES:
        if only and case.name not in only:
            continue
        rng = np.random.default_rng([seed, len(out)])
        f, params = case.build(rng)
        out[case.name] = ad.grad_check(f, params, tol=tol)
    return out


def tiny_config(**overrides) -> SICRNConfig:
    """Smallest network exercising every block type (double precision)."""
    base = dict(freq_bins=9, sic_widths=(2, 2), ic_layers=2, s4nd_blocks=1, lstm_layers=1,
                lstm_hidden=4, s4nd_state=(2, 2), dtype="float64", dt_min=1e-2, dt_max=1e-1)
    base.update(overrides)
    return SICRNConfig(**base)


def check_end_to_end(cfg: SICRNConfig | None = None, tol: float = END_TO_END_TOL, seed: int = 0,
                     n_samples: int = 3, frames: int = 6) -> ad.GradCheckReport:
    """FD check of ``-SI-SNR(istft(model(stft(noisy))), clean)`` w.r.t. every parameter tensor.

    Probes ``n_samples`` coordinates per tensor. Runs in float64 regardless of ``cfg.dtype``.
    """
    from .training import loss

    cfg = cfg or tiny_config()
    if cfg.dtype != "float64":
        cfg = SICRNConfig(**{**cfg.to_dict(), "dtype": "float64"})
    stft = StftConfig(2 * (cfg.freq_bins - 1), cfg.freq_bins - 1)
    rng = np.random.default_rng(seed)
    model = SICRNModel(cfg).train()
    n = stft.covered_length(frames)
    clean = rng.standard_normal((2, n))
    noisy = clean + 0.5 * rng.standard_normal((2, n))
    spec = stft_array(noisy, stft)
    names = list(model.store.params)
    buffers = {k: v.copy() for k, v in model.store.buffers.items()}

    def f(*vals):
        model.store.buffers.update({k: v.copy() for k, v in buffers.items()})
        ctx = model.context(vals[0].tape).bind(dict(zip(names, vals)))
        _, enhanced = model.forward_var(ctx, ad.Var(spec))
        wave = istft_var(enhanced, stft)
        return loss(wave, clean[:, : wave.shape[-1]])

    params = [model.store.params[k] for k in names]
    # ELU kinks and batch statistics favour small steps, weakly coupled SSM parameters large ones
    return ad.grad_check(f, params, h=FD_LADDER, tol=tol, n_samples=n_samples, rng=rng, names=names)
