"""SI-SNR objective, Adam, plateau learning-rate schedule, and the training loop."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .data import MixtureSample, SynthConfig, dynamic_mix_epoch, synthetic_pools
from .dsp_io import StftConfig, istft_var, stft_array
from .errors import ArgumentError, NumericError
from .model import SICRNModel, load_checkpoint, save_checkpoint

EPS = 1e-8
METRICS_HEADER = ("epoch", "step", "train_loss", "val_loss", "val_sisdr", "lr", "seconds")


# ------------------------------------------------------------------ objective


def _check_pair(estimate, target):
    if np.shape(estimate) != np.shape(target):
        raise ArgumentError(f"shape mismatch: estimate {np.shape(estimate)} vs target {np.shape(target)}")
    if np.shape(target)[-1] < 1:
        raise ArgumentError("empty signals")


def si_snr(estimate, target, eps: float = EPS):
    """Scale-invariant SNR in dB over the last axis.

    ``s_t = (<e, s> / ||s||^2) s``, ``n = e - s_t``,
    ``10 log10((||s_t||^2 + eps) / (||n||^2 + eps))``.
    """
    est = np.asarray(estimate, dtype=float)
    tgt = np.asarray(target, dtype=float)
    _check_pair(est, tgt)
    energy = np.sum(tgt * tgt, axis=-1, keepdims=True)
    if np.any(energy == 0):
        raise ArgumentError("target signal is all zeros")
    s_t = np.sum(est * tgt, axis=-1, keepdims=True) / energy * tgt
    e = est - s_t
    return 10 * np.log10((np.sum(s_t * s_t, axis=-1) + eps) / (np.sum(e * e, axis=-1) + eps))


si_sdr_metric = si_snr


def si_snr_var(estimate: ad.Var, target, eps: float = EPS) -> ad.Var:
    """Differentiable :func:`si_snr` of a Var estimate against a fixed target."""
    tgt = np.asarray(target, dtype=estimate.dtype)
    _check_pair(estimate.value, tgt)
    energy = np.sum(tgt * tgt, axis=-1, keepdims=True)
    if np.any(energy == 0):
        raise ArgumentError("target signal is all zeros")
    dot = ad.sum(ad.mul(estimate, tgt), axis=-1, keepdims=True)
    s_t = ad.mul(dot, tgt / energy)
    e = ad.sub(estimate, s_t)
    num = ad.add(ad.sum(ad.square(s_t), axis=-1), eps)
    den = ad.add(ad.sum(ad.square(e), axis=-1), eps)
    return ad.mul(ad.sub(ad.log10(num), ad.log10(den)), 10.0)


def loss(estimate, target):
    """Negative mean SI-SNR; taped when ``estimate`` is a Var."""
    if isinstance(estimate, ad.Var):
        return ad.neg(ad.mean(si_snr_var(estimate, target)))
    return -float(np.mean(si_snr(estimate, target)))


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update of ``params`` in place; returns ``params``."""
    for name, g in grads.items():
        if name not in params:
            raise ArgumentError(f"gradient for unknown parameter {name}")
        if np.shape(g) != np.shape(params[name]):
            raise ArgumentError(f"{name}: grad shape {np.shape(g)} != param shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


@dataclass
class PlateauScheduler:
    lr: float = 2e-4
    patience: int = 4
    factor: float = 0.5
    best: float = float("inf")
    bad_epochs: int = 0


def scheduler_step(s: PlateauScheduler, val_loss: float) -> float:
    """Count non-improving epochs (strict comparison); scale lr at ``patience``."""
    if not np.isfinite(val_loss):
        raise ArgumentError(f"validation loss must be finite, got {val_loss}")
    if val_loss < s.best:
        s.best = float(val_loss)
        s.bad_epochs = 0
    else:
        s.bad_epochs += 1
        if s.bad_epochs >= s.patience:
            s.lr *= s.factor
            s.bad_epochs = 0
    return s.lr


# ------------------------------------------------------------------ loop


@dataclass
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 4
    epochs: int = 10
    clip_seconds: float = 3.0
    train_clips: int = 32  # mixtures drawn per epoch
    val_clips: int = 8
    pool_clean: int = 16
    pool_noise: int = 8
    noise: str = "white"
    p_reverb: float = 0.75
    snr_min: float = -5.0
    snr_max: float = 20.0
    target: str = "reverberant"
    win_length: int = 510
    hop: int = 160
    patience: int = 4
    factor: float = 0.5
    grad_clip: float = 0.0  # global-norm clip; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if min(self.batch_size, self.epochs, self.train_clips) < 1:
            raise ArgumentError("batch_size, epochs and train_clips must be >= 1")
        if self.clip_seconds <= 0:
            raise ArgumentError("clip_seconds must be positive")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.win_length, self.hop)


Batch = tuple  # (noisy [B, L], clean [B, L], seeds)


def stack_batch(samples: Sequence[MixtureSample]) -> Batch:
    noisy = np.stack([s.noisy.samples for s in samples])
    clean = np.stack([s.clean.samples for s in samples])
    return noisy, clean, [s.seed for s in samples]


def batches(samples: Iterable[MixtureSample], size: int) -> Iterable[Batch]:
    buf = []
    for s in samples:
        buf.append(s)
        if len(buf) == size:
            yield stack_batch(buf)
            buf = []
    if buf:
        yield stack_batch(buf)


def enhance_batch(model: SICRNModel, noisy: np.ndarray, stft: StftConfig, tape: ad.Tape | None = None):
    """noisy ``[B, L]`` -> (enhanced waveform Var ``[B, L']``, L')."""
    cdt = np.result_type(model.store.dtype, np.complex64)
    spec = stft_array(noisy, stft).astype(cdt)
    ctx = model.context(tape)
    x = ad.Var(spec)  # the input needs no gradient
    _, enhanced = model.forward_var(ctx, x)
    wave = istft_var(enhanced, stft)
    return wave, ctx


def _clip_grads(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        return {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads


def train_step(model: SICRNModel, batch: Batch, stft: StftConfig, opt: AdamState,
               grad_clip: float = 0.0) -> float:
    """One optimize step: stft, forward, istft, -SI-SNR, backward, Adam."""
    noisy, clean, seeds = batch
    model.train()
    tape = ad.Tape()
    wave, ctx = enhance_batch(model, noisy, stft, tape)
    target = clean[:, : wave.shape[-1]]
    obj = loss(wave, target)
    value = float(obj.value)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value} on batch seeds {seeds}")
    tape.backward(obj)
    grads = ctx.grads()
    tape.clear()
    adam_step(opt, model.store.params, _clip_grads(grads, grad_clip))
    return value


def evaluate(model: SICRNModel, samples: Sequence[MixtureSample], stft: StftConfig,
             batch_size: int = 4) -> dict:
    """Inference-mode loss and SI-SDR of enhanced and noisy signals."""
    model.eval()
    enh, noisy_scores, losses = [], [], []
    for noisy, clean, _ in batches(samples, batch_size):
        wave, _ = enhance_batch(model, noisy, stft)
        n = wave.shape[-1]
        est = np.asarray(wave.value, dtype=float)
        enh.extend(si_sdr_metric(est, clean[:, :n]))
        noisy_scores.extend(si_sdr_metric(noisy[:, :n], clean[:, :n]))
        losses.append(loss(est, clean[:, :n]) * len(noisy))
    count = len(enh)
    if count == 0:
        raise ArgumentError("evaluation set is empty")
    return {"loss": float(np.sum(losses) / count), "sisdr": float(np.mean(enh)),
            "noisy_sisdr": float(np.mean(noisy_scores)),
            "per_clip": list(zip(noisy_scores, enh))}


@dataclass
class TrainResult:
    rows: list
    best_val: float
    scheduler: PlateauScheduler
    optimizer: AdamState


class SyntheticSource:
    """Seeded pools plus dynamic mixing; epoch ``e`` is a pure function of ``(seed, e)``."""

    def __init__(self, cfg: TrainConfig, clean=None, noise=None):
        self.cfg = cfg
        if clean is None or noise is None:
            synth = SynthConfig(duration=cfg.clip_seconds, noise=cfg.noise)
            clean, noise = synthetic_pools(cfg.pool_clean, cfg.pool_noise, synth, cfg.seed)
        self.clean, self.noise = clean, noise
        self.mix_kwargs = dict(p_reverb=cfg.p_reverb, snr_range=(cfg.snr_min, cfg.snr_max),
                               target=cfg.target)

    def epoch(self, e: int) -> list[MixtureSample]:
        rng = np.random.default_rng([self.cfg.seed, 1, e])
        return list(dynamic_mix_epoch(self.clean, self.noise, rng, self.cfg.train_clips, **self.mix_kwargs))

    def validation(self) -> list[MixtureSample]:
        rng = np.random.default_rng([self.cfg.seed, 2])
        return list(dynamic_mix_epoch(self.clean, self.noise, rng, self.cfg.val_clips, **self.mix_kwargs))


def _adam_tensors(opt: AdamState) -> dict:
    out = {f"adam.m:{k}": v for k, v in opt.m.items()}
    out.update({f"adam.v:{k}": v for k, v in opt.v.items()})
    return out


def _save(model, path, opt, sched, epoch, global_step, best_val, more=None):
    extra = dict(more or {})
    extra.update({
        "train.epoch": epoch, "train.step": global_step, "train.best_val": repr(float(best_val)),
        "adam.step": opt.step, "adam.lr": repr(float(opt.lr)),
        "sched.lr": repr(float(sched.lr)), "sched.best": repr(float(sched.best)),
        "sched.bad_epochs": sched.bad_epochs,
    })
    save_checkpoint(model, path, extra, _adam_tensors(opt))


def resume_state(path):
    """Model, optimizer, scheduler and counters from a ``last.ckpt``."""
    model, extra, tensors = load_checkpoint(path, with_extras=True)
    opt = AdamState(lr=float(extra["adam.lr"]), step=int(extra["adam.step"]))
    for key, arr in tensors.items():
        kind, name = key.split(":", 1)
        getattr(opt, kind.split(".")[1])[name] = arr
    sched = PlateauScheduler(lr=float(extra["sched.lr"]), best=float(extra["sched.best"]),
                             bad_epochs=int(extra["sched.bad_epochs"]))
    return model, opt, sched, int(extra["train.epoch"]), int(extra["train.step"]), float(extra["train.best_val"])


def train_loop(cfg: TrainConfig, model: SICRNModel, source, out_dir=None,
               resume: str | Path | None = None,
               on_epoch: Callable[[dict], None] | None = None,
               extra: dict | None = None) -> TrainResult:
    """Epoch loop: optimize on ``source.epoch(e)``, validate, schedule, log, checkpoint.

    ``source`` needs ``epoch(e) -> samples`` and ``validation() -> samples``.
    With ``out_dir`` set, writes ``metrics.csv``, ``best.ckpt`` and ``last.ckpt``;
    ``extra`` key/values are stored in both checkpoints.
    """
    extra = {"win_length": cfg.win_length, "hop": cfg.hop, **(extra or {})}
    stft = cfg.stft
    opt = AdamState(lr=cfg.lr)
    sched = PlateauScheduler(lr=cfg.lr, patience=cfg.patience, factor=cfg.factor)
    start, global_step, best_val = 0, 0, float("inf")
    if resume is not None:
        loaded, opt, sched, start, global_step, best_val = resume_state(resume)
        model.store.params.update(loaded.store.params)
        model.store.buffers.update(loaded.store.buffers)
        sched.patience, sched.factor = cfg.patience, cfg.factor
    out = Path(out_dir) if out_dir is not None else None
    rows = []
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume is None or not (out / "metrics.csv").exists():
            with open(out / "metrics.csv", "w", newline="") as fh:
                csv.writer(fh).writerow(METRICS_HEADER)
    val_set = source.validation()
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        losses = []
        for batch in batches(source.epoch(epoch), cfg.batch_size):
            losses.append(train_step(model, batch, stft, opt, cfg.grad_clip))
            global_step += 1
        val = evaluate(model, val_set, stft, cfg.batch_size)
        if not np.isfinite(val["loss"]):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        opt.lr = scheduler_step(sched, val["loss"])
        row = {"epoch": epoch, "step": global_step, "train_loss": float(np.mean(losses)),
               "val_loss": val["loss"], "val_sisdr": val["sisdr"], "lr": opt.lr,
               "seconds": time.perf_counter() - t0}
        rows.append(row)
        improved = val["loss"] < best_val
        best_val = min(best_val, val["loss"])
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as fh:
                csv.writer(fh).writerow([row[k] for k in METRICS_HEADER])
            if improved:
                _save(model, out / "best.ckpt", opt, sched, epoch + 1, global_step, best_val, extra)
            _save(model, out / "last.ckpt", opt, sched, epoch + 1, global_step, best_val, extra)
        if on_epoch is not None:
            on_epoch(row)
    return TrainResult(rows, best_val, sched, opt)
