"""Synthetic training material: harmonic speech surrogates, noise, RIRs, mixing."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.signal import fftconvolve

from .dsp_io import AudioClip, wav_read
from .errors import ArgumentError

T60_CHOICES = (0.16, 0.3, 0.36, 0.6, 0.61, 0.7)
DECAY = 6.9  # ln(10**3): amplitude e^-6.9 is -60 dB in energy


@dataclass
class SynthConfig:
    duration: float = 1.0
    sample_rate: int = 16000
    f0_range: tuple = (80.0, 300.0)
    n_harmonics: int = 10
    vibrato_depth: float = 0.03  # relative f0 excursion
    vibrato_rate: float = 5.0  # Hz
    envelope_rate: float = 3.0  # Hz, syllable-like amplitude modulation
    noise: str = "white"
    seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ArgumentError(f"duration must be positive, got {self.duration}")
        lo, hi = self.f0_range
        if not 0 < lo <= hi:
            raise ArgumentError(f"bad f0 range {self.f0_range}")
        if not 0 <= self.vibrato_depth < 1:
            raise ArgumentError(f"vibrato depth {self.vibrato_depth} outside [0, 1)")
        top = hi * (1 + self.vibrato_depth) * self.n_harmonics
        if top >= self.sample_rate / 2:
            raise ArgumentError(f"highest harmonic {top:.0f} Hz aliases (Nyquist {self.sample_rate / 2:.0f} Hz)")
        if self.noise not in ("white", "pink"):
            raise ArgumentError(f"noise={self.noise!r}; expected white or pink")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))


@dataclass
class MixtureSample:
    clean: AudioClip
    noisy: AudioClip
    snr_db: float
    reverberant: bool = False
    noise: np.ndarray | None = field(default=None, repr=False)
    seed: int | None = None

    def __post_init__(self):
        if len(self.clean) != len(self.noisy):
            raise ArgumentError("clean and noisy lengths differ")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def synth_speech(cfg: SynthConfig, f0: float | None = None) -> AudioClip:
    """Harmonic tone with vibrato, a slow amplitude envelope and random phases.

    Peak-normalized to 0.9. ``f0`` overrides the seeded draw from ``f0_range``.
    """
    rng = np.random.default_rng(cfg.seed)
    sr, n = cfg.sample_rate, cfg.n_samples
    base = rng.uniform(*cfg.f0_range) if f0 is None else float(f0)
    if not cfg.f0_range[0] <= base <= cfg.f0_range[1]:
        raise ArgumentError(f"f0 {base} outside {cfg.f0_range}")
    t = np.arange(n) / sr
    inst = base * (1 + cfg.vibrato_depth * np.sin(2 * np.pi * cfg.vibrato_rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(inst) / sr
    k = np.arange(1, cfg.n_harmonics + 1)
    amps = rng.uniform(0.5, 1.0, cfg.n_harmonics) / k
    offsets = rng.uniform(0, 2 * np.pi, cfg.n_harmonics)
    x = np.sum(amps[:, None] * np.sin(k[:, None] * phase[None, :] + offsets[:, None]), axis=0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * cfg.envelope_rate * t + rng.uniform(0, 2 * np.pi))
    x = x * env
    peak = np.max(np.abs(x))
    if peak == 0:
        raise ArgumentError("synthesized clip is silent")
    return AudioClip(0.9 * x / peak, sr)


def synth_noise(n: int, kind: str = "white", seed=None, sample_rate: int = 16000) -> AudioClip:
    """Unit-variance white or pink (1/f power) Gaussian noise."""
    rng = _rng(seed)
    x = rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(x)
        f = np.arange(spec.shape[0], dtype=float)
        f[0] = 1.0
        x = np.fft.irfft(spec / np.sqrt(f), n)
    elif kind != "white":
        raise ArgumentError(f"noise kind {kind!r}; expected white or pink")
    return AudioClip(x / np.std(x), sample_rate)


def synth_rir(t60: float, seed=None, sample_rate: int = 16000) -> np.ndarray:
    """Exponentially decaying noise with a unit direct-path tap at index 0."""
    if t60 <= 0:
        raise ArgumentError(f"t60 must be positive, got {t60}")
    rng = _rng(seed)
    n = max(1, int(round(1.2 * t60 * sample_rate)))
    t = np.arange(n) / sample_rate
    h = rng.standard_normal(n) * np.exp(-DECAY * t / t60)
    h[0] = 1.0
    return h


def reverberate(clean: AudioClip, rir: np.ndarray) -> AudioClip:
    """Convolve and truncate to the dry length (the tail beyond the clip is dropped)."""
    y = fftconvolve(clean.samples, rir)[: len(clean)]
    return AudioClip(y, clean.sample_rate)


def power(x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.mean(x * x))


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float, reverberant: bool = False,
               seed: int | None = None) -> MixtureSample:
    """Scale ``noise`` to the requested SNR and add it to ``clean``.

    If the mixture clips, clean and noisy are rescaled together, which leaves
    the realized SNR untouched.
    """
    if not np.isfinite(snr_db):
        raise ArgumentError(f"snr_db must be finite, got {snr_db}")
    if len(clean) != len(noise):
        raise ArgumentError(f"length mismatch: clean {len(clean)} vs noise {len(noise)}")
    pc, pn = power(clean.samples), power(noise.samples)
    if pc == 0:
        raise ArgumentError("clean signal has zero power")
    if pn == 0:
        raise ArgumentError("noise has zero power")
    scaled = noise.samples * np.sqrt(pc / (pn * 10.0 ** (snr_db / 10.0)))
    noisy = clean.samples + scaled
    c = clean.samples
    peak = np.max(np.abs(noisy))
    if peak > 1.0:
        g = 1.0 / peak
        c, noisy, scaled = c * g, noisy * g, scaled * g
    return MixtureSample(AudioClip(c, clean.sample_rate), AudioClip(noisy, clean.sample_rate),
                         float(snr_db), reverberant, scaled, seed)


def realized_snr(sample: MixtureSample) -> float:
    return 10 * np.log10(power(sample.clean.samples) / power(sample.noise))


def _noise_segment(noise: AudioClip, n: int, rng) -> AudioClip:
    x = noise.samples
    if len(x) < n:
        x = np.tile(x, -(-n // len(x)))
    start = int(rng.integers(0, len(x) - n + 1))
    return AudioClip(x[start:start + n], noise.sample_rate)


def sample_mixture(clean_pool: Sequence[AudioClip], noise_pool: Sequence[AudioClip], seed: int,
                   p_reverb: float = 0.75, snr_range=(-5.0, 20.0), t60_choices=T60_CHOICES,
                   target: str = "reverberant") -> MixtureSample:
    """One mixture, a pure function of ``seed``."""
    if target not in ("reverberant", "dry"):
        raise ArgumentError(f"target={target!r}; expected reverberant or dry")
    rng = np.random.default_rng(seed)
    dry = clean_pool[int(rng.integers(len(clean_pool)))]
    noise = noise_pool[int(rng.integers(len(noise_pool)))]
    reverberant = bool(rng.random() < p_reverb)
    snr = float(rng.uniform(*snr_range))
    speech = dry
    if reverberant:
        t60 = float(t60_choices[int(rng.integers(len(t60_choices)))])
        speech = reverberate(dry, synth_rir(t60, rng, dry.sample_rate))
    seg = _noise_segment(noise, len(dry), rng)
    mix = mix_at_snr(speech, seg, snr, reverberant, seed)
    if target == "dry" and reverberant:
        # carry over the joint anti-clipping gain
        g = np.linalg.norm(mix.clean.samples) / np.linalg.norm(speech.samples)
        mix.clean = AudioClip(dry.samples * g, dry.sample_rate)
    return mix


def dynamic_mix_epoch(clean_pool: Sequence[AudioClip], noise_pool: Sequence[AudioClip], rng,
                      n_samples: int | None = None, **kwargs) -> Iterator[MixtureSample]:
    """Fresh mixtures every call: each draws a seed from ``rng`` then :func:`sample_mixture`."""
    if not clean_pool or not noise_pool:
        raise ArgumentError("clean and noise pools must be non-empty")
    rng = _rng(rng)
    n = len(clean_pool) if n_samples is None else n_samples
    for _ in range(n):
        yield sample_mixture(clean_pool, noise_pool, int(rng.integers(2**63 - 1)), **kwargs)


def synthetic_pools(n_clean: int, n_noise: int, cfg: SynthConfig | None = None,
                    seed: int = 0) -> tuple[list[AudioClip], list[AudioClip]]:
    """Seeded clean and noise pools of equal clip length."""
    cfg = cfg or SynthConfig()
    ss = np.random.SeedSequence(seed)
    clean_seeds, noise_seeds = ss.spawn(2)
    clean = []
    for s in clean_seeds.generate_state(n_clean):
        c = SynthConfig(**{**cfg.__dict__, "seed": int(s)})
        clean.append(synth_speech(c))
    noise = [synth_noise(cfg.n_samples, cfg.noise, int(s), cfg.sample_rate)
             for s in noise_seeds.generate_state(n_noise)]
    return clean, noise


def load_wav_dir(root) -> tuple[list[AudioClip], list[AudioClip]]:
    """Pools from ``root/clean/*.wav`` and ``root/noise/*.wav`` (16 kHz mono PCM16)."""
    root = Path(root)
    pools = []
    for sub in ("clean", "noise"):
        files = sorted((root / sub).glob("*.wav"))
        if not files:
            raise ArgumentError(f"no .wav files under {root / sub}")
        pools.append([wav_read(f) for f in files])
    return pools[0], pools[1]
