"""STFT analysis, weighted overlap-add synthesis, and 16-bit PCM WAV files.

Framing is causal: the first frame starts at sample 0 with no padding, and
samples that do not fill a whole window at the end are dropped.
"""
from __future__ import annotations

import wave
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.signal import get_window

from . import autodiff as ad
from . import numerics
from .errors import ArgumentError, FormatError, NumericError

PCM_SCALE = 32768.0
ZERO_SUM_TOL = 1e-10


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 510
    hop: int = 160
    sample_rate: int = 16000
    window: str = "hann"

    def __post_init__(self):
        if self.win_length < 2 or self.hop < 1:
            raise ArgumentError(f"bad STFT sizes win={self.win_length} hop={self.hop}")
        if self.hop > self.win_length:
            raise ArgumentError(f"hop {self.hop} exceeds window length {self.win_length}")

    @property
    def n_bins(self) -> int:
        return self.win_length // 2 + 1

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            return 0
        return 1 + (n_samples - self.win_length) // self.hop

    def covered_length(self, n_frames: int) -> int:
        return (n_frames - 1) * self.hop + self.win_length if n_frames else 0


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 1:
            raise ArgumentError(f"clip must be mono 1-D, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise NumericError("clip contains non-finite samples")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray  # [T_frames, n_bins]
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.shape[-1] != self.config.n_bins:
            raise ArgumentError(f"{self.data.shape[-1]} bins, config expects {self.config.n_bins}")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("spectrogram contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.data.shape[-2]


@lru_cache(maxsize=16)
def analysis_window(win_length: int, kind: str = "hann") -> np.ndarray:
    """Periodic window (denominator ``win_length``)."""
    w = get_window(kind, win_length, fftbins=True)
    w.setflags(write=False)
    return w


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """``[..., L] -> [..., T, win_length]`` views, frame t starting at ``t * hop``."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < cfg.win_length:
        raise ArgumentError(f"signal of {n} samples is shorter than one window ({cfg.win_length})")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length, axis=-1)
    return view[..., ::cfg.hop, :][..., : cfg.n_frames(n), :]


def stft_array(x, cfg: StftConfig | None = None) -> np.ndarray:
    """Complex STFT of a real signal ``[..., L]`` as ``[..., T, n_bins]``."""
    cfg = cfg or StftConfig()
    frames = frame_signal(x, cfg) * analysis_window(cfg.win_length, cfg.window)
    return numerics.rfft_frame(frames, cfg.win_length)


def stft(clip: AudioClip, cfg: StftConfig | None = None) -> ComplexSpectrogram:
    cfg = cfg or StftConfig()
    if clip.sample_rate != cfg.sample_rate:
        raise ArgumentError(f"clip rate {clip.sample_rate} != STFT rate {cfg.sample_rate}")
    return ComplexSpectrogram(stft_array(clip.samples, cfg), cfg)


def window_sum(n_frames: int, cfg: StftConfig) -> np.ndarray:
    """Overlap-added squared window, the WOLA normalizer."""
    w2 = analysis_window(cfg.win_length, cfg.window) ** 2
    out = np.zeros(cfg.covered_length(n_frames))
    for t in range(n_frames):
        out[t * cfg.hop: t * cfg.hop + cfg.win_length] += w2
    return out


@lru_cache(maxsize=32)
def _inverse_norm(n_frames: int, cfg: StftConfig) -> np.ndarray:
    wsum = window_sum(n_frames, cfg)
    zero = wsum <= ZERO_SUM_TOL * wsum.max()
    # the outermost hop at either end may legitimately see a vanishing window
    interior = np.zeros_like(zero)
    interior[cfg.hop: len(wsum) - cfg.hop] = True
    if np.any(zero & interior):
        first = int(np.argmax(zero & interior))
        raise NumericError(f"window sum is zero at interior sample {first}; "
                           f"win={cfg.win_length} hop={cfg.hop} cannot be inverted")
    inv = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, wsum))
    inv.setflags(write=False)
    return inv


def _fit_length(y, out_len: int | None):
    if out_len is None:
        return y
    n = y.shape[-1]
    if out_len <= n:
        return y[..., :out_len]
    return np.concatenate([y, np.zeros(y.shape[:-1] + (out_len - n,), y.dtype)], axis=-1)


def istft_array(spec, cfg: StftConfig | None = None, out_len: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_array` over ``[..., T, n_bins]``."""
    cfg = cfg or StftConfig()
    spec = np.asarray(spec)
    if spec.shape[-1] != cfg.n_bins:
        raise ArgumentError(f"{spec.shape[-1]} bins, config expects {cfg.n_bins}")
    n_frames = spec.shape[-2]
    if n_frames < 1:
        raise ArgumentError("spectrogram has no frames")
    frames = np.fft.irfft(spec, cfg.win_length, axis=-1) * analysis_window(cfg.win_length, cfg.window)
    y = ad.overlap_add(frames, cfg.hop).value * _inverse_norm(n_frames, cfg)
    return _fit_length(y, out_len)


def istft(spec: ComplexSpectrogram, cfg: StftConfig | None = None,
          out_len: int | None = None) -> AudioClip:
    cfg = cfg or spec.config
    if cfg != spec.config:
        raise ArgumentError("spectrogram was produced with a different STFT config")
    return AudioClip(istft_array(spec.data, cfg, out_len), cfg.sample_rate)


def istft_var(spec: ad.Var, cfg: StftConfig) -> ad.Var:
    """Differentiable WOLA synthesis of a complex Var ``[..., T, n_bins]``.

    Output covers ``(T - 1) * hop + win_length`` samples.
    """
    n_frames = spec.shape[-2]
    win = analysis_window(cfg.win_length, cfg.window)
    dtype = np.real(spec.value.ravel()[:1]).dtype
    frames = ad.mul(ad.irfft(spec, cfg.win_length, axis=-1), win.astype(dtype))
    return ad.mul(ad.overlap_add(frames, cfg.hop), _inverse_norm(n_frames, cfg).astype(dtype))


def interior(n_frames: int, cfg: StftConfig) -> slice:
    """Samples away from both ends, where every covering frame is present."""
    return slice(cfg.win_length, cfg.covered_length(n_frames) - cfg.win_length)


# ------------------------------------------------------------------------ WAV


def wav_read(path) -> AudioClip:
    """Read a 16-bit PCM mono 16 kHz WAV into ``[-1, 1)``."""
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            if channels != 1:
                raise FormatError(f"{path}: channels={channels} unsupported (mono only)")
            if width != 2:
                raise FormatError(f"{path}: sample_width={8 * width} bits unsupported (16-bit PCM only)")
            if rate != 16000:
                raise FormatError(f"{path}: sample_rate={rate} unsupported (16000 only)")
            raw = fh.readframes(fh.getnframes())
    except wave.Error as exc:
        raise FormatError(f"{path}: encoding unsupported ({exc})") from exc
    except EOFError as exc:
        raise FormatError(f"{path}: truncated header") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(float) / PCM_SCALE
    return AudioClip(samples, rate)


def to_pcm16(samples) -> np.ndarray:
    """Round and saturate to int16."""
    q = np.round(np.asarray(samples, dtype=float) * PCM_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def wav_write(path, clip: AudioClip) -> None:
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(clip.sample_rate))
        fh.writeframes(to_pcm16(clip.samples).tobytes())


def spectrogram_to_csv(spec: ComplexSpectrogram, path) -> None:
    """One row per frame, interleaved ``re,im`` per bin."""
    data = spec.data
    rows = np.empty((data.shape[0], 2 * data.shape[1]))
    rows[:, 0::2] = data.real
    rows[:, 1::2] = data.imag
    np.savetxt(path, rows, delimiter=",", fmt="%.17g")
