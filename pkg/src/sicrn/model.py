"""SICRN: inplace-conv / S4ND encoder, LSTM bottleneck, mirrored decoder, complex mask."""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .blocks import Context, InplaceConv2D, LSTMStack, ParamStore, PointwiseConv, SICBlock
from .errors import ArgumentError, FormatError

MAGIC = b"SICR"
FORMAT_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8"), 3: np.dtype("<c16")}
TAG_OF = {v.newbyteorder("="): k for k, v in DTYPE_TAGS.items()}


@dataclass
class SICRNConfig:
    freq_bins: int = 256
    sic_widths: tuple = (16, 32)
    ic_kernel: tuple = (2, 3)
    ic_layers: int = 3
    s4nd_blocks: int = 4
    lstm_layers: int = 2
    lstm_hidden: int = 48  # 0 means the flattened bottleneck width C*F
    s4nd_state: tuple = (16, 16)
    freq_unidirectional: bool = False
    global_branch: str = "s4nd"
    mask_apply: str = "complex"
    mask_init: str = "random"  # "identity": zero head weights, mask bias 1 + 0i
    time_conv: str = "direct"
    dtype: str = "float64"
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    seed: int = 0

    def __post_init__(self):
        self.sic_widths = tuple(int(w) for w in self.sic_widths)
        self.ic_kernel = tuple(int(k) for k in self.ic_kernel)
        self.s4nd_state = tuple(int(n) for n in self.s4nd_state)
        if len(self.sic_widths) != 2:
            raise ArgumentError("sic_widths needs exactly two entries")
        sizes = (self.freq_bins, *self.sic_widths, *self.ic_kernel, self.ic_layers,
                 self.s4nd_blocks, self.lstm_layers, *self.s4nd_state)
        if min(sizes) < 1 or self.lstm_hidden < 0:
            raise ArgumentError("all sizes must be positive")
        if self.mask_apply not in ("complex", "elementwise"):
            raise ArgumentError(f"mask_apply={self.mask_apply!r}")
        if self.mask_init not in ("random", "identity"):
            raise ArgumentError(f"mask_init={self.mask_init!r}")
        if self.time_conv not in ("fft", "direct"):
            raise ArgumentError(f"time_conv={self.time_conv!r}")

    @property
    def bottleneck(self) -> int:
        return self.sic_widths[1] * self.freq_bins

    @property
    def hidden(self) -> int:
        return self.lstm_hidden or self.bottleneck

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def apply_complex_mask(mask, spec, mode: str = "complex"):
    """Apply a per-bin mask to a complex spectrogram (arrays or Vars).

    ``complex``: ``(mr xr - mi xi) + i (mr xi + mi xr)``.
    ``elementwise``: ``mr xr + i mi xi``.
    """
    if np.shape(mask) != np.shape(spec):
        raise ArgumentError(f"mask shape {np.shape(mask)} != spectrum shape {np.shape(spec)}")
    if isinstance(mask, ad.Var) or isinstance(spec, ad.Var):
        if mode == "complex":
            return ad.mul(mask, spec)
        re = ad.mul(ad.real(mask), ad.real(spec))
        im = ad.mul(ad.imag(mask), ad.imag(spec))
        return ad.complex_(re, im)
    mask, spec = np.asarray(mask), np.asarray(spec)
    if mode == "complex":
        return mask * spec
    return mask.real * spec.real + 1j * (mask.imag * spec.imag)


class SICRNModel:
    """The full network; parameters live in ``self.store``."""

    def __init__(self, config: SICRNConfig | None = None):
        self.config = cfg = config or SICRNConfig()
        self.store = ParamStore(cfg.dtype)
        self.training = False
        rng = np.random.default_rng(cfg.seed)
        w1, w2 = cfg.sic_widths
        st = self.store
        sic = dict(ic_layers=cfg.ic_layers, s4nd_blocks=cfg.s4nd_blocks, kernel=cfg.ic_kernel,
                   state=cfg.s4nd_state, bidirectional=not cfg.freq_unidirectional,
                   global_branch=cfg.global_branch, rng=rng, dt_range=(cfg.dt_min, cfg.dt_max))
        self.enc_ic0 = InplaceConv2D(st, "enc_ic0", 2, 2 * w1, cfg.ic_kernel, rng)
        self.enc_sic1 = SICBlock(st, "enc_sic1", w1, **sic)
        self.enc_ic1 = InplaceConv2D(st, "enc_ic1", w1, 2 * w2, cfg.ic_kernel, rng)
        self.enc_sic2 = SICBlock(st, "enc_sic2", w2, **sic)
        self.lstm = LSTMStack(st, "lstm", cfg.bottleneck, cfg.hidden, cfg.lstm_layers, rng)
        self.lstm_proj = None
        if cfg.hidden != cfg.bottleneck:
            bound = 1.0 / np.sqrt(cfg.hidden)
            self.lstm_proj = (
                st.add("lstm_proj.weight", rng.uniform(-bound, bound, (cfg.hidden, cfg.bottleneck))),
                st.add("lstm_proj.bias", rng.uniform(-bound, bound, cfg.bottleneck)))
        self.dec_ic2 = InplaceConv2D(st, "dec_ic2", w2, 2 * w2, cfg.ic_kernel, rng)
        self.dec_sic3 = SICBlock(st, "dec_sic3", w2, **sic)
        self.dec_ic3 = InplaceConv2D(st, "dec_ic3", w2, 2 * w1, cfg.ic_kernel, rng)
        self.dec_sic4 = SICBlock(st, "dec_sic4", w1, **sic)
        self.mask_head = PointwiseConv(st, "mask_head", w1, 2, rng)
        if cfg.mask_init == "identity":
            st.params[self.mask_head.w][:] = 0.0
            st.params[self.mask_head.b][:] = (1.0, 0.0)

    # -- mode ---------------------------------------------------------------
    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self) -> dict[str, np.ndarray]:
        return self.store.params

    def context(self, tape: ad.Tape | None = None, debug: bool = True) -> Context:
        method = self.config.time_conv if self.training else "direct"
        return Context(self.store, tape, self.training, method, debug)

    # -- forward ------------------------------------------------------------
    def forward_var(self, ctx: Context, spec: ad.Var) -> tuple[ad.Var, ad.Var]:
        """``spec`` is a complex Var ``[B, T, F]``; returns complex ``(mask, enhanced)``."""
        cfg = self.config
        if spec.ndim != 3 or spec.shape[2] != cfg.freq_bins:
            raise ArgumentError(f"expected [B, T, {cfg.freq_bins}] spectrum, got {spec.shape}")
        bsz, t_len, f_len = spec.shape
        ctx.extent = (t_len, f_len)
        x = ctx.check("input", ad.stack([ad.real(spec), ad.imag(spec)], axis=1))
        x = self.enc_sic1(ctx, self.enc_ic0(ctx, x))
        x = self.enc_sic2(ctx, self.enc_ic1(ctx, x))
        w2 = cfg.sic_widths[1]
        seq = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (bsz, t_len, w2 * f_len))
        h = self.lstm(ctx, seq)
        if self.lstm_proj is not None:
            w, b = self.lstm_proj
            h = ad.add(ad.matmul(h, ctx.p(w)), ctx.p(b))
        x = ctx.check("lstm", ad.transpose(ad.reshape(h, (bsz, t_len, w2, f_len)), (0, 2, 1, 3)))
        x = self.dec_sic3(ctx, self.dec_ic2(ctx, x))
        x = self.dec_sic4(ctx, self.dec_ic3(ctx, x))
        m = self.mask_head(ctx, x)
        mask = ad.complex_(ad.getitem(m, (slice(None), 0)), ad.getitem(m, (slice(None), 1)))
        return mask, apply_complex_mask(mask, spec, cfg.mask_apply)

    def forward(self, spec, trace: list | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Untaped forward on a complex array ``[T, F]`` or ``[B, T, F]``."""
        data = getattr(spec, "data", spec)
        data = np.asarray(data)
        single = data.ndim == 2
        if single:
            data = data[None]
        cdt = np.result_type(self.store.dtype, np.complex64)
        ctx = self.context()
        mask, enhanced = self.forward_var(ctx, ad.Var(data.astype(cdt)))
        if trace is not None:
            trace.extend(ctx.trace)
        mask, enhanced = mask.value, enhanced.value
        return (mask[0], enhanced[0]) if single else (mask, enhanced)

    def param_count(self) -> int:
        return self.store.count()


def param_count(m: SICRNModel) -> int:
    return m.param_count()


def closed_form_param_count(cfg: SICRNConfig) -> int:
    """Parameter count from layer formulas, independent of model construction."""
    kt, kf = cfg.ic_kernel
    n1, n2 = cfg.s4nd_state
    conv = lambda ci, co: co * ci * kt * kf + co  # noqa: E731
    point = lambda ci, co: co * ci + co  # noqa: E731
    dirs = 1 if cfg.freq_unidirectional else 2

    def sic(w):
        total = cfg.ic_layers * conv(w, w) + 2 * point(w, w)
        if cfg.global_branch == "inplace":
            return total + cfg.s4nd_blocks * conv(w, w)
        # per axis: A (log re, im), B, C complex -> 6N, plus log step
        s4nd = w * ((6 * n1 + 1) + dirs * (6 * n2 + 1) + 1)
        return total + cfg.s4nd_blocks * (s4nd + point(w, w) + 2 * w)

    w1, w2 = cfg.sic_widths
    h, d = cfg.hidden, cfg.bottleneck
    lstm = 0
    for i in range(cfg.lstm_layers):
        din = d if i == 0 else h
        lstm += 4 * h * (din + h + 1)
    proj = point(h, d) if h != d else 0
    return (conv(2, 2 * w1) + sic(w1) + conv(w1, 2 * w2) + sic(w2) + lstm + proj
            + conv(w2, 2 * w2) + sic(w2) + conv(w2, 2 * w1) + sic(w1) + point(w1, 2))


def macs_per_second(cfg: SICRNConfig, frames_per_second: float = 100.0) -> dict[str, float]:
    """Analytic multiply-accumulate count for one second of audio, by layer type."""
    T, F = frames_per_second, cfg.freq_bins
    kt, kf = cfg.ic_kernel
    w1, w2 = cfg.sic_widths
    conv = lambda ci, co, k=kt * kf: co * ci * k * T * F  # noqa: E731
    dirs = 1 if cfg.freq_unidirectional else 2

    def fft_cost(L):
        n = 2 ** math.ceil(math.log2(2 * L))
        return 5 * n * math.log2(n)

    out = {"conv": 0.0, "ssm": 0.0, "lstm": 0.0}
    for ci, co in ((2, 2 * w1), (w1, 2 * w2), (w2, 2 * w2), (w2, 2 * w1)):
        out["conv"] += conv(ci, co)
    for w in (w1, w2, w2, w1):
        out["conv"] += cfg.ic_layers * conv(w, w) + 2 * conv(w, w, 1)
        if cfg.global_branch == "inplace":
            out["conv"] += cfg.s4nd_blocks * conv(w, w)
            continue
        out["conv"] += cfg.s4nd_blocks * conv(w, w, 1)
        per_block = w * F * fft_cost(T) + dirs * w * T * fft_cost(F)
        out["ssm"] += cfg.s4nd_blocks * per_block
    out["conv"] += conv(w1, 2, 1)
    h, d = cfg.hidden, cfg.bottleneck
    for i in range(cfg.lstm_layers):
        out["lstm"] += 8 * (d if i == 0 else h) * h * T
    if h != d:
        out["lstm"] += h * d * T
    out["total"] = out["conv"] + out["ssm"] + out["lstm"]
    return out


# --------------------------------------------------------------------------
# checkpoint I/O


def _config_text(cfg: SICRNConfig, extra: dict | None) -> str:
    items = {}
    for k, v in cfg.to_dict().items():
        items[k] = ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    for k, v in (extra or {}).items():
        items[k] = str(v)
    return "".join(f"{k}={v}\n" for k, v in items.items())


def _parse_config(text: str) -> tuple[SICRNConfig, dict]:
    raw = dict(line.split("=", 1) for line in text.splitlines() if line)
    fields = {f.name: f for f in dataclasses.fields(SICRNConfig)}
    kwargs, extra = {}, {}
    for k, v in raw.items():
        if k not in fields:
            extra[k] = v
            continue
        default = fields[k].default
        if isinstance(default, tuple):
            kwargs[k] = tuple(int(x) for x in v.split(","))
        elif isinstance(default, bool):
            kwargs[k] = v == "True"
        elif isinstance(default, int):
            kwargs[k] = int(v)
        elif isinstance(default, float):
            kwargs[k] = float(v)
        else:
            kwargs[k] = v
    return SICRNConfig(**kwargs), extra


def write_checkpoint(path, cfg: SICRNConfig, tensors: dict[str, np.ndarray],
                     extra: dict | None = None) -> None:
    text = _config_text(cfg, extra).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            tag = TAG_OF.get(arr.dtype.newbyteorder("="))
            if tag is None:
                raise ArgumentError(f"tensor {name}: unsupported dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise OSError(f"truncated checkpoint: wanted {n} bytes, got {len(data)}")
    return data


def read_checkpoint(path) -> tuple[SICRNConfig, dict, dict[str, np.ndarray]]:
    """Returns ``(config, extra key/values, tensors)``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r}; not a SICRN checkpoint")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != FORMAT_VERSION:
            raise FormatError(f"checkpoint format version {version} unsupported")
        (n,) = struct.unpack("<I", _read_exact(fh, 4))
        cfg, extra = _parse_config(_read_exact(fh, n).decode("utf-8"))
        tensors = {}
        while True:
            head = fh.read(2)
            if not head:
                break
            if len(head) != 2:
                raise OSError("truncated checkpoint: partial tensor header")
            (nlen,) = struct.unpack("<H", head)
            name = _read_exact(fh, nlen).decode("utf-8")
            tag, rank = struct.unpack("<BB", _read_exact(fh, 2))
            if tag not in DTYPE_TAGS:
                raise FormatError(f"tensor {name}: unknown dtype tag {tag}")
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
            dt = DTYPE_TAGS[tag]
            count = int(np.prod(dims, dtype=np.int64))
            buf = _read_exact(fh, count * dt.itemsize)
            tensors[name] = np.frombuffer(buf, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    return cfg, extra, tensors


BUFFER_PREFIX = "buffer:"


def save_checkpoint(m: SICRNModel, path, extra: dict | None = None,
                    extra_tensors: dict[str, np.ndarray] | None = None,
                    storage: str | None = None) -> None:
    """Write parameters and buffers; ``storage="float32"`` downcasts on disk."""
    cast = (lambda a: a.astype(storage)) if storage else (lambda a: a)
    tensors = {k: cast(v) for k, v in m.store.params.items()}
    tensors.update({BUFFER_PREFIX + k: cast(v) for k, v in m.store.buffers.items()})
    tensors.update(extra_tensors or {})
    write_checkpoint(path, m.config, tensors, extra)


def load_checkpoint(path, with_extras: bool = False):
    cfg, extra, tensors = read_checkpoint(path)
    m = SICRNModel(cfg)
    dtype = m.store.dtype
    for name in m.store.params:
        if name not in tensors:
            raise FormatError(f"checkpoint missing parameter {name}")
        m.store.params[name] = tensors.pop(name).astype(dtype).reshape(m.store.params[name].shape)
    for name in m.store.buffers:
        key = BUFFER_PREFIX + name
        if key in tensors:
            m.store.buffers[name] = tensors.pop(key).astype(dtype)
    if with_extras:
        return m, extra, tensors
    return m
