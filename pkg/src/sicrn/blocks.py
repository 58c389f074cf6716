"""Network layers: inplace conv, pointwise conv, batch norm, S4ND, SIC, LSTM.

Layers own no arrays themselves. Parameters live in a shared
:class:`ParamStore` under dotted names, and each forward pass reads them
through a :class:`Context`, which binds them to a tape when training.
Activations use axis order (batch, channel, time, freq).
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import ssm
from .errors import ArgumentError
from .s4nd import S4ND2D, init_s4nd


class ParamStore:
    """Ordered name -> array mapping for learnable parameters and buffers."""

    def __init__(self, dtype="float64"):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> str:
        if name in self.params:
            raise ArgumentError(f"duplicate parameter {name}")
        self.params[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return name

    def add_buffer(self, name: str, value) -> str:
        self.buffers[name] = np.ascontiguousarray(value, dtype=self.dtype)
        return name

    def count(self) -> int:
        return int(sum(a.size for a in self.params.values()))


class Context:
    """State for one forward pass.

    With a tape, parameters become leaves on it (grads readable afterwards via
    :meth:`grads`); without one the forward just evaluates. ``trace`` collects
    ``(layer, shape)`` for every instrumented activation, and ``check`` enforces
    that time and frequency extents never change.
    """

    def __init__(self, store: ParamStore, tape: ad.Tape | None = None, training: bool = False,
                 time_method: str | None = None, debug: bool = True):
        self.store = store
        self.tape = tape
        self.training = training
        self.time_method = time_method or ("fft" if training else "direct")
        self.debug = debug
        self.trace: list[tuple[str, tuple]] = []
        self.extent: tuple[int, int] | None = None
        self._vars: dict[str, ad.Var] = {}

    def p(self, name: str) -> ad.Var:
        v = self._vars.get(name)
        if v is None:
            arr = self.store.params[name]
            v = self.tape.var(arr, name) if self.tape is not None else ad.Var(arr, name=name)
            self._vars[name] = v
        return v

    def bind(self, values: dict[str, ad.Var]) -> "Context":
        """Use the given Vars for these parameters instead of fresh leaves."""
        self._vars.update(values)
        return self

    def grads(self) -> dict[str, np.ndarray]:
        return {name: v.grad for name, v in self._vars.items()}

    def check(self, name: str, x: ad.Var) -> ad.Var:
        self.trace.append((name, x.shape))
        if self.debug and self.extent is not None and x.ndim == 4 and x.shape[2:] != self.extent:
            raise AssertionError(f"{name}: extent {x.shape[2:]} != input {self.extent}")
        return x


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class InplaceConv2D:
    """Stride-1 conv; causal over time, same-size over frequency."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 kernel=(2, 3), rng=None):
        rng = np.random.default_rng() if rng is None else rng
        kt, kf = kernel
        fan_in = c_in * kt * kf
        self.name, self.c_in, self.c_out, self.kernel = name, c_in, c_out, (kt, kf)
        self.w = store.add(f"{name}.weight", _uniform(rng, (c_out, c_in, kt, kf), fan_in))
        self.b = store.add(f"{name}.bias", _uniform(rng, (c_out,), fan_in))

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        if x.shape[1] != self.c_in:
            raise ArgumentError(f"{self.name}: expected {self.c_in} channels, got {x.shape[1]}")
        return ctx.check(self.name, ad.conv2d(x, ctx.p(self.w), ctx.p(self.b)))


class PointwiseConv:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.name, self.c_in, self.c_out = name, c_in, c_out
        self.w = store.add(f"{name}.weight", _uniform(rng, (c_out, c_in), c_in))
        self.b = store.add(f"{name}.bias", _uniform(rng, (c_out,), c_in))

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        if x.shape[1] != self.c_in:
            raise ArgumentError(f"{self.name}: expected {self.c_in} channels, got {x.shape[1]}")
        return ctx.check(self.name, ad.pointwise_conv(x, ctx.p(self.w), ctx.p(self.b)))


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, channels: int, momentum=0.1, eps=1e-5):
        self.name, self.momentum, self.eps = name, momentum, eps
        self.store = store
        self.gamma = store.add(f"{name}.gamma", np.ones(channels))
        self.beta = store.add(f"{name}.beta", np.zeros(channels))
        self.mean = store.add_buffer(f"{name}.running_mean", np.zeros(channels))
        self.var = store.add_buffer(f"{name}.running_var", np.ones(channels))

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        bufs = ctx.store.buffers
        running = {"mean": bufs[self.mean], "var": bufs[self.var]}
        y = ad.batchnorm(x, ctx.p(self.gamma), ctx.p(self.beta), running, ctx.training,
                         self.momentum, self.eps)
        if ctx.training:
            dtype = ctx.store.dtype
            bufs[self.mean] = running["mean"].astype(dtype)
            bufs[self.var] = running["var"].astype(dtype)
        return ctx.check(self.name, y)


class S4NDLayer:
    """Depthwise two-axis SSM over ``[B, C, T, F]``; one parameter set per channel."""

    AXES = ("time", "freq", "freq_rev")

    def __init__(self, store: ParamStore, name: str, channels: int, state=(16, 16),
                 bidirectional: bool = True, rng=None, dt_range=(1e-3, 1e-1)):
        rng = np.random.default_rng() if rng is None else rng
        self.name, self.channels, self.bidirectional = name, channels, bidirectional
        init = init_s4nd(state[0], state[1], rng, channels, bidirectional, dt_range)
        self.names: dict[str, dict[str, str]] = {}
        for axis, p in (("time", init.time), ("freq", init.freq), ("freq_rev", init.freq_rev)):
            if p is None:
                continue
            arrs = ssm.ssm_param_arrays(p)
            self.names[axis] = {k: store.add(f"{name}.{axis}.{k}", v) for k, v in arrs.items()}
        self.D = store.add(f"{name}.D", np.asarray(init.D, dtype=float))

    def kernel(self, ctx: Context, axis: str, L: int) -> ad.Var:
        return ssm.kernel_var({k: ctx.p(n) for k, n in self.names[axis].items()}, L)

    def freq_operator(self, ctx: Context, f_len: int) -> ad.Var:
        """Dense ``[C, F, F]`` map of the frequency pass(es).

        The forward kernel fills the lower triangle, the reverse kernel the
        upper one; both contribute their zero-lag tap to the diagonal.
        """
        m = ad.toeplitz(self.kernel(ctx, "freq", f_len), f_len)
        if self.bidirectional:
            rev = ad.toeplitz(self.kernel(ctx, "freq_rev", f_len), f_len)
            m = ad.add(m, ad.transpose(rev, (0, 2, 1)))
        return m

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        _, c, t_len, f_len = x.shape
        kt = self.kernel(ctx, "time", t_len)
        if ctx.time_method == "fft":
            v = ad.causal_conv(ad.reshape(kt, (1, c, t_len, 1)), x, axis=2, method="fft")
        else:
            # Toeplitz matmul: future frames only ever meet exact zeros
            v = ad.matmul(ad.reshape(ad.toeplitz(kt, t_len), (1, c, t_len, t_len)), x)
        mf = ad.reshape(ad.transpose(self.freq_operator(ctx, f_len), (0, 2, 1)), (1, c, f_len, f_len))
        y = ad.matmul(v, mf)
        y = ad.add(y, ad.mul(ad.reshape(ctx.p(self.D), (1, c, 1, 1)), x))
        return ctx.check(self.name, y)

    def to_s4nd2d(self, store: ParamStore, channel: int) -> S4ND2D:
        """Plain-numpy parameters of one channel, for inspection and oracles."""
        axes = {}
        for axis, names in self.names.items():
            arrs = {k: np.asarray(store.params[n][channel], dtype=float) for k, n in names.items()}
            axes[axis] = ssm.continuous_from_arrays(arrs)
        d = float(store.params[self.D][channel])
        return S4ND2D(axes["time"], axes["freq"], d, axes.get("freq_rev"))


class S4NDBlock:
    """``batchnorm(x + linear(elu(s4nd(x))))``."""

    def __init__(self, store: ParamStore, name: str, channels: int, state=(16, 16),
                 bidirectional: bool = True, rng=None, dt_range=(1e-3, 1e-1)):
        self.name = name
        self.s4nd = S4NDLayer(store, f"{name}.s4nd", channels, state, bidirectional, rng, dt_range)
        self.linear = PointwiseConv(store, f"{name}.linear", channels, channels, rng)
        self.norm = BatchNorm(store, f"{name}.bn", channels)

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        h = self.linear(ctx, ad.elu(self.s4nd(ctx, x)))
        return ctx.check(self.name, self.norm(ctx, ad.add(x, h)))


class ConvStack:
    """Inplace conv layers of equal width with ELU between consecutive layers."""

    def __init__(self, store: ParamStore, name: str, width: int, depth: int, kernel, rng):
        self.layers = [InplaceConv2D(store, f"{name}.{i}", width, width, kernel, rng)
                       for i in range(depth)]

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        for i, layer in enumerate(self.layers):
            if i:
                x = ad.elu(x)
            x = layer(ctx, x)
        return x


class SICBlock:
    """Local/global fusion block: ``2W`` channels in, ``W`` out.

    The first half of the channels goes through an inplace-conv trunk shared by
    two pointwise heads (features and attention logits); the second half goes
    through the S4ND stack. Output is ``features * sigmoid(logits + global)``.
    """

    def __init__(self, store: ParamStore, name: str, width: int, ic_layers: int = 3,
                 s4nd_blocks: int = 4, kernel=(2, 3), state=(16, 16), bidirectional: bool = True,
                 global_branch: str = "s4nd", rng=None, dt_range=(1e-3, 1e-1)):
        rng = np.random.default_rng() if rng is None else rng
        self.name, self.width = name, width
        self.trunk = ConvStack(store, f"{name}.ic", width, ic_layers, kernel, rng)
        self.head_feat = PointwiseConv(store, f"{name}.head_feat", width, width, rng)
        self.head_attn = PointwiseConv(store, f"{name}.head_attn", width, width, rng)
        if global_branch == "s4nd":
            blocks = [S4NDBlock(store, f"{name}.s4nd.{i}", width, state, bidirectional, rng, dt_range)
                      for i in range(s4nd_blocks)]
            self.global_branch = blocks
        elif global_branch == "inplace":
            self.global_branch = [ConvStack(store, f"{name}.gic", width, s4nd_blocks, kernel, rng)]
        else:
            raise ArgumentError(f"global_branch={global_branch!r}; expected s4nd or inplace")

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        c = x.shape[1]
        if c % 2 or c // 2 != self.width:
            raise ArgumentError(f"{self.name}: needs {2 * self.width} input channels, got {c}")
        w = self.width
        trunk = self.trunk(ctx, ad.getitem(x, (slice(None), slice(0, w))))
        local = self.head_feat(ctx, trunk)
        logits = self.head_attn(ctx, trunk)
        g = ad.getitem(x, (slice(None), slice(w, 2 * w)))
        for block in self.global_branch:
            g = block(ctx, g)
        attn = ad.sigmoid(ad.add(logits, g))
        return ctx.check(self.name, ad.mul(local, attn))


class LSTMStack:
    """Stacked LSTM over ``[B, T, D]``, zero initial state, gate order (i, f, g, o)."""

    def __init__(self, store: ParamStore, name: str, input_size: int, hidden: int,
                 layers: int = 2, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        self.name, self.hidden = name, hidden
        self.input_size = input_size
        self.layers = []
        d = input_size
        for i in range(layers):
            bias = _uniform(rng, (4 * hidden,), hidden)
            bias[hidden:2 * hidden] = 1.0
            self.layers.append((
                store.add(f"{name}.{i}.w_in", _uniform(rng, (d, 4 * hidden), hidden)),
                store.add(f"{name}.{i}.w_rec", _uniform(rng, (hidden, 4 * hidden), hidden)),
                store.add(f"{name}.{i}.bias", bias),
            ))
            d = hidden

    def __call__(self, ctx: Context, x: ad.Var) -> ad.Var:
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise ArgumentError(f"{self.name}: expected [B, T, {self.input_size}], got {x.shape}")
        for w_in, w_rec, bias in self.layers:
            xw = ad.add(ad.matmul(x, ctx.p(w_in)), ctx.p(bias))
            x = ad.lstm_sequence(xw, ctx.p(w_rec))
        return x


def lstm_reference(x: np.ndarray, weights) -> np.ndarray:
    """Step-by-step LSTM from :func:`autodiff.lstm_cell`; an independent check on the fused op."""
    out = np.asarray(x)
    for w_in, w_rec, bias in weights:
        hid = w_rec.shape[0]
        h = np.zeros((out.shape[0], hid))
        c = np.zeros((out.shape[0], hid))
        hs = []
        for t in range(out.shape[1]):
            hv, cv = ad.lstm_cell(out[:, t], h, c, w_in, w_rec, bias)
            h, c = hv.value, cv.value
            hs.append(h)
        out = np.stack(hs, axis=1)
    return out
