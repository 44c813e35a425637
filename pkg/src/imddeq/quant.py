"""Fixed-point emulation of the equalizer's forward and backward passes.

Weights and activations get per-layer formats whose bit widths can be
learned through a linear interpolation between neighbouring integer widths.
Multiplier outputs, accumulators and gradients get static formats sized
from profiled dynamic ranges.
"""

from __future__ import annotations

import configparser
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .channel import (ChannelConfig, apply_channel, ber, generate_symbols, hard_decision,
                      normalize_received, child_seeds)
from .cnn import (Cnn, ForwardCache, GradientSet, conv1d_input_grad, conv1d_kernel_grad,
                  conv1d_linear, _stuff, forward, relu_backward)
from .losses import LossKind

log = logging.getLogger(__name__)

MIN_BITS, MAX_BITS = 2.0, 16.0


@dataclass(frozen=True)
class FixedPointFormat:
    total_bits: int
    frac_bits: int
    signed: bool = True

    def __post_init__(self):
        if not 1 <= self.total_bits <= 32:
            raise ValueError(f"total_bits must be in [1, 32], got {self.total_bits}")
        if self.frac_bits > self.total_bits - int(self.signed):
            raise ValueError("too many fraction bits for the format")

    @classmethod
    def from_int_bits(cls, total_bits: int, int_bits: int, signed: bool = True):
        return cls(total_bits, total_bits - int_bits, signed)

    @property
    def int_bits(self) -> int:
        return self.total_bits - self.frac_bits

    @property
    def step(self) -> float:
        return 2.0 ** -self.frac_bits

    @property
    def min_value(self) -> float:
        return -(2.0 ** (self.total_bits - 1)) * self.step if self.signed else 0.0

    @property
    def max_value(self) -> float:
        n = self.total_bits - 1 if self.signed else self.total_bits
        return (2.0**n - 1) * self.step

    def __str__(self):
        return f"{'s' if self.signed else 'u'}{self.total_bits}.{self.frac_bits}"

    @classmethod
    def parse(cls, text: str) -> "FixedPointFormat":
        text = text.strip()
        total, frac = text[1:].split(".")
        return cls(int(total), int(frac), text[0] == "s")


def quantize(x, fmt: FixedPointFormat):
    """Round to nearest (ties away from zero) on the format grid, saturating."""
    scaled = np.asarray(x, dtype=float) * 2.0**fmt.frac_bits
    r = np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)
    return np.clip(r * fmt.step, fmt.min_value, fmt.max_value)


def saturates(x, fmt: FixedPointFormat) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    half = fmt.step / 2
    return (x < fmt.min_value - half) | (x >= fmt.max_value + half)


def soft_quantize(x, bits: float, int_bits: int):
    """Quantize with a fractional bit width.

    Linear interpolation between the formats with ``floor(bits)`` and
    ``floor(bits) + 1`` total bits (same integer part). Returns the value
    and its derivative w.r.t. ``bits``; integer ``bits`` reproduce
    :func:`quantize` exactly.
    """
    lo = int(math.floor(bits))
    frac = bits - lo
    q_lo = quantize(x, FixedPointFormat(lo, lo - int_bits))
    if frac == 0.0 and lo + 1 > 32:
        return q_lo, np.zeros_like(q_lo)
    q_hi = quantize(x, FixedPointFormat(lo + 1, lo + 1 - int_bits))
    return (1.0 - frac) * q_lo + frac * q_hi, q_hi - q_lo


def ste_mask(x, bits: float, int_bits: int) -> np.ndarray:
    """Straight-through derivative: 1 inside the representable range, else 0."""
    lo = int(math.floor(bits))
    fmt = FixedPointFormat(lo, lo - int_bits)
    return (~saturates(x, fmt)).astype(float)


def int_bits_for(max_abs: float) -> int:
    """Integer bits (sign included) so that +-max_abs is representable."""
    if not max_abs > 0:
        return 1
    return max(1, int(math.floor(math.log2(max_abs))) + 2)


@dataclass
class QuantConfig:
    weights: list[FixedPointFormat]
    activations: list[FixedPointFormat]
    multiplier: FixedPointFormat
    accumulator: FixedPointFormat
    gradient: FixedPointFormat
    faithful: bool = True

    def __post_init__(self):
        if len(self.weights) != len(self.activations):
            raise ValueError("need one weight and one activation format per layer")
        if self.accumulator.total_bits < self.multiplier.total_bits:
            raise ValueError("accumulator must be at least as wide as the multiplier")

    @classmethod
    def uniform(cls, n_layers: int, total: int, frac: int, faithful: bool = True):
        f = FixedPointFormat(total, frac)
        return cls([f] * n_layers, [f] * n_layers, f, f, f, faithful)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["quant"] = {
            "weights": ", ".join(map(str, self.weights)),
            "activations": ", ".join(map(str, self.activations)),
            "multiplier": str(self.multiplier),
            "accumulator": str(self.accumulator),
            "gradient": str(self.gradient),
            "faithful": str(self.faithful).lower(),
        }
        import io

        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_section(cls, sec) -> "QuantConfig":
        fmts = lambda key: [FixedPointFormat.parse(t) for t in sec[key].split(",")]
        return cls(
            fmts("weights"),
            fmts("activations"),
            FixedPointFormat.parse(sec["multiplier"]),
            FixedPointFormat.parse(sec["accumulator"]),
            FixedPointFormat.parse(sec["gradient"]),
            sec.get("faithful", "true").strip().lower() in ("1", "true", "yes", "on"),
        )

    @classmethod
    def from_ini(cls, text: str) -> "QuantConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        return cls.from_section(cp["quant"])


@dataclass
class QuantStats:
    """Saturation counts per tensor class."""

    saturated: dict = field(default_factory=lambda: defaultdict(int))

    @property
    def any(self) -> bool:
        return any(self.saturated.values())


def _q(x, fmt, stats: QuantStats | None, cls: str):
    if stats is not None:
        stats.saturated[cls] += int(np.count_nonzero(saturates(x, fmt)))
    return quantize(x, fmt)


def _qcorrelate(x, k, pad_left, pad_right, stride, dilation, qcfg: QuantConfig, stats):
    """Correlation with every product and every partial sum quantized."""
    c_out, c_in, ksz = k.shape
    xp = np.pad(x, ((0, 0), (pad_left, pad_right)))
    span = dilation * (ksz - 1) + 1
    win = sliding_window_view(xp, span, axis=1)[:, ::stride, ::dilation]
    acc = np.zeros((c_out, win.shape[1]))
    for ci in range(c_in):
        for j in range(ksz):
            prod = _q(k[:, ci, j, None] * win[None, ci, :, j], qcfg.multiplier, stats, "multiplier")
            acc = acc + prod
            if qcfg.faithful:
                acc = _q(acc, qcfg.accumulator, stats, "accumulator")
    if not qcfg.faithful:
        acc = _q(acc, qcfg.accumulator, stats, "accumulator")
    return acc


def quantized_forward(cnn: Cnn, y, qcfg: QuantConfig, stats: QuantStats | None = None):
    """Forward pass on the fixed-point grid; returns ``(z, cache)``."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) % 2:
        raise ValueError("received sequence must be 1-D with even length")
    x = y[None, :]
    inputs, masks, qweights = [], [], []
    for idx, (spec, k) in enumerate(zip(cnn.layers, cnn.weights)):
        x = _q(x, qcfg.activations[idx], stats, f"activation{idx}")
        kq = _q(k, qcfg.weights[idx], stats, f"weight{idx}")
        inputs.append(x)
        qweights.append(kq)
        pre = _qcorrelate(x, kq, spec.padding, spec.padding, spec.stride, spec.dilation, qcfg, stats)
        if spec.relu:
            mask = pre > 0
            x = np.where(mask, pre, 0.0)
        else:
            mask = None
            x = pre
        masks.append(mask)
    z = x[0]
    cache = ForwardCache(inputs, masks, list(cnn.weights), len(z))
    cache.qweights = qweights
    return z, cache


def _qkernel_grad(i, g, spec, qcfg, stats):
    ip = np.pad(i, ((0, 0), (spec.padding, spec.padding)))
    span = spec.dilation * (spec.kernel_size - 1) + 1
    win = sliding_window_view(ip, span, axis=1)[:, :: spec.stride, :: spec.dilation]
    acc = np.zeros(spec.weight_shape)
    for n in range(g.shape[1]):
        prod = _q(g[:, n, None, None] * win[None, :, n, :], qcfg.multiplier, stats, "multiplier")
        acc = acc + prod
        if qcfg.faithful:
            acc = _q(acc, qcfg.accumulator, stats, "accumulator")
    if not qcfg.faithful:
        acc = _q(acc, qcfg.accumulator, stats, "accumulator")
    return acc


def quantized_backward(cnn: Cnn, cache: ForwardCache, dz, qcfg: QuantConfig,
                       stats: QuantStats | None = None) -> GradientSet:
    """Backward pass with the same dataflow as :func:`imddeq.cnn.backward`."""
    qweights = getattr(cache, "qweights", None)
    if qweights is None or any(a is not b for a, b in zip(cache.weights, cnn.weights)):
        raise ValueError("cache does not come from quantized_forward on this model")
    g = _q(np.asarray(dz, dtype=float)[None, :], qcfg.gradient, stats, "gradient")
    n_layers = len(cnn.layers)
    kgrads, igrads = [None] * n_layers, [None] * n_layers
    for idx in reversed(range(n_layers)):
        spec = cnn.layers[idx]
        if cache.masks[idx] is not None:
            g = relu_backward(cache.masks[idx], g)
        x = cache.inputs[idx]
        kgrads[idx] = _q(_qkernel_grad(x, g, spec, qcfg, stats), qcfg.gradient, stats, "gradient")
        if idx > 0:
            gs = _stuff(g, spec.stride)
            span = spec.dilation * (spec.kernel_size - 1)
            right = x.shape[1] + 2 * spec.padding - gs.shape[1]
            kt = np.flip(qweights[idx], axis=2).transpose(1, 0, 2)
            full = _qcorrelate(gs, kt, span, right, 1, spec.dilation, qcfg, stats)
            g = _q(full[:, spec.padding: spec.padding + x.shape[1]], qcfg.gradient, stats, "gradient")
            igrads[idx] = g
    return GradientSet(kgrads, igrads)


# -- range profiling -------------------------------------------------------

def _mac_ranges(x, k, pad_left, pad_right, stride, dilation):
    """Max |product| and max |partial sum| of a float correlation."""
    c_out, c_in, ksz = k.shape
    xp = np.pad(x, ((0, 0), (pad_left, pad_right)))
    span = dilation * (ksz - 1) + 1
    win = sliding_window_view(xp, span, axis=1)[:, ::stride, ::dilation]
    prods = k[:, :, None, :] * win[None]  # (c_out, c_in, n, k)
    prods = prods.transpose(0, 2, 1, 3).reshape(c_out, win.shape[1], c_in * ksz)
    return np.abs(prods).max(), np.abs(np.cumsum(prods, axis=2)).max()


def _kgrad_ranges(i, g, spec):
    ip = np.pad(i, ((0, 0), (spec.padding, spec.padding)))
    span = spec.dilation * (spec.kernel_size - 1) + 1
    win = sliding_window_view(ip, span, axis=1)[:, :: spec.stride, :: spec.dilation]
    prods = g[:, None, :, None] * win[None]  # (c_out, c_in, n, k)
    return np.abs(prods).max(), np.abs(np.cumsum(prods, axis=2)).max()


@dataclass
class RangeProfile:
    max_abs: dict

    def int_bits(self) -> dict:
        return {k: int_bits_for(v) for k, v in self.max_abs.items()}

    def to_config(self, n_layers: int, weight_bits=16, activation_bits=16,
                  multiplier_bits=24, accumulator_bits=32, gradient_bits=24,
                  faithful: bool = True) -> QuantConfig:
        ib = self.int_bits()

        def fmt(total, cls):
            return FixedPointFormat.from_int_bits(total, min(ib[cls], total))

        return QuantConfig(
            [fmt(weight_bits, f"weight{l}") for l in range(n_layers)],
            [fmt(activation_bits, f"activation{l}") for l in range(n_layers)],
            fmt(multiplier_bits, "multiplier"),
            fmt(accumulator_bits, "accumulator"),
            fmt(gradient_bits, "gradient"),
            faithful,
        )


def profile_ranges(cnn: Cnn, channel: ChannelConfig, loss: LossKind, sequences: int,
                   seed=0, batch_symbols: int = 1024) -> RangeProfile:
    """Record max |value| per tensor class over float FP+BP runs."""
    if sequences < 1:
        raise ValueError("need at least one profiling sequence")
    peak: dict = defaultdict(float)

    def upd(cls, v):
        peak[cls] = max(peak[cls], float(v))

    for l, k in enumerate(cnn.weights):
        upd(f"weight{l}", np.abs(k).max())
    for ss in child_seeds(seed, sequences):
        s_sym, s_noise = child_seeds(ss, 2)
        symbols = generate_symbols(batch_symbols, channel.modulation, s_sym)
        y = normalize_received(apply_channel(symbols, channel, s_noise))
        z, cache = forward(cnn, y)
        for l, (spec, k, x) in enumerate(zip(cnn.layers, cnn.weights, cache.inputs)):
            upd(f"activation{l}", np.abs(x).max())
            p, a = _mac_ranges(x, k, spec.padding, spec.padding, spec.stride, spec.dilation)
            upd("multiplier", p)
            upd("accumulator", a)
        _, dz = loss.evaluate(z, symbols)
        upd("gradient", np.abs(dz).max())
        g = dz[None, :]
        for idx in reversed(range(len(cnn.layers))):
            spec, k, x = cnn.layers[idx], cnn.weights[idx], cache.inputs[idx]
            if cache.masks[idx] is not None:
                g = relu_backward(cache.masks[idx], g)
            p, a = _kgrad_ranges(x, g, spec)
            upd("multiplier", p)
            upd("accumulator", a)
            upd("gradient", np.abs(conv1d_kernel_grad(x, g, spec)).max())
            if idx > 0:
                gs = _stuff(g, spec.stride)
                span = spec.dilation * (spec.kernel_size - 1)
                right = x.shape[1] + 2 * spec.padding - gs.shape[1]
                kt = np.flip(k, axis=2).transpose(1, 0, 2)
                p, a = _mac_ranges(gs, kt, span, right, 1, spec.dilation)
                upd("multiplier", p)
                upd("accumulator", a)
                g = conv1d_input_grad(g, spec, k, x.shape[1])
                upd("gradient", np.abs(g).max())
    return RangeProfile(dict(peak))


# -- learnable bit widths ----------------------------------------------------

@dataclass
class BitwidthSearchState:
    """Continuous widths: first the per-layer weight widths, then activations."""

    bits: np.ndarray
    gamma: float
    int_bits: np.ndarray

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        self.bits = np.clip(np.asarray(self.bits, dtype=float), MIN_BITS, MAX_BITS)

    def rounded(self) -> np.ndarray:
        # ties away from zero, like the value quantizer
        return np.floor(self.bits + 0.5).astype(int)


def avg_bits(obj) -> float:
    """Mean width over the weight and activation classes."""
    if isinstance(obj, QuantConfig):
        widths = [f.total_bits for f in obj.weights + obj.activations]
    elif isinstance(obj, BitwidthSearchState):
        widths = obj.bits
    else:
        widths = list(obj)
    return float(np.mean(widths))


def soft_quant_step(cnn: Cnn, state: BitwidthSearchState, y, symbols, loss: LossKind,
                    lr: float, lr_bits: float):
    """One SGD step on task loss + gamma * mean(bits).

    Weights and layer inputs go through :func:`soft_quantize`; the values use
    straight-through gradients and the widths get the interpolation slope.
    Returns the updated model, state and the task loss.
    """
    n_layers = len(cnn.layers)
    bw, ba = state.bits[:n_layers], state.bits[n_layers:]
    iw, ia = state.int_bits[:n_layers], state.int_bits[n_layers:]
    x = np.asarray(y, dtype=float)[None, :]
    saved = []
    for l, (spec, k) in enumerate(zip(cnn.layers, cnn.weights)):
        xq, dxb = soft_quantize(x, ba[l], ia[l])
        kq, dkb = soft_quantize(k, bw[l], iw[l])
        pre = conv1d_linear(xq, spec, kq)
        mask = pre > 0 if spec.relu else None
        saved.append((x, xq, dxb, kq, dkb, mask))
        x = np.where(mask, pre, 0.0) if spec.relu else pre
    value, dz = loss.evaluate(x[0], symbols)
    if not np.isfinite(value):
        return cnn, state, value
    grad_bits = np.full(2 * n_layers, state.gamma / (2 * n_layers))
    new_w = [None] * n_layers
    g = dz[None, :]
    for l in reversed(range(n_layers)):
        spec, k = cnn.layers[l], cnn.weights[l]
        x_in, xq, dxb, kq, dkb, mask = saved[l]
        if mask is not None:
            g = relu_backward(mask, g)
        gk = conv1d_kernel_grad(xq, g, spec)
        gx = conv1d_input_grad(g, spec, kq, xq.shape[1])
        grad_bits[l] += np.sum(gk * dkb)
        grad_bits[n_layers + l] += np.sum(gx * dxb)
        new_w[l] = k - lr * gk * ste_mask(k, bw[l], iw[l])
        g = gx * ste_mask(x_in, ba[l], ia[l])
    bits = state.bits - lr_bits * grad_bits
    return Cnn(list(cnn.layers), new_w), replace(state, bits=bits), value


def rounded_config(state: BitwidthSearchState, base: QuantConfig) -> QuantConfig:
    widths = state.rounded()
    n = len(base.weights)

    def fmt(total, ib):
        return FixedPointFormat.from_int_bits(int(total), int(min(ib, total)))

    return replace(
        base,
        weights=[fmt(widths[l], state.int_bits[l]) for l in range(n)],
        activations=[fmt(widths[n + l], state.int_bits[n + l]) for l in range(n)],
    )


def quantized_ber(cnn: Cnn, channel: ChannelConfig, qcfg: QuantConfig | None,
                  n_symbols: int, seed) -> float:
    """BER on one long evaluation sequence; ``qcfg=None`` means float."""
    s_sym, s_noise = child_seeds(seed, 2)
    symbols = generate_symbols(n_symbols, channel.modulation, s_sym)
    y = normalize_received(apply_channel(symbols, channel, s_noise))
    z = forward(cnn, y)[0] if qcfg is None else quantized_forward(cnn, y, qcfg)[0]
    return ber(symbols, hard_decision(z, channel.modulation), channel.modulation)


@dataclass
class ParetoPoint:
    gamma: float
    avg_bits: float
    ber: float
    pareto: bool = False
    widths: tuple = ()
    float_ber: float = float("nan")
    status: str = "ok"


def pareto_flags(points: list[tuple[float, float]]) -> list[bool]:
    """True where no other point is at least as good in both coordinates and
    strictly better in one (both coordinates minimised)."""
    pts = np.asarray(points, dtype=float)
    flags = []
    for i, (a, b) in enumerate(pts):
        dominated = np.any(
            (pts[:, 0] <= a) & (pts[:, 1] <= b) & ((pts[:, 0] < a) | (pts[:, 1] < b))
        )
        flags.append(not dominated)
    return flags


def bitwidth_pareto_sweep(cnn: Cnn, channel: ChannelConfig, gammas, iterations: int = 500,
                          seed=0, lr: float = 0.02, lr_bits: float = 0.5,
                          eval_symbols: int = 1 << 14, batch_symbols: int = 1024,
                          profile_sequences: int = 8) -> list[ParetoPoint]:
    """Fine-tune ``cnn`` once per trade-off factor and evaluate rounded widths.

    Every point starts from ``cnn`` with all widths at the upper bound.
    """
    gammas = list(gammas)
    if not gammas:
        raise ValueError("need at least one gamma")
    loss = LossKind.supervised(channel.modulation)
    prof_seed, train_seed, eval_seed = child_seeds(seed, 3)
    profile = profile_ranges(cnn, channel, loss, profile_sequences, prof_seed, batch_symbols)
    base = profile.to_config(len(cnn.layers))
    ib = profile.int_bits()
    n = len(cnn.layers)
    int_bits = np.array([ib[f"weight{l}"] for l in range(n)] + [ib[f"activation{l}"] for l in range(n)])
    # every gamma sees the same training and evaluation data
    iter_seeds = child_seeds(train_seed, iterations)
    points = []
    for gamma in gammas:
        model = cnn.copy()
        state = BitwidthSearchState(np.full(2 * n, MAX_BITS), gamma, int_bits)
        status = "ok"
        for ss in iter_seeds:
            s_sym, s_noise = child_seeds(ss, 2)
            symbols = generate_symbols(batch_symbols, channel.modulation, s_sym)
            y = normalize_received(apply_channel(symbols, channel, s_noise))
            model, state, value = soft_quant_step(model, state, y, symbols, loss, lr, lr_bits)
            if not np.isfinite(value):
                log.warning("gamma=%g: non-finite loss, point skipped", gamma)
                status = "diverged"
                break
        if status != "ok":
            points.append(ParetoPoint(gamma, float("nan"), float("nan"), status=status))
            continue
        qcfg = rounded_config(state, base)
        b = quantized_ber(model, channel, qcfg, eval_symbols, eval_seed)
        fb = quantized_ber(model, channel, None, eval_symbols, eval_seed)
        widths = tuple(int(w) for w in state.rounded())
        points.append(ParetoPoint(gamma, avg_bits(qcfg), b, widths=widths, float_ber=fb))
    ok = [p for p in points if p.status == "ok"]
    for p, flag in zip(ok, pareto_flags([(p.avg_bits, p.ber) for p in ok])):
        p.pareto = flag
    return points
