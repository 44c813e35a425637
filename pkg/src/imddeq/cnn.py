"""Bias-free 1D-CNN equalizer with hand-written forward and backward passes.

Forward layers compute ``o = ReLU(i * k)`` (cross-correlation). The
backward pass follows the streaming hardware split: the input gradient is
the flipped kernel correlated with the zero-stuffed output gradient, and
the kernel gradient is the input correlated with the output gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .channel import ChannelConfig, apply_channel, generate_symbols, normalize_received, child_seeds

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss turned non-finite during training."""


@dataclass(frozen=True)
class ConvLayerSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 21
    padding: int | None = None
    stride: int = 1
    dilation: int = 1
    relu: bool = True

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        if self.dilation < 1:
            raise ValueError("dilation must be >= 1")
        if self.padding is None:
            object.__setattr__(self, "padding", self.dilation * (self.kernel_size - 1) // 2)

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels, self.kernel_size)

    def output_length(self, n: int) -> int:
        span = self.dilation * (self.kernel_size - 1)
        return (n + 2 * self.padding - span - 1) // self.stride + 1


def default_layers(kernel_size: int = 21, channels: int = 3) -> list[ConvLayerSpec]:
    return [
        ConvLayerSpec(1, channels, kernel_size),
        ConvLayerSpec(channels, channels, kernel_size),
        ConvLayerSpec(channels, 1, kernel_size, stride=2, relu=False),
    ]


@dataclass
class Cnn:
    layers: list[ConvLayerSpec]
    weights: list[np.ndarray]

    def __post_init__(self):
        if len(self.layers) != len(self.weights):
            raise ValueError("one weight tensor per layer required")
        for spec, k in zip(self.layers, self.weights):
            if k.shape != spec.weight_shape:
                raise ValueError(f"weight shape {k.shape} != {spec.weight_shape}")

    @classmethod
    def init(cls, layers: list[ConvLayerSpec] | None = None, seed=0) -> "Cnn":
        """Fan-in scaled uniform initialisation."""
        layers = list(layers or default_layers())
        rng = np.random.default_rng(seed)
        weights = []
        for spec in layers:
            bound = 1.0 / math.sqrt(spec.in_channels * spec.kernel_size)
            weights.append(rng.uniform(-bound, bound, spec.weight_shape))
        return cls(layers, weights)

    @property
    def n_params(self) -> int:
        return sum(k.size for k in self.weights)

    def copy(self) -> "Cnn":
        return Cnn(list(self.layers), [k.copy() for k in self.weights])


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    masks: list[np.ndarray | None]
    weights: list[np.ndarray] = field(repr=False)
    output_length: int = 0


@dataclass
class GradientSet:
    kernels: list[np.ndarray]
    inputs: list[np.ndarray | None]


def correlate(x: np.ndarray, k: np.ndarray, pad_left: int, pad_right: int,
              stride: int = 1, dilation: int = 1) -> np.ndarray:
    """Multi-channel cross-correlation ``o[c,n] = sum k[c,d,j] xpad[d, n*s + j*D]``."""
    c_out, c_in, ksz = k.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ValueError(f"input shape {x.shape} does not match kernel {k.shape}")
    xp = np.pad(x, ((0, 0), (pad_left, pad_right)))
    span = dilation * (ksz - 1) + 1
    if xp.shape[1] < span:
        raise ValueError("input shorter than the dilated kernel")
    win = sliding_window_view(xp, span, axis=1)[:, ::stride, ::dilation]
    return np.einsum("oik,ink->on", k, win, optimize=True)


def _stuff(g: np.ndarray, stride: int) -> np.ndarray:
    if stride == 1:
        return g
    out = np.zeros((g.shape[0], (g.shape[1] - 1) * stride + 1))
    out[:, ::stride] = g
    return out


def _check(i: np.ndarray, spec: ConvLayerSpec, k: np.ndarray):
    if k.shape != spec.weight_shape:
        raise ValueError(f"kernel shape {k.shape} != {spec.weight_shape}")
    if i.ndim != 2 or i.shape[0] != spec.in_channels:
        raise ValueError(f"input shape {i.shape} incompatible with {spec}")


def conv1d_linear(i: np.ndarray, spec: ConvLayerSpec, k: np.ndarray) -> np.ndarray:
    _check(i, spec, k)
    return correlate(i, k, spec.padding, spec.padding, spec.stride, spec.dilation)


def conv1d_forward(i: np.ndarray, spec: ConvLayerSpec, k: np.ndarray) -> np.ndarray:
    """One Conv block: correlation followed by ReLU when the layer has one."""
    o = conv1d_linear(i, spec, k)
    return np.maximum(o, 0.0) if spec.relu else o


def conv1d_input_grad(grad_out: np.ndarray, spec: ConvLayerSpec, k: np.ndarray,
                      input_length: int | None = None) -> np.ndarray:
    """Gradient w.r.t. the layer input: flipped kernel over the zero-stuffed gradient.

    For a stride-2 layer the stuffing turns this into a correlation whose
    taps are spaced by the dilation. ``input_length`` defaults to the
    largest length consistent with ``grad_out`` (``S * N_out`` for even
    inputs).
    """
    if k.shape != spec.weight_shape:
        raise ValueError(f"kernel shape {k.shape} != {spec.weight_shape}")
    if grad_out.ndim != 2 or grad_out.shape[0] != spec.out_channels:
        raise ValueError(f"gradient shape {grad_out.shape} incompatible with {spec}")
    n_out = grad_out.shape[1]
    if input_length is None:
        input_length = n_out * spec.stride
    if spec.output_length(input_length) != n_out:
        raise ValueError(f"gradient length {n_out} does not match input length {input_length}")
    gs = _stuff(grad_out, spec.stride)
    span = spec.dilation * (spec.kernel_size - 1)
    padded_len = input_length + 2 * spec.padding
    right = padded_len - gs.shape[1]
    kt = np.flip(k, axis=2).transpose(1, 0, 2)
    grad_padded = correlate(gs, kt, span, right, 1, spec.dilation)
    return grad_padded[:, spec.padding: spec.padding + input_length]


def conv1d_kernel_grad(i: np.ndarray, grad_out: np.ndarray, spec: ConvLayerSpec) -> np.ndarray:
    """Gradient w.r.t. the kernel: input correlated with the zero-stuffed gradient."""
    if i.ndim != 2 or i.shape[0] != spec.in_channels:
        raise ValueError(f"input shape {i.shape} incompatible with {spec}")
    n_out = spec.output_length(i.shape[1])
    if grad_out.shape != (spec.out_channels, n_out):
        raise ValueError(f"gradient shape {grad_out.shape} != {(spec.out_channels, n_out)}")
    gs = _stuff(grad_out, spec.stride)
    ip = np.pad(i, ((0, 0), (spec.padding, spec.padding)))
    length = gs.shape[1]
    win = sliding_window_view(ip, length, axis=1)[:, :: spec.dilation][:, : spec.kernel_size]
    return np.einsum("ol,ikl->oik", gs, win, optimize=True)


def relu_backward(mask: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pass ``g`` where the pre-activation was positive (subgradient 0 at 0)."""
    return np.where(mask, g, 0.0)


def forward(cnn: Cnn, y: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Run the equalizer on one received sequence (2 samples/symbol)."""
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) % 2:
        raise ValueError("received sequence must be 1-D with even length")
    x = y[None, :]
    inputs, masks = [], []
    for spec, k in zip(cnn.layers, cnn.weights):
        inputs.append(x)
        pre = conv1d_linear(x, spec, k)
        if spec.relu:
            mask = pre > 0
            x = np.where(mask, pre, 0.0)
        else:
            mask = None
            x = pre
        masks.append(mask)
    z = x[0]
    return z, ForwardCache(inputs, masks, list(cnn.weights), len(z))


def backward(cnn: Cnn, cache: ForwardCache, dz: np.ndarray,
             input_grads: bool = False) -> GradientSet:
    """Backpropagate ``dz`` through the cached forward pass.

    The first layer only gets its kernel gradient unless ``input_grads``.
    """
    if len(cache.weights) != len(cnn.weights) or any(
        a is not b for a, b in zip(cache.weights, cnn.weights)
    ):
        raise ValueError("forward cache was produced by different weights")
    dz = np.asarray(dz, dtype=float)
    if dz.shape != (cache.output_length,):
        raise ValueError(f"dz has shape {dz.shape}, expected ({cache.output_length},)")
    n_layers = len(cnn.layers)
    kgrads: list[np.ndarray] = [None] * n_layers
    igrads: list[np.ndarray | None] = [None] * n_layers
    g = dz[None, :]
    for idx in reversed(range(n_layers)):
        spec, k = cnn.layers[idx], cnn.weights[idx]
        if cache.masks[idx] is not None:
            g = relu_backward(cache.masks[idx], g)
        x = cache.inputs[idx]
        kgrads[idx] = conv1d_kernel_grad(x, g, spec)
        if idx > 0 or input_grads:
            g = conv1d_input_grad(g, spec, k, x.shape[1])
            igrads[idx] = g
    return GradientSet(kgrads, igrads)


def sgd_step(cnn: Cnn, grads: GradientSet, lr: float) -> Cnn:
    """Plain SGD: ``k <- k - lr * grad``; returns a new model."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    return Cnn(list(cnn.layers), [k - lr * g for k, g in zip(cnn.weights, grads.kernels)])


def equalize(cnn: Cnn, y: np.ndarray) -> np.ndarray:
    return forward(cnn, y)[0]


def train(cnn: Cnn, channel: ChannelConfig, loss, iterations: int, lr: float,
          batch_symbols: int = 1024, seed=0) -> Cnn:
    """SGD on freshly simulated sequences, one sequence per iteration.

    ``loss`` is a :class:`imddeq.losses.LossKind`.
    """
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    seeds = child_seeds(seed, iterations)
    mod = channel.modulation
    for it, ss in enumerate(seeds):
        s_sym, s_noise = child_seeds(ss, 2)
        symbols = generate_symbols(batch_symbols, mod, s_sym)
        y = normalize_received(apply_channel(symbols, channel, s_noise))
        z, cache = forward(cnn, y)
        value, dz = loss.evaluate(z, symbols)
        if not (np.isfinite(value) and np.all(np.isfinite(dz))):
            raise TrainingDivergedError(
                f"non-finite loss at iteration {it} (lr={lr}, loss={loss.variant})"
            )
        cnn = sgd_step(cnn, backward(cnn, cache, dz), lr)
    return cnn


def with_weights(cnn: Cnn, weights: list[np.ndarray]) -> Cnn:
    return replace(cnn, weights=[np.asarray(w, dtype=float) for w in weights])
