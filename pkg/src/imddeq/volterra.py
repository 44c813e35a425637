"""Third-order Volterra equalizer trained by SGD on the squared error.

Kernels are symmetric, so each order keeps one weight per unordered index
multiset. Features are scaled to unit RMS on a calibration sequence before
training so a single learning rate works for all orders.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import lru_cache
from itertools import combinations_with_replacement
from math import comb

import numpy as np

from .channel import ChannelConfig, apply_channel, generate_symbols, normalize_received, child_seeds
from .cnn import TrainingDivergedError


@lru_cache(maxsize=None)
def _monomials(memory: tuple[int, ...]) -> tuple[np.ndarray, ...]:
    out = []
    for order, taps in enumerate(memory, start=1):
        out.append(np.array(list(combinations_with_replacement(range(taps), order)), dtype=int))
    return tuple(out)


def feature_count(memory, include_bias: bool = False) -> int:
    """Number of unique monomials: sum over orders of C(F_p + p - 1, p)."""
    return sum(comb(f + p - 1, p) for p, f in enumerate(memory, start=1)) + int(include_bias)


@dataclass(frozen=True)
class VolterraSpec:
    memory: tuple[int, int, int] = (35, 17, 9)
    weights: np.ndarray | None = None
    include_bias: bool = True
    scales: np.ndarray | None = None

    def __post_init__(self):
        f = tuple(int(v) for v in self.memory)
        if len(f) != 3 or not f[0] >= f[1] >= f[2] > 0:
            raise ValueError(f"memory must satisfy F1 >= F2 >= F3 > 0, got {f}")
        object.__setattr__(self, "memory", f)

    @property
    def n_features(self) -> int:
        return feature_count(self.memory, self.include_bias)

    @property
    def n_params(self) -> int:
        return self.n_features


def volterra_features(window, spec: VolterraSpec) -> np.ndarray:
    """Monomials of one window centred on the decision sample.

    Order ``p`` uses the ``F_p`` samples around the centre. No bias entry
    and no scaling; see :func:`feature_matrix` for the model input.
    """
    w = np.asarray(window, dtype=float)
    if w.ndim != 1 or len(w) < spec.memory[0]:
        raise ValueError(f"window of length {w.size} shorter than F1={spec.memory[0]}")
    c = (len(w) - 1) // 2
    parts = []
    for taps, idx in zip(spec.memory, _monomials(spec.memory)):
        seg = w[c - (taps - 1) // 2: c - (taps - 1) // 2 + taps]
        parts.append(np.prod(seg[idx], axis=1))
    return np.concatenate(parts)


def _raw_features(y: np.ndarray, spec: VolterraSpec) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1 or len(y) % 2:
        raise ValueError("received sequence must be 1-D with even length")
    f1 = spec.memory[0]
    half = (f1 - 1) // 2
    yp = np.pad(y, (half, f1))
    centres = np.arange(0, len(y), 2)
    windows = yp[centres[:, None] + np.arange(f1)]
    parts = []
    for taps, idx in zip(spec.memory, _monomials(spec.memory)):
        start = half - (taps - 1) // 2
        seg = windows[:, start: start + taps]
        parts.append(np.prod(seg[:, idx], axis=2))
    return np.concatenate(parts, axis=1)


def feature_matrix(y: np.ndarray, spec: VolterraSpec) -> np.ndarray:
    """One scaled feature row per symbol (stride 2 over the input)."""
    phi = _raw_features(y, spec)
    if spec.scales is not None:
        phi = phi / spec.scales
    if spec.include_bias:
        phi = np.hstack([phi, np.ones((len(phi), 1))])
    return phi


def volterra_equalize(y: np.ndarray, spec: VolterraSpec) -> np.ndarray:
    if spec.weights is None:
        raise ValueError("Volterra model has no weights")
    return feature_matrix(y, spec) @ spec.weights


def calibrate(channel: ChannelConfig, spec: VolterraSpec, seed, n_symbols: int = 4096) -> VolterraSpec:
    s_sym, s_noise = child_seeds(seed, 2)
    symbols = generate_symbols(n_symbols, channel.modulation, s_sym)
    y = normalize_received(apply_channel(symbols, channel, s_noise))
    rms = np.sqrt(np.mean(_raw_features(y, spec) ** 2, axis=0))
    return replace(spec, scales=np.where(rms > 0, rms, 1.0))


def volterra_train(channel: ChannelConfig, spec: VolterraSpec, iterations: int, lr: float,
                   seed=0, batch_symbols: int = 1024) -> VolterraSpec:
    """SGD on the MSE against the true symbol targets.

    Uncalibrated specs are calibrated first; missing weights start at zero.
    """
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    cal_seed, *seeds = child_seeds(seed, iterations + 1)
    if spec.scales is None:
        spec = calibrate(channel, spec, cal_seed)
    w = np.zeros(spec.n_features) if spec.weights is None else np.array(spec.weights, dtype=float)
    targets = np.asarray(channel.modulation.targets)
    for it, ss in enumerate(seeds):
        s_sym, s_noise = child_seeds(ss, 2)
        symbols = generate_symbols(batch_symbols, channel.modulation, s_sym)
        y = normalize_received(apply_channel(symbols, channel, s_noise))
        phi = feature_matrix(y, spec)
        err = phi @ w - targets[symbols]
        loss = np.mean(err**2)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"Volterra loss non-finite at iteration {it} (lr={lr})")
        w = w - lr * (2.0 / len(err)) * (phi.T @ err)
    return replace(spec, weights=w)
