"""IM/DD optical link: PAM transmitter, RC shaping, chromatic dispersion,
square-law detection and AWGN, plus symbol decisions and BER counting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0  # m/s


class ConfigurationError(ValueError):
    """Raised for channel parameters that cannot be simulated faithfully."""


def _gray_bits(order: int) -> tuple[tuple[int, ...], ...]:
    nbits = int(math.log2(order))
    rows = []
    for idx in range(order):
        g = idx ^ (idx >> 1)
        rows.append(tuple((g >> (nbits - 1 - b)) & 1 for b in range(nbits)))
    return tuple(rows)


@dataclass(frozen=True)
class ModulationScheme:
    """PAM alphabet with its Gray bit mapping.

    ``alphabet`` holds the transmitted field amplitudes (nonnegative for
    intensity modulation); ``targets`` are the points the equalizer output
    is trained towards and decided against.
    """

    order: int
    alphabet: tuple[float, ...]
    targets: tuple[float, ...]
    bit_mapping: tuple[tuple[int, ...], ...] = field(default=())

    def __post_init__(self):
        if self.order not in (2, 4):
            raise ConfigurationError(f"unsupported PAM order {self.order}")
        if len(self.alphabet) != self.order or len(self.targets) != self.order:
            raise ConfigurationError("alphabet/targets must have one entry per symbol")
        if np.any(np.diff(self.alphabet) <= 0) or np.any(np.diff(self.targets) <= 0):
            raise ConfigurationError("alphabet and targets must be strictly increasing")
        if not self.bit_mapping:
            object.__setattr__(self, "bit_mapping", _gray_bits(self.order))
        if len(set(self.bit_mapping)) != self.order:
            raise ConfigurationError("bit mapping is not a bijection")

    @classmethod
    def pam(cls, order: int) -> "ModulationScheme":
        # amplitudes chosen so the detected intensities are equally spaced
        levels = np.arange(order) / (order - 1)
        amps = tuple(float(a) for a in np.sqrt(levels))
        if order == 2:
            targets = (-1.0, 1.0)
        else:
            targets = tuple(float(t) for t in np.arange(order) - (order - 1) / 2)
        return cls(order=order, alphabet=amps, targets=targets)

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @property
    def bit_table(self) -> np.ndarray:
        return np.array(self.bit_mapping, dtype=np.uint8)


@dataclass(frozen=True)
class FiberParams:
    """Standard single-mode fiber. Units: ps/(nm km), dB/km, km, nm."""

    dispersion: float = 17.0
    attenuation: float = 0.2
    length: float = 30.0
    wavelength: float = 1550.0

    def __post_init__(self):
        if self.length < 0 or self.wavelength <= 0 or self.attenuation < 0:
            raise ConfigurationError(f"invalid fiber parameters: {self}")

    @property
    def beta2(self) -> float:
        """Group velocity dispersion in s^2/m."""
        lam = self.wavelength * 1e-9
        d_si = self.dispersion * 1e-6  # ps/(nm km) -> s/m^2
        return -(lam**2) * d_si / (2 * math.pi * SPEED_OF_LIGHT)

    @property
    def alpha_np(self) -> float:
        """Power attenuation in Np/m."""
        return self.attenuation * math.log(10) / 10 / 1000


@dataclass(frozen=True)
class ChannelConfig:
    fiber: FiberParams = field(default_factory=FiberParams)
    modulation: ModulationScheme = field(default_factory=lambda: ModulationScheme.pam(2))
    symbol_rate: float = 25.0  # GBd
    sps: int = 2
    rc_rolloff: float = 0.2
    rc_span: int = 15
    snr_db: float = 20.0
    fft_size: int | None = None
    pulse: str = "rc"

    def __post_init__(self):
        if self.sps != 2:
            raise ConfigurationError("oversampling is fixed at 2 samples/symbol")
        if not 0 < self.rc_rolloff <= 1:
            raise ConfigurationError("RC roll-off must lie in (0, 1]")
        if self.rc_span % 2 != 1:
            raise ConfigurationError("RC span must be odd")
        if self.pulse not in ("rc", "impulse"):
            raise ConfigurationError(f"unknown pulse {self.pulse!r}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigurationError("snr_db must be finite or +inf")
        if self.fft_size is not None and self.fft_size & (self.fft_size - 1):
            raise ConfigurationError("fft_size must be a power of two")

    @property
    def sample_rate(self) -> float:
        return self.symbol_rate * 1e9 * self.sps

    def with_dispersion(self, d_cd: float) -> "ChannelConfig":
        return replace(self, fiber=replace(self.fiber, dispersion=d_cd))

    def with_snr(self, snr_db: float) -> "ChannelConfig":
        return replace(self, snr_db=snr_db)

    def pulse_taps(self) -> np.ndarray:
        if self.pulse == "impulse":
            return np.ones(1)
        return rc_taps(self.rc_rolloff, self.rc_span, self.sps)

    def dispersion_memory(self) -> int:
        """Delay spread of the CD impulse response over the signal band, in samples."""
        bandwidth = self.symbol_rate * 1e9 * (1 + self.rc_rolloff)
        spread = abs(self.fiber.beta2) * 2 * math.pi * bandwidth * self.fiber.length * 1e3
        return int(math.ceil(spread * self.sample_rate))

    def required_fft_size(self, n_symbols: int) -> int:
        guard = 4 * self.dispersion_memory() + len(self.pulse_taps())
        return n_symbols * self.sps + guard


def seed_sequence(seed) -> np.random.SeedSequence:
    """Accept an int, ``None`` or an existing SeedSequence."""
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def child_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    """``n`` independent children, identical on every call (unlike ``spawn``)."""
    ss = seed_sequence(seed)
    return [np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (i,),
                                   pool_size=ss.pool_size) for i in range(n)]


def generate_symbols(n: int, mod: ModulationScheme, seed) -> np.ndarray:
    """Draw ``n`` i.i.d. uniform symbol indices."""
    if n <= 0:
        raise ValueError("cannot generate an empty symbol sequence")
    rng = np.random.default_rng(seed)
    return rng.integers(0, mod.order, size=n)


def rc_taps(rolloff: float, span: int, sps: int) -> np.ndarray:
    """Raised-cosine impulse response sampled at ``sps`` samples/symbol.

    Peak-normalized to one; ``span * sps + 1`` taps.
    """
    if not 0 < rolloff <= 1:
        raise ValueError("roll-off must lie in (0, 1]")
    n = span * sps + 1
    t = (np.arange(n) - (n - 1) / 2) / sps
    denom = 1.0 - (2.0 * rolloff * t) ** 2
    singular = np.isclose(denom, 0.0, atol=1e-12)
    safe = np.where(singular, 1.0, denom)
    h = np.sinc(t) * np.cos(np.pi * rolloff * t) / safe
    h[singular] = np.pi / 4 * np.sinc(1.0 / (2.0 * rolloff))
    return h / h[(n - 1) // 2]


def cd_frequency_response(fiber: FiberParams, freq) -> np.ndarray:
    """Fiber transfer function exp(-alpha L / 2 + j 2 pi^2 beta2 f^2 L)."""
    f = np.asarray(freq, dtype=float)
    length = fiber.length * 1e3
    return np.exp(-0.5 * fiber.alpha_np * length + 1j * 2 * np.pi**2 * fiber.beta2 * f**2 * length)


def transmit(symbols: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
    """Map, upsample and pulse-shape; returns the field before the fiber."""
    symbols = np.asarray(symbols)
    if symbols.size and (symbols.min() < 0 or symbols.max() >= cfg.modulation.order):
        raise ValueError(f"symbol indices must lie in [0, {cfg.modulation.order})")
    amps = np.asarray(cfg.modulation.alphabet)[symbols]
    up = np.zeros(len(symbols) * cfg.sps)
    up[:: cfg.sps] = amps
    return np.convolve(up, cfg.pulse_taps(), mode="same")


def propagate(field_in: np.ndarray, cfg: ChannelConfig) -> np.ndarray:
    """Apply chromatic dispersion by zero-padded FFT filtering."""
    n = len(field_in)
    n_symbols = n // cfg.sps
    need = cfg.required_fft_size(n_symbols)
    if cfg.fft_size is None:
        nfft = 1 << (need - 1).bit_length()
    else:
        nfft = cfg.fft_size
        if nfft < need:
            raise ConfigurationError(
                f"fft_size {nfft} < {need} needed for {n_symbols} symbols plus dispersion guard"
            )
    freq = np.fft.fftfreq(nfft, d=1.0 / cfg.sample_rate)
    spec = np.fft.fft(field_in, nfft) * cd_frequency_response(cfg.fiber, freq)
    return np.fft.ifft(spec)[:n]


def square_law(field_in: np.ndarray) -> np.ndarray:
    return np.abs(field_in) ** 2


def awgn(s: np.ndarray, snr_db: float, seed) -> np.ndarray:
    """Add white Gaussian noise at ``snr_db`` relative to the mean square of ``s``."""
    s = np.asarray(s, dtype=float)
    if s.size == 0:
        raise ValueError("empty signal")
    if snr_db == math.inf:
        return s.copy()
    power = np.mean(s**2)
    sigma = math.sqrt(power / 10 ** (snr_db / 10))
    rng = np.random.default_rng(seed)
    return s + sigma * rng.standard_normal(s.shape)


def apply_channel(symbols: np.ndarray, cfg: ChannelConfig, seed) -> np.ndarray:
    """Full link of transmitter, fiber, photodiode and receiver noise.

    Returns ``len(symbols) * sps`` real samples.
    """
    x = transmit(np.asarray(symbols), cfg)
    if cfg.fiber.length > 0:
        x = propagate(x, cfg)
    return awgn(square_law(x), cfg.snr_db, seed)


def normalize_received(y: np.ndarray) -> np.ndarray:
    """AC-couple and scale the photodiode output to unit variance."""
    y = np.asarray(y, dtype=float)
    sd = y.std()
    if sd == 0:
        return y - y.mean()
    return (y - y.mean()) / sd


def hard_decision(z, points) -> np.ndarray:
    """Nearest-point decision; ties go to the lower index.

    ``points`` is either a sequence of constellation values or a
    ``ModulationScheme`` (decided against its targets).
    """
    if isinstance(points, ModulationScheme):
        points = points.targets
    pts = np.asarray(points, dtype=float)
    z = np.asarray(z, dtype=float)
    dist = np.abs(z[..., None] - pts)
    # argmin returns the first minimum, which is the lower index
    return np.argmin(dist, axis=-1)


def bit_errors(tx: np.ndarray, rx: np.ndarray, mod: ModulationScheme) -> int:
    tx = np.asarray(tx)
    rx = np.asarray(rx)
    if tx.shape != rx.shape:
        raise ValueError(f"length mismatch: {tx.shape} vs {rx.shape}")
    table = mod.bit_table
    return int(np.count_nonzero(table[tx] != table[rx]))


def ber(tx: np.ndarray, rx: np.ndarray, mod: ModulationScheme) -> float:
    """Bit error rate under the scheme's bit mapping."""
    errors = bit_errors(tx, rx, mod)
    return errors / (len(tx) * mod.bits_per_symbol)
