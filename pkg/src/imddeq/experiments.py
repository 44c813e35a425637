"""Desk-scale experiment drivers: adaptation sweeps, bit-width trade-off and
pipeline report. Every driver returns rows; :func:`write_csv` renders them
with a schema line so outputs are byte-stable for a given config and seed.
"""

from __future__ import annotations

import configparser
import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .channel import (ChannelConfig, ConfigurationError, FiberParams, ModulationScheme,
                      apply_channel, bit_errors, generate_symbols, hard_decision,
                      normalize_received, child_seeds, seed_sequence)
from .cnn import Cnn, TrainingDivergedError, default_layers, equalize, train
from .losses import LossKind
from .pipeline import (Dop, PipelineConfig, memory_report, pipeline_throughput, retraining_time,
                       simulate_buffers)
from .quant import bitwidth_pareto_sweep
from .volterra import VolterraSpec, volterra_equalize, volterra_train

log = logging.getLogger(__name__)

ARMS = ("baseline", "no_retrain", "sup", "unsup", "volterra")
SNR_ARMS = ("no_retrain", "sup", "unsup")
REFERENCE_RETRAIN_MS = 3.3  # measured FPGA figure, shown next to the model estimate

# seed-sequence tags keep the random streams of different purposes apart
_INIT, _BASELINE, _SUP, _UNSUP, _VOLTERRA, _EVAL = range(6)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


@dataclass(frozen=True)
class ExperimentConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    kernel_size: int = 21
    channels: int = 3
    checkpoint: str | None = None
    loss_variant: str = "mse"
    mu: float | None = None  # None: per-order default
    init_iterations: int = 5000
    retrain_iterations: int = 500
    learning_rate: float = 0.02
    batch_symbols: int = 1024
    eval_symbols: int = 1 << 14
    n_seeds: int = 3
    d_values: tuple[float, ...] = (17.0, 18.8, 20.6, 22.4, 24.2, 26.0)
    arms: tuple[str, ...] = ARMS
    snr_values: tuple[float, ...] = (8.0, 11.0, 14.0, 17.0, 20.0, 23.0, 25.0)
    snr_offsets: tuple[float, ...] = (20.6, 24.2)
    volterra_memory: tuple[int, int, int] = (35, 17, 9)
    volterra_iterations: int = 2000
    volterra_lr: float = 0.02
    gammas: tuple[float, ...] = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 1.0)
    quant_iterations: int = 300
    bits_lr: float = 0.5
    clock_hz: float = 300e6
    pipeline_symbols: int = 2048
    activation_bits: int = 16
    dop_points: tuple[tuple[str, Dop], ...] = (
        ("dop1", Dop(1, 1, 1, 1)),
        ("full", Dop(3, 3, 21, 1)),
        ("full_x4", Dop(3, 3, 21, 4)),
    )
    output: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.d_values or not self.snr_values or not self.gammas or not self.dop_points:
            raise ConfigError("sweep value lists must be non-empty")
        if not self.arms or set(self.arms) - set(ARMS):
            raise ConfigError(f"arms must be a non-empty subset of {', '.join(ARMS)}")
        if self.n_seeds < 1:
            raise ConfigError("need at least one seed")
        if min(self.init_iterations, self.retrain_iterations, self.volterra_iterations,
               self.quant_iterations) < 1:
            raise ConfigError("iteration counts must be positive")
        if self.loss_variant not in ("mse", "unsup"):
            raise ConfigError(f"loss variant must be mse or unsup, got {self.loss_variant!r}")
        if self.mu is not None and not self.mu >= 0:
            raise ConfigError("mu must be nonnegative")
        if len(self.gammas) < 3:
            raise ConfigError("the bit-width sweep needs at least 3 gamma values")
        if self.eval_symbols < 1 or self.batch_symbols < 1:
            raise ConfigError("symbol counts must be positive")
        try:
            VolterraSpec(self.volterra_memory)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.n_seeds)]

    def layers(self):
        return default_layers(self.kernel_size, self.channels)

    def pipeline(self, dop: Dop) -> PipelineConfig:
        return PipelineConfig.for_layers(self.layers(), dop, clock_hz=self.clock_hz,
                                         bits_per_symbol=self.channel.modulation.bits_per_symbol)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        cp = configparser.ConfigParser()
        try:
            cp.read_string(text)
            return cls._from_parser(cp)
        except ConfigError:
            raise
        except (configparser.Error, ValueError, KeyError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
        return cls.from_ini(text)

    @classmethod
    def _from_parser(cls, cp: configparser.ConfigParser) -> "ExperimentConfig":
        kw: dict = {}
        known = {"channel", "model", "loss", "training", "volterra", "sweep", "snr_sweep",
                 "quant", "pipeline", "output"}
        unknown = set(cp.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if cp.has_section("channel"):
            c = cp["channel"]
            order = {"pam2": 2, "pam4": 4}.get(c.get("modulation", "pam2").lower())
            if order is None:
                raise ConfigError("modulation must be pam2 or pam4")
            fiber = FiberParams(c.getfloat("dispersion", 17.0), c.getfloat("attenuation", 0.2),
                                c.getfloat("length", 30.0), c.getfloat("wavelength", 1550.0))
            kw["channel"] = ChannelConfig(
                fiber, ModulationScheme.pam(order), c.getfloat("symbol_rate", 25.0), 2,
                c.getfloat("rc_rolloff", 0.2), c.getint("rc_span", 15), c.getfloat("snr_db", 20.0),
            )
        if cp.has_section("model"):
            m = cp["model"]
            kw["kernel_size"] = m.getint("kernel_size", 21)
            kw["channels"] = m.getint("channels", 3)
            kw["checkpoint"] = m.get("checkpoint") or None
        if cp.has_section("loss"):
            kw["loss_variant"] = cp["loss"].get("variant", "mse")
            if "mu" in cp["loss"]:
                kw["mu"] = cp["loss"].getfloat("mu")
        if cp.has_section("training"):
            t = cp["training"]
            for key, conv in (("init_iterations", int), ("retrain_iterations", int),
                              ("learning_rate", float), ("batch_symbols", int),
                              ("eval_symbols", int)):
                if key in t:
                    kw[key] = conv(t[key])
            if "seeds" in t:
                kw["n_seeds"] = t.getint("seeds")
        if cp.has_section("volterra"):
            v = cp["volterra"]
            if "memory" in v:
                kw["volterra_memory"] = tuple(int(x) for x in _floats(v["memory"]))
            kw["volterra_iterations"] = v.getint("iterations", 2000)
            kw["volterra_lr"] = v.getfloat("learning_rate", 0.02)
        if cp.has_section("sweep"):
            s = cp["sweep"]
            if s.get("variable", "d_cd") != "d_cd":
                raise ConfigError("the [sweep] variable must be d_cd")
            if "values" in s:
                kw["d_values"] = tuple(_floats(s["values"]))
            if "arms" in s:
                kw["arms"] = tuple(s["arms"].replace(",", " ").split())
        if cp.has_section("snr_sweep"):
            s = cp["snr_sweep"]
            if "values" in s:
                kw["snr_values"] = tuple(_floats(s["values"]))
            if "offsets" in s:
                kw["snr_offsets"] = tuple(_floats(s["offsets"]))
        if cp.has_section("quant"):
            q = cp["quant"]
            if "gammas" in q:
                kw["gammas"] = tuple(_floats(q["gammas"]))
            kw["quant_iterations"] = q.getint("iterations", 300)
            kw["bits_lr"] = q.getfloat("bits_learning_rate", 0.5)
        if cp.has_section("pipeline"):
            p = cp["pipeline"]
            kw["clock_hz"] = p.getfloat("clock_mhz", 300.0) * 1e6
            kw["pipeline_symbols"] = p.getint("sequence_symbols", 2048)
            kw["activation_bits"] = p.getint("activation_bits", 16)
            points = [(k[4:], Dop(*(int(x) for x in _floats(v))))
                      for k, v in p.items() if k.startswith("dop.")]
            if points:
                kw["dop_points"] = tuple(points)
        if cp.has_section("output"):
            o = cp["output"]
            kw["output"] = o.get("path") or None
            kw["seed"] = o.getint("seed", 0)
        try:
            return cls(**kw)
        except ConfigurationError as exc:
            raise ConfigError(str(exc)) from exc


# -- shared helpers ----------------------------------------------------------

def _ss(seed: int, *tags: int) -> np.random.SeedSequence:
    return seed_sequence([seed, *tags])


def measure_ber(equalizer, channel: ChannelConfig, n_symbols: int, seed) -> tuple[int, int]:
    """(bit errors, bits) of ``equalizer`` on one fresh sequence."""
    s_sym, s_noise = child_seeds(seed, 2)
    symbols = generate_symbols(n_symbols, channel.modulation, s_sym)
    y = normalize_received(apply_channel(symbols, channel, s_noise))
    z = equalizer(y)
    errors = bit_errors(symbols, hard_decision(z, channel.modulation), channel.modulation)
    return errors, n_symbols * channel.modulation.bits_per_symbol


def format_ber(errors: int, bits: int) -> str:
    if errors == 0:
        return f"<{1.0 / bits:.3e}"
    return f"{errors / bits:.6e}"


def parse_ber(text: str) -> float:
    """Numeric BER from a CSV cell; a floor entry maps to half the floor."""
    text = text.strip()
    if text.startswith("<"):
        return float(text[1:]) / 2
    return float(text)


def drift_path(start: float, stop: float, step: float = 1.8) -> list[float]:
    """Intermediate dispersion values visited when drifting from start to stop."""
    n = int(round((stop - start) / step))
    return [round(start + step * (i + 1), 6) for i in range(n)]


def initial_model(cfg: ExperimentConfig, seed: int, channel: ChannelConfig | None = None) -> Cnn:
    if cfg.checkpoint:
        model = checkpoint.load(cfg.checkpoint)
        if not isinstance(model, Cnn):
            raise ConfigError("checkpoint does not hold a CNN")
        return model
    channel = channel or cfg.channel
    return train(Cnn.init(cfg.layers(), _ss(seed, _INIT, 0)), channel,
                 LossKind.supervised(channel.modulation), cfg.init_iterations,
                 cfg.learning_rate, cfg.batch_symbols, _ss(seed, _INIT, 1))


def _retrain(model, channel, loss, cfg, seed_tags):
    return train(model, channel, loss, cfg.retrain_iterations, cfg.learning_rate,
                 cfg.batch_symbols, seed_sequence(list(seed_tags)))


# -- dispersion sweep --------------------------------------------------------

DISPERSION_SCHEMA = "imddeq.sweep_dispersion/1"
DISPERSION_COLUMNS = ("d_cd", "arm", "ber", "seed", "bit_errors", "bits", "status")


def _dispersion_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    ch0 = cfg.channel
    d0 = ch0.fiber.dispersion
    mod = ch0.modulation
    rows = []

    def record(d, arm, fn, idx):
        if arm not in cfg.arms:
            return
        ch = ch0.with_dispersion(d)
        try:
            errors, bits = measure_ber(fn(), ch, cfg.eval_symbols, _ss(seed, _EVAL, idx))
            rows.append(dict(d_cd=d, arm=arm, ber=format_ber(errors, bits), seed=seed,
                             bit_errors=errors, bits=bits, status="ok"))
        except TrainingDivergedError as exc:
            log.warning("seed %d, D=%g, %s: %s", seed, d, arm, exc)
            rows.append(dict(d_cd=d, arm=arm, ber="nan", seed=seed, bit_errors=-1, bits=0,
                             status="diverged"))

    init = initial_model(cfg, seed, ch0)
    adapted = {"sup": init, "unsup": init}
    losses = {"sup": LossKind.supervised(mod), "unsup": LossKind.unsupervised(mod, cfg.mu)}
    tags = {"sup": _SUP, "unsup": _UNSUP}
    d_prev = d0
    for idx, d in enumerate(cfg.d_values):
        ch = ch0.with_dispersion(d)
        record(d, "no_retrain", lambda: lambda y: equalize(init, y), idx)

        def baseline():
            if d == d0:
                return lambda y: equalize(init, y)
            m = train(Cnn.init(cfg.layers(), _ss(seed, _BASELINE, idx, 0)), ch,
                      losses["sup"], cfg.init_iterations, cfg.learning_rate,
                      cfg.batch_symbols, _ss(seed, _BASELINE, idx, 1))
            return lambda y: equalize(m, y)

        record(d, "baseline", baseline, idx)
        for arm in ("sup", "unsup"):
            def retrained(arm=arm):
                m = adapted[arm]
                if m is None:
                    raise TrainingDivergedError("model lost at an earlier drift step")
                for j, dd in enumerate(drift_path(d_prev, d)):
                    try:
                        m = _retrain(m, ch0.with_dispersion(dd), losses[arm], cfg,
                                     (seed, tags[arm], int(round(dd * 10)), j))
                    except TrainingDivergedError:
                        adapted[arm] = None
                        raise
                adapted[arm] = m
                return lambda y: equalize(m, y)

            record(d, arm, retrained, idx)

        def volterra():
            spec = volterra_train(ch, VolterraSpec(cfg.volterra_memory), cfg.volterra_iterations,
                                  cfg.volterra_lr, _ss(seed, _VOLTERRA, idx), cfg.batch_symbols)
            return lambda y: volterra_equalize(y, spec)

        record(d, "volterra", volterra, idx)
        d_prev = d
    return rows


def _run_seeds(fn, cfg: ExperimentConfig, workers: int) -> list[dict]:
    if workers > 1 and cfg.n_seeds > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, [cfg] * cfg.n_seeds, cfg.seeds))
    else:
        parts = [fn(cfg, s) for s in cfg.seeds]
    return [row for part in parts for row in part]


def sweep_dispersion(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """BER of the five arms over the dispersion grid, ordered by (d_cd, arm, seed).

    Retrained arms follow the grid in order, adapting in 1.8 ps/(nm km)
    steps from the initial training point.
    """
    if sorted(cfg.d_values) != list(cfg.d_values) or cfg.d_values[0] < cfg.channel.fiber.dispersion:
        raise ConfigError("dispersion values must be increasing from the initial training point")
    rows = _run_seeds(_dispersion_seed, cfg, workers)
    rows.sort(key=lambda r: (r["d_cd"], ARMS.index(r["arm"]), r["seed"]))
    return rows


# -- SNR sweep -----------------------------------------------------------------

SNR_SCHEMA = "imddeq.sweep_snr/1"
SNR_COLUMNS = ("d_cd", "snr_db", "arm", "ber", "seed", "bit_errors", "bits", "status")


def _snr_seed(cfg: ExperimentConfig, seed: int) -> list[dict]:
    ch0 = cfg.channel
    mod = ch0.modulation
    d0 = ch0.fiber.dispersion
    init = initial_model(cfg, seed, ch0)
    losses = {"sup": LossKind.supervised(mod), "unsup": LossKind.unsupervised(mod, cfg.mu)}
    tags = {"sup": _SUP, "unsup": _UNSUP}
    rows = []
    for oi, d in enumerate(cfg.snr_offsets):
        for si, snr in enumerate(cfg.snr_values):
            ch = ch0.with_dispersion(d).with_snr(snr)
            eval_seed = _ss(seed, _EVAL, 100 + oi, si)
            for arm in SNR_ARMS:
                status, errors, bits = "ok", -1, 0
                try:
                    m = init
                    if arm != "no_retrain":
                        for j, dd in enumerate(drift_path(d0, d)):
                            m = _retrain(m, ch0.with_dispersion(dd).with_snr(snr), losses[arm],
                                         cfg, (seed, tags[arm], 1000 + oi, si, j))
                    errors, bits = measure_ber(lambda y: equalize(m, y), ch,
                                              cfg.eval_symbols, eval_seed)
                except TrainingDivergedError as exc:
                    log.warning("seed %d, D=%g, SNR=%g, %s: %s", seed, d, snr, arm, exc)
                    status = "diverged"
                rows.append(dict(d_cd=d, snr_db=snr, arm=arm, seed=seed, bit_errors=errors,
                                 bits=bits, status=status,
                                 ber=format_ber(errors, bits) if status == "ok" else "nan"))
    return rows


def sweep_snr(cfg: ExperimentConfig, workers: int = 1) -> list[dict]:
    """BER over SNR after drifting to each dispersion offset; retraining
    happens at the evaluated SNR."""
    for d in cfg.snr_offsets:
        if d < cfg.channel.fiber.dispersion:
            raise ConfigError("dispersion offsets must not lie below the training point")
    rows = _run_seeds(_snr_seed, cfg, workers)
    rows.sort(key=lambda r: (r["d_cd"], r["snr_db"], SNR_ARMS.index(r["arm"]), r["seed"]))
    return rows


# -- bit-width trade-off -----------------------------------------------------

PARETO_SCHEMA = "imddeq.quant_pareto/1"
PARETO_COLUMNS = ("gamma", "avg_bits", "ber", "pareto", "float_ber", "widths", "status", "seed")


def quant_pareto(cfg: ExperimentConfig) -> list[dict]:
    init = initial_model(cfg, cfg.seed)
    points = bitwidth_pareto_sweep(init, cfg.channel, cfg.gammas, cfg.quant_iterations,
                                   _ss(cfg.seed, 7), cfg.learning_rate, cfg.bits_lr,
                                   cfg.eval_symbols, cfg.batch_symbols)
    return [dict(gamma=p.gamma, avg_bits=p.avg_bits, ber=p.ber, pareto=int(p.pareto),
                 float_ber=p.float_ber, widths=" ".join(map(str, p.widths)), status=p.status,
                 seed=cfg.seed) for p in points]


# -- pipeline report -----------------------------------------------------------

PIPELINE_SCHEMA = "imddeq.pipeline_report/1"
PIPELINE_COLUMNS = ("point", "dop", "macs_per_cycle", "ii_per_symbol", "throughput_sym_s",
                    "throughput_bit_s", "retrain_time_s", "max_y", "max_o1", "max_o2",
                    "total_words")


def pipeline_report(cfg: ExperimentConfig) -> tuple[list[dict], str]:
    """Rows per DOP point plus a human-readable summary."""
    rows = []
    lines = [f"{'point':<10}{'MAC/cyc':>8}{'II/sym':>10}{'Msym/s':>10}{'retrain ms':>12}"
             f"{'buffer words':>14}"]
    for name, dop in cfg.dop_points:
        pc = cfg.pipeline(dop)
        sym, bits = pipeline_throughput(pc)
        trace = simulate_buffers(pc, cfg.pipeline_symbols)
        t_retrain = retraining_time(pc, cfg.retrain_iterations, cfg.batch_symbols)
        occ = trace.max_occupancy
        rows.append(dict(point=name,
                         dop=f"{dop.in_channels}x{dop.out_channels}x{dop.kernel}x{dop.instances}",
                         macs_per_cycle=pc.macs_per_cycle, ii_per_symbol=pc.bottleneck_ii,
                         throughput_sym_s=sym, throughput_bit_s=bits, retrain_time_s=t_retrain,
                         max_y=occ.get("y", 0), max_o1=occ.get("o1", 0), max_o2=occ.get("o2", 0),
                         total_words=trace.total_max))
        lines.append(f"{name:<10}{pc.macs_per_cycle:>8}{pc.bottleneck_ii:>10g}{sym / 1e6:>10.3f}"
                     f"{t_retrain * 1e3:>12.3f}{trace.total_max:>14}")
    lines.append(f"reference FPGA retraining time: {REFERENCE_RETRAIN_MS} ms (not a model output)")
    mem = memory_report(cfg.pipeline(cfg.dop_points[0][1]), 1518 * 8, cfg.activation_bits)
    lines.append("feature-map memory for a 1518-byte frame:")
    lines.append(mem.summary())
    return rows, "\n".join(lines)


# -- single-model verbs --------------------------------------------------------

def train_model(cfg: ExperimentConfig, seed: int) -> Cnn:
    mod = cfg.channel.modulation
    loss = (LossKind.supervised(mod) if cfg.loss_variant == "mse"
            else LossKind.unsupervised(mod, cfg.mu))
    start = (checkpoint.load(cfg.checkpoint) if cfg.checkpoint
             else Cnn.init(cfg.layers(), _ss(seed, _INIT, 0)))
    if not isinstance(start, Cnn):
        raise ConfigError("checkpoint does not hold a CNN")
    return train(start, cfg.channel, loss, cfg.init_iterations, cfg.learning_rate,
                 cfg.batch_symbols, _ss(seed, _INIT, 1))


EVALUATE_SCHEMA = "imddeq.evaluate/1"
EVALUATE_COLUMNS = ("model", "d_cd", "snr_db", "ber", "bit_errors", "bits", "seed")


def evaluate_model(cfg: ExperimentConfig, model, seed: int) -> list[dict]:
    if isinstance(model, Cnn):
        kind, fn = "cnn", lambda y: equalize(model, y)
    else:
        kind, fn = "volterra", lambda y: volterra_equalize(y, model)
    ch = cfg.channel
    errors, bits = measure_ber(fn, ch, cfg.eval_symbols, _ss(seed, _EVAL, 999))
    return [dict(model=kind, d_cd=ch.fiber.dispersion, snr_db=ch.snr_db,
                 ber=format_ber(errors, bits), bit_errors=errors, bits=bits, seed=seed)]


# -- output ------------------------------------------------------------------

def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else "nan"
    return str(v)


def render_csv(rows: list[dict], columns, schema: str) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def read_csv(text: str) -> tuple[str, list[dict]]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise ValueError("missing schema line")
    schema = lines[0][len("# schema: "):]
    return schema, list(csv.DictReader(lines[1:]))


def write_csv(rows, columns, schema, path) -> str:
    text = render_csv(rows, columns, schema)
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return text
