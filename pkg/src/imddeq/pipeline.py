"""Cycle-level model of the streaming FP/BP training pipeline.

Each layer has a forward Conv stage and backward CalcKGrad / CalcInGrad
stages (the first layer has no CalcInGrad). Stages emit one output sample
per initiation interval once their inputs are available. The forward
feature maps ``y``, ``o1`` and ``o2`` sit in buffers until the backward
stages that read them have finished; the simulator tracks how many words
these buffers hold over time.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .cnn import ConvLayerSpec, default_layers

FP, LOSS, KGRAD, INGRAD = "conv", "loss", "kgrad", "ingrad"


class DeadlockError(RuntimeError):
    """The event simulation stopped making progress."""


@dataclass(frozen=True)
class Dop:
    """MAC lanes along input channels, output channels and taps, times instances."""

    in_channels: int = 1
    out_channels: int = 1
    kernel: int = 1
    instances: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel, self.instances) < 1:
            raise ValueError(f"DOP entries must be >= 1: {self}")


@dataclass(frozen=True)
class StageDesc:
    name: str
    kind: str
    layer: int
    in_channels: int
    out_channels: int
    kernel_size: int
    dop: Dop = field(default_factory=Dop)
    depth: int = 25
    rate: int = 2  # output samples per symbol
    ii_override: float | None = None

    @property
    def macs_per_output(self) -> int:
        return self.in_channels * self.out_channels * self.kernel_size

    @property
    def lanes(self) -> int:
        d = self.dop
        return (min(d.in_channels, self.in_channels) * min(d.out_channels, self.out_channels)
                * min(d.kernel, self.kernel_size) * d.instances)


def initiation_interval(stage: StageDesc) -> float:
    """Cycles per output sample.

    DOP entries larger than their dimension are clamped. Each instance has
    an II of at least one cycle; instances then share the stream, so the
    stage-level value may drop below one.
    """
    if stage.ii_override is not None:
        return float(stage.ii_override)
    d = stage.dop
    per_instance = (math.ceil(stage.in_channels / d.in_channels)
                    * math.ceil(stage.out_channels / d.out_channels)
                    * math.ceil(stage.kernel_size / d.kernel))
    return max(1, per_instance) / d.instances


def ii_per_symbol(stage: StageDesc) -> float:
    return initiation_interval(stage) * stage.rate


@dataclass(frozen=True)
class PipelineConfig:
    stages: tuple[StageDesc, ...]
    layers: tuple[ConvLayerSpec, ...]
    clock_hz: float = 300e6
    bits_per_symbol: int = 1

    def __post_init__(self):
        if self.clock_hz <= 0:
            raise ValueError("clock must be positive")
        names = [s.name for s in self.stages]
        if len(set(names)) != len(names):
            raise ValueError("stage names must be unique")
        if f"{INGRAD}1" in names:
            raise ValueError("the first layer has no input-gradient stage")

    @classmethod
    def for_layers(cls, layers=None, fp_dop=None, bp_dop=None, clock_hz: float = 300e6,
                   depth: int | None = None, bits_per_symbol: int = 1) -> "PipelineConfig":
        """Standard stage graph for a CNN.

        ``fp_dop`` is one :class:`Dop` for all layers or one per layer. Without
        ``bp_dop`` every backward stage gets the per-symbol II of its forward
        partner (balanced latencies); otherwise the cost model applies.
        """
        layers = tuple(layers or default_layers())
        n = len(layers)

        def per_layer(d):
            if d is None or isinstance(d, Dop):
                return [d or Dop()] * n
            if len(d) != n:
                raise ValueError(f"need {n} DOP entries")
            return list(d)

        fdop = per_layer(fp_dop)
        bdop = None if bp_dop is None else per_layer(bp_dop)
        stages = []
        for l, spec in enumerate(layers, start=1):
            k = spec.kernel_size
            dep = k + 4 if depth is None else depth
            stages.append(StageDesc(f"{FP}{l}", FP, l, spec.in_channels, spec.out_channels, k,
                                    fdop[l - 1], dep, 2 // spec.stride))
        stages.append(StageDesc(LOSS, LOSS, n, 1, 1, 1, Dop(), 1, 1))
        for l in range(n, 0, -1):
            spec = layers[l - 1]
            fp = stages[l - 1]
            dep = fp.depth
            # kgrad steps once per output-gradient sample; ingrad emits input-rate samples
            kg = StageDesc(f"{KGRAD}{l}", KGRAD, l, spec.in_channels, spec.out_channels,
                           spec.kernel_size, fp.dop, dep, fp.rate)
            ig = None
            if l > 1:
                taps = math.ceil(spec.kernel_size / spec.stride)
                ig = StageDesc(f"{INGRAD}{l}", INGRAD, l, spec.out_channels, spec.in_channels,
                               taps, Dop(fp.dop.out_channels, fp.dop.in_channels, fp.dop.kernel,
                                         fp.dop.instances), dep, 2)
            if bdop is None:
                target = ii_per_symbol(fp)
                kg = replace(kg, ii_override=target / kg.rate)
                if ig is not None:
                    ig = replace(ig, ii_override=target / ig.rate)
            else:
                kg = replace(kg, dop=bdop[l - 1])
                if ig is not None:
                    b = bdop[l - 1]
                    ig = replace(ig, dop=Dop(b.out_channels, b.in_channels, b.kernel, b.instances))
            stages.append(kg)
            if ig is not None:
                stages.append(ig)
        return cls(tuple(stages), layers, clock_hz, bits_per_symbol)

    def stage(self, name: str) -> StageDesc:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def scaled_bp(self, factor: float) -> "PipelineConfig":
        """Slow every backward stage down by ``factor`` (imbalance injection)."""
        out = []
        for s in self.stages:
            if s.kind in (KGRAD, INGRAD):
                s = replace(s, ii_override=initiation_interval(s) * factor)
            out.append(s)
        return replace(self, stages=tuple(out))

    @property
    def bottleneck_ii(self) -> float:
        """Largest II per symbol over all stages."""
        return max(ii_per_symbol(s) for s in self.stages)

    @property
    def depth(self) -> int:
        """Summed stage depths along the FP -> loss -> BP path."""
        return sum(s.depth for s in self.stages if s.kind != INGRAD or s.layer > 1)

    @property
    def macs_per_cycle(self) -> int:
        return sum(s.lanes for s in self.stages if s.kind != LOSS)


def pipeline_throughput(cfg: PipelineConfig) -> tuple[float, float]:
    """Steady-state (symbols/s, bits/s); fill and flush are ignored."""
    sym = cfg.clock_hz / cfg.bottleneck_ii
    return sym, sym * cfg.bits_per_symbol


def retraining_time(cfg: PipelineConfig, iterations: int = 500, n_symbols: int = 1024) -> float:
    """Seconds for ``iterations`` passes over ``n_symbols``-symbol sequences."""
    return iterations * n_symbols * cfg.bottleneck_ii / cfg.clock_hz


# -- event simulation ------------------------------------------------------

@dataclass
class BufferTrace:
    """Occupancy (words) of the FP -> BP feature-map buffers over time."""

    times: dict
    occupancy: dict
    max_occupancy: dict
    produced: dict
    consumed: dict
    throughput: float  # symbols/s measured at the last BP stage
    n_symbols: int

    @property
    def total_max(self) -> int:
        return int(sum(self.max_occupancy.values()))


@dataclass
class _Sim:
    name: str
    length: int
    ii: float
    depth: float
    deps: list  # (stream, fn(k) -> last required index)
    start: np.ndarray = None
    done: int = 0

    def __post_init__(self):
        self.start = np.full(self.length, np.nan)


def _clamp(fn, hi):
    return lambda k: min(fn(k), hi)


def simulate_buffers(cfg: PipelineConfig, n_symbols: int, naive: bool = False,
                     source_interval: float | None = None,
                     capacity: dict | None = None) -> BufferTrace:
    """Dependency-driven simulation of one training sequence.

    ``source_interval`` is the cycle spacing of received samples (default:
    the bottleneck rate, 0 means the whole sequence is available at once).
    ``naive`` holds every backward stage until the forward pass has
    finished, which is the store-everything strategy. ``capacity`` maps a
    buffer name to a limit in samples; a full buffer stalls its producer.
    """
    layers = cfg.layers
    n_layers = len(layers)
    if n_layers < 1:
        raise ValueError("need at least one layer")
    length = 2 * n_symbols
    if n_symbols < 1 or length < cfg.depth // max(1, math.ceil(cfg.bottleneck_ii)):
        raise ValueError(f"sequence of {n_symbols} symbols shorter than the pipeline depth")
    if layers[-1].stride != 2 or any(s.stride != 1 for s in layers[:-1]):
        raise ValueError("model expects stride 1 everywhere except a final stride-2 layer")
    if source_interval is None:
        source_interval = cfg.bottleneck_ii / 2
    capacity = capacity or {}
    last_s, last_z = length - 1, n_symbols - 1

    maps = ["y"] + [f"o{l}" for l in range(1, n_layers)]
    channels = {"y": 1, **{f"o{l}": layers[l - 1].out_channels for l in range(1, n_layers)}}

    sims: dict[str, _Sim] = {}
    produces: dict[str, str] = {}  # stream -> stage
    sims["source"] = _Sim("source", length, source_interval, 0.0, [])
    produces["y"] = "source"
    for l, spec in enumerate(layers, start=1):
        src = maps[l - 1]
        st = cfg.stage(f"{FP}{l}")
        p = spec.padding
        if spec.stride == 1:
            need = _clamp(lambda k, p=p: k + p, last_s)
            out_len, out = length, maps[l] if l < n_layers else "z"
        else:
            need = _clamp(lambda k, p=p: 2 * k + p, last_s)
            out_len, out = n_symbols, "z"
        sims[st.name] = _Sim(st.name, out_len, initiation_interval(st), st.depth, [(src, need)])
        produces[out] = st.name
    ls = cfg.stage(LOSS)
    sims[LOSS] = _Sim(LOSS, n_symbols, initiation_interval(ls), ls.depth, [("z", lambda k: k)])
    produces["dz"] = LOSS

    # stream of output gradients entering layer l's backward stages
    grad_in = {n_layers: "dz"}
    for l in range(n_layers, 0, -1):
        spec = layers[l - 1]
        p = spec.padding
        g = grad_in[l]
        x = maps[l - 1]
        kg = cfg.stage(f"{KGRAD}{l}")
        if spec.stride == 2:
            glen = n_symbols
            kneed = _clamp(lambda k, p=p: 2 * k + p, last_s)
            ineed = _clamp(lambda k, p=p: (k + p) // 2, last_z)
        else:
            glen = length
            kneed = _clamp(lambda k, p=p: k + p, last_s)
            ineed = _clamp(lambda k, p=p: k + p, last_s)
        sims[kg.name] = _Sim(kg.name, glen, initiation_interval(kg), kg.depth,
                             [(g, lambda k: k), (x, kneed)])
        if l > 1:
            ig = cfg.stage(f"{INGRAD}{l}")
            # the ReLU mask of layer l-1 reads its own forward output sample
            sims[ig.name] = _Sim(ig.name, length, initiation_interval(ig), ig.depth,
                                 [(g, ineed), (x, lambda k: k)])
            produces[f"g{l - 1}"] = ig.name
            grad_in[l - 1] = f"g{l - 1}"
    if naive:
        for s in sims.values():
            if s.name.startswith((KGRAD, INGRAD)):
                s.deps.append(("z", lambda k: last_z))

    # who frees each map word: consumer stage and the last step that reads it
    frees: dict[str, list] = {m: [] for m in maps}
    for l in range(n_layers, 0, -1):
        spec = layers[l - 1]
        x = maps[l - 1]
        p = spec.padding
        if spec.stride == 2:
            frees[x].append((f"{KGRAD}{l}", _clamp(lambda j, p=p: (j + p) // 2, last_z)))
        else:
            frees[x].append((f"{KGRAD}{l}", _clamp(lambda j, p=p: j + p, last_s)))
        if l > 1:
            frees[x].append((f"{INGRAD}{l}", lambda j: j))

    def ready(stream, idx):
        s = sims[produces[stream]]
        if idx >= s.done:
            return None
        return s.start[idx] + s.depth

    def freed(m, j):
        t = 0.0
        for stage, fn in frees[m]:
            s = sims[stage]
            k = fn(j)
            if k >= s.done:
                return None
            t = max(t, s.start[k] + s.depth)
        return t

    writer_of = {m: produces[m] for m in maps}
    limits = {writer_of[m]: (m, int(capacity[m])) for m in maps if m in capacity}
    order = list(sims.values())
    while True:
        progress = False
        for s in order:
            while s.done < s.length:
                k = s.done
                t = s.start[k - 1] + s.ii if k else 0.0
                blocked = False
                for stream, fn in s.deps:
                    r = ready(stream, fn(k))
                    if r is None:
                        blocked = True
                        break
                    t = max(t, r)
                if not blocked and s.name in limits:
                    m, cap = limits[s.name]
                    if k >= cap:
                        f = freed(m, k - cap)
                        if f is None:
                            blocked = True
                        else:
                            t = max(t, f - s.depth)
                if blocked:
                    break
                s.start[k] = t
                s.done += 1
                progress = True
        if all(s.done == s.length for s in order):
            break
        if not progress:
            stuck = ", ".join(f"{s.name}@{s.done}/{s.length}" for s in order if s.done < s.length)
            raise DeadlockError(f"no progress; blocked stages: {stuck}")

    times, occ, peak, produced, consumed = {}, {}, {}, {}, {}
    for m in maps:
        w = sims[writer_of[m]]
        write = w.start + w.depth
        free = np.array([freed(m, j) for j in range(length)])
        c = channels[m]
        t = np.concatenate([free, write])
        delta = np.concatenate([np.full(length, -c), np.full(length, c)])
        # frees before writes at equal times
        idx = np.lexsort((delta, t))
        times[m] = t[idx]
        occ[m] = np.cumsum(delta[idx])
        peak[m] = int(occ[m].max())
        produced[m] = c * length
        consumed[m] = c * length
    last = sims[f"{KGRAD}1"]
    half = last.length // 2
    span = last.start[-1] - last.start[half]
    steps_per_symbol = last.length / n_symbols
    rate = (last.length - 1 - half) / span / steps_per_symbol * cfg.clock_hz if span > 0 else math.inf
    return BufferTrace(times, occ, peak, produced, consumed, rate, n_symbols)


@dataclass
class MemoryReport:
    n_symbols: int
    activation_bits: int
    naive_words: int
    pipelined_words: int

    @property
    def naive_bits(self) -> int:
        return self.naive_words * self.activation_bits

    @property
    def pipelined_bits(self) -> int:
        return self.pipelined_words * self.activation_bits

    @property
    def ratio(self) -> float:
        return self.pipelined_words / self.naive_words

    def summary(self) -> str:
        return (f"N={self.n_symbols} symbols, {self.activation_bits}-bit words\n"
                f"  store-everything: {self.naive_words} words ({self.naive_bits} bits)\n"
                f"  pipelined:        {self.pipelined_words} words ({self.pipelined_bits} bits)\n"
                f"  ratio:            {self.ratio:.4%}")


def naive_words(cfg: PipelineConfig, n_symbols: int) -> int:
    """Words needed to keep every forward map that the backward pass reads."""
    chans = [1] + [s.out_channels for s in cfg.layers[:-1]]
    return 2 * n_symbols * sum(chans)


def memory_report(cfg: PipelineConfig, n_symbols: int, activation_bits: int = 16) -> MemoryReport:
    trace = simulate_buffers(cfg, n_symbols)
    return MemoryReport(n_symbols, activation_bits, naive_words(cfg, n_symbols), trace.total_max)


def buffer_csv(trace: BufferTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["buffer", "max_occupancy_words", "produced", "consumed"])
    for m in trace.max_occupancy:
        w.writerow([m, trace.max_occupancy[m], trace.produced[m], trace.consumed[m]])
    return buf.getvalue()
