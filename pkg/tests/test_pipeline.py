import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imddeq.cnn import ConvLayerSpec
from imddeq.pipeline import (DeadlockError, Dop, PipelineConfig, StageDesc, buffer_csv,
                             initiation_interval, ii_per_symbol, memory_report, naive_words,
                             pipeline_throughput, retraining_time, simulate_buffers)

DOP1 = Dop(1, 1, 1, 1)
FULL = Dop(3, 3, 21, 1)
FULL_X4 = Dop(3, 3, 21, 4)


def test_initiation_interval_examples():
    conv2 = StageDesc("conv2", "conv", 2, 3, 3, 21, DOP1)
    assert initiation_interval(conv2) == 189
    assert initiation_interval(StageDesc("conv2", "conv", 2, 3, 3, 21, FULL)) == 1
    x4 = StageDesc("conv3", "conv", 3, 3, 1, 21, FULL_X4, rate=1)
    assert initiation_interval(x4) == 0.25
    assert ii_per_symbol(StageDesc("conv2", "conv", 2, 3, 3, 21, FULL_X4)) == 0.5
    # DOP beyond the dimension is clamped
    assert initiation_interval(StageDesc("c", "conv", 1, 1, 3, 21, Dop(8, 8, 64, 1))) == 1


def test_throughput_example():
    cfg = PipelineConfig.for_layers(fp_dop=FULL, clock_hz=300e6)
    sym, bits = pipeline_throughput(cfg)
    assert sym == pytest.approx(150e6)
    assert bits == sym
    pam4 = PipelineConfig.for_layers(fp_dop=FULL, bits_per_symbol=2)
    assert pipeline_throughput(pam4)[1] == pytest.approx(300e6)
    default = PipelineConfig.for_layers()
    assert default.bottleneck_ii == 378
    assert retraining_time(default, 500, 1024) == pytest.approx(500 * 1024 * 378 / 300e6)


def test_balanced_backward_matches_forward_partner():
    cfg = PipelineConfig.for_layers(fp_dop=[DOP1, FULL, DOP1])
    for l in (1, 2, 3):
        fp = ii_per_symbol(cfg.stage(f"conv{l}"))
        assert ii_per_symbol(cfg.stage(f"kgrad{l}")) == fp
        if l > 1:
            assert ii_per_symbol(cfg.stage(f"ingrad{l}")) == fp
    with pytest.raises(KeyError):
        cfg.stage("ingrad1")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3), st.integers(1, 21), st.integers(1, 4)),
                min_size=3, max_size=3),
       st.integers(0, 2), st.integers(0, 3))
def test_more_parallelism_never_slower(dops, layer, dim):
    base = [Dop(*d) for d in dops]
    bumped = list(base)
    fields = list(base[layer].__dict__.values())
    fields[dim] += 1
    bumped[layer] = Dop(*fields)
    a = PipelineConfig.for_layers(fp_dop=base)
    b = PipelineConfig.for_layers(fp_dop=bumped)
    assert pipeline_throughput(b)[0] >= pipeline_throughput(a)[0]


def test_bottleneck_is_slowest_stage():
    cfg = PipelineConfig.for_layers(fp_dop=[FULL, DOP1, FULL])
    assert cfg.bottleneck_ii == max(ii_per_symbol(s) for s in cfg.stages) == 378


@pytest.mark.parametrize("dop", [DOP1, FULL])
def test_buffer_occupancy_independent_of_length(dop):
    cfg = PipelineConfig.for_layers(fp_dop=dop)
    peaks = [simulate_buffers(cfg, n).max_occupancy for n in (256, 1024, 4096)]
    assert peaks[0] == peaks[1] == peaks[2]


def test_naive_memory_doubles_with_length():
    cfg = PipelineConfig.for_layers()
    totals = [simulate_buffers(cfg, n, naive=True).total_max for n in (256, 512, 1024)]
    assert totals[1] == 2 * totals[0] and totals[2] == 2 * totals[1]
    assert totals[0] == naive_words(cfg, 256) == 14 * 256


def test_imbalanced_backward_grows():
    balanced = PipelineConfig.for_layers()
    # samples keep arriving at the forward rate while the backward side lags
    line = balanced.bottleneck_ii / 2
    cfg = balanced.scaled_bp(1.5)
    a = simulate_buffers(cfg, 256, source_interval=line).total_max
    b = simulate_buffers(cfg, 1024, source_interval=line).total_max
    assert b > 3 * a


def test_occupancy_conservation():
    trace = simulate_buffers(PipelineConfig.for_layers(fp_dop=FULL), 300)
    for m, occ in trace.occupancy.items():
        assert np.all(occ >= 0)
        assert occ[-1] == 0
        assert trace.produced[m] == trace.consumed[m]
        assert np.all(np.diff(trace.times[m]) >= 0)
    assert buffer_csv(trace).splitlines()[0] == "buffer,max_occupancy_words,produced,consumed"


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3, 7, 21]),
                          st.integers(1, 2)), min_size=3, max_size=3))
def test_simulated_throughput_matches_formula(dops):
    cfg = PipelineConfig.for_layers(fp_dop=[Dop(*d) for d in dops])
    trace = simulate_buffers(cfg, 512, source_interval=0)
    assert trace.throughput == pytest.approx(pipeline_throughput(cfg)[0], rel=0.02)


def test_undersized_buffer_deadlocks():
    cfg = PipelineConfig.for_layers()
    with pytest.raises(DeadlockError):
        simulate_buffers(cfg, 256, capacity={"o1": 10})
    # a capacity at the measured peak is enough
    peak = simulate_buffers(cfg, 256).max_occupancy["o1"]
    ok = simulate_buffers(cfg, 256, capacity={"o1": peak // 3 + 1})
    assert ok.max_occupancy["o1"] <= 3 * (peak // 3 + 1)


def test_single_stage_occupancy_bounded_by_latency():
    # a word lives for the window look-ahead plus the FP -> loss -> BP latency
    layer = ConvLayerSpec(1, 1, 21, stride=2, relu=False)
    for dop in (DOP1, Dop(1, 1, 21, 1)):
        cfg = PipelineConfig.for_layers([layer], fp_dop=dop)
        trace = simulate_buffers(cfg, 512)
        interval = cfg.bottleneck_ii / 2
        latency = sum(s.depth for s in cfg.stages)
        bound = 2 * layer.padding + 2 + int(np.ceil(latency / interval))
        assert trace.max_occupancy["y"] <= bound


def test_memory_report_example():
    rep = memory_report(PipelineConfig.for_layers(), 12144)
    assert rep.naive_words == 170016
    assert rep.naive_bits == 170016 * 16
    assert rep.ratio < 0.01
    assert "store-everything" in rep.summary()


def test_validation():
    with pytest.raises(ValueError):
        PipelineConfig.for_layers(clock_hz=0)
    with pytest.raises(ValueError):
        PipelineConfig.for_layers(fp_dop=[DOP1, DOP1])
    with pytest.raises(ValueError):
        Dop(0, 1, 1, 1)
    with pytest.raises(ValueError):
        simulate_buffers(PipelineConfig.for_layers(), 0)
