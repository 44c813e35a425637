import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from imddeq.channel import ChannelConfig, apply_channel, generate_symbols, normalize_received
from imddeq.cnn import Cnn, backward, forward, train
from imddeq.losses import LossKind
from imddeq.quant import (BitwidthSearchState, FixedPointFormat, QuantConfig, QuantStats, avg_bits,
                          bitwidth_pareto_sweep, int_bits_for, pareto_flags, profile_ranges,
                          quantize, quantized_backward, quantized_forward, soft_quantize)

formats = st.builds(lambda t, f: FixedPointFormat(t, min(f, t - 1)),
                    st.integers(2, 24), st.integers(-4, 20))
values = st.floats(-1e4, 1e4, allow_nan=False)


def test_quantize_examples():
    assert quantize(0.3, FixedPointFormat(8, 2)) == 0.25
    fmt = FixedPointFormat(4, 2)
    assert (fmt.min_value, fmt.max_value) == (-2.0, 1.75)
    assert quantize(10.0, fmt) == 1.75
    assert quantize(-10.0, fmt) == -2.0
    # ties go away from zero
    assert quantize(0.125, FixedPointFormat(8, 2)) == 0.25
    assert quantize(-0.125, FixedPointFormat(8, 2)) == -0.25


def test_format_validation():
    with pytest.raises(ValueError):
        FixedPointFormat(0, 0)
    with pytest.raises(ValueError):
        FixedPointFormat(33, 0)
    with pytest.raises(ValueError):
        FixedPointFormat(4, 4)
    FixedPointFormat(4, 4, signed=False)
    assert str(FixedPointFormat(12, 9)) == "s12.9"
    assert FixedPointFormat.parse("u8.3") == FixedPointFormat(8, 3, False)


@given(values, formats)
def test_quantize_idempotent(x, fmt):
    q = quantize(x, fmt)
    assert quantize(q, fmt) == q


@given(values, values, formats)
def test_quantize_monotone(a, b, fmt):
    lo, hi = min(a, b), max(a, b)
    assert quantize(lo, fmt) <= quantize(hi, fmt)


@given(values, formats)
def test_quantize_error_bound_inside_range(x, fmt):
    if fmt.min_value <= x <= fmt.max_value:
        assert abs(quantize(x, fmt) - x) <= 2.0 ** (-fmt.frac_bits - 1) + 1e-12


@settings(max_examples=50)
@given(st.lists(st.floats(-4, 4), min_size=1, max_size=20), st.integers(2, 16), st.integers(1, 2))
def test_soft_quantize_integer_bits_exact(xs, b, ib):
    x = np.array(xs)
    v, _ = soft_quantize(x, float(b), ib)
    assert np.array_equal(v, quantize(x, FixedPointFormat(b, b - ib)))


def test_soft_quantize_midpoint_and_slope():
    x = np.random.default_rng(0).uniform(-3, 3, 50)
    lo = quantize(x, FixedPointFormat(6, 4))
    hi = quantize(x, FixedPointFormat(7, 5))
    v, d = soft_quantize(x, 6.5, 2)
    assert np.allclose(v, 0.5 * (lo + hi))
    assert np.allclose(d, hi - lo)
    h = 1e-6
    for b in (3.3, 7.71, 12.5):
        _, d = soft_quantize(x, b, 2)
        fd = (soft_quantize(x, b + h, 2)[0] - soft_quantize(x, b - h, 2)[0]) / (2 * h)
        mask = np.abs(fd) > 0
        assert np.allclose(d[mask], fd[mask], rtol=1e-6)
        assert np.allclose(d[~mask], 0, atol=1e-9)


def test_int_bits_rule():
    assert int_bits_for(3.2) == 3
    assert int_bits_for(1.0) == 2
    assert int_bits_for(4.0) == 4
    assert int_bits_for(0.3) == 1
    assert int_bits_for(0.0) == 1


def test_avg_bits():
    f8, f12 = FixedPointFormat(8, 4), FixedPointFormat(12, 4)
    assert avg_bits(QuantConfig.uniform(3, 8, 4)) == 8.0
    assert avg_bits([8, 12]) == 10.0
    cfg = QuantConfig([f8, f12, f8], [f12, f12, FixedPointFormat(10, 4)], f12, f12, f12)
    assert avg_bits(cfg) == pytest.approx((8 + 12 + 8 + 12 + 12 + 10) / 6)


def test_quant_config_roundtrip_and_invariant():
    cfg = QuantConfig([FixedPointFormat(8, 6)] * 3, [FixedPointFormat(10, 7)] * 3,
                      FixedPointFormat(16, 12), FixedPointFormat(24, 20), FixedPointFormat(16, 14),
                      faithful=False)
    assert QuantConfig.from_ini(cfg.to_ini()) == cfg
    with pytest.raises(ValueError):
        QuantConfig([FixedPointFormat(8, 6)] * 3, [FixedPointFormat(8, 6)] * 3,
                     FixedPointFormat(16, 12), FixedPointFormat(12, 8), FixedPointFormat(16, 14))


@pytest.fixture(scope="module")
def trained():
    ch = ChannelConfig()
    cnn = train(Cnn.init(seed=0), ch, LossKind.supervised(ch.modulation), 200, 0.02, seed=0)
    return cnn, ch


def _sequence(ch, n=256, seed=5):
    sym = generate_symbols(n, ch.modulation, seed)
    return sym, normalize_received(apply_channel(sym, ch, seed + 1))


def test_wide_formats_match_float(trained):
    cnn, ch = trained
    sym, y = _sequence(ch)
    wide = QuantConfig.uniform(3, 32, 20)
    z0, c0 = forward(cnn, y)
    z1, c1 = quantized_forward(cnn, y, wide)
    assert np.max(np.abs(z1 - z0)) < 1e-4
    _, dz = LossKind.supervised(ch.modulation).evaluate(z0, sym)
    g0 = backward(cnn, c0, dz)
    g1 = quantized_backward(cnn, c1, dz, wide)
    for a, b in zip(g0.kernels, g1.kernels):
        assert np.max(np.abs(a - b)) < 1e-3 * max(1.0, np.max(np.abs(a)))


def test_one_frac_bit_grid_and_determinism(trained):
    cnn, ch = trained
    _, y = _sequence(ch)
    coarse = QuantConfig.uniform(3, 12, 1)
    z, _ = quantized_forward(cnn, y, coarse)
    assert np.all(np.mod(z, 0.5) == 0)
    assert np.array_equal(z, quantized_forward(cnn, y, coarse)[0])


def test_fast_mode_differs_only_in_accumulation(trained):
    cnn, ch = trained
    _, y = _sequence(ch)
    faithful = QuantConfig.uniform(3, 10, 6)
    fast = QuantConfig.uniform(3, 10, 6, faithful=False)
    z1 = quantized_forward(cnn, y, faithful)[0]
    z2 = quantized_forward(cnn, y, fast)[0]
    assert np.max(np.abs(z1 - z2)) < 0.2


def test_profile_covers_values_without_saturation(trained):
    cnn, ch = trained
    loss = LossKind.supervised(ch.modulation)
    prof = profile_ranges(cnn, ch, loss, 2, seed=3, batch_symbols=256)
    assert prof.max_abs["accumulator"] >= prof.max_abs["multiplier"]
    cfg = prof.to_config(3)
    # replay the profiling sequences
    from imddeq.channel import child_seeds

    for ss in child_seeds(3, 2):
        s_sym, s_noise = child_seeds(ss, 2)
        sym = generate_symbols(256, ch.modulation, s_sym)
        y = normalize_received(apply_channel(sym, ch, s_noise))
        stats = QuantStats()
        z, cache = quantized_forward(cnn, y, cfg, stats)
        quantized_backward(cnn, cache, loss.evaluate(z, sym)[1], cfg, stats)
        assert not stats.any, dict(stats.saturated)
    with pytest.raises(ValueError):
        profile_ranges(cnn, ch, loss, 0)


def test_saturation_is_reported(trained):
    cnn, ch = trained
    _, y = _sequence(ch)
    stats = QuantStats()
    quantized_forward(cnn, y, QuantConfig.uniform(3, 4, 3), stats)
    assert stats.any


def test_search_state_bounds():
    s = BitwidthSearchState(np.array([1.0, 20.0, 8.0]), 0.1, np.ones(3, int))
    assert s.bits.tolist() == [2.0, 16.0, 8.0]
    with pytest.raises(ValueError):
        BitwidthSearchState(np.ones(2) * 8, -1.0, np.ones(2, int))


def _dominance_oracle(points):
    flags = []
    for i, p in enumerate(points):
        dominated = False
        for j, q in enumerate(points):
            if j != i and q[0] <= p[0] and q[1] <= p[1] and (q[0] < p[0] or q[1] < p[1]):
                dominated = True
        flags.append(not dominated)
    return flags


@given(st.lists(st.tuples(st.integers(2, 16), st.integers(0, 20)), min_size=1, max_size=15))
def test_pareto_flags_match_brute_force(pts):
    points = [(float(a), b / 1000) for a, b in pts]
    assert pareto_flags(points) == _dominance_oracle(points)


def test_pareto_sweep_small(trained):
    cnn, ch = trained
    with pytest.raises(ValueError):
        bitwidth_pareto_sweep(cnn, ch, [])
    pts = bitwidth_pareto_sweep(cnn, ch, [0.0, 0.3, 1.0], iterations=60, seed=1,
                                eval_symbols=1024, batch_symbols=256, profile_sequences=2)
    assert pts[0].avg_bits == 16.0
    bits = [p.avg_bits for p in pts]
    assert all(b <= a + 0.5 for a, b in zip(bits, bits[1:]))
    assert any(p.pareto for p in pts)
