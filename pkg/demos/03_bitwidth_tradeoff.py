# %% [markdown]
# # Fixed-point formats and learned bit widths
#
# Profile the value ranges of a trained equalizer, run it in fixed point,
# then let a penalty on the average width trade bits against BER.

# %%
from imddeq.channel import ChannelConfig
from imddeq.cnn import Cnn, train
from imddeq.losses import LossKind
from imddeq.quant import (FixedPointFormat, QuantConfig, bitwidth_pareto_sweep, profile_ranges,
                          quantize, quantized_ber)

print(quantize(0.3, FixedPointFormat(8, 2)), quantize(10.0, FixedPointFormat(4, 2)))

ch = ChannelConfig()
loss = LossKind.supervised(ch.modulation)
cnn = train(Cnn.init(seed=0), ch, loss, 2000, 0.02, seed=1)

# %%
prof = profile_ranges(cnn, ch, loss, 4, seed=2)
for name, v in prof.max_abs.items():
    print(f"{name:<12} max |x| = {v:8.3f}  -> {prof.int_bits()[name]} integer bits")

n = 1 << 15
print("float     BER", quantized_ber(cnn, ch, None, n, seed=3))
print("s32.20    BER", quantized_ber(cnn, ch, QuantConfig.uniform(3, 32, 20), n, seed=3))
print("8-bit     BER", quantized_ber(cnn, ch, prof.to_config(3, 8, 8, 12, 16, 12), n, seed=3))

# %%
points = bitwidth_pareto_sweep(cnn, ch, [0.0, 0.15, 0.25, 0.5, 1.0], iterations=150, seed=4,
                               eval_symbols=n)
for p in points:
    mark = "*" if p.pareto else " "
    print(f"gamma {p.gamma:4.2f}  avg {p.avg_bits:5.2f} bits  BER {p.ber:.2e} {mark}  widths {p.widths}")
