# %% [markdown]
# # Channel and CNN equalizer
#
# Send PAM-2 symbols over 30 km of fiber with square-law detection, then
# compare a plain threshold receiver with a small trained CNN.

# %%
import numpy as np

from imddeq.channel import (ChannelConfig, apply_channel, ber, generate_symbols, hard_decision,
                            normalize_received)
from imddeq.cnn import Cnn, equalize, train
from imddeq.losses import LossKind

ch = ChannelConfig()
print(f"{ch.modulation.order}-PAM, {ch.symbol_rate:g} GBd, D = {ch.fiber.dispersion:g} ps/(nm km), "
      f"beta2 = {ch.fiber.beta2 * 1e27:.3f} ps^2/km, SNR {ch.snr_db:g} dB")

# %%
sym = generate_symbols(1 << 14, ch.modulation, seed=1)
y = normalize_received(apply_channel(sym, ch, seed=2))
print("received samples:", y.shape, "mean %.2e std %.2f" % (y.mean(), y.std()))

# Without an equalizer: take every second sample and threshold at the median.
raw = y[::2]
decided = (raw > np.median(raw)).astype(int)
print(f"threshold receiver BER: {ber(sym, decided, ch.modulation):.4f}")

# %% [markdown]
# The CNN has three bias-free layers (1 -> 3 -> 3 -> 1 channels, 21 taps);
# the last one has stride 2 so it emits one output per symbol.

# %%
cnn = Cnn.init(seed=0)
print("parameters:", cnn.n_params)
cnn = train(cnn, ch, LossKind.supervised(ch.modulation), iterations=1500, lr=0.02, seed=3)
z = equalize(cnn, y)
print(f"CNN BER after 1500 iterations: {ber(sym, hard_decision(z, ch.modulation), ch.modulation):.5f}")
