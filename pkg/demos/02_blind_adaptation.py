# %% [markdown]
# # Following a dispersion drift without labels
#
# Train at D = 17, then let the dispersion creep up to 26 ps/(nm km).
# One copy of the equalizer is left alone, one is retrained with labels,
# and one is retrained blindly from its own outputs.

# %%
from imddeq.channel import ChannelConfig
from imddeq.cnn import Cnn, equalize, train
from imddeq.experiments import drift_path, measure_ber
from imddeq.losses import LossKind

ch = ChannelConfig()
mod = ch.modulation
sup, blind = LossKind.supervised(mod), LossKind.unsupervised(mod)
init = train(Cnn.init(seed=0), ch, sup, iterations=3000, lr=0.02, seed=1)

# %%
models = {"no_retrain": init, "sup": init, "unsup": init}
print(f"{'D':>6}" + "".join(f"{k:>12}" for k in models))
for step, d in enumerate(drift_path(17.0, 26.0)):
    here = ch.with_dispersion(d)
    models["sup"] = train(models["sup"], here, sup, 300, 0.02, seed=100 + step)
    models["unsup"] = train(models["unsup"], here, blind, 300, 0.02, seed=200 + step)
    row = []
    for m in models.values():
        errors, bits = measure_ber(lambda y, m=m: equalize(m, y), here, 1 << 13, seed=step)
        row.append(errors / bits)
    print(f"{d:6.1f}" + "".join(f"{b:12.5f}" for b in row))

# %% [markdown]
# The blind loss only needs the constellation: a polynomial that vanishes
# on the symbol levels plus a balance term that keeps the outputs from
# collapsing onto a single level.
