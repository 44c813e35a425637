# %% [markdown]
# # Streaming training pipeline
#
# Forward and backward stages run concurrently on a sample stream. The
# feature maps only have to live for the pipeline latency, so buffer sizes
# stay flat as the training sequence gets longer.

# %%
from imddeq.pipeline import (Dop, PipelineConfig, ii_per_symbol, memory_report,
                             pipeline_throughput, retraining_time, simulate_buffers)

for name, dop in [("dop1", Dop()), ("full", Dop(3, 3, 21, 1)), ("full_x4", Dop(3, 3, 21, 4))]:
    cfg = PipelineConfig.for_layers(fp_dop=dop)
    sym, _ = pipeline_throughput(cfg)
    print(f"{name:<8} bottleneck {cfg.bottleneck_ii:6g} cycles/symbol  {sym / 1e6:9.3f} Msym/s  "
          f"retrain {retraining_time(cfg) * 1e3:8.3f} ms")

# %%
cfg = PipelineConfig.for_layers()
print({s.name: ii_per_symbol(s) for s in cfg.stages})
for n in (256, 2048, 16384):
    streamed = simulate_buffers(cfg, n).max_occupancy
    naive = simulate_buffers(cfg, n, naive=True).total_max
    print(f"N={n:6d}  pipelined {streamed}  store-everything {naive} words")

# %% [markdown]
# If the backward side is slower than the forward side the buffers fill
# without bound again.

# %%
slow = cfg.scaled_bp(1.5)
for n in (256, 1024):
    print(n, simulate_buffers(slow, n, source_interval=cfg.bottleneck_ii / 2).max_occupancy)

print(memory_report(cfg, 1518 * 8).summary())
