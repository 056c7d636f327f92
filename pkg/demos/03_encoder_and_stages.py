"""
Depthwise taps and the CLS relay
================================

The encoder yields three token maps per lead at falling resolution. Each
transformer stage reads one map and only its CLS token moves on.
"""

import numpy as np

from stageformer.encoder import EncoderConfig
from stageformer.model import ModelConfig, forward, init_params

# %%
# Default kernels and strides on a 15 s segment at 500 Hz.
enc = EncoderConfig()
print("layer lengths", enc.layer_lengths(7500))
print("tokens per stage", enc.tap_lengths(7500))

# %%
# A smaller model so the demo runs in a second. Recording attention shows
# how many tokens each stage saw: its own map plus one carried CLS token.
cfg = ModelConfig(
    n_classes=2, input_length=500,
    encoder=dict(leads=4, multipliers=(4, 8, 8, 16)),
    stages=dict(dim=32, heads=4, layers_per_stage=(1, 1, 1)),
    dtype="float64",
)
params = init_params(cfg, seed=0)
x = np.random.default_rng(1).standard_normal((2, 4, 500))
out = forward(params, x, cfg, record=True)
for (stage, layer), m in sorted(out.attention.maps.items()):
    print(f"stage {stage} layer {layer}: attention {m.shape}, tap tokens {cfg.token_counts[stage - 1]}")

# %%
# Leads never mix before the head. Changing lead 3 moves only lead 3's CLS.
x2 = x.copy()
x2[:, 3] *= -1
moved = forward(params, x2, cfg).final_cls.values
print("changed leads:", [c for c in range(4) if not np.array_equal(moved[:, c], out.final_cls.values[:, c])])

# %%
# The differential variant subtracts a second softmax map, so its rows sum
# to 1 - lambda.
diff = cfg.variant("ours-diff")
rec = forward(init_params(diff, 0), x, diff, record=True).attention
key = (3, 1)
print("row sums", rec.maps[key].sum(-1).mean().round(6), "lambda", rec.lambdas[key])
