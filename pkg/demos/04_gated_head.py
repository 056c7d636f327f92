"""
Which leads matter for which class
==================================

The gated head scores every lead per class, softmaxes over leads and lets
each class read its own weighted lead average.
"""

import numpy as np

from stageformer.autodiff import DiffArray
from stageformer.head import gated_head, init_gated_head, init_pooled_head, lead_attribution, pooled_head

rng = np.random.default_rng(0)
leads = ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"]

# %%
# A batch of per-lead CLS vectors [B, C, S].
x = DiffArray(rng.standard_normal((2, 12, 16)))
params = init_gated_head(16, 3, rng)
logits, weights = gated_head(x, params)
print("logits", logits.values.round(3))

# %%
# Rows are distributions over leads: one per class.
att = lead_attribution(weights, ["af", "rbbb", "std"], leads)
print(att.to_csv())

# %%
# Permuting leads permutes the weights and leaves the logits untouched, bit for bit.
perm = rng.permutation(12)
l2, w2 = gated_head(DiffArray(x.values[:, perm]), params)
print("logits equal:", np.array_equal(l2.values, logits.values),
      "weights permuted:", np.array_equal(w2.values, weights.values[:, :, perm]))

# %%
# The ablation head simply averages leads.
print("pooled", pooled_head(x, init_pooled_head(16, 3, rng)).values.round(3))
