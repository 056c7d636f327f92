"""
Scoring multi-label predictions
===============================

F-beta and G-beta per class, the similarity-weighted challenge score and
macro AUC.
"""

import numpy as np

from stageformer.metrics import binarize, challenge_confusion, challenge_score, evaluate_predictions

classes = ["af", "rbbb", "std"]
true = [(0,), (1, 2), (2,), (0, 1)]
scores = np.array([
    [0.9, 0.2, 0.6],
    [0.1, 0.7, 0.4],
    [0.5, 0.5, 0.1],
    [0.8, 0.3, 0.2],
])

# %%
# Class i is predicted when its score reaches the threshold.
pred = binarize(scores)
print("predicted", pred)

# %%
# Rows are predicted classes and columns true ones. A recording spreads
# one unit over the pairs it touches, divided by the size of the label union.
a = challenge_confusion(true, pred, 3)
print(a.round(3))

# %%
# Related classes earn partial credit through the weight matrix.
w = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.25], [0.0, 0.25, 1.0]])
raw, normalized = challenge_score(a, w, true)
print(f"raw {raw:.4f} normalized {normalized:.4f}")

# %%
# Everything at once, as the eval and score commands report it.
print(evaluate_predictions(scores, true, classes, w).to_json())
