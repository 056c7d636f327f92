"""
Reverse-mode differentiation on numpy arrays
============================================

Every model computation runs on ``DiffArray``. Operations record their
parents, and ``backward`` walks the graph in reverse topological order.
"""

import numpy as np

from stageformer import autodiff as ad
from stageformer.autodiff import DiffArray
from stageformer.autodiff.gradcheck import finite_diff_check

rng = np.random.default_rng(0)

# %%
# A small two-layer computation. Inputs that need gradients say so.
x = DiffArray(rng.standard_normal((4, 3)))
w1 = DiffArray(rng.standard_normal((3, 5)), requires_grad=True)
w2 = DiffArray(rng.standard_normal((5, 1)), requires_grad=True)
y = (rng.random((4, 1)) < 0.5).astype(float)

h = ad.gelu(ad.matmul(x, w1))
loss = ad.bce_with_logits(ad.matmul(h, w2), y)
ad.backward(loss)
print("loss", float(loss.values))
print("dL/dw2", w2.grad.ravel())

# %%
# The tape is the graph in the order backward visits it.
print(len(list(ad.Tape(loss))), "nodes on the tape")

# %%
# Central differences agree with backprop. The five-point stencil removes
# most of the step-size error.
ad.zero_grads([w1, w2])


def f():
    return ad.bce_with_logits(ad.matmul(ad.gelu(ad.matmul(x, w1)), w2), y)


print("max relative error", finite_diff_check(f, [w1, w2], order=4, floor=1e-9))

# %%
# Inside ``no_grad`` nothing is recorded, which is how inference runs.
with ad.no_grad():
    z = ad.matmul(x, w1)
print("recorded parents under no_grad:", len(z._parents))
