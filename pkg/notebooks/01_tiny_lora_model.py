"""
A tiny autoregressive model with LoRA adapters
==============================================

The frozen base is an embedding table, a stack of tanh layers and an output
projection.  Every layer carries a rank-r LoRA pair (A, B) whose product is
added to the frozen weight.  Only A and B are trained.
"""

# %%
import numpy as np

from fedrand.model import AdamW, BaseWeights, ModelDims, ModelParams, init_adapters, loss, loss_and_grad
from fedrand.tensor import RngStream

dims = ModelDims(vocab_size=16, embed_dim=8, num_layers=2, rank=2)
root = RngStream(0)
base = BaseWeights.random(dims, root.child("base"))
params = ModelParams(base, init_adapters(dims, root.child("init")))
print("trainable parameters per factor family:", dims.params_per_family)

# %%
# B starts at zero, so the adapted model is the base model at step 0.
batch = np.random.default_rng(1).integers(0, dims.vocab_size, size=(4, 10))
print("initial loss:", round(loss(params, batch), 4), " uniform would be", round(np.log(dims.vocab_size), 4))

# %%
# The gradients are derived by hand.  Check one entry against central differences.
# (With B = 0 the gradient for A is exactly zero, so probe B.)
_, g = loss_and_grad(params, batch)
B = params.adapters[0].B
h = 1e-6
B[0, 0] += h
up = loss(params, batch)
B[0, 0] -= 2 * h
down = loss(params, batch)
B[0, 0] += h
print("dL/dB[0,0] analytic", g.adapters[0][1][0, 0], " numeric", (up - down) / (2 * h))

# %%
# A few AdamW steps on one batch: the loss falls.
opt = AdamW(lr=3e-2)
for step in range(50):
    value, g = loss_and_grad(params, batch)
    params = opt.step(params, g)
    if step % 10 == 0:
        print(f"step {step:2d}  loss {value:.4f}")
