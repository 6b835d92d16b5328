"""
Membership inference with MaxRényi-K%
=====================================

For a candidate sequence, compute the Rényi entropy of the model's next-token
distribution at every position and average the K% largest.  Training members
tend to get confident (low entropy) predictions, so a low score votes
"member".  AUROC summarises how well the score separates the two groups.
"""

# %%
import numpy as np

from fedrand.data import dirichlet_partition, generate_corpus, generate_nonmembers
from fedrand.mia import attack_model, auroc_arrays, entropy_profiles, renyi_entropy, scores_from_profiles
from fedrand.model import BaseWeights, ModelDims
from fedrand.protocol import FederationConfig, run_federation
from fedrand.tensor import RngStream

p = np.array([0.7, 0.2, 0.1])
for q in (0.5, 1.0, 2.0, np.inf):
    print(f"H_{q}([.7,.2,.1]) = {renyi_entropy(p, q):.4f}")

# %%
# One client trains alone for many epochs, memorising its data.  Attack the
# result with its own training sequences against held-out nonmembers.
dims = ModelDims()
root = RngStream(0)
corpus = generate_corpus(root.child("data"))
client = dirichlet_partition(corpus, 12, 0.5, root.child("partition"))[0]
base = BaseWeights.random(dims, root.child("base"))
nonmembers = generate_nonmembers(root.child("nonmembers"), client.n, 24, 64, 6)

for epochs in (1, 20, 200):
    cfg = FederationConfig(num_clients=1, participants=1, rounds=1, epochs=epochs, method="fedavg")
    model = run_federation(cfg, [client], base, dims).client_params(0)
    table = attack_model(model, client.tokens, nonmembers, ks=(0, 10), spans=("full",))
    print(f"{epochs:3d} epochs  AUROC K=0 {table[(0, 'full')]:.3f}  K=10 {table[(10, 'full')]:.3f}")

# %%
# K = 0 is the largest entropy anywhere in the sequence; K = 100 is the mean.
prof = entropy_profiles(model, client.tokens[:3], 0.5)
for k in (0, 10, 50, 100):
    print(f"K={k:3d}:", np.round(scores_from_profiles(prof, k), 3))
print("AUROC of two perfectly separated groups:", auroc_arrays([0.1, 0.2], [0.5, 0.9]))
