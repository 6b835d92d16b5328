"""
Synthetic classes and a non-IID client split
============================================

Each class is a first-order Markov chain over its own slice of the
vocabulary, with a short uniformly random "secret" span planted in every
sequence so that memorisation has something to latch on to.  Clients receive
class-skewed shares drawn from a Dirichlet distribution.
"""

# %%
import numpy as np

from fedrand.data import class_histogram, dirichlet_partition, generate_corpus, make_mia_split
from fedrand.tensor import RngStream

root = RngStream(0)
corpus = generate_corpus(root.child("data"), num_classes=6, per_class=200, seq_len=24, vocab_size=64)
print("corpus:", corpus.tokens.shape, "labels per class:", np.bincount(corpus.labels))
print("first sequence of class 0:", corpus.tokens[0])

# %%
# Lower concentration means more skew.  Rows are clients, columns classes.
for conc in (0.1, 0.5, 100.0):
    clients = dirichlet_partition(corpus, 12, conc, root.child("partition", str(conc)))
    hist = class_histogram(clients, 6)
    top_share = (hist.max(axis=1) / hist.sum(axis=1)).mean()
    print(f"Dirichlet({conc}): mean share of each client's largest class = {top_share:.2f}")

print(class_histogram(dirichlet_partition(corpus, 12, 0.5, root.child("partition")), 6))

# %%
# Members for the attack are drawn from training data; nonmembers come from a
# vocabulary band no client ever sees.
split = make_mia_split(corpus, 300, root.child("mia"), 64, 6)
print("members", split.members.shape, "nonmembers", split.nonmembers.shape)
print("nonmember token range:", split.nonmembers.min(), "-", split.nonmembers.max())
