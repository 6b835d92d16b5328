"""
Running the FedRand protocol
============================

Each round a random subset of clients trains.  A client flips a biased coin:
heads, it takes the server's A matrices and its own cached B matrices; tails,
the reverse.  It trains both, keeps both, and uploads only the family it took
from the server.  The server averages each family over the clients that sent
it and keeps the old value when nobody did.
"""

# %%
from collections import Counter

from fedrand.experiment import ExperimentSpec, build_world
from fedrand.protocol import FederationConfig, run_federation

spec = ExperimentSpec(federation=FederationConfig(rounds=10, seed=0))
world = build_world(spec)
result = run_federation(spec.federation, world.partition, world.base, spec.model, world.eval_corpus.tokens)

for rec in result.history:
    sides = "".join("A" if rec.sides[k] else "B" for k in rec.participants)
    print(f"round {rec.round:2d}  clients {rec.participants}  sent {sides}  server eval loss {rec.server_eval_loss:.4f}")

# %%
# The server only ever sees one family per client per round.
per_upload = Counter((r.round, r.client_id) for r in result.intercepts)
print("max families from one client in one round:", max(per_upload.values()))

# %%
# With rho = 1 nobody ever sends B, so the server's B never changes.
import numpy as np

frozen = run_federation(spec.federation.__class__(rounds=10, seed=0, rho=1.0), world.partition, world.base, spec.model)
b0 = frozen.server_trajectory[0]
print("server B unchanged:", all(np.array_equal(x.B, y.B) for x, y in zip(b0, frozen.server.adapters)))
