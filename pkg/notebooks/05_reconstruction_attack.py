"""
Can the server rebuild a client's model?
========================================

An honest-but-curious server logs every upload.  Under FedAvg a client sends
its whole adapter, so the log holds an exact copy of the trained client model.
Under FedRand it only ever holds one family per round; the best it can do is
stitch the newest A it saw to the newest B it saw, possibly from different
rounds.  A client that always drew the same side can't be rebuilt at all.
"""

# %%
from dataclasses import replace

from fedrand.experiment import ExperimentSpec, MiaConfig, run
from fedrand.protocol import FederationConfig

spec = ExperimentSpec(federation=FederationConfig(rounds=15, seed=1), mia=MiaConfig(count=100, extra_orders=()))

for method in ("fedavg", "fedrand"):
    report = run(replace(spec, federation=replace(spec.federation, method=method)))
    gaps = [r.staleness for r in report.reconstructions if r.ok]
    bad = [r.client_id for r in report.reconstructions if not r.ok]
    print(f"{method:8s} staleness gaps {gaps}  unreconstructable {bad}")
    print(f"         MIA AUROC (K=10): server {report.mia('server', 10):.3f}  client {report.mia('client', 10):.3f}")

# %%
# rho = 1: B never leaves any client.
report = run(replace(spec, federation=replace(spec.federation, rho=1.0)))
print(report.reconstructions[0].reason)
print("client scenario:", report.mia("client", 10))
