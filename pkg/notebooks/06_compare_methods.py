"""
FedRand against the baselines
=============================

Runs FedAvg, FedRand, FedPer with two or four shared layers, and FedPara on the
same data and seeds, then prints utility, communication and attack numbers
side by side.  Communication is the steady-state parameter count moved per
participating client, relative to FedAvg.
"""

# %%
from dataclasses import replace

from fedrand.experiment import ExperimentSpec, MiaConfig, compare, preset_specs
from fedrand.model import ModelDims
from fedrand.protocol import FederationConfig, comm_cost

dims = ModelDims()
for name, cfg in [("FedAvg", FederationConfig(method="fedavg")), ("FedRand", FederationConfig()),
                  ("FedPer(1)", FederationConfig(method="fedper", n_shared=1)),
                  ("FedPara", FederationConfig(method="fedpara"))]:
    c = comm_cost(cfg, dims)
    print(f"{name:10s} down {c['down']:5d}  up {c['up']:5d}  ratio {c['ratio_vs_fedavg']:.2f}")

# %%
base = ExperimentSpec(federation=FederationConfig(rounds=15), mia=MiaConfig(count=100, extra_orders=()))
print(compare(preset_specs(base, "methods"), seeds=[0, 1]).render())

# %%
# The ablations: other rho values, no normalisation, and no cached half.
print(compare(preset_specs(base, "ablation"), seeds=[0, 1]).render())
