"""Simulator for FedRand: federated LoRA fine-tuning with randomized half updates."""
from .experiment import ExperimentSpec, attack, compare, run
from .model import BaseWeights, LoraAdapter, ModelDims, ModelParams
from .protocol import FederationConfig, comm_cost, run_federation
from .tensor import RngStream

__all__ = [
    "BaseWeights",
    "ExperimentSpec",
    "FederationConfig",
    "LoraAdapter",
    "ModelDims",
    "ModelParams",
    "RngStream",
    "attack",
    "comm_cost",
    "compare",
    "run",
    "run_federation",
]
