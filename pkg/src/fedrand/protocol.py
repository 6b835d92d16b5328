"""Federated rounds for FedRand and the FedAvg / FedPer / FedPara baselines.

A FedRand client adopts one factor family (all A matrices or all B matrices)
from the server, restores the other family from its own cache, trains both,
and returns only the adopted family.  The server averages each family over
the clients that sent it, falling back to its previous value when nobody did.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import ClientDataset
from .model import (
    LORA_INIT_STD,
    AdamW,
    BaseWeights,
    LoraAdapter,
    ModelDims,
    ModelParams,
    init_adapters,
    loss,
    loss_and_grad,
)
from .tensor import RngStream, rand_normal, weighted_sum

METHODS = ("fedrand", "fedavg", "fedper", "fedpara")
FAMILIES = ("A", "B")


class ConfigError(ValueError):
    pass


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 12
    participants: int = 4
    rounds: int = 30
    rho: float = 0.5
    lr: float = 3e-4
    weight_decay: float = 1e-6
    epochs: int = 1
    batch_size: int = 8
    method: str = "fedrand"
    n_shared: int = 2  # FedPer only
    no_normalization: bool = False
    no_past_params: bool = False
    send_both_halves: bool = False
    seed: int = 0

    def validate(self, dims: Optional[ModelDims] = None) -> "FederationConfig":
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not 1 <= self.participants <= self.num_clients:
            raise ConfigError(f"participants must be in [1, {self.num_clients}], got {self.participants}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must be in [0, 1], got {self.rho}")
        if self.rounds < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("rounds, epochs and batch_size must be >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if dims is not None and self.method == "fedper" and not 1 <= self.n_shared <= dims.num_layers:
            raise ConfigError(f"n_shared must be in [1, {dims.num_layers}], got {self.n_shared}")
        return self

    @property
    def is_fedrand(self) -> bool:
        return self.method == "fedrand"


@dataclass
class ServerState:
    round: int
    adapters: list

    def copy(self) -> "ServerState":
        return ServerState(self.round, [a.copy() for a in self.adapters])


@dataclass
class ClientState:
    client_id: int
    n: int
    cache: Optional[list] = None  # adapters after the last local update
    private: Optional[list] = None  # FedPara Hadamard pair
    last_side: Optional[int] = None
    last_round: Optional[int] = None
    rounds: list = field(default_factory=list)


@dataclass
class ClientContribution:
    client_id: int
    round: int
    side: Optional[int]  # a_k; None for methods without side selection
    families: dict  # family -> {layer: matrix}
    n: int
    train_loss: float

    def size(self) -> int:
        return sum(m.size for fam in self.families.values() for m in fam.values())


@dataclass
class InterceptRecord:
    """One factor family received by the server from one client in one round."""

    round: int
    client_id: int
    family: str
    layers: dict  # layer -> matrix

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        for l in sorted(self.layers):
            h.update(np.ascontiguousarray(self.layers[l]).tobytes())
        return h.hexdigest()


@dataclass
class RoundRecord:
    round: int
    participants: list
    sides: dict
    train_loss: dict
    server_eval_loss: float
    comm_down: dict
    comm_up: dict


@dataclass
class CommLedger:
    down: dict = field(default_factory=dict)  # round -> {client: count}
    up: dict = field(default_factory=dict)

    def record(self, r: int, k: int, down: int, up: int) -> None:
        self.down.setdefault(r, {})[k] = int(down)
        self.up.setdefault(r, {})[k] = int(up)

    def round_total(self, r: int) -> int:
        return sum(self.down.get(r, {}).values()) + sum(self.up.get(r, {}).values())

    def totals(self) -> tuple[int, int]:
        return (sum(sum(v.values()) for v in self.down.values()),
                sum(sum(v.values()) for v in self.up.values()))


# ---------------------------------------------------------------- sampling

def sample_participants(config: FederationConfig, r: int, stream: RngStream) -> list[int]:
    """Uniform sample of ``participants`` distinct client ids, sorted."""
    gen = stream.child("round", r, "participants").generator()
    chosen = gen.choice(config.num_clients, size=config.participants, replace=False)
    return sorted(int(k) for k in chosen)


def select_side(rho: float, stream: RngStream) -> int:
    """a_k = 1 (adopt the A family) iff u < rho for u ~ Uniform(0, 1)."""
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must be in [0, 1], got {rho}")
    u = stream.generator().random()
    return int(u < rho)


def local_steps(n: int, batch_size: int, epochs: int) -> int:
    return math.ceil(n / batch_size) * epochs


# ---------------------------------------------------------- initialisation

def init_server(dims: ModelDims, stream: RngStream) -> ServerState:
    """Random A_0 and B_0 for every layer.

    A_0 comes from the same stream as the clients' round-zero ``rand_init``;
    B_0 is random too but clients start from B = 0, so it only survives if no
    round-zero client sends a B family.
    """
    adapters = init_adapters(dims, stream.child("init"))
    for l, ad in enumerate(adapters):
        ad.B = rand_normal(stream.child("init", "B0", l), dims.rank, dims.embed_dim, LORA_INIT_STD)
    return ServerState(0, adapters)


def shared_layers(config: FederationConfig, num_layers: int, r: int) -> list[int]:
    """Layers exchanged with the server in round ``r``."""
    if config.method == "fedper" and r > 0:
        return list(range(num_layers - config.n_shared, num_layers))
    return list(range(num_layers))


def client_init(
    server: ServerState,
    client: ClientState,
    side: Optional[int],
    r: int,
    config: FederationConfig,
    dims: ModelDims,
    stream: RngStream,
) -> list[LoraAdapter]:
    """Starting adapters for one client in round ``r``.

    ``stream`` is the run's root stream; round-zero ``rand_init`` draws from
    ``stream.child("init")`` for every client.
    """
    L = dims.num_layers
    fresh = r == 0
    if config.is_fedrand and not config.no_past_params and client.cache is None:
        fresh = True
    if fresh:
        return init_adapters(dims, stream.child("init"))

    if client.cache is not None:
        for mine, theirs in zip(client.cache, server.adapters):
            if mine.A.shape != theirs.A.shape or mine.B.shape != theirs.B.shape:
                raise ProtocolError("client cache shape does not match server adapters")

    if config.method == "fedrand" and not config.no_past_params:
        if side == 1:
            return [LoraAdapter(server.adapters[l].A.copy(), client.cache[l].B.copy()) for l in range(L)]
        return [LoraAdapter(client.cache[l].A.copy(), server.adapters[l].B.copy()) for l in range(L)]

    if config.method == "fedper":
        shared = set(shared_layers(config, L, r))
        out = []
        for l in range(L):
            # private layers start from the client's own copy, or the round-zero aggregate
            src = server.adapters[l] if l in shared or client.cache is None else client.cache[l]
            out.append(src.copy())
        return out

    return [ad.copy() for ad in server.adapters]


def init_private(dims: ModelDims, stream: RngStream) -> list[LoraAdapter]:
    """FedPara private pair with A_p @ B_p close to the all-ones matrix."""
    d, r = dims.embed_dim, dims.rank
    c = 1.0 / math.sqrt(r)
    return [
        LoraAdapter(c + rand_normal(stream.child("A", l), d, r, LORA_INIT_STD),
                    c + rand_normal(stream.child("B", l), r, d, LORA_INIT_STD))
        for l in range(dims.num_layers)
    ]


# ------------------------------------------------------------ local update

def client_update(
    k: int,
    server: ServerState,
    client: ClientState,
    config: FederationConfig,
    data: ClientDataset,
    base: BaseWeights,
    dims: ModelDims,
    stream: RngStream,
) -> ClientContribution:
    """Run one round of local training for client ``k`` and build its upload.

    Side effect: ``client.cache`` holds the full post-training adapters.
    """
    if data.n == 0:
        raise ProtocolError(f"client {k} has no data")
    r = server.round
    cstream = stream.child("round", r, "client", k)
    side = select_side(config.rho, cstream.child("side")) if config.is_fedrand else None

    adapters = client_init(server, client, side, r, config, dims, stream)
    private = None
    if config.method == "fedpara":
        private = client.private if client.private is not None else init_private(dims, stream.child("client", k, "private"))
        private = [p.copy() for p in private]
    params = ModelParams(base, adapters, private)

    opt = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    batch_losses = []
    steps_per_epoch = math.ceil(data.n / config.batch_size)
    for e in range(config.epochs):
        order = cstream.child("batches", e).generator().permutation(data.n)
        for s in range(steps_per_epoch):
            rows = order[s * config.batch_size:(s + 1) * config.batch_size]
            value, g = loss_and_grad(params, data.tokens[rows])
            opt.step(params, g)
            batch_losses.append(value)

    client.cache = [ad.copy() for ad in params.adapters]
    if private is not None:
        client.private = [p.copy() for p in params.private]
    client.last_side = side
    client.last_round = r
    client.rounds.append(r)

    layers = shared_layers(config, dims.num_layers, r)
    if config.is_fedrand and not config.send_both_halves:
        sent = ("A",) if side == 1 else ("B",)
    else:
        sent = FAMILIES
    families = {f: {l: getattr(params.adapters[l], f).copy() for l in layers} for f in sent}
    return ClientContribution(k, r, side, families, data.n, float(np.mean(batch_losses)))


# -------------------------------------------------------------- aggregation

def fedrand_coefficients(n: Sequence[int], a: Sequence[int], normalize: bool = True):
    """Mixing weights for each family.

    Returns ``(alpha, beta, coef_a, coef_b)`` where ``coef_a`` lists the weights
    of clients with a_k = 1 (in input order) and ``coef_b`` those with a_k = 0.
    Normalised weights are ``n_k / sum(n_j over the family's senders)``, which
    equals ``n_k / (alpha * m)`` exactly in integer arithmetic.
    """
    n = [int(x) for x in n]
    m = sum(n)
    if m <= 0:
        raise ProtocolError("total sample count must be positive")
    na = sum(nk for nk, ak in zip(n, a) if ak == 1)
    nb = m - na
    alpha, beta = na / m, nb / m
    coef_a = [nk / (na if normalize else m) for nk, ak in zip(n, a) if ak == 1]
    coef_b = [nk / (nb if normalize else m) for nk, ak in zip(n, a) if ak != 1]
    return alpha, beta, coef_a, coef_b


def _check_distinct(contributions: Sequence[ClientContribution]) -> list[ClientContribution]:
    ids = [c.client_id for c in contributions]
    if len(set(ids)) != len(ids):
        raise ProtocolError(f"duplicate client ids in contributions: {sorted(ids)}")
    return sorted(contributions, key=lambda c: c.client_id)


def _aggregate(server: ServerState, contributions, normalize: bool) -> list[LoraAdapter]:
    contributions = _check_distinct(contributions)
    m = sum(c.n for c in contributions)
    if m <= 0:
        raise ProtocolError("total sample count must be positive")
    out = [ad.copy() for ad in server.adapters]
    for f in FAMILIES:
        for l in range(len(out)):
            senders = [c for c in contributions if l in c.families.get(f, {})]
            if not senders:
                continue  # fallback: keep the server's value
            denom = sum(c.n for c in senders) if normalize else m
            mixed = weighted_sum([c.families[f][l] for c in senders], [c.n / denom for c in senders])
            setattr(out[l], f, mixed)
    return out


def aggregate_fedrand(server: ServerState, contributions, no_normalization: bool = False) -> list[LoraAdapter]:
    """New server adapters from FedRand uploads.

    Each family is averaged over the clients that sent it with weights
    ``n_k / (alpha * m)`` (``n_k / m`` when ``no_normalization``); a family
    nobody sent keeps its previous value.
    """
    return _aggregate(server, contributions, normalize=not no_normalization)


def aggregate_fedavg(server: ServerState, contributions) -> list[LoraAdapter]:
    for c in contributions:
        for f in FAMILIES:
            if f not in c.families or len(c.families[f]) != len(server.adapters):
                raise ProtocolError(f"client {c.client_id} did not send the full {f} family")
    return _aggregate(server, contributions, normalize=True)


def aggregate_layers(server: ServerState, contributions) -> list[LoraAdapter]:
    """FedAvg restricted to the layers present in the uploads (FedPer)."""
    return _aggregate(server, contributions, normalize=True)


# ----------------------------------------------------------- communication

def download_size(config: FederationConfig, dims: ModelDims, r: int, client: ClientState) -> int:
    per_layer = 2 * dims.embed_dim * dims.rank
    if config.method == "fedper" and r > 0:
        n = config.n_shared
        if client.cache is None:
            n = dims.num_layers  # private layers seeded from the round-zero aggregate
        return n * per_layer
    return dims.num_layers * per_layer


def comm_cost(config: FederationConfig, dims: ModelDims) -> dict:
    """Steady-state parameters moved per participating client per round."""
    P = dims.params_per_family
    if config.method == "fedrand":
        down, up = 2 * P, (2 * P if config.send_both_halves else P)
    elif config.method == "fedper":
        down = up = 2 * config.n_shared * dims.embed_dim * dims.rank
    else:
        down = up = 2 * P
    total = down + up
    return {"method": config.method, "down": down, "up": up, "total": total,
            "ratio_vs_fedavg": total / (4 * P)}


# ------------------------------------------------------------------- driver

@dataclass
class FederationResult:
    config: FederationConfig
    server: ServerState
    history: list
    ledger: CommLedger
    clients: list
    intercepts: list
    server_trajectory: list  # server adapters after every round
    base: BaseWeights = None

    def server_params(self) -> ModelParams:
        return ModelParams(self.base, [a.copy() for a in self.server.adapters])

    def client_params(self, k: int) -> Optional[ModelParams]:
        c = self.clients[k]
        if c.cache is None:
            return None
        return ModelParams(self.base, [a.copy() for a in c.cache],
                           None if c.private is None else [p.copy() for p in c.private])


def run_federation(
    config: FederationConfig,
    partition: Sequence[ClientDataset],
    base: BaseWeights,
    dims: ModelDims,
    eval_tokens: Optional[np.ndarray] = None,
    on_round=None,
) -> FederationResult:
    """Execute ``config.rounds`` rounds of the configured method."""
    config.validate(dims)
    if len(partition) != config.num_clients:
        raise ConfigError(f"partition has {len(partition)} clients, config expects {config.num_clients}")
    root = RngStream(config.seed)
    server = init_server(dims, root)
    clients = [ClientState(d.client_id, d.n) for d in partition]
    history, intercepts, trajectory = [], [], []
    ledger = CommLedger()

    for r in range(config.rounds):
        server.round = r
        chosen = sample_participants(config, r, root)
        contributions = []
        for k in chosen:
            down = download_size(config, dims, r, clients[k])
            contrib = client_update(k, server, clients[k], config, partition[k], base, dims, root)
            ledger.record(r, k, down, contrib.size())
            contributions.append(contrib)
            for f, layers in contrib.families.items():
                intercepts.append(InterceptRecord(r, k, f, {l: m.copy() for l, m in layers.items()}))

        if config.method == "fedrand":
            _audit_privacy(config, contributions)
            new = aggregate_fedrand(server, contributions, config.no_normalization)
        elif config.method == "fedper":
            new = aggregate_layers(server, contributions)
        else:
            new = aggregate_fedavg(server, contributions)
        server = ServerState(r + 1, new)
        trajectory.append([a.copy() for a in new])

        eval_loss = float("nan") if eval_tokens is None else loss(ModelParams(base, server.adapters), eval_tokens)
        rec = RoundRecord(
            round=r,
            participants=chosen,
            sides={c.client_id: c.side for c in contributions},
            train_loss={c.client_id: c.train_loss for c in contributions},
            server_eval_loss=eval_loss,
            comm_down=dict(ledger.down[r]),
            comm_up=dict(ledger.up[r]),
        )
        history.append(rec)
        if on_round is not None:
            on_round(rec)

    return FederationResult(config, server, history, ledger, clients, intercepts, trajectory, base)


class InvariantViolation(RuntimeError):
    pass


def _audit_privacy(config: FederationConfig, contributions) -> None:
    if config.send_both_halves:
        return
    for c in contributions:
        if len(c.families) != 1:
            raise InvariantViolation(f"client {c.client_id} sent both factor families in round {c.round}")


# ----------------------------------------------------------- reconstruction

@dataclass
class Reconstruction:
    client_id: int
    params: Optional[ModelParams]
    a_round: Optional[int] = None
    b_round: Optional[int] = None
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.params is not None

    @property
    def staleness(self) -> Optional[int]:
        if self.a_round is None or self.b_round is None:
            return None
        return abs(self.a_round - self.b_round)


def reconstruct_client(
    k: int,
    intercepts: Sequence[InterceptRecord],
    base: BaseWeights,
    method: str = "fedrand",
) -> Reconstruction:
    """Stitch client ``k``'s model from what the server received.

    Uses the latest complete A family and the latest complete B family.  For
    FedAvg both come from the same round; for FedRand they usually come from
    different rounds.  Returns a failed ``Reconstruction`` (never raises) when a
    family was never sent or the model has parts that are never transmitted.
    """
    L = len(base.layers)
    if method == "fedpara":
        return Reconstruction(k, None, reason="private Hadamard factors are never transmitted")
    latest = {}
    for rec in intercepts:
        if rec.client_id != k or len(rec.layers) != L:
            continue
        if rec.family not in latest or rec.round >= latest[rec.family].round:
            latest[rec.family] = rec
    missing = [f for f in FAMILIES if f not in latest]
    if missing:
        reason = f"{'/'.join(missing)} family never transmitted in full"
        return Reconstruction(k, None, latest.get("A") and latest["A"].round,
                              latest.get("B") and latest["B"].round, reason)
    a, b = latest["A"], latest["B"]
    adapters = [LoraAdapter(a.layers[l].copy(), b.layers[l].copy()) for l in range(L)]
    return Reconstruction(k, ModelParams(base, adapters), a.round, b.round)


def with_method(config: FederationConfig, **changes) -> FederationConfig:
    return replace(config, **changes)
