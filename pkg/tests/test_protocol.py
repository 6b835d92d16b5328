import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrand.data import ClientDataset
from fedrand.model import AdamW, LoraAdapter, ModelDims, ModelParams, base_only, forward_batch, init_adapters, loss_and_grad
from fedrand.protocol import (
    ClientContribution,
    ClientState,
    ConfigError,
    FederationConfig,
    ProtocolError,
    ServerState,
    aggregate_fedavg,
    aggregate_fedrand,
    client_init,
    client_update,
    comm_cost,
    fedrand_coefficients,
    init_server,
    local_steps,
    reconstruct_client,
    run_federation,
    sample_participants,
    select_side,
)
from fedrand.tensor import RngStream

DIMS = ModelDims(vocab_size=32, embed_dim=8, num_layers=2, rank=2)


def server_state(seed=0, dims=DIMS, r=3):
    s = init_server(dims, RngStream(seed))
    s.round = r
    return s


def adapters_equal(xs, ys):
    return all(np.array_equal(x.A, y.A) and np.array_equal(x.B, y.B) for x, y in zip(xs, ys))


# ------------------------------------------------------------- sampling

def test_all_clients_when_participants_equal_clients():
    cfg = FederationConfig(num_clients=5, participants=5)
    assert sample_participants(cfg, 0, RngStream(1)) == [0, 1, 2, 3, 4]


@given(seed=st.integers(0, 2**63), r=st.integers(0, 100), k=st.integers(1, 12))
def test_participants_distinct(seed, r, k):
    cfg = FederationConfig(num_clients=12, participants=k)
    s = sample_participants(cfg, r, RngStream(seed))
    assert len(s) == k == len(set(s)) and all(0 <= i < 12 for i in s)


def test_participants_golden_trace():
    cfg = FederationConfig()
    trace = [sample_participants(cfg, r, RngStream(0)) for r in range(3)]
    assert trace == [[1, 2, 5, 11], [0, 5, 6, 11], [3, 7, 10, 11]]


def test_select_side_extremes():
    for i in range(200):
        s = RngStream(3).child(i)
        assert select_side(1.0, s) == 1
        assert select_side(0.0, s) == 0


def test_select_side_monte_carlo():
    root = RngStream(12)
    draws = [select_side(0.5, root.child(i)) for i in range(100_000)]
    assert abs(np.mean(draws) - 0.5) < 0.01


def test_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(num_clients=3, participants=4).validate()
    with pytest.raises(ConfigError):
        FederationConfig(rho=1.5).validate()
    with pytest.raises(ConfigError):
        FederationConfig(method="fedprox").validate()
    with pytest.raises(ConfigError):
        FederationConfig(method="fedper", n_shared=3).validate(DIMS)


# ---------------------------------------------------------- client_init

def test_round_zero_init():
    cfg = FederationConfig()
    for side in (0, 1):
        ads = client_init(server_state(r=0), ClientState(0, 10), side, 0, cfg, DIMS, RngStream(0))
        assert all(np.all(a.B == 0) for a in ads)
        assert adapters_equal(ads, init_adapters(DIMS, RngStream(0).child("init")))


def _cached_client():
    c = ClientState(0, 10)
    c.cache = init_server(DIMS, RngStream(99)).adapters
    return c


def test_side_one_takes_server_a_and_cached_b():
    server, client = server_state(), _cached_client()
    ads = client_init(server, client, 1, 3, FederationConfig(), DIMS, RngStream(0))
    for ad, s, c in zip(ads, server.adapters, client.cache):
        assert np.array_equal(ad.A, s.A) and np.array_equal(ad.B, c.B)


def test_side_zero_takes_cached_a_and_server_b():
    server, client = server_state(), _cached_client()
    ads = client_init(server, client, 0, 3, FederationConfig(), DIMS, RngStream(0))
    for ad, s, c in zip(ads, server.adapters, client.cache):
        assert np.array_equal(ad.A, c.A) and np.array_equal(ad.B, s.B)


def test_no_past_params_takes_everything_from_server():
    server, client = server_state(), _cached_client()
    cfg = FederationConfig(no_past_params=True)
    for side in (0, 1):
        assert adapters_equal(client_init(server, client, side, 3, cfg, DIMS, RngStream(0)), server.adapters)


def test_first_participation_after_round_zero_uses_round_zero_rule():
    ads = client_init(server_state(), ClientState(0, 10), 1, 5, FederationConfig(), DIMS, RngStream(0))
    assert all(np.all(a.B == 0) for a in ads)


def test_cache_shape_mismatch():
    client = ClientState(0, 10)
    client.cache = init_server(ModelDims(32, 8, 2, 3), RngStream(1)).adapters
    with pytest.raises(ProtocolError):
        client_init(server_state(), client, 1, 3, FederationConfig(), DIMS, RngStream(0))


# --------------------------------------------------------- client_update

def _dataset(small_world, k=0):
    return small_world[3][k]


def test_local_steps():
    assert local_steps(20, 8, 1) == 3
    assert local_steps(16, 8, 2) == 4


def test_client_update_step_count(small_world, monkeypatch):
    import fedrand.protocol as proto

    dims, _, _, part, base = small_world
    data = part[0]
    data20 = ClientDataset(0, np.arange(20), np.resize(data.tokens, (20, data.tokens.shape[1])), np.zeros(20, dtype=int))
    calls = []
    real = proto.loss_and_grad

    def counting(params, batch):
        calls.append(len(batch))
        return real(params, batch)

    monkeypatch.setattr(proto, "loss_and_grad", counting)
    cfg = FederationConfig(num_clients=4, participants=4, batch_size=8, epochs=1)
    client_update(0, init_server(dims, RngStream(0)), ClientState(0, 20), cfg, data20, base, dims, RngStream(0))
    assert calls == [8, 8, 4]


def test_contribution_carries_selected_family(small_world):
    dims, _, _, part, base = small_world
    server = init_server(dims, RngStream(0))
    for rho, fam in ((1.0, "A"), (0.0, "B")):
        cfg = FederationConfig(num_clients=4, participants=4, rho=rho)
        c = client_update(0, server, ClientState(0, part[0].n), cfg, part[0], base, dims, RngStream(0))
        assert list(c.families) == [fam] and c.side == int(fam == "A")
        assert sorted(c.families[fam]) == list(range(dims.num_layers))


def test_client_cache_matches_inline_training(small_world):
    dims, _, _, part, base = small_world
    data = part[1]
    cfg = FederationConfig(num_clients=4, participants=4, epochs=2, batch_size=4, lr=1e-2, seed=5)
    root = RngStream(cfg.seed)
    server = init_server(dims, root)
    client = ClientState(1, data.n)
    contrib = client_update(1, server, client, cfg, data, base, dims, root)

    # duplicate run written out by hand
    params = ModelParams(base, init_adapters(dims, root.child("init")))
    opt = AdamW(lr=cfg.lr, weight_decay=cfg.weight_decay)
    for e in range(cfg.epochs):
        order = root.child("round", 0, "client", 1, "batches", e).generator().permutation(data.n)
        for s in range(math.ceil(data.n / cfg.batch_size)):
            _, g = loss_and_grad(params, data.tokens[order[s * 4:(s + 1) * 4]])
            opt.step(params, g)
    assert adapters_equal(client.cache, params.adapters)
    fam = "A" if contrib.side == 1 else "B"
    assert all(np.array_equal(contrib.families[fam][l], getattr(params.adapters[l], fam)) for l in range(dims.num_layers))


def test_empty_dataset_rejected(small_world):
    dims, _, _, _, base = small_world
    empty = ClientDataset(0, np.array([], dtype=int), np.zeros((0, 8), dtype=int), np.array([], dtype=int))
    with pytest.raises(ProtocolError):
        client_update(0, init_server(dims, RngStream(0)), ClientState(0, 0), FederationConfig(num_clients=4, participants=4),
                      empty, base, dims, RngStream(0))


# ---------------------------------------------------------- aggregation

def _contrib(k, n, fams, value=None, dims=DIMS, seed=None):
    gen = np.random.default_rng(k if seed is None else seed)
    families = {}
    for f in fams:
        shape = (dims.embed_dim, dims.rank) if f == "A" else (dims.rank, dims.embed_dim)
        families[f] = {l: (np.full(shape, value) if value is not None else gen.normal(size=shape))
                       for l in range(dims.num_layers)}
    side = None if len(fams) == 2 else int(fams == ("A",))
    return ClientContribution(k, 0, side, families, n, 0.0)


def test_coefficients_hand_example():
    alpha, beta, ca, cb = fedrand_coefficients([2, 3, 5], [1, 1, 0])
    assert alpha == 0.5 and beta == 0.5
    assert ca == pytest.approx([0.4, 0.6], abs=1e-15) and cb == [1.0]
    server = server_state()
    cs = [_contrib(0, 2, ("A",)), _contrib(1, 3, ("A",)), _contrib(2, 5, ("B",))]
    new = aggregate_fedrand(server, cs)
    for l in range(DIMS.num_layers):
        assert np.allclose(new[l].A, 0.4 * cs[0].families["A"][l] + 0.6 * cs[1].families["A"][l], atol=1e-15)
        assert np.array_equal(new[l].B, cs[2].families["B"][l])


def test_coefficients_without_normalization():
    _, _, ca, cb = fedrand_coefficients([2, 3, 5], [1, 1, 0], normalize=False)
    assert ca == [0.2, 0.3] and cb == [0.5]


def test_all_a_keeps_server_b():
    server = server_state()
    new = aggregate_fedrand(server, [_contrib(0, 4, ("A",)), _contrib(1, 7, ("A",))])
    assert all(np.array_equal(n.B, s.B) for n, s in zip(new, server.adapters))


def test_single_a_contribution_is_copied():
    server = server_state()
    c = _contrib(3, 9, ("A",))
    new = aggregate_fedrand(server, [c])
    assert all(np.array_equal(new[l].A, c.families["A"][l]) for l in range(DIMS.num_layers))


def test_duplicate_client_ids_rejected():
    with pytest.raises(ProtocolError):
        aggregate_fedrand(server_state(), [_contrib(1, 2, ("A",)), _contrib(1, 3, ("B",))])


@settings(max_examples=1000, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 500), st.integers(0, 1)), min_size=1, max_size=12))
def test_coefficients_sum_to_one(pairs):
    n, a = zip(*pairs)
    alpha, beta, ca, cb = fedrand_coefficients(n, a)
    assert abs(alpha + beta - 1.0) < 1e-12
    if alpha > 0:
        assert abs(math.fsum(ca) - 1.0) < 1e-12
    else:
        assert ca == []
    if beta > 0:
        assert abs(math.fsum(cb) - 1.0) < 1e-12
    else:
        assert cb == []


def test_fedavg_examples():
    server = server_state()
    two = [_contrib(0, 5, ("A", "B")), _contrib(1, 5, ("A", "B"))]
    new = aggregate_fedavg(server, two)
    assert np.allclose(new[0].A, (two[0].families["A"][0] + two[1].families["A"][0]) / 2, atol=1e-15)
    one = _contrib(4, 3, ("A", "B"))
    new = aggregate_fedavg(server, [one])
    assert np.array_equal(new[1].B, one.families["B"][1])
    # n = [1, 3] on constant matrices: 0.25 * 1.0 + 0.75 * 5.0 = 4.0
    new = aggregate_fedavg(server, [_contrib(0, 1, ("A", "B"), 1.0), _contrib(1, 3, ("A", "B"), 5.0)])
    assert np.all(new[0].A == 4.0) and np.all(new[1].B == 4.0)


def test_fedavg_requires_both_families():
    with pytest.raises(ProtocolError):
        aggregate_fedavg(server_state(), [_contrib(0, 2, ("A",))])


# ------------------------------------------------------------ full runs

def _run(small_world, **kw):
    dims, _, ev, part, base = small_world
    cfg = FederationConfig(num_clients=4, participants=2, rounds=kw.pop("rounds", 6), lr=1e-2, **kw)
    return run_federation(cfg, part, base, dims, ev.tokens)


def test_degenerate_fedrand_is_fedavg(small_world):
    a = _run(small_world, method="fedavg", seed=3)
    b = _run(small_world, method="fedrand", send_both_halves=True, no_past_params=True, seed=3)
    for x, y in zip(a.server_trajectory, b.server_trajectory):
        assert adapters_equal(x, y)
    assert [h.server_eval_loss for h in a.history] == [h.server_eval_loss for h in b.history]


def test_rho_one_freezes_server_b(small_world):
    dims, _, ev, part, base = small_world
    res = _run(small_world, rho=1.0, seed=2)
    b0 = init_server(dims, RngStream(2)).adapters
    for adapters in res.server_trajectory:
        assert all(np.array_equal(x.B, y.B) for x, y in zip(adapters, b0))


def test_run_is_deterministic(small_world):
    a, b = _run(small_world, seed=4), _run(small_world, seed=4)
    assert [h.__dict__ for h in a.history] == [h.__dict__ for h in b.history]
    assert adapters_equal(a.server.adapters, b.server.adapters)


def test_privacy_and_fallback_invariants(small_world):
    res = _run(small_world, seed=6, rounds=10)
    seen = {}
    for rec in res.intercepts:
        key = (rec.round, rec.client_id)
        assert key not in seen, "both families left one client in one round"
        seen[key] = rec.family
    dims = small_world[0]
    prev = init_server(dims, RngStream(6)).adapters
    for r, adapters in enumerate(res.server_trajectory):
        sent = {rec.family for rec in res.intercepts if rec.round == r}
        for f in ("A", "B"):
            if f not in sent:
                assert all(np.array_equal(getattr(x, f), getattr(y, f)) for x, y in zip(adapters, prev))
        prev = adapters


def test_fedper_full_share_is_fedavg(small_world):
    a = _run(small_world, method="fedavg", seed=8)
    b = _run(small_world, method="fedper", n_shared=small_world[0].num_layers, seed=8)
    for x, y in zip(a.server_trajectory, b.server_trajectory):
        assert adapters_equal(x, y)


def test_fedper_keeps_private_layers_private(small_world):
    dims, _, ev, part, base = small_world
    dims4 = ModelDims(32, 8, 4, 2)
    from fedrand.model import BaseWeights

    base4 = BaseWeights.random(dims4, RngStream(0))
    cfg = FederationConfig(num_clients=4, participants=4, rounds=5, method="fedper", n_shared=1, lr=1e-2)
    res = run_federation(cfg, part, base4, dims4, ev.tokens)
    for rec in res.intercepts:
        if rec.round > 0:
            assert sorted(rec.layers) == [3]
    fedavg_round = 4 * 4 * dims4.params_per_family  # 4 clients, 2P down + 2P up each
    for r in range(1, 5):
        assert res.ledger.round_total(r) * 4 == fedavg_round
    assert res.ledger.round_total(0) == fedavg_round
    # private layers of the server stay at the round-zero aggregate
    for l in range(3):
        assert all(np.array_equal(t[l].A, res.server_trajectory[0][l].A) for t in res.server_trajectory)


def test_fedpara_hadamard_identities():
    from conftest import random_params

    dims = ModelDims(16, 8, 2, 4)
    p = random_params(0, dims)
    x = np.random.default_rng(0).integers(0, 16, (3, 6))
    ones = [LoraAdapter(np.full((8, 4), 0.5), np.full((4, 8), 0.5)) for _ in range(2)]
    hp = ModelParams(p.base, p.adapters, ones)
    assert np.array_equal(forward_batch(hp, x), forward_batch(p, x))
    zero = [LoraAdapter(np.zeros((8, 4)), np.ones((4, 8))) for _ in range(2)]
    assert np.array_equal(forward_batch(ModelParams(p.base, p.adapters, zero), x), forward_batch(base_only(p.base), x))


def test_fedpara_private_pair_is_never_sent(small_world):
    res = _run(small_world, method="fedpara", seed=1)
    dims = small_world[0]
    for c in res.clients:
        if c.private is None:
            continue
        for rec in res.intercepts:
            if rec.client_id == c.client_id:
                for l, m in rec.layers.items():
                    assert not np.array_equal(m, getattr(c.private[l], rec.family))


# ------------------------------------------------------- reconstruction

def test_fedavg_reconstruction_is_exact(small_world):
    res = _run(small_world, method="fedavg", seed=2)
    base = small_world[4]
    for c in res.clients:
        rec = reconstruct_client(c.client_id, res.intercepts, base, "fedavg")
        if c.cache is None:
            assert not rec.ok
            continue
        assert rec.ok and rec.staleness == 0
        assert adapters_equal(rec.params.adapters, c.cache)


def test_always_a_client_cannot_be_reconstructed(small_world):
    res = _run(small_world, rho=1.0, seed=2)
    rec = reconstruct_client(0, res.intercepts, small_world[4], "fedrand")
    assert not rec.ok and "B" in rec.reason


def test_stitched_model_differs_from_true_client(small_world):
    res = _run(small_world, seed=7, rounds=12)
    checked = 0
    for c in res.clients:
        rec = reconstruct_client(c.client_id, res.intercepts, small_world[4], "fedrand")
        if rec.ok and rec.staleness > 0:
            true = c.cache
            assert not adapters_equal(rec.params.adapters, true)
            checked += 1
    assert checked > 0


def test_fedpara_and_fedper_unreconstructable(small_world):
    res = _run(small_world, method="fedpara", seed=1)
    assert not reconstruct_client(0, res.intercepts, small_world[4], "fedpara").ok


# ------------------------------------------------------- communication

def test_comm_cost_ratios():
    dims = ModelDims()
    fedavg = comm_cost(FederationConfig(method="fedavg"), dims)
    assert fedavg["ratio_vs_fedavg"] == 1.0
    assert fedavg["down"] == fedavg["up"] == 2 * dims.params_per_family
    fr = comm_cost(FederationConfig(method="fedrand"), dims)
    assert fr["ratio_vs_fedavg"] == 0.75 and fr["up"] == dims.params_per_family
    for n in range(1, dims.num_layers + 1):
        assert comm_cost(FederationConfig(method="fedper", n_shared=n), dims)["ratio_vs_fedavg"] == n / dims.num_layers


def test_ledger_matches_comm_cost(small_world):
    dims = small_world[0]
    res = _run(small_world, seed=0)
    expected = comm_cost(res.config, dims)
    for r in res.ledger.down:
        for k in res.ledger.down[r]:
            assert res.ledger.down[r][k] == expected["down"] and res.ledger.up[r][k] == expected["up"]
