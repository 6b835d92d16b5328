"""Experiment orchestration: data -> partition -> federation -> MIA -> report.

Every random draw descends from the federation's master seed, so an
``ExperimentSpec`` fully determines every artifact a run writes.
"""
from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import artifacts
from .artifacts import ArtifactError
from .data import Corpus, MiaSplit, dirichlet_partition, export_partition, generate_corpus, make_mia_split
from .mia import SPANS, AttackRow, lookup, run_attack
from .model import BaseWeights, ModelDims, ModelParams, loss, save_adapters, load_adapters
from .protocol import (
    FAMILIES,
    ConfigError,
    FederationConfig,
    FederationResult,
    InvariantViolation,
    comm_cost,
    reconstruct_client,
    run_federation,
)
from .tensor import RngStream


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 6
    per_class: int = 200
    seq_len: int = 24
    dirichlet: float = 0.5
    eval_per_class: int = 50


@dataclass(frozen=True)
class MiaConfig:
    count: int = 300
    ks: tuple = (0, 10)
    q: float = 0.5
    extra_orders: tuple = (1.0,)
    spans: tuple = SPANS


@dataclass(frozen=True)
class ExperimentSpec:
    federation: FederationConfig = field(default_factory=FederationConfig)
    model: ModelDims = field(default_factory=ModelDims)
    data: DataConfig = field(default_factory=DataConfig)
    mia: MiaConfig = field(default_factory=MiaConfig)
    out: Optional[str] = None
    seeds: tuple = (0,)

    def validate(self) -> "ExperimentSpec":
        self.federation.validate(self.model)
        d = self.data
        if d.num_classes < 2 or d.per_class < 1 or d.seq_len < 4 or d.dirichlet <= 0 or d.eval_per_class < 1:
            raise ConfigError(f"invalid data settings: {d}")
        if self.model.vocab_size < 4 * d.num_classes:
            raise ConfigError("vocab_size must be at least 4 * num_classes")
        n_train = d.num_classes * d.per_class
        if n_train < self.federation.num_clients:
            raise ConfigError(f"{n_train} training sequences cannot cover {self.federation.num_clients} clients")
        if not 1 <= self.mia.count <= n_train:
            raise ConfigError(f"mia.count must be in [1, {n_train}]")
        if self.mia.q <= 0 or any(q <= 0 for q in self.mia.extra_orders):
            raise ConfigError("Renyi orders must be positive")
        if any(not 0 <= k <= 100 for k in self.mia.ks):
            raise ConfigError("MIA K values must be in [0, 100]")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mia"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["mia"].items()}
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        try:
            mia = dict(d.get("mia", {}))
            for k in ("ks", "extra_orders", "spans"):
                if k in mia:
                    mia[k] = tuple(mia[k])
            return cls(
                federation=FederationConfig(**d.get("federation", {})),
                model=ModelDims(**d.get("model", {})),
                data=DataConfig(**d.get("data", {})),
                mia=MiaConfig(**mia),
                out=d.get("out"),
                seeds=tuple(d.get("seeds", (0,))),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        if not path.exists():
            raise ArtifactError(f"missing config file: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc

    def with_seed(self, seed: int) -> "ExperimentSpec":
        return replace(self, federation=replace(self.federation, seed=seed))

    def config_hash(self) -> str:
        """Hash of everything that affects results (the output path excluded)."""
        d = self.to_dict()
        d.pop("out", None)
        d.pop("seeds", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


@dataclass(eq=False)
class World:
    corpus: Corpus
    eval_corpus: Corpus
    partition: list
    split: MiaSplit
    base: BaseWeights


def build_world(spec: ExperimentSpec) -> World:
    root = RngStream(spec.federation.seed)
    d, m = spec.data, spec.model
    corpus = generate_corpus(root.child("data"), d.num_classes, d.per_class, d.seq_len, m.vocab_size)
    eval_corpus = generate_corpus(root.child("data"), d.num_classes, d.eval_per_class, d.seq_len, m.vocab_size, split="eval")
    partition = dirichlet_partition(corpus, spec.federation.num_clients, d.dirichlet, root.child("partition"))
    split = make_mia_split(corpus, spec.mia.count, root.child("mia"), m.vocab_size, d.num_classes)
    base = BaseWeights.random(m, root.child("base"))
    return World(corpus, eval_corpus, partition, split, base)


def method_label(cfg: FederationConfig) -> str:
    if cfg.method == "fedper":
        return f"FedPer({cfg.n_shared})"
    name = {"fedrand": "FedRand", "fedavg": "FedAvg", "fedpara": "FedPara"}[cfg.method]
    tags = [t for t, on in (("w/o normalization", cfg.no_normalization),
                            ("w/o past parameters", cfg.no_past_params),
                            ("both halves", cfg.send_both_halves)) if on]
    if cfg.method == "fedrand" and cfg.rho != 0.5:
        tags.insert(0, f"rho={cfg.rho:g}")
    return name + (f" [{', '.join(tags)}]" if tags else "")


def _client_eval(result: FederationResult, eval_tokens) -> dict:
    out = {}
    for c in result.clients:
        p = result.client_params(c.client_id)
        if p is not None:
            out[c.client_id] = loss(p, eval_tokens)
    return out


def audit(result: FederationResult) -> None:
    """Raise ``InvariantViolation`` if a run broke a protocol invariant."""
    cfg = result.config
    if cfg.method == "fedrand" and not cfg.send_both_halves:
        seen = {}
        for rec in result.intercepts:
            key = (rec.round, rec.client_id)
            if key in seen and seen[key] != rec.family:
                raise InvariantViolation(f"client {rec.client_id} leaked both families in round {rec.round}")
            seen[key] = rec.family
    prev = None
    for r, adapters in enumerate(result.server_trajectory):
        sent = {rec.family for rec in result.intercepts if rec.round == r}
        if prev is not None:
            for f in FAMILIES:
                if f not in sent and any(not np.array_equal(getattr(a, f), getattr(b, f)) for a, b in zip(adapters, prev)):
                    raise InvariantViolation(f"server {f} family changed in round {r} without uploads")
        prev = adapters


def attack_targets(result_or_intercepts, base: BaseWeights, num_clients: int, method: str, server: ModelParams):
    intercepts = result_or_intercepts
    recons = [reconstruct_client(k, intercepts, base, method) for k in range(num_clients)]
    return recons, {"server": server, "client": [r.params for r in recons if r.ok]}


def _mia_rows(spec: ExperimentSpec, targets: dict, split: MiaSplit) -> list[AttackRow]:
    rows = []
    for q in (spec.mia.q, *spec.mia.extra_orders):
        rows.extend(run_attack(targets, split.members, split.nonmembers, spec.mia.ks, q, spec.mia.spans))
    return rows


def _stats(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std()) if v.size > 1 else 0.0


@dataclass
class RunReport:
    spec: ExperimentSpec
    result: FederationResult
    records: list  # everything also written to the trace, minus the header
    mia_rows: list
    reconstructions: list
    wall_clock: float

    @property
    def final(self) -> dict:
        return next(r for r in self.records if r["type"] == "final")

    def summary(self) -> dict:
        f = self.final
        return {
            "method": method_label(self.spec.federation),
            "seed": self.spec.federation.seed,
            "config_hash": self.spec.config_hash(),
            "server_eval_loss": f["server_eval_loss"],
            "client_eval_loss_mean": f["client_eval_loss_mean"],
            "client_eval_loss_std": f["client_eval_loss_std"],
            "comm_down_total": f["comm_down_total"],
            "comm_up_total": f["comm_up_total"],
            "comm_ratio_vs_fedavg": f["comm_ratio_vs_fedavg"],
            "mia": [r.as_record() for r in self.mia_rows],
            "staleness": {str(r.client_id): r.staleness for r in self.reconstructions},
            "unreconstructable": [r.client_id for r in self.reconstructions if not r.ok],
            "wall_clock_s": self.wall_clock,
            "complete": True,
        }

    def mia(self, target: str, k: float, span: str = "full", q: Optional[float] = None) -> Optional[float]:
        return lookup(self.mia_rows, target, k, span, self.spec.mia.q if q is None else q)

    def render(self) -> str:
        return render_report(self.summary())


def _round_record(rec) -> dict:
    return {
        "type": "round",
        "round": rec.round,
        "participants": rec.participants,
        "sides": {str(k): v for k, v in rec.sides.items()},
        "train_loss": {str(k): v for k, v in rec.train_loss.items()},
        "server_eval_loss": rec.server_eval_loss,
        "comm_down": sum(rec.comm_down.values()),
        "comm_up": sum(rec.comm_up.values()),
        "comm_down_by_client": {str(k): v for k, v in rec.comm_down.items()},
        "comm_up_by_client": {str(k): v for k, v in rec.comm_up.items()},
    }


def trace_header(spec: ExperimentSpec) -> dict:
    return {"schema": artifacts.TRACE_SCHEMA, "version": artifacts.TRACE_VERSION,
            "config_hash": spec.config_hash(), "seed": spec.federation.seed}


def run(spec: ExperimentSpec, out_dir=None, attack: bool = True) -> RunReport:
    """Run one experiment; write artifacts when ``out_dir`` (or ``spec.out``) is set."""
    spec.validate()
    out_dir = out_dir if out_dir is not None else spec.out
    t0 = time.perf_counter()
    world = build_world(spec)
    result = run_federation(spec.federation, world.partition, world.base, spec.model, world.eval_corpus.tokens)
    audit(result)

    records = [_round_record(h) for h in result.history]
    client_eval = _client_eval(result, world.eval_corpus.tokens)
    mean, std = _stats(client_eval.values())
    down, up = result.ledger.totals()
    fedavg_total = sum(4 * spec.model.params_per_family for h in result.history for _ in h.participants)
    records.append({
        "type": "final",
        "server_eval_loss": result.history[-1].server_eval_loss,
        "client_eval_loss": {str(k): v for k, v in client_eval.items()},
        "client_eval_loss_mean": mean,
        "client_eval_loss_std": std,
        "comm_down_total": down,
        "comm_up_total": up,
        "comm_ratio_vs_fedavg": (down + up) / fedavg_total,
        "comm_steady_state": comm_cost(spec.federation, spec.model),
    })

    recons, rows = [], []
    if attack:
        recons, targets = attack_targets(result.intercepts, world.base, spec.federation.num_clients,
                                         spec.federation.method, result.server_params())
        rows = _mia_rows(spec, targets, world.split)
        for r in recons:
            records.append({"type": "reconstruction", "client": r.client_id, "ok": r.ok,
                            "a_round": r.a_round, "b_round": r.b_round, "staleness": r.staleness,
                            "reason": r.reason})
        for row in rows:
            records.append({"type": "mia", **row.as_record()})

    report = RunReport(spec, result, records, rows, recons, time.perf_counter() - t0)
    if out_dir is not None:
        write_run(Path(out_dir), report, world)
    return report


def write_run(out: Path, report: RunReport, world: World) -> None:
    out.mkdir(parents=True, exist_ok=True)
    spec, result = report.spec, report.result
    complete = out / "report.json"
    if complete.exists():
        complete.unlink()
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    header = trace_header(spec)
    artifacts.write_jsonl(out / "trace.jsonl", header, report.records)
    artifacts.save_intercepts(out, result.intercepts, {"config_hash": header["config_hash"], "method": spec.federation.method})
    save_adapters(out / "server_final.npz", result.server.adapters)
    export_partition(out / "partition.jsonl", world.partition)
    artifacts.write_jsonl(out / "attack.jsonl", {"schema": "fedrand.attack", "config_hash": header["config_hash"]},
                          [r.as_record() for r in report.mia_rows])
    (out / "report.txt").write_text(report.render(), encoding="utf-8")
    artifacts.write_json_atomic(complete, report.summary())


# ------------------------------------------------------------------ attack

@dataclass
class AttackReport:
    config_hash: str
    method: str
    rows: list
    reconstructions: list

    def to_dict(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "method": self.method,
            "mia": [r.as_record() for r in self.rows],
            "clients": [{"client": r.client_id, "reconstructable": r.ok, "a_round": r.a_round,
                         "b_round": r.b_round, "staleness": r.staleness, "reason": r.reason}
                        for r in self.reconstructions],
        }

    def render(self) -> str:
        lines = [f"attack on {self.method} run {self.config_hash[:12]}", ""]
        lines.append(_mia_table(self.rows))
        lines.append("")
        lines.append(f"{'client':>6}  {'status':<18} {'A round':>7} {'B round':>7} {'gap':>4}")
        for r in self.reconstructions:
            status = "reconstructed" if r.ok else "unreconstructable"
            fmt = lambda v: "-" if v is None else str(v)
            lines.append(f"{r.client_id:>6}  {status:<18} {fmt(r.a_round):>7} {fmt(r.b_round):>7} {fmt(r.staleness):>4}"
                         + ("" if r.ok else f"  ({r.reason})"))
        return "\n".join(lines) + "\n"


def attack(run_dir) -> AttackReport:
    """Replay the server-side attack from a run directory's persisted artifacts."""
    run_dir = Path(run_dir)
    spec_path = run_dir / "spec.json"
    if not spec_path.exists():
        raise ArtifactError(f"missing artifact: {spec_path}")
    spec = ExperimentSpec.load(spec_path)
    header, _ = artifacts.read_jsonl(run_dir / "trace.jsonl", artifacts.TRACE_SCHEMA)
    ih, intercepts = artifacts.load_intercepts(run_dir)
    digest = spec.config_hash()
    if header.get("config_hash") != digest or ih.get("config_hash") != digest:
        raise InvariantViolation("spec.json does not match the config hash recorded in the run's logs")
    server_path = run_dir / "server_final.npz"
    if not server_path.exists():
        raise ArtifactError(f"missing artifact: {server_path}")
    world = build_world(spec)
    server = ModelParams(world.base, load_adapters(server_path))
    recons, targets = attack_targets(intercepts, world.base, spec.federation.num_clients, spec.federation.method, server)
    rows = _mia_rows(spec, targets, world.split)
    return AttackReport(digest, method_label(spec.federation), rows, recons)


# ----------------------------------------------------------------- compare

PRESETS = {
    "methods": [
        {"method": "fedavg"},
        {"method": "fedrand"},
        {"method": "fedper", "n_shared": 2},
        {"method": "fedper", "n_shared": 4},
        {"method": "fedpara"},
    ],
    "ablation": [
        {"method": "fedrand", "rho": 0.3},
        {"method": "fedrand", "rho": 0.7},
        {"method": "fedrand", "no_past_params": True},
        {"method": "fedrand", "no_normalization": True},
        {"method": "fedrand"},
    ],
}


def preset_specs(base: ExperimentSpec, preset: str) -> list[ExperimentSpec]:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    out = []
    for changes in PRESETS[preset]:
        fed = replace(base.federation, method="fedrand", rho=0.5, no_normalization=False,
                      no_past_params=False, send_both_halves=False)
        out.append(replace(base, federation=replace(fed, **changes)))
    return out


@dataclass
class Comparison:
    rows: list  # one dict per method

    def render(self) -> str:
        return render_comparison(self.rows)


def compare(specs: Sequence[ExperimentSpec], seeds: Sequence[int], out_dir=None) -> Comparison:
    """Run every spec for every seed; aggregate mean and stddev per spec."""
    if not seeds:
        raise ConfigError("need at least one seed")
    if not specs:
        raise ConfigError("need at least one spec")
    dims = specs[0].model
    for s in specs:
        if s.model != dims:
            raise ConfigError("all compared specs must share model dimensions")
        s.validate()
    rows = []
    for s in specs:
        label = method_label(s.federation)
        runs = []
        for seed in seeds:
            sub = None
            if out_dir is not None:
                sub = Path(out_dir) / _slug(label) / f"seed{seed}"
            runs.append(run(s.with_seed(seed), out_dir=sub))
        row = {"method": label, "n_seeds": len(seeds),
               "comm_ratio": comm_cost(s.federation, s.model)["ratio_vs_fedavg"]}
        for key in ("server_eval_loss", "client_eval_loss_mean"):
            row[key], row[key + "_std"] = _stats(r.final[key] for r in runs)
        for target in ("server", "client"):
            for k in s.mia.ks:
                vals = [r.mia(target, k) for r in runs]
                vals = [v for v in vals if v is not None]
                mean, std = _stats(vals)
                row[f"mia_{target}_K{k:g}"] = None if not vals else mean
                row[f"mia_{target}_K{k:g}_std"] = None if not vals else std
        rows.append(row)
    comp = Comparison(rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        artifacts.write_jsonl(out / "comparison.jsonl", {"schema": "fedrand.comparison", "seeds": list(seeds)}, rows)
        (out / "comparison.txt").write_text(comp.render(), encoding="utf-8")
    return comp


def _slug(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()


# --------------------------------------------------------------- rendering

def _fmt(v, digits=4) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{v:.{digits}f}"


def _mia_table(rows: Sequence) -> str:
    recs = [r.as_record() if isinstance(r, AttackRow) else r for r in rows]
    if not recs:
        return "(no MIA results)"
    lines = [f"{'target':<8} {'q':>4} {'span':<7} {'K':>4} {'AUROC':>7} {'models':>6}"]
    for r in recs:
        lines.append(f"{r['target']:<8} {r['q']:>4g} {r['span']:<7} {r['K']:>4g} {r['auroc']:>7.4f} {r['n_models']:>6}")
    return "\n".join(lines)


def render_report(summary: dict) -> str:
    lines = [
        f"run {summary['method']}  seed={summary['seed']}  config={summary['config_hash'][:12]}",
        "",
        f"server eval loss      {_fmt(summary['server_eval_loss'])}",
        f"client eval loss      {_fmt(summary['client_eval_loss_mean'])} ({_fmt(summary['client_eval_loss_std'])})",
        f"params down / up      {summary['comm_down_total']} / {summary['comm_up_total']}",
        f"comm vs FedAvg        {_fmt(summary['comm_ratio_vs_fedavg'])}",
        "",
        _mia_table(summary["mia"]),
    ]
    if summary.get("unreconstructable"):
        lines += ["", "unreconstructable clients: " + ", ".join(map(str, summary["unreconstructable"]))]
    return "\n".join(lines) + "\n"


def render_comparison(rows: Sequence[dict]) -> str:
    ks = sorted({key.split("_K")[1] for r in rows for key in r if key.startswith("mia_server_K") and not key.endswith("_std")},
                key=float)
    head = f"{'method':<36} {'server loss':>17} {'client loss':>17} {'comm':>6}"
    for t in ("server", "client"):
        for k in ks:
            head += f" {f'MIA {t} K{k}':>18}"
    lines = [head, "-" * len(head)]
    for r in rows:
        line = (f"{r['method']:<36} {_fmt(r['server_eval_loss']) + ' (' + _fmt(r['server_eval_loss_std']) + ')':>17}"
                f" {_fmt(r['client_eval_loss_mean']) + ' (' + _fmt(r['client_eval_loss_mean_std']) + ')':>17}"
                f" {r['comm_ratio']:>6.2f}")
        for t in ("server", "client"):
            for k in ks:
                v, s = r.get(f"mia_{t}_K{k}"), r.get(f"mia_{t}_K{k}_std")
                cell = "-" if v is None else f"{v:.4f} ({s:.4f})"
                line += f" {cell:>18}"
        lines.append(line)
    return "\n".join(lines) + "\n"
