"""Entropy-based membership inference: MaxRényi-K% scores and AUROC.

Members are expected to score LOW (the model is confident on its training
data), so AUROC treats ``-score`` as the membership statistic; 1.0 is a
perfect attack and 0.5 is chance.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .model import ModelParams, forward_batch

PROB_FLOOR = 1e-300
SPANS = ("full", "prefix", "suffix")


@dataclass(frozen=True)
class ScoreRecord:
    seq_id: int
    member: bool
    score: float


def renyi_entropy(p, q: float) -> float:
    """H_q(p) = ln(sum p_i^q) / (1 - q); Shannon entropy at q = 1, -ln max p at q = inf."""
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError("p must be a probability vector")
    if q <= 0:
        raise ValueError(f"Renyi order must be positive, got {q}")
    return float(renyi_entropies(p[None, :], q)[0])


def renyi_entropies(probs: np.ndarray, q: float) -> np.ndarray:
    """Row-wise Rényi entropy of a stack of distributions, clipped to [0, ln V]."""
    mask = probs >= PROB_FLOOR
    p = np.where(mask, probs, 1.0)
    if math.isinf(q):
        h = -np.log(np.max(p * mask, axis=-1))
    elif q == 1.0:
        h = -np.sum(np.where(mask, probs * np.log(p), 0.0), axis=-1)
    else:
        h = np.log(np.sum(np.where(mask, p ** q, 0.0), axis=-1)) / (1.0 - q)
    return np.clip(h, 0.0, math.log(probs.shape[-1]))


def top_k_count(n_positions: int, k_percent: float) -> int:
    if not 0 <= k_percent <= 100:
        raise ValueError(f"K must be in [0, 100], got {k_percent}")
    # nearest integer, at least one position: K=0 is the single maximum
    return max(1, math.floor(k_percent / 100.0 * n_positions + 0.5))


def max_renyi_k_profile(profile, k_percent: float) -> float:
    """Mean of the top-K% entries of an entropy profile (at least one entry)."""
    h = np.asarray(profile, dtype=np.float64)
    if h.ndim != 1 or h.size == 0:
        raise ValueError("profile must be a non-empty vector")
    n = top_k_count(h.size, k_percent)
    return float(np.mean(np.sort(h)[::-1][:n]))


def entropy_profiles(params: ModelParams, sequences, q: float) -> np.ndarray:
    """Per-position entropies, shape n x (T-1)."""
    tokens = np.asarray(sequences)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError("sequences must be a 2-D array with length >= 2")
    return renyi_entropies(forward_batch(params, tokens), q)


def span_slice(n_positions: int, span: str) -> slice:
    cut = max(1, n_positions // 3)
    if span == "full":
        return slice(0, n_positions)
    if span == "prefix":
        return slice(0, cut)
    if span == "suffix":
        return slice(cut, n_positions)
    raise ValueError(f"unknown span {span!r}")


def max_renyi_k(params: ModelParams, sequence, k_percent: float, q: float = 0.5) -> float:
    seq = np.asarray(sequence)
    if seq.ndim != 1 or seq.size < 2:
        raise ValueError("sequence needs at least two tokens")
    return max_renyi_k_profile(entropy_profiles(params, seq[None, :], q)[0], k_percent)


def scores_from_profiles(profiles: np.ndarray, k_percent: float, span: str = "full") -> np.ndarray:
    sl = span_slice(profiles.shape[1], span)
    part = profiles[:, sl]
    n = top_k_count(part.shape[1], k_percent)
    return np.mean(-np.sort(-part, axis=1)[:, :n], axis=1)


def auroc(records: Sequence[ScoreRecord]) -> float:
    """Mann-Whitney AUROC with members expected to score low; ties count half."""
    member = np.array([r.member for r in records], dtype=bool)
    scores = np.array([r.score for r in records], dtype=np.float64)
    return auroc_arrays(scores[member], scores[~member])


def auroc_arrays(member_scores, nonmember_scores) -> float:
    m = np.asarray(member_scores, dtype=np.float64)
    nm = np.asarray(nonmember_scores, dtype=np.float64)
    if m.size == 0 or nm.size == 0:
        raise ValueError("AUROC needs at least one member and one non-member")
    ranks = rankdata(np.concatenate([-m, -nm]))
    u = ranks[:m.size].sum() - m.size * (m.size + 1) / 2.0
    return float(u / (m.size * nm.size))


@dataclass(frozen=True)
class AttackRow:
    target: str
    k: float
    q: float
    span: str
    auroc: float
    n_members: int
    n_nonmembers: int
    n_models: int = 1

    def as_record(self) -> dict:
        return {"target": self.target, "K": self.k, "q": self.q, "span": self.span,
                "auroc": self.auroc, "n_members": self.n_members,
                "n_nonmembers": self.n_nonmembers, "n_models": self.n_models}


def attack_model(params: ModelParams, members, nonmembers, ks: Iterable[float] = (0, 10), q: float = 0.5,
                 spans: Sequence[str] = SPANS) -> dict:
    """AUROC keyed by (K, span) for one model."""
    pm = entropy_profiles(params, members, q)
    pn = entropy_profiles(params, nonmembers, q)
    return {(k, s): auroc_arrays(scores_from_profiles(pm, k, s), scores_from_profiles(pn, k, s))
            for k in ks for s in spans}


def run_attack(
    targets: dict,
    members,
    nonmembers,
    ks: Iterable[float] = (0, 10),
    q: float = 0.5,
    spans: Sequence[str] = SPANS,
) -> list[AttackRow]:
    """Attack every named target.

    ``targets`` maps a target name to either one ``ModelParams`` or a list of
    them (e.g. reconstructed clients), whose AUROCs are averaged.  Targets with
    an empty list are skipped: absent, not zero.
    """
    ks = list(ks)
    rows = []
    for name, models in targets.items():
        if models is None:
            continue
        if isinstance(models, ModelParams):
            models = [models]
        if not models:
            continue
        tables = [attack_model(p, members, nonmembers, ks, q, spans) for p in models]
        for k in ks:
            for s in spans:
                val = float(np.mean([t[(k, s)] for t in tables]))
                rows.append(AttackRow(name, k, q, s, val, len(members), len(nonmembers), len(models)))
    return rows


def lookup(rows: Sequence[AttackRow], target: str, k: float, span: str = "full", q: Optional[float] = None) -> Optional[float]:
    for r in rows:
        if r.target == target and r.k == k and r.span == span and (q is None or r.q == q):
            return r.auroc
    return None
