"""Tiny next-token model: frozen random base weights plus per-layer LoRA.

The prefix state at position ``i`` is the mean of the embeddings of tokens
``0..i``.  Each layer maps ``h -> tanh(h @ (W0 + A @ B))`` and a frozen output
projection produces next-token logits.  Gradients are derived by hand and
only flow into the LoRA factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .tensor import RngStream, rand_normal, softmax, zeros

LORA_INIT_STD = 0.02


class DataError(ValueError):
    """Token ids outside the vocabulary or malformed sequences."""


@dataclass(frozen=True)
class ModelDims:
    vocab_size: int = 64
    embed_dim: int = 32
    num_layers: int = 4
    rank: int = 8

    def __post_init__(self):
        if self.vocab_size < 2 or self.embed_dim < 2 or self.num_layers < 1:
            raise ValueError(f"invalid model dims {self}")
        if not 1 <= self.rank < self.embed_dim:
            raise ValueError(f"LoRA rank must satisfy 1 <= rank < embed_dim, got {self.rank}")

    @property
    def params_per_family(self) -> int:
        """Parameter count of all A matrices (equal to that of all B matrices)."""
        return self.num_layers * self.embed_dim * self.rank


@dataclass(frozen=True, eq=False)
class BaseWeights:
    embedding: np.ndarray  # V x d
    layers: tuple  # L matrices, d x d
    output: np.ndarray  # d x V

    def __post_init__(self):
        for m in (self.embedding, self.output, *self.layers):
            m.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.embedding.shape[0], self.embedding.shape[1], len(self.layers)

    @classmethod
    def random(cls, dims: ModelDims, stream: RngStream, output_scale: float = 3.0) -> "BaseWeights":
        V, d, L = dims.vocab_size, dims.embed_dim, dims.num_layers
        emb = rand_normal(stream.child("embedding"), V, d, 1.0)
        layers = tuple(rand_normal(stream.child("layer", l), d, d, 1.0 / np.sqrt(d)) for l in range(L))
        out = rand_normal(stream.child("output"), d, V, output_scale / np.sqrt(d))
        return cls(emb, layers, out)


@dataclass
class LoraAdapter:
    A: np.ndarray  # d x rank
    B: np.ndarray  # rank x d

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0] or self.A.shape[0] != self.B.shape[1]:
            raise ValueError(f"incompatible LoRA shapes A{self.A.shape} B{self.B.shape}")
        if self.rank >= self.A.shape[0]:
            raise ValueError("LoRA rank must be below the layer width")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def product(self) -> np.ndarray:
        return self.A @ self.B

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.A.copy(), self.B.copy())


@dataclass
class ModelParams:
    """Base weights plus one adapter per layer.

    When ``private`` is set the layer update is the Hadamard product
    ``(A B) * (A_p B_p)`` of the shared pair and the private pair.
    """

    base: BaseWeights
    adapters: list
    private: Optional[list] = None

    def __post_init__(self):
        d = self.base.embedding.shape[1]
        if len(self.adapters) != len(self.base.layers):
            raise ValueError("need one adapter per base layer")
        for group in (self.adapters, self.private or []):
            for ad in group:
                if ad.A.shape[0] != d:
                    raise ValueError(f"adapter width {ad.A.shape[0]} does not match base width {d}")
        if self.private is not None and len(self.private) != len(self.adapters):
            raise ValueError("need one private adapter per layer")

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.base,
            [a.copy() for a in self.adapters],
            None if self.private is None else [a.copy() for a in self.private],
        )

    def effective_weights(self) -> list[np.ndarray]:
        out = []
        for l, w0 in enumerate(self.base.layers):
            delta = self.adapters[l].product()
            if self.private is not None:
                delta = delta * self.private[l].product()
            out.append(w0 + delta)
        return out


def init_adapters(dims: ModelDims, stream: RngStream) -> list[LoraAdapter]:
    """Round-zero adapters: A ~ N(0, 0.02^2), B = 0."""
    d, r = dims.embed_dim, dims.rank
    return [LoraAdapter(rand_normal(stream.child("A", l), d, r, LORA_INIT_STD), zeros(r, d))
            for l in range(dims.num_layers)]


def base_only(base: BaseWeights, rank: int = 1) -> ModelParams:
    d = base.embedding.shape[1]
    return ModelParams(base, [LoraAdapter(zeros(d, rank), zeros(rank, d)) for _ in base.layers])


def _as_batch(base: BaseWeights, batch) -> np.ndarray:
    tokens = np.asarray(batch)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise ValueError("batch must be a non-empty set of equal-length sequences")
    if tokens.shape[1] < 2:
        raise DataError("sequences need at least two tokens")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise DataError("token ids must be integers")
    V = base.embedding.shape[0]
    if tokens.min() < 0 or tokens.max() >= V:
        raise DataError(f"token id out of range [0, {V})")
    return tokens


def _prefix_states(base: BaseWeights, tokens: np.ndarray) -> np.ndarray:
    """Mean-pooled prefix embeddings for positions 0..T-2, flattened to (N*(T-1)) x d."""
    emb = base.embedding[tokens[:, :-1]]  # n x (T-1) x d
    counts = np.arange(1, tokens.shape[1], dtype=np.float64)[None, :, None]
    return (np.cumsum(emb, axis=1) / counts).reshape(-1, emb.shape[2])


def _forward(params: ModelParams, tokens: np.ndarray):
    weights = params.effective_weights()
    hs = [_prefix_states(params.base, tokens)]
    for w in weights:
        hs.append(np.tanh(hs[-1] @ w))
    probs = softmax(hs[-1] @ params.base.output)
    return weights, hs, probs


def forward(params: ModelParams, tokens) -> np.ndarray:
    """Next-token distributions for every position of one sequence, shape (T-1) x V."""
    tokens = _as_batch(params.base, tokens)
    if tokens.shape[0] != 1:
        raise ValueError("forward takes a single sequence; use forward_batch")
    return _forward(params, tokens)[2]


def forward_batch(params: ModelParams, batch) -> np.ndarray:
    """Distributions for a batch, shape n x (T-1) x V."""
    tokens = _as_batch(params.base, batch)
    probs = _forward(params, tokens)[2]
    return probs.reshape(tokens.shape[0], tokens.shape[1] - 1, -1)


def _nll(probs: np.ndarray, tokens: np.ndarray) -> float:
    targets = tokens[:, 1:].reshape(-1)
    picked = probs[np.arange(targets.size), targets]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def loss(params: ModelParams, batch) -> float:
    """Mean next-token negative log-likelihood over all sequences and positions."""
    tokens = _as_batch(params.base, batch)
    return _nll(_forward(params, tokens)[2], tokens)


def accuracy(params: ModelParams, batch) -> float:
    tokens = _as_batch(params.base, batch)
    probs = _forward(params, tokens)[2]
    return float(np.mean(probs.argmax(axis=1) == tokens[:, 1:].reshape(-1)))


@dataclass
class Gradients:
    adapters: list  # per layer (dA, dB)
    private: Optional[list] = None


def loss_and_grad(params: ModelParams, batch) -> tuple[float, Gradients]:
    tokens = _as_batch(params.base, batch)
    weights, hs, probs = _forward(params, tokens)
    n = probs.shape[0]
    targets = tokens[:, 1:].reshape(-1)
    value = _nll(probs, tokens)

    dlogits = probs.copy()
    dlogits[np.arange(n), targets] -= 1.0
    dlogits /= n
    dh = dlogits @ params.base.output.T

    grads: list = [None] * len(weights)
    pgrads: list = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        dz = dh * (1.0 - hs[l + 1] ** 2)
        dw = hs[l].T @ dz
        ad = params.adapters[l]
        if params.private is None:
            grads[l] = (dw @ ad.B.T, ad.A.T @ dw)
        else:
            pv = params.private[l]
            dg = dw * pv.product()
            dp = dw * ad.product()
            grads[l] = (dg @ ad.B.T, ad.A.T @ dg)
            pgrads[l] = (dp @ pv.B.T, pv.A.T @ dp)
        if l > 0:
            dh = dz @ weights[l].T
    return value, Gradients(grads, None if params.private is None else pgrads)


def grad(params: ModelParams, batch) -> Gradients:
    """Analytic gradients of ``loss`` with respect to every LoRA factor."""
    return loss_and_grad(params, batch)[1]


@dataclass
class AdamW:
    """Decoupled-weight-decay Adam over the LoRA factors of a ModelParams."""

    lr: float = 3e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, params: ModelParams, grads: Gradients) -> ModelParams:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for key, holder, g in _trainables(params, grads):
            p = getattr(holder, key[-1])
            if p.shape != g.shape:
                raise RuntimeError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key}")
            m, v = self.moments.get(key, (np.zeros_like(p), np.zeros_like(p)))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.moments[key] = (m, v)
            p = p * (1.0 - self.lr * self.weight_decay)
            p = p - self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            setattr(holder, key[-1], p)
        return params


def adamw_step(state: AdamW, params: ModelParams, grads: Gradients) -> ModelParams:
    return state.step(params, grads)


def _trainables(params: ModelParams, grads: Gradients):
    groups = [("shared", params.adapters, grads.adapters)]
    if params.private is not None:
        if grads.private is None:
            raise RuntimeError("missing gradients for private adapters")
        groups.append(("private", params.private, grads.private))
    for name, adapters, gs in groups:
        if len(adapters) != len(gs):
            raise RuntimeError("gradient list does not match adapters")
        for l, (ad, (ga, gb)) in enumerate(zip(adapters, gs)):
            yield (name, l, "A"), ad, ga
            yield (name, l, "B"), ad, gb


def save_adapters(path, adapters: Sequence[LoraAdapter]) -> None:
    """Write adapters to an ``.npz`` file; float64 values round-trip bit-exactly."""
    arrays = {}
    for l, ad in enumerate(adapters):
        arrays[f"layer{l}.A"] = ad.A
        arrays[f"layer{l}.B"] = ad.B
    with open(Path(path), "wb") as fh:
        np.savez(fh, **arrays)


def load_adapters(path) -> list[LoraAdapter]:
    with np.load(Path(path)) as z:
        n = len([k for k in z.files if k.endswith(".A")])
        return [LoraAdapter(z[f"layer{l}.A"].copy(), z[f"layer{l}.B"].copy()) for l in range(n)]
