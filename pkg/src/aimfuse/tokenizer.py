"""Drug-pair token sequences and modality-type embeddings."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .encoders import uniform_init
from .errors import ConfigError, DomainError, ShapeError
from .numkernel import Tensor

VARIANTS = ("separate", "drug-average", "modality-pair")

Descriptor = tuple[str, str]
"""(drug slot, modality key); slot is "A", "B" or "pair"."""


@dataclass
class TokenSequence:
    """Tokens of shape (L, d) or batched (N, L, d) plus one descriptor per token."""

    tokens: Tensor
    descriptors: list[Descriptor]
    variant: str

    def __post_init__(self):
        if self.tokens.shape[-2] != len(self.descriptors):
            raise ShapeError(f"{self.tokens.shape[-2]} tokens but {len(self.descriptors)} descriptors")

    @property
    def length(self) -> int:
        return len(self.descriptors)


@dataclass
class PairMLPParams:
    """One hidden-layer MLP per modality mapping [h_u || h_v] (2d) -> d."""

    w1: dict[str, Tensor] = field(default_factory=dict)
    b1: dict[str, Tensor] = field(default_factory=dict)
    w2: dict[str, Tensor] = field(default_factory=dict)
    b2: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, rng, modalities: Sequence[str], d: int) -> "PairMLPParams":
        p = cls()
        for m in modalities:
            p.w1[m] = nk.parameter(uniform_init(rng, (2 * d, d), 2 * d))
            p.b1[m] = nk.parameter(np.zeros(d))
            p.w2[m] = nk.parameter(uniform_init(rng, (d, d), d))
            p.b2[m] = nk.parameter(np.zeros(d))
        return p

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for m in self.w1:
            out.update({f"{m}.w1": self.w1[m], f"{m}.b1": self.b1[m],
                        f"{m}.w2": self.w2[m], f"{m}.b2": self.b2[m]})
        return out


def descriptors_for(modalities: Sequence[str], variant: str) -> list[Descriptor]:
    if variant == "separate":
        return [("A", m) for m in modalities] + [("B", m) for m in modalities]
    if variant == "drug-average":
        return [("A", "mean"), ("B", "mean")]
    if variant == "modality-pair":
        return [("pair", m) for m in modalities]
    raise ConfigError(f"unknown pair variant {variant!r}; expected one of {', '.join(VARIANTS)}")


def build_pair_tokens(u_reps: Mapping[str, Tensor], v_reps: Mapping[str, Tensor], variant: str,
                      pair_mlp: PairMLPParams | None = None,
                      modalities: Sequence[str] | None = None) -> TokenSequence:
    """Assemble the token sequence of a pair (or a batch of pairs).

    Representations are (d,) vectors or (N, d) batches keyed by modality; the
    token order follows ``modalities`` (default: ``u_reps`` order), never the
    order of any data file.
    """
    if set(u_reps) != set(v_reps):
        raise DomainError(f"modality sets differ: {sorted(u_reps)} vs {sorted(v_reps)}")
    mods = list(modalities) if modalities is not None else list(u_reps)
    if set(mods) != set(u_reps):
        raise DomainError(f"modality order {mods} does not match representations {sorted(u_reps)}")
    descriptors = descriptors_for(mods, variant)
    axis = u_reps[mods[0]].ndim - 1  # token axis sits before the feature axis
    if variant == "separate":
        rows = [u_reps[m] for m in mods] + [v_reps[m] for m in mods]
    elif variant == "drug-average":
        rows = [
            nk.mean(nk.stack([u_reps[m] for m in mods], axis=0), axis=0),
            nk.mean(nk.stack([v_reps[m] for m in mods], axis=0), axis=0),
        ]
    else:
        if pair_mlp is None:
            raise ConfigError("modality-pair tokens need pair-MLP parameters")
        rows = []
        for m in mods:
            if m not in pair_mlp.w1:
                raise ConfigError(f"no pair MLP for modality {m!r}")
            x = nk.concat([u_reps[m], v_reps[m]], axis=-1)
            hidden = nk.relu(nk.linear(x, pair_mlp.w1[m], pair_mlp.b1[m]))
            rows.append(nk.linear(hidden, pair_mlp.w2[m], pair_mlp.b2[m]))
    return TokenSequence(nk.stack(rows, axis=axis), descriptors, variant)


@dataclass
class TypeEmbeddingTable:
    """One learnable d-vector per descriptor key."""

    keys: list[Descriptor]
    weight: Tensor

    @classmethod
    def init(cls, rng, keys: Sequence[Descriptor], d: int) -> "TypeEmbeddingTable":
        return cls(list(keys), nk.parameter(0.02 * rng.standard_normal((len(keys), d))))

    def rows_for(self, descriptors: Sequence[Descriptor]) -> np.ndarray:
        lookup = {k: i for i, k in enumerate(self.keys)}
        missing = [d for d in descriptors if d not in lookup]
        if missing:
            raise ConfigError(f"type-embedding table has no row for {missing}")
        return np.array([lookup[d] for d in descriptors], dtype=np.int64)


def add_type_embeddings(seq: TokenSequence, table: TypeEmbeddingTable) -> TokenSequence:
    """Row-wise ``H + E_type``; descriptors are unchanged."""
    rows = nk.embedding(table.weight, table.rows_for(seq.descriptors))
    return TokenSequence(nk.add(seq.tokens, rows), list(seq.descriptors), seq.variant)
