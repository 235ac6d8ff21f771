"""Token fusion: one transformer encoder block, flatten, expert-choice MoE.

Routing is a discrete decision taken on detached gate values; the gate
values that weight the expert outputs stay on the gradient path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .encoders import uniform_init
from .errors import ConfigError, ShapeError
from .numkernel import KernelRegistry, Tensor
from .tokenizer import Descriptor, TokenSequence


# -- attention block ------------------------------------------------------------

@dataclass
class AttentionBlockParams:
    heads: int
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    attn_dropout: float = 0.0

    @classmethod
    def init(cls, rng, d: int, heads: int, d_ff: int, attn_dropout: float = 0.0) -> "AttentionBlockParams":
        if d % heads:
            raise ConfigError(f"hidden width {d} is not divisible by {heads} heads")
        if not 0.0 <= attn_dropout < 1.0:
            raise ConfigError(f"attention dropout must lie in [0, 1), got {attn_dropout}")

        def w(a, b):
            return nk.parameter(uniform_init(rng, (a, b), a))

        def zeros(n):
            return nk.parameter(np.zeros(n))

        def ones(n):
            return nk.parameter(np.ones(n))

        return cls(heads, w(d, d), zeros(d), w(d, d), zeros(d), w(d, d), zeros(d), w(d, d), zeros(d),
                   ones(d), zeros(d), w(d, d_ff), zeros(d_ff), w(d_ff, d), zeros(d), ones(d), zeros(d),
                   attn_dropout)

    def tensors(self) -> dict[str, Tensor]:
        names = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gain", "ln1_bias",
                 "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln2_gain", "ln2_bias"]
        return {n: getattr(self, n) for n in names}


def attention_block(seq: TokenSequence, params: AttentionBlockParams,
                    registry: KernelRegistry | None = None) -> tuple[TokenSequence, np.ndarray]:
    """``A = LN(H + MHA(H,H,H))``, ``B = LN(A + FFN(A))``.

    Returns the output sequence and the per-head attention weights, shape
    (N, heads, L, L) (leading N dropped for unbatched input), taken before
    attention dropout.
    """
    registry = registry or KernelRegistry(training=False)
    x = seq.tokens
    single = x.ndim == 2
    if single:
        x = nk.reshape(x, (1,) + x.shape)
    if x.ndim != 3:
        raise ShapeError(f"attention_block expects (L, d) or (N, L, d) tokens, got {seq.tokens.shape}")
    n, length, d = x.shape
    h = params.heads
    if length < 1 or d % h:
        raise ShapeError(f"attention_block: L={length}, d={d} with {h} heads")
    if params.wq.shape != (d, d):
        raise ShapeError(f"attention_block: projections are {params.wq.shape}, tokens have width {d}")
    dh = d // h

    def split_heads(t: Tensor) -> Tensor:
        return nk.transpose(nk.reshape(t, (n, length, h, dh)), (0, 2, 1, 3))   # (n, h, L, dh)

    q = split_heads(nk.linear(x, params.wq, params.bq))
    k = split_heads(nk.linear(x, params.wk, params.bk))
    v = split_heads(nk.linear(x, params.wv, params.bv))
    scores = nk.matmul(q, nk.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    attn = nk.softmax(scores, axis=-1)
    weights = attn.data.copy()
    mixed = nk.matmul(nk.dropout(attn, params.attn_dropout, registry), v)          # (n, h, L, dh)
    merged = nk.reshape(nk.transpose(mixed, (0, 2, 1, 3)), (n, length, d))
    a = nk.layer_norm(x + nk.linear(merged, params.wo, params.bo), params.ln1_gain, params.ln1_bias)
    ffn = nk.linear(nk.relu(nk.linear(a, params.ffn_w1, params.ffn_b1)), params.ffn_w2, params.ffn_b2)
    b = nk.layer_norm(a + ffn, params.ln2_gain, params.ln2_bias)
    if single:
        b = nk.reshape(b, (length, d))
        weights = weights[0]
    return TokenSequence(b, list(seq.descriptors), seq.variant), weights


def flatten_tokens(seq: TokenSequence) -> Tensor:
    """Row-major concatenation of the tokens: (L, d) -> (L*d,), (N, L, d) -> (N, L*d)."""
    t = seq.tokens
    return nk.flatten(t, start_axis=0 if t.ndim == 2 else 1)


# -- mixture of experts ---------------------------------------------------------

@dataclass
class MoEParams:
    gate: Tensor   # (L*d, E)
    w1: Tensor     # (E, L*d, hidden)
    b1: Tensor     # (E, 1, hidden)
    w2: Tensor     # (E, hidden, out)
    b2: Tensor     # (E, 1, out)
    top_k: int = 2
    capacity_factor: float = 1.25

    def __post_init__(self):
        e = self.n_experts
        if e < 1 or not 1 <= self.top_k <= e or self.capacity_factor <= 0:
            raise ConfigError(f"invalid MoE setup: E={e}, k={self.top_k}, c={self.capacity_factor}")

    @property
    def n_experts(self) -> int:
        return self.gate.shape[1]

    @classmethod
    def init(cls, rng, in_dim: int, n_experts: int, hidden: int, out: int,
             top_k: int = 2, capacity_factor: float = 1.25) -> "MoEParams":
        return cls(
            nk.parameter(uniform_init(rng, (in_dim, n_experts), in_dim)),
            nk.parameter(uniform_init(rng, (n_experts, in_dim, hidden), in_dim)),
            nk.parameter(np.zeros((n_experts, 1, hidden))),
            nk.parameter(uniform_init(rng, (n_experts, hidden, out), hidden)),
            nk.parameter(np.zeros((n_experts, 1, out))),
            top_k, capacity_factor,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"gate": self.gate, "w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def gate_scores(flat, gate: Tensor) -> Tensor:
    """Softmax of ``flat @ gate`` over experts."""
    return nk.softmax(nk.matmul(flat, gate), axis=-1)


def expert_capacity(n: int, n_experts: int, top_k: int, capacity_factor: float) -> int:
    return int(math.ceil(top_k * n * capacity_factor / n_experts))


def expert_choice_route(gates: np.ndarray, top_k: int, capacity_factor: float):
    """Each expert picks its ``capacity`` highest-gate instances.

    Returns ``(selected, fallback, capacity)``: ``selected`` is an (N, E)
    boolean matrix after fallback, ``fallback`` flags instances no expert
    chose (they are handed to their argmax-gate expert over capacity).
    Ties prefer the lower instance index.
    """
    gates = np.asarray(gates, dtype=np.float64)
    n, e = gates.shape
    capacity = expert_capacity(n, e, top_k, capacity_factor)
    take = min(capacity, n)
    selected = np.zeros((n, e), dtype=bool)
    for j in range(e):
        order = np.lexsort((np.arange(n), -gates[:, j]))
        selected[order[:take], j] = True
    fallback = ~selected.any(axis=1)
    if fallback.any():
        rows = np.flatnonzero(fallback)
        selected[rows, gates[rows].argmax(axis=1)] = True
    return selected, fallback, capacity


def expert_forward(flat, params: MoEParams, expert: int) -> Tensor:
    """Two-layer ReLU transform for one expert; ``flat`` is (L*d,) or (N, L*d)."""
    w1 = params.w1[expert]
    b1 = nk.reshape(params.b1[expert], (params.b1.shape[2],))
    w2 = params.w2[expert]
    b2 = nk.reshape(params.b2[expert], (params.b2.shape[2],))
    return nk.linear(nk.relu(nk.linear(flat, w1, b1)), w2, b2)


def experts_forward(flat: Tensor, params: MoEParams) -> Tensor:
    """All expert outputs at once: (N, L*d) -> (N, E, out)."""
    hidden = nk.relu(nk.matmul(flat, params.w1) + params.b1)          # (E, N, hidden)
    out = nk.matmul(hidden, params.w2) + params.b2                  # (E, N, out)
    return nk.transpose(out, (1, 0, 2))


def aggregate_experts(outputs: Tensor, selected: np.ndarray, gates: Tensor) -> tuple[Tensor, Tensor]:
    """Gate-weighted mean of the selecting experts' outputs.

    ``z_i = sum_{e in S_i} g_ie f_e(p_i) / sum_{e in S_i} g_ie``.  Returns ``z``
    (N, out) and the normalised provenance weights (N, E).
    """
    mask = np.asarray(selected, dtype=np.float64)
    if not np.all(mask.any(axis=1)):
        raise ConfigError("every instance needs at least one selecting expert")
    masked = nk.mul(gates, mask)
    weights = nk.div(masked, nk.sum(masked, axis=1, keepdims=True))
    z = nk.sum(nk.reshape(weights, weights.shape + (1,)) * outputs, axis=1)
    return z, weights


# -- telemetry ------------------------------------------------------------------

def modality_contribution(attention: np.ndarray, descriptors: Sequence[Descriptor]):
    """Attention mass each token receives, averaged over heads and queries.

    ``attention`` is (N, heads, L, L) or (heads, L, L).  Returns the per-token
    scores (rows sum to 1) and a dict of per-modality scores (sums of the
    modality's tokens).
    """
    att = np.asarray(attention, dtype=np.float64)
    tokens = att.mean(axis=(-3, -2))
    groups: dict[str, list[int]] = {}
    for i, (_, mod) in enumerate(descriptors):
        groups.setdefault(mod, []).append(i)
    per_modality = {m: tokens[..., idx].sum(axis=-1) for m, idx in groups.items()}
    return tokens, per_modality


@dataclass
class RoutingRecord:
    """Routing telemetry for one batch of instances."""

    instance_ids: np.ndarray
    gates: np.ndarray          # (N, E)
    selected: np.ndarray       # (N, E) after fallback
    fallback: np.ndarray       # (N,)
    provenance: np.ndarray     # (N, E), rows sum to 1 over the selectors
    capacity: int
    selected_counts: np.ndarray  # (E,) selections before fallback
    contributions: np.ndarray | None = None   # (N, L)
    descriptors: list[Descriptor] = field(default_factory=list)

    @property
    def assigned(self) -> np.ndarray:
        """Argmax-gate expert among each instance's selectors."""
        masked = np.where(self.selected, self.gates, -np.inf)
        return masked.argmax(axis=1)

    def assigned_counts(self) -> np.ndarray:
        return np.bincount(self.assigned, minlength=self.gates.shape[1])

    @classmethod
    def concat(cls, records: Sequence["RoutingRecord"]) -> "RoutingRecord":
        if not records:
            raise ValueError("no routing records to concatenate")
        contrib = None
        if all(r.contributions is not None for r in records):
            contrib = np.concatenate([r.contributions for r in records])
        return cls(
            np.concatenate([r.instance_ids for r in records]),
            np.concatenate([r.gates for r in records]),
            np.concatenate([r.selected for r in records]),
            np.concatenate([r.fallback for r in records]),
            np.concatenate([r.provenance for r in records]),
            max(r.capacity for r in records),
            np.sum([r.selected_counts for r in records], axis=0),
            contrib,
            list(records[0].descriptors),
        )


def _fmt(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def export_routing(record: RoutingRecord, path) -> None:
    """TSV: id, assigned expert, gates, selector set, per-token contributions."""
    assigned = record.assigned
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for i in range(len(record.instance_ids)):
            sel = ",".join(str(e) for e in np.flatnonzero(record.selected[i]))
            contrib = _fmt(record.contributions[i]) if record.contributions is not None else ""
            fh.write(f"{record.instance_ids[i]}\t{assigned[i]}\t{_fmt(record.gates[i])}\t{sel}\t{contrib}\n")


@dataclass
class TelemetryRow:
    instance_id: int
    assigned: int
    gates: np.ndarray
    selectors: list[int]
    contributions: np.ndarray


def read_routing(path) -> list[TelemetryRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            iid, assigned, gates, sel, contrib = line.split("\t")
            rows.append(TelemetryRow(
                int(iid), int(assigned),
                np.array([float(x) for x in gates.split(",")]),
                [int(x) for x in sel.split(",") if x],
                np.array([float(x) for x in contrib.split(",")]) if contrib else np.zeros(0),
            ))
    return rows
