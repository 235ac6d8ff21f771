"""Model assembly, focal loss, optimisation loop, prediction and checkpoints."""

from __future__ import annotations

import dataclasses
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numkernel as nk
from .encoders import (GraphEncoderParams, PromptPoolerParams, SemanticProjectorParams,
                       encode_graph_batch, pad_prompts, pool_prompts_batch, project_semantic,
                       substitute_unseen, uniform_init)
from .errors import ConfigError, DomainError, NumericError
from .fusion import (AttentionBlockParams, MoEParams, RoutingRecord, aggregate_experts,
                     attention_block, expert_choice_route, experts_forward, flatten_tokens,
                     gate_scores, modality_contribution)
from .kgdata import MODALITIES, Benchmark, neighbor_table
from .numkernel import KernelRegistry, Tensor
from .tokenizer import (VARIANTS, PairMLPParams, TypeEmbeddingTable, add_type_embeddings,
                        build_pair_tokens, descriptors_for)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
SEMANTIC_MODES = ("replace", "parallel")


@dataclass
class TrainConfig:
    """Training and architecture hyperparameters."""

    epochs: int = 120
    batch_size: int = 1024
    lr: float = 5e-3
    weight_decay: float = 1e-8
    dropout: float = 0.5
    hidden: int = 256
    neighbors: int = 6
    experts: int = 4
    top_k: int = 2
    heads: int = 4
    attn_dropout: float = 0.1
    capacity_factor: float = 1.25
    focal_gamma: float = 2.0
    seed: int = 0
    pair_variant: str = "separate"
    semantic: str = "biorel+molsub"
    semantic_mode: str = "replace"
    layers: int = 1
    ffn_mult: int = 2
    inference_routing: str = "instance"
    substitute_modality: str = "biorel"

    def __post_init__(self):
        positive = ["epochs", "batch_size", "hidden", "neighbors", "experts", "top_k", "heads",
                    "layers", "ffn_mult"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr < 0 or self.weight_decay < 0 or self.focal_gamma < 0:
            raise ConfigError("lr, weight_decay and focal_gamma must be non-negative")
        if self.capacity_factor <= 0:
            raise ConfigError("capacity_factor must be positive")
        if self.top_k > self.experts:
            raise ConfigError(f"top_k={self.top_k} exceeds experts={self.experts}")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} is not divisible by heads={self.heads}")
        for name in ("dropout", "attn_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1)")
        if self.pair_variant not in VARIANTS:
            raise ConfigError(f"pair_variant must be one of {', '.join(VARIANTS)}")
        if self.semantic_mode not in SEMANTIC_MODES:
            raise ConfigError(f"semantic_mode must be one of {', '.join(SEMANTIC_MODES)}")
        if self.inference_routing not in ("instance", "batch"):
            raise ConfigError("inference_routing must be 'instance' or 'batch'")
        bad = [m for m in self.semantic_set if m not in MODALITIES]
        if bad:
            raise ConfigError(f"unknown semantic modalities {bad}; expected names from {', '.join(MODALITIES)}")

    @property
    def semantic_set(self) -> tuple[str, ...]:
        if self.semantic.strip().lower() in ("", "none"):
            return ()
        return tuple(m.strip() for m in self.semantic.split("+"))

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Coerce string values onto field types; unknown keys are errors."""
        base = base or cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(known)}")
        updates = {}
        for key, raw in values.items():
            kind = type(getattr(base, key))
            try:
                if kind is bool:
                    updates[key] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
                else:
                    updates[key] = kind(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: cannot read {raw!r} as {kind.__name__}") from None
        return dataclasses.replace(base, **updates)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- head and loss ----------------------------------------------------------------

@dataclass
class HeadParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng, d_in: int, d: int, n_events: int) -> "HeadParams":
        return cls(nk.parameter(uniform_init(rng, (d_in, d), d_in)), nk.parameter(np.zeros(d)),
                   nk.parameter(uniform_init(rng, (d, n_events), d)), nk.parameter(np.zeros(n_events)))

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def head_logits(fused, head: HeadParams) -> Tensor:
    return nk.linear(nk.relu(nk.linear(fused, head.w1, head.b1)), head.w2, head.b2)


def classify(fused, head: HeadParams) -> Tensor:
    """Event probabilities: softmax over the head logits."""
    return nk.softmax(head_logits(fused, head), axis=-1)


def predicted_labels(probs: np.ndarray) -> np.ndarray:
    """Argmax per row; ties resolve to the lowest class id."""
    return np.asarray(probs).argmax(axis=-1)


def focal_loss(probs, labels, gamma: float = 2.0) -> Tensor:
    """Mean of ``-(1 - p_t)^gamma * log(p_t)``, ``p_t`` clamped to >= 1e-12."""
    probs = nk.as_tensor(probs)
    single = probs.ndim == 1
    if single:
        probs = nk.reshape(probs, (1, probs.shape[0]))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = probs.shape[1]
    if labels.shape[0] != probs.shape[0]:
        raise DomainError(f"{labels.shape[0]} labels for {probs.shape[0]} probability rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DomainError(f"labels must lie in [0, {n_classes})")
    if gamma < 0:
        raise DomainError("focal gamma must be non-negative")
    pt = nk.clamp_min(nk.pick(probs, labels), 1e-12)
    per = nk.power(1.0 - pt, gamma) * nk.log(pt)
    return nk.neg(nk.mean(per))


# -- the model ------------------------------------------------------------------

@dataclass
class ForwardTrace:
    gates: np.ndarray
    selected: np.ndarray
    fallback: np.ndarray
    capacity: int
    selected_counts: np.ndarray
    provenance: np.ndarray
    attention: np.ndarray
    descriptors: list


class AIMModel:
    """Encoders, tokenizer, fusion block, MoE and head for one benchmark.

    ``train_pairs`` restricts the DDI-graph channel to training interactions
    and defines the training-drug set used for unseen-drug substitution.
    """

    def __init__(self, bench: Benchmark, config: TrainConfig, train_pairs: Sequence[int] | None = None):
        self.config = config
        self.bench = bench
        self.drugs = list(bench.drugs)
        self.index = {d: i for i, d in enumerate(self.drugs)}
        self.n_events = bench.dataset.n_events
        pairs = bench.dataset.pairs
        train_ids = list(range(len(pairs))) if train_pairs is None else list(train_pairs)
        self.train_drugs = sorted({d for i in train_ids for d in pairs[i][:2]}, key=self.index.get)

        sem = config.semantic_set
        graph_mods = [m for m in MODALITIES if m in bench.channels]
        if config.semantic_mode == "replace":
            keys = [f"{m}/llm" if m in sem else f"{m}/graph" for m in MODALITIES
                    if m in bench.channels or m in sem]
        else:
            keys = [f"{m}/graph" for m in graph_mods] + [f"{m}/llm" for m in MODALITIES if m in sem]
        missing = [k for k in keys if k.endswith("/graph") and k.split("/")[0] not in bench.channels]
        if missing or not keys:
            raise ConfigError(f"token keys {missing or keys} have no backing channel")
        self.token_keys = keys
        self.graph_mods = [k.split("/")[0] for k in keys if k.endswith("/graph")]
        self.sem_mods = [k.split("/")[0] for k in keys if k.endswith("/llm")]

        allowed = {frozenset(pairs[i][:2]) for i in train_ids}
        self.channels = {}
        for m in self.graph_mods:
            ch = bench.channels[m]
            if m == "ddigraph":
                ch = ch.restricted(lambda h, r, t: frozenset((h, t)) in allowed)
            self.channels[m] = ch
        self.neighbors = {m: neighbor_table(ch, self.drugs, config.neighbors, config.seed)
                          for m, ch in self.channels.items()}
        self.prompt_arrays = {}
        for m in self.sem_mods:
            if m not in bench.prompts.modalities():
                raise ConfigError(f"semantic modality {m!r} has no prompt embeddings")
            self.prompt_arrays[m] = pad_prompts(bench.prompts, self.drugs, m)

        rng = np.random.default_rng(config.seed)
        d = config.hidden
        self.graph = {m: GraphEncoderParams.init(rng, len(self.drugs), len(ch.entity_vocab),
                                                 len(ch.relation_vocab), d, d)
                      for m, ch in self.channels.items()}
        self.pooler = {m: PromptPoolerParams.init(rng, bench.prompts.width(m), d) for m in self.sem_mods}
        self.projector = {m: SemanticProjectorParams.init(rng, bench.prompts.width(m), d) for m in self.sem_mods}
        self.descriptors = descriptors_for(keys, config.pair_variant)
        self.pair_mlp = PairMLPParams.init(rng, keys, d) if config.pair_variant == "modality-pair" else PairMLPParams()
        self.type_table = TypeEmbeddingTable.init(rng, self.descriptors, d)
        self.blocks = [AttentionBlockParams.init(rng, d, config.heads, config.ffn_mult * d, config.attn_dropout)
                       for _ in range(config.layers)]
        length = len(self.descriptors)
        self.moe = MoEParams.init(rng, length * d, config.experts, d, d, config.top_k, config.capacity_factor)
        self.head = HeadParams.init(rng, d, d, self.n_events)

    # -- parameter bookkeeping ----------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for m, p in self.graph.items():
            out.update({f"graph.{m}.{k}": t for k, t in p.tensors().items()})
        for m, p in self.pooler.items():
            out.update({f"pool.{m}.{k}": t for k, t in p.tensors().items()})
        for m, p in self.projector.items():
            out.update({f"proj.{m}.{k}": t for k, t in p.tensors().items()})
        out.update({f"pair.{k}": t for k, t in self.pair_mlp.tensors().items()})
        out["type"] = self.type_table.weight
        for i, b in enumerate(self.blocks):
            out.update({f"block{i}.{k}": t for k, t in b.tensors().items()})
        out.update({f"moe.{k}": t for k, t in self.moe.tensors().items()})
        out.update({f"head.{k}": t for k, t in self.head.tensors().items()})
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for m, p in self.projector.items():
            out[f"proj.{m}.running_mean"] = p.bn.running_mean
            out[f"proj.{m}.running_var"] = p.bn.running_var
        for m, (rel, ent) in self.neighbors.items():
            out[f"neighbors.{m}.rel"] = rel
            out[f"neighbors.{m}.ent"] = ent
        return out

    def set_buffers(self, values: dict[str, np.ndarray]) -> None:
        for m, p in self.projector.items():
            p.bn.running_mean = np.array(values[f"proj.{m}.running_mean"])
            p.bn.running_var = np.array(values[f"proj.{m}.running_var"])
        for m in self.neighbors:
            self.neighbors[m] = (np.array(values[f"neighbors.{m}.rel"]), np.array(values[f"neighbors.{m}.ent"]))

    # -- forward -----------------------------------------------------------------
    def drug_reps(self, first: np.ndarray, second: np.ndarray, registry: KernelRegistry,
                  graph_first: np.ndarray | None = None, graph_second: np.ndarray | None = None):
        """Per-modality (N, d) representations of both drugs of each pair."""
        graph_first = first if graph_first is None else graph_first
        graph_second = second if graph_second is None else graph_second
        reps_first, reps_second = {}, {}
        for key in self.token_keys:
            m, kind = key.split("/")
            if kind == "graph":
                uniq, inv = np.unique(np.concatenate([graph_first, graph_second]), return_inverse=True)
                rel, ent = self.neighbors[m]
                h = encode_graph_batch(uniq, rel[uniq], ent[uniq], self.graph[m])
            else:
                uniq, inv = np.unique(np.concatenate([first, second]), return_inverse=True)
                arr, mask = self.prompt_arrays[m]
                pooled = pool_prompts_batch(arr[uniq], mask[uniq], self.pooler[m])
                h = project_semantic(pooled, self.projector[m], registry.training)
            n = len(first)
            reps_first[key] = nk.embedding(h, inv[:n])
            reps_second[key] = nk.embedding(h, inv[n:])
        return reps_first, reps_second

    def forward(self, first: np.ndarray, second: np.ndarray, registry: KernelRegistry,
                route: np.ndarray | None = None, graph_first: np.ndarray | None = None,
                graph_second: np.ndarray | None = None) -> tuple[Tensor, ForwardTrace]:
        """Event probabilities (N, |R|) for drug index arrays ``first``, ``second``.

        ``route`` freezes the (N, E) expert selection; otherwise experts
        choose over the batch in training (and with batch inference routing),
        or over each instance alone at inference.
        """
        cfg = self.config
        reps_first, reps_second = self.drug_reps(first, second, registry, graph_first, graph_second)
        seq = build_pair_tokens(reps_first, reps_second, cfg.pair_variant, self.pair_mlp, self.token_keys)
        seq = add_type_embeddings(seq, self.type_table)
        attention = None
        for block in self.blocks:
            seq, attention = attention_block(seq, block, registry)
        p = flatten_tokens(seq)
        gates = gate_scores(p, self.moe.gate)
        n, e = gates.shape
        if route is not None:
            selected = np.asarray(route, dtype=bool)
            fallback = np.zeros(n, dtype=bool)
            capacity = -1
            counts = selected.sum(axis=0)
        elif registry.training or cfg.inference_routing == "batch":
            selected, fallback, capacity = expert_choice_route(gates.data, self.moe.top_k, self.moe.capacity_factor)
            counts = (selected & ~fallback[:, None]).sum(axis=0)
        else:
            # expert-choice over a group of one instance: every expert selects it
            capacity = max(1, int(np.ceil(self.moe.top_k * self.moe.capacity_factor / e)))
            selected = np.ones((n, e), dtype=bool)
            fallback = np.zeros(n, dtype=bool)
            counts = np.full(e, n)
        outputs = experts_forward(p, self.moe)
        z, weights = aggregate_experts(outputs, selected, gates)
        z = nk.dropout(z, cfg.dropout, registry)
        probs = classify(z, self.head)
        trace = ForwardTrace(gates.data.copy(), selected, fallback, capacity, counts,
                             weights.data.copy(), attention, list(seq.descriptors))
        return probs, trace

    def pair_indices(self, pair_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        pairs = self.bench.dataset.pairs
        first = np.array([self.index[pairs[i][0]] for i in pair_ids], dtype=np.int64)
        second = np.array([self.index[pairs[i][1]] for i in pair_ids], dtype=np.int64)
        y = np.array([pairs[i][2] for i in pair_ids], dtype=np.int64)
        return first, second, y


# -- optimiser ------------------------------------------------------------------

class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: Sequence[Tensor], lr: float, weight_decay: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.weight_decay = lr, weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        nk.zero_grad(self.params)

    def state(self) -> dict[str, np.ndarray]:
        out = {"t": np.array(self.t)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out


# -- fit / predict --------------------------------------------------------------

@dataclass
class HistoryRow:
    epoch: int
    loss: float
    train_acc: float


@dataclass
class ModelState:
    model: AIMModel
    optimizer: AdamW | None = None
    epoch: int = 0
    history: list[HistoryRow] = field(default_factory=list)


@dataclass
class Prediction:
    pair_ids: np.ndarray
    probs: np.ndarray
    labels: np.ndarray
    record: RoutingRecord | None
    skipped: list[int] = field(default_factory=list)

    @property
    def accuracy(self) -> float:
        if len(self.labels) == 0:
            return float("nan")
        return float(np.mean(predicted_labels(self.probs) == self.labels))


def fit(bench: Benchmark, train_pairs: Sequence[int], config: TrainConfig,
        progress: bool = False) -> ModelState:
    """Train on ``train_pairs`` for ``config.epochs`` shuffled passes."""
    train_pairs = list(train_pairs)
    if not train_pairs:
        raise ConfigError("no training pairs")
    model = AIMModel(bench, config, train_pairs)
    opt = AdamW(model.parameters(), config.lr, config.weight_decay)
    registry = KernelRegistry(config.seed)
    state = ModelState(model, opt)
    u_all, v_all, y_all = model.pair_indices(train_pairs)
    for epoch in range(1, config.epochs + 1):
        registry.train()
        order = np.random.default_rng((config.seed, epoch)).permutation(len(train_pairs))
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            probs, _ = model.forward(u_all[idx], v_all[idx], registry)
            loss = focal_loss(probs, y_all[idx], config.focal_gamma)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += value * len(idx)
            count += len(idx)
        acc = predict(state, train_pairs).accuracy
        state.epoch = epoch
        state.history.append(HistoryRow(epoch, total / count, acc))
        if progress:
            log.info("epoch %d loss %.6f train_acc %.4f", epoch, total / count, acc)
    opt.zero_grad()
    return state


def predict(state: ModelState | AIMModel, pair_ids: Sequence[int], test_adjacency: bool = False,
            batch_size: int | None = None) -> Prediction:
    """Inference-mode probabilities and routing telemetry for dataset pairs.

    Pairs whose drugs cannot be represented (unknown drug, missing prompt
    embeddings) are skipped and listed in ``Prediction.skipped``.  With
    ``test_adjacency`` each drug outside the training set borrows the graph
    inputs of its most similar training drug.
    """
    model = state.model if isinstance(state, ModelState) else state
    cfg = model.config
    pairs = model.bench.dataset.pairs
    prompts = model.bench.prompts
    key_mod = cfg.substitute_modality

    def resolvable(d: str) -> bool:
        if d not in model.index:
            return False
        if any(not prompts.has(d, m) for m in model.sem_mods):
            return False
        return True

    kept, skipped = [], []
    for i in pair_ids:
        u, v, _ = pairs[i]
        (kept if resolvable(u) and resolvable(v) else skipped).append(int(i))
    if test_adjacency:
        ok = [i for i in kept if all(prompts.has(d, key_mod) for d in pairs[i][:2])]
        skipped += [i for i in kept if i not in set(ok)]
        kept = ok
    if skipped:
        log.warning("skipped %d pairs with unresolvable drugs", len(skipped))

    n_events = model.n_events
    if not kept:
        return Prediction(np.zeros(0, dtype=np.int64), np.zeros((0, n_events)), np.zeros(0, dtype=np.int64),
                          None, skipped)
    first, second, y = model.pair_indices(kept)
    graph_first, graph_second = first.copy(), second.copy()
    if test_adjacency:
        train_set = set(model.train_drugs)
        emb: dict[str, np.ndarray] = {}
        donors: dict[str, str] = {}
        for arr in (first, second):
            for j in np.unique(arr):
                d = model.drugs[j]
                if d not in train_set and d not in donors:
                    for c in model.train_drugs + [d]:
                        if c not in emb and prompts.has(c, key_mod):
                            emb[c] = prompts.mean_embedding(c, key_mod)
                    cands = [c for c in model.train_drugs if c in emb]
                    donors[d] = substitute_unseen(d, cands, emb, model.index)
        graph_first = np.array([model.index[donors.get(model.drugs[j], model.drugs[j])] for j in first])
        graph_second = np.array([model.index[donors.get(model.drugs[j], model.drugs[j])] for j in second])

    registry = KernelRegistry(cfg.seed, training=False)
    bs = batch_size or cfg.batch_size
    probs, records = [], []
    for start in range(0, len(kept), bs):
        sl = slice(start, start + bs)
        out, trace = model.forward(first[sl], second[sl], registry,
                                   graph_first=graph_first[sl], graph_second=graph_second[sl])
        probs.append(out.data)
        contrib, _ = modality_contribution(trace.attention, trace.descriptors)
        records.append(RoutingRecord(np.array(kept[sl]), trace.gates, trace.selected, trace.fallback,
                                     trace.provenance, trace.capacity, trace.selected_counts,
                                     contrib, trace.descriptors))
    return Prediction(np.array(kept), np.concatenate(probs), y, RoutingRecord.concat(records), skipped)


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(state: ModelState, path) -> None:
    """Versioned ``.npz`` container: named parameter blocks, buffers, config echo."""
    model = state.model
    blobs = {f"param/{k}": t.data for k, t in model.named_parameters().items()}
    blobs.update({f"buffer/{k}": v for k, v in model.buffers().items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "drugs": model.drugs,
        "train_drugs": model.train_drugs,
        "epoch": state.epoch,
        "history": [dataclasses.asdict(h) for h in state.history],
    }
    blobs["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    # np.savez stamps wall-clock times into the archive; fixed entry dates keep files byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in blobs.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


def load_checkpoint(path, bench: Benchmark) -> ModelState:
    with np.load(path) as npz:
        meta = json.loads(npz["meta"].tobytes().decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"checkpoint version {meta.get('version')} is not supported")
        config = TrainConfig(**meta["config"])
        if list(bench.drugs) != meta["drugs"]:
            raise ConfigError("checkpoint drug list does not match the benchmark")
        model = AIMModel(bench, config)
        model.train_drugs = list(meta["train_drugs"])
        params = model.named_parameters()
        for k, t in params.items():
            arr = npz[f"param/{k}"]
            if arr.shape != t.shape:
                raise ConfigError(f"checkpoint block {k} has shape {arr.shape}, model expects {t.shape}")
            t.data[...] = arr
        model.set_buffers({k[len("buffer/"):]: npz[k] for k in npz.files if k.startswith("buffer/")})
    history = [HistoryRow(**h) for h in meta["history"]]
    return ModelState(model, None, meta["epoch"], history)


def write_history(history: Sequence[HistoryRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,loss,train_acc\n")
        for h in history:
            fh.write(f"{h.epoch},{h.loss!r},{h.train_acc!r}\n")


def read_history(path) -> list[HistoryRow]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            e, loss, acc = line.strip().split(",")
            rows.append(HistoryRow(int(e), float(loss), float(acc)))
    return rows


__all__ = [
    "TrainConfig", "HeadParams", "AIMModel", "AdamW", "ModelState", "HistoryRow", "Prediction",
    "classify", "focal_loss", "fit", "predict", "save_checkpoint", "load_checkpoint",
    "write_history", "read_history", "predicted_labels",
]
