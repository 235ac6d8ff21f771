"""Per-drug modality encoders.

Graph channels aggregate a fixed sample of (relation, entity) neighbours with
relation-aware attention and project ``[drug || aggregate]`` to the hidden
width.  Semantic channels attention-pool a drug's prompt embeddings and
project the pooled vector through batch norm and ReLU.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import numkernel as nk
from .errors import DomainError, ShapeError
from .kgdata import PromptEmbeddingSet, TripleChannel
from .numkernel import Tensor

PROMPT_TEMPLATES = {
    "identity": "A drug is [DRUG].",
    "biorel": "A drug is associated with target gene [GENE].",
    "molsub": "A drug includes molecular substructure [SUBSTRUCTURE].",
    "ddigraph": "A drug has interaction [RELATION] with drug [DRUG].",
}

_MASKED = -1e30


def uniform_init(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape)


# -- graph channels -------------------------------------------------------------

@dataclass
class GraphEncoderParams:
    drug: Tensor       # (n_drugs, d_emb)
    entity: Tensor     # (n_entities, d_emb)
    relation: Tensor   # (n_relations + 1, d_emb); last row is the self relation
    proj: Tensor       # (2 * d_emb, d)

    @classmethod
    def init(cls, rng, n_drugs: int, n_entities: int, n_relations: int, d_emb: int, d: int):
        return cls(
            nk.parameter(uniform_init(rng, (n_drugs, d_emb), d_emb)),
            nk.parameter(uniform_init(rng, (max(n_entities, 1), d_emb), d_emb)),
            nk.parameter(uniform_init(rng, (n_relations + 1, d_emb), d_emb)),
            nk.parameter(uniform_init(rng, (2 * d_emb, d), 2 * d_emb)),
        )

    def tensors(self) -> dict[str, Tensor]:
        return {"drug": self.drug, "entity": self.entity, "relation": self.relation, "proj": self.proj}


def encode_graph_batch(drug_ids: np.ndarray, rel_ids: np.ndarray, ent_ids: np.ndarray,
                       params: GraphEncoderParams, return_attention: bool = False):
    """Encode ``n`` drugs from their sampled neighbours.

    ``rel_ids``/``ent_ids`` are (n, S) with ``-1`` marking the self pair,
    which reads the reserved relation row and the drug's own embedding.
    Attention score: ``d_u . (e_a + r_a) / sqrt(d_emb)`` softmaxed over the S
    samples.
    """
    drug_ids = np.asarray(drug_ids, dtype=np.int64)
    rel_ids = np.asarray(rel_ids, dtype=np.int64)
    ent_ids = np.asarray(ent_ids, dtype=np.int64)
    if rel_ids.shape != ent_ids.shape or rel_ids.shape[0] != drug_ids.shape[0] or rel_ids.shape[1] < 1:
        raise ShapeError(f"neighbour tables {rel_ids.shape}/{ent_ids.shape} do not match {drug_ids.shape[0]} drugs")
    d_emb = params.drug.shape[1]
    if params.proj.shape[0] != 2 * d_emb:
        raise ShapeError(f"projection expects {params.proj.shape[0]} inputs, drug||aggregate has {2 * d_emb}")
    n_ent = params.entity.shape[0]
    n_rel = params.relation.shape[0] - 1

    du = nk.embedding(params.drug, drug_ids)                                    # (n, de)
    table = nk.concat([params.entity, params.drug], axis=0)
    ent_full = np.where(ent_ids < 0, n_ent + drug_ids[:, None], ent_ids)
    rel_full = np.where(rel_ids < 0, n_rel, rel_ids)
    e = nk.embedding(table, ent_full)                                           # (n, S, de)
    r = nk.embedding(params.relation, rel_full)                                 # (n, S, de)
    scores = nk.sum(nk.reshape(du, (du.shape[0], 1, d_emb)) * (e + r), axis=-1) * (1.0 / np.sqrt(d_emb))
    alpha = nk.softmax(scores, axis=-1)                                         # (n, S)
    agg = nk.sum(nk.reshape(alpha, alpha.shape + (1,)) * e, axis=1)             # (n, de)
    h = nk.matmul(nk.concat([du, agg], axis=-1), params.proj)
    return (h, alpha) if return_attention else h


def encode_graph_drug(channel: TripleChannel, drug: str, neighbors: Sequence[tuple[int, int]],
                      params: GraphEncoderParams) -> Tensor:
    """Single-drug form of :func:`encode_graph_batch`; returns a (d,) vector."""
    if not neighbors:
        raise DomainError("encode_graph_drug needs at least one sampled neighbour")
    did = np.array([channel.drug_id(drug)])
    rel = np.array([[r for r, _ in neighbors]])
    ent = np.array([[e for _, e in neighbors]])
    return nk.reshape(encode_graph_batch(did, rel, ent, params), (params.proj.shape[1],))


# -- prompt pooling -------------------------------------------------------------

@dataclass
class PromptPoolerParams:
    att: Tensor    # (d_lm, d_att)
    query: Tensor  # (d_att,)

    @classmethod
    def init(cls, rng, d_lm: int, d_att: int):
        return cls(nk.parameter(uniform_init(rng, (d_lm, d_att), d_lm)),
                   nk.parameter(uniform_init(rng, (d_att,), d_att)))

    def tensors(self) -> dict[str, Tensor]:
        return {"att": self.att, "query": self.query}


def pool_prompts_batch(prompts: np.ndarray, mask: np.ndarray, params: PromptPoolerParams,
                       return_attention: bool = False):
    """Attention-pool padded prompts.

    ``prompts`` is (n, K, d_lm) zero-padded; ``mask`` is (n, K) True on real
    prompts.  ``a_k = q . tanh(W e_k)``, ``alpha = softmax(a)``,
    ``s = sum_k alpha_k e_k``.
    """
    if not np.all(mask.any(axis=1)):
        raise DomainError("every drug needs at least one prompt")
    e = nk.as_tensor(prompts)
    scores = nk.matmul(nk.tanh(nk.matmul(e, params.att)), params.query)        # (n, K)
    scores = scores + np.where(mask, 0.0, _MASKED)
    alpha = nk.softmax(scores, axis=-1)
    s = nk.sum(nk.reshape(alpha, alpha.shape + (1,)) * e, axis=1)
    return (s, alpha) if return_attention else s


def pool_prompts(prompts: Sequence[np.ndarray], params: PromptPoolerParams) -> Tensor:
    """Pool one drug's prompt vectors into a single (d_lm,) vector."""
    if len(prompts) == 0:
        raise DomainError("pool_prompts needs at least one prompt")
    arr = np.stack([np.asarray(p, dtype=np.float64) for p in prompts])[None]
    s = pool_prompts_batch(arr, np.ones(arr.shape[:2], dtype=bool), params)
    return nk.reshape(s, (arr.shape[2],))


def pad_prompts(prompts: PromptEmbeddingSet, drugs: Sequence[str], modality: str):
    """Zero-padded (n, Kmax, d_lm) array and mask for ``drugs`` under ``modality``."""
    width = prompts.width(modality)
    lists = [prompts.get(d, modality) if prompts.has(d, modality) else np.zeros((0, width)) for d in drugs]
    kmax = max(1, max(len(x) for x in lists))
    arr = np.zeros((len(drugs), kmax, width))
    mask = np.zeros((len(drugs), kmax), dtype=bool)
    for i, x in enumerate(lists):
        arr[i, : len(x)] = x
        mask[i, : len(x)] = True
    return arr, mask


# -- semantic projection --------------------------------------------------------

@dataclass
class SemanticProjectorParams:
    weight: Tensor   # (d_lm, d)
    gain: Tensor     # (d,)
    bias: Tensor     # (d,)
    bn: nk.BatchNormState

    @classmethod
    def init(cls, rng, d_lm: int, d: int):
        return cls(nk.parameter(uniform_init(rng, (d_lm, d), d_lm)),
                   nk.parameter(np.ones(d)), nk.parameter(np.zeros(d)),
                   nk.BatchNormState.fresh(d))

    def tensors(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "gain": self.gain, "bias": self.bias}


def project_semantic(pooled, params: SemanticProjectorParams, training: bool) -> Tensor:
    """ReLU of batch-normalised ``pooled @ weight``; ``pooled`` is (n, d_lm) or (d_lm,)."""
    pooled = nk.as_tensor(pooled)
    single = pooled.ndim == 1
    x = nk.reshape(pooled, (1, pooled.shape[0])) if single else pooled
    h = nk.relu(nk.batch_norm(nk.matmul(x, params.weight), params.gain, params.bias, params.bn, training))
    return nk.reshape(h, (h.shape[1],)) if single else h


# -- unseen-drug substitution ---------------------------------------------------

def substitute_unseen(drug: str, train_drugs: Sequence[str], embeddings: Mapping[str, np.ndarray],
                      drug_order: Mapping[str, int] | None = None) -> str:
    """Training drug with the highest cosine similarity to ``drug``.

    A drug already in ``train_drugs`` maps to itself.  Ties go to the lowest
    drug id (``drug_order`` rank, or the name when no order is given).
    """
    if not train_drugs:
        raise DomainError("substitute_unseen needs a non-empty training set")
    train_set = set(train_drugs)
    if drug in train_set:
        return drug
    q = np.asarray(embeddings[drug], dtype=np.float64)
    qn = np.linalg.norm(q)
    rank = (lambda d: drug_order[d]) if drug_order is not None else (lambda d: d)
    best, best_sim = None, -np.inf
    for cand in sorted(train_set, key=rank):
        c = np.asarray(embeddings[cand], dtype=np.float64)
        denom = qn * np.linalg.norm(c)
        sim = float(q @ c / denom) if denom > 0 else 0.0
        if sim > best_sim:
            best, best_sim = cand, sim
    return best


# -- prompt text export ---------------------------------------------------------

def prompt_texts(channels: Mapping[str, TripleChannel], drugs: Sequence[str]) -> list[tuple[str, str, int, str]]:
    """(drug, modality, prompt_index, text) rows.

    Index 0 of every (drug, modality) is the identity prompt; the rest follow
    the channel's triples in file order, matching the layout of synthetic
    prompt embeddings.
    """
    rows = []
    for mod, ch in channels.items():
        template = PROMPT_TEMPLATES.get(mod)
        for d in drugs:
            rows.append((d, mod, 0, PROMPT_TEMPLATES["identity"].replace("[DRUG]", d)))
            if not ch.has_drug(d) or template is None:
                continue
            for k, (r, t) in enumerate(ch.neighbors(d), start=1):
                ent, rel = ch.entity_vocab[t], ch.relation_vocab[r]
                text = (template.replace("[GENE]", ent).replace("[SUBSTRUCTURE]", ent)
                        .replace("[RELATION]", rel).replace("[DRUG]", ent))
                rows.append((d, mod, k, text))
    return rows


def write_prompt_texts(channels: Mapping[str, TripleChannel], drugs: Sequence[str], path) -> int:
    rows = prompt_texts(channels, drugs)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d, mod, k, text in rows:
            fh.write(f"{d}\t{mod}\t{k}\t{text}\n")
    return len(rows)
