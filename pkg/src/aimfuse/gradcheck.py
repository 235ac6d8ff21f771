"""Registry of finite-difference gradient checks over every differentiable component.

Each case builds a scalar function of fresh leaf tensors.  Kernel ops are
read out through a fixed random projection so that every output coordinate
contributes an O(1) gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numkernel as nk
from .encoders import (GraphEncoderParams, PromptPoolerParams, SemanticProjectorParams,
                       encode_graph_batch, pool_prompts_batch, project_semantic)
from .fusion import (AttentionBlockParams, MoEParams, aggregate_experts, attention_block,
                     expert_choice_route, experts_forward, flatten_tokens, gate_scores)
from .kgdata import SyntheticConfig, generate_synthetic
from .numkernel import KernelRegistry, Tensor
from .tokenizer import PairMLPParams, TokenSequence, TypeEmbeddingTable, add_type_embeddings, build_pair_tokens
from .trainer import AIMModel, TrainConfig, focal_loss

TOLERANCE = 1e-4

Builder = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    component: str
    build: Builder
    points: int = 10
    max_coords: int | None = None
    eps: float = 1e-6


@dataclass(frozen=True)
class CaseResult:
    name: str
    component: str
    max_rel_error: float
    checked: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


_REGISTRY: dict[str, GradCase] = {}


def register_case(case: GradCase) -> GradCase:
    if case.name in _REGISTRY:
        raise ValueError(f"gradient case {case.name!r} is already registered")
    _REGISTRY[case.name] = case
    return case


def unregister_case(name: str) -> None:
    _REGISTRY.pop(name, None)


def registered_cases() -> list[GradCase]:
    return list(_REGISTRY.values())


def _checkable(named: dict[str, Tensor]) -> list[Tensor]:
    # the key bias shifts every score of a query row equally, so softmax cancels it and its
    # gradient is identically zero; finite differences there measure only rounding noise
    return [t for name, t in named.items() if not name.endswith("bk")]


def _readout(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = rng.standard_normal(out.shape)
    return lambda t: nk.sum(nk.mul(t, weights))


def _op_case(name: str, shapes, op, positive: bool = False, component: str = "kernel"):
    def build(rng):
        leaves = []
        for s in shapes:
            x = rng.uniform(0.5, 2.0, size=s) if positive else rng.standard_normal(s)
            leaves.append(nk.parameter(x))
        read = _readout(op(*leaves), rng)
        return (lambda: read(op(*leaves))), leaves
    return register_case(GradCase(name, component, build))


def _away_from_kink(shape, rng):
    # keep relu/clamp inputs out of the finite-difference window around 0
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < 0.05, 0.5, x)


def _register_kernel_cases() -> None:
    _op_case("add", [(3, 4), (4,)], nk.add)
    _op_case("sub", [(3, 4), (3, 1)], nk.sub)
    _op_case("mul", [(3, 4), (3, 4)], nk.mul)
    _op_case("div", [(3, 4), (3, 4)], nk.div, positive=True)
    _op_case("neg", [(5,)], nk.neg)
    _op_case("matmul", [(3, 4), (4, 2)], nk.matmul)
    _op_case("matmul_batched", [(2, 3, 4), (2, 4, 5)], nk.matmul)
    _op_case("linear", [(3, 4), (4, 5), (5,)], nk.linear)
    _op_case("tanh", [(3, 4)], nk.tanh)
    _op_case("sigmoid", [(3, 4)], nk.sigmoid)
    _op_case("exp", [(3, 4)], nk.exp)
    _op_case("log", [(3, 4)], nk.log, positive=True)
    _op_case("power", [(3, 4)], lambda a: nk.power(a, 2.5), positive=True)
    _op_case("softmax", [(3, 5)], lambda a: nk.softmax(a, axis=-1))
    _op_case("softmax_axis0", [(4, 3)], lambda a: nk.softmax(a, axis=0))
    _op_case("sum", [(3, 4)], lambda a: nk.sum(a, axis=1, keepdims=True))
    _op_case("mean", [(3, 4)], lambda a: nk.mean(a, axis=0))
    _op_case("layer_norm", [(3, 6), (6,), (6,)], nk.layer_norm)
    _op_case("batch_norm", [(5, 4), (4,), (4,)],
             lambda x, g, b: nk.batch_norm(x, g, b, nk.BatchNormState.fresh(4), training=True))
    _op_case("batch_norm_inference", [(5, 4), (4,), (4,)],
             lambda x, g, b: nk.batch_norm(x, g, b, nk.BatchNormState(np.full(4, 0.3), np.full(4, 1.7)),
                                           training=False))
    _op_case("reshape", [(3, 4)], lambda a: nk.reshape(a, (2, 6)))
    _op_case("flatten", [(2, 3, 4)], lambda a: nk.flatten(a, start_axis=1))
    _op_case("transpose", [(2, 3, 4)], lambda a: nk.transpose(a, (2, 0, 1)))
    _op_case("concat", [(2, 3), (2, 4)], lambda a, b: nk.concat([a, b], axis=1))
    _op_case("stack", [(2, 3), (2, 3)], lambda a, b: nk.stack([a, b], axis=1))
    _op_case("index", [(5, 3)], lambda a: nk.index(a, np.array([0, 2, 2, 4])))
    _op_case("embedding", [(6, 3)], lambda a: nk.embedding(a, np.array([[1, 1], [5, 0]])))
    _op_case("pick", [(4, 5)], lambda a: nk.pick(a, np.array([0, 4, 2, 2])))

    def kinked(name, op):
        def build(rng):
            x = nk.parameter(_away_from_kink((3, 4), rng))
            read = _readout(op(x), rng)
            return (lambda: read(op(x))), [x]
        register_case(GradCase(name, "kernel", build))

    kinked("relu", nk.relu)
    kinked("clamp_min", lambda a: nk.clamp_min(a, 0.0))

    def dropout_build(rng):
        x = nk.parameter(rng.standard_normal((4, 5)))
        seed = int(rng.integers(2**31))

        def f():
            return nk.dropout(x, 0.3, KernelRegistry(seed, training=True))
        read = _readout(f(), rng)
        return (lambda: read(f())), [x]

    register_case(GradCase("dropout", "kernel", dropout_build))


def _register_module_cases() -> None:
    def graph_build(rng):
        p = GraphEncoderParams.init(rng, 5, 7, 3, 4, 6)
        drugs = np.array([0, 3, 4])
        rel = rng.integers(-1, 3, size=(3, 4))
        ent = np.where(rel < 0, -1, rng.integers(0, 7, size=(3, 4)))
        leaves = list(p.tensors().values())
        read = _readout(encode_graph_batch(drugs, rel, ent, p), rng)
        return (lambda: read(encode_graph_batch(drugs, rel, ent, p))), leaves

    def pool_build(rng):
        p = PromptPoolerParams.init(rng, 5, 4)
        prompts = nk.parameter(rng.standard_normal((3, 4, 5)))
        mask = np.array([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 1, 1]], dtype=bool)
        leaves = [prompts] + list(p.tensors().values())

        def f():
            return pool_prompts_batch(prompts, mask, p)
        read = _readout(f(), rng)
        return (lambda: read(f())), leaves

    def project_build(rng):
        p = SemanticProjectorParams.init(rng, 5, 4)
        s = nk.parameter(rng.standard_normal((6, 5)))
        leaves = [s] + list(p.tensors().values())
        read = _readout(project_semantic(s, p, training=True), rng)
        return (lambda: read(project_semantic(s, p, training=True))), leaves

    def pair_tokens_build(rng):
        mods = ["biorel", "molsub", "ddigraph"]
        u = {m: nk.parameter(rng.standard_normal((2, 4))) for m in mods}
        v = {m: nk.parameter(rng.standard_normal((2, 4))) for m in mods}
        mlp = PairMLPParams.init(rng, mods, 4)
        leaves = list(u.values()) + list(v.values()) + list(mlp.tensors().values())

        def f():
            parts = [build_pair_tokens(u, v, variant, mlp, mods).tokens
                     for variant in ("separate", "drug-average", "modality-pair")]
            return nk.concat(parts, axis=1)
        read = _readout(f(), rng)
        return (lambda: read(f())), leaves

    def type_build(rng):
        desc = [("A", "x"), ("B", "x")]
        table = TypeEmbeddingTable.init(rng, desc, 4)
        h = nk.parameter(rng.standard_normal((3, 2, 4)))

        def f():
            return add_type_embeddings(TokenSequence(h, desc, "separate"), table).tokens
        read = _readout(f(), rng)
        return (lambda: read(f())), [h, table.weight]

    def attention_build(rng):
        params = AttentionBlockParams.init(rng, 8, 2, 16, attn_dropout=0.0)
        h = nk.parameter(rng.standard_normal((3, 4, 8)))
        leaves = [h] + _checkable(params.tensors())

        def f():
            return attention_block(TokenSequence(h, [("A", str(i)) for i in range(4)], "separate"), params)[0].tokens
        read = _readout(f(), rng)
        return (lambda: read(f())), leaves

    def moe_build(rng):
        moe = MoEParams.init(rng, 12, 4, 6, 5)
        p = nk.parameter(rng.standard_normal((6, 12)))
        route, _, _ = expert_choice_route(gate_scores(p, moe.gate).data, 2, 1.25)
        leaves = [p] + list(moe.tensors().values())

        def f():
            z, _ = aggregate_experts(experts_forward(p, moe), route, gate_scores(p, moe.gate))
            return z
        read = _readout(f(), rng)
        return (lambda: read(f())), leaves

    def flatten_gate_build(rng):
        h = nk.parameter(rng.standard_normal((3, 4, 2)))
        gate = nk.parameter(rng.standard_normal((8, 3)))

        def f():
            return gate_scores(flatten_tokens(TokenSequence(h, [("A", str(i)) for i in range(4)], "x")), gate)
        read = _readout(f(), rng)
        return (lambda: read(f())), [h, gate]

    def focal_build(rng):
        logits = nk.parameter(rng.standard_normal((5, 4)))
        labels = rng.integers(0, 4, size=5)
        gamma = float(rng.choice([0.0, 1.0, 2.0, 3.5]))
        return (lambda: focal_loss(nk.softmax(logits, axis=-1), labels, gamma)), [logits]

    def focal_chain_build(rng):
        x = nk.parameter(rng.standard_normal((4, 6)))
        w = nk.parameter(rng.standard_normal((6, 8)))
        labels = rng.integers(0, 8, size=4)
        return (lambda: focal_loss(nk.softmax(nk.matmul(x, w), axis=-1), labels, 2.0)), [x, w]

    register_case(GradCase("graph_encoder", "encoders", graph_build))
    register_case(GradCase("prompt_pooling", "encoders", pool_build))
    register_case(GradCase("semantic_projection", "encoders", project_build))
    register_case(GradCase("pair_tokens", "tokenizer", pair_tokens_build))
    register_case(GradCase("type_embeddings", "tokenizer", type_build))
    register_case(GradCase("attention_block", "fusion", attention_build, points=3, eps=1e-5))
    register_case(GradCase("flatten_gate", "fusion", flatten_gate_build))
    register_case(GradCase("experts_aggregate", "fusion", moe_build, points=3, eps=1e-5))
    register_case(GradCase("focal_loss", "loss", focal_build))
    register_case(GradCase("focal_softmax_matmul", "loss", focal_chain_build))
    register_case(GradCase("end_to_end", "model", end_to_end_builder(), points=1, max_coords=12, eps=1e-5))


def end_to_end_builder(d: int = 16, events: int = 8, experts: int = 4, batch: int = 4) -> Builder:
    """Mean focal loss of the full model on a ``batch``-pair batch with frozen routing.

    Token layout: semantic BioRel and MolSub plus the DDI graph channel, two
    drug slots each, so L = 6.  Dropout is zero and batch norm uses batch
    statistics, so the loss is a smooth function of every parameter.
    """
    def build(rng):
        seed = int(rng.integers(2**31))
        bench = generate_synthetic(SyntheticConfig(drugs=12, events=events, pairs=40, bio_entities=10,
                                                   bio_relations=3, sub_entities=8, lm_dim=8), seed)
        config = TrainConfig(hidden=d, heads=4, experts=experts, top_k=2, neighbors=3, dropout=0.0,
                             attn_dropout=0.0, seed=seed, epochs=1, batch_size=batch)
        model = AIMModel(bench, config)
        ids = rng.choice(len(bench.dataset), size=batch, replace=False)
        u, v, y = model.pair_indices(ids)
        registry = KernelRegistry(seed, training=True)
        _, trace = model.forward(u, v, registry)
        route = trace.selected

        def f():
            probs, _ = model.forward(u, v, registry, route=route)
            return focal_loss(probs, y, config.focal_gamma)
        return f, _checkable(model.named_parameters())
    return build


def run_case(case: GradCase, seed: int = 0) -> CaseResult:
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for point in range(case.points):
        rng = np.random.default_rng((seed, point, sum(map(ord, case.name))))
        f, leaves = case.build(rng)
        report = nk.gradient_check(f, leaves, eps=case.eps, max_coords=case.max_coords, seed=point)
        worst = max(worst, report.max_rel_error)
        checked += report.checked
    return CaseResult(case.name, case.component, worst, checked, time.perf_counter() - start)


def run_suite(seed: int = 0, names=None) -> list[CaseResult]:
    cases = registered_cases()
    if names is not None:
        wanted = set(names)
        cases = [c for c in cases if c.name in wanted]
    return [run_case(c, seed) for c in cases]


_register_kernel_cases()
_register_module_cases()

__all__ = ["TOLERANCE", "GradCase", "CaseResult", "register_case", "unregister_case", "registered_cases",
           "end_to_end_builder", "run_case", "run_suite"]
