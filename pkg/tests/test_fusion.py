import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimfuse import numkernel as nk
from aimfuse.errors import ConfigError, ShapeError
from aimfuse.fusion import (AttentionBlockParams, MoEParams, RoutingRecord, aggregate_experts, attention_block,
                            expert_capacity, expert_choice_route, expert_forward, experts_forward,
                            export_routing, flatten_tokens, gate_scores, modality_contribution, read_routing)
from aimfuse.tokenizer import TokenSequence


def _seq(h, names=None):
    length = h.shape[-2]
    return TokenSequence(nk.as_tensor(h), names or [("A", str(i)) for i in range(length)], "separate")


class TestAttentionBlock:
    def test_single_token_attention(self, rng):
        p = AttentionBlockParams.init(rng, 8, 4, 16)
        _, w = attention_block(_seq(rng.normal(size=(1, 8))), p)
        np.testing.assert_array_equal(w, np.ones((4, 1, 1)))

    def test_two_token_hand_oracle(self):
        d = 2
        eye = lambda: nk.parameter(np.eye(d))
        zero = lambda n: nk.parameter(np.zeros(n))
        p = AttentionBlockParams(1, eye(), zero(d), eye(), zero(d), eye(), zero(d), eye(), zero(d),
                                 nk.parameter(np.ones(d)), zero(d), nk.parameter(np.zeros((d, 3))), zero(3),
                                 nk.parameter(np.zeros((3, d))), zero(d), nk.parameter(np.ones(d)), zero(d))
        h = np.array([[1.0, 0.0], [0.0, 2.0]])
        scores = h @ h.T / math.sqrt(d)
        att = np.exp(scores) / np.exp(scores).sum(axis=1, keepdims=True)

        def ln(x):
            return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
        a = ln(h + att @ h)
        expected = ln(a)
        out, w = attention_block(_seq(h), p)
        np.testing.assert_allclose(w[0], att, rtol=1e-14)
        np.testing.assert_allclose(out.tokens.data, expected, rtol=1e-12, atol=1e-14)

    def test_rows_sum_to_one(self, rng):
        p = AttentionBlockParams.init(rng, 8, 2, 16)
        _, w = attention_block(_seq(rng.normal(size=(3, 5, 8))), p)
        assert w.shape == (3, 2, 5, 5)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)

    def test_heads_must_divide(self, rng):
        with pytest.raises(ConfigError):
            AttentionBlockParams.init(rng, 6, 4, 12)

    def test_width_mismatch(self, rng):
        p = AttentionBlockParams.init(rng, 8, 2, 16)
        with pytest.raises(ShapeError):
            attention_block(_seq(rng.normal(size=(3, 4))), p)

    @given(st.integers(2, 8), st.integers(0, 10_000))
    def test_permutation_equivariance(self, length, seed):
        r = np.random.default_rng(seed)
        p = AttentionBlockParams.init(r, 8, 2, 16)
        h = r.normal(size=(length, 8))
        perm = r.permutation(length)
        a, _ = attention_block(_seq(h), p)
        b, _ = attention_block(_seq(h[perm]), p)
        np.testing.assert_allclose(b.tokens.data, a.tokens.data[perm], atol=1e-10)

    def test_attention_dropout_only_in_training(self, rng):
        p = AttentionBlockParams.init(rng, 8, 2, 16, attn_dropout=0.5)
        h = rng.normal(size=(4, 8))
        a, _ = attention_block(_seq(h), p, nk.KernelRegistry(0, training=False))
        b, _ = attention_block(_seq(h), p, nk.KernelRegistry(0, training=False))
        c, _ = attention_block(_seq(h), p, nk.KernelRegistry(0, training=True))
        assert np.array_equal(a.tokens.data, b.tokens.data)
        assert not np.allclose(a.tokens.data, c.tokens.data)


class TestFlattenAndGates:
    def test_flatten(self):
        np.testing.assert_array_equal(flatten_tokens(_seq(np.array([[1.0, 2.0], [3.0, 4.0]]))).data, [1, 2, 3, 4])

    def test_flatten_single_token(self):
        np.testing.assert_array_equal(flatten_tokens(_seq(np.array([[5.0, 6.0]]))).data, [5.0, 6.0])

    def test_flatten_round_trip(self, rng):
        h = rng.normal(size=(4, 3, 2))
        np.testing.assert_array_equal(flatten_tokens(_seq(h)).data.reshape(4, 3, 2), h)

    def test_zero_gate_uniform(self, rng):
        np.testing.assert_allclose(gate_scores(rng.normal(size=6), np.zeros((6, 4))).data, 0.25)

    def test_single_expert(self, rng):
        np.testing.assert_array_equal(gate_scores(rng.normal(size=6), rng.normal(size=(6, 1))).data, [1.0])

    def test_softmax_oracle(self, rng):
        p, w = rng.normal(size=6), rng.normal(size=(6, 3))
        logits = p @ w
        np.testing.assert_allclose(gate_scores(p, w).data, np.exp(logits) / np.exp(logits).sum(), rtol=1e-14)


class TestRouting:
    def test_capacity_formula(self):
        assert expert_capacity(8, 4, 2, 1.25) == 5

    def test_single_instance(self, rng):
        gates = nk.softmax(rng.normal(size=(1, 4))).data
        selected, fallback, capacity = expert_choice_route(gates, 2, 1.25)
        assert capacity >= 1 and selected.all() and not fallback.any()

    def test_uniform_gates_pick_low_indices(self):
        selected, fallback, capacity = expert_choice_route(np.full((8, 4), 0.25), 2, 1.25)
        pre = selected & ~fallback[:, None]
        for e in range(4):
            assert list(np.flatnonzero(pre[:, e])) == list(range(capacity))
        # leftover instances go to their argmax gate, the lowest expert index on ties
        assert fallback.tolist() == [False] * 5 + [True] * 3
        assert selected[5:].tolist() == [[True, False, False, False]] * 3

    def test_explicit_fallback(self):
        gates = np.array([[0.6, 0.4], [0.55, 0.45], [0.52, 0.48], [0.51, 0.49]])
        selected, fallback, capacity = expert_choice_route(gates, 1, 0.5)
        assert capacity == 1
        # expert 0 takes instance 0, expert 1 takes instance 3
        assert fallback.tolist() == [False, True, True, False]
        assert selected.tolist() == [[True, False], [True, False], [True, False], [False, True]]

    @given(st.integers(1, 64), st.integers(2, 5), st.integers(0, 10_000))
    def test_structural_invariants(self, n, e, seed):
        r = np.random.default_rng(seed)
        gates = nk.softmax(r.normal(size=(n, e))).data
        selected, fallback, capacity = expert_choice_route(gates, 2, 1.25)
        pre = selected & ~fallback[:, None]
        assert np.all(pre.sum(axis=0) == min(capacity, n))
        assert selected.any(axis=1).all()
        record = RoutingRecord(np.arange(n), gates, selected, fallback, selected / selected.sum(1, keepdims=True),
                               capacity, pre.sum(axis=0))
        assert record.assigned_counts().sum() == n


class TestExperts:
    def test_zero_weights_give_output_bias(self, rng):
        moe = MoEParams.init(rng, 6, 2, 4, 3)
        for t in (moe.w1, moe.w2, moe.b1):
            t.data[...] = 0.0
        moe.b2.data[1] = [[1.0, 2.0, 3.0]]
        np.testing.assert_array_equal(expert_forward(rng.normal(size=6), moe, 1).data, [1.0, 2.0, 3.0])

    def test_relu_annihilation(self, rng):
        moe = MoEParams.init(rng, 3, 1, 3, 3, top_k=1)
        moe.w1.data[0] = -np.eye(3)
        moe.b1.data[...] = 0.0
        moe.w2.data[0] = np.eye(3)
        moe.b2.data[...] = 0.0
        np.testing.assert_array_equal(expert_forward(np.array([1.0, 2.0, 0.5]), moe, 0).data, 0.0)

    def test_hand_ffn_oracle(self, rng):
        moe = MoEParams.init(rng, 5, 3, 4, 2)
        p = rng.normal(size=(7, 5))
        out = experts_forward(nk.as_tensor(p), moe).data
        for e in range(3):
            hidden = np.maximum(p @ moe.w1.data[e] + moe.b1.data[e], 0)
            np.testing.assert_allclose(out[:, e], hidden @ moe.w2.data[e] + moe.b2.data[e], rtol=1e-13)
            np.testing.assert_allclose(expert_forward(p, moe, e).data, out[:, e], rtol=1e-13)

    def test_invalid_setup(self, rng):
        with pytest.raises(ConfigError):
            MoEParams.init(rng, 4, 2, 3, 3, top_k=3)


class TestAggregate:
    def test_single_selector(self, rng):
        outputs = rng.normal(size=(1, 3, 4))
        sel = np.array([[False, True, False]])
        z, w = aggregate_experts(nk.as_tensor(outputs), sel, nk.as_tensor(np.array([[0.2, 0.3, 0.5]])))
        np.testing.assert_allclose(z.data[0], outputs[0, 1], rtol=1e-15)
        np.testing.assert_array_equal(w.data, [[0.0, 1.0, 0.0]])

    def test_equal_gates_mean(self, rng):
        outputs = rng.normal(size=(1, 3, 4))
        sel = np.array([[True, False, True]])
        z, _ = aggregate_experts(nk.as_tensor(outputs), sel, nk.as_tensor(np.array([[0.4, 0.2, 0.4]])))
        np.testing.assert_allclose(z.data[0], (outputs[0, 0] + outputs[0, 2]) / 2, rtol=1e-14)

    def test_needs_a_selector(self, rng):
        with pytest.raises(ConfigError):
            aggregate_experts(nk.as_tensor(rng.normal(size=(1, 2, 3))), np.zeros((1, 2), bool),
                              nk.as_tensor(np.array([[0.5, 0.5]])))


class TestContribution:
    def test_uniform_six_tokens(self):
        att = np.full((2, 4, 6, 6), 1 / 6)
        tokens, _ = modality_contribution(att, [("A", "x")] * 6)
        np.testing.assert_allclose(tokens, 1 / 6)

    def test_modalities_partition_unity(self, rng):
        att = nk.softmax(rng.normal(size=(3, 2, 6, 6))).data
        desc = [("A", "b"), ("A", "m"), ("A", "g"), ("B", "b"), ("B", "m"), ("B", "g")]
        tokens, per = modality_contribution(att, desc)
        np.testing.assert_allclose(tokens.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(per["b"], tokens[:, 0] + tokens[:, 3])
        np.testing.assert_allclose(sum(per.values()), 1.0, atol=1e-12)

    def test_hand_two_token_map(self):
        att = np.array([[[0.9, 0.1], [0.3, 0.7]], [[0.5, 0.5], [0.2, 0.8]]])
        tokens, _ = modality_contribution(att, [("A", "x"), ("B", "x")])
        np.testing.assert_allclose(tokens, [(0.9 + 0.3 + 0.5 + 0.2) / 4, (0.1 + 0.7 + 0.5 + 0.8) / 4])


def test_routing_export_round_trip(tmp_path, rng):
    gates = nk.softmax(rng.normal(size=(5, 3))).data
    selected, fallback, cap = expert_choice_route(gates, 2, 1.25)
    contrib = nk.softmax(rng.normal(size=(5, 4))).data
    record = RoutingRecord(np.arange(10, 15), gates, selected, fallback, selected / selected.sum(1, keepdims=True),
                           cap, selected.sum(0), contrib)
    export_routing(record, tmp_path / "r.tsv")
    rows = read_routing(tmp_path / "r.tsv")
    assert [r.instance_id for r in rows] == list(range(10, 15))
    assert [r.assigned for r in rows] == record.assigned.tolist()
    for r, g, s, c in zip(rows, gates, selected, contrib):
        assert np.array_equal(r.gates, g) and r.selectors == list(np.flatnonzero(s))
        assert np.array_equal(r.contributions, c)
