import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aimfuse import numkernel as nk
from aimfuse import trainer
from aimfuse.errors import ConfigError, DomainError, NumericError
from aimfuse.kgdata import make_split
from aimfuse.trainer import (AdamW, AIMModel, HeadParams, TrainConfig, classify, fit, focal_loss, load_checkpoint,
                             predict, read_history, save_checkpoint, write_history)

TINY = dict(epochs=2, batch_size=32, hidden=8, heads=2, neighbors=3, seed=5)


def _config(**kw):
    return TrainConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def one_unseen(small_bench):
    return make_split(small_bench.dataset, small_bench.drugs, "one-unseen", 4, seed=0).folds[0]


@pytest.fixture(scope="module")
def trained(small_bench, one_unseen):
    return fit(small_bench, one_unseen.train_pairs, _config())


class TestHead:
    def test_classify_two_events(self):
        head = HeadParams(nk.parameter(np.eye(2)), nk.parameter(np.zeros(2)),
                          nk.parameter(np.eye(2)), nk.parameter(np.zeros(2)))
        np.testing.assert_allclose(classify(np.array([0.0, math.log(3)]), head).data, [0.25, 0.75], rtol=1e-14)

    def test_zero_head_uniform(self, rng):
        head = HeadParams(*(nk.parameter(np.zeros(s)) for s in [(4, 3), (3,), (3, 5), (5,)]))
        np.testing.assert_allclose(classify(rng.normal(size=(2, 4)), head).data, 0.2)


class TestFocalLoss:
    def test_gamma_zero_is_cross_entropy(self, rng):
        probs = nk.softmax(rng.normal(size=(6, 4))).data
        y = rng.integers(0, 4, size=6)
        np.testing.assert_allclose(focal_loss(probs, y, 0.0).data, -np.mean(np.log(probs[np.arange(6), y])),
                                   rtol=1e-14)

    def test_confident_correct_is_zero(self):
        assert float(focal_loss(np.array([0.0, 1.0, 0.0]), [1]).data) == 0.0

    def test_half_probability(self):
        # 0.25 * ln 2
        np.testing.assert_allclose(focal_loss(np.array([0.5, 0.5]), [0]).data, 0.25 * math.log(2), rtol=1e-12)
        assert round(float(focal_loss(np.array([0.5, 0.5]), [0]).data), 6) == 0.173287

    def test_zero_probability_stays_finite(self):
        assert np.isfinite(focal_loss(np.array([1.0, 0.0]), [1]).data)

    @given(st.floats(0.01, 0.98), st.floats(0.001, 0.01), st.floats(0.0, 5.0))
    def test_decreasing_in_true_probability(self, p, step, gamma):
        lo = focal_loss(np.array([1 - p, p]), [1], gamma).data
        hi = focal_loss(np.array([1 - p - step, p + step]), [1], gamma).data
        assert hi < lo

    @pytest.mark.parametrize("labels", [[3], [-1]])
    def test_bad_label(self, labels):
        with pytest.raises(DomainError):
            focal_loss(np.array([0.2, 0.3, 0.5]), labels)


class TestConfig:
    def test_from_mapping_coerces(self):
        cfg = TrainConfig.from_mapping({"epochs": "7", "lr": "0.01", "pair_variant": "drug-average"})
        assert cfg.epochs == 7 and cfg.lr == 0.01 and cfg.pair_variant == "drug-average"

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="valid keys"):
            TrainConfig.from_mapping({"learning_rate": "0.1"})

    @pytest.mark.parametrize("kw", [dict(top_k=5), dict(hidden=10, heads=4), dict(dropout=1.0),
                                    dict(semantic="vision"), dict(pair_variant="mixed"), dict(epochs=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_none_semantic(self):
        assert TrainConfig(semantic="none").semantic_set == ()


class TestModel:
    def test_token_keys(self, small_bench):
        assert AIMModel(small_bench, _config()).token_keys == ["biorel/llm", "molsub/llm", "ddigraph/graph"]
        par = AIMModel(small_bench, _config(semantic_mode="parallel"))
        assert par.token_keys == ["biorel/graph", "molsub/graph", "ddigraph/graph", "biorel/llm", "molsub/llm"]
        assert len(par.descriptors) == 10

    def test_ddi_channel_restricted(self, small_bench, one_unseen):
        model = AIMModel(small_bench, _config(semantic="none"), one_unseen.train_pairs)
        for h, t, _ in model.channels["ddigraph"].records():
            assert h in one_unseen.train_drugs and t in one_unseen.train_drugs

    def test_single_pair_is_distribution(self, trained):
        pred = predict(trained, [0])
        assert pred.probs.shape == (1, 4)
        np.testing.assert_allclose(pred.probs.sum(), 1.0, atol=1e-12)


class TestOptimizer:
    def test_zero_lr_is_noop(self, rng):
        p = nk.parameter(rng.normal(size=(3, 3)))
        before = p.data.copy()
        opt = AdamW([p], lr=0.0, weight_decay=0.0)
        nk.sum(nk.mul(p, p)).backward()
        opt.step()
        assert np.array_equal(p.data, before)

    def test_first_step_is_sign_sized(self):
        p = nk.parameter(np.array([1.0, -2.0]))
        opt = AdamW([p], lr=0.1, weight_decay=0.0)
        p.grad = np.array([0.3, -5.0])
        opt.step()
        np.testing.assert_allclose(p.data, [0.9, -1.9], atol=1e-7)

    def test_zero_lr_training_keeps_weights(self, small_bench, one_unseen):
        state = fit(small_bench, one_unseen.train_pairs, _config(lr=0.0, weight_decay=0.0, epochs=1))
        fresh = AIMModel(small_bench, _config(lr=0.0, weight_decay=0.0, epochs=1), one_unseen.train_pairs)
        for name, t in state.model.named_parameters().items():
            assert np.array_equal(t.data, fresh.named_parameters()[name].data), name


class TestFit:
    def test_deterministic(self, small_bench, one_unseen, trained):
        again = fit(small_bench, one_unseen.train_pairs, _config())
        assert [(h.loss, h.train_acc) for h in again.history] == [(h.loss, h.train_acc) for h in trained.history]
        for name, t in trained.model.named_parameters().items():
            assert np.array_equal(t.data, again.model.named_parameters()[name].data)

    def test_history_matches_predict(self, trained, one_unseen):
        assert predict(trained, one_unseen.train_pairs).accuracy == trained.history[-1].train_acc

    def test_non_finite_loss(self, small_bench, one_unseen, monkeypatch):
        monkeypatch.setattr(trainer, "focal_loss", lambda probs, y, gamma: nk.sum(probs) * float("nan"))
        with pytest.raises(NumericError, match="epoch 1, batch 0"):
            fit(small_bench, one_unseen.train_pairs, _config())

    def test_empty_training_set(self, small_bench):
        with pytest.raises(ConfigError):
            fit(small_bench, [], _config())


class TestPredict:
    def test_adjacency_flag_only_touches_unseen(self, trained, one_unseen):
        ids = one_unseen.train_pairs + one_unseen.test_pairs
        off = predict(trained, ids)
        on = predict(trained, ids, test_adjacency=True)
        assert off.pair_ids.tolist() == on.pair_ids.tolist()
        n = len(one_unseen.train_pairs)
        assert np.array_equal(off.probs[:n], on.probs[:n])
        assert not np.allclose(off.probs[n:], on.probs[n:])

    def test_batch_size_does_not_matter(self, trained, one_unseen):
        a = predict(trained, one_unseen.test_pairs, batch_size=1)
        b = predict(trained, one_unseen.test_pairs, batch_size=64)
        np.testing.assert_allclose(a.probs, b.probs, rtol=1e-12, atol=1e-15)


class TestPersistence:
    def test_checkpoint_round_trip(self, trained, small_bench, one_unseen, tmp_path):
        save_checkpoint(trained, tmp_path / "a.npz")
        loaded = load_checkpoint(tmp_path / "a.npz", small_bench)
        assert np.array_equal(predict(loaded, one_unseen.test_pairs).probs,
                              predict(trained, one_unseen.test_pairs).probs)
        save_checkpoint(loaded, tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_checkpoint_wrong_benchmark(self, trained, tmp_path):
        from aimfuse.kgdata import SyntheticConfig, generate_synthetic
        other = generate_synthetic(SyntheticConfig(drugs=12, events=3, pairs=40, lm_dim=8), seed=1)
        save_checkpoint(trained, tmp_path / "a.npz")
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "a.npz", other)

    def test_history_round_trip(self, trained, tmp_path):
        write_history(trained.history, tmp_path / "h.csv")
        assert read_history(tmp_path / "h.csv") == trained.history
