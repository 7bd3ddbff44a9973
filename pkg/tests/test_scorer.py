"""Forward-path, gradient, training, and count-model tests for the scorer."""

import math

import numpy as np
import pytest

from sidforge import scorer, tokenizer
from sidforge.scorer import (
    CountScorer,
    NeuralSequenceModel,
    OptimizerConfig,
    Sample,
    ScorerConfig,
    ScorerError,
    StepState,
    encode_context,
    gated_cross_attention,
    init_scorer,
    load_checkpoint,
    ntp_loss_and_grad,
    save_checkpoint,
    sequence_logprob,
    step_logits,
    train,
    train_epoch,
)

from helpers import finite_difference_grads, max_grad_rel_error, random_sample, tiny_params


@pytest.fixture
def params():
    corp_vocabs = {
        "l2": {f"a{i}": i for i in range(3)},
        "l3": {f"b{i}": i for i in range(4)},
    }
    space = tokenizer.SequenceSpace(attr_chain=("l2", "l3"), attr_vocabs=corp_vocabs,
                                    sid_sizes=(5, 5))
    spec = tokenizer.hash_spec_for_space(space, d_hash=3)
    return init_scorer(space, spec, n_behavior_tokens=8,
                       config=ScorerConfig(d_model=6, seed=11))


class TestEncodeContext:
    def test_singleton_h_agg_is_embedding(self, params):
        _, _, h = encode_context((3,), params)
        np.testing.assert_array_equal(h, params.tensors["emb_behavior"][3])

    def test_permutation_changes_kv_not_h_agg(self, params):
        k1, v1, h1 = encode_context((1, 2, 3), params)
        k2, v2, h2 = encode_context((3, 1, 2), params)
        np.testing.assert_allclose(h1, h2, atol=1e-15)
        assert not np.allclose(k1, k2)
        assert not np.allclose(v1, v2)

    def test_bitwise_stable(self, params):
        a = encode_context((1, 5), params)
        b = encode_context((1, 5), params)
        for x, y in zip(a, b):
            assert np.array_equal(x, y)

    def test_empty_uses_padding_row(self, params):
        _, _, h = encode_context((), params)
        np.testing.assert_array_equal(h, params.tensors["emb_behavior"][params.pad_token])

    def test_unknown_token_errors(self, params):
        with pytest.raises(ScorerError):
            encode_context((99,), params)


class TestGatedCrossAttention:
    def test_zero_gate_zero_output(self):
        rng = np.random.default_rng(0)
        out = gated_cross_attention(rng.normal(size=(2, 4)), rng.normal(size=(3, 4)),
                                    rng.normal(size=(3, 4)), 0.0, 4)
        assert np.all(out == 0)

    def test_single_key_returns_gated_value(self):
        rng = np.random.default_rng(1)
        q = rng.normal(size=(3, 4))
        k = rng.normal(size=(1, 4))
        v = rng.normal(size=(1, 4))
        out = gated_cross_attention(q, k, v, 0.7, 4)
        np.testing.assert_allclose(out, np.tile(0.7 * v, (3, 1)), atol=1e-14)

    def test_matches_naive_dense_oracle(self):
        rng = np.random.default_rng(2)
        q, k, v = rng.normal(size=(2, 4)), rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
        gamma = 1.3
        out = gated_cross_attention(q, k, v, gamma, 4)
        oracle = np.zeros((2, 4))
        for i in range(2):
            scores = [float(q[i] @ k[j]) / math.sqrt(4) for j in range(3)]
            exps = [math.exp(s) for s in scores]
            total = sum(exps)
            for j in range(3):
                oracle[i] += gamma * (exps[j] / total) * v[j]
        np.testing.assert_allclose(out, oracle, atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ScorerError):
            gated_cross_attention(np.zeros((2, 3)), np.zeros((3, 4)), np.zeros((3, 4)), 1, 4)


class TestStepLogits:
    def test_zero_head_uniform(self, params):
        params.tensors["head_w_1"][:] = 0
        params.tensors["head_b_1"][:] = 0
        d = params.config.d_model
        state = StepState(
            q_t=np.ones(d), e_prefix=np.zeros(params.config.prefix_window * d),
            c_t=np.zeros(params.hash_spec.output_dim), h_agg=np.ones(d),
        )
        logits = step_logits(state, 1, params)
        p = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(p, 1.0 / len(p), atol=1e-15)

    def test_step_out_of_range(self, params):
        d = params.config.d_model
        state = StepState(np.zeros(d), np.zeros(4 * d),
                          np.zeros(params.hash_spec.output_dim), np.zeros(d))
        with pytest.raises(ScorerError):
            step_logits(state, 99, params)

    def test_softmax_normalization(self, params):
        sample = Sample(behavior=(1,), bos=0, tokens=(1, 2, 3, 4))
        cache = scorer._forward_sample(params, sample)
        for p in cache.probs:
            assert abs(p.sum() - 1.0) < 1e-12


class TestNtpLoss:
    def test_all_vocab_one_gives_zero(self):
        space = tokenizer.SequenceSpace(
            attr_chain=(), attr_vocabs={}, sid_sizes=(1, 1))
        spec = tokenizer.hash_spec_for_space(space, d_hash=2)
        p = init_scorer(space, spec, 3, ScorerConfig(d_model=4, seed=0))
        loss, grads = ntp_loss_and_grad([Sample(behavior=(0,), bos=1, tokens=(0, 0))], p)
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads.values())

    def test_uniform_logits_cross_entropy(self):
        space = tokenizer.SequenceSpace(attr_chain=(), attr_vocabs={}, sid_sizes=(4, 4))
        spec = tokenizer.hash_spec_for_space(space, d_hash=2)
        p = init_scorer(space, spec, 3, ScorerConfig(d_model=4, seed=0))
        for t in (1, 2):
            p.tensors[f"head_w_{t}"][:] = 0
            p.tensors[f"head_b_{t}"][:] = 0
        loss, _ = ntp_loss_and_grad([Sample(behavior=(0,), bos=0, tokens=(2, 3), alpha=1.0)], p)
        assert loss == pytest.approx(2 * math.log(4), abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(123)
        params = tiny_params(rng)
        batch = [random_sample(rng, params) for _ in range(2)]
        _, grads = ntp_loss_and_grad(batch, params)
        fd = finite_difference_grads(lambda p: ntp_loss_and_grad(batch, p)[0], params)
        assert max_grad_rel_error(grads, fd) < 1e-4

    def test_loss_matches_incremental_forward(self, params):
        sample = Sample(behavior=(2, 4), bos=3, tokens=(1, 0, 2, 4), alpha=1.0)
        loss, _ = ntp_loss_and_grad([sample], params)
        model = NeuralSequenceModel(params, sample.behavior, sample.bos)
        total = 0.0
        for t, tok in enumerate(sample.tokens):
            total += float(model.step_logprobs(sample.tokens[:t])[tok])
        assert loss == pytest.approx(-total, abs=1e-12)
        assert sequence_logprob(params, sample) == pytest.approx(total, abs=1e-12)

    def test_out_of_range_target_errors(self, params):
        with pytest.raises(ScorerError):
            ntp_loss_and_grad([Sample(behavior=(), bos=0, tokens=(99, 0, 0, 0))], params)


class TestTraining:
    def make_dataset(self, params, n, seed):
        rng = np.random.default_rng(seed)
        return [random_sample(rng, params, alpha=1.0) for _ in range(n)]

    def test_zero_lr_keeps_params_bitwise(self, params):
        data = self.make_dataset(params, 8, 0)
        before = {n: a.tobytes() for n, a in params.tensors.items()}
        train_epoch(data, params, OptimizerConfig(lr=0.0, batch_size=4))
        after = {n: a.tobytes() for n, a in params.tensors.items()}
        assert before == after

    def test_frozen_tensors_never_move(self, params):
        data = self.make_dataset(params, 16, 1)
        frozen_before = {n: params.tensors[n].tobytes() for n in scorer.FROZEN_TENSORS}
        train(data, params, OptimizerConfig(lr=1e-2, batch_size=4), epochs=3)
        for n, b in frozen_before.items():
            assert params.tensors[n].tobytes() == b

    def test_loss_decreases_on_small_task(self):
        rng = np.random.default_rng(5)
        params = tiny_params(rng, d_model=8)
        data = self.make_dataset(params, 100, 2)
        _, trace = train(data, params, OptimizerConfig(lr=3e-3, batch_size=50), epochs=100)
        assert len(trace) == 200
        assert np.mean(trace[-4:]) < np.mean(trace[:4])

    def test_same_seed_identical_traces(self):
        rng1 = np.random.default_rng(9)
        p1 = tiny_params(rng1)
        rng2 = np.random.default_rng(9)
        p2 = tiny_params(rng2)
        data1 = self.make_dataset(p1, 12, 3)
        data2 = self.make_dataset(p2, 12, 3)
        _, t1 = train_epoch(data1, p1, OptimizerConfig(lr=1e-3, batch_size=4))
        _, t2 = train_epoch(data2, p2, OptimizerConfig(lr=1e-3, batch_size=4))
        assert t1 == t2


class TestCountScorer:
    def test_repeated_sequence_logprob_zero(self):
        cs = CountScorer([(0, 1, 2)] * 5, vocab_sizes=(3, 3, 3))
        assert cs.logprob((0, 1, 2)) == 0.0

    def test_two_equiprobable_continuations(self):
        cs = CountScorer([(0, 1), (0, 2)], vocab_sizes=(1, 3))
        probs = cs.step_probs((0,))
        assert probs[1] == pytest.approx(0.5)
        assert probs[2] == pytest.approx(0.5)

    def test_additive_smoothing_matches_hand_computation(self):
        # corpus: (0,0), (0,1), (1,1); kappa = 1
        cs = CountScorer([(0, 0), (0, 1), (1, 1)], vocab_sizes=(2, 2), smoothing=1.0)
        # first step: count(0)=2, count(1)=1, total=3, V=2
        np.testing.assert_allclose(cs.step_probs(()), [(2 + 1) / 5, (1 + 1) / 5])
        # after prefix (0,): counts {0:1, 1:1}, total 2, V=2
        np.testing.assert_allclose(cs.step_probs((0,)), [0.5, 0.5])
        # after prefix (1,): counts {1:1}, total 1, V=2
        np.testing.assert_allclose(cs.step_probs((1,)), [(0 + 1) / 3, (1 + 1) / 3])

    def test_unseen_prefix_with_zero_smoothing_errors(self):
        cs = CountScorer([(0, 0)], vocab_sizes=(2, 2))
        with pytest.raises(ValueError):
            cs.step_probs((1,))


class TestCheckpoint:
    def test_round_trip(self, params, tmp_path):
        path = tmp_path / "checkpoint.json"
        save_checkpoint(params, path, meta={"note": "test"})
        loaded = load_checkpoint(path)
        assert set(loaded.tensors) == set(params.tensors)
        for name in params.tensors:
            np.testing.assert_array_equal(loaded.tensors[name], params.tensors[name])
        assert loaded.space.as_dict() == params.space.as_dict()

    def test_frozen_digest_mismatch_detected(self, params, tmp_path):
        import json

        path = tmp_path / "checkpoint.json"
        save_checkpoint(params, path)
        doc = json.loads(path.read_text())
        doc["tensors"]["attn_gamma"] = 2.0
        path.write_text(json.dumps(doc))
        with pytest.raises(ScorerError, match="attn_gamma"):
            load_checkpoint(path)
