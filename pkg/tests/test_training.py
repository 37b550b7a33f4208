import itertools
import math

import numpy as np
import pytest

from normq.compression import dequantize
from normq.hmm import HmmModel, sample_corpus, validate_model
from normq.model_io import load_quantized, save_quantized
from normq.training import (Corpus, EmConfig, ModelDataError, derive_rng, em_step, heldout_score,
                            quantization_aware_train, random_init, test_loglik, train)

from oracles import enum_likelihood


def small_corpus(n=60, length=6, n_chunks=1, seed=0, hidden=3, vocab=5):
    truth = HmmModel.random(hidden, vocab, seed=seed)
    return Corpus.from_array(sample_corpus(truth, n, length, seed + 1), vocab, n_chunks)


class TestCorpus:
    def test_chunks_cover_in_order(self):
        c = small_corpus(n=23, n_chunks=5)
        chunks = c.chunks()
        assert len(chunks) == 5
        assert sum(map(len, chunks)) == 23
        flat = [s for ch in chunks for s in ch]
        assert all(np.array_equal(a, b) for a, b in zip(flat, c.sequences))
        assert max(map(len, chunks)) - min(map(len, chunks)) <= 1

    def test_split_takes_tail(self):
        c = small_corpus(n=20)
        tr, te = c.split(0.25)
        assert len(tr) == 15 and len(te) == 5
        assert np.array_equal(te.sequences[0], c.sequences[15])

    def test_rejects_bad_tokens(self):
        with pytest.raises(ValueError):
            Corpus([[0, 1, 5]], vocab_size=5)
        with pytest.raises(ValueError, match="empty corpus"):
            Corpus([], vocab_size=5)


class TestEmStep:
    def test_one_state_closed_form(self):
        seqs = [np.array([0, 1, 1, 2]), np.array([2, 2]), np.array([1])]
        m, _ = em_step(HmmModel.uniform(1, 4), seqs, smoothing=0.0)
        counts = np.bincount(np.concatenate(seqs), minlength=4)
        np.testing.assert_allclose(m.emission[0], counts / counts.sum(), rtol=1e-14)
        np.testing.assert_array_equal(m.transition, [[1.0]])
        again, _ = em_step(m, seqs, smoothing=0.0)
        np.testing.assert_allclose(again.emission, m.emission, rtol=1e-14)

    def test_absent_token_column_zero_without_smoothing(self):
        seqs = [np.array([0, 1, 0]), np.array([1, 1])]
        m, _ = em_step(HmmModel.random(3, 3, seed=1), seqs, smoothing=0.0)
        np.testing.assert_array_equal(m.emission[:, 2], 0.0)
        smoothed, _ = em_step(HmmModel.random(3, 3, seed=1), seqs)
        assert np.all(smoothed.emission[:, 2] > 0)

    def test_lld_is_under_input_model(self):
        c = small_corpus()
        init = random_init(3, 5, 0)
        _, lld = em_step(init, c.sequences)
        assert lld == pytest.approx(test_loglik(init, c))

    def test_output_validates(self):
        c = small_corpus()
        m, _ = em_step(random_init(4, 5, 2), c.sequences)
        assert validate_model(m).ok

    def test_all_impossible_raises(self):
        m = HmmModel([1.0], [[1.0]], [[1.0, 0.0]])
        with pytest.raises(ModelDataError):
            em_step(m, [np.array([1, 1])])

    def test_impossible_sequences_skipped(self):
        m = HmmModel([1.0], [[1.0]], [[0.5, 0.5, 0.0]])
        new, lld = em_step(m, [np.array([0, 1]), np.array([2])])
        assert lld == pytest.approx(2 * math.log(0.5))
        assert np.isfinite(new.emission).all()


class TestTrain:
    def test_one_step(self):
        rec = train(random_init(3, 5, 0), small_corpus(), EmConfig(epochs=1))
        assert len(rec) == 1 and rec.event_steps == []

    def test_hundred_steps(self):
        c = small_corpus(n=100, length=4, n_chunks=20)
        rec = train(random_init(3, 5, 0), c, EmConfig(epochs=5))
        assert [e.step for e in rec.entries] == list(range(1, 101))
        assert rec.entries[-1].epoch == 4 and rec.entries[-1].chunk == 19

    def test_deterministic(self):
        c = small_corpus(n=40, n_chunks=4)
        a = train(random_init(3, 5, 7), c, EmConfig(epochs=2), heldout=c)
        b = train(random_init(3, 5, 7), c, EmConfig(epochs=2), heldout=c)
        assert list(a.rows()) == list(b.rows())
        np.testing.assert_array_equal(a.model.transition, b.model.transition)

    def test_monotone_on_fixed_chunk(self):
        c = small_corpus(n=200, length=8, seed=3)
        rec = train(random_init(3, 5, 1), c, EmConfig(epochs=30))
        assert np.all(np.diff(rec.column("train_lld")) >= -1e-9)

    def test_rejects_quantizer(self):
        with pytest.raises(ValueError):
            train(random_init(2, 5, 0), small_corpus(), EmConfig(quantizer="norm-q"))

    @pytest.mark.parametrize("bad", [dict(epochs=0), dict(interval=0), dict(quantizer="int8"),
                                     dict(quantizer="norm-q", bits=0), dict(smoothing=-1.0)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            EmConfig(**bad)


class TestQuantizationAware:
    def test_events_every_twenty(self):
        c = small_corpus(n=100, length=4, n_chunks=20)
        rec = quantization_aware_train(random_init(3, 5, 0), c, EmConfig(epochs=5, quantizer="norm-q", interval=20))
        assert len(rec) == 100
        assert rec.event_steps == [20, 40, 60, 80, 100]

    def test_interval_equal_to_total(self):
        c = small_corpus(n=30, n_chunks=3)
        rec = quantization_aware_train(random_init(3, 5, 0), c, EmConfig(epochs=2, quantizer="norm-q", interval=6))
        assert rec.event_steps == [6]

    def test_final_step_always_quantized(self):
        c = small_corpus(n=30, n_chunks=7)
        rec = quantization_aware_train(random_init(3, 5, 0), c, EmConfig(quantizer="norm-q", interval=3))
        assert rec.event_steps == [3, 6, 7]

    @pytest.mark.parametrize("quantizer,bits", [("norm-q", 2), ("norm-q", 3), ("kmeans", 2)])
    def test_coarse_event_never_raises_lld(self, quantizer, bits):
        c = small_corpus(n=80, length=8, n_chunks=4, seed=5)
        rec = quantization_aware_train(random_init(4, 5, 1), c,
                                       EmConfig(epochs=3, quantizer=quantizer, bits=bits, interval=2))
        for e in rec.entries:
            if e.quantized:
                assert e.post_quant_lld <= e.pre_quant_lld + 1e-12

    def test_fine_event_can_raise_lld(self):
        # the M-step output is not the chunk-likelihood maximizer, so a small rounding step may land higher
        c = small_corpus(n=80, length=8, n_chunks=4, seed=5)
        rec = quantization_aware_train(random_init(4, 5, 1), c,
                                       EmConfig(epochs=3, quantizer="norm-q", bits=8, interval=2))
        e = rec.entries[1]
        assert e.quantized and e.post_quant_lld > e.pre_quant_lld
        assert e.post_quant_lld - e.pre_quant_lld < 1e-3

    def test_final_model_is_stored_form(self, tmp_path):
        c = small_corpus(n=40, n_chunks=2)
        rec = quantization_aware_train(random_init(3, 5, 0), c, EmConfig(epochs=2, quantizer="norm-q", bits=4,
                                                                         interval=2))
        np.testing.assert_array_equal(rec.model.transition, dequantize(rec.quantized_model.transition))
        save_quantized(tmp_path / "m.nqhm", rec.quantized_model)
        back = load_quantized(tmp_path / "m.nqhm").to_model()
        np.testing.assert_array_equal(back.emission, rec.model.emission)
        np.testing.assert_array_equal(back.initial, rec.model.initial)

    def test_requires_quantizer(self):
        with pytest.raises(ValueError):
            quantization_aware_train(random_init(2, 5, 0), small_corpus(), EmConfig())


class TestHeldout:
    def test_uniform_model_exact(self):
        c = Corpus([np.array([0, 3, 2]), np.array([1, 1, 1])], vocab_size=4)
        m = HmmModel.uniform(3, 4)
        assert test_loglik(m, c) == pytest.approx(-3 * math.log(4), rel=1e-14)

    def test_matches_exact_expectation(self):
        # E[log p(X)] by exhaustive enumeration vs a large held-out sample from the same model
        m = HmmModel.random(2, 3, seed=11)
        T = 4
        probs = [enum_likelihood(m, s) for s in itertools.product(range(3), repeat=T)]
        expected = sum(p * math.log(p) for p in probs)
        second = sum(p * math.log(p) ** 2 for p in probs)
        n = 20_000
        c = Corpus.from_array(sample_corpus(m, n, T, derive_rng(0, "sample")), 3)
        se = math.sqrt((second - expected**2) / n)
        assert abs(test_loglik(m, c) - expected) <= 3 * se

    def test_impossible_counted_not_averaged(self):
        m = HmmModel([1.0], [[1.0]], [[0.5, 0.5, 0.0]])
        c = Corpus([np.array([0]), np.array([2]), np.array([1, 1])], vocab_size=3)
        score = heldout_score(m, c)
        assert score.n_impossible == 1
        assert score.mean_loglik == pytest.approx(1.5 * math.log(0.5))

    def test_quantized_gap_finite(self):
        from normq.compression import quantize_model
        truth = HmmModel.random(4, 6, seed=2)
        c = Corpus.from_array(sample_corpus(truth, 200, 8, 3), 6)
        gap = test_loglik(quantize_model(truth, "norm-q", 4).to_model(), c) - test_loglik(truth, c)
        assert np.isfinite(gap)


def test_derive_rng_independent_streams():
    a = derive_rng(3, "init").random(4)
    assert np.array_equal(a, derive_rng(3, "init").random(4))
    assert not np.array_equal(a, derive_rng(3, "sample").random(4))
    assert not np.array_equal(a, derive_rng(4, "init").random(4))
