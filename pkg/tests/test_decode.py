import itertools

import numpy as np
import pytest

from normq.compression import quantize_model
from normq.decode import (GuidanceTable, build_guidance, build_keyword_dfa, guided_generate, neutral_dfa,
                          next_token_weights, success_rate)
from normq.hmm import HmmModel

from oracles import contains_run, enum_guidance


class TestKeywordDfa:
    def test_single_token_two_states(self):
        dfa = build_keyword_dfa([[2]], 4)
        assert dfa.n_states == 2
        assert dfa.accepts([0, 2, 1]) and not dfa.accepts([0, 1, 3])

    def test_two_disjoint_tokens_four_states(self):
        dfa = build_keyword_dfa([[0], [1]], 3)
        assert dfa.n_states == 4
        assert dfa.accepts([1, 2, 0]) and not dfa.accepts([1, 1, 2])

    @pytest.mark.parametrize("keyword", [(0, 1), (1, 1), (0, 1, 0), (2, 2, 1)])
    def test_against_substring_search(self, keyword):
        dfa = build_keyword_dfa([keyword], 3)
        for n in range(6):
            for seq in itertools.product(range(3), repeat=n):
                assert dfa.accepts(seq) == contains_run(seq, keyword), seq

    def test_several_keywords_against_substring_search(self):
        kws = [(0, 1), (1, 0), (2,)]
        dfa = build_keyword_dfa(kws, 3)
        for n in range(7):
            for seq in itertools.product(range(3), repeat=n):
                assert dfa.accepts(seq) == all(contains_run(seq, k) for k in kws)

    def test_accepting_absorbing(self):
        dfa = build_keyword_dfa([[0, 1], [2]], 3)
        for s in np.flatnonzero(dfa.accepting):
            assert np.all(dfa.accepting[dfa.transitions[s]])

    def test_errors(self):
        with pytest.raises(ValueError):
            build_keyword_dfa([], 3)
        with pytest.raises(ValueError):
            build_keyword_dfa([[3]], 3)
        with pytest.warns(UserWarning):
            build_keyword_dfa([[0, 1, 2]], 3, horizon=2)


class TestGuidance:
    def test_base_case(self):
        m = HmmModel.random(2, 3, seed=0)
        dfa = build_keyword_dfa([[1]], 3)
        table = build_guidance(m, dfa, 0)
        np.testing.assert_array_equal(table.values[0], [[0.0, 1.0], [0.0, 1.0]])

    def test_accepting_state_stays_one(self):
        m = HmmModel.random(3, 3, seed=1)
        dfa = build_keyword_dfa([[1]], 3)
        table = build_guidance(m, dfa, 5)
        acc = np.flatnonzero(dfa.accepting)
        np.testing.assert_allclose(table.values[:, :, acc], 1.0, atol=1e-12)

    @pytest.mark.parametrize("seed,keywords", [(0, [[1]]), (1, [[0, 1]]), (2, [[2], [0]]), (3, [[1, 1]])])
    def test_against_enumeration(self, seed, keywords):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 4))
        m = HmmModel.random(n, 3, rng)
        dfa = build_keyword_dfa(keywords, 3)
        assert dfa.n_states <= 4
        table = build_guidance(m, dfa, 4)
        for h in range(1, 5):
            for s in range(dfa.n_states):
                def accepts_from(xs, s=s):
                    for x in xs:
                        s = dfa.transitions[s, x]
                    return dfa.accepting[s]

                for z in range(n):
                    assert table.values[h, z, s] == pytest.approx(enum_guidance(m, accepts_from, z, h), abs=1e-10)

    def test_bounded_and_monotone(self):
        m = HmmModel.random(4, 6, seed=5)
        table = build_guidance(m, build_keyword_dfa([[1, 2], [4]], 6), 10).values
        assert np.all(table >= -1e-12) and np.all(table <= 1 + 1e-12)
        assert np.all(np.diff(table, axis=0) >= -1e-12)

    def test_quantized_model_accepted(self):
        m = HmmModel.random(3, 4, seed=2)
        dfa = build_keyword_dfa([[1]], 4)
        q = quantize_model(m, "norm-q", 8)
        np.testing.assert_allclose(build_guidance(q, dfa, 3).values, build_guidance(q.to_model(), dfa, 3).values)


class TestGeneration:
    def test_neutral_matches_base_distribution(self):
        m = HmmModel.random(3, 5, seed=0)
        dfa = neutral_dfa(5)
        table = build_guidance(m, dfa, 6)
        belief = m.initial
        np.testing.assert_allclose(next_token_weights(m, belief, dfa, 0, table, 6), m.initial @ m.emission,
                                   atol=1e-12)

    def test_neutral_same_as_unguided(self):
        m = HmmModel.random(3, 5, seed=0)
        dfa = neutral_dfa(5)
        table = build_guidance(m, dfa, 8)
        guided = guided_generate(m, dfa, table, 8, seed=4)
        plain = guided_generate(m, dfa, None, 8, seed=4)
        assert guided.tokens == plain.tokens
        assert guided_generate(m, dfa, table, 8, seed=4).tokens == guided.tokens

    def test_tight_horizon_always_succeeds(self):
        m = HmmModel.random(3, 4, seed=6)  # every token has positive probability from every state
        dfa = build_keyword_dfa([[2, 3]], 4)
        table = build_guidance(m, dfa, 2)
        for seed in range(50):
            res = guided_generate(m, dfa, table, 2, seed)
            assert res.accepted and res.tokens == [2, 3]

    def test_unsatisfiable_flags_failure(self):
        m = HmmModel([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]], [[0.5, 0.5, 0.0], [0.5, 0.5, 0.0]])
        dfa = build_keyword_dfa([[2]], 3)
        res = guided_generate(m, dfa, build_guidance(m, dfa, 5), 5, seed=0)
        assert res.failed and not res.accepted
        assert success_rate(m, dfa, trials=20, max_len=5, seed=0) == 0.0

    def test_short_table_rejected(self):
        m = HmmModel.random(2, 3, seed=0)
        dfa = build_keyword_dfa([[1]], 3)
        with pytest.raises(ValueError):
            guided_generate(m, dfa, build_guidance(m, dfa, 3), 5, seed=0)


class TestSuccessRate:
    def setup_method(self):
        self.model = HmmModel.sparse_random(6, 12, seed=3, transition_support=3, emission_support=4)
        marginal = self.model.initial @ self.model.emission
        pos = np.flatnonzero(marginal > 0)
        self.keyword = int(pos[np.argmin(marginal[pos])])
        self.dfa = build_keyword_dfa([[self.keyword]], 12)

    def test_guided_beats_unguided(self):
        guided = success_rate(self.model, self.dfa, 200, 10, seed=1)
        plain = success_rate(self.model, self.dfa, 200, 10, seed=1, guided=False)
        assert guided > plain

    def test_reproducible(self):
        a = success_rate(self.model, self.dfa, 50, 10, seed=9)
        assert a == success_rate(self.model, self.dfa, 50, 10, seed=9)

    def test_quantized_guide_close(self):
        q = quantize_model(self.model, "norm-q", 8)
        fp = success_rate(self.model, self.dfa, 200, 10, seed=2)
        qg = success_rate(self.model, self.dfa, 200, 10, seed=2, guide=q)
        assert abs(fp - qg) <= 0.05

    def test_trials_positive(self):
        with pytest.raises(ValueError):
            success_rate(self.model, self.dfa, 0, 10, seed=0)


def test_guidance_table_horizon():
    assert GuidanceTable(np.zeros((4, 2, 2))).horizon == 3
