import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossutt.ctc import AMPosterior, FusionParams, UtteranceInput, decode_utterance, greedy_decode
from crossutt.errors import InputError, SchemaError, StateError
from crossutt.model import ModelConfig, forward_full, generate_weights
from crossutt.rescore import (
    NBestEntry, NBestList, RescoreParams, generate_nbest, rescore, rescore_conversation,
    standardize, tlm_score_nbest,
)
from crossutt.session import start_state
from crossutt.vocab import Vocab
from oracles import content_logprobs_full, enumerate_prefix_masses, random_log_posterior

CFG = ModelConfig.toy(vocab_size=6)
W = generate_weights(0, CFG)

scores = st.lists(st.floats(-100, 100, allow_nan=False), min_size=1, max_size=20)


def _nbest(first, tlm, tokens=None):
    tokens = tokens or [(i,) * (i + 1) for i in range(len(first))]
    return NBestList("u", tuple(NBestEntry(tuple(t), f, l) for t, f, l in zip(tokens, first, tlm)))


class TestStandardize:
    def test_example(self):
        np.testing.assert_allclose(standardize([-1.0, -2.0, -3.0]), [1.22474487, 0.0, -1.22474487], atol=1e-6)

    def test_constant_gives_zeros(self):
        np.testing.assert_array_equal(standardize([4.0, 4.0, 4.0]), [0.0, 0.0, 0.0])
        np.testing.assert_array_equal(standardize([2.5]), [0.0])

    def test_empty(self):
        with pytest.raises(InputError):
            standardize([])

    @settings(max_examples=80, deadline=None)
    @given(scores)
    def test_moments(self, s):
        z = standardize(s)
        if np.std(s) >= 1e-8:
            assert abs(z.mean()) < 1e-9
            assert abs(z.std() - 1.0) < 1e-9
        else:
            assert np.all(z == 0)

    @settings(max_examples=80, deadline=None)
    @given(scores, st.floats(0.01, 100), st.floats(-100, 100))
    def test_affine_invariant(self, s, a, b):
        s = np.array(s)
        if np.std(s) < 1e-6 or np.std(a * s + b) < 1e-6:
            return
        np.testing.assert_allclose(standardize(a * s + b), standardize(s), atol=1e-6)


class TestRescore:
    def test_hand_computed_ranking(self):
        nb = _nbest([-1.0, -2.0, -3.0], [-10.0, -4.0, -7.0])
        out = rescore(nb, RescoreParams())
        # z(tlm) = [-1.2247, 1.2247, 0]; finals = [-2.2247, -0.7753, -3.0]
        assert [e.tokens for e in out.entries] == [(1, 1), (0,), (2, 2, 2)]
        assert out.entries[0].final_score == pytest.approx(-2.0 + 1.2247449, abs=1e-6)
        assert nb.entries[0].final_score is None

    def test_length_penalty(self):
        nb = _nbest([-1.0, -1.5], [-3.0, -3.0])
        assert rescore(nb, RescoreParams(length_penalty=1.0)).entries[0].tokens == (1, 1)
        assert rescore(nb, RescoreParams(length_penalty=0.0)).entries[0].tokens == (0,)

    def test_first_pass_only_keeps_order(self):
        nb = _nbest([-1.0, -2.0, -3.0], [-9.0, -1.0, -5.0])
        out = rescore(nb, RescoreParams(w_tlm=0.0))
        assert [e.tokens for e in out.entries] == [e.tokens for e in nb.entries]

    def test_tlm_only_orders_by_tlm(self):
        nb = _nbest([-1.0, -2.0, -3.0], [-9.0, -1.0, -5.0])
        out = rescore(nb, RescoreParams(w_first=0.0))
        assert [e.tlm_logprob for e in out.entries] == [-1.0, -5.0, -9.0]

    def test_ties_keep_input_order(self):
        nb = _nbest([-1.0, -1.0, -1.0], [-2.0, -2.0, -2.0])
        assert [e.tokens for e in rescore(nb, RescoreParams()).entries] == [e.tokens for e in nb.entries]

    def test_missing_tlm(self):
        with pytest.raises(StateError):
            rescore(_nbest([-1.0, -2.0], [None, -1.0]), RescoreParams())

    def test_duplicates_rejected(self):
        with pytest.raises(InputError):
            _nbest([-1.0, -2.0], [-1.0, -1.0], tokens=[(1,), (1,)])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(-20, 0), st.floats(-50, 0)), min_size=1, max_size=8), st.randoms())
    def test_permutation_invariant(self, rows, rnd):
        nb = _nbest([r[0] for r in rows], [r[1] for r in rows])
        shuffled = list(nb.entries)
        rnd.shuffle(shuffled)
        a = rescore(nb, RescoreParams(w_tlm=0.7, length_penalty=0.1))
        b = rescore(NBestList("u", tuple(shuffled)), RescoreParams(w_tlm=0.7, length_penalty=0.1))
        assert {e.tokens: e.final_score for e in a.entries} == pytest.approx(
            {e.tokens: e.final_score for e in b.entries})
        assert [e.final_score for e in a.entries] == sorted((e.final_score for e in a.entries), reverse=True)

    def test_json_round_trip(self):
        nb = rescore(_nbest([-1.0, -2.0], [-3.0, -1.0]), RescoreParams())
        back = NBestList.from_json(nb.to_json())
        assert back == nb
        vocab = Vocab.synthetic(4)
        assert json.loads(nb.to_json(vocab))["hyps"][0]["text"] == vocab.detokenize(nb.entries[0].tokens)


class TestGenerateNBest:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        lp = random_log_posterior(rng, 5, 4)
        masses = enumerate_prefix_masses(lp, 3)
        expect = sorted(masses.items(), key=lambda kv: -kv[1])[:6]
        got = generate_nbest(AMPosterior("u", lp), 4 ** 5, 6)
        assert [e.tokens for e in got.entries] == [k for k, _ in expect]
        assert [e.first_pass_score for e in got.entries] == pytest.approx([v for _, v in expect], abs=1e-9)

    def test_top_entry_equals_am_only_beam(self, rng):
        lp = random_log_posterior(rng, 6, 5)
        nb = generate_nbest(AMPosterior("u", lp), 16, 1)
        hyp = decode_utterance(AMPosterior("u", lp), W, CFG,
                               FusionParams(alpha=0.0, beta_bonus=0.0, cutoff=-1e9, beam_width=16))[0]
        assert nb.entries[0].tokens == hyp.prefix

    def test_blank_only_posterior(self):
        lp = np.full((4, 5), -np.inf)
        lp[:, 4] = 0.0
        nb = generate_nbest(AMPosterior("u", lp), 10, 5)
        assert [e.tokens for e in nb.entries] == [()]

    def test_width_below_n(self, rng):
        with pytest.raises(InputError):
            generate_nbest(AMPosterior("u", random_log_posterior(rng, 3, 5)), 2, 5)


class TestTLMScoring:
    def test_empty_hypothesis_scores_zero(self):
        out = tlm_score_nbest(_nbest([-1.0], [None], tokens=[()]), W, CFG)
        assert out.entries[0].tlm_logprob == 0.0

    def test_single_token(self):
        out = tlm_score_nbest(_nbest([-1.0], [None], tokens=[(2,)]), W, CFG)
        ref = content_logprobs_full(forward_full(W, CFG, [CFG.bos_id])[0], CFG)[2]
        assert out.entries[0].tlm_logprob == pytest.approx(ref, abs=1e-12)

    def test_order_does_not_matter(self):
        toks = [(0, 1), (2,), (3, 3, 1)]
        a = tlm_score_nbest(_nbest([0, 0, 0], [None] * 3, toks), W, CFG)
        b = tlm_score_nbest(_nbest([0, 0, 0], [None] * 3, toks[::-1]), W, CFG)
        assert {e.tokens: e.tlm_logprob for e in a.entries} == {e.tokens: e.tlm_logprob for e in b.entries}

    def test_special_ids_rejected(self):
        with pytest.raises(SchemaError):
            tlm_score_nbest(_nbest([-1.0], [None], tokens=[(CFG.sep_id,)]), W, CFG)


class TestRescoreConversation:
    def _utts(self, rng):
        out = []
        for i in range(3):
            lp = random_log_posterior(rng, 6, 5, peak=3.0)
            out.append(UtteranceInput(f"u{i}", AMPosterior(f"u{i}", lp), tuple(greedy_decode(lp)), float(i)))
        return out

    def test_context_zero_is_independent(self, rng):
        utts = self._utts(rng)
        p = RescoreParams(n_best_size=5)
        res = rescore_conversation(utts, W, CFG, p, 8, 0)
        for r, u in zip(res, utts):
            nb = tlm_score_nbest(generate_nbest(u.posterior, 8, 5), W, CFG, start_state(W, CFG))
            assert r.tokens == rescore(nb, p).entries[0].tokens

    def test_runs_with_history(self, rng):
        res = rescore_conversation(self._utts(rng), W, CFG, RescoreParams(n_best_size=4), 8, 50, "gth")
        assert len(res) == 3 and all(len(r.nbest) >= 1 for r in res)
