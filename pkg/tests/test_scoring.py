import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import naive_late_interaction, naive_rank
from mvli.core import FeatureSet, InputError, Rng, ShapeError
from mvli.scoring import late_interaction_score, rank_exact

from conftest import random_feature_set


def _fs(rows):
    arr = np.array(rows, dtype=np.float64)
    return FeatureSet(arr, tuple("textual" for _ in range(arr.shape[0])))


class TestLateInteractionScore:
    def test_exact_match_dominates(self):
        q = _fs([[1.0, 0.0]])
        d = _fs([[1.0, 0.0], [0.0, 1.0]])
        assert late_interaction_score(q, d) == pytest.approx(1.0)

    def test_two_query_tokens_one_doc_token(self):
        q = _fs([[1.0, 0.0], [0.0, 1.0]])
        d = _fs([[0.6, 0.8]])
        expected = naive_late_interaction(q.vectors, d.vectors)
        assert expected == pytest.approx(1.4)
        assert late_interaction_score(q, d) == pytest.approx(expected)

    def test_one_query_token_two_doc_tokens(self):
        q = _fs([[0.6, 0.8]])
        d = _fs([[1.0, 0.0], [0.0, 1.0]])
        expected = naive_late_interaction(q.vectors, d.vectors)
        assert expected == pytest.approx(0.8)
        assert late_interaction_score(q, d) == pytest.approx(expected)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            late_interaction_score(_fs([[1.0, 0.0]]), _fs([[1.0, 0.0, 0.0]]))

    @given(st.integers(0, 100_000))
    @settings(max_examples=80, deadline=None)
    def test_matches_bruteforce_oracle(self, seed):
        rng = Rng(seed)
        gen = rng.split("sizes").generator()
        q = random_feature_set(rng.split("q"), int(gen.integers(1, 8)), 6)
        d = random_feature_set(rng.split("d"), int(gen.integers(1, 10)), 6)
        assert late_interaction_score(q, d) == pytest.approx(
            naive_late_interaction(q.vectors, d.vectors), abs=1e-12
        )

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_adding_doc_token_never_decreases(self, seed):
        rng = Rng(seed)
        q = random_feature_set(rng.split("q"), 4, 6)
        d = random_feature_set(rng.split("d"), 5, 6)
        extra = random_feature_set(rng.split("x"), 1, 6)
        bigger = FeatureSet(
            np.vstack([d.vectors, extra.vectors]), d.provenance + extra.provenance
        )
        assert late_interaction_score(q, bigger) >= late_interaction_score(q, d) - 1e-12

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariance(self, seed):
        rng = Rng(seed)
        q = random_feature_set(rng.split("q"), 5, 6)
        d = random_feature_set(rng.split("d"), 7, 6)
        gen = rng.split("perm").generator()
        qp = FeatureSet(q.vectors[gen.permutation(5)], q.provenance)
        dp = FeatureSet(d.vectors[gen.permutation(7)], d.provenance)
        assert late_interaction_score(qp, dp) == pytest.approx(
            late_interaction_score(q, d), abs=1e-12
        )

    @given(st.integers(0, 100_000))
    @settings(max_examples=60, deadline=None)
    def test_upper_bound_is_query_size(self, seed):
        rng = Rng(seed)
        q = random_feature_set(rng.split("q"), 6, 6)
        d = random_feature_set(rng.split("d"), 9, 6)
        assert late_interaction_score(q, d) <= len(q) + 1e-9

    def test_bound_tight_iff_exact_matches(self):
        q = _fs([[1.0, 0.0], [0.0, 1.0]])
        d = _fs([[0.0, 1.0], [1.0, 0.0], [0.6, 0.8]])
        assert late_interaction_score(q, d) == pytest.approx(len(q))


class TestRankExact:
    def _corpus(self, seed=3, n_docs=8):
        rng = Rng(seed)
        return {
            f"d{i:02d}": random_feature_set(rng.split(i), 5, 6) for i in range(n_docs)
        }

    def test_k_clamps_to_corpus(self):
        corpus = self._corpus()
        q = random_feature_set(Rng(1), 3, 6)
        assert len(rank_exact(q, corpus, 100)) == len(corpus)

    def test_matches_naive_oracle(self):
        corpus = self._corpus()
        q = random_feature_set(Rng(2), 3, 6)
        got = [(s.doc_id, s.score) for s in rank_exact(q, corpus, 5)]
        expected = naive_rank(q.vectors, {k: v.vectors for k, v in corpus.items()}, 5)
        assert [g[0] for g in got] == [e[0] for e in expected]
        for g, e in zip(got, expected):
            assert g[1] == pytest.approx(e[1], abs=1e-12)

    def test_duplicate_documents_rank_adjacent_by_id(self):
        base = random_feature_set(Rng(5), 4, 6)
        corpus = {"b": base, "a": base, "z": random_feature_set(Rng(6), 4, 6)}
        ranked = rank_exact(random_feature_set(Rng(7), 3, 6), corpus, 3)
        ids = [s.doc_id for s in ranked]
        assert abs(ids.index("a") - ids.index("b")) == 1
        assert ids.index("a") < ids.index("b")

    def test_single_doc_corpus(self):
        corpus = {"only": random_feature_set(Rng(8), 4, 6)}
        ranked = rank_exact(random_feature_set(Rng(9), 2, 6), corpus, 1)
        assert ranked[0].doc_id == "only"

    def test_empty_corpus_rejected(self):
        with pytest.raises(InputError):
            rank_exact(random_feature_set(Rng(1), 2, 6), {}, 1)
