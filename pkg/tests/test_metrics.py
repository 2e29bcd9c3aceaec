from __future__ import annotations

import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import CIDER_FIXTURE, MINI_WUPS, brute_ranks, cider_spreadsheet, weak_orderings
from vidistill.metrics import (EvalReport, Taxonomy, caption_stats, cider, cider_scores, exact_match, recall_at_k,
                               true_ranks, wups, zeroshot_classify)


class TestRecall:
    def test_identity(self):
        assert recall_at_k(np.eye(4), [0, 1, 2, 3], 1) == 1.0

    def test_anti_diagonal_truth(self):
        assert recall_at_k(np.eye(4), [3, 2, 1, 0], 1) == 0.0

    def test_ties_go_to_lower_index(self):
        sim = np.zeros((2, 3))
        assert list(true_ranks(sim, [0, 2])) == [0, 2]

    def test_errors(self):
        with pytest.raises(IndexError):
            recall_at_k(np.eye(3), [0, 1, 3], 1)
        with pytest.raises(ValueError):
            recall_at_k(np.eye(3), [0, 1, 2], 4)

    @pytest.mark.parametrize("g", range(1, 7))
    def test_every_ordering_against_sorting(self, g):
        rows = weak_orderings(g)
        for truth in range(g):
            np.testing.assert_array_equal(true_ranks(rows, np.full(len(rows), truth)), brute_ranks(rows, truth))

    def test_random_10x10(self, rng):
        sim = rng.normal(size=(10, 10))
        gt = rng.permutation(10)
        ranks = np.array([sorted(range(10), key=lambda j: (-sim[q, j], j)).index(gt[q]) for q in range(10)])
        for k in range(1, 11):
            assert recall_at_k(sim, gt, k) == np.mean(ranks < k)

    @given(st.integers(0, 10_000))
    def test_monotone_in_k(self, seed):
        r = np.random.default_rng(seed)
        sim = r.integers(0, 3, size=(5, 6))
        gt = r.integers(0, 6, size=5)
        values = [recall_at_k(sim, gt, k) for k in range(1, 7)]
        assert values == sorted(values) and values[-1] == 1.0


class TestZeroShot:
    def test_perfect_match(self):
        names = ["a", "b"]
        table = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0])}
        assert zeroshot_classify(np.array([[1.0, 0.0]]), [0], names, table.__getitem__) == (1.0, 1.0)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError):
            zeroshot_classify(np.ones((1, 2)), [0], ["a"], lambda c: np.ones(2))

    def test_chance_level(self, rng):
        table = rng.normal(size=(6, 8))
        videos = rng.normal(size=(10_000, 8))
        top1, top5 = zeroshot_classify(videos, rng.integers(0, 6, size=10_000), list("abcdef"),
                                       lambda c: table["abcdef".index(c)])
        assert abs(top1 - 1 / 6) < 0.02
        assert top5 >= top1


class TestCider:
    def test_matches_spreadsheet(self):
        sheet = cider_spreadsheet()
        res = cider_scores({k: v[0] for k, v in CIDER_FIXTURE.items()}, {k: v[1] for k, v in CIDER_FIXTURE.items()})
        for i, score in res.per_id.items():
            assert abs(score - sheet[i]) < 1e-9
        assert abs(res.score - sheet["corpus"]) < 1e-9

    def test_identical_with_disjoint_ids_scores_ten(self):
        # four words, so every n-gram order up to 4 is present
        res = cider_scores({"x": "a red circle spins", "y": "the blue square waits"},
                           {"x": ["a red circle spins"], "y": ["the blue square waits"]})
        assert res.per_id["x"] == pytest.approx(10.0)

    def test_no_shared_ngrams_scores_zero(self):
        res = cider_scores({"x": "green triangle", "y": "blue square"}, {"x": ["red circle"], "y": ["blue square"]})
        assert res.per_id["x"] == 0.0

    def test_empty_candidate_flagged(self):
        res = cider_scores({"x": "", "y": "blue square"}, {"x": ["red circle"], "y": ["blue square"]})
        assert res.per_id["x"] == 0.0 and res.empty == ["x"]

    def test_invariant_to_reference_order_and_duplication(self):
        cand = {k: v[0] for k, v in CIDER_FIXTURE.items()}
        refs = {k: v[1] for k, v in CIDER_FIXTURE.items()}
        base = cider(cand, refs)
        assert cider(cand, {k: v[::-1] for k, v in refs.items()}) == pytest.approx(base, abs=1e-12)
        assert cider(cand, {k: v + v for k, v in refs.items()}) == pytest.approx(base, abs=1e-12)

    def test_needs_two_ids_and_references(self):
        with pytest.raises(ValueError):
            cider({"x": "a"}, {"x": ["a"]})
        with pytest.raises(ValueError):
            cider({"x": "a", "y": "b"}, {"x": ["a"], "y": []})


@pytest.fixture(scope="module")
def tax():
    return Taxonomy.mini()


class TestWups:
    def test_three_level_hand_value(self):
        tax = Taxonomy({"animal": "root", "dog": "animal", "cat": "animal"}, "root")
        assert tax.wup("dog", "cat") == pytest.approx(2 * 2 / 6, abs=1e-12)
        assert abs(wups(["dog"], ["cat"], tax, 0.9) - 0.0667) < 1e-4
        assert abs(wups(["dog"], ["cat"], tax, 0.9) - 0.1 * 4 / 6) < 1e-9

    @pytest.mark.parametrize("pred, ans, threshold, expected", MINI_WUPS)
    def test_mini_taxonomy_hand_values(self, tax, pred, ans, threshold, expected):
        assert abs(wups([pred], [ans], tax, threshold) - expected) < 1e-9

    def test_bundled_taxonomy_size(self, tax):
        assert len(tax._depth) >= 60

    def test_out_of_taxonomy_words(self, tax):
        assert wups(["zebra"], ["okapi"], tax) == 0.0
        assert wups(["zebra"], ["zebra"], tax) == 1.0

    def test_symmetric(self, tax):
        for p, a in itertools.product(["red circle", "dog", "blue", "square spins"], repeat=2):
            assert wups([p], [a], tax) == wups([a], [p], tax)

    def test_errors(self, tax):
        with pytest.raises(ValueError):
            wups(["x"], [""], tax)
        with pytest.raises(ValueError):
            wups(["x"], ["x"], tax, threshold=0.0)

    def test_cycle_rejected(self):
        with pytest.raises(ValueError):
            Taxonomy({"a": "b", "b": "a"}, "root")

    def test_json_file(self, tmp_path):
        (tmp_path / "t.json").write_text(json.dumps({"parent": {"dog": "animal", "animal": "entity"}, "root": "entity"}))
        assert Taxonomy.load(tmp_path / "t.json").depth("dog") == 3


class TestExactMatchAndStats:
    def test_exact_match(self):
        assert exact_match(["a", "b"], ["a", "b"]) == 1.0
        assert exact_match(["Red"], ["red "]) == 1.0
        assert exact_match(["x", "y"], ["a", "b"]) == 0.0
        with pytest.raises(ValueError):
            exact_match(["a"], [])

    def test_caption_stats(self):
        assert caption_stats(["a b c"]) == (3.0, 3)
        assert caption_stats(["a a", "a"]) == (1.5, 1)


class TestReport:
    def test_json_round_trip_and_csv(self, tmp_path):
        report = EvalReport({"r_at_1": 0.25, "cider": 3.5}, {"seed": 1}, 1, {"test": 4}, "abc")
        assert EvalReport.from_json(report.to_json()) == report
        js, cs = report.write(tmp_path / "report")
        assert js.read_text() == report.to_json()
        assert cs.read_text().splitlines() == ["metric,value,config_hash", "cider,3.5,abc", "r_at_1,0.25,abc"]

    def test_bounds(self):
        with pytest.raises(ValueError):
            EvalReport({"r_at_1": 1.5}, {}, 0)
        with pytest.raises(ValueError):
            EvalReport({"cider": 11.0}, {}, 0)
        with pytest.raises(ValueError):
            EvalReport({"loss": float("nan")}, {}, 0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["red", "circle", "dog", "moves", "zebra"]), min_size=1, max_size=3),
       st.lists(st.sampled_from(["red", "circle", "dog", "moves", "zebra"]), min_size=1, max_size=3))
def test_metrics_are_pure(p, a):
    tax = Taxonomy.mini()
    assert wups([" ".join(p)], [" ".join(a)], tax) == wups([" ".join(p)], [" ".join(a)], tax)
