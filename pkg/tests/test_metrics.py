"""Verdict, evidence-recall, and token-overlap metrics."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claimlens.corpus import ClaimInstance, Label, ParseError
from claimlens.harness.metrics import (
    EvalReport,
    ScoredTokens,
    accuracy,
    default_threshold_grid,
    evaluate_verdicts,
    fever_score,
    group_hit,
    load_rationale_references,
    mean_f1_at,
    normalize_tokens,
    recall_at_5,
    save_rationale_references,
    token_f1,
    tune_threshold,
)

SUP, REF, NEI = Label.SUPPORT, Label.REFUTE, Label.NEI


def _claim(cid, label, groups=()):
    return ClaimInstance(
        claim_id=cid,
        claim=("x",),
        label=label,
        evidence_groups=tuple(frozenset(g) for g in groups),
    )


class TestAccuracy:
    def test_fraction_correct(self):
        assert accuracy([SUP, REF, NEI], [SUP, NEI, NEI]) == pytest.approx(2 / 3)

    def test_empty_is_zero(self):
        assert accuracy([], []) == 0.0

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            accuracy([SUP], [])


class TestGroupHit:
    def test_whole_group_must_fit_in_top_k(self):
        ranking = [("d", i) for i in range(10)]
        assert group_hit(ranking, [[("d", 0), ("d", 4)]], k=5)
        assert not group_hit(ranking, [[("d", 0), ("d", 5)]], k=5)

    def test_group_of_six_cannot_hit_at_five(self):
        group = [("d", i) for i in range(6)]
        ranking = [("d", i) for i in range(6)]
        assert not group_hit(ranking, [group], k=5)
        assert group_hit(ranking, [group], k=6)

    def test_any_group_suffices(self):
        ranking = [("d", 0)]
        assert group_hit(ranking, [[("d", 9)], [("d", 0)]], k=5)

    def test_empty_group_never_hits(self):
        assert not group_hit([("d", 0)], [[]], k=5)


class TestRecallAt5:
    def test_nei_leaves_denominator(self):
        claims = [
            _claim("v", SUP, groups=[[("d", 0)]]),
            _claim("n", NEI),
        ]
        rankings = {"v": [("d", 0)], "n": []}
        assert recall_at_5(rankings, claims) == 1.0

    def test_missing_ranking_is_a_miss(self):
        claims = [_claim("v", SUP, groups=[[("d", 0)]])]
        assert recall_at_5({}, claims) == 0.0

    def test_all_nei_returns_zero(self):
        assert recall_at_5({}, [_claim("n", NEI)]) == 0.0


class TestFeverScore:
    def test_verifiable_needs_label_and_evidence(self):
        claims = [_claim("a", SUP, groups=[[("d", 0)]])]
        # right label, evidence found
        assert fever_score({"a": SUP}, {"a": [("d", 0)]}, claims) == 1.0
        # right label, evidence missed
        assert fever_score({"a": SUP}, {"a": [("d", 3)]}, claims) == 0.0
        # wrong label, evidence found
        assert fever_score({"a": REF}, {"a": [("d", 0)]}, claims) == 0.0

    def test_nei_scores_on_label_alone(self):
        claims = [_claim("n", NEI)]
        assert fever_score({"n": NEI}, {"n": []}, claims) == 1.0
        assert fever_score({"n": SUP}, {"n": []}, claims) == 0.0

    def test_bounded_by_accuracy_and_recall(self):
        claims = [
            _claim("a", SUP, groups=[[("d", 0)]]),
            _claim("b", REF, groups=[[("d", 1)]]),
            _claim("n", NEI),
        ]
        predicted = {"a": SUP, "b": REF, "n": SUP}
        rankings = {"a": [("d", 0)], "b": [("d", 9)], "n": []}
        # a: both right; b: evidence missed; n: label wrong
        assert fever_score(predicted, rankings, claims) == pytest.approx(1 / 3)


class TestTokenNormalization:
    def test_lowercase_punctuation_articles(self):
        assert normalize_tokens(["The", "Cat,", "sat!", "a", "''"]) == ["cat", "sat"]

    def test_token_made_only_of_punctuation_disappears(self):
        assert normalize_tokens(["...", "--"]) == []


class TestTokenF1:
    def test_article_only_difference_is_perfect(self):
        assert token_f1(["the", "b"], [["b"]]) == 1.0

    def test_best_reference_wins(self):
        # vs ["b","c","d"]: overlap 2, precision 2/3, recall 2/3 -> 2/3
        # vs ["x"]: 0
        assert token_f1(["alpha", "b", "c"], [["b", "c", "d"], ["x"]]) == pytest.approx(2 / 3)

    def test_multiset_counting(self):
        # duplicated prediction token only matches once
        assert token_f1(["b", "b"], [["b"]]) == pytest.approx(2 * 0.5 * 1 / 1.5)

    def test_empty_conventions(self):
        assert token_f1([], [[]]) == 1.0
        assert token_f1(["x"], [[]]) == 0.0
        assert token_f1([], [["x"]]) == 0.0
        # no reference annotations at all: empty prediction is right
        assert token_f1([], []) == 1.0
        assert token_f1(["x"], []) == 0.0

    def test_case_and_punctuation_insensitive(self):
        assert token_f1(["Cat!"], [["cat"]]) == 1.0


class TestScoredTokens:
    def test_parallel_validation(self):
        with pytest.raises(ValueError):
            ScoredTokens(tokens=("a",), scores=(0.1, 0.2), references=())

    def test_selection_is_strict(self):
        sample = ScoredTokens(("a", "b"), (0.5, 0.7), (("a",),))
        assert sample.selected(0.5) == ["b"]
        assert sample.selected(0.7) == []


class TestThresholdTuning:
    def test_grid_is_sentinel_plus_midpoints(self):
        samples = [
            ScoredTokens(("a", "b"), (0.2, 0.8), ()),
            ScoredTokens(("c",), (0.4,), ()),
        ]
        assert default_threshold_grid(samples) == [
            pytest.approx(-0.8),
            pytest.approx(0.3),
            pytest.approx(0.6),
        ]

    def test_duplicate_scores_collapse(self):
        samples = [ScoredTokens(("a", "b"), (0.5, 0.5), ())]
        assert default_threshold_grid(samples) == [pytest.approx(-0.5)]

    def test_no_scores_fall_back(self):
        assert default_threshold_grid([]) == [0.0]

    def test_picks_best_interior_threshold(self):
        sample = ScoredTokens(("x", "y"), (0.2, 0.8), (("y",),))
        tau, best = tune_threshold([sample])
        assert tau == pytest.approx(0.5)
        assert best == 1.0

    def test_select_all_sentinel_can_win(self):
        sample = ScoredTokens(("x", "y"), (0.2, 0.8), (("x", "y"),))
        tau, best = tune_threshold([sample])
        assert tau == pytest.approx(-0.8)
        assert best == 1.0

    def test_ties_resolve_to_smallest(self):
        sample = ScoredTokens(("x",), (0.5,), (("x",),))
        tau, best = tune_threshold([sample], grid=[0.3, 0.0, 0.2])
        assert tau == 0.0
        assert best == 1.0

    def test_empty_grid_rejected(self):
        with pytest.raises(ValueError):
            tune_threshold([], grid=[])

    @given(
        scores=st.lists(st.floats(0.0, 1.0, allow_nan=False), min_size=1, max_size=6),
        data=st.data(),
    )
    @settings(max_examples=40, deadline=None)
    def test_refining_the_grid_never_hurts(self, scores, data):
        tokens = tuple(f"t{i}" for i in range(len(scores)))
        n_ref = data.draw(st.integers(0, len(scores)))
        sample = ScoredTokens(tokens, tuple(scores), (tokens[:n_ref],))
        coarse = [0.5]
        fine = coarse + data.draw(
            st.lists(st.floats(-1.0, 2.0, allow_nan=False), max_size=4)
        )
        _, best_coarse = tune_threshold([sample], grid=coarse)
        _, best_fine = tune_threshold([sample], grid=fine)
        assert best_fine >= best_coarse - 1e-12

    def test_mean_f1_over_samples(self):
        good = ScoredTokens(("x",), (1.0,), (("x",),))
        bad = ScoredTokens(("y",), (1.0,), (("z",),))
        assert mean_f1_at([good, bad], 0.5) == pytest.approx(0.5)
        assert mean_f1_at([], 0.5) == 0.0


class TestEvalReport:
    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            EvalReport(accuracy=1.2, recall_at_5=0.0, fever_score=0.0)

    def test_as_dict_drops_absent_metrics(self):
        report = EvalReport(accuracy=0.5, recall_at_5=0.5, fever_score=0.25)
        assert set(report.as_dict()) == {"accuracy", "recall_at_5", "fever_score"}
        report = EvalReport(
            accuracy=0.5, recall_at_5=0.5, fever_score=0.25, rai=0.9, token_f1=0.7, threshold=0.1
        )
        assert set(report.as_dict()) == {
            "accuracy", "recall_at_5", "fever_score", "rai", "token_f1", "threshold",
        }

    def test_evaluate_verdicts_bundle(self):
        claims = [
            _claim("a", SUP, groups=[[("d", 0)]]),
            _claim("n", NEI),
        ]
        predicted = {"a": SUP, "n": NEI}
        rankings = {"a": [("d", 0)], "n": []}
        report = evaluate_verdicts(predicted, rankings, claims, rai=0.75)
        assert report.accuracy == 1.0
        assert report.recall_at_5 == 1.0
        assert report.fever_score == 1.0
        assert report.rai == 0.75
        by_id = {row["claim_id"]: row for row in report.per_claim}
        assert by_id["a"]["evidence_hit"] is True
        assert by_id["n"]["evidence_hit"] is None


class TestRationaleReferenceIO:
    def test_round_trip(self, tmp_path):
        references = {
            "c1": [["alpha", "beta"], ["gamma"]],
            "c2": [],
        }
        path = tmp_path / "refs.jsonl"
        save_rationale_references(references, path)
        loaded = load_rationale_references(path)
        assert loaded == {
            "c1": (("alpha", "beta"), ("gamma",)),
            "c2": (),
        }

    def test_wrong_schema_rejected(self, tmp_path):
        path = tmp_path / "refs.jsonl"
        path.write_text('{"schema": "other/v9", "claim_id": "c", "references": []}\n')
        with pytest.raises(ParseError, match="schema"):
            load_rationale_references(path)
