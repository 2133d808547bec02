"""Score-matrix distributions, the verdict ensemble, and rationale scoring.

Reference values are computed two ways: a few tiny fixtures worked out by
hand (exact fractions below), and a brute-force oracle that normalizes each
group of cells with explicit Python loops over ``exp``.
"""

import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from claimlens.encoding import GatheredReps
from claimlens.relevance import (
    IRRELEVANT,
    NUM_CLASSES,
    REFUTING,
    SUPPORTING,
    CrossAttentionScorer,
    LossConfig,
    RelevanceHead,
    ScoreMatrix,
    detect_conflicting,
    ensemble_log_veracity,
    ensemble_veracity,
    l2_penalty,
    provenance_joint_log_probs,
    provenance_log_partition,
    provenance_marginal_log_probs,
    rank_provenances,
    relevance_loss,
    relevance_scores,
    segment_logsumexp,
    select_rationale_tokens,
    token_rationale_scores,
    total_loss,
)


def _matrix(logits, sentences, blocks):
    return ScoreMatrix(
        logits=torch.tensor(logits, dtype=torch.float64),
        token_sentence=torch.tensor(sentences, dtype=torch.long),
        token_block=torch.tensor(blocks, dtype=torch.long),
    )


def _empty_matrix():
    return ScoreMatrix(
        logits=torch.zeros((0, NUM_CLASSES), dtype=torch.float64),
        token_sentence=torch.zeros(0, dtype=torch.long),
        token_block=torch.zeros(0, dtype=torch.long),
    )


def _brute_force(matrix):
    """Per-provenance joint and marginal probabilities via explicit loops."""
    cells = matrix.logits.tolist()
    groups = {}
    for row, prov in enumerate(matrix.token_provenance.tolist()):
        groups.setdefault(prov, []).append(row)
    joint = [[0.0] * NUM_CLASSES for _ in cells]
    marginal = [[0.0] * NUM_CLASSES for _ in range(matrix.num_provenances)]
    for prov, rows in groups.items():
        z = sum(math.exp(cells[r][c]) for r in rows for c in range(NUM_CLASSES))
        for r in rows:
            for c in range(NUM_CLASSES):
                p = math.exp(cells[r][c]) / z
                joint[r][c] = p
                marginal[prov][c] += p
    return joint, marginal


def _global_softmax(matrix):
    """Single softmax over every cell of the matrix, summed per class."""
    cells = matrix.logits.tolist()
    z = sum(math.exp(v) for row in cells for v in row)
    return [sum(math.exp(row[c]) for row in cells) / z for c in range(NUM_CLASSES)]


finite_logits = st.floats(-8.0, 8.0, allow_nan=False, allow_infinity=False)


@st.composite
def random_matrices(draw):
    n_tokens = draw(st.integers(1, 12))
    n_provs = draw(st.integers(1, 4))
    logits = draw(
        st.lists(
            st.lists(finite_logits, min_size=NUM_CLASSES, max_size=NUM_CLASSES),
            min_size=n_tokens,
            max_size=n_tokens,
        )
    )
    provs = draw(
        st.lists(st.integers(0, n_provs - 1), min_size=n_tokens, max_size=n_tokens)
    )
    return _matrix(logits, provs, [0] * n_tokens)


class TestHandWorkedValues:
    """Fixtures small enough to normalize with pencil and paper."""

    def test_two_token_single_sentence(self):
        # cells exp to [[2, 1, 1], [1, 1, 1]], partition 7
        matrix = _matrix(
            [[math.log(2.0), 0.0, 0.0], [0.0, 0.0, 0.0]], [0, 0], [0, 0]
        )
        joint = provenance_joint_log_probs(matrix).exp()
        expected = torch.tensor([[2 / 7, 1 / 7, 1 / 7], [1 / 7, 1 / 7, 1 / 7]], dtype=torch.float64)
        assert torch.allclose(joint, expected, atol=1e-12)

        marginal = provenance_marginal_log_probs(matrix).exp()
        assert torch.allclose(
            marginal, torch.tensor([[3 / 7, 2 / 7, 2 / 7]], dtype=torch.float64), atol=1e-12
        )
        assert relevance_scores(matrix).item() == pytest.approx(5 / 7, abs=1e-12)
        # token rationale = joint supporting + refuting mass per token
        assert token_rationale_scores(matrix).tolist() == pytest.approx(
            [3 / 7, 2 / 7], abs=1e-12
        )

    def test_all_zero_scores_are_uniform(self):
        matrix = _matrix([[0.0] * 3, [0.0] * 3], [0, 0], [0, 0])
        joint = provenance_joint_log_probs(matrix).exp()
        assert torch.allclose(joint, torch.full((2, 3), 1 / 6, dtype=torch.float64), atol=1e-12)
        marginal = provenance_marginal_log_probs(matrix)
        assert torch.allclose(
            marginal, torch.full((1, 3), math.log(1 / 3), dtype=torch.float64), atol=1e-12
        )

    def test_l2_is_mean_squared_entry(self):
        matrix = _matrix([[1.0, 2.0, 2.0]], [0], [0])
        assert l2_penalty(matrix).item() == pytest.approx(3.0, abs=1e-12)

    def test_log_partition(self):
        matrix = _matrix([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [0, 1], [0, 0])
        assert provenance_log_partition(matrix).tolist() == pytest.approx(
            [math.log(3.0), math.log(3.0)], abs=1e-12
        )


class TestBruteForceOracle:
    @given(random_matrices())
    @settings(max_examples=80, deadline=None)
    def test_joint_and_marginals_match(self, matrix):
        joint_o, marginal_o = _brute_force(matrix)
        joint = provenance_joint_log_probs(matrix).exp().tolist()
        marginal = provenance_marginal_log_probs(matrix).exp().tolist()
        for got, want in zip(joint, joint_o):
            assert got == pytest.approx(want, abs=1e-9)
        for got, want in zip(marginal, marginal_o):
            assert got == pytest.approx(want, abs=1e-9)

    @given(random_matrices())
    @settings(max_examples=80, deadline=None)
    def test_both_verdict_routes_match_global_softmax(self, matrix):
        want = _global_softmax(matrix)
        assert ensemble_veracity(matrix).tolist() == pytest.approx(want, abs=1e-9)
        assert ensemble_log_veracity(matrix).exp().tolist() == pytest.approx(want, abs=1e-9)


class TestDistributionProperties:
    @given(random_matrices())
    @settings(max_examples=60, deadline=None)
    def test_normalization(self, matrix):
        joint = provenance_joint_log_probs(matrix).exp()
        sums = torch.zeros(matrix.num_provenances, dtype=torch.float64)
        sums = sums.index_add(0, matrix.token_provenance, joint.sum(dim=-1))
        assert torch.allclose(sums, torch.ones_like(sums), atol=1e-9)
        marginal_sums = provenance_marginal_log_probs(matrix).exp().sum(dim=-1)
        assert torch.allclose(marginal_sums, torch.ones_like(marginal_sums), atol=1e-9)
        assert ensemble_veracity(matrix).sum().item() == pytest.approx(1.0, abs=1e-9)

    @given(random_matrices(), st.floats(-5.0, 5.0, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_per_provenance_shift_invariance(self, matrix, shift):
        # adding a constant to every cell of one provenance leaves its
        # distributions unchanged
        shifted_logits = matrix.logits.clone()
        shifted_logits[matrix.token_provenance == 0] += shift
        shifted = ScoreMatrix(shifted_logits, matrix.token_sentence, matrix.token_block)
        assert torch.allclose(
            provenance_joint_log_probs(matrix),
            provenance_joint_log_probs(shifted),
            atol=1e-9,
        )
        assert torch.allclose(
            provenance_marginal_log_probs(matrix),
            provenance_marginal_log_probs(shifted),
            atol=1e-9,
        )

    @given(random_matrices(), st.floats(-5.0, 5.0, allow_nan=False))
    @settings(max_examples=60, deadline=None)
    def test_verdict_global_shift_invariance(self, matrix, shift):
        shifted = ScoreMatrix(
            matrix.logits + shift, matrix.token_sentence, matrix.token_block
        )
        assert torch.allclose(
            ensemble_veracity(matrix), ensemble_veracity(shifted), atol=1e-9
        )

    def test_extreme_logits_stay_finite(self):
        matrix = _matrix([[700.0, -700.0, 0.0], [699.0, 0.0, -700.0]], [0, 1], [0, 0])
        assert torch.isfinite(provenance_joint_log_probs(matrix)).all()
        assert torch.isfinite(ensemble_log_veracity(matrix)).all()
        assert torch.isfinite(ensemble_veracity(matrix)).all()


class TestScoreMatrixBookkeeping:
    def test_provenances_in_first_appearance_order(self):
        matrix = _matrix(
            [[0.0] * 3] * 4, sentences=[2, 0, 2, 1], blocks=[0, 1, 0, 1]
        )
        assert matrix.provenances == [(2, 0), (0, 1), (1, 1)]
        assert matrix.token_provenance.tolist() == [0, 1, 0, 2]
        assert matrix.provenance_index(0, 1) == 1
        assert matrix.tokens_of(0).tolist() == [0, 2]

    def test_missing_provenance_raises(self):
        matrix = _matrix([[0.0] * 3], [0], [0])
        with pytest.raises(KeyError):
            matrix.provenance_index(5, 5)

    def test_shape_validation(self):
        with pytest.raises(ValueError, match="logits"):
            _matrix([[0.0, 0.0]], [0], [0])
        with pytest.raises(ValueError, match="parallel"):
            ScoreMatrix(
                torch.zeros((2, 3)),
                torch.tensor([0]),
                torch.tensor([0]),
            )


class TestRanking:
    def test_descending_relevance(self):
        # provenance 0 is confidently irrelevant, provenance 1 supporting
        matrix = _matrix(
            [[0.0, 0.0, 5.0], [5.0, 0.0, 0.0]], [0, 1], [0, 0]
        )
        assert rank_provenances(matrix) == [(1, 0), (0, 0)]

    def test_ties_broken_by_block_then_sentence(self):
        matrix = _matrix(
            [[1.0, 1.0, 1.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]],
            sentences=[3, 0, 1],
            blocks=[0, 1, 0],
        )
        assert rank_provenances(matrix) == [(1, 0), (3, 0), (0, 1)]


class TestLosses:
    def test_relevance_loss_is_mean_of_labeled_marginals(self):
        matrix = _matrix(
            [[2.0, 0.0, -1.0], [0.0, 1.0, 0.5], [-1.0, 0.0, 3.0]],
            sentences=[0, 1, 2],
            blocks=[0, 0, 0],
        )
        labeled = {(0, 0): SUPPORTING, (2, 0): IRRELEVANT}
        marginal = provenance_marginal_log_probs(matrix)
        want = (marginal[0, SUPPORTING] + marginal[2, IRRELEVANT]) / 2
        assert relevance_loss(matrix, labeled).item() == pytest.approx(want.item(), abs=1e-12)

    def test_empty_annotation_contributes_zero(self):
        matrix = _matrix([[1.0, 2.0, 3.0]], [0], [0])
        loss = relevance_loss(matrix, {})
        assert loss.item() == 0.0

    def test_unknown_provenance_raises(self):
        matrix = _matrix([[0.0] * 3], [0], [0])
        with pytest.raises(KeyError):
            relevance_loss(matrix, {(9, 9): SUPPORTING})

    def test_total_loss_composition(self):
        matrix = _matrix(
            [[1.0, 0.0, 0.0], [0.0, -1.0, 2.0]], [0, 1], [0, 0]
        )
        labeled = {(0, 0): SUPPORTING, (1, 0): IRRELEVANT}
        config = LossConfig(lambda_relevance=0.7, lambda_l2=0.3)
        want = (
            ensemble_log_veracity(matrix)[REFUTING]
            + 0.7 * relevance_loss(matrix, labeled)
            - 0.3 * l2_penalty(matrix)
        )
        got = total_loss(matrix, REFUTING, labeled, config)
        assert got.item() == pytest.approx(want.item(), abs=1e-12)

    def test_gradients_flow_and_are_finite(self):
        logits = torch.randn((5, 3), dtype=torch.float64, requires_grad=True)
        matrix = ScoreMatrix(
            logits, torch.tensor([0, 0, 1, 1, 2]), torch.zeros(5, dtype=torch.long)
        )
        loss = total_loss(matrix, SUPPORTING, {(0, 0): SUPPORTING, (2, 0): IRRELEVANT})
        loss.backward()
        assert logits.grad is not None
        assert torch.isfinite(logits.grad).all()
        assert logits.grad.abs().sum() > 0

    def test_verdict_requires_evidence(self):
        empty = _empty_matrix()
        with pytest.raises(ValueError, match="zero evidence"):
            ensemble_log_veracity(empty)
        with pytest.raises(ValueError, match="zero evidence"):
            ensemble_veracity(empty)


class TestRationalesAndConflicts:
    def test_selection_is_strict(self):
        matrix = _matrix([[0.0, 0.0, 0.0]], [0], [0])
        score = token_rationale_scores(matrix)[0].item()  # exactly 2/3
        assert select_rationale_tokens(matrix, score).tolist() == [False]
        assert select_rationale_tokens(matrix, score - 1e-9).tolist() == [True]

    def test_conflict_requires_both_sides(self):
        support_row = [12.0, 0.0, 0.0]
        refute_row = [0.0, 12.0, 0.0]
        both = _matrix([support_row, refute_row], [0, 1], [0, 0])
        assert detect_conflicting(both, threshold=0.9)
        only_support = _matrix([support_row, support_row], [0, 1], [0, 0])
        assert not detect_conflicting(only_support, threshold=0.9)

    def test_conflict_threshold_respected(self):
        # marginals here are ~(0.7, 0.15, 0.15) and mirrored: no side > 0.9
        support_row = [1.54, 0.0, 0.0]
        refute_row = [0.0, 1.54, 0.0]
        matrix = _matrix([support_row, refute_row], [0, 1], [0, 0])
        assert not detect_conflicting(matrix, threshold=0.9)
        assert detect_conflicting(matrix, threshold=0.5)

    def test_empty_matrix_never_conflicts(self):
        empty = _empty_matrix()
        assert not detect_conflicting(empty)


class TestSegmentLogsumexp:
    def test_matches_per_segment_logsumexp(self):
        values = torch.randn((6, 3), dtype=torch.float64)
        segments = torch.tensor([0, 0, 2, 1, 2, 2])
        out = segment_logsumexp(values, segments, 3)
        for seg in range(3):
            rows = values[segments == seg]
            assert torch.allclose(out[seg], torch.logsumexp(rows, dim=0), atol=1e-12)

    def test_empty_segment_is_neg_inf(self):
        values = torch.zeros((1, 2), dtype=torch.float64)
        out = segment_logsumexp(values, torch.tensor([1]), 2)
        assert out[0].tolist() == [-math.inf, -math.inf]


class TestHeads:
    def _reps(self, n_tokens=4, n_markers=2, dim=16):
        return GatheredReps(
            evidence=torch.randn(n_tokens, dim),
            markers=torch.randn(n_markers, dim),
            token_sentence=torch.tensor([0, 0, 1, 1][:n_tokens]),
            token_block=torch.zeros(n_tokens, dtype=torch.long),
            token_offset=torch.tensor([0, 1, 0, 1][:n_tokens]),
            marker_sentence=torch.tensor([0, 1][:n_markers]),
            marker_block=torch.zeros(n_markers, dtype=torch.long),
            token_strings=["a", "b", "c", "d"][:n_tokens],
            doc_ids=["d"],
        )

    def test_head_produces_score_matrix(self):
        head = RelevanceHead(dim=16, heads=2)
        head.eval()
        matrix = head(self._reps())
        assert matrix.logits.shape == (4, NUM_CLASSES)
        assert matrix.provenances == [(0, 0), (1, 0)]

    def test_empty_input_yields_empty_matrix(self):
        head = RelevanceHead(dim=16, heads=2)
        reps = GatheredReps(
            evidence=torch.zeros((0, 16)),
            markers=torch.zeros((0, 16)),
            token_sentence=torch.zeros(0, dtype=torch.long),
            token_block=torch.zeros(0, dtype=torch.long),
            token_offset=torch.zeros(0, dtype=torch.long),
            marker_sentence=torch.zeros(0, dtype=torch.long),
            marker_block=torch.zeros(0, dtype=torch.long),
            token_strings=[],
            doc_ids=[],
        )
        assert head(reps).num_tokens == 0

    def test_scorer_output_dim(self):
        scorer = CrossAttentionScorer(dim=16, out_dim=2, heads=2)
        scorer.eval()
        out = scorer.scores(torch.randn(5, 16), torch.randn(3, 16))
        assert out.shape == (5, 2)
