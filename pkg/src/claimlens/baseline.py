"""Globally-normalized relevance head: the comparison system.

Shares the score matrix with the main head but normalizes all cells in one
softmax (optionally restricted to annotated sentences during training) and
trains on sentence-level joint masses instead of per-provenance marginals.
At test time its verdict reduces to the same global column sums as the main
head's ensemble, so the two systems differ only in their training losses.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .relevance import IRRELEVANT, NUM_CLASSES, REFUTING, SUPPORTING, ScoreMatrix

SentenceRef = tuple[int, int]


@dataclass(frozen=True)
class BaselineAnnotation:
    """Sentence-level training annotations.

    ``positives`` pairs a sentence reference with its supporting/refuting
    class; ``negatives`` only widen the training-time normalization and never
    receive a target (pushing them toward the irrelevant class hurts, which
    is exactly what the ``loss_b2`` variant demonstrates).
    """

    positives: tuple[tuple[SentenceRef, int], ...] = ()
    negatives: tuple[SentenceRef, ...] = ()

    def __post_init__(self) -> None:
        for _, cls in self.positives:
            if cls not in (SUPPORTING, REFUTING):
                raise ValueError(f"positive annotations must be supporting/refuting, got class {cls}")

    @property
    def restriction(self) -> tuple[SentenceRef, ...]:
        seen: dict[SentenceRef, None] = {}
        for ref, _ in self.positives:
            seen.setdefault(ref)
        for ref in self.negatives:
            seen.setdefault(ref)
        return tuple(seen)


@dataclass
class JointDistribution:
    """One softmax over every participating (token, class) cell."""

    matrix: ScoreMatrix
    participating: Tensor  # (L_e,) bool
    log_z: Tensor  # scalar

    def _rows_of(self, sentence: int, block: int) -> Tensor:
        rows = (
            (self.matrix.token_sentence == sentence)
            & (self.matrix.token_block == block)
            & self.participating
        ).nonzero(as_tuple=True)[0]
        if rows.numel() == 0:
            raise KeyError(f"sentence ({sentence}, {block}) does not participate in this joint")
        return rows

    def sentence_log_marginal(self, sentence: int, block: int) -> Tensor:
        """log P(s, y) over classes: log-sum-exp of the sentence's token cells."""
        rows = self._rows_of(sentence, block)
        return torch.logsumexp(self.matrix.logits[rows], dim=0) - self.log_z

    def class_log_mass(self) -> Tensor:
        """log P(y): per-class total over all participating cells, shape (3,)."""
        rows = self.participating.nonzero(as_tuple=True)[0]
        return torch.logsumexp(self.matrix.logits[rows], dim=0) - self.log_z

    def cell_probs(self) -> Tensor:
        """(L_e, 3) probabilities; zero on non-participating rows."""
        probs = torch.exp(self.matrix.logits - self.log_z)
        return probs * self.participating[:, None].to(probs.dtype)


def joint_distribution(
    matrix: ScoreMatrix, restrict: Sequence[SentenceRef] | None = None
) -> JointDistribution:
    """Normalize the score matrix in a single softmax across blocks.

    With ``restrict``, only tokens of the listed sentences participate (the
    training-time rule); restriction matching no tokens is an error.
    """
    if restrict is None:
        participating = torch.ones(matrix.num_tokens, dtype=torch.bool, device=matrix.logits.device)
    else:
        participating = torch.zeros(matrix.num_tokens, dtype=torch.bool, device=matrix.logits.device)
        for sentence, block in restrict:
            participating |= (matrix.token_sentence == sentence) & (matrix.token_block == block)
    rows = participating.nonzero(as_tuple=True)[0]
    if rows.numel() == 0:
        raise ValueError("joint restriction selects zero tokens")
    log_z = torch.logsumexp(matrix.logits[rows].reshape(-1), dim=0)
    return JointDistribution(matrix=matrix, participating=participating, log_z=log_z)


def loss_b0(matrix: ScoreMatrix, annotation: BaselineAnnotation) -> Tensor:
    """Mean log joint mass of the positive sentences under the restricted
    softmax; zero when there are no positives."""
    if not annotation.positives:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    joint = joint_distribution(matrix, annotation.restriction)
    terms = [joint.sentence_log_marginal(*ref)[cls] for ref, cls in annotation.positives]
    return torch.stack(terms).mean()


def loss_b1(matrix: ScoreMatrix, gold_class: int) -> Tensor:
    """Log total mass of the gold class under the unrestricted softmax."""
    return joint_distribution(matrix).class_log_mass()[gold_class]


def combined_baseline_loss(
    matrix: ScoreMatrix,
    annotation: BaselineAnnotation,
    gold_class: int,
    sentence_weight: float = 0.5,
) -> Tensor:
    """Interpolated sentence + verdict objective (to be maximized).

    Without positive annotations (the unverifiable case) the verdict term
    stands alone rather than being halved.
    """
    verdict = loss_b1(matrix, gold_class)
    if not annotation.positives:
        return verdict
    return sentence_weight * loss_b0(matrix, annotation) + (1.0 - sentence_weight) * verdict


def loss_b2(matrix: ScoreMatrix, annotation: BaselineAnnotation) -> Tensor:
    """Variant that also drives negative sentences toward the irrelevant
    class. Shipped for completeness: training with it is a documented failure
    mode (sentence recall collapses)."""
    if not annotation.positives and not annotation.negatives:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    joint = joint_distribution(matrix, annotation.restriction)
    terms = [joint.sentence_log_marginal(*ref)[cls] for ref, cls in annotation.positives]
    terms += [joint.sentence_log_marginal(*ref)[IRRELEVANT] for ref in annotation.negatives]
    return torch.stack(terms).mean()


def loss_b3(matrix: ScoreMatrix, annotation: BaselineAnnotation) -> Tensor:
    """Log of the summed joint mass over positive annotations (marginalizes
    the choice of annotated sentence instead of averaging logs)."""
    if not annotation.positives:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    joint = joint_distribution(matrix, annotation.restriction)
    terms = [joint.sentence_log_marginal(*ref)[cls] for ref, cls in annotation.positives]
    return torch.logsumexp(torch.stack(terms), dim=0)


def loss_b4(matrix: ScoreMatrix, annotation: BaselineAnnotation) -> Tensor:
    """Like ``loss_b3`` but additionally marginalizes out the class label,
    summing each positive sentence's full mass."""
    if not annotation.positives:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    joint = joint_distribution(matrix, annotation.restriction)
    refs: dict[SentenceRef, None] = {}
    for ref, _ in annotation.positives:
        refs.setdefault(ref)
    terms = [torch.logsumexp(joint.sentence_log_marginal(*ref), dim=0) for ref in refs]
    return torch.logsumexp(torch.stack(terms), dim=0)


def baseline_rank_and_verdict(matrix: ScoreMatrix) -> tuple[list[SentenceRef], Tensor]:
    """Test-time ranking and verdict from the unrestricted joint.

    Sentences rank by their supporting + refuting joint mass; the verdict is
    the per-class total mass (algebraically the same distribution as the main
    head's ensemble on an identical score matrix).
    """
    if matrix.num_tokens == 0:
        raise ValueError("cannot rank or predict over zero evidence tokens")
    joint = joint_distribution(matrix)
    scores = []
    for sentence, block in matrix.provenances:
        marginal = torch.exp(joint.sentence_log_marginal(sentence, block))
        scores.append(float(marginal[SUPPORTING] + marginal[REFUTING]))
    order = sorted(
        range(matrix.num_provenances),
        key=lambda p: (-scores[p], matrix.provenances[p][1], matrix.provenances[p][0]),
    )
    ranking = [matrix.provenances[p] for p in order]
    verdict = torch.exp(joint.class_log_mass())
    return ranking, verdict / verdict.sum()
