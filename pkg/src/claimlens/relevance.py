"""Per-provenance relevance scoring and the linear-ensemble verdict.

A provenance is one sentence occurrence in the model input, identified by
``(sentence_index, block_slot)``. Every evidence token carries a score row
over the three classes (supporting, refuting, irrelevant); normalizing those
rows jointly per provenance yields token-level distributions whose class
marginals drive sentence ranking, and whose weighted ensemble over all
provenances yields the claim verdict. The ensemble weights are the
un-normalized provenance partition masses, which makes the verdict identical
to a single softmax over every score cell — a deliberately redundant pair of
routes that cross-checks the implementation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import torch
from torch import Tensor, nn

from .encoding import GatheredReps

SUPPORTING = 0
REFUTING = 1
IRRELEVANT = 2
NUM_CLASSES = 3


def segment_logsumexp(values: Tensor, segments: Tensor, num_segments: int) -> Tensor:
    """Log-sum-exp of ``values`` rows grouped by ``segments`` along dim 0.

    Empty segments yield ``-inf``. Works on any trailing shape; the reduction
    is over dim 0 only.
    """
    if values.shape[0] == 0:
        shape = (num_segments,) + tuple(values.shape[1:])
        return torch.full(shape, float("-inf"), dtype=values.dtype, device=values.device)
    index = segments.view(-1, *([1] * (values.ndim - 1))).expand_as(values)
    shift = torch.full(
        (num_segments,) + tuple(values.shape[1:]),
        float("-inf"),
        dtype=values.dtype,
        device=values.device,
    )
    shift = shift.scatter_reduce(0, index, values.detach(), reduce="amax", include_self=True)
    safe_shift = torch.where(torch.isinf(shift), torch.zeros_like(shift), shift)
    total = torch.zeros_like(shift)
    total = total.index_add(0, segments, torch.exp(values - safe_shift[segments]))
    return torch.where(
        torch.isinf(shift), shift, torch.log(total) + safe_shift
    )


@dataclass
class ScoreMatrix:
    """Evidence-token score rows plus provenance bookkeeping.

    ``logits`` has one row per evidence token and one column per class.
    ``provenances`` lists distinct ``(sentence_index, block_slot)`` pairs in
    order of first appearance; ``token_provenance`` indexes into it.
    """

    logits: Tensor
    token_sentence: Tensor
    token_block: Tensor
    provenances: list[tuple[int, int]] = field(init=False)
    token_provenance: Tensor = field(init=False)

    def __post_init__(self) -> None:
        if self.logits.ndim != 2 or self.logits.shape[1] != NUM_CLASSES:
            raise ValueError(f"expected (L_e, {NUM_CLASSES}) logits, got {tuple(self.logits.shape)}")
        if self.token_sentence.shape != self.token_block.shape or self.token_sentence.shape[0] != self.logits.shape[0]:
            raise ValueError("provenance arrays must run parallel to logit rows")
        order: dict[tuple[int, int], int] = {}
        indices = []
        for sent, block in zip(self.token_sentence.tolist(), self.token_block.tolist()):
            key = (sent, block)
            if key not in order:
                order[key] = len(order)
            indices.append(order[key])
        self.provenances = list(order)
        self.token_provenance = torch.tensor(indices, dtype=torch.long, device=self.logits.device)

    @classmethod
    def from_reps(cls, logits: Tensor, reps: GatheredReps) -> "ScoreMatrix":
        return cls(logits=logits, token_sentence=reps.token_sentence, token_block=reps.token_block)

    @property
    def num_tokens(self) -> int:
        return int(self.logits.shape[0])

    @property
    def num_provenances(self) -> int:
        return len(self.provenances)

    def provenance_index(self, sentence: int, block: int) -> int:
        try:
            return self.provenances.index((sentence, block))
        except ValueError:
            raise KeyError(f"no provenance ({sentence}, {block}) in this input") from None

    def tokens_of(self, provenance: int) -> Tensor:
        return (self.token_provenance == provenance).nonzero(as_tuple=True)[0]


def provenance_log_partition(matrix: ScoreMatrix) -> Tensor:
    """Per-provenance ``log sum exp`` over all of its score cells, shape (P,)."""
    flat_lse = segment_logsumexp(matrix.logits, matrix.token_provenance, matrix.num_provenances)
    return torch.logsumexp(flat_lse, dim=-1)


def provenance_joint_log_probs(matrix: ScoreMatrix) -> Tensor:
    """Log of the per-provenance joint distribution over (token, class) cells.

    Returns an (L_e, 3) tensor where the cells of each provenance sum to one
    in probability space.
    """
    log_z = provenance_log_partition(matrix)
    return matrix.logits - log_z[matrix.token_provenance][:, None]


def provenance_marginal_log_probs(matrix: ScoreMatrix) -> Tensor:
    """Per-provenance class marginals ``log sum_w P(w, y)``, shape (P, 3)."""
    per_class = segment_logsumexp(matrix.logits, matrix.token_provenance, matrix.num_provenances)
    return per_class - torch.logsumexp(per_class, dim=-1, keepdim=True)


def relevance_scores(matrix: ScoreMatrix) -> Tensor:
    """Per-provenance relevance: marginal mass on supporting + refuting, (P,)."""
    marginals = provenance_marginal_log_probs(matrix).exp()
    return marginals[:, SUPPORTING] + marginals[:, REFUTING]


def rank_provenances(matrix: ScoreMatrix) -> list[tuple[int, int]]:
    """Provenances sorted by descending relevance; ties broken by input order
    (block slot, then sentence index)."""
    scores = relevance_scores(matrix).tolist()
    order = sorted(
        range(matrix.num_provenances),
        key=lambda p: (-scores[p], matrix.provenances[p][1], matrix.provenances[p][0]),
    )
    return [matrix.provenances[p] for p in order]


def relevance_loss(matrix: ScoreMatrix, labeled: Mapping[tuple[int, int], int]) -> Tensor:
    """Mean marginal log-likelihood of the labeled provenances.

    ``labeled`` maps ``(sentence_index, block_slot)`` to a class index. An
    empty mapping (the unverifiable case has no sentence annotations)
    contributes zero.
    """
    if not labeled:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    marginals = provenance_marginal_log_probs(matrix)
    rows = []
    for (sent, block), cls in labeled.items():
        rows.append(marginals[matrix.provenance_index(sent, block), cls])
    return torch.stack(rows).mean()


def ensemble_veracity(matrix: ScoreMatrix) -> Tensor:
    """Claim verdict as the weighted ensemble of per-provenance marginals.

    Each provenance contributes its class marginal weighted by its (shifted)
    partition mass. Algebraically this equals one softmax over every score
    cell pooled across provenances; this function deliberately takes the
    ensemble route so the two can be compared.
    """
    if matrix.num_tokens == 0:
        raise ValueError("cannot form a verdict over zero evidence tokens")
    global_shift = matrix.logits.detach().max()
    shifts = torch.full(
        (matrix.num_provenances,), float("-inf"),
        dtype=matrix.logits.dtype, device=matrix.logits.device,
    )
    flat_max = matrix.logits.detach().max(dim=-1).values
    shifts = shifts.scatter_reduce(
        0, matrix.token_provenance, flat_max, reduce="amax", include_self=True
    )
    shifted = torch.exp(matrix.logits - shifts[matrix.token_provenance][:, None])
    partitions = torch.zeros_like(shifts)
    partitions = partitions.index_add(0, matrix.token_provenance, shifted.sum(dim=-1))
    class_mass = torch.zeros(
        (matrix.num_provenances, NUM_CLASSES), dtype=matrix.logits.dtype, device=matrix.logits.device
    )
    class_mass = class_mass.index_add(0, matrix.token_provenance, shifted)
    marginals = class_mass / partitions[:, None]
    weights = torch.exp(shifts - global_shift) * partitions
    mixed = (weights[:, None] * marginals).sum(dim=0)
    return mixed / mixed.sum()


def ensemble_log_veracity(matrix: ScoreMatrix) -> Tensor:
    """Log of the claim-verdict distribution, computed by the pooled-softmax
    route (stable for the training objective)."""
    if matrix.num_tokens == 0:
        raise ValueError("cannot form a verdict over zero evidence tokens")
    per_class = torch.logsumexp(matrix.logits, dim=0)
    return per_class - torch.logsumexp(per_class, dim=-1)


def l2_penalty(matrix: ScoreMatrix) -> Tensor:
    """Mean of squared score entries (squared Frobenius norm over cell count)."""
    return matrix.logits.square().mean()


@dataclass(frozen=True)
class LossConfig:
    lambda_relevance: float = 1.0
    lambda_l2: float = 1.0


def total_loss(
    matrix: ScoreMatrix,
    gold_class: int,
    labeled: Mapping[tuple[int, int], int],
    config: LossConfig = LossConfig(),
) -> Tensor:
    """Joint objective, to be maximized: verdict log-likelihood plus weighted
    relevance log-likelihood minus the weighted squared-score penalty."""
    verdict = ensemble_log_veracity(matrix)[gold_class]
    return (
        verdict
        + config.lambda_relevance * relevance_loss(matrix, labeled)
        - config.lambda_l2 * l2_penalty(matrix)
    )


def token_rationale_scores(matrix: ScoreMatrix) -> Tensor:
    """Per-token rationale strength: joint mass on (token, supporting) plus
    (token, refuting) under the token's provenance distribution, (L_e,)."""
    joint = provenance_joint_log_probs(matrix).exp()
    return joint[:, SUPPORTING] + joint[:, REFUTING]


def select_rationale_tokens(matrix: ScoreMatrix, threshold: float) -> Tensor:
    """Boolean mask of evidence tokens whose rationale score exceeds the
    threshold."""
    return token_rationale_scores(matrix) > threshold


def detect_conflicting(matrix: ScoreMatrix, threshold: float = 0.9) -> bool:
    """Flag inputs where one provenance is confidently supporting and another
    is confidently refuting."""
    if matrix.num_tokens == 0:
        return False
    marginals = provenance_marginal_log_probs(matrix).exp()
    return bool(
        (marginals[:, SUPPORTING] > threshold).any()
        and (marginals[:, REFUTING] > threshold).any()
    )


class CrossAttentionScorer(nn.Module):
    """Shared head skeleton: evidence tokens attend over sentence markers
    (the only path through which block contents see each other), then a
    layer-normalized single-layer perceptron feeds a final projection."""

    def __init__(self, dim: int, out_dim: int, heads: int | None = None, dropout: float = 0.1) -> None:
        super().__init__()
        if heads is None:
            heads = 8 if dim % 8 == 0 and dim >= 64 else 4
        self.attention = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm = nn.LayerNorm(dim)
        self.hidden = nn.Linear(dim, dim)
        self.dropout = nn.Dropout(dropout)
        self.activation = nn.GELU()
        self.project = nn.Linear(dim, out_dim, bias=False)

    def scores(self, evidence: Tensor, markers: Tensor) -> Tensor:
        attended, _ = self.attention(
            evidence.unsqueeze(0), markers.unsqueeze(0), markers.unsqueeze(0)
        )
        hidden = self.activation(self.dropout(self.hidden(self.norm(attended.squeeze(0)))))
        return self.project(hidden)


class RelevanceHead(CrossAttentionScorer):
    """Cross-attention head producing the evidence-token score matrix."""

    def __init__(self, dim: int, heads: int | None = None, dropout: float = 0.1) -> None:
        super().__init__(dim, NUM_CLASSES, heads=heads, dropout=dropout)

    def forward(self, reps: GatheredReps) -> ScoreMatrix:
        if reps.num_evidence_tokens == 0 or reps.num_sentences == 0:
            empty = torch.zeros((0, NUM_CLASSES), dtype=reps.evidence.dtype, device=reps.evidence.device)
            return ScoreMatrix(empty, reps.token_sentence, reps.token_block)
        return ScoreMatrix.from_reps(self.scores(reps.evidence, reps.markers), reps)
