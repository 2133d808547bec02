"""Coarse block-level supervision and the single-sentence estimate (SSE).

When only whole retrieved blocks are labeled, the block becomes the unit of
normalization: its token cells form one softmax, each sentence's class mass
is a summand of the block's, and training maximizes block-level mass. The
SSE sharpens this by sometimes replacing a block's marginal with that of one
sentence sampled proportionally to its relevant mass — an exact lower bound
of the block marginal — with the replacement probability ramped in over
training. Negative sentences keep their free sentence-level labels and are
pushed toward the irrelevant class under ordinary per-sentence normalization.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from .relevance import (
    IRRELEVANT,
    NUM_CLASSES,
    REFUTING,
    SUPPORTING,
    ScoreMatrix,
    ensemble_log_veracity,
    l2_penalty,
    provenance_marginal_log_probs,
    segment_logsumexp,
)

SentenceRef = tuple[int, int]


@dataclass(frozen=True)
class SseSchedule:
    warmup_steps: int = 1000
    ramp_end: int = 3000
    p_max: float = 0.95

    def __post_init__(self) -> None:
        if not 0.0 <= self.p_max <= 1.0:
            raise ValueError(f"p_max must lie in [0, 1], got {self.p_max}")
        if self.warmup_steps >= self.ramp_end:
            raise ValueError("warmup must end before the ramp does")


def sse_probability(step: int, schedule: SseSchedule = SseSchedule()) -> float:
    """Replacement probability at a training step: zero through the warmup,
    then linear up to ``p_max`` at ``ramp_end``, constant after."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if step <= schedule.warmup_steps:
        return 0.0
    if step >= schedule.ramp_end:
        return schedule.p_max
    fraction = (step - schedule.warmup_steps) / (schedule.ramp_end - schedule.warmup_steps)
    return schedule.p_max * fraction


@dataclass(frozen=True)
class BlockAnnotation:
    """Block-level positives plus sentence-level negatives.

    ``positive_blocks`` pairs a block slot with the claim's class;
    ``negative_sentences`` are individually labeled irrelevant (sentence
    granularity survives block supervision for negatives, which are mined
    rather than annotated).
    """

    positive_blocks: tuple[tuple[int, int], ...] = ()
    negative_sentences: tuple[SentenceRef, ...] = ()

    def __post_init__(self) -> None:
        for _, cls in self.positive_blocks:
            if cls not in (SUPPORTING, REFUTING):
                raise ValueError(f"positive blocks must be supporting/refuting, got class {cls}")


def _block_segments(matrix: ScoreMatrix) -> tuple[list[int], Tensor]:
    """Dense block indexing by first appearance in token order."""
    order: dict[int, int] = {}
    dense = []
    for block in matrix.token_block.tolist():
        if block not in order:
            order[block] = len(order)
        dense.append(order[block])
    return list(order), torch.tensor(dense, dtype=torch.long, device=matrix.logits.device)


def block_class_log_mass(matrix: ScoreMatrix) -> tuple[list[int], Tensor]:
    """Per-block class marginals under per-block normalization.

    Returns the block slots (first-appearance order) and a (B, 3) tensor of
    ``log P(b, y)``; each row sums to one in probability space.
    """
    blocks, segments = _block_segments(matrix)
    per_class = segment_logsumexp(matrix.logits, segments, len(blocks))
    return blocks, per_class - torch.logsumexp(per_class, dim=-1, keepdim=True)


def block_log_marginal(matrix: ScoreMatrix, block: int) -> Tensor:
    """``log P(b, y)`` for one block slot, shape (3,)."""
    blocks, log_mass = block_class_log_mass(matrix)
    try:
        row = blocks.index(block)
    except ValueError:
        raise KeyError(f"no tokens belong to block slot {block}") from None
    return log_mass[row]


def sentence_class_log_mass_in_block(matrix: ScoreMatrix) -> Tensor:
    """Per-sentence class masses under the block softmax, shape (P, 3).

    Within one block these cells sum to one across its sentences × classes,
    so each sentence row is a summand of the block marginal.
    """
    blocks, segments = _block_segments(matrix)
    flat = segment_logsumexp(matrix.logits, segments, len(blocks))
    block_log_z = torch.logsumexp(flat, dim=-1)
    per_sentence = segment_logsumexp(matrix.logits, matrix.token_provenance, matrix.num_provenances)
    prov_block = torch.tensor(
        [blocks.index(b) for _, b in matrix.provenances],
        dtype=torch.long,
        device=matrix.logits.device,
    )
    return per_sentence - block_log_z[prov_block][:, None]


def sse_estimate(
    matrix: ScoreMatrix, block: int, rng: np.random.Generator
) -> tuple[SentenceRef, Tensor]:
    """Sample one sentence of the block and return its class-mass vector.

    Sampling weights are each sentence's supporting + refuting mass,
    renormalized over the block; if every sentence has zero relevant mass the
    draw is uniform. The returned log-mass vector lower-bounds the block
    marginal entrywise.
    """
    sentence_mass = sentence_class_log_mass_in_block(matrix)
    members = [p for p, (_, b) in enumerate(matrix.provenances) if b == block]
    if not members:
        raise KeyError(f"no tokens belong to block slot {block}")
    relevant = sentence_mass[members][:, (SUPPORTING, REFUTING)].exp().sum(dim=-1)
    weights = relevant.detach().cpu().numpy().astype(np.float64)
    total = weights.sum()
    if total <= 0.0:
        weights = np.full(len(members), 1.0 / len(members))
    else:
        weights = weights / total
    choice = members[int(rng.choice(len(members), p=weights))]
    return matrix.provenances[choice], sentence_mass[choice]


def sample_rng(seed: int, claim_id: str, step: int) -> np.random.Generator:
    """Per-sample generator derived from (seed, claim id, step) so sample
    order and scheduling never affect the draws."""
    digest = hashlib.blake2b(claim_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed, step, int.from_bytes(digest, "big")])


@dataclass(frozen=True)
class BlockLossConfig:
    lambda_relevance: float = 0.7
    lambda_l2: float = 1.0


def block_relevance_loss(
    matrix: ScoreMatrix,
    annotation: BlockAnnotation,
    use_sse: bool,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Mean over positive-block log masses (or their SSE stand-ins) and
    negative-sentence irrelevant log marginals; zero with no annotations."""
    terms: list[Tensor] = []
    if annotation.positive_blocks:
        blocks, log_mass = block_class_log_mass(matrix)
        for block, cls in annotation.positive_blocks:
            if use_sse:
                if rng is None:
                    raise ValueError("SSE sampling requires a random generator")
                _, vector = sse_estimate(matrix, block, rng)
                terms.append(vector[cls])
            else:
                terms.append(log_mass[blocks.index(block)][cls])
    if annotation.negative_sentences:
        marginals = provenance_marginal_log_probs(matrix)
        for sentence, block in annotation.negative_sentences:
            terms.append(marginals[matrix.provenance_index(sentence, block), IRRELEVANT])
    if not terms:
        return torch.zeros((), dtype=matrix.logits.dtype, device=matrix.logits.device)
    return torch.stack(terms).mean()


def block_supervised_loss(
    matrix: ScoreMatrix,
    annotation: BlockAnnotation,
    gold_class: int,
    step: int,
    schedule: SseSchedule = SseSchedule(),
    seed: int = 0,
    claim_id: str = "",
    config: BlockLossConfig = BlockLossConfig(),
    p_sse: float | None = None,
) -> Tensor:
    """Full objective (maximized) under block supervision.

    One coin per sample decides between the vanilla block-marginal objective
    and its SSE replacement; the coin and any sentence draws come from a
    generator keyed on (seed, claim id, step). ``p_sse`` overrides the
    schedule when given (0 and 1 freeze the two branches).
    """
    probability = sse_probability(step, schedule) if p_sse is None else p_sse
    rng = sample_rng(seed, claim_id, step)
    use_sse = bool(probability > 0.0 and rng.random() < probability)
    relevance = block_relevance_loss(matrix, annotation, use_sse, rng)
    verdict = ensemble_log_veracity(matrix)[gold_class]
    return verdict + config.lambda_relevance * relevance - config.lambda_l2 * l2_penalty(matrix)
