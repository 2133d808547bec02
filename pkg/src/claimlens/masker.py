"""Learned token masking as a rationale baseline.

A second model (same encoder + head skeleton as the verifier, but with two
output logits per evidence token: keep vs. mask) learns which tokens to
replace with a trained mask embedding so that the frozen verifier flips to
"not enough information" — while an L1 term keeps the mask sparse. Masks are
sampled with the Gumbel-softmax relaxation: soft early in training, then
hard (straight-through) once the temperature schedule bottoms out. Tokens
whose removal flips the verdict are, by construction, the ones the verifier
relied on; the mask logits double as rationale scores.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .encoding import GatheredReps, InputSequence, TinyTransformerEncoder, gather_representations
from .relevance import (
    IRRELEVANT,
    CrossAttentionScorer,
    RelevanceHead,
    ScoreMatrix,
    ensemble_log_veracity,
)

KEEP = 0
MASK = 1


@dataclass(frozen=True)
class TemperatureSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.1
    warmup_steps: int = 100
    ramp_end: int = 700

    def __post_init__(self) -> None:
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("temperatures must stay positive")
        if self.warmup_steps >= self.ramp_end:
            raise ValueError("warmup must end before the ramp does")


def temperature(step: int, schedule: TemperatureSchedule = TemperatureSchedule()) -> tuple[float, bool]:
    """Sampling temperature and hard-mode flag at a training step.

    Constant through the warmup, linear decay to the floor at ``ramp_end``,
    then hard sampling (the floor temperature still shapes the backward-pass
    relaxation).
    """
    if step <= schedule.warmup_steps:
        return schedule.tau_start, False
    if step >= schedule.ramp_end:
        return schedule.tau_end, step > schedule.ramp_end
    fraction = (step - schedule.warmup_steps) / (schedule.ramp_end - schedule.warmup_steps)
    return schedule.tau_start + fraction * (schedule.tau_end - schedule.tau_start), False


def gumbel_noise(shape: tuple[int, ...], generator: torch.Generator | None = None) -> Tensor:
    uniform = torch.rand(shape, generator=generator, dtype=torch.double)
    return -torch.log(-torch.log(uniform))


def gumbel_transform(logits: Tensor, noise: Tensor, tau: float, hard: bool) -> Tensor:
    """Concrete-distribution sample from keep/mask logits with given noise.

    Soft mode returns the tempered softmax; hard mode returns its one-hot
    argmax with gradients flowing through the soft sample (straight-through).
    """
    soft = torch.softmax((logits + noise.to(logits.dtype)) / tau, dim=-1)
    if not hard:
        return soft
    index = soft.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return one_hot + soft - soft.detach()


def gumbel_sample(
    logits: Tensor, tau: float, hard: bool, generator: torch.Generator | None = None
) -> Tensor:
    return gumbel_transform(logits, gumbel_noise(tuple(logits.shape), generator), tau, hard)


def keep_all_mask(num_tokens: int, dtype: torch.dtype = torch.float32) -> Tensor:
    """Hard mask that leaves every token in place."""
    mask = torch.zeros((num_tokens, 2), dtype=dtype)
    mask[:, KEEP] = 1.0
    return mask


def mix_embeddings(embeddings: Tensor, mask: Tensor, mask_embedding: Tensor) -> Tensor:
    """Per-token convex combination of the original embedding and the mask
    embedding: keep-weight times token plus mask-weight times replacement."""
    return mask[:, KEEP : KEEP + 1] * embeddings + mask[:, MASK : MASK + 1] * mask_embedding[None, :]


def masker_loss(nei_log_prob: Tensor, mask: Tensor, lambda_sparsity: float = 1.0) -> Tensor:
    """Objective (maximized): verifier's log-probability of the unverifiable
    class under masked inputs, minus the mean mask weight scaled by the
    sparsity coefficient."""
    if mask.numel() == 0:
        return nei_log_prob
    return nei_log_prob - (lambda_sparsity / mask.shape[0]) * mask[:, MASK].sum()


def mask_generator(seed: int, claim_id: str, step: int) -> torch.Generator:
    digest = hashlib.blake2b(f"{seed}:{claim_id}:{step}".encode("utf-8"), digest_size=8).digest()
    generator = torch.Generator()
    generator.manual_seed(int.from_bytes(digest, "big") % (2**63))
    return generator


def masked_score_matrix(
    encoder: TinyTransformerEncoder,
    head: RelevanceHead,
    sequences: Sequence[InputSequence],
    mask: Tensor,
    mask_embedding: Tensor,
) -> ScoreMatrix:
    """Run the (frozen) verifier with evidence-token embeddings replaced by
    their masked mixtures; claim, title and special tokens pass untouched.

    ``mask`` rows follow gathered evidence order: block order, then position
    order.
    """
    total_evidence = sum(len(s.evidence_token_positions) for s in sequences)
    if mask.shape != (total_evidence, 2):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not cover {total_evidence} evidence tokens")
    ids, padding = encoder.pad_batch(sequences)
    embedded = encoder.token_embeddings(ids)
    cursor = 0
    rows: list[Tensor] = []
    for row, seq in enumerate(sequences):
        positions = seq.evidence_token_positions
        if positions:
            chunk = mask[cursor : cursor + len(positions)]
            mixed = mix_embeddings(embedded[row, positions], chunk, mask_embedding)
            patched = embedded[row].index_copy(
                0, torch.tensor(positions, dtype=torch.long), mixed
            )
        else:
            patched = embedded[row]
        rows.append(patched)
        cursor += len(positions)
    reps = encoder.encode_from_token_embeddings(torch.stack(rows), padding, sequences)
    per_seq = [reps[row, : len(seq)] for row, seq in enumerate(sequences)]
    gathered = gather_representations(sequences, per_seq, encoder.dim)
    return head(gathered)


def masked_objective(
    mask_logits: Tensor,
    noise: Tensor,
    tau: float,
    hard: bool,
    encoder: TinyTransformerEncoder,
    head: RelevanceHead,
    sequences: Sequence[InputSequence],
    mask_embedding: Tensor,
    lambda_sparsity: float = 1.0,
) -> Tensor:
    """End-to-end differentiable masking objective for fixed noise: sample
    the mask, run the verifier on mixed embeddings, score sparsity."""
    mask = gumbel_transform(mask_logits, noise, tau, hard)
    matrix = masked_score_matrix(encoder, head, sequences, mask, mask_embedding)
    nei = ensemble_log_veracity(matrix)[IRRELEVANT]
    return masker_loss(nei, mask, lambda_sparsity)


class MaskerModel(nn.Module):
    """Trainable masker: own encoder, keep/mask scoring head, and the
    replacement embedding that lives in the verifier's input space."""

    def __init__(
        self,
        encoder: TinyTransformerEncoder,
        verifier_dim: int,
        heads: int | None = None,
        dropout: float = 0.1,
        lambda_sparsity: float = 1.0,
    ) -> None:
        super().__init__()
        self.encoder = encoder
        self.head = CrossAttentionScorer(encoder.dim, 2, heads=heads, dropout=dropout)
        self.mask_embedding = nn.Parameter(torch.randn(verifier_dim) * 0.02)
        self.lambda_sparsity = lambda_sparsity

    def mask_logits(self, sequences: Sequence[InputSequence]) -> Tensor:
        """Keep/mask logit pairs, one row per evidence token in gathered
        order."""
        gathered: GatheredReps = _encode_gathered(self.encoder, sequences)
        if gathered.num_evidence_tokens == 0 or gathered.num_sentences == 0:
            return torch.zeros((gathered.num_evidence_tokens, 2))
        return self.head.scores(gathered.evidence, gathered.markers)


def _encode_gathered(encoder: TinyTransformerEncoder, sequences: Sequence[InputSequence]) -> GatheredReps:
    per_seq = encoder.encode(sequences)
    return gather_representations(sequences, per_seq, encoder.dim)


def extract_masker_rationales(mask_logits: Tensor) -> Tensor:
    """Per-token rationale scores: the mask-class logit."""
    return mask_logits[:, MASK]
