"""Training loops and evaluation glue for all heads and supervision modes.

One training instance is one claim with its retrieved blocks; losses are
computed per claim and averaged over the batch. Runs are deterministic under
a fixed seed (single-threaded, per-sample randomness keyed on
seed/claim/step), checkpoints are kept per evaluation point, and the best
one is picked by the combined verdict-plus-evidence score.
"""
from __future__ import annotations

import hashlib
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from ..baseline import (
    BaselineAnnotation,
    combined_baseline_loss,
    loss_b1,
    loss_b2,
    loss_b3,
    loss_b4,
)
from ..corpus import ClaimInstance, Corpus, Label, SentenceRef
from ..encoding import InputSequence
from ..masker import (
    MaskerModel,
    TemperatureSchedule,
    gumbel_noise,
    mask_generator,
    masked_objective,
    temperature,
)
from ..model import BlockInput, Prediction, Verifier, save_verifier
from ..relevance import IRRELEVANT, LossConfig, ScoreMatrix, total_loss
from ..retrieval import RetrievalResult, mine_negatives, rank_input_sentences, recall_at_input
from ..supervision import BlockAnnotation, BlockLossConfig, SseSchedule, block_supervised_loss
from .metrics import EvalReport, evaluate_verdicts

logger = logging.getLogger(__name__)

HEADS = ("dissector", "baseline", "b2", "b3", "b4")
SUPERVISION_MODES = ("sentence", "block", "block+sse")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainingInstance:
    """One claim, its block inputs, prebuilt sequences and annotations."""

    claim: ClaimInstance
    inputs: list[BlockInput]
    sequences: list[InputSequence]
    labeled: dict[tuple[int, int], int]
    baseline: BaselineAnnotation
    blocks: BlockAnnotation

    @property
    def gold_class(self) -> int:
        return self.claim.label.class_index


def prepare_instance(
    claim: ClaimInstance,
    retrieval: RetrievalResult,
    corpus: Corpus,
    verifier: Verifier,
    n_negatives: int = 2,
    negative_lo: int = 50,
    negative_hi: int = 200,
    seed: int = 0,
) -> TrainingInstance:
    """Map document-level gold sentences and mined negatives onto the
    provenances actually present in the built input sequences."""
    inputs = [BlockInput(block, corpus[block.doc_id]) for block in retrieval.blocks]
    sequences = verifier.build_sequences(claim.claim, inputs)

    present: dict[SentenceRef, tuple[int, int]] = {}
    for slot, seq in enumerate(sequences):
        for sent in seq.marker_sentence_ids:
            present[(seq.doc_id, sent)] = (sent, slot)

    labeled: dict[tuple[int, int], int] = {}
    positives: list[tuple[tuple[int, int], int]] = []
    positive_blocks: dict[int, int] = {}
    negatives: list[tuple[int, int]] = []
    if claim.label != Label.NEI:
        gold = claim.gold_sentences()
        for ref in sorted(gold):
            if ref in present:
                prov = present[ref]
                labeled[prov] = claim.label.class_index
                positives.append((prov, claim.label.class_index))
                positive_blocks[prov[1]] = claim.label.class_index
        ranked = retrieval.ranked_sentences
        digest = int.from_bytes(
            hashlib.blake2b(claim.claim_id.encode("utf-8"), digest_size=8).digest(), "big"
        )
        rng = np.random.default_rng([seed, digest])
        for ref in mine_negatives(ranked, gold, negative_lo, negative_hi, n_negatives, rng):
            if ref in present:
                prov = present[ref]
                labeled[prov] = IRRELEVANT
                negatives.append(prov)
    return TrainingInstance(
        claim=claim,
        inputs=inputs,
        sequences=sequences,
        labeled=labeled,
        baseline=BaselineAnnotation(positives=tuple(positives), negatives=tuple(negatives)),
        blocks=BlockAnnotation(
            positive_blocks=tuple(sorted(positive_blocks.items())),
            negative_sentences=tuple(negatives),
        ),
    )


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 5e-6
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    eval_every: int = 500
    max_steps: int = 2000
    seed: int = 0
    head: str = "dissector"
    supervision: str = "sentence"
    loss: LossConfig = LossConfig()
    block_loss: BlockLossConfig = BlockLossConfig()
    sse: SseSchedule = SseSchedule()
    out_dir: str | None = None
    stop_at_accuracy: float | None = None
    stop_at_recall: float | None = None

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"unknown supervision mode {self.supervision!r}")
        if self.supervision != "sentence" and self.head != "dissector":
            raise ValueError("block supervision applies to the dissector head only")


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_step: int = 0
    best_score: float = float("-inf")
    best_path: str | None = None
    steps_run: int = 0


def _instance_objective(
    matrix: ScoreMatrix, instance: TrainingInstance, config: TrainConfig, step: int
) -> Tensor:
    head = config.head
    if head == "dissector":
        if config.supervision == "sentence":
            return total_loss(matrix, instance.gold_class, instance.labeled, config.loss)
        p_override = 0.0 if config.supervision == "block" else None
        return block_supervised_loss(
            matrix,
            instance.blocks,
            instance.gold_class,
            step,
            schedule=config.sse,
            seed=config.seed,
            claim_id=instance.claim.claim_id,
            config=config.block_loss,
            p_sse=p_override,
        )
    if head == "baseline":
        return combined_baseline_loss(matrix, instance.baseline, instance.gold_class)
    variant = {"b2": loss_b2, "b3": loss_b3, "b4": loss_b4}[head]
    verdict = loss_b1(matrix, instance.gold_class)
    annotated = instance.baseline.positives or (head == "b2" and instance.baseline.negatives)
    if not annotated:
        return verdict
    return 0.5 * variant(matrix, instance.baseline) + 0.5 * verdict


def evaluate_model(
    verifier: Verifier,
    instances: Sequence[TrainingInstance],
    conflict_threshold: float = 0.9,
) -> tuple[EvalReport, list[Prediction]]:
    """Full-metric evaluation pass; also returns the raw predictions."""
    verifier.eval()
    predictions = [
        verifier.predict(inst.claim.claim_id, inst.claim.claim, inst.inputs, conflict_threshold)
        for inst in instances
    ]
    predicted = {p.claim_id: p.predicted for p in predictions}
    rankings = {p.claim_id: p.ranking for p in predictions}
    claims = [inst.claim for inst in instances]
    rai = recall_at_input(
        claims, {inst.claim.claim_id: [bi.block for bi in inst.inputs] for inst in instances}
    )
    return evaluate_verdicts(predicted, rankings, claims, rai=rai), predictions


def _dump_divergence(out_dir: Path | None, step: int, batch: Sequence[TrainingInstance]) -> str:
    record = {
        "step": step,
        "claim_ids": [inst.claim.claim_id for inst in batch],
        "labels": [inst.claim.label.value for inst in batch],
        "n_blocks": [len(inst.inputs) for inst in batch],
    }
    if out_dir is None:
        return json.dumps(record)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "divergence.json"
    path.write_text(json.dumps(record, indent=2), encoding="utf-8")
    return str(path)


def train(
    verifier: Verifier,
    train_instances: Sequence[TrainingInstance],
    dev_instances: Sequence[TrainingInstance],
    config: TrainConfig,
    on_eval: Callable[[int, EvalReport], None] | None = None,
) -> TrainResult:
    """Optimize the verifier; returns the evaluation history and the best
    checkpoint (by combined verdict-plus-evidence score on dev)."""
    if not train_instances:
        raise ValueError("no training instances")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    optimizer = torch.optim.AdamW(verifier.parameters(), lr=config.lr)
    schedule = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / max(1, config.warmup_steps))
    )
    out_dir = Path(config.out_dir) if config.out_dir else None
    result = TrainResult()

    def run_eval(step: int) -> EvalReport:
        report, _ = evaluate_model(verifier, dev_instances)
        result.history.append({"step": step, **report.as_dict()})
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            ckpt = out_dir / f"step-{step}.pt"
            save_verifier(verifier, ckpt)
            if report.fever_score > result.best_score:
                shutil.copyfile(ckpt, out_dir / "best.pt")
                result.best_path = str(out_dir / "best.pt")
        if report.fever_score > result.best_score:
            result.best_score = report.fever_score
            result.best_step = step
        if on_eval is not None:
            on_eval(step, report)
        logger.info(
            "step %d: accuracy %.3f recall@5 %.3f combined %.3f",
            step, report.accuracy, report.recall_at_5, report.fever_score,
        )
        return report

    if dev_instances:
        run_eval(0)
    order = np.arange(len(train_instances))
    cursor = len(order)
    step = 0
    while step < config.max_steps:
        batch: list[TrainingInstance] = []
        while len(batch) < config.batch_size:
            if cursor >= len(order):
                rng.shuffle(order)
                cursor = 0
            batch.append(train_instances[int(order[cursor])])
            cursor += 1
        step += 1
        verifier.train()
        optimizer.zero_grad()
        objectives = []
        for inst in batch:
            matrix, _ = verifier.score_sequences(inst.sequences)
            if matrix.num_tokens == 0:
                continue
            objectives.append(_instance_objective(matrix, inst, config, step))
        if not objectives:
            continue
        loss = -torch.stack(objectives).mean()
        if not torch.isfinite(loss):
            where = _dump_divergence(out_dir, step, batch)
            raise TrainingDiverged(f"non-finite loss at step {step}; diagnostics: {where}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(verifier.parameters(), config.grad_clip_norm)
        optimizer.step()
        schedule.step()
        result.steps_run = step
        if dev_instances and (step % config.eval_every == 0 or step == config.max_steps):
            report = run_eval(step)
            hit_acc = config.stop_at_accuracy is None or report.accuracy >= config.stop_at_accuracy
            hit_rec = config.stop_at_recall is None or report.recall_at_5 >= config.stop_at_recall
            if (config.stop_at_accuracy is not None or config.stop_at_recall is not None) and hit_acc and hit_rec:
                logger.info("early stop at step %d: targets reached", step)
                break
    if dev_instances and not any(h["step"] == result.steps_run for h in result.history):
        run_eval(result.steps_run)
    return result


@dataclass(frozen=True)
class MaskerTrainConfig:
    batch_size: int = 16
    lr: float = 2e-6
    warmup_steps: int = 100
    grad_clip_norm: float = 1.0
    max_steps: int = 800
    seed: int = 0
    lambda_sparsity: float = 1.0
    schedule: TemperatureSchedule = TemperatureSchedule()
    out_dir: str | None = None


def train_masker(
    masker: MaskerModel,
    verifier: Verifier,
    instances: Sequence[TrainingInstance],
    config: MaskerTrainConfig,
) -> list[dict]:
    """Optimize the masker against the frozen verifier; returns the loss
    history."""
    if not instances:
        raise ValueError("no training instances")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    verifier.eval()
    for param in verifier.parameters():
        param.requires_grad_(False)
    optimizer = torch.optim.AdamW(masker.parameters(), lr=config.lr)
    warm = torch.optim.lr_scheduler.LambdaLR(
        optimizer, lambda step: min(1.0, (step + 1) / max(1, config.warmup_steps))
    )
    history: list[dict] = []
    order = np.arange(len(instances))
    cursor = len(order)
    for step in range(1, config.max_steps + 1):
        batch: list[TrainingInstance] = []
        while len(batch) < config.batch_size:
            if cursor >= len(order):
                rng.shuffle(order)
                cursor = 0
            batch.append(instances[int(order[cursor])])
            cursor += 1
        tau, hard = temperature(step, config.schedule)
        masker.train()
        optimizer.zero_grad()
        objectives = []
        for inst in batch:
            if not inst.sequences:
                continue
            logits = masker.mask_logits(inst.sequences)
            if logits.shape[0] == 0:
                continue
            noise = gumbel_noise(
                tuple(logits.shape), mask_generator(config.seed, inst.claim.claim_id, step)
            )
            objectives.append(
                masked_objective(
                    logits, noise, tau, hard,
                    verifier.encoder, verifier.head, inst.sequences,
                    masker.mask_embedding, config.lambda_sparsity,
                )
            )
        if not objectives:
            continue
        loss = -torch.stack(objectives).mean()
        if not torch.isfinite(loss):
            where = _dump_divergence(Path(config.out_dir) if config.out_dir else None, step, batch)
            raise TrainingDiverged(f"non-finite masker loss at step {step}; diagnostics: {where}")
        loss.backward()
        torch.nn.utils.clip_grad_norm_(masker.parameters(), config.grad_clip_norm)
        optimizer.step()
        warm.step()
        history.append({"step": step, "loss": float(loss.detach()), "tau": tau, "hard": hard})
    return history
