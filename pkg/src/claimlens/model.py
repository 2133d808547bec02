"""End-to-end claim verifier: encoder plus relevance head over retrieved
blocks, with checkpoint (de)serialization for both verifier and masker."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from .corpus import Block, Document, Label, ParseError, SentenceRef
from .encoding import (
    GatheredReps,
    InputSequence,
    TinyTransformerEncoder,
    Vocabulary,
    build_input_sequence,
    gather_representations,
)
from .masker import MaskerModel
from .relevance import (
    RelevanceHead,
    ScoreMatrix,
    detect_conflicting,
    ensemble_veracity,
    provenance_marginal_log_probs,
    rank_provenances,
    token_rationale_scores,
)

_INDEX_LABEL = {0: Label.SUPPORT, 1: Label.REFUTE, 2: Label.NEI}

PREDICTIONS_SCHEMA = "claimlens/predictions/v1"


@dataclass(frozen=True)
class BlockInput:
    """One retrieved block paired with its source document."""

    block: Block
    doc: Document


@dataclass(frozen=True)
class TokenScore:
    doc_id: str
    sentence_index: int
    token_offset: int
    token: str
    score: float


@dataclass(frozen=True)
class SentenceScore:
    doc_id: str
    sentence_index: int
    support: float
    refute: float
    irrelevant: float

    @property
    def relevance(self) -> float:
        return self.support + self.refute


@dataclass
class Prediction:
    claim_id: str
    veracity: tuple[float, float, float]
    predicted: Label
    ranking: list[SentenceRef]
    token_scores: list[TokenScore]
    sentence_scores: list[SentenceScore]
    conflicting: bool

    def as_dict(self) -> dict:
        return {
            "claim_id": self.claim_id,
            "veracity": {
                "SUPPORT": self.veracity[0],
                "REFUTE": self.veracity[1],
                "NEI": self.veracity[2],
            },
            "predicted": self.predicted.value,
            "ranking": [list(ref) for ref in self.ranking],
            "conflicting": self.conflicting,
            "sentence_scores": [
                {
                    "doc_id": s.doc_id,
                    "sentence": s.sentence_index,
                    "support": s.support,
                    "refute": s.refute,
                    "irrelevant": s.irrelevant,
                }
                for s in self.sentence_scores
            ],
            "token_scores": [
                {
                    "doc_id": t.doc_id,
                    "sentence": t.sentence_index,
                    "offset": t.token_offset,
                    "token": t.token,
                    "score": t.score,
                }
                for t in self.token_scores
            ],
        }


class Verifier(nn.Module):
    """Claim verifier over a fixed input budget of retrieved blocks."""

    def __init__(self, encoder: TinyTransformerEncoder, head: RelevanceHead, budget: int = 500) -> None:
        super().__init__()
        self.encoder = encoder
        self.head = head
        self.budget = budget

    @property
    def vocab(self) -> Vocabulary:
        return self.encoder.vocab

    def build_sequences(self, claim: Sequence[str], inputs: Sequence[BlockInput]) -> list[InputSequence]:
        return [
            build_input_sequence(claim, bi.block, bi.doc, self.vocab, self.budget, block_slot=slot)
            for slot, bi in enumerate(inputs)
        ]

    def score_sequences(self, sequences: Sequence[InputSequence]) -> tuple[ScoreMatrix, GatheredReps]:
        reps = gather_representations(sequences, self.encoder.encode(sequences), self.encoder.dim)
        return self.head(reps), reps

    def score(self, claim: Sequence[str], inputs: Sequence[BlockInput]) -> tuple[ScoreMatrix, GatheredReps]:
        return self.score_sequences(self.build_sequences(claim, inputs))

    @torch.no_grad()
    def predict(
        self,
        claim_id: str,
        claim: Sequence[str],
        inputs: Sequence[BlockInput],
        conflict_threshold: float = 0.9,
    ) -> Prediction:
        """Verdict, sentence ranking and token rationale scores for one claim.

        With no retrievable evidence the claim defaults to unverifiable.
        """
        self.eval()
        if not inputs:
            return Prediction(claim_id, (0.0, 0.0, 1.0), Label.NEI, [], [], [], False)
        sequences = self.build_sequences(claim, inputs)
        matrix, reps = self.score_sequences(sequences)
        if matrix.num_tokens == 0:
            return Prediction(claim_id, (0.0, 0.0, 1.0), Label.NEI, [], [], [], False)
        veracity = ensemble_veracity(matrix)
        predicted = _INDEX_LABEL[int(veracity.argmax())]
        doc_of_slot = [bi.block.doc_id for bi in inputs]
        ranking = [(doc_of_slot[slot], sent) for sent, slot in rank_provenances(matrix)]
        marginals = provenance_marginal_log_probs(matrix).exp()
        sentence_scores = [
            SentenceScore(
                doc_id=doc_of_slot[slot],
                sentence_index=sent,
                support=float(marginals[p, 0]),
                refute=float(marginals[p, 1]),
                irrelevant=float(marginals[p, 2]),
            )
            for p, (sent, slot) in enumerate(matrix.provenances)
        ]
        scores = token_rationale_scores(matrix)
        token_scores = [
            TokenScore(
                doc_id=doc_of_slot[int(slot)],
                sentence_index=int(sent),
                token_offset=int(offset),
                token=text,
                score=float(score),
            )
            for sent, slot, offset, text, score in zip(
                reps.token_sentence.tolist(),
                reps.token_block.tolist(),
                reps.token_offset.tolist(),
                reps.token_strings,
                scores.tolist(),
            )
        ]
        return Prediction(
            claim_id=claim_id,
            veracity=tuple(float(v) for v in veracity.tolist()),
            predicted=predicted,
            ranking=ranking,
            token_scores=token_scores,
            sentence_scores=sentence_scores,
            conflicting=detect_conflicting(matrix, conflict_threshold),
        )


def build_verifier(
    vocab: Vocabulary,
    dim: int = 48,
    layers: int = 2,
    heads: int = 4,
    budget: int = 500,
    max_len: int = 512,
    dropout: float = 0.1,
    sentence_local: bool = True,
) -> Verifier:
    encoder = TinyTransformerEncoder(
        vocab,
        dim=dim,
        layers=layers,
        heads=heads,
        max_len=max_len,
        dropout=dropout,
        sentence_local=sentence_local,
    )
    return Verifier(encoder, RelevanceHead(dim, heads=heads, dropout=dropout), budget=budget)


def build_masker(verifier: Verifier, dropout: float = 0.1, lambda_sparsity: float = 1.0) -> MaskerModel:
    """Fresh masker sharing the verifier's vocabulary and encoder geometry."""
    ref = verifier.encoder
    encoder = TinyTransformerEncoder(
        ref.vocab,
        dim=ref.dim,
        layers=len(ref.blocks.layers),
        heads=ref.blocks.layers[0].self_attn.num_heads,
        max_len=ref.max_len,
        dropout=dropout,
        sentence_local=ref.sentence_local,
    )
    return MaskerModel(encoder, verifier_dim=ref.dim, dropout=dropout, lambda_sparsity=lambda_sparsity)


def _encoder_meta(encoder: TinyTransformerEncoder) -> dict:
    return {
        "dim": encoder.dim,
        "layers": len(encoder.blocks.layers),
        "heads": encoder.blocks.layers[0].self_attn.num_heads,
        "max_len": encoder.max_len,
        "sentence_local": encoder.sentence_local,
    }


def save_verifier(verifier: Verifier, path: str | Path) -> None:
    torch.save(
        {
            "kind": "verifier",
            "vocab": verifier.vocab.tokens(),
            "budget": verifier.budget,
            "encoder": _encoder_meta(verifier.encoder),
            "state": verifier.state_dict(),
        },
        path,
    )


def load_verifier(path: str | Path) -> Verifier:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "verifier":
        raise ValueError(f"{path} is not a verifier checkpoint")
    vocab = Vocabulary(payload["vocab"])
    meta = payload["encoder"]
    verifier = build_verifier(
        vocab,
        dim=meta["dim"],
        layers=meta["layers"],
        heads=meta["heads"],
        budget=payload["budget"],
        max_len=meta["max_len"],
        sentence_local=meta.get("sentence_local", True),
    )
    verifier.load_state_dict(payload["state"])
    verifier.eval()
    return verifier


def save_masker(masker: MaskerModel, path: str | Path) -> None:
    torch.save(
        {
            "kind": "masker",
            "vocab": masker.encoder.vocab.tokens(),
            "encoder": _encoder_meta(masker.encoder),
            "verifier_dim": masker.mask_embedding.shape[0],
            "lambda_sparsity": masker.lambda_sparsity,
            "state": masker.state_dict(),
        },
        path,
    )


def save_predictions(predictions: Iterable[Prediction], path: str | Path, head: str = "dissector") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for pred in predictions:
            record = {"schema": PREDICTIONS_SCHEMA, "head": head, **pred.as_dict()}
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_predictions(path: str | Path) -> list[Prediction]:
    out: list[Prediction] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if record.get("schema") != PREDICTIONS_SCHEMA:
                raise ParseError(
                    f"{path}:{lineno}: expected schema {PREDICTIONS_SCHEMA}, got {record.get('schema')!r}"
                )
            veracity = record["veracity"]
            out.append(
                Prediction(
                    claim_id=record["claim_id"],
                    veracity=(veracity["SUPPORT"], veracity["REFUTE"], veracity["NEI"]),
                    predicted=Label(record["predicted"]),
                    ranking=[(d, s) for d, s in record["ranking"]],
                    token_scores=[
                        TokenScore(t["doc_id"], t["sentence"], t["offset"], t["token"], t["score"])
                        for t in record.get("token_scores", [])
                    ],
                    sentence_scores=[
                        SentenceScore(
                            s["doc_id"], s["sentence"], s["support"], s["refute"], s["irrelevant"]
                        )
                        for s in record.get("sentence_scores", [])
                    ],
                    conflicting=record.get("conflicting", False),
                )
            )
    return out


def load_masker(path: str | Path) -> MaskerModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "masker":
        raise ValueError(f"{path} is not a masker checkpoint")
    vocab = Vocabulary(payload["vocab"])
    meta = payload["encoder"]
    encoder = TinyTransformerEncoder(
        vocab,
        dim=meta["dim"],
        layers=meta["layers"],
        heads=meta["heads"],
        max_len=meta["max_len"],
        sentence_local=meta.get("sentence_local", True),
    )
    masker = MaskerModel(
        encoder,
        verifier_dim=payload["verifier_dim"],
        lambda_sparsity=payload["lambda_sparsity"],
    )
    masker.load_state_dict(payload["state"])
    masker.eval()
    return masker
