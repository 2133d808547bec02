"""Evaluation metrics: verdict accuracy, sentence recall, the combined
verdict-plus-evidence score, token-overlap F1 and its threshold tuning.

Conventions for unverifiable (NEI) claims follow the standard FEVER scorer:
they are excluded from the sentence-recall denominator, and count toward the
combined score whenever the label alone is correct.
"""
from __future__ import annotations

import json
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from ..corpus import Label, ParseError, SentenceRef

ARTICLES = frozenset({"a", "an", "the"})
_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

RATIONALES_SCHEMA = "claimlens/rationales/v1"


def accuracy(predicted: Sequence[Label], gold: Sequence[Label]) -> float:
    """Fraction of correctly classified claims, evidence disregarded."""
    if len(predicted) != len(gold):
        raise ValueError("prediction/gold length mismatch")
    if not gold:
        return 0.0
    return sum(p == g for p, g in zip(predicted, gold)) / len(gold)


def group_hit(ranking: Sequence[SentenceRef], groups: Sequence[Iterable[SentenceRef]], k: int = 5) -> bool:
    """True iff some whole evidence group appears within the top-k ranked
    sentences."""
    top = set(ranking[:k])
    return any(set(group) and set(group) <= top for group in groups)


def recall_at_5(
    rankings: Mapping[str, Sequence[SentenceRef]],
    claims: Sequence,
    k: int = 5,
) -> float:
    """Fraction of verifiable claims with a fully matched evidence group in
    the top-k sentences; unverifiable claims leave the denominator."""
    hits = 0
    total = 0
    for claim in claims:
        if claim.label == Label.NEI:
            continue
        total += 1
        ranking = rankings.get(claim.claim_id, ())
        if group_hit(ranking, claim.evidence_groups, k):
            hits += 1
    return hits / total if total else 0.0


def fever_score(
    predicted: Mapping[str, Label],
    rankings: Mapping[str, Sequence[SentenceRef]],
    claims: Sequence,
    k: int = 5,
) -> float:
    """Fraction of claims with the correct verdict and (for verifiable
    claims) a fully matched evidence group in the top-k sentences."""
    if not claims:
        return 0.0
    hits = 0
    for claim in claims:
        if predicted.get(claim.claim_id) != claim.label:
            continue
        if claim.label == Label.NEI:
            hits += 1
        elif group_hit(rankings.get(claim.claim_id, ()), claim.evidence_groups, k):
            hits += 1
    return hits / len(claims)


def normalize_tokens(tokens: Iterable[str]) -> list[str]:
    """Scoring normalization: lowercase, strip punctuation characters, drop
    articles and empties."""
    out = []
    for token in tokens:
        stripped = token.lower().translate(_PUNCT_TABLE)
        if stripped and stripped not in ARTICLES:
            out.append(stripped)
    return out


def _f1(predicted: list[str], reference: list[str]) -> float:
    if not predicted and not reference:
        return 1.0
    if not predicted or not reference:
        return 0.0
    overlap = sum((Counter(predicted) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(predicted)
    recall = overlap / len(reference)
    return 2 * precision * recall / (precision + recall)


def token_f1(predicted: Iterable[str], references: Sequence[Iterable[str]]) -> float:
    """Unigram-overlap F1 against the best-matching reference annotation."""
    pred = normalize_tokens(predicted)
    if not references:
        return 1.0 if not pred else 0.0
    return max(_f1(pred, normalize_tokens(ref)) for ref in references)


@dataclass(frozen=True)
class ScoredTokens:
    """One claim's token candidates with scores, plus its reference
    rationale annotations."""

    tokens: tuple[str, ...]
    scores: tuple[float, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.scores):
            raise ValueError("tokens and scores must run parallel")

    def selected(self, threshold: float) -> list[str]:
        return [t for t, s in zip(self.tokens, self.scores) if s > threshold]


def mean_f1_at(samples: Sequence[ScoredTokens], threshold: float) -> float:
    if not samples:
        return 0.0
    return sum(token_f1(s.selected(threshold), s.references) for s in samples) / len(samples)


def default_threshold_grid(samples: Sequence[ScoredTokens]) -> list[float]:
    """Midpoints between adjacent observed scores, preceded by a select-all
    sentinel below the minimum."""
    observed = sorted({s for sample in samples for s in sample.scores})
    if not observed:
        return [0.0]
    grid = [observed[0] - 1.0]
    grid.extend((lo + hi) / 2.0 for lo, hi in zip(observed, observed[1:]))
    return grid


def tune_threshold(
    samples: Sequence[ScoredTokens], grid: Sequence[float] | None = None
) -> tuple[float, float]:
    """Threshold maximizing corpus-mean token F1 over the grid; ties resolve
    to the smallest threshold. Returns (threshold, best mean F1)."""
    candidates = list(grid) if grid is not None else default_threshold_grid(samples)
    if not candidates:
        raise ValueError("empty threshold grid")
    best_tau = None
    best_f1 = -1.0
    for tau in sorted(candidates):
        score = mean_f1_at(samples, tau)
        if score > best_f1:
            best_tau, best_f1 = tau, score
    return float(best_tau), best_f1


def save_rationale_references(
    references: Mapping[str, Sequence[Sequence[str]]], path: str | Path
) -> None:
    """Write per-claim reference rationale token lists as JSONL."""
    with open(path, "w", encoding="utf-8") as fh:
        for claim_id, refs in references.items():
            record = {
                "schema": RATIONALES_SCHEMA,
                "claim_id": claim_id,
                "references": [list(ref) for ref in refs],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_rationale_references(path: str | Path) -> dict[str, tuple[tuple[str, ...], ...]]:
    out: dict[str, tuple[tuple[str, ...], ...]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if record.get("schema") != RATIONALES_SCHEMA:
                raise ParseError(
                    f"{path}:{lineno}: expected schema {RATIONALES_SCHEMA}, got {record.get('schema')!r}"
                )
            out[record["claim_id"]] = tuple(tuple(ref) for ref in record["references"])
    return out


@dataclass
class EvalReport:
    """One evaluation pass over a claim set."""

    accuracy: float
    recall_at_5: float
    fever_score: float
    rai: float | None = None
    token_f1: float | None = None
    threshold: float | None = None
    per_claim: list[dict] = field(default_factory=list)

    def __post_init__(self) -> None:
        for name in ("accuracy", "recall_at_5", "fever_score"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} out of range: {value}")

    def as_dict(self) -> dict:
        out = {
            "accuracy": self.accuracy,
            "recall_at_5": self.recall_at_5,
            "fever_score": self.fever_score,
        }
        if self.rai is not None:
            out["rai"] = self.rai
        if self.token_f1 is not None:
            out["token_f1"] = self.token_f1
        if self.threshold is not None:
            out["threshold"] = self.threshold
        return out


def evaluate_verdicts(
    predicted: Mapping[str, Label],
    rankings: Mapping[str, Sequence[SentenceRef]],
    claims: Sequence,
    rai: float | None = None,
) -> EvalReport:
    """Bundle the three claim-level metrics plus per-claim records."""
    order = [c.claim_id for c in claims]
    preds = [predicted[cid] for cid in order]
    report = EvalReport(
        accuracy=accuracy(preds, [c.label for c in claims]),
        recall_at_5=recall_at_5(rankings, claims),
        fever_score=fever_score(predicted, rankings, claims),
        rai=rai,
    )
    for claim in claims:
        ranking = list(rankings.get(claim.claim_id, ()))
        report.per_claim.append(
            {
                "claim_id": claim.claim_id,
                "gold": claim.label.value,
                "predicted": predicted[claim.claim_id].value,
                "evidence_hit": group_hit(ranking, claim.evidence_groups)
                if claim.label != Label.NEI
                else None,
                "top5": [list(ref) for ref in ranking[:5]],
            }
        )
    return report
