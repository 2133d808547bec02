"""Synthetic verification corpus, separable by construction.

Every claim gets a unique entity token and a unique key token. The entity's
document repeats the entity everywhere (so first-stage retrieval finds it),
but the key appears only in the gold sentences, next to a class-marker word
("confirmed" for supporting evidence, "denied" for refuting). Crucially, the
documents also contain marker-noise sentences — markers *without* the key —
so ranking a sentence requires the key+marker conjunction, not the marker
alone; that is what separates sentence-level from block-level supervision on
this data. Unverifiable claims use a key that appears nowhere, and
conflicting claims plant both a confirming and a denying keyed sentence.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..corpus import ClaimInstance, Corpus, Document, Label

POSITIVE_MARKER = "confirmed"
NEGATIVE_MARKER = "denied"
RELATION = "shows"
FILLER_RELATION = "has"


@dataclass(frozen=True)
class SyntheticSpec:
    """Shape of the generated dataset."""

    n_claims: int = 200
    support_fraction: float = 0.4
    refute_fraction: float = 0.4
    two_sentence_fraction: float = 0.2
    conflicting_fraction: float = 0.0
    filler_sentences: int = 3
    marker_noise_sentences: int = 2
    distractor_docs: int = 20
    satellite_docs: bool = True
    id_prefix: str = "syn"

    def __post_init__(self) -> None:
        if self.n_claims <= 0:
            raise ValueError("need at least one claim")
        if self.support_fraction + self.refute_fraction > 1.0 + 1e-9:
            raise ValueError("label fractions exceed 1")


@dataclass
class SyntheticInfo:
    """Ground truth the generator knows beyond the claim labels: planted
    rationale tokens per claim and which claims carry conflicting evidence."""

    rationales: dict[str, tuple[tuple[str, ...], ...]] = field(default_factory=dict)
    conflicting: frozenset[str] = frozenset()


def _labels(spec: SyntheticSpec) -> list[Label]:
    n_support = round(spec.n_claims * spec.support_fraction)
    n_refute = round(spec.n_claims * spec.refute_fraction)
    labels = (
        [Label.SUPPORT] * n_support
        + [Label.REFUTE] * n_refute
        + [Label.NEI] * (spec.n_claims - n_support - n_refute)
    )
    return labels[: spec.n_claims]


def generate_synthetic_dataset(
    spec: SyntheticSpec, seed: int = 0
) -> tuple[Corpus, list[ClaimInstance], SyntheticInfo]:
    rng = np.random.default_rng(seed)
    corpus = Corpus()
    claims: list[ClaimInstance] = []
    info = SyntheticInfo()
    conflicting: set[str] = set()
    labels = _labels(spec)
    rng.shuffle(labels)  # type: ignore[arg-type]

    for q, label in enumerate(labels):
        claim_id = f"{spec.id_prefix}{q}"
        entity = f"{spec.id_prefix}ent{q}"
        key = f"{spec.id_prefix}key{q}"
        doc_id = f"{spec.id_prefix}doc{q}"
        marker = POSITIVE_MARKER if label != Label.REFUTE else NEGATIVE_MARKER

        gold_sentences: list[list[str]] = []
        if label != Label.NEI:
            group_size = 2 if rng.random() < spec.two_sentence_fraction else 1
            for _ in range(group_size):
                gold_sentences.append([entity, RELATION, key, marker])
        is_conflicting = label != Label.NEI and rng.random() < spec.conflicting_fraction
        extra_sentences: list[list[str]] = []
        if is_conflicting:
            opposite = NEGATIVE_MARKER if marker == POSITIVE_MARKER else POSITIVE_MARKER
            extra_sentences.append([entity, RELATION, key, opposite])
            conflicting.add(claim_id)

        noise = [
            [entity, RELATION, POSITIVE_MARKER if i % 2 == 0 else NEGATIVE_MARKER, f"aside{i}"]
            for i in range(spec.marker_noise_sentences)
        ]
        fillers = [
            [entity, FILLER_RELATION, f"{spec.id_prefix}junk{q}x{i}"]
            for i in range(spec.filler_sentences)
        ]
        sentences = gold_sentences + extra_sentences + noise + fillers
        order = rng.permutation(len(sentences))
        shuffled = [tuple(sentences[i]) for i in order]
        gold_positions = [int(np.where(order == g)[0][0]) for g in range(len(gold_sentences))]

        links = ()
        if spec.satellite_docs:
            sat_id = f"{spec.id_prefix}sat{q}"
            corpus.add(
                Document(
                    doc_id=sat_id,
                    title=(f"{spec.id_prefix}satent{q}",),
                    sentences=((f"{spec.id_prefix}satent{q}", FILLER_RELATION, f"{spec.id_prefix}satjunk{q}"),),
                )
            )
            links = ((sat_id, 0),)
        corpus.add(
            Document(doc_id=doc_id, title=(entity,), sentences=tuple(shuffled), hyperlinks=links)
        )

        claim_tokens = (entity, FILLER_RELATION, key)
        groups: tuple[frozenset[tuple[str, int]], ...] = ()
        if label != Label.NEI:
            groups = (frozenset((doc_id, pos) for pos in gold_positions),)
        claims.append(
            ClaimInstance(
                claim_id=claim_id,
                claim=claim_tokens,
                label=label,
                evidence_groups=groups,
            )
        )
        if label != Label.NEI:
            info.rationales[claim_id] = tuple((key, marker) for _ in gold_positions)
        else:
            info.rationales[claim_id] = ()

    for d in range(spec.distractor_docs):
        corpus.add(
            Document(
                doc_id=f"{spec.id_prefix}distractor{d}",
                title=(f"{spec.id_prefix}topic{d}",),
                sentences=tuple(
                    (f"{spec.id_prefix}topic{d}", FILLER_RELATION, f"{spec.id_prefix}noise{d}x{i}")
                    for i in range(3)
                ),
            )
        )

    info.conflicting = frozenset(conflicting)
    return corpus, claims, info
