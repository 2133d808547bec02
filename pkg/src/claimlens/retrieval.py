"""First-stage retrieval: BM25 ranking, second-ranker interleaving, hyperlink
expansion, input-block assembly, negative mining and retrieval-level recall.

Index building is single-threaded; querying is read-only and thread-safe.
"""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .corpus import (
    Block,
    ClaimInstance,
    Corpus,
    Label,
    ParseError,
    SentenceRef,
    split_into_blocks,
)

logger = logging.getLogger(__name__)

BLOCKS_SCHEMA = "claimlens/blocks/v1"


@dataclass
class RankedDocs:
    """An ordered document ranking for one claim; scores non-increasing."""

    claim_id: str
    entries: list[tuple[str, float]]

    def __post_init__(self) -> None:
        seen: set[str] = set()
        for doc_id, _ in self.entries:
            if doc_id in seen:
                raise ValueError(f"duplicate doc_id in ranking: {doc_id!r}")
            seen.add(doc_id)
        scores = [s for _, s in self.entries]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("ranking scores must be non-increasing")

    @property
    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.entries]


@dataclass
class RetrievalConfig:
    """Input-assembly knobs: K1 first-stage blocks, K2 expansion blocks, the
    block token budget, and the rank window negatives are mined from."""

    k1: int = 4
    k2: int = 0
    block_budget: int = 500
    negative_lo: int = 50
    negative_hi: int = 200
    bm25_k1: float = 0.9
    bm25_b: float = 0.4

    def __post_init__(self) -> None:
        if self.k1 < 0 or self.k2 < 0 or self.k1 + self.k2 < 1:
            raise ValueError("need k1 >= 0, k2 >= 0 and k1 + k2 >= 1")
        if not self.negative_lo < self.negative_hi:
            raise ValueError("negative_lo must be < negative_hi")


class Bm25Index:
    """Okapi BM25 over documents (title + sentences, lowercased).

    Uses the non-negative idf variant ``ln(1 + (N - df + 0.5) / (df + 0.5))``;
    each occurrence of a query term contributes its own saturation term.
    """

    def __init__(self, corpus: Corpus, k1: float = 0.9, b: float = 0.4) -> None:
        self.k1 = k1
        self.b = b
        self._doc_ids: list[str] = []
        self._term_freqs: list[Counter[str]] = []
        self._doc_lens: list[int] = []
        df: Counter[str] = Counter()
        for doc in corpus:
            tokens = [t.lower() for t in doc.all_tokens()]
            freqs = Counter(tokens)
            self._doc_ids.append(doc.doc_id)
            self._term_freqs.append(freqs)
            self._doc_lens.append(len(tokens))
            df.update(freqs.keys())
        n_docs = len(self._doc_ids)
        self._avgdl = (sum(self._doc_lens) / n_docs) if n_docs else 0.0
        self._idf = {
            term: math.log(1.0 + (n_docs - count + 0.5) / (count + 0.5))
            for term, count in df.items()
        }
        self._postings: dict[str, list[int]] = {}
        for doc_pos, freqs in enumerate(self._term_freqs):
            for term in freqs:
                self._postings.setdefault(term, []).append(doc_pos)

    def score(self, query: Sequence[str], doc_pos: int) -> float:
        freqs = self._term_freqs[doc_pos]
        norm = 1.0 - self.b + self.b * self._doc_lens[doc_pos] / self._avgdl
        total = 0.0
        for term in (t.lower() for t in query):
            tf = freqs.get(term, 0)
            if tf == 0:
                continue
            total += self._idf[term] * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
        return total

    def rank(self, query: Sequence[str], k: int) -> list[tuple[str, float]]:
        candidates: set[int] = set()
        for term in {t.lower() for t in query}:
            candidates.update(self._postings.get(term, ()))
        scored = [(self._doc_ids[pos], self.score(query, pos)) for pos in candidates]
        scored = [(d, s) for d, s in scored if s > 0.0]
        scored.sort(key=lambda item: (-item[1], item[0]))
        return scored[:k]


def bm25_rank(
    claim: Sequence[str],
    index: Bm25Index,
    k: int,
    claim_id: str = "",
) -> RankedDocs:
    """Top-k documents by BM25 score; empty claims rank nothing."""
    if not claim:
        return RankedDocs(claim_id, [])
    return RankedDocs(claim_id, index.rank(claim, k))


class SecondRanker(Protocol):
    """A second first-stage ranking to interleave with BM25."""

    def __call__(self, claim: Sequence[str], corpus: Corpus, k: int) -> list[tuple[str, float]]: ...


def title_match_ranker(claim: Sequence[str], corpus: Corpus, k: int) -> list[tuple[str, float]]:
    """Default second ranker: fraction of a document's title tokens present in
    the claim, with fully-contained titles ranked first. Deterministic."""
    claim_set = {t.lower() for t in claim}
    scored: list[tuple[str, float]] = []
    for doc in corpus:
        if not doc.title:
            continue
        title = [t.lower() for t in doc.title]
        overlap = sum(1 for t in title if t in claim_set) / len(title)
        if overlap > 0.0:
            scored.append((doc.doc_id, overlap + (1.0 if overlap == 1.0 else 0.0)))
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored[:k]


def _positional_scores(doc_ids: Iterable[str]) -> list[tuple[str, float]]:
    return [(doc_id, 1.0 / (pos + 1)) for pos, doc_id in enumerate(doc_ids)]


def interleave(a: RankedDocs, b: RankedDocs) -> RankedDocs:
    """Alternate a[0], b[0], a[1], b[1], ... skipping documents already
    emitted; when one list runs out the rest of the other is appended."""
    merged: list[str] = []
    seen: set[str] = set()
    ids_a, ids_b = a.doc_ids, b.doc_ids
    for pos in range(max(len(ids_a), len(ids_b))):
        for ids in (ids_a, ids_b):
            if pos < len(ids) and ids[pos] not in seen:
                merged.append(ids[pos])
                seen.add(ids[pos])
    return RankedDocs(a.claim_id, _positional_scores(merged))


def hyperlink_expand(top_docs: RankedDocs, corpus: Corpus, limit: int) -> RankedDocs:
    """Documents hyperlinked from the top-ranked ones, ordered by (rank of the
    source document, character offset of the link), deduplicated against the
    ranking and earlier expansions, truncated to ``limit``."""
    candidates: list[tuple[int, int, str]] = []
    for rank_pos, doc_id in enumerate(top_docs.doc_ids):
        doc = corpus.get(doc_id)
        if doc is None:
            continue
        for target, offset in doc.hyperlinks:
            candidates.append((rank_pos, offset, target))
    candidates.sort(key=lambda item: (item[0], item[1], item[2]))

    already = set(top_docs.doc_ids)
    expanded: list[str] = []
    for _, _, target in candidates:
        if len(expanded) >= limit:
            break
        if target in already:
            continue
        if target not in corpus:
            logger.debug("dangling hyperlink target %r skipped", target)
            continue
        expanded.append(target)
        already.add(target)
    return RankedDocs(top_docs.claim_id, _positional_scores(expanded))


@dataclass
class RetrievalResult:
    """Assembled verifier input for one claim, plus the document order and the
    sentence ranking that negative mining draws from."""

    claim_id: str
    blocks: list[Block]
    doc_order: list[str]
    ranked_sentences: list[SentenceRef] = field(default_factory=list)


def _blocks_for_docs(
    doc_ids: Iterable[str],
    corpus: Corpus,
    budget: int,
    measure: Callable[[Sequence[str]], int],
    want: int,
    skip: set[tuple[str, int]],
) -> list[Block]:
    out: list[Block] = []
    for doc_id in doc_ids:
        if len(out) >= want:
            break
        doc = corpus.get(doc_id)
        if doc is None or not doc.sentences:
            continue
        for block in split_into_blocks(doc, budget, measure):
            if (block.doc_id, block.block_index) in skip:
                continue
            out.append(block)
            skip.add((block.doc_id, block.block_index))
            if len(out) >= want:
                break
    return out


def assemble_input_blocks(
    claim: ClaimInstance,
    config: RetrievalConfig,
    corpus: Corpus,
    index: Bm25Index,
    measure: Callable[[Sequence[str]], int],
    second_ranker: SecondRanker | None = title_match_ranker,
    inject_gold: bool = False,
    rng: np.random.Generator | None = None,
) -> RetrievalResult:
    """Build the claim's input: K1 blocks from the interleaved first-stage
    ranking (document rank order, then block order), then K2 blocks from
    hyperlink expansion. ``inject_gold`` adds blocks holding any uncovered
    gold evidence at uniformly random positions (oracle inputs)."""
    k_docs = config.k1 + config.k2
    first = bm25_rank(claim.claim, index, k_docs, claim.claim_id)
    if second_ranker is not None:
        second = RankedDocs(claim.claim_id, second_ranker(claim.claim, corpus, k_docs))
        first_stage = interleave(first, second)
    else:
        first_stage = first

    taken: set[tuple[str, int]] = set()
    blocks = _blocks_for_docs(
        first_stage.doc_ids, corpus, config.block_budget, measure, config.k1, taken
    )
    doc_order = list(dict.fromkeys(b.doc_id for b in blocks))
    if config.k2 > 0:
        expansion = hyperlink_expand(first_stage, corpus, limit=config.k2)
        blocks += _blocks_for_docs(
            expansion.doc_ids, corpus, config.block_budget, measure, config.k2, taken
        )
        doc_order += [d for d in expansion.doc_ids if d not in doc_order]

    if inject_gold and claim.evidence_groups:
        if rng is None:
            rng = np.random.default_rng(0)
        covered = {
            (b.doc_id, idx) for b in blocks for idx in b.sentence_indices
        }
        injected: list[Block] = []
        for group in claim.evidence_groups:
            if set(group) <= covered:
                continue
            for doc_id, sent_idx in sorted(group):
                if (doc_id, sent_idx) in covered:
                    continue
                doc = corpus.get(doc_id)
                if doc is None:
                    continue
                for block in split_into_blocks(doc, config.block_budget, measure):
                    key = (block.doc_id, block.block_index)
                    if sent_idx in block.sentence_indices and key not in taken:
                        injected.append(block)
                        taken.add(key)
                        covered.update((block.doc_id, i) for i in block.sentence_indices)
                        break
        for block in injected:
            blocks.insert(int(rng.integers(0, len(blocks) + 1)), block)
        limit = config.k1 + config.k2
        while len(blocks) > limit:
            # trim from the tail but never drop an injected gold block
            for pos in range(len(blocks) - 1, -1, -1):
                if blocks[pos] not in injected:
                    del blocks[pos]
                    break
            else:
                break
        doc_order = list(dict.fromkeys(b.doc_id for b in blocks))

    ranked_sentences = rank_input_sentences(blocks, doc_order)
    return RetrievalResult(claim.claim_id, blocks, doc_order, ranked_sentences)


def rank_input_sentences(blocks: Sequence[Block], doc_order: Sequence[str]) -> list[SentenceRef]:
    """Rank all input sentences by their document's first-stage rank, then
    block order, then in-document sentence order."""
    doc_rank = {doc_id: pos for pos, doc_id in enumerate(doc_order)}
    keyed = [
        (doc_rank.get(b.doc_id, len(doc_rank)), b.block_index, idx, (b.doc_id, idx))
        for b in blocks
        for idx in b.sentence_indices
    ]
    keyed.sort(key=lambda item: item[:3])
    return [ref for *_, ref in keyed]


def mine_negatives(
    ranked_sentences: Sequence[SentenceRef],
    gold: set[SentenceRef],
    lo: int,
    hi: int,
    n: int,
    rng: np.random.Generator | int,
) -> list[SentenceRef]:
    """Sample ``n`` sentences without replacement from rank positions
    [lo, hi] (1-based), never a gold sentence. Rankings shorter than ``lo``
    fall back to the non-gold tail after the last gold sentence, then to all
    non-gold sentences. Deterministic under a fixed seed."""
    if n <= 0:
        return []
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    if len(ranked_sentences) >= lo:
        window = ranked_sentences[lo - 1 : hi]
        candidates = [ref for ref in window if ref not in gold]
    else:
        last_gold = max(
            (pos for pos, ref in enumerate(ranked_sentences) if ref in gold), default=-1
        )
        candidates = [ref for ref in ranked_sentences[last_gold + 1 :] if ref not in gold]
        if not candidates:
            candidates = [ref for ref in ranked_sentences if ref not in gold]
        if candidates:
            logger.warning(
                "ranking has %d sentences (< lo=%d); mining negatives from the non-gold tail",
                len(ranked_sentences), lo,
            )
    if not candidates:
        return []
    take = min(n, len(candidates))
    picks = rng.choice(len(candidates), size=take, replace=False)
    return [candidates[int(i)] for i in picks]


def recall_at_input(
    claims: Sequence[ClaimInstance],
    blocks_by_claim: dict[str, Sequence[Block]],
) -> float:
    """Fraction of non-NEI claims with at least one evidence group fully
    contained in the sentences of their input blocks."""
    hits = 0
    total = 0
    for claim in claims:
        if claim.label == Label.NEI:
            continue
        total += 1
        present = {
            (b.doc_id, idx)
            for b in blocks_by_claim.get(claim.claim_id, ())
            for idx in b.sentence_indices
        }
        if any(set(group) and set(group) <= present for group in claim.evidence_groups):
            hits += 1
    return hits / total if total else 0.0


def save_retrievals(results: Iterable[RetrievalResult], path: str | Path) -> None:
    """Write assembled inputs as one JSONL record per claim."""
    with open(path, "w", encoding="utf-8") as fh:
        for result in results:
            record = {
                "schema": BLOCKS_SCHEMA,
                "claim_id": result.claim_id,
                "doc_order": result.doc_order,
                "blocks": [
                    {
                        "doc_id": b.doc_id,
                        "block_index": b.block_index,
                        "sentences": list(b.sentence_indices),
                        "tokens": b.token_count,
                        "truncated": b.truncated,
                    }
                    for b in result.blocks
                ],
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_retrievals(path: str | Path) -> dict[str, RetrievalResult]:
    """Read assembled inputs back; sentence rankings are re-derived."""
    results: dict[str, RetrievalResult] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if record.get("schema") != BLOCKS_SCHEMA:
                raise ParseError(
                    f"{path}:{lineno}: expected schema {BLOCKS_SCHEMA}, got {record.get('schema')!r}"
                )
            blocks = [
                Block(
                    doc_id=b["doc_id"],
                    block_index=b["block_index"],
                    sentence_indices=tuple(b["sentences"]),
                    token_count=b["tokens"],
                    truncated=b.get("truncated", False),
                )
                for b in record["blocks"]
            ]
            doc_order = list(record["doc_order"])
            results[record["claim_id"]] = RetrievalResult(
                claim_id=record["claim_id"],
                blocks=blocks,
                doc_order=doc_order,
                ranked_sentences=rank_input_sentences(blocks, doc_order),
            )
    return results
