"""Data model and ingestion: claims, documents, sentence segmentation, block packing.

All types here are immutable after construction and safe to share across
threads. Ingestion itself is single-threaded per file.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

CLAIMS_SCHEMA = "claimlens/claims/v1"
CORPUS_SCHEMA = "claimlens/corpus/v1"

TokenSeq = tuple[str, ...]
SentenceRef = tuple[str, int]  # (doc_id, sentence index within document)


class ParseError(ValueError):
    """A file line could not be parsed; message names the offending line."""


class ValidationError(ValueError):
    """Parsed content violates a structural requirement."""


class Label(str, Enum):
    SUPPORT = "SUPPORT"
    REFUTE = "REFUTE"
    NEI = "NEI"

    @property
    def class_index(self) -> int:
        return _LABEL_INDEX[self]


_LABEL_INDEX = {Label.SUPPORT: 0, Label.REFUTE: 1, Label.NEI: 2}

# Raw FEVER label strings -> internal labels.
_FEVER_LABELS = {
    "SUPPORTS": Label.SUPPORT,
    "REFUTES": Label.REFUTE,
    "NOT ENOUGH INFO": Label.NEI,
    # already-normalized files round-trip through the same loader
    "SUPPORT": Label.SUPPORT,
    "REFUTE": Label.REFUTE,
    "NEI": Label.NEI,
}


def tokenize(text: str) -> list[str]:
    """Whitespace tokenization; joining tokens with single spaces restores the
    text modulo whitespace normalization."""
    return text.split()


def segment_sentences(text: str) -> list[TokenSeq]:
    """Deterministic rule-based sentence segmentation.

    A sentence ends at ``.``, ``!`` or ``?`` (optionally followed by closing
    quotes/brackets) when followed by whitespace or end of text. Returns
    tokenized sentences; empty text yields an empty list.
    """
    sentences: list[TokenSeq] = []
    buf: list[str] = []
    for token in tokenize(text):
        buf.append(token)
        core = token.rstrip("\"')]}»”’")
        if core and core[-1] in ".!?":
            sentences.append(tuple(buf))
            buf = []
    if buf:
        sentences.append(tuple(buf))
    return sentences


# Pluggable splitter: str -> list of token sequences.
SentenceSplitter = Callable[[str], list[TokenSeq]]


@dataclass(frozen=True)
class Document:
    """A titled document as an ordered list of tokenized sentences.

    ``hyperlinks`` are (target doc_id, character offset of the link in the
    document's joined text) pairs, in document order.
    """

    doc_id: str
    title: TokenSeq
    sentences: tuple[TokenSeq, ...]
    hyperlinks: tuple[tuple[str, int], ...] = ()

    def sentence_tokens(self, index: int) -> TokenSeq:
        return self.sentences[index]

    def all_tokens(self) -> list[str]:
        out = list(self.title)
        for sent in self.sentences:
            out.extend(sent)
        return out


@dataclass(frozen=True)
class ClaimInstance:
    """A claim with veracity label and annotated evidence groups.

    Each evidence group is one annotator's set of sentences that together
    verify the claim; matching a group requires the whole set. NEI claims
    may carry no groups.
    """

    claim_id: str
    claim: TokenSeq
    label: Label
    evidence_groups: tuple[frozenset[SentenceRef], ...] = ()

    def gold_sentences(self) -> set[SentenceRef]:
        out: set[SentenceRef] = set()
        for group in self.evidence_groups:
            out.update(group)
        return out


@dataclass(frozen=True)
class Block:
    """A contiguous, sentence-aligned slice of a document.

    ``truncated`` marks the degenerate case of a single sentence longer than
    the packing budget, kept as its own block and cut to the budget.
    """

    doc_id: str
    block_index: int
    sentence_indices: tuple[int, ...]
    token_count: int
    truncated: bool = False


class Corpus:
    """Document collection with unique ids and insertion-order iteration."""

    def __init__(self, documents: Iterable[Document] = ()) -> None:
        self._docs: dict[str, Document] = {}
        for doc in documents:
            self.add(doc)

    def add(self, doc: Document) -> None:
        if doc.doc_id in self._docs:
            raise ValidationError(f"duplicate doc_id: {doc.doc_id!r}")
        self._docs[doc.doc_id] = doc

    def get(self, doc_id: str) -> Document | None:
        return self._docs.get(doc_id)

    def __getitem__(self, doc_id: str) -> Document:
        return self._docs[doc_id]

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def __len__(self) -> int:
        return len(self._docs)

    def __iter__(self) -> Iterator[Document]:
        return iter(self._docs.values())

    @property
    def doc_ids(self) -> list[str]:
        return list(self._docs)


def _as_token_seq(value: object, what: str) -> TokenSeq:
    if isinstance(value, str):
        return tuple(tokenize(value))
    if isinstance(value, (list, tuple)) and all(isinstance(t, str) for t in value):
        return tuple(value)
    raise ValidationError(f"{what} must be a string or a list of tokens, got {type(value).__name__}")


def _iter_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with path.open("r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise ParseError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, record


def load_fever_claims(path: str | Path) -> list[ClaimInstance]:
    """Load claims from a FEVER-style JSONL file.

    Each line holds ``id``, ``claim``, ``label`` and ``evidence`` (a list of
    annotation sets, each a list of ``[annotation_id, evidence_id, page,
    sentence_id]`` entries). One evidence group is built per annotation set;
    entries with a null page (NEI placeholders) are dropped, and duplicate
    groups collapse to one.
    """
    path = Path(path)
    claims: list[ClaimInstance] = []
    for lineno, record in _iter_jsonl(path):
        try:
            claim_id = str(record["id"])
            claim_tokens = _as_token_seq(record["claim"], "claim")
            raw_label = record["label"]
        except KeyError as exc:
            raise ParseError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from exc
        label = _FEVER_LABELS.get(raw_label)
        if label is None:
            raise ValidationError(f"{path}:{lineno}: unknown label {raw_label!r}")
        groups: list[frozenset[SentenceRef]] = []
        for annotation_set in record.get("evidence") or []:
            group: set[SentenceRef] = set()
            for entry in annotation_set:
                if isinstance(entry, (list, tuple)) and len(entry) >= 4:
                    page, sent = entry[-2], entry[-1]
                elif isinstance(entry, (list, tuple)) and len(entry) == 2:
                    page, sent = entry
                else:
                    raise ParseError(f"{path}:{lineno}: malformed evidence entry {entry!r}")
                if page is None or sent is None:
                    continue
                group.add((str(page), int(sent)))
            if group and frozenset(group) not in groups:
                groups.append(frozenset(group))
        claims.append(ClaimInstance(claim_id, claim_tokens, label, tuple(groups)))
    return claims


def _document_from_record(record: dict, where: str, splitter: SentenceSplitter) -> Document:
    try:
        doc_id = str(record["id"])
    except KeyError as exc:
        raise ParseError(f"{where}: missing field 'id'") from exc
    title = _as_token_seq(record.get("title", ""), "title")
    if "sentences" in record:
        sentences = tuple(tuple(sent) for sent in record["sentences"])
    elif "lines" in record:
        sentences = tuple(tuple(tokenize(line)) for line in record["lines"])
    elif "text" in record:
        sentences = tuple(splitter(record["text"]))
    else:
        raise ParseError(f"{where}: record needs 'sentences', 'lines' or 'text'")
    links = tuple((str(t), int(off)) for t, off in (record.get("links") or []))
    return Document(doc_id, title, sentences, links)


def load_corpus(
    path: str | Path,
    splitter: SentenceSplitter = segment_sentences,
) -> Corpus:
    """Load a document corpus from a JSONL file or a directory of them.

    Records carry ``id``, ``title``, one of ``sentences`` (token lists),
    ``lines`` (sentence strings) or ``text`` (raw, segmented by ``splitter``),
    and optional ``links``. Duplicate doc ids raise ``ValidationError``.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in {".jsonl", ".json"})
        if not files:
            logger.warning("corpus directory %s contains no .jsonl files", path)
    else:
        files = [path]
    corpus = Corpus()
    for file in files:
        for lineno, record in _iter_jsonl(file):
            doc = _document_from_record(record, f"{file}:{lineno}", splitter)
            corpus.add(doc)
    return corpus


def split_into_blocks(
    doc: Document,
    budget: int,
    measure: Callable[[Sequence[str]], int],
) -> list[Block]:
    """Greedily pack sentences into non-overlapping blocks of at most
    ``budget`` tokens under ``measure``, never splitting a sentence, except
    that a lone over-budget sentence becomes its own truncated block.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    blocks: list[Block] = []
    current: list[int] = []
    current_count = 0

    def close() -> None:
        nonlocal current, current_count
        if current:
            blocks.append(Block(doc.doc_id, len(blocks), tuple(current), current_count))
            current, current_count = [], 0

    for idx, sentence in enumerate(doc.sentences):
        length = measure(sentence)
        if length > budget:
            close()
            logger.warning(
                "sentence %d of %s has %d tokens, over the %d budget; truncating",
                idx, doc.doc_id, length, budget,
            )
            blocks.append(Block(doc.doc_id, len(blocks), (idx,), budget, truncated=True))
            continue
        if current_count + length > budget:
            close()
        current.append(idx)
        current_count += length
    close()
    return blocks


# -- normalized serialization (round-trips bit-exactly) --


def save_claims(claims: Iterable[ClaimInstance], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for claim in claims:
            record = {
                "schema": CLAIMS_SCHEMA,
                "id": claim.claim_id,
                "claim": list(claim.claim),
                "label": claim.label.value,
                "evidence_groups": [sorted([d, i] for d, i in group) for group in claim.evidence_groups],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def load_claims(path: str | Path) -> list[ClaimInstance]:
    claims: list[ClaimInstance] = []
    for lineno, record in _iter_jsonl(Path(path)):
        groups = tuple(
            frozenset((str(d), int(i)) for d, i in group)
            for group in record.get("evidence_groups", [])
        )
        claims.append(
            ClaimInstance(
                claim_id=str(record["id"]),
                claim=tuple(record["claim"]),
                label=Label(record["label"]),
                evidence_groups=groups,
            )
        )
    return claims


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as handle:
        for doc in corpus:
            record = {
                "schema": CORPUS_SCHEMA,
                "id": doc.doc_id,
                "title": list(doc.title),
                "sentences": [list(s) for s in doc.sentences],
                "links": [[t, off] for t, off in doc.hyperlinks],
            }
            handle.write(json.dumps(record, ensure_ascii=False) + "\n")


def validate_claims(claims: Iterable[ClaimInstance], corpus: Corpus) -> list[str]:
    """Return human-readable problems for evidence refs missing from the corpus."""
    problems = []
    for claim in claims:
        for group in claim.evidence_groups:
            for doc_id, sent_idx in group:
                doc = corpus.get(doc_id)
                if doc is None:
                    problems.append(f"claim {claim.claim_id}: evidence doc {doc_id!r} not in corpus")
                elif not 0 <= sent_idx < len(doc.sentences):
                    problems.append(
                        f"claim {claim.claim_id}: sentence {sent_idx} out of range for doc {doc_id!r}"
                    )
    return problems
