"""Per-block model inputs, the encoder contract, and representation gathering.

Input layout per block:

    [CLS] <claim> c [SEP] <title> t <passage> s1 <sentence> s2 <sentence> ... [SEP]

Every sentence is followed by a ``<sentence>`` marker token. Evidence tokens
are the tokens of the sentences themselves; the claim, title and all special
tokens are context only and never receive relevance mass.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence, runtime_checkable

import torch
from torch import Tensor, nn

from .corpus import Block, Document

logger = logging.getLogger(__name__)

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"
CLAIM_MARKER = "<claim>"
TITLE_MARKER = "<title>"
PASSAGE_MARKER = "<passage>"
SENTENCE_MARKER = "<sentence>"

SPECIAL_TOKENS = (
    PAD_TOKEN,
    UNK_TOKEN,
    CLS_TOKEN,
    SEP_TOKEN,
    CLAIM_MARKER,
    TITLE_MARKER,
    PASSAGE_MARKER,
    SENTENCE_MARKER,
)


class EncoderContractError(RuntimeError):
    """An encoder violated its behavioral contract (shape or vocabulary)."""


class Vocabulary:
    """Token-to-id mapping with the marker specials always present."""

    def __init__(self, tokens: Iterable[str] = ()) -> None:
        self._index: dict[str, int] = {}
        for token in SPECIAL_TOKENS:
            self._index[token] = len(self._index)
        self.add(tokens)

    def add(self, tokens: Iterable[str]) -> int:
        """Add unseen tokens; returns how many were new."""
        added = 0
        for token in tokens:
            if token not in self._index:
                self._index[token] = len(self._index)
                added += 1
        return added

    def id(self, token: str) -> int:
        return self._index.get(token, self._index[UNK_TOKEN])

    def ids(self, tokens: Iterable[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    @property
    def pad_id(self) -> int:
        return self._index[PAD_TOKEN]

    def tokens(self) -> list[str]:
        return list(self._index)

    @classmethod
    def from_documents(cls, docs: Iterable[Document], extra: Iterable[str] = ()) -> "Vocabulary":
        vocab = cls()
        for doc in docs:
            vocab.add(doc.all_tokens())
        vocab.add(extra)
        return vocab


@dataclass
class InputSequence:
    """One encoded-template block input with provenance bookkeeping.

    ``evidence_*`` arrays run parallel over evidence token positions:
    document-level sentence index, input block slot (constant per sequence)
    and the token's offset within its sentence.
    """

    token_ids: list[int]
    tokens: list[str]
    doc_id: str
    block_index: int
    block_slot: int
    sentence_marker_positions: list[int]
    evidence_token_positions: list[int]
    evidence_sentence_ids: list[int]
    evidence_token_offsets: list[int]
    marker_sentence_ids: list[int]

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def provenance_of_token(self) -> dict[int, tuple[int, int]]:
        return {
            pos: (sent, self.block_slot)
            for pos, sent in zip(self.evidence_token_positions, self.evidence_sentence_ids)
        }


def build_input_sequence(
    claim: Sequence[str],
    block: Block,
    doc: Document,
    vocab: Vocabulary,
    budget: int,
    block_slot: int = 0,
) -> InputSequence:
    """Lay out one block in the input template within ``budget`` positions.

    Sentences that no longer fit are dropped whole from the tail; the claim is
    never cut. A block whose single (already over-long) sentence still does
    not fit is truncated token-wise. Raises ``EncoderContractError`` when not
    even one evidence token fits next to the claim.
    """
    tokens: list[str] = [CLS_TOKEN, CLAIM_MARKER, *claim, SEP_TOKEN, TITLE_MARKER, *doc.title, PASSAGE_MARKER]
    overhead = len(tokens) + 1  # trailing [SEP]
    if overhead + 2 > budget:
        raise EncoderContractError(
            f"claim of {len(claim)} tokens leaves no room for evidence in a budget of {budget}"
        )

    marker_positions: list[int] = []
    evidence_positions: list[int] = []
    evidence_sentences: list[int] = []
    evidence_offsets: list[int] = []
    marker_sentences: list[int] = []

    remaining = budget - overhead
    for sent_idx in block.sentence_indices:
        sent_tokens = list(doc.sentences[sent_idx])
        need = len(sent_tokens) + 1  # sentence + its marker
        if need > remaining:
            if marker_positions:
                logger.debug(
                    "dropping trailing sentences of %s block %d to fit budget %d",
                    doc.doc_id, block.block_index, budget,
                )
                break
            keep = remaining - 1
            logger.warning(
                "truncating sentence %d of %s from %d to %d tokens to fit budget",
                sent_idx, doc.doc_id, len(sent_tokens), keep,
            )
            sent_tokens = sent_tokens[:keep]
        for offset, token in enumerate(sent_tokens):
            evidence_positions.append(len(tokens))
            evidence_sentences.append(sent_idx)
            evidence_offsets.append(offset)
            tokens.append(token)
        marker_positions.append(len(tokens))
        marker_sentences.append(sent_idx)
        tokens.append(SENTENCE_MARKER)
        remaining -= len(sent_tokens) + 1
    tokens.append(SEP_TOKEN)

    return InputSequence(
        token_ids=vocab.ids(tokens),
        tokens=tokens,
        doc_id=doc.doc_id,
        block_index=block.block_index,
        block_slot=block_slot,
        sentence_marker_positions=marker_positions,
        evidence_token_positions=evidence_positions,
        evidence_sentence_ids=evidence_sentences,
        evidence_token_offsets=evidence_offsets,
        marker_sentence_ids=marker_sentences,
    )


@runtime_checkable
class Encoder(Protocol):
    """Behavioral contract for pluggable encoders.

    Required surface: ``dim``, ``measure`` (token count of a sentence under
    the encoder's own tokenization, used for block packing),
    ``extend_vocabulary`` and ``encode`` returning one ``(len(seq), dim)``
    matrix per input sequence. ``encode`` must be deterministic in eval mode.
    """

    dim: int

    def measure(self, tokens: Sequence[str]) -> int: ...

    def extend_vocabulary(self, tokens: Iterable[str]) -> int: ...

    def encode(self, sequences: Sequence[InputSequence]) -> list[Tensor]: ...


@dataclass
class GatheredReps:
    """Evidence-token and sentence-marker representations over all blocks.

    Rows follow block order, then position order. ``token_*`` arrays run
    parallel to ``evidence`` rows; ``marker_*`` to ``markers`` rows.
    ``doc_ids`` maps block slots to document ids.
    """

    evidence: Tensor  # (L_e, d)
    markers: Tensor  # (L_S, d)
    token_sentence: Tensor  # (L_e,) long, document-level sentence index
    token_block: Tensor  # (L_e,) long, input block slot
    token_offset: Tensor  # (L_e,) long, offset within the sentence
    marker_sentence: Tensor  # (L_S,) long
    marker_block: Tensor  # (L_S,) long
    token_strings: list[str]
    doc_ids: list[str]

    @property
    def num_evidence_tokens(self) -> int:
        return int(self.evidence.shape[0])

    @property
    def num_sentences(self) -> int:
        return int(self.markers.shape[0])


def encode_blocks(sequences: Sequence[InputSequence], encoder: Encoder) -> GatheredReps:
    """Encode each block independently and gather evidence-token and
    sentence-marker rows in block order then position order."""
    reps = encoder.encode(sequences)
    if len(reps) != len(sequences):
        raise EncoderContractError(
            f"encoder returned {len(reps)} matrices for {len(sequences)} sequences"
        )
    return gather_representations(sequences, reps, encoder.dim)


def gather_representations(
    sequences: Sequence[InputSequence], reps: Sequence[Tensor], dim: int
) -> GatheredReps:
    """Gather evidence-token and sentence-marker rows from per-sequence
    representation matrices, block order then position order."""
    evidence_rows: list[Tensor] = []
    marker_rows: list[Tensor] = []
    token_sentence: list[int] = []
    token_block: list[int] = []
    token_offset: list[int] = []
    marker_sentence: list[int] = []
    marker_block: list[int] = []
    token_strings: list[str] = []
    doc_ids: list[str] = []

    for seq, rep in zip(sequences, reps):
        if rep.ndim != 2 or rep.shape[0] != len(seq) or rep.shape[1] != dim:
            raise EncoderContractError(
                f"encoder output {tuple(rep.shape)} does not match sequence of "
                f"length {len(seq)} and dim {dim}"
            )
        doc_ids.append(seq.doc_id)
        if seq.evidence_token_positions:
            evidence_rows.append(rep[torch.tensor(seq.evidence_token_positions)])
        if seq.sentence_marker_positions:
            marker_rows.append(rep[torch.tensor(seq.sentence_marker_positions)])
        token_sentence.extend(seq.evidence_sentence_ids)
        token_block.extend([seq.block_slot] * len(seq.evidence_token_positions))
        token_offset.extend(seq.evidence_token_offsets)
        marker_sentence.extend(seq.marker_sentence_ids)
        marker_block.extend([seq.block_slot] * len(seq.sentence_marker_positions))
        token_strings.extend(seq.tokens[p] for p in seq.evidence_token_positions)

    device = reps[0].device if reps else torch.device("cpu")
    dtype = reps[0].dtype if reps else torch.get_default_dtype()
    empty = torch.zeros((0, dim), device=device, dtype=dtype)
    return GatheredReps(
        evidence=torch.cat(evidence_rows, dim=0) if evidence_rows else empty,
        markers=torch.cat(marker_rows, dim=0) if marker_rows else empty,
        token_sentence=torch.tensor(token_sentence, dtype=torch.long),
        token_block=torch.tensor(token_block, dtype=torch.long),
        token_offset=torch.tensor(token_offset, dtype=torch.long),
        marker_sentence=torch.tensor(marker_sentence, dtype=torch.long),
        marker_block=torch.tensor(marker_block, dtype=torch.long),
        token_strings=token_strings,
        doc_ids=doc_ids,
    )


class TinyTransformerEncoder(nn.Module):
    """Small trainable transformer for desk-scale runs.

    Word-level tokenization (``measure`` is plain token count). The masker
    hooks in through ``token_embeddings`` + ``encode_from_token_embeddings``,
    which splits the input pipeline at the token-embedding stage.

    With ``sentence_local`` (the default), evidence tokens attend only to
    their own sentence plus the claim/header positions, and claim/header
    positions attend only to each other. A pretrained encoder keeps sentence
    content reasonably disentangled on its own; a model this size trained
    from scratch does not, and without the constraint the class signal
    smears across every token of a document, which breaks sentence ranking
    under coarse supervision.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        dim: int = 64,
        layers: int = 2,
        heads: int = 4,
        max_len: int = 512,
        dropout: float = 0.1,
        sentence_local: bool = True,
    ) -> None:
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.heads = heads
        self.max_len = max_len
        self.sentence_local = sentence_local
        self.token_embedding = nn.Embedding(len(vocab), dim, padding_idx=vocab.pad_id)
        self.position_embedding = nn.Embedding(max_len, dim)
        self.input_norm = nn.LayerNorm(dim)
        self.input_dropout = nn.Dropout(dropout)
        layer = nn.TransformerEncoderLayer(
            d_model=dim,
            nhead=heads,
            dim_feedforward=4 * dim,
            dropout=dropout,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=layers, enable_nested_tensor=False)
        self.output_norm = nn.LayerNorm(dim)

    def measure(self, tokens: Sequence[str]) -> int:
        return len(tokens)

    def extend_vocabulary(self, tokens: Iterable[str]) -> int:
        added = self.vocab.add(tokens)
        if added:
            old = self.token_embedding
            new = nn.Embedding(len(self.vocab), self.dim, padding_idx=self.vocab.pad_id)
            with torch.no_grad():
                new.weight[: old.num_embeddings] = old.weight
            self.token_embedding = new
        return added

    def token_embeddings(self, token_ids: Tensor) -> Tensor:
        return self.token_embedding(token_ids)

    _SHARED = -1
    _PADDING = -2

    def locality_mask(
        self, sequences: Sequence[InputSequence], length: int
    ) -> Tensor | None:
        """Boolean (batch * heads, L, L) attention mask, True = blocked.

        Position groups: sentence tokens and their markers carry the
        sentence index; everything else in a live sequence (claim, title,
        specials) is shared. A position may attend shared positions and its
        own group. Padding rows fall back to the shared group so their
        attention softmax stays finite.
        """
        if not self.sentence_local or not sequences:
            return None
        groups = torch.full((len(sequences), length), self._PADDING, dtype=torch.long)
        for row, seq in enumerate(sequences):
            groups[row, : len(seq)] = self._SHARED
            if seq.sentence_marker_positions:
                groups[row, torch.tensor(seq.sentence_marker_positions)] = torch.tensor(
                    seq.marker_sentence_ids
                )
            if seq.evidence_token_positions:
                groups[row, torch.tensor(seq.evidence_token_positions)] = torch.tensor(
                    seq.evidence_sentence_ids
                )
        target_shared = groups[:, None, :] == self._SHARED
        same_group = (groups[:, :, None] == groups[:, None, :]) & (
            groups[:, :, None] >= 0
        )
        blocked = ~(target_shared | same_group)
        return blocked.repeat_interleave(self.heads, dim=0)

    def encode_from_token_embeddings(
        self,
        embedded: Tensor,
        padding_mask: Tensor,
        sequences: Sequence[InputSequence] | None = None,
    ) -> Tensor:
        n, length, _ = embedded.shape
        if length > self.max_len:
            raise EncoderContractError(f"sequence length {length} exceeds max_len {self.max_len}")
        positions = torch.arange(length, device=embedded.device)
        x = embedded + self.position_embedding(positions)[None, :, :]
        x = self.input_dropout(self.input_norm(x))
        attn_mask = self.locality_mask(sequences, length) if sequences is not None else None
        x = self.blocks(x, mask=attn_mask, src_key_padding_mask=padding_mask)
        return self.output_norm(x)

    def forward(
        self,
        token_ids: Tensor,
        padding_mask: Tensor,
        sequences: Sequence[InputSequence] | None = None,
    ) -> Tensor:
        return self.encode_from_token_embeddings(
            self.token_embeddings(token_ids), padding_mask, sequences
        )

    def pad_batch(self, sequences: Sequence[InputSequence]) -> tuple[Tensor, Tensor]:
        """Right-pad to a (ids, padding_mask) batch; mask True marks padding."""
        max_len = max((len(s) for s in sequences), default=0)
        ids = torch.full((len(sequences), max_len), self.vocab.pad_id, dtype=torch.long)
        mask = torch.ones((len(sequences), max_len), dtype=torch.bool)
        for row, seq in enumerate(sequences):
            ids[row, : len(seq)] = torch.tensor(seq.token_ids, dtype=torch.long)
            mask[row, : len(seq)] = False
        return ids, mask

    def encode(self, sequences: Sequence[InputSequence]) -> list[Tensor]:
        if not sequences:
            return []
        ids, mask = self.pad_batch(sequences)
        reps = self.forward(ids, mask, sequences)
        return [reps[row, : len(seq)] for row, seq in enumerate(sequences)]
