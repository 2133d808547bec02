"""Evidence-grounded claim verification with per-provenance relevance."""

from .corpus import (
    Block,
    ClaimInstance,
    Corpus,
    Document,
    Label,
    load_claims,
    load_corpus,
    load_fever_claims,
    save_claims,
    save_corpus,
    segment_sentences,
    tokenize,
)
from .model import (
    BlockInput,
    Prediction,
    Verifier,
    build_masker,
    build_verifier,
    load_masker,
    load_verifier,
    save_masker,
    save_verifier,
)
from .relevance import (
    LossConfig,
    RelevanceHead,
    ScoreMatrix,
    detect_conflicting,
    ensemble_veracity,
    rank_provenances,
    relevance_scores,
    token_rationale_scores,
    total_loss,
)

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlockInput",
    "ClaimInstance",
    "Corpus",
    "Document",
    "Label",
    "LossConfig",
    "Prediction",
    "RelevanceHead",
    "ScoreMatrix",
    "Verifier",
    "build_masker",
    "build_verifier",
    "detect_conflicting",
    "ensemble_veracity",
    "load_claims",
    "load_corpus",
    "load_fever_claims",
    "load_masker",
    "load_verifier",
    "rank_provenances",
    "relevance_scores",
    "save_claims",
    "save_corpus",
    "save_masker",
    "save_verifier",
    "segment_sentences",
    "token_rationale_scores",
    "tokenize",
    "total_loss",
    "__version__",
]
