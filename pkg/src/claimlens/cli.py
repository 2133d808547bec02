"""Command-line pipeline: ingest -> retrieve -> train -> evaluate -> report."""
from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .corpus import (
    ClaimInstance,
    Corpus,
    Label,
    load_claims,
    load_corpus,
    load_fever_claims,
    save_claims,
    save_corpus,
    tokenize,
    validate_claims,
)
from .encoding import Vocabulary
from .harness.config import Config, load_config
from .harness.metrics import (
    ScoredTokens,
    load_rationale_references,
    mean_f1_at,
    save_rationale_references,
    tune_threshold,
)
from .harness.report import emit_report, training_curve_figure
from .harness.synthetic import SyntheticSpec, generate_synthetic_dataset
from .harness.training import (
    MaskerTrainConfig,
    TrainConfig,
    TrainingInstance,
    evaluate_model,
    prepare_instance,
    train as run_train,
    train_masker as run_train_masker,
)
from .masker import TemperatureSchedule, extract_masker_rationales
from .model import (
    Verifier,
    build_masker,
    build_verifier,
    load_masker,
    load_predictions,
    load_verifier,
    save_masker,
    save_predictions,
    save_verifier,
)
from .relevance import LossConfig
from .retrieval import (
    Bm25Index,
    RetrievalConfig,
    assemble_input_blocks,
    load_retrievals,
    recall_at_input,
    save_retrievals,
)
from .supervision import BlockLossConfig, SseSchedule

logger = logging.getLogger(__name__)


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="YAML configuration file; CD_* environment variables override fields.")
@click.option("-v", "--verbose", is_flag=True, default=False)
@click.pass_context
def main(ctx: click.Context, config_path: str | None, verbose: bool) -> None:
    """Evidence-grounded claim verification."""
    _setup_logging(verbose)
    ctx.obj = load_config(config_path)


def _retrieval_config(cfg: Config, k1: int | None = None, k2: int | None = None) -> RetrievalConfig:
    return RetrievalConfig(
        k1=k1 if k1 is not None else cfg.k1,
        k2=k2 if k2 is not None else cfg.k2,
        block_budget=cfg.block_budget,
        negative_lo=cfg.negative_lo,
        negative_hi=cfg.negative_hi,
        bm25_k1=cfg.bm25_k1,
        bm25_b=cfg.bm25_b,
    )


def _build_instances(
    claims: list[ClaimInstance],
    retrievals: dict,
    corpus: Corpus,
    verifier: Verifier,
    cfg: Config,
    n_negatives: int | None = None,
) -> list[TrainingInstance]:
    instances = []
    for claim in claims:
        retrieval = retrievals.get(claim.claim_id)
        if retrieval is None:
            logger.warning("no retrieved blocks for claim %s; it will predict NEI", claim.claim_id)
            continue
        instances.append(
            prepare_instance(
                claim,
                retrieval,
                corpus,
                verifier,
                n_negatives=cfg.n_negatives if n_negatives is None else n_negatives,
                negative_lo=cfg.negative_lo,
                negative_hi=cfg.negative_hi,
                seed=cfg.seed,
            )
        )
    return instances


def _vocab_for(corpus: Corpus, claim_sets: list[list[ClaimInstance]]) -> Vocabulary:
    extra = [token for claims in claim_sets for claim in claims for token in claim.claim]
    return Vocabulary.from_documents(corpus, extra=extra)


@main.command()
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--validate/--no-validate", default=True, help="Check gold evidence resolves in the corpus.")
@click.pass_obj
def ingest(cfg: Config, claims_path: str, corpus_path: str, out_dir: str, validate: bool) -> None:
    """Normalize raw claim and document files into versioned JSONL."""
    corpus = load_corpus(corpus_path)
    claims = load_fever_claims(claims_path)
    if validate:
        problems = validate_claims(claims, corpus)
        for problem in problems:
            logger.warning("%s", problem)
        if problems:
            raise click.ClickException(f"{len(problems)} claims reference missing evidence")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.jsonl")
    save_claims(claims, out / "claims.jsonl")
    click.echo(f"ingested {len(claims)} claims over {len(corpus)} documents into {out}")


@main.command()
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--k1", type=int, default=None, help="First-stage block count.")
@click.option("--k2", type=int, default=None, help="Hyperlink-expansion block count.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--inject-gold", is_flag=True, default=False,
              help="Insert blocks holding uncovered gold evidence (oracle inputs for training).")
@click.pass_obj
def retrieve(cfg: Config, claims_path: str, corpus_path: str, k1: int | None, k2: int | None,
             out_path: str, inject_gold: bool) -> None:
    """Assemble per-claim input blocks from the document ranking."""
    corpus = load_corpus(corpus_path)
    claims = load_claims(claims_path)
    rconfig = _retrieval_config(cfg, k1, k2)
    index = Bm25Index(corpus, k1=rconfig.bm25_k1, b=rconfig.bm25_b)
    rng = np.random.default_rng(cfg.seed)
    results = [
        assemble_input_blocks(claim, rconfig, corpus, index, measure=len,
                              inject_gold=inject_gold, rng=rng)
        for claim in claims
    ]
    save_retrievals(results, out_path)
    rai = recall_at_input(claims, {r.claim_id: r.blocks for r in results})
    click.echo(f"retrieved blocks for {len(results)} claims -> {out_path}")
    click.echo(f"recall-at-input: {rai:.4f}")


@main.command()
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--blocks", "blocks_path", required=True, type=click.Path(exists=True))
@click.option("--dev-claims", "dev_claims_path", type=click.Path(exists=True), default=None)
@click.option("--dev-blocks", "dev_blocks_path", type=click.Path(exists=True), default=None)
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--head", type=click.Choice(["dissector", "baseline", "b2", "b3", "b4"]), default="dissector")
@click.option("--supervision", type=click.Choice(["sentence", "block", "block+sse"]), default=None)
@click.option("--max-steps", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def train(cfg: Config, claims_path: str, blocks_path: str, dev_claims_path: str | None,
          dev_blocks_path: str | None, corpus_path: str, head: str, supervision: str | None,
          max_steps: int | None, out_dir: str) -> None:
    """Train a verifier head on retrieved blocks."""
    corpus = load_corpus(corpus_path)
    claims = load_claims(claims_path)
    retrievals = load_retrievals(blocks_path)
    dev_claims = load_claims(dev_claims_path) if dev_claims_path else []
    dev_retrievals = load_retrievals(dev_blocks_path) if dev_blocks_path else {}

    vocab = _vocab_for(corpus, [claims, dev_claims])
    verifier = build_verifier(
        vocab, dim=cfg.dim, layers=cfg.layers, heads=cfg.heads,
        budget=cfg.block_budget, max_len=cfg.max_len, dropout=cfg.dropout,
    )
    train_instances = _build_instances(claims, retrievals, corpus, verifier, cfg)
    dev_instances = _build_instances(dev_claims, dev_retrievals, corpus, verifier, cfg, n_negatives=0)

    mode = supervision or cfg.supervision
    tconfig = TrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        warmup_steps=cfg.warmup_steps,
        grad_clip_norm=cfg.grad_clip_norm,
        eval_every=cfg.eval_every,
        max_steps=max_steps if max_steps is not None else cfg.max_steps,
        seed=cfg.seed,
        head=head,
        supervision=mode if head == "dissector" else "sentence",
        loss=LossConfig(cfg.lambda_relevance, cfg.lambda_l2),
        block_loss=BlockLossConfig(cfg.lambda_relevance_block, cfg.lambda_l2),
        sse=SseSchedule(cfg.sse_warmup, cfg.sse_ramp_end, cfg.sse_p_max),
        out_dir=out_dir,
    )
    result = run_train(verifier, train_instances, dev_instances, tconfig)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_verifier(verifier, out / "final.pt")
    (out / "history.json").write_text(json.dumps(result.history, indent=2), encoding="utf-8")
    if result.history:
        training_curve_figure(result.history, out / "figures" / "training.png")
    click.echo(f"trained {result.steps_run} steps; final checkpoint {out / 'final.pt'}")
    if result.best_path:
        click.echo(f"best checkpoint (step {result.best_step}, score {result.best_score:.4f}): {result.best_path}")


@main.command("train-masker")
@click.option("--dissector", "dissector_path", required=True, type=click.Path(exists=True),
              help="Frozen verifier checkpoint the masker explains.")
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--blocks", "blocks_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--max-steps", type=int, default=800)
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def train_masker(cfg: Config, dissector_path: str, claims_path: str, blocks_path: str,
                 corpus_path: str, max_steps: int, out_dir: str) -> None:
    """Train the rationale masker against a frozen verifier."""
    corpus = load_corpus(corpus_path)
    claims = load_claims(claims_path)
    retrievals = load_retrievals(blocks_path)
    verifier = load_verifier(dissector_path)
    masker = build_masker(verifier, dropout=cfg.dropout, lambda_sparsity=cfg.lambda_sparsity)
    instances = _build_instances(claims, retrievals, corpus, verifier, cfg, n_negatives=0)
    mconfig = MaskerTrainConfig(
        batch_size=cfg.batch_size,
        lr=cfg.masker_lr if cfg.masker_lr is not None else cfg.lr,
        warmup_steps=cfg.warmup_steps,
        grad_clip_norm=cfg.grad_clip_norm,
        max_steps=max_steps,
        seed=cfg.seed,
        lambda_sparsity=cfg.lambda_sparsity,
        schedule=TemperatureSchedule(cfg.tau_start, cfg.tau_end, cfg.tau_warmup, cfg.tau_ramp_end),
        out_dir=out_dir,
    )
    history = run_train_masker(masker, verifier, instances, mconfig)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_masker(masker, out / "masker.pt")
    (out / "history.json").write_text(json.dumps(history, indent=2), encoding="utf-8")
    click.echo(f"trained masker for {len(history)} steps; checkpoint {out / 'masker.pt'}")


def _masker_samples(masker, instances: list[TrainingInstance],
                    references: dict[str, tuple]) -> list[ScoredTokens]:
    samples = []
    with torch.no_grad():
        masker.eval()
        for inst in instances:
            if not inst.sequences:
                continue
            logits = masker.mask_logits(inst.sequences)
            scores = extract_masker_rationales(logits)
            tokens = [t for seq in inst.sequences for t in
                      (seq.tokens[p] for p in seq.evidence_token_positions)]
            samples.append(ScoredTokens(
                tokens=tuple(tokens),
                scores=tuple(float(s) for s in scores),
                references=references.get(inst.claim.claim_id, ()),
            ))
    return samples


@main.command()
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--blocks", "blocks_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--metrics", "metric_names", default="accuracy,recall_at_5,fever_score,rai",
              help="Comma-separated metrics to print.")
@click.option("--tune-threshold", "tune", is_flag=True, default=False,
              help="Tune the token-rationale threshold against reference annotations.")
@click.option("--rationales", "rationales_path", type=click.Path(exists=True), default=None,
              help="Reference rationale JSONL (required with --tune-threshold).")
@click.option("--masker", "masker_path", type=click.Path(exists=True), default=None,
              help="Score token rationales with this masker instead of the verifier.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write per-claim predictions JSONL here.")
@click.pass_obj
def evaluate(cfg: Config, checkpoint_path: str, claims_path: str, blocks_path: str,
             corpus_path: str, metric_names: str, tune: bool, rationales_path: str | None,
             masker_path: str | None, out_path: str | None) -> None:
    """Evaluate a trained verifier on a claim set."""
    corpus = load_corpus(corpus_path)
    claims = load_claims(claims_path)
    retrievals = load_retrievals(blocks_path)
    verifier = load_verifier(checkpoint_path)
    instances = _build_instances(claims, retrievals, corpus, verifier, cfg, n_negatives=0)
    report, predictions = evaluate_model(verifier, instances, cfg.conflict_threshold)

    wanted = [name.strip() for name in metric_names.split(",") if name.strip()]
    values = report.as_dict()
    for name in wanted:
        if name not in values:
            raise click.ClickException(f"unknown metric {name!r}; have {sorted(values)}")
        click.echo(f"{name}: {values[name]:.4f}")

    head = "dissector"
    if tune:
        if rationales_path is None:
            raise click.ClickException("--tune-threshold needs --rationales")
        references = load_rationale_references(rationales_path)
        if masker_path is not None:
            masker = load_masker(masker_path)
            samples = _masker_samples(masker, instances, references)
            head = "masker"
        else:
            samples = [
                ScoredTokens(
                    tokens=tuple(t.token for t in pred.token_scores),
                    scores=tuple(t.score for t in pred.token_scores),
                    references=references.get(pred.claim_id, ()),
                )
                for pred in predictions
            ]
        tau, best = tune_threshold(samples)
        click.echo(f"threshold: {tau:.6f}")
        click.echo(f"token_f1: {best:.4f}")

    if out_path:
        save_predictions(predictions, out_path, head=head)
        click.echo(f"wrote predictions -> {out_path}")


@main.command()
@click.option("--claim", "claim_text", required=True, help="Claim text to verify.")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None,
              help="Write the prediction as JSON here (default: stdout).")
@click.option("--html", "html_path", type=click.Path(dir_okay=False), default=None,
              help="Also render a rationale page.")
@click.pass_obj
def verify(cfg: Config, claim_text: str, checkpoint_path: str, corpus_path: str,
           out_path: str | None, html_path: str | None) -> None:
    """Verify a single claim end to end (retrieve, score, explain)."""
    from .harness.report import render_claim_page
    from .model import BlockInput

    corpus = load_corpus(corpus_path)
    verifier = load_verifier(checkpoint_path)
    tokens = tuple(tokenize(claim_text))
    if not tokens:
        raise click.ClickException("empty claim")
    claim = ClaimInstance(claim_id="adhoc", claim=tokens, label=Label.NEI)
    rconfig = _retrieval_config(cfg)
    index = Bm25Index(corpus, k1=rconfig.bm25_k1, b=rconfig.bm25_b)
    retrieval = assemble_input_blocks(claim, rconfig, corpus, index, measure=len)
    inputs = [BlockInput(b, corpus[b.doc_id]) for b in retrieval.blocks]
    prediction = verifier.predict("adhoc", tokens, inputs, cfg.conflict_threshold)
    payload = json.dumps(prediction.as_dict(), indent=2, ensure_ascii=False)
    if out_path:
        Path(out_path).write_text(payload + "\n", encoding="utf-8")
        click.echo(f"wrote {out_path}")
    else:
        click.echo(payload)
    if html_path:
        Path(html_path).write_text(
            render_claim_page(prediction, corpus, claim_text), encoding="utf-8"
        )
        click.echo(f"wrote {html_path}")


@main.command()
@click.option("--predictions", "predictions_path", required=True, type=click.Path(exists=True))
@click.option("--claims", "claims_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--history", "history_path", type=click.Path(exists=True), default=None,
              help="Training history JSON for the metric-curve figure.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.pass_obj
def report(cfg: Config, predictions_path: str, claims_path: str, corpus_path: str,
           history_path: str | None, out_dir: str) -> None:
    """Render static HTML pages, figures and summary.csv from predictions."""
    corpus = load_corpus(corpus_path)
    claims = {c.claim_id: c for c in load_claims(claims_path)}
    predictions = load_predictions(predictions_path)
    history = json.loads(Path(history_path).read_text(encoding="utf-8")) if history_path else None
    index = emit_report(predictions, claims, corpus, out_dir, history=history)
    click.echo(f"report written to {index}")


@main.command()
@click.option("--n", "n_claims", type=int, default=500)
@click.option("--seed", type=int, default=0)
@click.option("--conflicting-fraction", type=float, default=0.0)
@click.option("--prefix", default="syn")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def synth(n_claims: int, seed: int, conflicting_fraction: float, prefix: str, out_dir: str) -> None:
    """Generate the synthetic separable dataset (corpus, claims, rationales)."""
    spec = SyntheticSpec(n_claims=n_claims, conflicting_fraction=conflicting_fraction, id_prefix=prefix)
    corpus, claims, info = generate_synthetic_dataset(spec, seed=seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, out / "corpus.jsonl")
    save_claims(claims, out / "claims.jsonl")
    save_rationale_references(info.rationales, out / "rationales.jsonl")
    (out / "conflicting.json").write_text(
        json.dumps(sorted(info.conflicting)), encoding="utf-8"
    )
    click.echo(f"generated {len(claims)} claims, {len(corpus)} documents -> {out}")


if __name__ == "__main__":
    main()
