"""Static result rendering: per-claim HTML rationale pages, aggregate
matplotlib figures, and a flat ``summary.csv`` next to them."""
from __future__ import annotations

import csv
import html
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from ..corpus import ClaimInstance, Corpus, Label
from ..model import Prediction

_PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
<meta charset="utf-8">
<title>{title}</title>
<style>
body {{ font-family: sans-serif; margin: 2em auto; max-width: 60em; color: #222; }}
.claim {{ font-size: 1.2em; margin-bottom: 0.5em; }}
.banner {{ background: #fff3cd; border: 1px solid #ffe69c; padding: 0.6em 1em; margin: 1em 0; }}
.bars div {{ margin: 2px 0; }}
.bar {{ display: inline-block; height: 0.9em; vertical-align: middle; }}
.support {{ background: #2e8b57; }}
.refute {{ background: #c0392b; }}
.nei {{ background: #7f8c8d; }}
.sentence {{ padding: 0.25em 0.5em; margin: 0.2em 0; border-radius: 4px; }}
.meta {{ color: #666; font-size: 0.85em; }}
table {{ border-collapse: collapse; }}
td, th {{ padding: 0.3em 0.8em; border-bottom: 1px solid #ddd; text-align: left; }}
</style>
</head>
<body>
{body}
</body>
</html>
"""


def _clip(value: float) -> float:
    return max(0.0, min(1.0, value))


def _veracity_bars(prediction: Prediction) -> str:
    rows = []
    for name, css, value in (
        ("SUPPORT", "support", prediction.veracity[0]),
        ("REFUTE", "refute", prediction.veracity[1]),
        ("NEI", "nei", prediction.veracity[2]),
    ):
        width = int(round(_clip(value) * 300))
        rows.append(
            f'<div><span class="bar {css}" style="width:{width}px"></span> '
            f"{name} {value:.3f}</div>"
        )
    return '<div class="bars">' + "".join(rows) + "</div>"


def _sentence_html(prediction: Prediction, corpus: Corpus) -> str:
    token_score: dict[tuple[str, int, int], float] = {
        (t.doc_id, t.sentence_index, t.token_offset): t.score for t in prediction.token_scores
    }
    parts = []
    ranked = {ref: pos for pos, ref in enumerate(prediction.ranking)}
    for score in sorted(
        prediction.sentence_scores,
        key=lambda s: ranked.get((s.doc_id, s.sentence_index), len(ranked)),
    ):
        if score.doc_id not in corpus:
            continue
        doc = corpus[score.doc_id]
        tokens = doc.sentences[score.sentence_index]
        spans = []
        for offset, token in enumerate(tokens):
            opacity = _clip(token_score.get((score.doc_id, score.sentence_index, offset), 0.0))
            spans.append(
                f'<span style="background: rgba(255,200,0,{opacity:.3f})">{html.escape(token)}</span>'
            )
        if score.support >= score.refute:
            tint = f"rgba(46,139,87,{_clip(score.support) * 0.35:.3f})"
        else:
            tint = f"rgba(192,57,43,{_clip(score.refute) * 0.35:.3f})"
        parts.append(
            f'<div class="sentence" style="background:{tint}">'
            f'<span class="meta">{html.escape(score.doc_id)}[{score.sentence_index}] '
            f"S={score.support:.2f} R={score.refute:.2f}</span><br>" + " ".join(spans) + "</div>"
        )
    return "".join(parts)


def render_claim_page(
    prediction: Prediction,
    corpus: Corpus,
    claim_text: str,
    gold: Label | None = None,
) -> str:
    body = [f'<h1>Claim {html.escape(prediction.claim_id)}</h1>']
    body.append(f'<p class="claim">{html.escape(claim_text)}</p>')
    if gold is not None:
        body.append(f'<p class="meta">gold label: {gold.value}</p>')
    body.append(f"<p>predicted: <strong>{prediction.predicted.value}</strong></p>")
    if prediction.conflicting:
        body.append('<div class="banner">Conflicting evidence: confident support and refutation found in different sentences.</div>')
    body.append(_veracity_bars(prediction))
    body.append("<h2>Evidence sentences</h2>")
    body.append(_sentence_html(prediction, corpus))
    return _PAGE.format(title=f"claim {prediction.claim_id}", body="\n".join(body))


def _index_page(rows: list[dict]) -> str:
    cells = "".join(
        "<tr>"
        f'<td><a href="{r["page"]}">{html.escape(r["claim_id"])}</a></td>'
        f'<td>{html.escape(r["claim"])}</td><td>{r["gold"]}</td><td>{r["predicted"]}</td>'
        f'<td>{"yes" if r["conflicting"] else ""}</td>'
        "</tr>"
        for r in rows
    )
    table = (
        "<table><tr><th>claim</th><th>text</th><th>gold</th><th>predicted</th>"
        "<th>conflicting</th></tr>" + cells + "</table>"
        if rows
        else "<p>No predictions.</p>"
    )
    body = "<h1>Verification report</h1>\n" + (
        '<p><img src="figures/verdicts.png" alt="verdict distribution"> '
        '<img src="figures/rationale_scores.png" alt="rationale score histogram"></p>\n'
        if rows
        else ""
    ) + table
    return _PAGE.format(title="verification report", body=body)


def _figures(predictions: Sequence[Prediction], out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    counts = {label: 0 for label in ("SUPPORT", "REFUTE", "NEI")}
    for pred in predictions:
        counts[pred.predicted.value] += 1
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.bar(list(counts), list(counts.values()), color=["#2e8b57", "#c0392b", "#7f8c8d"])
    ax.set_ylabel("claims")
    ax.set_title("Predicted verdicts")
    fig.tight_layout()
    fig.savefig(out / "verdicts.png", dpi=120)
    plt.close(fig)

    scores = [t.score for pred in predictions for t in pred.token_scores]
    fig, ax = plt.subplots(figsize=(4, 3))
    if scores:
        ax.hist(scores, bins=30, color="#e6a817")
    ax.set_xlabel("token rationale score")
    ax.set_ylabel("tokens")
    ax.set_title("Rationale scores")
    fig.tight_layout()
    fig.savefig(out / "rationale_scores.png", dpi=120)
    plt.close(fig)


def training_curve_figure(history: Sequence[Mapping], out_path: Path) -> None:
    """Metric-vs-step curves from a training history."""
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    steps = [h["step"] for h in history]
    for key, style in (("accuracy", "-o"), ("recall_at_5", "-s"), ("fever_score", "-^")):
        ax.plot(steps, [h[key] for h in history], style, label=key, markersize=3)
    ax.set_xlabel("step")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def emit_report(
    predictions: Sequence[Prediction],
    claims: Mapping[str, ClaimInstance],
    corpus: Corpus,
    out_dir: str | Path,
    history: Sequence[Mapping] | None = None,
) -> Path:
    """Write the full static report; returns the index page path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for pred in predictions:
        claim = claims.get(pred.claim_id)
        text = " ".join(claim.claim) if claim else ""
        gold = claim.label if claim else None
        page = f"claim-{pred.claim_id}.html"
        (out / page).write_text(
            render_claim_page(pred, corpus, text, gold), encoding="utf-8"
        )
        rows.append(
            {
                "claim_id": pred.claim_id,
                "claim": text,
                "gold": gold.value if gold else "",
                "predicted": pred.predicted.value,
                "conflicting": pred.conflicting,
                "page": page,
            }
        )
    if predictions:
        _figures(predictions, out / "figures")
        if history:
            training_curve_figure(history, out / "figures" / "training.png")
    with open(out / "summary.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["claim_id", "gold", "predicted", "p_support", "p_refute", "p_nei", "conflicting"]
        )
        for pred in predictions:
            claim = claims.get(pred.claim_id)
            writer.writerow(
                [
                    pred.claim_id,
                    claim.label.value if claim else "",
                    pred.predicted.value,
                    f"{pred.veracity[0]:.6f}",
                    f"{pred.veracity[1]:.6f}",
                    f"{pred.veracity[2]:.6f}",
                    int(pred.conflicting),
                ]
            )
    index = out / "index.html"
    index.write_text(_index_page(rows), encoding="utf-8")
    return index
