import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from claimlens.corpus import (
    Block,
    ClaimInstance,
    Corpus,
    Document,
    Label,
    ParseError,
    ValidationError,
    load_claims,
    load_corpus,
    load_fever_claims,
    save_claims,
    save_corpus,
    segment_sentences,
    split_into_blocks,
    tokenize,
    validate_claims,
)


def test_tokenize_roundtrips_modulo_whitespace():
    assert tokenize("a  b\tc") == ["a", "b", "c"]
    assert tokenize("") == []


class TestSegmentation:
    def test_plain_sentences(self):
        got = segment_sentences("First one. Second one!")
        assert got == [("First", "one."), ("Second", "one!")]

    def test_closing_quote_after_period(self):
        got = segment_sentences('He said "stop." Then left.')
        assert got == [("He", "said", '"stop."'), ("Then", "left.")]

    def test_trailing_fragment_kept(self):
        assert segment_sentences("No terminator here") == [("No", "terminator", "here")]

    def test_empty(self):
        assert segment_sentences("") == []


def test_label_class_indices():
    assert Label.SUPPORT.class_index == 0
    assert Label.REFUTE.class_index == 1
    assert Label.NEI.class_index == 2


def test_corpus_rejects_duplicate_ids():
    corpus = Corpus([Document("d1", ("T",), (("a",),))])
    with pytest.raises(ValidationError):
        corpus.add(Document("d1", ("T",), (("b",),)))


class TestFeverLoading:
    def test_grouping_and_null_pages(self, tmp_path):
        path = tmp_path / "claims.jsonl"
        rows = [
            {
                "id": 1,
                "claim": "x y",
                "label": "SUPPORTS",
                "evidence": [
                    [[101, 201, "Page_A", 0], [101, 202, "Page_B", 3]],
                    [[102, 203, "Page_A", 0]],
                ],
            },
            {
                "id": 2,
                "claim": "z",
                "label": "NOT ENOUGH INFO",
                "evidence": [[[103, 204, None, None]]],
            },
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        claims = load_fever_claims(path)
        assert claims[0].label == Label.SUPPORT
        assert claims[0].evidence_groups == (
            frozenset({("Page_A", 0), ("Page_B", 3)}),
            frozenset({("Page_A", 0)}),
        )
        assert claims[1].label == Label.NEI
        assert claims[1].evidence_groups == ()

    def test_duplicate_groups_collapse(self, tmp_path):
        path = tmp_path / "claims.jsonl"
        row = {
            "id": 1,
            "claim": "x",
            "label": "REFUTES",
            "evidence": [[[1, 1, "P", 0]], [[2, 2, "P", 0]]],
        }
        path.write_text(json.dumps(row), encoding="utf-8")
        (claim,) = load_fever_claims(path)
        assert claim.evidence_groups == (frozenset({("P", 0)}),)

    def test_unknown_label_names_line(self, tmp_path):
        path = tmp_path / "claims.jsonl"
        path.write_text(json.dumps({"id": 1, "claim": "x", "label": "MAYBE"}), encoding="utf-8")
        with pytest.raises(ValidationError, match=":1"):
            load_fever_claims(path)

    def test_malformed_json_names_line(self, tmp_path):
        path = tmp_path / "claims.jsonl"
        path.write_text(
            json.dumps({"id": 1, "claim": "x", "label": "SUPPORTS"}) + "\nnot json\n",
            encoding="utf-8",
        )
        with pytest.raises(ParseError, match=":2"):
            load_fever_claims(path)


class TestCorpusLoading:
    def test_sentences_lines_and_text_forms(self, tmp_path):
        path = tmp_path / "docs.jsonl"
        rows = [
            {"id": "a", "title": "A", "sentences": [["t1", "t2"]]},
            {"id": "b", "title": "B", "lines": ["one two", "three"]},
            {"id": "c", "title": "C", "text": "First. Second."},
        ]
        path.write_text("\n".join(json.dumps(r) for r in rows), encoding="utf-8")
        corpus = load_corpus(path)
        assert corpus["a"].sentences == (("t1", "t2"),)
        assert corpus["b"].sentences == (("one", "two"), ("three",))
        assert corpus["c"].sentences == (("First.",), ("Second.",))

    def test_directory_of_files(self, tmp_path):
        (tmp_path / "one.jsonl").write_text(
            json.dumps({"id": "a", "title": "A", "lines": ["x"]}), encoding="utf-8"
        )
        (tmp_path / "two.jsonl").write_text(
            json.dumps({"id": "b", "title": "B", "lines": ["y"]}), encoding="utf-8"
        )
        corpus = load_corpus(tmp_path)
        assert set(corpus.doc_ids) == {"a", "b"}

    def test_empty_directory_warns(self, tmp_path, caplog):
        with caplog.at_level("WARNING"):
            corpus = load_corpus(tmp_path)
        assert len(corpus) == 0
        assert any("no .jsonl" in r.message for r in caplog.records)

    def test_missing_body_field(self, tmp_path):
        path = tmp_path / "docs.jsonl"
        path.write_text(json.dumps({"id": "a", "title": "A"}), encoding="utf-8")
        with pytest.raises(ParseError):
            load_corpus(path)


class TestBlockPacking:
    def doc(self, lengths):
        sentences = tuple(tuple(f"s{i}t{j}" for j in range(n)) for i, n in enumerate(lengths))
        return Document("d", ("T",), sentences)

    def test_greedy_packing(self):
        blocks = split_into_blocks(self.doc([3, 3, 3]), budget=6, measure=len)
        assert [b.sentence_indices for b in blocks] == [(0, 1), (2,)]
        assert [b.token_count for b in blocks] == [6, 3]

    def test_exact_fit(self):
        blocks = split_into_blocks(self.doc([2, 4]), budget=6, measure=len)
        assert [b.sentence_indices for b in blocks] == [(0, 1)]

    def test_over_budget_sentence_becomes_truncated_block(self, caplog):
        with caplog.at_level("WARNING"):
            blocks = split_into_blocks(self.doc([2, 9, 2]), budget=5, measure=len)
        assert [b.sentence_indices for b in blocks] == [(0,), (1,), (2,)]
        assert blocks[1].truncated and blocks[1].token_count == 5
        assert not blocks[0].truncated and not blocks[2].truncated

    @given(
        lengths=st.lists(st.integers(min_value=1, max_value=12), min_size=0, max_size=30),
        budget=st.integers(min_value=1, max_value=20),
    )
    @settings(max_examples=200, deadline=None)
    def test_packing_invariants(self, lengths, budget):
        doc = self.doc(lengths)
        blocks = split_into_blocks(doc, budget, measure=len)
        # every sentence appears exactly once, in order
        flat = [i for b in blocks for i in b.sentence_indices]
        assert flat == list(range(len(lengths)))
        for block in blocks:
            if block.truncated:
                assert len(block.sentence_indices) == 1
                assert lengths[block.sentence_indices[0]] > budget
            else:
                assert sum(lengths[i] for i in block.sentence_indices) <= budget


class TestRoundTrip:
    def test_claims_roundtrip_bit_exact(self, tmp_path):
        claims = [
            ClaimInstance("c1", ("a", "b"), Label.SUPPORT, (frozenset({("d", 0), ("d", 2)}),)),
            ClaimInstance("c2", ("c",), Label.NEI),
        ]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        save_claims(claims, p1)
        again = load_claims(p1)
        assert again == claims
        save_claims(again, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corpus_roundtrip(self, tmp_path):
        corpus = Corpus(
            [
                Document("d1", ("Title", "Here"), (("a", "b"), ("c",)), (("d2", 14),)),
                Document("d2", ("Other",), (("x",),)),
            ]
        )
        path = tmp_path / "corpus.jsonl"
        save_corpus(corpus, path)
        again = load_corpus(path)
        assert list(again) == list(corpus)


def test_validate_claims_reports_missing_refs():
    corpus = Corpus([Document("d", ("T",), (("a",), ("b",)))])
    claims = [
        ClaimInstance("ok", ("x",), Label.SUPPORT, (frozenset({("d", 1)}),)),
        ClaimInstance("bad-doc", ("x",), Label.SUPPORT, (frozenset({("missing", 0)}),)),
        ClaimInstance("bad-idx", ("x",), Label.SUPPORT, (frozenset({("d", 9)}),)),
    ]
    problems = validate_claims(claims, corpus)
    assert len(problems) == 2
    assert any("bad-doc" in p for p in problems)
    assert any("bad-idx" in p for p in problems)
