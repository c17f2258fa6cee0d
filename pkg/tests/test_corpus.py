from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from litforge.corpus import (AlignmentRecord, Book, Corpus, ParseError, Reference, SourceDocument,
                             TranslationDocument, ValidationError, corpus_to_json, parse_corpus,
                             serialize_corpus, validate_corpus, validate_record)


def make_record(doc_id="d1", idx=0, hums=(("a", "Hello there."), ("b", "Hi there.")), gtr="Hello."):
    return AlignmentRecord(doc_id, idx, "Bonjour.", gtr, tuple(Reference(t, x) for t, x in hums))


def make_corpus(records=None, language="fr", doc_id="d1", splits=None, paras=("Bonjour.",)):
    records = (make_record(doc_id),) if records is None else records
    book = Book(SourceDocument(doc_id, language, "T", "A", 1900, paras),
                TranslationDocument(doc_id, "gtr", "machine", ("Hello.",) * len(paras)),
                records=tuple(records))
    return Corpus((book,), split_assignment=splits or {}, manifest={"seed": 0})


def test_one_record_round_trip():
    corpus = make_corpus()
    back = parse_corpus(serialize_corpus(corpus))
    assert len(back.records) == 1
    assert back.records[0].n == 2
    assert back == corpus


def test_serialization_is_byte_stable():
    corpus = make_corpus()
    assert serialize_corpus(corpus) == serialize_corpus(parse_corpus(serialize_corpus(corpus)))


def test_non_latin_scripts_round_trip():
    rec = AlignmentRecord("d1", 0, "Зимняя дорога. 冬の道。", "Winter road.",
                          (Reference("a", "Зима"), Reference("b", "冬")))
    corpus = make_corpus([rec], language="ru")
    data = serialize_corpus(corpus)
    assert "Зимняя".encode() in data and "冬".encode() in data
    assert parse_corpus(data) == corpus


def test_empty_gtr_rejected():
    corpus = make_corpus([make_record(gtr="  ")])
    with pytest.raises(ValidationError, match="empty machine paragraph") as exc:
        parse_corpus(serialize_corpus(corpus))
    assert exc.value.field == "gtr"


def test_doc_in_two_splits_rejected():
    obj = corpus_to_json(make_corpus())
    obj["splits"] = {"train": ["d1"], "test": ["d1"]}
    with pytest.raises(ValidationError, match="exactly one split"):
        parse_corpus(json.dumps(obj).encode())


def test_validate_record_diagnostics():
    assert validate_record(make_record()) == []
    dup = make_record(hums=(("a", "x y"), ("a", "z w")))
    assert "duplicate reference provenance" in validate_record(dup)
    single = make_record(hums=(("a", "x y"),))
    assert "fewer than two human references" in validate_record(single)
    assert validate_record(single, stage="pair") == []
    assert "source_index out of bounds" in validate_record(make_record(idx=5), n_paragraphs=3)


def test_parse_error_carries_byte_offset():
    data = '{"manifest": {}, "books": [ "é" ,]}'.encode()
    with pytest.raises(ParseError) as exc:
        parse_corpus(data)
    assert exc.value.offset == data.index(b"]")
    with pytest.raises(ParseError) as exc:
        parse_corpus(b'{"a": "\xff"}')
    assert exc.value.offset == 7


def test_missing_manifest_and_unknown_language():
    obj = corpus_to_json(make_corpus())
    del obj["manifest"]
    with pytest.raises(ValidationError, match="manifest"):
        parse_corpus(json.dumps(obj).encode())
    with pytest.raises(ValidationError, match="unknown language"):
        validate_corpus(make_corpus(language="xx"))


def test_split_assignment_checks():
    with pytest.raises(ValidationError, match="unknown split"):
        validate_corpus(make_corpus(splits={"d1": "dev"}))
    with pytest.raises(ValidationError, match="unknown document"):
        validate_corpus(make_corpus(splits={"d1": "train", "zz": "test"}))
    validate_corpus(make_corpus(splits={"d1": "train"}))


def test_unknown_fields_preserved():
    obj = corpus_to_json(make_corpus())
    obj["note"] = "top"
    obj["books"][0]["isbn"] = "123"
    obj["books"][0]["records"][0]["quality"] = 3
    obj["books"][0]["records"][0]["hums"][0]["edition"] = "1923"
    back = json.loads(serialize_corpus(parse_corpus(json.dumps(obj).encode())))
    assert back["note"] == "top"
    assert back["books"][0]["isbn"] == "123"
    assert back["books"][0]["records"][0]["quality"] == 3
    assert back["books"][0]["records"][0]["hums"][0]["edition"] == "1923"


def test_without_drops_reference_and_count():
    rec = AlignmentRecord("d", 0, "s", "g", (Reference("a", "x"), Reference("b", "y")), {"gtr": 1, "a": 1, "b": 2})
    out = rec.without("a")
    assert [h.translator_id for h in out.hums] == ["b"]
    assert dict(out.sentence_counts) == {"gtr": 1, "b": 2}


text = st.text(min_size=1, max_size=30).filter(lambda s: s.strip())


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(text, text, st.lists(text, min_size=2, max_size=4)), min_size=1, max_size=5))
def test_round_trip_property(rows):
    paras = tuple(src for src, _, _ in rows)
    records = [
        AlignmentRecord("d1", i, src, gtr, tuple(Reference(f"t{k}", h) for k, h in enumerate(hums)))
        for i, (src, gtr, hums) in enumerate(rows)
    ]
    corpus = make_corpus(records, paras=paras)
    data = serialize_corpus(corpus)
    assert parse_corpus(data) == corpus
    assert serialize_corpus(parse_corpus(data)) == data
