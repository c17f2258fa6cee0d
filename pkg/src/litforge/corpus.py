"""Data model for books, translations, aligned records and splits.

Everything here is an immutable value object. ``parse_corpus`` and
``serialize_corpus`` are inverse pure functions over the on-disk JSON layout::

    {"books": [{"doc_id", "language", "title", "author", "pub_year",
                "source_paras": [...], "gt_paras": [...],
                "translators": {"<id>": [...]}, "records": [...]}],
     "splits": {"train": [doc_id, ...], "valid": [...], "test": [...]},
     "manifest": {...}}

Unknown keys at the corpus, book, record and reference level are kept in an
``extras`` mapping and written back unchanged.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping

# Source languages of the reference corpus (19 codes).
DEFAULT_LANGUAGES = frozenset(
    "fr ru de no es cs sv pt it ja bn ta da zh nl hu pl st fa".split()
)
SPLITS = ("train", "valid", "test")
HUMAN, MACHINE = "human", "machine"


class CorpusError(Exception):
    """Base class for corpus input errors."""


class ParseError(CorpusError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ValidationError(CorpusError):
    def __init__(self, message: str, doc_id: str | None = None, field: str | None = None):
        where = ", ".join(p for p in (f"doc_id={doc_id}" if doc_id else "",
                                      f"field={field}" if field else "") if p)
        super().__init__(f"{message} [{where}]" if where else message)
        self.doc_id = doc_id
        self.field = field


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    language: str
    title: str
    author: str
    pub_year: int
    paragraphs: tuple[str, ...]


@dataclass(frozen=True)
class TranslationDocument:
    doc_id: str
    translator_id: str
    kind: str
    paragraphs: tuple[str, ...]


@dataclass(frozen=True)
class Reference:
    translator_id: str
    text: str
    extras: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class AlignmentRecord:
    doc_id: str
    source_index: int
    src: str
    gtr: str
    hums: tuple[Reference, ...]
    # Sentence counts keyed by "gtr" and by translator id.
    sentence_counts: Mapping[str, int] = field(default_factory=dict)
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.hums)

    def without(self, translator_id: str) -> AlignmentRecord:
        counts = {k: v for k, v in self.sentence_counts.items() if k != translator_id}
        hums = tuple(h for h in self.hums if h.translator_id != translator_id)
        return replace(self, hums=hums, sentence_counts=counts)


@dataclass(frozen=True)
class Book:
    source: SourceDocument
    machine: TranslationDocument | None = None
    humans: tuple[TranslationDocument, ...] = ()
    records: tuple[AlignmentRecord, ...] = ()
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def doc_id(self) -> str:
        return self.source.doc_id


@dataclass(frozen=True)
class Corpus:
    books: tuple[Book, ...]
    split_assignment: Mapping[str, str] = field(default_factory=dict)
    manifest: Mapping[str, Any] = field(default_factory=dict)
    extras: Mapping[str, Any] = field(default_factory=dict)

    @property
    def records(self) -> tuple[AlignmentRecord, ...]:
        return tuple(r for b in self.books for r in b.records)

    def book(self, doc_id: str) -> Book:
        for b in self.books:
            if b.doc_id == doc_id:
                return b
        raise KeyError(doc_id)

    def language_of(self, doc_id: str) -> str:
        return self.book(doc_id).source.language

    def records_in(self, split: str) -> tuple[AlignmentRecord, ...]:
        return tuple(r for r in self.records if self.split_assignment.get(r.doc_id) == split)


def validate_record(record: AlignmentRecord, stage: str = "merged",
                    n_paragraphs: int | None = None) -> list[str]:
    """Return diagnostics for ``record``; empty when every invariant holds.

    ``stage`` is ``"pair"`` (one reference is enough) or ``"merged"`` (at
    least two references required).
    """
    out = []
    if not record.src.strip():
        out.append("empty source paragraph")
    if not record.gtr.strip():
        out.append("empty machine paragraph")
    if any(not h.text.strip() for h in record.hums):
        out.append("empty human paragraph")
    ids = [h.translator_id for h in record.hums]
    if len(set(ids)) != len(ids):
        out.append("duplicate reference provenance")
    if not record.hums:
        out.append("no human references")
    elif stage == "merged" and len(record.hums) < 2:
        out.append("fewer than two human references")
    if record.source_index < 0 or (n_paragraphs is not None and record.source_index >= n_paragraphs):
        out.append("source_index out of bounds")
    return out


def validate_corpus(corpus: Corpus, languages: Iterable[str] = DEFAULT_LANGUAGES) -> None:
    languages = frozenset(languages)
    seen: set[str] = set()
    for book in corpus.books:
        src = book.source
        if src.doc_id in seen:
            raise ValidationError("duplicate doc_id", src.doc_id, "doc_id")
        seen.add(src.doc_id)
        if src.language not in languages:
            raise ValidationError(f"unknown language {src.language!r}", src.doc_id, "language")
        if not src.paragraphs:
            raise ValidationError("no source paragraphs", src.doc_id, "source_paras")
        if book.machine is not None and book.machine.paragraphs \
                and len(book.machine.paragraphs) != len(src.paragraphs):
            raise ValidationError(
                f"machine paragraph count {len(book.machine.paragraphs)} != "
                f"source paragraph count {len(src.paragraphs)}", src.doc_id, "gt_paras")
        for rec in book.records:
            if rec.doc_id != src.doc_id:
                raise ValidationError("record filed under wrong book", src.doc_id, "records.doc_id")
            problems = validate_record(rec, stage="pair", n_paragraphs=len(src.paragraphs))
            if problems:
                raise ValidationError(
                    f"record {rec.source_index}: {problems[0]}", src.doc_id, _field_for(problems[0]))
    for doc_id, split in corpus.split_assignment.items():
        if doc_id not in seen:
            raise ValidationError("split names unknown document", doc_id, "splits")
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}", doc_id, "splits")
    if corpus.split_assignment:
        missing = sorted(seen - set(corpus.split_assignment))
        if missing:
            raise ValidationError("document has no split", missing[0], "splits")


def _field_for(problem: str) -> str:
    return {
        "empty source paragraph": "src",
        "empty machine paragraph": "gtr",
        "empty human paragraph": "hums.text",
        "duplicate reference provenance": "hums.translator_id",
        "no human references": "hums",
        "source_index out of bounds": "source_index",
    }.get(problem, "records")


# -- serialization ------------------------------------------------------------

_BOOK_KEYS = {"doc_id", "language", "title", "author", "pub_year",
              "source_paras", "gt_paras", "translators", "records"}
_RECORD_KEYS = {"source_index", "src", "gtr", "hums", "sentence_counts"}
_REF_KEYS = {"translator_id", "text"}
_TOP_KEYS = {"books", "splits", "manifest"}


def parse_corpus(data: bytes, languages: Iterable[str] = DEFAULT_LANGUAGES) -> Corpus:
    """Parse and validate the JSON corpus layout."""
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(f"invalid UTF-8: {exc.reason}", exc.start) from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, len(text[:exc.pos].encode("utf-8"))) from None
    if not isinstance(obj, dict):
        raise ValidationError("top level must be an object", field="books")
    if "manifest" not in obj:
        raise ValidationError("missing manifest block", field="manifest")
    books = tuple(_book_from_json(b) for b in _expect(obj.get("books"), list, None, "books"))
    splits = _splits_from_json(_expect(obj.get("splits", {}), dict, None, "splits"))
    corpus = Corpus(
        books=books,
        split_assignment=splits,
        manifest=_expect(obj["manifest"], dict, None, "manifest"),
        extras={k: v for k, v in obj.items() if k not in _TOP_KEYS},
    )
    validate_corpus(corpus, languages)
    return corpus


def _expect(value: Any, kind: type, doc_id: str | None, name: str) -> Any:
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ValidationError(f"expected {kind.__name__}", doc_id, name)
    return value


def _texts(value: Any, doc_id: str, name: str) -> tuple[str, ...]:
    items = _expect(value, list, doc_id, name)
    for item in items:
        _expect(item, str, doc_id, name)
    return tuple(items)


def _splits_from_json(obj: dict) -> dict[str, str]:
    out: dict[str, str] = {}
    for split, doc_ids in obj.items():
        for doc_id in _expect(doc_ids, list, None, f"splits.{split}"):
            if doc_id in out:
                raise ValidationError(
                    f"document assigned to both {out[doc_id]!r} and {split!r}; "
                    "each literary text belongs to exactly one split", doc_id, "splits")
            out[doc_id] = split
    return out


def _book_from_json(obj: Any) -> Book:
    _expect(obj, dict, None, "books[]")
    doc_id = _expect(obj.get("doc_id"), str, None, "doc_id")
    source = SourceDocument(
        doc_id=doc_id,
        language=_expect(obj.get("language"), str, doc_id, "language"),
        title=_expect(obj.get("title", ""), str, doc_id, "title"),
        author=_expect(obj.get("author", ""), str, doc_id, "author"),
        pub_year=_expect(obj.get("pub_year"), int, doc_id, "pub_year"),
        paragraphs=_texts(obj.get("source_paras"), doc_id, "source_paras"),
    )
    gt = _texts(obj.get("gt_paras", []), doc_id, "gt_paras")
    machine = TranslationDocument(doc_id, "gtr", MACHINE, gt) if gt else None
    translators = _expect(obj.get("translators", {}), dict, doc_id, "translators")
    humans = tuple(
        TranslationDocument(doc_id, tid, HUMAN, _texts(paras, doc_id, f"translators.{tid}"))
        for tid, paras in sorted(translators.items())
    )
    records = tuple(_record_from_json(r, doc_id) for r in _expect(obj.get("records", []), list, doc_id, "records"))
    return Book(source, machine, humans, records, {k: v for k, v in obj.items() if k not in _BOOK_KEYS})


def _record_from_json(obj: Any, doc_id: str) -> AlignmentRecord:
    _expect(obj, dict, doc_id, "records[]")
    hums = []
    for h in _expect(obj.get("hums"), list, doc_id, "hums"):
        _expect(h, dict, doc_id, "hums[]")
        hums.append(Reference(
            _expect(h.get("translator_id"), str, doc_id, "hums.translator_id"),
            _expect(h.get("text"), str, doc_id, "hums.text"),
            {k: v for k, v in h.items() if k not in _REF_KEYS},
        ))
    counts = _expect(obj.get("sentence_counts", {}), dict, doc_id, "sentence_counts")
    return AlignmentRecord(
        doc_id=doc_id,
        source_index=_expect(obj.get("source_index"), int, doc_id, "source_index"),
        src=_expect(obj.get("src"), str, doc_id, "src"),
        gtr=_expect(obj.get("gtr"), str, doc_id, "gtr"),
        hums=tuple(hums),
        sentence_counts={k: _expect(v, int, doc_id, "sentence_counts") for k, v in counts.items()},
        extras={k: v for k, v in obj.items() if k not in _RECORD_KEYS},
    )


def record_to_json(rec: AlignmentRecord) -> dict:
    out = dict(rec.extras)
    out.update(
        source_index=rec.source_index,
        src=rec.src,
        gtr=rec.gtr,
        hums=[{**h.extras, "translator_id": h.translator_id, "text": h.text} for h in rec.hums],
    )
    if rec.sentence_counts:
        out["sentence_counts"] = dict(rec.sentence_counts)
    return out


def corpus_to_json(corpus: Corpus) -> dict:
    books = []
    for b in corpus.books:
        s = b.source
        obj = dict(b.extras)
        obj.update(
            doc_id=s.doc_id, language=s.language, title=s.title, author=s.author,
            pub_year=s.pub_year, source_paras=list(s.paragraphs),
            gt_paras=list(b.machine.paragraphs) if b.machine else [],
            translators={h.translator_id: list(h.paragraphs) for h in b.humans},
            records=[record_to_json(r) for r in b.records],
        )
        books.append(obj)
    splits: dict[str, list[str]] = {}
    for doc_id, split in sorted(corpus.split_assignment.items()):
        splits.setdefault(split, []).append(doc_id)
    out = dict(corpus.extras)
    out.update(books=books, splits=splits, manifest=dict(corpus.manifest))
    return out


def serialize_corpus(corpus: Corpus) -> bytes:
    """Byte-stable UTF-8 JSON: sorted keys, fixed separators, raw non-ASCII."""
    return dumps(corpus_to_json(corpus))


def dumps(obj: Any) -> bytes:
    return (json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=1,
                       allow_nan=False) + "\n").encode("utf-8")
