"""Paragraph extraction, artifact stripping and rule-based sentence splitting."""

from __future__ import annotations

import re
import subprocess
from dataclasses import dataclass
from typing import Callable, Sequence

DEFAULT_TERMINALS = frozenset(".!?。！？…")
CJK_TERMINALS = frozenset("。！？")
CLOSERS = "\"'”’»)]}」』）"

ENGLISH_GUARDS = frozenset({
    "Mr.", "Mrs.", "Ms.", "Dr.", "St.", "Mme.", "Mlle.", "M.", "Messrs.",
    "Prof.", "Rev.", "Capt.", "Col.", "Gen.", "Lt.", "Sr.", "Jr.", "vs.",
    "etc.", "e.g.", "i.e.", "cf.", "No.", "Mt.",
})

# Aozora-style ruby (furigana) markup: 漢字《かんじ》, ｜ ruby-base marker,
# and ［＃...］ editorial notes.
FURIGANA_PATTERNS = (r"《[^》]*》", r"｜", r"［＃[^］]*］")
FOOTNOTE_PATTERNS = (r"\[\d+\]", r"\[Footnote[^\]]*\]")

_BLANK_LINES = re.compile(r"\n[ \t\r\f\v]*\n")


@dataclass(frozen=True)
class Sentence:
    text: str
    paragraph_index: int
    sentence_index: int


@dataclass(frozen=True)
class SegmenterConfig:
    language: str = "en"
    abbreviation_guards: frozenset[str] = ENGLISH_GUARDS
    terminal_marks: frozenset[str] = DEFAULT_TERMINALS
    strip_patterns: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.terminal_marks:
            raise ValueError("terminal_marks must be non-empty")


def config_for(language: str, **overrides) -> SegmenterConfig:
    """Default segmenter config for a language code."""
    patterns: tuple[str, ...] = FOOTNOTE_PATTERNS
    if language == "ja":
        patterns = FURIGANA_PATTERNS + patterns
    guards = ENGLISH_GUARDS if language == "en" else frozenset()
    fields = dict(language=language, abbreviation_guards=guards, strip_patterns=patterns)
    fields.update(overrides)
    return SegmenterConfig(**fields)


def extract_paragraphs(raw: str) -> list[str]:
    """Split on runs of blank lines, trim, and drop empty paragraphs."""
    raw = raw.replace("\r\n", "\n").replace("\r", "\n")
    return [p.strip() for p in _BLANK_LINES.split(raw) if p.strip()]


def strip_artifacts(paragraph: str, cfg: SegmenterConfig) -> str:
    # Applied to a fixpoint so removal that exposes a new match is still caught.
    compiled = [re.compile(p) for p in cfg.strip_patterns]
    if not compiled:
        return paragraph
    text = paragraph
    while True:
        new = text
        for pat in compiled:
            new = pat.sub("", new)
        if new == text:
            return text
        text = re.sub(r"[ \t]{2,}", " ", new).strip()


def _split_points(paragraph: str, cfg: SegmenterConfig) -> list[int]:
    points = []
    n = len(paragraph)
    i = 0
    while i < n:
        ch = paragraph[i]
        if ch not in cfg.terminal_marks:
            i += 1
            continue
        j = i
        while j < n and paragraph[j] in cfg.terminal_marks:
            j += 1
        while j < n and paragraph[j] in CLOSERS:
            j += 1
        run = paragraph[i:j]
        if j >= n:
            break
        if paragraph[j].isspace():
            if not _guarded(paragraph, i, cfg):
                points.append(j)
        elif any(c in CJK_TERMINALS for c in run):
            points.append(j)
        i = j
    return points


def _guarded(paragraph: str, mark_pos: int, cfg: SegmenterConfig) -> bool:
    if paragraph[mark_pos] != ".":
        return False
    start = mark_pos
    while start > 0 and not paragraph[start - 1].isspace():
        start -= 1
    token = paragraph[start:mark_pos + 1].lstrip(CLOSERS + "(\"'“‘«")
    return token in cfg.abbreviation_guards


def segment_sentences(paragraph: str, cfg: SegmenterConfig | None = None,
                      paragraph_index: int = 0) -> list[Sentence]:
    """Split a paragraph into sentences.

    A boundary falls after a run of terminal marks (plus any closing quotes or
    brackets) that is followed by whitespace, unless the token ending there is
    an abbreviation guard. Fullwidth CJK terminals split without whitespace.
    """
    cfg = cfg or SegmenterConfig()
    if not paragraph.strip():
        raise ValueError("paragraph must be non-empty")
    pieces = []
    prev = 0
    for cut in _split_points(paragraph, cfg) + [len(paragraph)]:
        piece = paragraph[prev:cut].strip()
        if piece:
            pieces.append(piece)
        prev = cut
    return [Sentence(t, paragraph_index, k) for k, t in enumerate(pieces)]


class SubprocessSegmenter:
    """Wrap an external sentencizer.

    The command receives one paragraph per line on stdin and must print one
    sentence per line. Each paragraph is sent in its own invocation.
    """

    def __init__(self, argv: Sequence[str], timeout: float = 60.0):
        self.argv = list(argv)
        self.timeout = timeout

    def __call__(self, paragraph: str, paragraph_index: int = 0) -> list[Sentence]:
        line = " ".join(paragraph.split())
        proc = subprocess.run(self.argv, input=line + "\n", capture_output=True,
                              text=True, encoding="utf-8", timeout=self.timeout, check=True)
        texts = [s.strip() for s in proc.stdout.splitlines() if s.strip()]
        if not texts:
            texts = [line]
        return [Sentence(t, paragraph_index, k) for k, t in enumerate(texts)]


Segmenter = Callable[[str, int], list[Sentence]]


def rule_segmenter(cfg: SegmenterConfig | None = None) -> Segmenter:
    cfg = cfg or SegmenterConfig()
    return lambda paragraph, index=0: segment_sentences(paragraph, cfg, index)


def segment_document(paragraphs: Sequence[str], segmenter: Segmenter | None = None) -> list[Sentence]:
    """Sentences of a whole document, each tagged with its paragraph index."""
    segmenter = segmenter or rule_segmenter()
    out: list[Sentence] = []
    for idx, para in enumerate(paragraphs):
        if para.strip():
            out.extend(segmenter(para, idx))
    return out
