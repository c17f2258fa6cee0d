"""Global sentence alignment (Needleman-Wunsch) and projection to paragraphs.

Sequence A is the human translation's sentences (matrix rows), sequence B the
machine translation's sentences (matrix columns). The machine translation is
produced paragraph by paragraph, so every B sentence knows its source
paragraph; projecting the alignment path through those indices yields the
paragraph-level human/machine pairs.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .segmentation import Sentence

MATCH, GAP_A, GAP_B = "match", "gap_a", "gap_b"
DEFAULT_GAP_PENALTY = -0.25

_DIAG, _UP, _LEFT = 0, 1, 2


@dataclass(frozen=True)
class AlignStep:
    """One path step. ``gap_a`` consumes A[i] only, ``gap_b`` consumes B[j] only."""

    kind: str
    i: int | None
    j: int | None
    score: float


@dataclass(frozen=True)
class SentenceAlignmentPath:
    steps: tuple[AlignStep, ...]
    total_score: float

    def matches(self) -> list[tuple[int, int]]:
        return [(s.i, s.j) for s in self.steps if s.kind == MATCH]


def needleman_wunsch(matrix: np.ndarray, gap_penalty: float = DEFAULT_GAP_PENALTY) -> SentenceAlignmentPath:
    """Maximum-score global alignment under a linear gap penalty.

    F(i, j) = max(F(i-1, j-1) + s(i, j), F(i-1, j) + g, F(i, j-1) + g) with
    F(i, 0) = i*g and F(0, j) = j*g. Ties prefer the diagonal, then a gap in
    B (consume A only), then a gap in A.
    """
    s = np.asarray(matrix, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
        raise ValueError(f"score matrix must be 2-D with at least one row and column, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("score matrix contains non-finite values")
    g = float(gap_penalty)
    if not np.isfinite(g) or g > 0:
        raise ValueError("gap_penalty must be finite and <= 0")
    n, m = s.shape
    F = np.empty((n + 1, m + 1), dtype=np.float64)
    ptr = np.empty((n + 1, m + 1), dtype=np.uint8)
    # Boundaries accumulate by repeated addition, the same order a path sums in.
    F[0, 0] = 0.0
    for i in range(1, n + 1):
        F[i, 0] = F[i - 1, 0] + g
        ptr[i, 0] = _UP
    for j in range(1, m + 1):
        F[0, j] = F[0, j - 1] + g
        ptr[0, j] = _LEFT
    for d in range(2, n + m + 1):
        i = np.arange(max(1, d - m), min(n, d - 1) + 1)
        j = d - i
        diag = F[i - 1, j - 1] + s[i - 1, j - 1]
        up = F[i - 1, j] + g
        left = F[i, j - 1] + g
        best = np.maximum(np.maximum(diag, up), left)
        F[i, j] = best
        ptr[i, j] = np.where(diag >= np.maximum(up, left), _DIAG, np.where(up >= left, _UP, _LEFT))

    steps: list[AlignStep] = []
    i, j = n, m
    while i > 0 or j > 0:
        p = ptr[i, j]
        if p == _DIAG:
            steps.append(AlignStep(MATCH, i - 1, j - 1, float(s[i - 1, j - 1])))
            i, j = i - 1, j - 1
        elif p == _UP:
            steps.append(AlignStep(GAP_A, i - 1, None, g))
            i -= 1
        else:
            steps.append(AlignStep(GAP_B, None, j - 1, g))
            j -= 1
    steps.reverse()
    return SentenceAlignmentPath(tuple(steps), float(F[n, m]))


def path_score(steps: Iterable[AlignStep]) -> float:
    total = 0.0
    for st in steps:
        total += st.score
    return total


def write_trace(path: SentenceAlignmentPath, out: IO[str]) -> None:
    """Debug dump: one tab-separated line per step (kind, i, j, score)."""
    for st in path.steps:
        i = "" if st.i is None else st.i
        j = "" if st.j is None else st.j
        out.write(f"{st.kind}\t{i}\t{j}\t{st.score!r}\n")


@dataclass(frozen=True)
class PairAlignment:
    doc_id: str
    translator_id: str
    source_index: int
    gtr_text: str
    hum_text: str
    hum_sentences: tuple[int, ...] = ()
    gtr_sentence_count: int = 0
    # "empty": no human sentence landed here; "gap_attached": some sentence
    # was placed by the predecessor/successor heuristic rather than a match.
    flags: tuple[str, ...] = ()
    extras: Mapping[str, object] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "doc_id": self.doc_id, "translator_id": self.translator_id,
            "source_index": self.source_index, "gtr_text": self.gtr_text,
            "hum_text": self.hum_text, "hum_sentences": list(self.hum_sentences),
            "gtr_sentence_count": self.gtr_sentence_count, "flags": list(self.flags),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> PairAlignment:
        return cls(obj["doc_id"], obj["translator_id"], obj["source_index"], obj["gtr_text"],
                   obj["hum_text"], tuple(obj.get("hum_sentences", ())),
                   obj.get("gtr_sentence_count", 0), tuple(obj.get("flags", ())))


def assign_paragraphs(path: SentenceAlignmentPath, gtr_sentences: Sequence[Sentence],
                      n_hum: int) -> tuple[list[int], set[int]]:
    """Paragraph index for every human sentence, plus the gap-placed ones.

    A matched sentence takes its partner's paragraph. An unmatched one takes
    the paragraph of the nearest matched predecessor, else the nearest
    matched successor. With no matches at all it falls back to the paragraph
    of the last B sentence consumed before it on the path (or the first B
    paragraph).
    """
    para_of = [None] * n_hum
    fallback = [None] * n_hum
    last_b = gtr_sentences[0].paragraph_index
    for st in path.steps:
        if st.kind == MATCH:
            para_of[st.i] = gtr_sentences[st.j].paragraph_index
            last_b = para_of[st.i]
        elif st.kind == GAP_B:
            last_b = gtr_sentences[st.j].paragraph_index
        else:
            fallback[st.i] = last_b
    gap_placed = {k for k in range(n_hum) if para_of[k] is None}
    out = list(para_of)
    prev = None
    for k in range(n_hum):
        if para_of[k] is not None:
            prev = para_of[k]
        elif prev is not None:
            out[k] = prev
    nxt = None
    for k in range(n_hum - 1, -1, -1):
        if para_of[k] is not None:
            nxt = para_of[k]
        elif out[k] is None:
            out[k] = nxt if nxt is not None else fallback[k]
    return out, gap_placed


def project_to_paragraphs(path: SentenceAlignmentPath, hum_sentences: Sequence[Sentence],
                          gtr_sentences: Sequence[Sentence], doc_id: str = "",
                          translator_id: str = "",
                          gtr_paragraphs: Mapping[int, str] | Sequence[str] | None = None
                          ) -> list[PairAlignment]:
    """Group human sentences under the machine paragraphs they align to.

    One ``PairAlignment`` is produced per machine paragraph that has at least
    one sentence; paragraphs that receive no human sentence come out with an
    empty ``hum_text`` and the ``"empty"`` flag.
    """
    if not gtr_sentences:
        raise ValueError("need at least one machine sentence")
    assigned, gap_placed = assign_paragraphs(path, gtr_sentences, len(hum_sentences))
    order: list[int] = []
    for sent in gtr_sentences:
        if not order or order[-1] != sent.paragraph_index:
            if sent.paragraph_index in order:
                raise ValueError("machine sentences must be grouped by paragraph in order")
            order.append(sent.paragraph_index)
    if gtr_paragraphs is None:
        texts = {p: " ".join(s.text for s in gtr_sentences if s.paragraph_index == p) for p in order}
    elif isinstance(gtr_paragraphs, Mapping):
        texts = dict(gtr_paragraphs)
    else:
        texts = dict(enumerate(gtr_paragraphs))
    per_para = Counter(s.paragraph_index for s in gtr_sentences)
    buckets: dict[int, list[int]] = {p: [] for p in order}
    for k, p in enumerate(assigned):
        buckets[p].append(k)
    pairs = []
    for p in order:
        members = buckets[p]
        flags = []
        if not members:
            flags.append("empty")
        if any(k in gap_placed for k in members):
            flags.append("gap_attached")
        pairs.append(PairAlignment(
            doc_id=doc_id,
            translator_id=translator_id,
            source_index=p,
            gtr_text=texts[p],
            hum_text=" ".join(hum_sentences[k].text for k in members),
            hum_sentences=tuple(members),
            gtr_sentence_count=per_para[p],
            flags=tuple(flags),
        ))
    return pairs
