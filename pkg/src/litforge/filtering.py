"""Discard rules, reference merging, per-translator sampling and splits."""

from __future__ import annotations

import hashlib
import json
import math
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

from .aligner import PairAlignment
from .corpus import SPLITS, AlignmentRecord, Corpus, Reference

BleuFn = Callable[[str, Sequence[str]], float]

EMPTY, HEADING, RATIO, BLEU_FLOOR = "empty projection", "short heading", "length ratio", "BLEU floor"


@dataclass(frozen=True)
class FilterConfig:
    short_token_min: int = 4
    short_char_min: int = 20
    length_ratio_max: float = 3.0
    bleu_floor: float = 5.0
    sample_cap: float = 0.5
    seed: int = 0
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if any(r <= 0 for r in self.split_ratios) or len(self.split_ratios) != 3:
            raise ValueError("split_ratios must be three positive numbers")
        if abs(math.fsum(self.split_ratios) - 1.0) > 1e-9:
            raise ValueError("split_ratios must sum to 1")
        if not 0 < self.sample_cap <= 1:
            raise ValueError("sample_cap must be in (0, 1]")


def derive_seed(seed: int, *keys: str) -> int:
    """Stable 64-bit seed for a named sub-stream of ``seed``."""
    h = hashlib.blake2b(digest_size=8, key=str(seed).encode())
    for k in keys:
        h.update(k.encode("utf-8") + b"\x00")
    return int.from_bytes(h.digest(), "big")


# -- per-paragraph rules ------------------------------------------------------

_ROMAN = re.compile(r"M{0,3}(?:CM|CD|D?C{0,3})(?:XC|XL|L?X{0,3})(?:IX|IV|V?I{0,3})")
_EDGE_PUNCT = ".,;:!?()[]{}\"'“”‘’«»-–—"


def _tokens(text: str) -> list[str]:
    return [t.strip(_EDGE_PUNCT) for t in text.split()]


def is_short_paragraph(text: str, cfg: FilterConfig = FilterConfig()) -> bool:
    return len(text.split()) < cfg.short_token_min or len(text) < cfg.short_char_min


def is_roman_numeral(token: str) -> bool:
    return bool(token) and _ROMAN.fullmatch(token) is not None


def is_heading(text: str) -> bool:
    """Mentions "chapter" or carries a standalone upper-case Roman numeral.

    Single-letter numerals only count when they are the whole paragraph, so
    the pronoun "I" in running prose does not trigger.
    """
    toks = [t for t in _tokens(text) if t]
    if any(t.lower() == "chapter" for t in toks):
        return True
    if len(toks) == 1 and toks[0] in ("I", "V", "X"):
        return True
    return any(len(t) >= 2 and is_roman_numeral(t) for t in toks)


def check_pair(pair: PairAlignment, cfg: FilterConfig, bleu_fn: BleuFn) -> tuple[str | None, str]:
    """Return (rule, detail) for the first rule that discards ``pair``, else (None, "")."""
    hum, gtr = pair.hum_text, pair.gtr_text
    if not gtr.strip():
        raise ValueError("pair has an empty machine paragraph")
    if not hum.strip():
        return EMPTY, EMPTY
    if (is_short_paragraph(hum, cfg) or is_short_paragraph(gtr, cfg)) and (is_heading(hum) or is_heading(gtr)):
        return HEADING, "short paragraph with chapter heading"
    nh, ng = len(hum.split()), len(gtr.split())
    ratio = max(nh, ng) / min(nh, ng)
    if ratio > cfg.length_ratio_max:
        return RATIO, f"length ratio {ratio:.2f} > {cfg.length_ratio_max}"
    score = bleu_fn(hum, [gtr])
    if score < cfg.bleu_floor:
        return BLEU_FLOOR, f"BLEU floor {score:.2f} < {cfg.bleu_floor}"
    return None, ""


def passes_pair_filters(pair: PairAlignment, cfg: FilterConfig, bleu_fn: BleuFn) -> tuple[bool, str]:
    rule, detail = check_pair(pair, cfg, bleu_fn)
    return rule is None, detail


class FilterResult(NamedTuple):
    kept: list[PairAlignment]
    audit: list[dict]
    discarded: Counter


def filter_pairs(pairs: Iterable[PairAlignment], cfg: FilterConfig, bleu_fn: BleuFn) -> FilterResult:
    kept, audit, counts = [], [], Counter()
    for p in pairs:
        rule, detail = check_pair(p, cfg, bleu_fn)
        if rule is None:
            kept.append(p)
        else:
            counts[rule] += 1
            audit.append({"doc_id": p.doc_id, "source_index": p.source_index,
                          "translator_id": p.translator_id, "reason": detail})
    return FilterResult(kept, audit, counts)


def write_audit(entries: Iterable[dict], fh) -> None:
    for e in entries:
        fh.write(json.dumps(e, sort_keys=True, ensure_ascii=False) + "\n")


# -- merging ------------------------------------------------------------------

class MergeResult(NamedTuple):
    records: list[AlignmentRecord]
    dropped_records: int
    dropped_pairs: int


def merge_pairs(pairs: Iterable[PairAlignment], source_text: Mapping[tuple[str, int], str],
                sentence_counts: Mapping[tuple[str, str, int], int] | None = None,
                min_refs: int = 2) -> MergeResult:
    """One record per (doc_id, source_index) holding every surviving reference.

    ``source_text`` maps (doc_id, source_index) to the source paragraph;
    ``sentence_counts`` maps (doc_id, translator_id or "gtr", source_index)
    to a sentence count. Records with fewer than ``min_refs`` references are
    dropped and counted.
    """
    groups: dict[tuple[str, int], list[PairAlignment]] = defaultdict(list)
    for p in pairs:
        groups[(p.doc_id, p.source_index)].append(p)
    records, dropped_records, dropped_pairs = [], 0, 0
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda p: p.translator_id)
        if len(members) < min_refs:
            dropped_records += 1
            dropped_pairs += len(members)
            continue
        doc_id, idx = key
        counts = {}
        if sentence_counts is not None:
            for name in ["gtr", *(p.translator_id for p in members)]:
                if (doc_id, name, idx) in sentence_counts:
                    counts[name] = sentence_counts[(doc_id, name, idx)]
        records.append(AlignmentRecord(
            doc_id=doc_id,
            source_index=idx,
            src=source_text[key],
            gtr=members[0].gtr_text,
            hums=tuple(Reference(p.translator_id, p.hum_text) for p in members),
            sentence_counts=counts,
        ))
    return MergeResult(records, dropped_records, dropped_pairs)


# -- sampling -----------------------------------------------------------------

class SampleResult(NamedTuple):
    records: list[AlignmentRecord]
    capped_refs: int  # references removed to honour the cap
    orphaned_refs: int  # references lost because their record fell below two


def sample_and_shuffle(records: Sequence[AlignmentRecord], cfg: FilterConfig,
                       doc_id: str | None = None, min_refs: int = 2) -> SampleResult:
    """Cap each translator's share of a book's paragraphs, then shuffle.

    A translator appearing in ``k`` records keeps at most floor(cap * k). Excess
    appearances are removed at random, preferring records that have already
    fallen below ``min_refs`` (they are lost anyway). Records left with fewer
    than ``min_refs`` references are dropped, and the survivors are put in a
    seeded random order. The stream is keyed by (seed, doc_id) so books can
    be processed in any order.
    """
    if not records:
        return SampleResult([], 0, 0)
    doc_id = doc_id if doc_id is not None else records[0].doc_id
    rng = random.Random(derive_seed(cfg.seed, "sample", doc_id))
    recs = sorted(records, key=lambda r: r.source_index)
    present = [set(h.translator_id for h in r.hums) for r in recs]
    appearances = Counter(t for s in present for t in s)
    capped = 0
    for t in sorted(appearances):
        allowed = math.floor(cfg.sample_cap * appearances[t] + 1e-9)
        holders = [k for k, s in enumerate(present) if t in s]
        excess = len(holders) - allowed
        if excess <= 0:
            continue
        dead = [k for k in holders if len(present[k]) < min_refs]
        alive = [k for k in holders if len(present[k]) >= min_refs]
        rng.shuffle(dead)
        victims = dead[:excess]
        if len(victims) < excess:
            victims += rng.sample(alive, excess - len(victims))
        for k in victims:
            present[k].discard(t)
        capped += excess
    out, orphaned = [], 0
    for rec, keep in zip(recs, present):
        if len(keep) < min_refs:
            orphaned += len(keep)
            continue
        for t in sorted(h.translator_id for h in rec.hums if h.translator_id not in keep):
            rec = rec.without(t)
        out.append(rec)
    rng.shuffle(out)
    return SampleResult(out, capped, orphaned)


# -- splits -------------------------------------------------------------------

def assign_splits(corpus: Corpus, cfg: FilterConfig = FilterConfig()) -> Corpus:
    """Greedy whole-document split assignment.

    Documents are taken largest first (by record count, ties by doc_id) and
    each goes to the split whose share of paragraphs so far is furthest below
    its target; ties go to train, then valid, then test. Once the documents
    left are only enough to cover the still-empty splits, choice is limited to
    those splits so that every split receives at least one document.
    """
    sizes = Counter({b.doc_id: len(b.records) for b in corpus.books})
    if len(sizes) < 3:
        raise ValueError(f"need at least 3 documents to populate train/valid/test, got {len(sizes)}")
    total = sum(sizes.values()) or 1
    filled = dict.fromkeys(SPLITS, 0)
    assignment = {}
    order = sorted(sizes, key=lambda d: (-sizes[d], d))
    for pos, doc_id in enumerate(order):
        empty = [s for s in SPLITS if s not in assignment.values()]
        allowed = empty if len(order) - pos <= len(empty) else SPLITS
        deficits = [(cfg.split_ratios[k] - filled[s] / total, -k) for k, s in enumerate(SPLITS) if s in allowed]
        best = SPLITS[-max(deficits)[1]]
        assignment[doc_id] = best
        filled[best] += sizes[doc_id]
    return replace(corpus, split_assignment=assignment)
