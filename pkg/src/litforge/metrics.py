"""Paragraph-level BLEU, multi-reference aggregation and win-rate reporting."""

from __future__ import annotations

import io
import json
import math
import subprocess
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .corpus import AlignmentRecord, Corpus

MultiRefMetric = Callable[[str, Sequence[str]], float]
SingleRefMetric = Callable[[str, str], float]


class MetricError(Exception):
    pass


@dataclass(frozen=True)
class BleuConfig:
    max_ngram_order: int = 4
    case_sensitive: bool = True
    # "epsilon" replaces a zero match count by ``epsilon``; "none" is strict BLEU.
    smoothing: str = "epsilon"
    epsilon: float = 0.1
    tokenization: str = "whitespace_punct"

    def __post_init__(self):
        if self.max_ngram_order < 1:
            raise ValueError("max_ngram_order must be >= 1")
        if self.smoothing not in ("none", "epsilon"):
            raise ValueError(f"unknown smoothing {self.smoothing!r}")
        if self.tokenization not in ("whitespace_punct", "whitespace"):
            raise ValueError(f"unknown tokenization {self.tokenization!r}")


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith(("P", "S"))


def tokenize(text: str, cfg: BleuConfig = BleuConfig()) -> list[str]:
    """Whitespace split; with ``whitespace_punct`` leading and trailing
    punctuation characters become tokens of their own."""
    if not cfg.case_sensitive:
        text = text.lower()
    words = text.split()
    if cfg.tokenization == "whitespace":
        return words
    out = []
    for w in words:
        lead = 0
        while lead < len(w) and _is_punct(w[lead]):
            lead += 1
        if lead == len(w):
            out.extend(w)
            continue
        trail = len(w)
        while trail > lead and _is_punct(w[trail - 1]):
            trail -= 1
        out.extend(w[:lead])
        out.append(w[lead:trail])
        out.extend(w[trail:])
    return out


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(hypothesis: str, references: Sequence[str], cfg: BleuConfig = BleuConfig()) -> float:
    """BLEU of one hypothesis against a reference set, on a 0-100 scale.

    Counts are clipped by the maximum count in any single reference. A zero
    match count at order n becomes ``epsilon`` over the hypothesis n-gram
    total, and the geometric mean runs over the orders the hypothesis is long
    enough to have. The effective reference length is the one closest to the hypothesis length
    (shorter wins ties).
    """
    if isinstance(references, str):
        references = [references]
    refs = list(references)
    if not refs:
        raise MetricError("empty reference set")
    hyp = tokenize(hypothesis, cfg)
    if not hyp:
        raise MetricError("empty hypothesis")
    ref_toks = [tokenize(r, cfg) for r in refs]
    c = len(hyp)
    r = min((len(t) for t in ref_toks), key=lambda L: (abs(L - c), L))

    log_sum = 0.0
    # Orders longer than the hypothesis have no n-grams and are left out of the
    # mean, so bleu(x, [x]) is 100 for short x too.
    N = min(cfg.max_ngram_order, c)
    for n in range(1, N + 1):
        cand = _ngrams(hyp, n)
        max_ref: Counter = Counter()
        for t in ref_toks:
            for g, k in _ngrams(t, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matched = sum(min(k, max_ref[g]) for g, k in cand.items())
        total = sum(cand.values())
        if matched == 0:
            if cfg.smoothing == "none":
                return 0.0
            log_sum += math.log(cfg.epsilon / total)
        else:
            log_sum += math.log(matched / total)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_sum / N)


def make_bleu(cfg: BleuConfig = BleuConfig()) -> MultiRefMetric:
    return lambda hyp, refs: bleu(hyp, refs, cfg)


@dataclass(frozen=True)
class AggregateScore:
    s_hum: float
    s_cand: float
    n: int
    metric_name: str = ""


def leave_one_out(refs: Sequence[str]) -> list[list[str]]:
    """Reference set i is every reference except the one at position i."""
    return [[r for k, r in enumerate(refs) if k != i] for i in range(len(refs))]


def aggregate_scores(record: AlignmentRecord, metric: MultiRefMetric, metric_name: str = "",
                     candidate: str | None = None) -> AggregateScore:
    """Human and candidate scores over identical leave-one-out reference sets.

    ``candidate`` defaults to the record's machine translation.
    """
    refs = [h.text for h in record.hums]
    n = len(refs)
    if n < 2:
        raise MetricError(f"aggregation undefined for n={n} references ({record.doc_id}:{record.source_index})")
    cand = record.gtr if candidate is None else candidate
    sets = leave_one_out(refs)
    s_hum = math.fsum(metric(refs[i], sets[i]) for i in range(n)) / n
    s_cand = math.fsum(metric(cand, sets[i]) for i in range(n)) / n
    return AggregateScore(s_hum, s_cand, n, metric_name)


def as_multi_reference(metric: SingleRefMetric) -> MultiRefMetric:
    """Score against a set as the mean of single-reference scores."""
    return lambda hyp, refs: math.fsum(metric(hyp, r) for r in refs) / len(refs)


def pairwise_average(record: AlignmentRecord, metric: SingleRefMetric, metric_name: str = "") -> AggregateScore:
    return aggregate_scores(record, as_multi_reference(metric), metric_name)


# -- corpus report --------------------------------------------------------------

@dataclass
class LanguageRow:
    language: str
    records: int = 0
    win_hum: int = 0
    win_cand: int = 0
    ties: int = 0
    _hum: list = field(default_factory=list, repr=False)
    _cand: list = field(default_factory=list, repr=False)

    def add(self, agg: AggregateScore) -> None:
        self.records += 1
        self._hum.append(agg.s_hum)
        self._cand.append(agg.s_cand)
        if agg.s_hum > agg.s_cand:
            self.win_hum += 1
        elif agg.s_cand > agg.s_hum:
            self.win_cand += 1
        else:
            self.ties += 1

    @property
    def mean_hum(self) -> float | None:
        return math.fsum(self._hum) / len(self._hum) if self._hum else None

    @property
    def mean_cand(self) -> float | None:
        return math.fsum(self._cand) / len(self._cand) if self._cand else None

    @property
    def win_hum_pct(self) -> float | None:
        decided = self.win_hum + self.win_cand
        return 100.0 * self.win_hum / decided if decided else None

    @property
    def win_cand_pct(self) -> float | None:
        decided = self.win_hum + self.win_cand
        return 100.0 * self.win_cand / decided if decided else None

    def to_json(self) -> dict:
        return {c: getattr(self, c) for c in REPORT_COLUMNS}


REPORT_COLUMNS = ("language", "records", "mean_hum", "mean_cand", "win_hum", "win_cand",
                  "ties", "win_hum_pct", "win_cand_pct")


@dataclass
class CorpusReport:
    metric_name: str
    rows: list[LanguageRow]
    overall: LanguageRow
    scores: list[tuple[AlignmentRecord, AggregateScore]]

    def to_json(self) -> dict:
        return {"metric": self.metric_name,
                "languages": [r.to_json() for r in self.rows],
                "all": self.overall.to_json()}

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("metric\t" + "\t".join(REPORT_COLUMNS) + "\n")
        for row in [*self.rows, self.overall]:
            cells = [_fmt(getattr(row, c)) for c in REPORT_COLUMNS]
            buf.write(self.metric_name + "\t" + "\t".join(cells) + "\n")
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def corpus_report(corpus: Corpus, metric: MultiRefMetric | None = None, metric_name: str = "bleu",
                  scores: Mapping[tuple[str, int], AggregateScore] | None = None) -> CorpusReport:
    """Per-language mean aggregate scores and win counts.

    Ties count toward neither side and are excluded from the win percentages,
    which are ``None`` when every record is a tie. Pass precomputed
    ``scores`` (keyed by (doc_id, source_index)) to skip records that an
    adapter could not score.
    """
    rows: dict[str, LanguageRow] = {}
    overall = LanguageRow("All")
    scored = []
    for rec in corpus.records:
        if scores is not None:
            agg = scores.get((rec.doc_id, rec.source_index))
            if agg is None:
                continue
        else:
            agg = aggregate_scores(rec, metric, metric_name)
        lang = corpus.language_of(rec.doc_id)
        rows.setdefault(lang, LanguageRow(lang)).add(agg)
        overall.add(agg)
        scored.append((rec, agg))
    return CorpusReport(metric_name, [rows[k] for k in sorted(rows)], overall, scored)


# -- external learned metrics ---------------------------------------------------

@dataclass(frozen=True)
class AdapterConfig:
    """Subprocess speaking JSON lines: in ``{"id", "hyp", "ref"}``, out ``{"id", "score"}``."""

    argv: tuple[str, ...]
    max_length: int = 512
    timeout: float = 3600.0
    length_fn: Callable[[str], int] = field(default=lambda s: len(s.split()), compare=False)


@dataclass
class ExternalScores:
    scores: list[float | None]
    skipped: list[int]


class AdapterError(MetricError):
    def __init__(self, message: str, partial: list[float | None]):
        super().__init__(message)
        self.partial = partial
        self.partial_results = any(s is not None for s in partial)


def external_metric(pairs: Sequence[tuple[str, str]], cfg: AdapterConfig) -> ExternalScores:
    """Score (hypothesis, reference) pairs through an adapter process.

    Pairs whose combined length exceeds ``max_length`` are not sent; they come
    back as ``None`` and are listed in ``skipped``.
    """
    scores: list[float | None] = [None] * len(pairs)
    skipped, lines = [], []
    for k, (hyp, ref) in enumerate(pairs):
        if cfg.length_fn(hyp) + cfg.length_fn(ref) > cfg.max_length:
            skipped.append(k)
        else:
            lines.append(json.dumps({"id": k, "hyp": hyp, "ref": ref}, ensure_ascii=False))
    if not lines:
        return ExternalScores(scores, skipped)
    try:
        proc = subprocess.run(list(cfg.argv), input="\n".join(lines) + "\n", capture_output=True,
                              text=True, encoding="utf-8", timeout=cfg.timeout)
    except (OSError, subprocess.TimeoutExpired) as exc:
        raise AdapterError(f"adapter failed to run: {exc}", scores) from exc
    for line in proc.stdout.splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            scores[int(obj["id"])] = float(obj["score"])
        except (ValueError, KeyError, TypeError, IndexError) as exc:
            raise AdapterError(f"bad adapter output line {line[:80]!r}: {exc}", scores) from exc
    if proc.returncode != 0:
        raise AdapterError(f"adapter exited with {proc.returncode}: {proc.stderr[-300:]}", scores)
    expected = len(pairs) - len(skipped)
    got = sum(s is not None for s in scores)
    if got != expected:
        raise AdapterError(f"adapter returned {got} of {expected} scores", scores)
    return ExternalScores(scores, skipped)


def score_records_external(records: Iterable[AlignmentRecord], cfg: AdapterConfig,
                           metric_name: str = "adapter") -> dict[tuple[str, int], AggregateScore]:
    """Pairwise-average aggregation with one batched adapter call.

    Records with any over-length pair are left out of the result.
    """
    records = list(records)
    pairs: list[tuple[str, str]] = []
    index: dict[tuple[str, str], int] = {}

    def slot(h: str, r: str) -> int:
        key = (h, r)
        if key not in index:
            index[key] = len(pairs)
            pairs.append(key)
        return index[key]

    def needed(rec: AlignmentRecord) -> list[tuple[str, str]]:
        refs = [h.text for h in rec.hums]
        out = [(refs[i], r) for i, rest in enumerate(leave_one_out(refs)) for r in rest]
        return out + [(rec.gtr, r) for r in refs]

    for rec in records:
        for h, r in needed(rec):
            slot(h, r)
    result = external_metric(pairs, cfg)
    out = {}
    for rec in records:
        lookup = {key: result.scores[index[key]] for key in needed(rec)}
        if len(rec.hums) >= 2 and all(v is not None for v in lookup.values()):
            out[(rec.doc_id, rec.source_index)] = pairwise_average(
                rec, lambda h, r, lookup=lookup: lookup[(h, r)], metric_name)
    return out
