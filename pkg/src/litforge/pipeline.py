"""Stage-by-stage pipeline driver.

Every stage reads the previous stage's files from the work directory and
writes its own, plus a ``<stage>.stamp.json`` holding the cache key (a hash
of the stage's config and input bytes) and the stage's record counts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from . import __version__
from .aligner import DEFAULT_GAP_PENALTY, PairAlignment, needleman_wunsch, project_to_paragraphs
from .corpus import (HUMAN, MACHINE, Book, Corpus, SourceDocument, TranslationDocument,
                     dumps, parse_corpus, serialize_corpus)
from .filtering import (FilterConfig, assign_splits, derive_seed, filter_pairs, merge_pairs,
                        sample_and_shuffle, write_audit)
from .metrics import AdapterConfig, BleuConfig, corpus_report, make_bleu, score_records_external
from .postedit import (HttpCompletionClient, PosteditConfig, PrepareStats, job_config,
                       postedit_batch, prepare_finetune, write_finetune_file)
from .segmentation import (SubprocessSegmenter, config_for, extract_paragraphs, rule_segmenter,
                           segment_document, strip_artifacts)
from .similarity import EmbeddingClient, EmbeddingEndpoint, LexicalScorer, RemoteScorer, score_matrix
from .service import RetryPolicy
from .stats import paired_bootstrap, wilcoxon_pratt

log = logging.getLogger(__name__)

STAGES = ("ingest", "align", "build", "score", "stats", "prep-finetune", "postedit", "report")
DEFAULT_STAGES = tuple(s for s in STAGES if s != "postedit")
FIXTURE_DIR = Path(__file__).parent / "data" / "fixture"


class PipelineError(Exception):
    exit_code = 1


class UpstreamMissingError(PipelineError):
    exit_code = 2


class StaleCacheError(PipelineError):
    exit_code = 1


@dataclass(frozen=True)
class PipelineConfig:
    books: tuple[str, ...] = ()
    work_dir: str = "work"
    seed: int = 0
    segmenter: Mapping[str, Any] = field(default_factory=dict)
    similarity: Mapping[str, Any] = field(default_factory=dict)
    aligner: Mapping[str, Any] = field(default_factory=dict)
    filter: Mapping[str, Any] = field(default_factory=dict)
    metrics: Mapping[str, Any] = field(default_factory=dict)
    postedit: Mapping[str, Any] = field(default_factory=dict)
    score_metric: str = "bleu"
    bootstrap_resamples: int = 1000

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], base: Path | None = None) -> PipelineConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known - {"paths"}
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        fields = {k: v for k, v in obj.items() if k in known}
        paths = obj.get("paths", {})
        if "books" in paths:
            fields["books"] = paths["books"]
        if "work_dir" in paths:
            fields["work_dir"] = paths["work_dir"]
        if base is not None:
            for key in ("books",):
                if key in fields:
                    fields[key] = [str((base / p).resolve()) if not Path(p).is_absolute() else p
                                   for p in fields[key]]
            if "work_dir" in fields and not Path(fields["work_dir"]).is_absolute():
                fields["work_dir"] = str((base / fields["work_dir"]).resolve())
        fields["books"] = tuple(fields.get("books", ()))
        cfg = cls(**fields)
        cfg.filter_config()
        cfg.bleu_config()
        cfg.postedit_config()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> PipelineConfig:
        path = Path(path)
        return cls.from_json(json.loads(path.read_text(encoding="utf-8")), path.parent)

    def stage_seed(self, stage: str) -> int:
        return derive_seed(self.seed, stage)

    def filter_config(self) -> FilterConfig:
        opts = dict(self.filter)
        if "split_ratios" in opts:
            opts["split_ratios"] = tuple(opts["split_ratios"])
        return FilterConfig(seed=self.stage_seed("build"), **opts)

    def bleu_config(self) -> BleuConfig:
        return BleuConfig(**self.metrics)

    def postedit_config(self) -> PosteditConfig:
        opts = {k: v for k, v in self.postedit.items() if k in {f.name for f in dataclasses.fields(PosteditConfig)}}
        return PosteditConfig(seed=self.stage_seed("prep-finetune"), **opts)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        # The work directory only says where artifacts go, not what they contain.
        content = {k: v for k, v in self.to_json().items() if k != "work_dir"}
        blob = json.dumps(content, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


# -- ingest -------------------------------------------------------------------

def load_book(path: str | Path) -> Book:
    """Read a book directory.

    Layout: ``book.json`` (doc_id, language, title, author, pub_year),
    ``source.txt``, ``machine.txt`` and ``human/<translator_id>.txt``, all
    plain UTF-8 with blank lines between paragraphs.
    """
    path = Path(path)
    if not (path / "book.json").is_file():
        raise PipelineError(f"{path}: missing book.json")
    meta = json.loads((path / "book.json").read_text(encoding="utf-8"))
    doc_id = meta["doc_id"]
    src_cfg = config_for(meta["language"])
    en_cfg = config_for("en")

    def paras(file: Path, cfg) -> tuple[str, ...]:
        out = [strip_artifacts(p, cfg) for p in extract_paragraphs(file.read_text(encoding="utf-8"))]
        return tuple(p for p in out if p)

    source = SourceDocument(doc_id, meta["language"], meta.get("title", ""), meta.get("author", ""),
                            int(meta["pub_year"]), paras(path / "source.txt", src_cfg))
    machine = TranslationDocument(doc_id, "gtr", MACHINE, paras(path / "machine.txt", en_cfg))
    if len(machine.paragraphs) != len(source.paragraphs):
        raise PipelineError(f"{doc_id}: machine translation has {len(machine.paragraphs)} paragraphs, "
                            f"source has {len(source.paragraphs)}")
    humans = tuple(
        TranslationDocument(doc_id, f.stem, HUMAN, paras(f, en_cfg))
        for f in sorted((path / "human").glob("*.txt"))
    )
    if not humans:
        raise PipelineError(f"{doc_id}: no human translations under {path / 'human'}")
    return Book(source, machine, humans)


# -- align --------------------------------------------------------------------

def make_segmenter(opts: Mapping[str, Any]):
    if opts.get("command"):
        return SubprocessSegmenter(opts["command"])
    return rule_segmenter(config_for("en"))


def make_scorer(opts: Mapping[str, Any]):
    kind = opts.get("kind", "lexical")
    if kind == "lexical":
        return LexicalScorer()
    if kind == "remote":
        endpoint = EmbeddingEndpoint(
            url=opts["url"], batch_size=opts.get("batch_size", 64), concurrency=opts.get("concurrency", 4))
        return RemoteScorer(EmbeddingClient(endpoint))
    raise PipelineError(f"unknown similarity kind {kind!r}")


def align_book(book: Book, scorer, gap_penalty: float = DEFAULT_GAP_PENALTY,
               segmenter=None) -> list[PairAlignment]:
    """Align every human translation of ``book`` against its machine translation."""
    segmenter = segmenter or rule_segmenter(config_for("en"))
    gtr_sents = segment_document(book.machine.paragraphs, segmenter)
    pairs = []
    for human in book.humans:
        hum_sents = segment_document(human.paragraphs, segmenter)
        if not hum_sents:
            continue
        m = score_matrix([s.text for s in hum_sents], [s.text for s in gtr_sents], scorer)
        path = needleman_wunsch(m, gap_penalty)
        pairs.extend(project_to_paragraphs(path, hum_sents, gtr_sents, book.doc_id,
                                           human.translator_id, book.machine.paragraphs))
    return pairs


# -- stage machinery ----------------------------------------------------------

def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def conserves(counts: Mapping[str, Mapping[str, Any]]) -> bool:
    return all(c["input"] == c["output"] + sum(c.get("discarded", {}).values()) for c in counts.values())


def _count(inp: int, out: int, discarded: Mapping[str, int] | None = None) -> dict:
    return {"input": inp, "output": out, "discarded": dict(sorted((discarded or {}).items()))}


@dataclass
class StageRecord:
    name: str
    cache_hit: bool
    seconds: float
    seed: int
    counts: dict


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    seed: int
    stages: dict[str, StageRecord] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"config_hash": self.config_hash, "tool_version": self.tool_version, "seed": self.seed,
                "stages": {k: dataclasses.asdict(v) for k, v in self.stages.items()}}


class Pipeline:
    def __init__(self, cfg: PipelineConfig, force: bool = False, endpoint: str | None = None,
                 completion_client=None, adapter: AdapterConfig | None = None):
        self.cfg = cfg
        self.work = Path(cfg.work_dir)
        self.force = force
        self.endpoint = endpoint
        self.completion_client = completion_client
        self.adapter = adapter

    # (inputs, outputs, stage-specific config) for cache keys
    def _spec(self, stage: str) -> tuple[list[Path], list[str], Any]:
        c = self.cfg
        w = self.work
        return {
            "ingest": ([], ["ingested.json"], {"books": list(c.books), "book_bytes": self._book_digest()}),
            "align": ([w / "ingested.json"], ["pairs.jsonl"],
                      {"segmenter": c.segmenter, "similarity": c.similarity, "aligner": c.aligner}),
            "build": ([w / "ingested.json", w / "pairs.jsonl"], ["audit.jsonl", "corpus.json"],
                      {"filter": dataclasses.asdict(c.filter_config()), "metrics": c.metrics}),
            "score": ([w / "corpus.json"], ["scores.tsv", "score_report.tsv", "score_report.json"],
                      {"metric": c.score_metric, "metrics": c.metrics}),
            "stats": ([w / "scores.tsv"], ["stats.json"],
                      {"resamples": c.bootstrap_resamples, "seed": c.stage_seed("stats")}),
            "prep-finetune": ([w / "corpus.json"], ["finetune.jsonl", "finetune_job.json"],
                              {"postedit": dataclasses.asdict(c.postedit_config()), "metrics": c.metrics}),
            "postedit": ([w / "corpus.json"], ["postedit.jsonl"],
                         {"postedit": dict(c.postedit), "endpoint": self.endpoint}),
            "report": ([w / "score_report.json", w / "stats.json"], ["report.json"], {}),
        }[stage]

    def _book_digest(self) -> str:
        h = hashlib.sha256()
        for b in self.cfg.books:
            for f in sorted(Path(b).rglob("*")):
                if f.is_file():
                    h.update(str(f.relative_to(b)).encode() + b"\0" + f.read_bytes())
        return h.hexdigest()

    def _key(self, stage: str) -> str:
        inputs, _, opts = self._spec(stage)
        h = hashlib.sha256(stage.encode())
        h.update(json.dumps(opts, sort_keys=True, default=str).encode())
        for p in inputs:
            h.update(_sha(p.read_bytes()).encode())
        return h.hexdigest()

    def run(self, stages: Iterable[str] = DEFAULT_STAGES) -> RunManifest:
        wanted = set(stages)
        bad = wanted - set(STAGES)
        if bad:
            raise PipelineError(f"unknown stage(s): {sorted(bad)}")
        self.work.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest(self.cfg.hash(), __version__, self.cfg.seed)
        previous = self.work / "run_manifest.json"
        if previous.exists():
            # Keep records of stages run by earlier invocations with this config.
            old = json.loads(previous.read_text(encoding="utf-8"))
            if old.get("config_hash") == manifest.config_hash:
                for name, rec in old.get("stages", {}).items():
                    manifest.stages[name] = StageRecord(**rec)
        for stage in STAGES:
            if stage in wanted:
                manifest.stages[stage] = self._run_stage(stage)
        manifest.stages = {s: manifest.stages[s] for s in STAGES if s in manifest.stages}
        previous.write_bytes(dumps(manifest.to_json()))
        return manifest

    def _run_stage(self, stage: str) -> StageRecord:
        inputs, outputs, _ = self._spec(stage)
        for p in inputs:
            if not p.exists():
                producer = _producer_of(p.name)
                raise UpstreamMissingError(f"{stage}: missing {p.name}; run stage {producer!r} first")
        key = self._key(stage)
        stamp_path = self.work / f"{stage}.stamp.json"
        outs_exist = all((self.work / o).exists() for o in outputs)
        if outs_exist and stamp_path.exists():
            stamp = json.loads(stamp_path.read_text())
            if stamp["key"] == key:
                log.info("%s: cache hit", stage)
                return StageRecord(stage, True, 0.0, self.cfg.stage_seed(stage), stamp["counts"])
            if not self.force:
                raise StaleCacheError(f"{stage}: cached artifacts were built with a different config or "
                                      "input; rerun with --force to rebuild")
        t0 = time.perf_counter()
        counts = getattr(self, "_stage_" + stage.replace("-", "_"))()
        if not conserves(counts):
            raise PipelineError(f"{stage}: record counts do not conserve: {counts}")
        stamp_path.write_bytes(dumps({"key": key, "counts": counts}))
        return StageRecord(stage, False, time.perf_counter() - t0, self.cfg.stage_seed(stage), counts)

    def _corpus(self, name: str) -> Corpus:
        return parse_corpus((self.work / name).read_bytes())

    # -- stages ---------------------------------------------------------------

    def _stage_ingest(self) -> dict:
        if not self.cfg.books:
            raise PipelineError("ingest: no book directories configured")
        books = [load_book(p) for p in self.cfg.books]
        corpus = Corpus(tuple(sorted(books, key=lambda b: b.doc_id)),
                        manifest={"config_hash": self.cfg.hash(), "seed": self.cfg.seed, "stage": "ingest"})
        (self.work / "ingested.json").write_bytes(serialize_corpus(corpus))
        n = len(books)
        paras = sum(len(b.source.paragraphs) for b in books)
        return {"books": _count(n, n), "paragraphs": _count(paras, paras)}

    def _stage_align(self) -> dict:
        corpus = self._corpus("ingested.json")
        scorer = make_scorer(self.cfg.similarity)
        segmenter = make_segmenter(self.cfg.segmenter)
        gap = float(self.cfg.aligner.get("gap_penalty", DEFAULT_GAP_PENALTY))
        buf = io.StringIO()
        slots = produced = 0
        for book in corpus.books:
            pairs = align_book(book, scorer, gap, segmenter)
            slots += len(book.humans) * sum(1 for p in book.machine.paragraphs if p.strip())
            produced += len(pairs)
            for p in pairs:
                buf.write(json.dumps(p.to_json(), sort_keys=True, ensure_ascii=False) + "\n")
        (self.work / "pairs.jsonl").write_text(buf.getvalue(), encoding="utf-8")
        return {"pairs": _count(slots, produced, {"unaligned translation": slots - produced})}

    def _stage_build(self) -> dict:
        ingested = self._corpus("ingested.json")
        fcfg = self.cfg.filter_config()
        bleu_fn = make_bleu(self.cfg.bleu_config())
        pairs = [PairAlignment.from_json(json.loads(line))
                 for line in (self.work / "pairs.jsonl").read_text(encoding="utf-8").splitlines() if line]
        filtered = filter_pairs(pairs, fcfg, bleu_fn)
        with open(self.work / "audit.jsonl", "w", encoding="utf-8") as fh:
            write_audit(filtered.audit, fh)

        source_text = {(b.doc_id, i): p for b in ingested.books for i, p in enumerate(b.source.paragraphs)}
        counts = {(p.doc_id, "gtr", p.source_index): p.gtr_sentence_count for p in filtered.kept}
        counts.update({(p.doc_id, p.translator_id, p.source_index): len(p.hum_sentences) for p in filtered.kept})
        merged = merge_pairs(filtered.kept, source_text, counts)

        by_book: dict[str, list] = {}
        for rec in merged.records:
            by_book.setdefault(rec.doc_id, []).append(rec)
        books, capped, orphaned = [], 0, 0
        for book in ingested.books:
            res = sample_and_shuffle(by_book.get(book.doc_id, []), fcfg, book.doc_id)
            capped += res.capped_refs
            orphaned += res.orphaned_refs
            # Full human translations are not redistributed, only the sampled paragraphs.
            books.append(dataclasses.replace(book, humans=(), records=tuple(res.records)))
        corpus = Corpus(tuple(books), manifest={
            "config_hash": self.cfg.hash(), "seed": self.cfg.seed, "stage": "build",
            "sample_seed": fcfg.seed, "tool_version": __version__,
        })
        corpus = assign_splits(corpus, fcfg)
        (self.work / "corpus.json").write_bytes(serialize_corpus(corpus))

        merged_refs = sum(r.n for r in merged.records)
        sampled_refs = sum(r.n for r in corpus.records)
        return {
            "filter": _count(len(pairs), len(filtered.kept), filtered.discarded),
            "merge": _count(len(filtered.kept), merged_refs, {"fewer than two references": merged.dropped_pairs}),
            "sample": _count(merged_refs, sampled_refs,
                             {"sample cap": capped, "fewer than two references after sampling": orphaned}),
        }

    def _score(self, corpus: Corpus):
        metric = self.cfg.score_metric
        if metric == "bleu":
            return corpus_report(corpus, make_bleu(self.cfg.bleu_config()), "bleu")
        if metric.startswith("adapter:"):
            adapter = self.adapter or adapter_from_path(metric.split(":", 1)[1])
            scores = score_records_external(corpus.records, adapter, metric)
            return corpus_report(corpus, metric_name=metric, scores=scores)
        raise PipelineError(f"unknown metric {metric!r}")

    def _stage_score(self) -> dict:
        corpus = self._corpus("corpus.json")
        report = self._score(corpus)
        lines = ["doc_id\tsource_index\tlanguage\tsplit\tn\ts_hum\ts_cand"]
        for rec, agg in report.scores:
            lines.append(f"{rec.doc_id}\t{rec.source_index}\t{corpus.language_of(rec.doc_id)}\t"
                         f"{corpus.split_assignment.get(rec.doc_id, '')}\t{agg.n}\t{agg.s_hum!r}\t{agg.s_cand!r}")
        (self.work / "scores.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
        (self.work / "score_report.tsv").write_text(report.to_tsv(), encoding="utf-8")
        (self.work / "score_report.json").write_bytes(dumps(report.to_json()))
        n = len(corpus.records)
        return {"records": _count(n, len(report.scores), {"unscored": n - len(report.scores)})}

    def _stage_stats(self) -> dict:
        pairs = read_score_pairs(self.work / "scores.tsv")
        out: dict[str, Any] = {"n": len(pairs)}
        try:
            out["wilcoxon"] = wilcoxon_pratt(pairs).to_json()
        except ValueError as exc:
            out["wilcoxon"] = {"error": str(exc)}
        if pairs:
            out["bootstrap"] = paired_bootstrap(pairs, self.cfg.bootstrap_resamples,
                                                self.cfg.stage_seed("stats")).to_json()
        (self.work / "stats.json").write_bytes(dumps(out))
        return {"pairs": _count(len(pairs), len(pairs))}

    def _stage_prep_finetune(self) -> dict:
        corpus = self._corpus("corpus.json")
        pcfg = self.cfg.postedit_config()
        train = [r for r in corpus.records_in("train") if r.n >= 2]
        stats = PrepareStats()
        examples = prepare_finetune(train, pcfg, make_bleu(self.cfg.bleu_config()), stats=stats)
        with open(self.work / "finetune.jsonl", "w", encoding="utf-8") as fh:
            write_finetune_file(examples, fh)
        (self.work / "finetune_job.json").write_bytes(
            dumps(job_config("finetune.jsonl", self.cfg.postedit.get("model", "davinci"))))
        return {"examples": _count(stats.input, stats.output, stats.discarded())}

    def _stage_postedit(self) -> dict:
        corpus = self._corpus("corpus.json")
        pcfg = self.cfg.postedit_config()
        split = self.cfg.postedit.get("split", "test")
        recs = sorted(corpus.records_in(split), key=lambda r: (r.doc_id, r.source_index))
        client = self.completion_client
        if client is None:
            url = self.endpoint or self.cfg.postedit.get("endpoint")
            if not url:
                raise PipelineError("postedit: no endpoint configured (use --endpoint)")
            client = HttpCompletionClient(url, self.cfg.postedit.get("model", "davinci"))
        retry = RetryPolicy(max_attempts=int(self.cfg.postedit.get("max_attempts", 5)),
                            base_delay=float(self.cfg.postedit.get("base_delay", 0.5)))
        results = postedit_batch(client, [(r.src, r.gtr) for r in recs], pcfg, retry=retry,
                                 concurrency=int(self.cfg.postedit.get("concurrency", 4)))
        with open(self.work / "postedit.jsonl", "w", encoding="utf-8") as fh:
            for rec, res in zip(recs, results):
                fh.write(json.dumps({"doc_id": rec.doc_id, "source_index": rec.source_index,
                                     "gtr": rec.gtr, "output": res.text, "retries": res.retries},
                                    sort_keys=True, ensure_ascii=False) + "\n")
        return {"paragraphs": _count(len(recs), len(results))}

    def _stage_report(self) -> dict:
        report = {
            "scores": json.loads((self.work / "score_report.json").read_text(encoding="utf-8")),
            "stats": json.loads((self.work / "stats.json").read_text(encoding="utf-8")),
            "stage_counts": {},
        }
        for stage in STAGES:
            stamp = self.work / f"{stage}.stamp.json"
            if stamp.exists() and stage != "report":
                report["stage_counts"][stage] = json.loads(stamp.read_text())["counts"]
        (self.work / "report.json").write_bytes(dumps(report))
        return {"sections": _count(2, 2)}


def _producer_of(filename: str) -> str:
    for stage in STAGES:
        if filename in _OUTPUTS[stage]:
            return stage
    return "?"


_OUTPUTS = {
    "ingest": ["ingested.json"], "align": ["pairs.jsonl"], "build": ["audit.jsonl", "corpus.json"],
    "score": ["scores.tsv", "score_report.tsv", "score_report.json"], "stats": ["stats.json"],
    "prep-finetune": ["finetune.jsonl", "finetune_job.json"], "postedit": ["postedit.jsonl"],
    "report": ["report.json"],
}


def adapter_from_path(path: str, max_length: int = 512) -> AdapterConfig:
    argv = (sys.executable, path) if path.endswith(".py") else (path,)
    return AdapterConfig(argv=argv, max_length=max_length)


def read_score_pairs(path: Path) -> list[tuple[float, float]]:
    """Read (a, b) pairs from a TSV.

    Accepts the ``scores.tsv`` layout (columns ``s_hum``/``s_cand``) or any
    file whose last two columns are numeric; a non-numeric first line is
    treated as a header.
    """
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        return []
    header = lines[0].split("\t")
    cols = (-2, -1)
    if "s_hum" in header and "s_cand" in header:
        cols = (header.index("s_hum"), header.index("s_cand"))
        lines = lines[1:]
    else:
        try:
            [float(x) for x in header[-2:]]
        except ValueError:
            lines = lines[1:]
    out = []
    for ln in lines:
        cells = ln.split("\t")
        out.append((float(cells[cols[0]]), float(cells[cols[1]])))
    return out


def fixture_books() -> list[str]:
    return [str(p) for p in sorted(FIXTURE_DIR.iterdir()) if (p / "book.json").exists()]


def run_pipeline(cfg: PipelineConfig, stages: Sequence[str] = DEFAULT_STAGES, force: bool = False,
                 **kwargs) -> RunManifest:
    return Pipeline(cfg, force=force, **kwargs).run(stages)
