"""Fine-tuning data in the SRC ## GTr / HUM DNE format, and a completion client.

A training sequence is ``SRC <sep1> GTr <sep2> HUM <eos>``; everything up to
and including ``sep2`` is the prompt, the rest is the completion.
"""

from __future__ import annotations

import json
import math
import os
import random
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import IO, Callable, Iterable, Protocol, Sequence

import httpx

from .corpus import AlignmentRecord
from .filtering import derive_seed
from .metrics import aggregate_scores
from .service import (ProtocolError, RetryPolicy, ServiceError, TransientServiceError,
                      call_with_retry, classify_status)

BleuFn = Callable[[str, Sequence[str]], float]


class FormatError(ValueError):
    pass


class OverBudgetError(ValueError):
    pass


@dataclass(frozen=True)
class PosteditConfig:
    sep1: str = "##"
    sep2: str = "\n\n###\n\n"
    eos: str = "DNE"
    completion_prefix: str = " "
    token_budget: int = 2000
    percentile_low: float = 10.0
    percentile_high: float = 90.0
    sample_size: int = 30000
    top_p: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.percentile_low < self.percentile_high <= 100:
            raise ValueError("need 0 <= percentile_low < percentile_high <= 100")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


class TokenCounter(Protocol):
    def __call__(self, text: str) -> int: ...


def approx_token_count(text: str) -> int:
    """Conservative stand-in for a model tokenizer: ceil(UTF-8 bytes / 4)."""
    return -(-len(text.encode("utf-8")) // 4)


@dataclass(frozen=True)
class FinetuneExample:
    prompt: str
    completion: str
    token_counts: tuple[int, int] = (0, 0)
    provenance: tuple[str, int, str] | None = field(default=None, compare=False)

    @property
    def total_tokens(self) -> int:
        return sum(self.token_counts)

    def to_json(self) -> dict:
        return {"prompt": self.prompt, "completion": self.completion}


def build_prompt(src: str, gtr: str, cfg: PosteditConfig = PosteditConfig()) -> str:
    for name, text in (("src", src), ("gtr", gtr)):
        if not text.strip():
            raise FormatError(f"{name} is empty")
        for sep in (cfg.sep1, cfg.sep2, cfg.eos):
            if sep in text:
                raise FormatError(f"{name} contains reserved sequence {sep!r}")
    return src + cfg.sep1 + gtr + cfg.sep2


def format_example(src: str, gtr: str, hum: str, cfg: PosteditConfig = PosteditConfig(),
                   counter: TokenCounter = approx_token_count,
                   provenance: tuple[str, int, str] | None = None) -> FinetuneExample:
    prompt = build_prompt(src, gtr, cfg)
    if not hum.strip():
        raise FormatError("hum is empty")
    for sep in (cfg.sep2, cfg.eos):
        if sep in hum:
            raise FormatError(f"hum contains reserved sequence {sep!r}")
    completion = cfg.completion_prefix + hum + cfg.eos
    return FinetuneExample(prompt, completion, (counter(prompt), counter(completion)), provenance)


def parse_example(prompt: str, completion: str, cfg: PosteditConfig = PosteditConfig(),
                  counter: TokenCounter = approx_token_count) -> FinetuneExample:
    # The default sep2 contains sep1 ("###" holds "##"), so count sep1 in the
    # body that precedes the terminating sep2.
    if not prompt.endswith(cfg.sep2) or prompt[:-len(cfg.sep2)].count(cfg.sep1) != 1:
        raise FormatError("prompt does not follow SRC sep1 GTr sep2")
    if not completion.endswith(cfg.eos) or not completion.startswith(cfg.completion_prefix):
        raise FormatError("completion does not follow prefix HUM eos")
    return FinetuneExample(prompt, completion, (counter(prompt), counter(completion)))


def split_example(ex: FinetuneExample, cfg: PosteditConfig = PosteditConfig()) -> tuple[str, str, str]:
    """Inverse of ``format_example``: recover (src, gtr, hum)."""
    head = ex.prompt[:-len(cfg.sep2)]
    src, gtr = head.split(cfg.sep1)
    hum = ex.completion[len(cfg.completion_prefix):-len(cfg.eos)]
    return src, gtr, hum


def write_finetune_file(examples: Iterable[FinetuneExample], fh: IO[str]) -> None:
    for ex in examples:
        fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def read_finetune_file(fh: IO[str], cfg: PosteditConfig = PosteditConfig(),
                       counter: TokenCounter = approx_token_count) -> list[FinetuneExample]:
    out = []
    for line in fh:
        if line.strip():
            obj = json.loads(line)
            if set(obj) != {"prompt", "completion"}:
                raise FormatError(f"unexpected keys {sorted(obj)}")
            out.append(parse_example(obj["prompt"], obj["completion"], cfg, counter))
    return out


def job_config(training_file: str, model: str = "davinci") -> dict:
    """Provider-side fine-tuning settings used for the post-editing model."""
    return {
        "training_file": training_file,
        "model": model,
        "n_epochs": 2,
        "batch_size": 32,
        "learning_rate_multiplier": 0.2,
        "prompt_loss_weight": 0.1,
    }


def select_reference(record: AlignmentRecord, bleu_fn: BleuFn) -> tuple[str, str]:
    """The reference with the highest BLEU against the machine translation.

    Ties go to the lexicographically smallest translator id.
    """
    if not record.hums:
        raise ValueError("record has no references")
    scored = [(-bleu_fn(h.text, [record.gtr]), h.translator_id, h.text) for h in record.hums]
    _, tid, text = min(scored)
    return tid, text


def nearest_rank(sorted_values: Sequence[float], pct: float) -> float:
    """Nearest-rank percentile: value at 1-based rank ceil(pct/100 * N)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n - 1e-9))
    return sorted_values[min(rank, n) - 1]


@dataclass
class PrepareStats:
    input: int = 0
    percentile: int = 0
    token_budget: int = 0
    sampling: int = 0
    output: int = 0

    def discarded(self) -> dict[str, int]:
        return {"percentile": self.percentile, "token budget": self.token_budget,
                "sample size": self.sampling}


def percentile_bounds(scores: Sequence[float], cfg: PosteditConfig) -> tuple[float, float]:
    """Lower and upper cut points.

    The low cut is the nearest-rank ``percentile_low`` value; the high cut is
    the nearest-rank ``100 - percentile_high`` value counted from the top, so
    each tail holds the same number of records when scores are distinct.
    """
    asc = sorted(scores)
    desc = asc[::-1]
    return nearest_rank(asc, cfg.percentile_low), nearest_rank(desc, 100.0 - cfg.percentile_high)


def prepare_finetune(records: Sequence[AlignmentRecord], cfg: PosteditConfig, bleu_fn: BleuFn,
                     counter: TokenCounter = approx_token_count,
                     stats: PrepareStats | None = None) -> list[FinetuneExample]:
    """Turn train-split records into fine-tuning examples.

    Drops records whose aggregated machine-translation BLEU sits at or beyond
    either percentile cut, then those whose formatted example exceeds the
    token budget, then samples ``sample_size`` with the configured seed.
    """
    stats = stats if stats is not None else PrepareStats()
    stats.input = len(records)
    if not records:
        raise ValueError("no training records")
    recs = sorted(records, key=lambda r: (r.doc_id, r.source_index))
    s_cand = [aggregate_scores(r, bleu_fn, "bleu").s_cand for r in recs]
    lo, hi = percentile_bounds(s_cand, cfg)
    middle = [r for r, s in zip(recs, s_cand) if lo < s < hi]
    stats.percentile = len(recs) - len(middle)

    formatted = []
    for rec in middle:
        tid, hum = select_reference(rec, bleu_fn)
        ex = format_example(rec.src, rec.gtr, hum, cfg, counter, (rec.doc_id, rec.source_index, tid))
        if ex.total_tokens <= cfg.token_budget:
            formatted.append(ex)
    stats.token_budget = len(middle) - len(formatted)
    if not formatted:
        raise ValueError("no examples survive filtering")

    k = min(cfg.sample_size, len(formatted))
    rng = random.Random(derive_seed(cfg.seed, "prep-finetune"))
    chosen = sorted(rng.sample(range(len(formatted)), k))
    stats.sampling = len(formatted) - k
    stats.output = k
    return [formatted[i] for i in chosen]


# -- completion service -------------------------------------------------------

@dataclass(frozen=True)
class Completion:
    text: str
    tokens_in: int = 0
    tokens_out: int = 0


class CompletionClient(Protocol):
    def complete(self, prompt: str, stop: str, top_p: float, max_tokens: int,
                 idempotency_key: str | None = None) -> Completion: ...


class CostMeter:
    """Thread-safe usage log; repeated idempotency keys are billed once."""

    def __init__(self, unit_price: float = 0.0, log: IO[str] | None = None):
        self.unit_price = unit_price
        self.log = log
        self.tokens_in = 0
        self.tokens_out = 0
        self._seen: set[str] = set()
        self._lock = threading.Lock()

    def record(self, key: str, tokens_in: int, tokens_out: int) -> bool:
        with self._lock:
            if key in self._seen:
                return False
            self._seen.add(key)
            self.tokens_in += tokens_in
            self.tokens_out += tokens_out
            if self.log is not None:
                self.log.write(json.dumps({"tokens_in": tokens_in, "tokens_out": tokens_out,
                                           "unit_price": self.unit_price}) + "\n")
            return True

    @property
    def cost(self) -> float:
        return (self.tokens_in + self.tokens_out) / 1000.0 * self.unit_price


class HttpCompletionClient:
    """Client for an HTTPS completion endpoint.

    Request body: ``{model, prompt, stop, top_p, max_tokens}``; the response
    is read from ``choices[0].text`` and ``usage``. Transport errors, 429 and
    5xx are raised as transient so the caller's retry policy applies.
    """

    def __init__(self, url: str, model: str, token_env: str = "LITFORGE_API_TOKEN",
                 http: httpx.Client | None = None, meter: CostMeter | None = None, timeout: float = 120.0):
        self.url = url
        self.model = model
        token = os.environ.get(token_env)
        self.headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.http = http or httpx.Client(timeout=timeout)
        self.meter = meter or CostMeter()

    def complete(self, prompt: str, stop: str, top_p: float, max_tokens: int,
                 idempotency_key: str | None = None) -> Completion:
        key = idempotency_key or uuid.uuid4().hex
        body = {"model": self.model, "prompt": prompt, "stop": stop, "top_p": top_p, "max_tokens": max_tokens}
        try:
            resp = self.http.post(self.url, json=body, headers={**self.headers, "Idempotency-Key": key})
        except httpx.TransportError as exc:
            raise TransientServiceError(f"network error: {exc}") from exc
        if resp.status_code != 200:
            raise classify_status(resp.status_code, resp.text)
        try:
            obj = resp.json()
            text = obj["choices"][0]["text"]
            usage = obj.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed completion response: {exc}") from exc
        if not isinstance(text, str):
            raise ProtocolError("completion text is not a string")
        if stop and stop in text:
            text = text[:text.index(stop)]
        out = Completion(text, int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
        self.meter.record(key, out.tokens_in, out.tokens_out)
        return out


@dataclass(frozen=True)
class PosteditResult:
    text: str
    retries: int
    tokens_in: int
    tokens_out: int


def postedit_paragraph(client: CompletionClient, src: str, gtr: str, cfg: PosteditConfig = PosteditConfig(),
                       counter: TokenCounter = approx_token_count, retry: RetryPolicy = RetryPolicy(),
                       sleep=None) -> PosteditResult:
    """Post-edit one machine-translated paragraph.

    Over-budget prompts fail locally before any request is made. The same
    idempotency key is reused across retries of one paragraph.
    """
    prompt = build_prompt(src, gtr, cfg)
    used = counter(prompt)
    if used >= cfg.token_budget:
        raise OverBudgetError(f"prompt uses {used} tokens, budget is {cfg.token_budget}")
    key = uuid.uuid4().hex
    call = lambda: client.complete(prompt, cfg.eos, cfg.top_p, cfg.token_budget - used, key)  # noqa: E731
    kwargs = {"sleep": sleep} if sleep is not None else {}
    result, retries = call_with_retry(call, retry, **kwargs)
    return PosteditResult(result.text.strip(), retries, result.tokens_in, result.tokens_out)


def postedit_batch(client: CompletionClient, items: Sequence[tuple[str, str]],
                   cfg: PosteditConfig = PosteditConfig(), counter: TokenCounter = approx_token_count,
                   retry: RetryPolicy = RetryPolicy(), concurrency: int = 4, sleep=None) -> list[PosteditResult]:
    """Post-edit many (src, gtr) pairs; results follow input order."""
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        futures = [pool.submit(postedit_paragraph, client, s, g, cfg, counter, retry, sleep) for s, g in items]
        return [f.result() for f in futures]


__all__ = [
    "Completion", "CompletionClient", "CostMeter", "FinetuneExample", "FormatError",
    "HttpCompletionClient", "OverBudgetError", "PosteditConfig", "PosteditResult", "PrepareStats",
    "ServiceError", "approx_token_count", "format_example", "job_config", "nearest_rank",
    "parse_example", "percentile_bounds", "postedit_batch", "postedit_paragraph", "prepare_finetune",
    "read_finetune_file", "select_reference", "split_example", "write_finetune_file",
]
