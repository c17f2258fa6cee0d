"""Command-line entry point: ``litforge <stage> [options]``.

Exit codes: 0 success, 1 input error, 2 upstream artifact missing,
3 external service failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .corpus import CorpusError, dumps
from .metrics import AdapterError
from .pipeline import (DEFAULT_STAGES, STAGES, PipelineConfig, PipelineError, fixture_books, read_score_pairs, run_pipeline)
from .service import ServiceError
from .stats import binomial_test, krippendorff_alpha, paired_bootstrap, wilcoxon_pratt

EXIT_OK, EXIT_INPUT, EXIT_UPSTREAM, EXIT_SERVICE = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON pipeline config")
    common.add_argument("--work-dir", help="artifact directory (overrides config)")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--force", action="store_true", help="rebuild stale cached artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="litforge", description="Literary translation corpus tools.")
    sub = p.add_subparsers(dest="command", required=True)
    ing = sub.add_parser("ingest", parents=[common], help="read book directories")
    ing.add_argument("--book", action="append", default=[], help="book directory (repeatable)")
    ing.add_argument("--fixture", action="store_true", help="use the bundled sample books")
    sub.add_parser("align", parents=[common], help="sentence-align human and machine translations")
    sub.add_parser("build", parents=[common], help="filter, merge, sample and split into a corpus")
    sc = sub.add_parser("score", parents=[common], help="per-language aggregate metric report")
    sc.add_argument("--metric", default=None, help="bleu or adapter:<path>")
    st = sub.add_parser("stats", parents=[common], help="statistical tests")
    st.add_argument("test", choices=["wilcoxon", "binomial", "alpha", "bootstrap"])
    st.add_argument("--input", help="TSV input (pairs for wilcoxon/bootstrap, raters x items for alpha)")
    st.add_argument("--successes", type=int)
    st.add_argument("--trials", type=int)
    st.add_argument("--p0", type=float, default=0.5)
    st.add_argument("--resamples", type=int, default=1000)
    st.add_argument("--method", default="auto", choices=["auto", "exact", "normal"])
    sub.add_parser("prep-finetune", parents=[common], help="write fine-tuning JSON lines")
    pe = sub.add_parser("postedit", parents=[common], help="post-edit the test split via a completion service")
    pe.add_argument("--endpoint", help="completion endpoint URL")
    sub.add_parser("report", parents=[common], help="combine score and stats artifacts")
    run = sub.add_parser("run", parents=[common], help="run several stages in order")
    run.add_argument("--book", action="append", default=[], help="book directory (repeatable)")
    run.add_argument("--fixture", action="store_true", help="use the bundled sample books")
    run.add_argument("--stages", default=",".join(DEFAULT_STAGES),
                     help=f"comma-separated subset of {','.join(STAGES)}")
    return p


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.work_dir:
        changes["work_dir"] = str(Path(args.work_dir).resolve())
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "book", None):
        changes["books"] = tuple(str(Path(b).resolve()) for b in args.book)
    if getattr(args, "fixture", False):
        changes["books"] = tuple(changes.get("books", ())) + tuple(fixture_books())
    if getattr(args, "metric", None):
        changes["score_metric"] = args.metric
    return dataclasses.replace(cfg, **changes)


def read_ratings(path: str | Path) -> list[list[str | None]]:
    """Raters as rows, items as columns; empty cells and ``NA`` are missing."""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append([None if c.strip() in ("", "NA") else c.strip() for c in line.split("\t")])
    return rows


def _stats(args, cfg: PipelineConfig) -> dict:
    if args.test == "binomial":
        if args.successes is None or args.trials is None:
            raise PipelineError("binomial needs --successes and --trials")
        return binomial_test(args.successes, args.trials, args.p0).to_json()
    default = Path(cfg.work_dir) / "scores.tsv"
    path = Path(args.input) if args.input else default
    if not path.exists():
        raise PipelineError(f"input {path} not found")
    if args.test == "alpha":
        return krippendorff_alpha(read_ratings(path)).to_json()
    pairs = read_score_pairs(path)
    if args.test == "wilcoxon":
        return wilcoxon_pratt(pairs, args.method).to_json()
    return paired_bootstrap(pairs, args.resamples, cfg.stage_seed("stats")).to_json()


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command == "stats":
            sys.stdout.write(dumps(_stats(args, cfg)).decode("utf-8"))
            return EXIT_OK
        if args.command == "run":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        else:
            stages = [args.command]
        kwargs = {}
        if args.command == "postedit" and args.endpoint:
            kwargs["endpoint"] = args.endpoint
        manifest = run_pipeline(cfg, stages, force=args.force, **kwargs)
        for name, rec in manifest.stages.items():
            state = "cached" if rec.cache_hit else f"{rec.seconds:.2f}s"
            print(f"{name}\t{state}\t{json.dumps(rec.counts, sort_keys=True)}")
        return EXIT_OK
    except (ServiceError, AdapterError) as exc:
        print(f"litforge: service failure: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except PipelineError as exc:
        print(f"litforge: {exc}", file=sys.stderr)
        return exc.exit_code
    except (CorpusError, ValueError, OSError, KeyError) as exc:
        print(f"litforge: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
