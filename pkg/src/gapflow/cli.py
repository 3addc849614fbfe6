"""Command-line entry point: run, eval, filter and corpus subcommands.

Exit codes:
  0  success (run: answered)
  1  unexpected error
  2  usage or configuration error
  3  turn budget exhausted before an answer
  4  no parseable plan
  5  policy error
  6  tool registry failure
  7  ratio balancing impossible (one class empty)
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .datasynth import OneClassEmpty, curate, export_sft, load_trajectories
from .evalkit import ProblemRecord, aggregate, exact_match
from .executor import Executor, RunConfig, RunResult, Termination
from .policies import HttpPolicy, Policy, ScriptedPolicy
from .tokens import get_tokenizer
from .tools import Corpus, CorpusError, LexicalIndex, ToolRegistry, default_registry
from .trace import SCHEMA_VERSION, RolloutRecord

log = logging.getLogger("gapflow")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CODES = {
    Termination.ANSWERED: 0,
    Termination.BUDGET_EXHAUSTED: 3,
    Termination.PLAN_PARSE_FAILURE: 4,
    Termination.POLICY_ERROR: 5,
    Termination.TOOL_FATAL: 6,
}
EXIT_ONE_CLASS = 7


class ConfigError(ValueError):
    pass


@dataclass
class AppConfig:
    endpoint: str | None = None
    model: str = "default"
    api_key_env: str = "GAPFLOW_API_KEY"
    corpus: str | None = None
    search_k: int = 1
    tokenizer: str = "whitespace"
    out_dir: str = "gapflow-out"
    run: RunConfig = field(default_factory=RunConfig)

    @classmethod
    def load(cls, path: str | None) -> AppConfig:
        if path is None:
            return cls()
        try:
            doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        run_doc = doc.pop("run", {}) or {}
        known = {f.name for f in fields(cls)} - {"run"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        run_known = {f.name for f in fields(RunConfig)}
        if set(run_doc) - run_known:
            raise ConfigError(f"unknown run config keys: {sorted(set(run_doc) - run_known)}")
        try:
            return cls(**doc, run=RunConfig(**run_doc))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def _apply_flags(cfg: AppConfig, args: argparse.Namespace) -> AppConfig:
    updates = {k: getattr(args, k) for k in ("endpoint", "model", "corpus", "tokenizer", "out_dir") if getattr(args, k, None) is not None}
    run_updates = {
        k: getattr(args, k)
        for k in ("mode", "max_turns", "parallelism", "schedule", "tool_timeout", "max_tokens")
        if getattr(args, k, None) is not None
    }
    try:
        return replace(cfg, **updates, run=replace(cfg.run, **run_updates))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _tools(cfg: AppConfig) -> ToolRegistry:
    if not cfg.corpus:
        raise ConfigError("no corpus configured: pass --corpus FILE.jsonl (build one with 'gapflow corpus build')")
    if not Path(cfg.corpus).is_file():
        raise ConfigError(f"corpus file not found: {cfg.corpus}")
    try:
        corpus = Corpus.from_jsonl(cfg.corpus)
    except CorpusError as exc:
        raise ConfigError(f"bad corpus: {exc}") from exc
    return default_registry(corpus, cfg.search_k)


def _http_policy(cfg: AppConfig) -> HttpPolicy:
    if not cfg.endpoint:
        raise ConfigError("no policy endpoint: pass --endpoint URL or --scripted FILE")
    return HttpPolicy.from_env(cfg.endpoint, cfg.model, cfg.api_key_env, max_tokens=cfg.run.max_tokens)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--out", dest="out_dir", help="output directory")
    p.add_argument("--corpus", help="corpus JSON-lines file")
    p.add_argument("--endpoint", help="chat-completions URL (key read from $GAPFLOW_API_KEY)")
    p.add_argument("--model")
    p.add_argument("--tokenizer", help="'whitespace' or 'hf:<model>'")
    p.add_argument("--mode", choices=["interactive", "static"])
    p.add_argument("--schedule", choices=["levels", "sequential"])
    p.add_argument("--max-turns", type=int)
    p.add_argument("--parallelism", type=int)
    p.add_argument("--max-tokens", type=int)
    p.add_argument("--tool-timeout", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gapflow", description="graph-planned parallel tool agent runtime")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="answer one question")
    p.add_argument("question")
    p.add_argument("--scripted", help="JSON-lines file of generation chunks")
    p.add_argument("--gold", action="append", help="gold answer (repeatable)")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a JSON-lines dataset of {question, golds}")
    p.add_argument("dataset")
    p.add_argument("--jobs", type=int, default=4)
    _add_common(p)

    p = sub.add_parser("filter", help="curate trajectories for SFT")
    p.add_argument("input")
    p.add_argument("--out", dest="out_dir", default=None)
    p.add_argument("--config")
    p.add_argument("--tokenizer")
    p.add_argument("--min-searches", type=int, default=3)
    p.add_argument("--max-length", type=int, default=2000)
    p.add_argument("--parallel-frac", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-sft", action="store_true", help="also write sft.jsonl with loss masks")

    p = sub.add_parser("corpus", help="build or inspect a corpus")
    csub = p.add_subparsers(dest="corpus_command", required=True)
    b = csub.add_parser("build", help="import a directory of .txt files")
    b.add_argument("source")
    b.add_argument("output")
    b.add_argument("--pattern", default="*.txt")
    i = csub.add_parser("inspect", help="print corpus statistics and optionally search it")
    i.add_argument("corpus_file")
    i.add_argument("--query")
    i.add_argument("-k", type=int, default=3)
    return parser


def _summary(result: RunResult) -> dict[str, Any]:
    return {
        "schema_version": SCHEMA_VERSION,
        "termination": result.termination.value,
        "final_answer": result.final_answer,
        "turns_used": result.turns_used,
        "batch_widths": [len(b.calls) for b in result.batches],
        "divergent": result.divergent,
        "levels": [list(level) for level in result.plan.levels] if result.plan else None,
        "n_in": result.rollout.n_in,
        "n_out": result.rollout.n_out,
        "wall_time": round(result.wall_time, 6),
        "error": result.error,
    }


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _apply_flags(AppConfig.load(args.config), args)
    tools = _tools(cfg)
    policy: Policy = ScriptedPolicy.from_file(args.scripted) if args.scripted else _http_policy(cfg)
    executor = Executor(tools, cfg.run, get_tokenizer(cfg.tokenizer))
    result = executor.run(args.question, policy)
    correct = None
    if args.gold and result.final_answer is not None:
        correct = bool(exact_match(" | ".join(result.final_answer), args.gold))
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "rollout.jsonl").write_text(result.to_record(correct, args.gold).to_json() + "\n", encoding="utf-8")
    print(json.dumps(_summary(result), indent=2))
    return EXIT_CODES[result.termination]


def _load_dataset(path: str) -> tuple[list[tuple[int, dict]], list[dict]]:
    problems, skipped = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict) or not isinstance(row.get("question"), str):
                    raise ValueError("missing string field 'question'")
                golds = row.get("golds")
                if not isinstance(golds, list) or not golds or not all(isinstance(g, str) for g in golds):
                    raise ValueError("'golds' must be a non-empty list of strings")
            except ValueError as exc:
                skipped.append({"line": lineno, "error": str(exc)})
                log.warning("%s:%d skipped: %s", path, lineno, exc)
                continue
            problems.append((lineno, row))
    return problems, skipped


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _apply_flags(AppConfig.load(args.config), args)
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    tools = _tools(cfg)
    problems, skipped = _load_dataset(args.dataset)
    if not problems:
        raise ConfigError(f"no valid problems in {args.dataset}")
    if any("script" not in row for _, row in problems):
        _http_policy(cfg)  # fail fast when some problem needs the endpoint
    executor = Executor(tools, cfg.run, get_tokenizer(cfg.tokenizer))

    def solve(item: tuple[int, dict]) -> tuple[ProblemRecord, str]:
        lineno, row = item
        pid = str(row.get("id", lineno))
        policy = ScriptedPolicy(row["script"]) if "script" in row else _http_policy(cfg)
        try:
            result = executor.run(row["question"], policy)
        except Exception as exc:  # one bad problem must not abort the sweep
            log.exception("problem %s crashed", pid)
            return ProblemRecord(pid, 0, 0, 0, 0, 0, 0.0, "crashed", error=str(exc)), ""
        em = 0
        if result.final_answer is not None:
            em = exact_match(" | ".join(result.final_answer), row["golds"])
        record = ProblemRecord(
            pid, em, em, result.rollout.n_in, result.rollout.n_out, result.turns_used,
            result.wall_time, result.termination.value, error=result.error,
        )
        return record, result.to_record(bool(em), row["golds"]).to_json()

    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        outcomes = list(pool.map(solve, problems))
    report = aggregate([r for r, _ in outcomes], skipped=skipped)
    out = Path(cfg.out_dir)
    report.write(out)
    with open(out / "rollouts.jsonl", "w", encoding="utf-8") as fh:
        for _, line in outcomes:
            if line:
                fh.write(line + "\n")
    summary = report.summary()
    summary.pop("turn_cdf")
    summary.pop("length_histogram")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_filter(args: argparse.Namespace) -> int:
    cfg = AppConfig.load(args.config)
    out = Path(args.out_dir or cfg.out_dir)
    tokenizer = get_tokenizer(args.tokenizer or cfg.tokenizer)
    try:
        trajectories = load_trajectories(args.input, tokenizer)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectories from {args.input}: {exc}") from exc
    try:
        kept, manifest = curate(trajectories, args.min_searches, args.max_length, args.parallel_frac, args.seed)
    except OneClassEmpty as exc:
        print(
            f"error: {exc}. Lower --min-searches, raise --max-length, or add trajectories "
            "of the missing class (parallel = some search block with two or more queries).",
            file=sys.stderr,
        )
        return EXIT_ONE_CLASS
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "curated.jsonl", "w", encoding="utf-8") as fh:
        for t in kept:
            fh.write(RolloutRecord(t.rollout, t.rollout.final_answer(), None, t.gold).to_json() + "\n")
    if args.export_sft:
        with open(out / "sft.jsonl", "w", encoding="utf-8") as fh:
            for record in export_sft(kept):
                fh.write(record.to_json() + "\n")
    (out / "manifest.json").write_text(manifest.to_json() + "\n", encoding="utf-8")
    for warning in manifest.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    print(manifest.to_json())
    return EXIT_OK


def cmd_corpus(args: argparse.Namespace) -> int:
    if args.corpus_command == "build":
        source = Path(args.source)
        if not source.is_dir():
            raise ConfigError(f"not a directory: {source}")
        corpus = Corpus.from_directory(source, args.pattern)
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        corpus.to_jsonl(args.output)
        print(json.dumps({"documents": len(corpus), "output": args.output}))
        return EXIT_OK
    try:
        corpus = Corpus.from_jsonl(args.corpus_file)
    except (OSError, CorpusError) as exc:
        raise ConfigError(f"cannot load corpus: {exc}") from exc
    index = LexicalIndex(corpus)
    info: dict[str, Any] = {"documents": len(corpus), "vocabulary": index.vocabulary_size}
    if args.query:
        info["hits"] = [
            {"doc_id": h.doc_id, "title": h.title, "score": round(h.score, 6)}
            for h in index.search(args.query, args.k)
        ]
    print(json.dumps(info, indent=2))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "filter": cmd_filter, "corpus": cmd_corpus}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.debug("unexpected failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
