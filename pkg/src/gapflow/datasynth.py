"""Trajectory curation and SFT export with observation loss masks."""

from __future__ import annotations

import json
import logging
import random
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

from .evalkit import exact_match
from .executor import Executor, RunConfig
from .policies import PROMPT_TEMPLATE, Policy
from .tokens import Tokenizer, whitespace_tokens
from .tools import ToolRegistry
from .trace import SCHEMA_VERSION, EventKind, Rollout, RolloutRecord, TraceError, parse_stream, read_rollouts

log = logging.getLogger(__name__)


class OneClassEmpty(ValueError):
    """Ratio balancing needs both parallel and sequential trajectories."""


class SerializationMismatch(RuntimeError):
    pass


@dataclass
class Trajectory:
    rollout: Rollout
    gold: list[str]
    search_count: int
    uses_parallel: bool
    token_length: int

    @classmethod
    def from_rollout(
        cls, rollout: Rollout, gold: Sequence[str], tokenizer: Tokenizer = whitespace_tokens
    ) -> Trajectory:
        searches = rollout.search_events()
        parallel = any(len(_queries(e.body)) >= 2 for e in searches)
        return cls(rollout, list(gold), len(searches), parallel, tokenizer(rollout.text()))


def _queries(body: str) -> list[str]:
    return [q for q in (p.strip() for p in body.split("|")) if q]


def load_trajectories(path: str | Path, tokenizer: Tokenizer = whitespace_tokens) -> list[Trajectory]:
    out = []
    for record in read_rollouts(path):
        gold = record.golds if record.golds is not None else list(record.final_answer or [])
        out.append(Trajectory.from_rollout(record.rollout, gold, tokenizer))
    return out


def filter_complexity(t: Trajectory, min_searches: int = 3) -> bool:
    """Keep iff the trajectory used at least ``min_searches`` search blocks."""
    return t.search_count >= min_searches


def filter_length(t: Trajectory, max_tokens: int = 2000) -> bool:
    return t.token_length <= max_tokens


def _target(count: int, ratio: Fraction) -> int:
    # round half up, exact in rationals
    scaled = count * ratio
    return int(scaled + Fraction(1, 2))


def balance_ratio(ts: Sequence[Trajectory], parallel_frac: float = 0.6, seed: int = 0) -> list[Trajectory]:
    """Down-sample the over-represented class to reach ``parallel_frac``.

    The under-represented class is kept whole; the other is cut to the
    nearest integer of the ideal count with a seeded uniform sample.
    Survivors keep their input order.
    """
    if not 0 < parallel_frac < 1:
        raise ValueError("parallel_frac must lie strictly between 0 and 1")
    par = [i for i, t in enumerate(ts) if t.uses_parallel]
    seq = [i for i, t in enumerate(ts) if not t.uses_parallel]
    if not par or not seq:
        raise OneClassEmpty(
            f"need both classes to balance (parallel={len(par)}, sequential={len(seq)})"
        )
    frac = Fraction(parallel_frac).limit_denominator(10_000)
    par_per_seq = frac / (1 - frac)
    want_par = _target(len(seq), par_per_seq)
    rng = random.Random(seed)
    if want_par < len(par):
        keep = set(seq) | set(rng.sample(par, want_par))
    else:
        want_seq = min(len(seq), _target(len(par), 1 / par_per_seq))
        keep = set(par) | set(rng.sample(seq, want_seq))
    return [t for i, t in enumerate(ts) if i in keep]


@dataclass
class Manifest:
    input: int = 0
    dropped_complexity: int = 0
    dropped_length: int = 0
    dropped_ratio: int = 0
    kept: int = 0
    kept_parallel: int = 0
    kept_sequential: int = 0
    ratio_applied: bool = False
    settings: dict = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)}, indent=2)


def curate(
    ts: Sequence[Trajectory],
    min_searches: int = 3,
    max_tokens: int = 2000,
    parallel_frac: float = 0.6,
    seed: int = 0,
) -> tuple[list[Trajectory], Manifest]:
    """Complexity filter, length filter, then ratio balancing (last, so counts are final)."""
    manifest = Manifest(
        input=len(ts),
        settings={
            "min_searches": min_searches,
            "max_tokens": max_tokens,
            "parallel_frac": parallel_frac,
            "seed": seed,
        },
    )
    survivors = []
    for t in ts:
        if not filter_complexity(t, min_searches):
            manifest.dropped_complexity += 1
        elif not filter_length(t, max_tokens):
            manifest.dropped_length += 1
        else:
            survivors.append(t)
    if not survivors:
        msg = "no trajectories survived the complexity and length filters; ratio stage skipped"
        log.warning(msg)
        manifest.warnings.append(msg)
        kept = survivors
    else:
        kept = balance_ratio(survivors, parallel_frac, seed)
        manifest.ratio_applied = True
        manifest.dropped_ratio = len(survivors) - len(kept)
    manifest.kept = len(kept)
    manifest.kept_parallel = sum(1 for t in kept if t.uses_parallel)
    manifest.kept_sequential = manifest.kept - manifest.kept_parallel
    return kept, manifest


@dataclass(frozen=True)
class Span:
    start: int
    end: int


@dataclass
class SftRecord:
    """Prompt + rollout text; ``loss_mask`` spans are excluded from the loss."""

    text: str
    loss_mask: list[Span]
    prompt_chars: int = 0

    def masked_text(self) -> str:
        return "".join(self.text[s.start : s.end] for s in self.loss_mask)

    def to_json(self) -> str:
        return json.dumps(
            {
                "schema_version": SCHEMA_VERSION,
                "text": self.text,
                "loss_mask": [[s.start, s.end] for s in self.loss_mask],
            },
            ensure_ascii=False,
        )


def build_sft_record(rollout: Rollout, template: str = PROMPT_TEMPLATE, sep: str = "\n") -> SftRecord:
    prompt = template.format(question=rollout.question)
    pieces = [prompt]
    offset = len(prompt)
    spans = []
    for i, event in enumerate(rollout.events):
        if i:
            pieces.append(sep)
            offset += len(sep)
        block = event.render()
        if event.kind is EventKind.OBSERVATION:
            spans.append(Span(offset, offset + len(block)))
        pieces.append(block)
        offset += len(block)
    record = SftRecord("".join(pieces), spans, len(prompt))
    _check_alignment(record, rollout)
    return record


def _check_alignment(record: SftRecord, rollout: Rollout) -> None:
    observations = [e for e in rollout.events if e.kind is EventKind.OBSERVATION]
    try:
        body_ok = parse_stream(record.text[record.prompt_chars :]) == rollout.events
        mask_ok = parse_stream(record.masked_text()) == observations
    except TraceError as exc:
        raise SerializationMismatch(f"SFT text does not re-parse: {exc}") from exc
    if not body_ok:
        raise SerializationMismatch("re-parsed SFT text differs from the source rollout")
    if not mask_ok:
        raise SerializationMismatch("loss mask does not cover exactly the observation blocks")


def export_sft(ts: Iterable[Trajectory], template: str = PROMPT_TEMPLATE) -> list[SftRecord]:
    return [build_sft_record(t.rollout, template) for t in ts]


def synthesize(
    problems: Iterable[tuple[str, Sequence[str]]],
    policy_factory: Callable[[], Policy],
    tools: ToolRegistry,
    config: RunConfig | None = None,
    tokenizer: Tokenizer = whitespace_tokens,
) -> list[RolloutRecord]:
    """Run a (teacher) policy over questions and keep the rollouts with golds."""
    executor = Executor(tools, config, tokenizer)
    records = []
    for question, golds in problems:
        result = executor.run(question, policy_factory())
        answer = " | ".join(result.final_answer) if result.final_answer is not None else None
        correct = bool(exact_match(answer, golds)) if answer is not None else False
        records.append(result.to_record(correct, list(golds)))
    return records
