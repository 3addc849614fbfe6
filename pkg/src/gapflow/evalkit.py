"""Exact match, the binary correctness reward, cost-of-pass and run aggregates."""

from __future__ import annotations

import csv
import json
import string
import unicodedata
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .trace import SCHEMA_VERSION, Rollout

_ARTICLES = {"a", "an", "the"}


class EmptyRecordSet(ValueError):
    pass


def _is_punct(ch: str) -> bool:
    return ch in string.punctuation or unicodedata.category(ch).startswith("P")


def normalize_answer(text: str) -> str:
    """Lowercase, delete punctuation, collapse whitespace, drop a leading article."""
    text = "".join(ch for ch in text.lower() if not _is_punct(ch))
    tokens = text.split()
    if tokens and tokens[0] in _ARTICLES:
        tokens = tokens[1:]
    return " ".join(tokens)


def exact_match(prediction: str, gold: Sequence[str]) -> int:
    """1 if any ``|``-separated candidate in ``prediction`` matches any gold."""
    if not gold:
        raise ValueError("gold answers must be non-empty")
    golds = {normalize_answer(g) for g in gold}
    candidates = [prediction] if "|" not in prediction else prediction.split("|")
    return int(any(normalize_answer(c) in golds for c in candidates))


def reward(rollout: Rollout, gold: Sequence[str]) -> int:
    """Binary correctness of the final answer; 0 when the rollout never answered."""
    event = rollout.answer_event()
    if event is None:
        return 0
    return exact_match(event.body, gold)


def cost_of_pass(n_in: float, n_out: float, success_rate: float) -> float | None:
    """Expected tokens per correct solution; ``None`` when nothing succeeds."""
    if not 0.0 <= success_rate <= 1.0:
        raise ValueError("success_rate must lie in [0, 1]")
    if success_rate == 0:
        return None
    return (n_in + n_out) / success_rate


@dataclass
class ProblemRecord:
    problem_id: str
    em: int
    reward: int
    n_in: int
    n_out: int
    turns: int
    wall_time: float
    termination: str = "answered"
    cost_of_pass: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        if self.cost_of_pass is None and self.em:
            self.cost_of_pass = cost_of_pass(self.n_in, self.n_out, 1.0)

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)}, ensure_ascii=False)


@dataclass
class EvalReport:
    records: list[ProblemRecord]
    mean_em: float
    mean_turns: float
    mean_response_length: float
    mean_input_length: float
    mean_wall_time: float
    cost_of_pass: float | None
    turn_cdf: list[tuple[int, float]]
    length_histogram: list[tuple[int, int, int]] = field(default_factory=list)
    terminations: dict[str, int] = field(default_factory=dict)
    skipped: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "problems": len(self.records),
            "mean_em": self.mean_em,
            "mean_turns": self.mean_turns,
            "mean_response_length": self.mean_response_length,
            "mean_input_length": self.mean_input_length,
            "mean_wall_time": self.mean_wall_time,
            "cost_of_pass": self.cost_of_pass,
            "turn_cdf": [{"turns": t, "fraction": f} for t, f in self.turn_cdf],
            "length_histogram": [
                {"start": lo, "end": hi, "count": c} for lo, hi, c in self.length_histogram
            ],
            "terminations": self.terminations,
            "skipped": self.skipped,
        }

    def write(self, out_dir: str | Path) -> None:
        """report.json, records.jsonl, turn_cdf.csv and length_hist.csv."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.summary(), indent=2) + "\n", encoding="utf-8")
        with open(out / "records.jsonl", "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(record.to_json() + "\n")
        with open(out / "turn_cdf.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["turns", "fraction_solved"])
            writer.writerows(self.turn_cdf)
        with open(out / "length_hist.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["length_start", "length_end", "count"])
            writer.writerows(self.length_histogram)


def turn_cdf(records: Sequence[ProblemRecord]) -> list[tuple[int, float]]:
    """Fraction of all problems solved (em=1) within ``t`` turns, t = 1..max."""
    horizon = max([1] + [r.turns for r in records])
    n = len(records)
    return [(t, sum(1 for r in records if r.em and r.turns <= t) / n) for t in range(1, horizon + 1)]


def length_histogram(lengths: Iterable[int], bin_width: int = 100) -> list[tuple[int, int, int]]:
    counts: dict[int, int] = {}
    for length in lengths:
        counts[length // bin_width] = counts.get(length // bin_width, 0) + 1
    if not counts:
        return []
    return [(b * bin_width, (b + 1) * bin_width, counts.get(b, 0)) for b in range(min(counts), max(counts) + 1)]


def aggregate(
    records: Sequence[ProblemRecord], bin_width: int = 100, skipped: list[dict] | None = None
) -> EvalReport:
    if not records:
        raise EmptyRecordSet("no records to aggregate")
    n = len(records)
    mean_em = sum(r.em for r in records) / n
    mean_in = sum(r.n_in for r in records) / n
    mean_out = sum(r.n_out for r in records) / n
    terminations: dict[str, int] = {}
    for r in records:
        terminations[r.termination] = terminations.get(r.termination, 0) + 1
    return EvalReport(
        records=list(records),
        mean_em=mean_em,
        mean_turns=sum(r.turns for r in records) / n,
        mean_response_length=mean_out,
        mean_input_length=mean_in,
        mean_wall_time=sum(r.wall_time for r in records) / n,
        cost_of_pass=cost_of_pass(mean_in, mean_out, mean_em),
        turn_cdf=turn_cdf(records),
        length_histogram=length_histogram((r.n_out for r in records), bin_width),
        terminations=terminations,
        skipped=list(skipped or []),
    )
