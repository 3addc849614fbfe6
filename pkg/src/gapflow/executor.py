"""Plan, then execute the plan level by level with parallel tool batches, then answer.

Every executed batch is one turn no matter how many calls it holds; the
planning and answering generations do not count as turns.
"""

from __future__ import annotations

import logging
import threading
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

from .graph import DependencyGraph, ExecutionPlan, GraphError, resolve_query, topological_levels
from .policies import Generation, Policy, PolicyError
from .tokens import Tokenizer, whitespace_tokens
from .tools import Tool, ToolFatal, ToolRegistry, ToolResult
from .trace import (
    DEFAULT_MAX_BODY,
    EmptySearch,
    EventKind,
    Rollout,
    RolloutRecord,
    TraceError,
    TraceEvent,
    close_tag,
    join_queries,
    parse_stream,
    render_observation_body,
)

log = logging.getLogger(__name__)

PLAN_STOP = ("</plan>", "</graph>")
SEARCH_STOP = ("</search>", "</tool>")
ANSWER_STOP = ("</answer>",)


class Termination(str, Enum):
    ANSWERED = "answered"
    BUDGET_EXHAUSTED = "budget_exhausted"
    PLAN_PARSE_FAILURE = "plan_parse_failure"
    POLICY_ERROR = "policy_error"
    TOOL_FATAL = "tool_fatal"


@dataclass(frozen=True)
class RunConfig:
    max_turns: int = 4
    max_tokens: int = 512
    tool_timeout: float | None = 30.0
    mode: str = "interactive"
    parallelism: int = 8
    schedule: str = "levels"
    binding_chars: int = 512
    max_body: int = DEFAULT_MAX_BODY
    search_tool: str = "search"

    def __post_init__(self) -> None:
        if self.max_turns < 1:
            raise ValueError("max_turns must be >= 1")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.mode not in ("interactive", "static"):
            raise ValueError(f"mode must be 'interactive' or 'static', not {self.mode!r}")
        if self.schedule not in ("levels", "sequential"):
            raise ValueError(f"schedule must be 'levels' or 'sequential', not {self.schedule!r}")
        if self.tool_timeout is not None and self.tool_timeout <= 0:
            raise ValueError("tool_timeout must be positive")


@dataclass
class Batch:
    """One executed turn: the plan level it served and the calls it made."""

    level: tuple[str, ...]
    calls: list[tuple[str, str]]
    results: list[ToolResult]

    @property
    def divergent(self) -> bool:
        return len(self.calls) != len(self.level)


@dataclass
class RunResult:
    rollout: Rollout
    termination: Termination
    final_answer: list[str] | None = None
    turns_used: int = 0
    wall_time: float = 0.0
    error: str | None = None
    graph: DependencyGraph | None = None
    plan: ExecutionPlan | None = None
    batches: list[Batch] = field(default_factory=list)

    @property
    def answered(self) -> bool:
        return self.termination is Termination.ANSWERED

    @property
    def divergent(self) -> bool:
        """True when some batch width differed from its plan level's width."""
        return any(b.divergent for b in self.batches)

    def to_record(self, correct: bool | None = None, golds: list[str] | None = None) -> RolloutRecord:
        return RolloutRecord(self.rollout, self.final_answer, correct, golds)


def _invoke(tool: Tool, query: str, timeout: float | None) -> ToolResult:
    start = time.monotonic()
    box: dict[str, object] = {}

    def target() -> None:
        try:
            if tool.spec.concurrency_safe:
                box["out"] = tool(query)
            else:
                with tool.lock:
                    box["out"] = tool(query)
        except Exception as exc:  # per-call failures become observation text
            box["exc"] = exc

    if timeout is None:
        target()
    else:
        # a timed-out call keeps running in its daemon thread; its slot is released
        worker = threading.Thread(target=target, daemon=True)
        worker.start()
        worker.join(timeout)
        if worker.is_alive():
            return ToolResult.failure(tool.name, query, "timeout", time.monotonic() - start)
    elapsed = time.monotonic() - start
    if "exc" in box:
        exc = box["exc"]
        return ToolResult.failure(tool.name, query, f"{type(exc).__name__}: {exc}", elapsed)
    out = box["out"]
    return ToolResult(tool.name, query, out.text, True, out.label, elapsed)


def execute_batch(
    calls: Sequence[tuple[str, str]],
    tools: ToolRegistry,
    timeout: float | None = 30.0,
    cap: int = 8,
) -> list[ToolResult]:
    """Run ``(tool_name, query)`` calls concurrently, at most ``cap`` at a time.

    Results come back in input order. A failing or timed-out call yields an
    error-text result in its slot; only an unknown tool raises ToolFatal.
    """
    if not calls:
        raise ValueError("execute_batch needs at least one call")
    if cap < 1:
        raise ValueError("cap must be >= 1")
    resolved = [(tools.get(name), query) for name, query in calls]
    if len(resolved) == 1 or cap == 1:
        return [_invoke(tool, query, timeout) for tool, query in resolved]
    with ThreadPoolExecutor(max_workers=min(cap, len(resolved))) as pool:
        futures = [pool.submit(_invoke, tool, query, timeout) for tool, query in resolved]
        return [f.result() for f in futures]


class _Finished(Exception):
    def __init__(self, termination: Termination, error: str | None = None) -> None:
        self.termination = termination
        self.error = error


class Executor:
    """Drives one policy through plan -> level-wise execution -> answer."""

    def __init__(
        self,
        tools: ToolRegistry,
        config: RunConfig | None = None,
        tokenizer: Tokenizer = whitespace_tokens,
    ) -> None:
        self.tools = tools
        self.config = config or RunConfig()
        self.tokenizer = tokenizer

    def run(self, question: str, policy: Policy) -> RunResult:
        start = time.monotonic()
        result = RunResult(Rollout(question), Termination.POLICY_ERROR)
        try:
            self._run(question, policy, result)
        except _Finished as done:
            result.termination = done.termination
            result.error = done.error
        result.wall_time = time.monotonic() - start
        if result.termination is not Termination.ANSWERED:
            result.final_answer = None
        return result

    # -- generation ---------------------------------------------------

    def _generate(self, question: str, policy: Policy, rollout: Rollout, stop: Sequence[str]) -> list[TraceEvent]:
        context = f"{question}\n{rollout.text()}" if rollout.events else question
        try:
            out = policy.generate(question, rollout, list(stop), self.config.max_tokens)
        except PolicyError as exc:
            raise _Finished(Termination.POLICY_ERROR, str(exc)) from exc
        gen = out if isinstance(out, Generation) else Generation(str(out))
        rollout.n_in += gen.n_in if gen.n_in is not None else self.tokenizer(context)
        rollout.n_out += gen.n_out if gen.n_out is not None else self.tokenizer(gen.text)
        try:
            events = parse_stream(gen.text, self.config.max_body)
        except TraceError as exc:
            raise _Finished(Termination.POLICY_ERROR, f"unparseable generation: {exc}") from exc
        kept = []
        for event in events:
            if event.partial:
                # servers drop the stop marker they halted on
                if close_tag(event.tag) in stop:
                    event = TraceEvent(event.kind, event.body, event.tag)
                else:
                    log.warning("dropping unclosed <%s> block", event.tag)
                    continue
            if event.kind is EventKind.OBSERVATION:
                log.warning("dropping policy-authored observation")
                continue
            kept.append(event)
            if event.kind is EventKind.ANSWER:
                break
        rollout.events.extend(kept)
        return kept

    # -- phases -------------------------------------------------------

    def _run(self, question: str, policy: Policy, result: RunResult) -> None:
        cfg = self.config
        rollout = result.rollout

        events = self._generate(question, policy, rollout, PLAN_STOP)
        plans = [e for e in events if e.kind is EventKind.PLAN]
        if not plans:
            raise _Finished(Termination.PLAN_PARSE_FAILURE, "no plan in first generation")
        try:
            graph = plans[-1].parsed
            plan = topological_levels(graph)
        except (TraceError, GraphError) as exc:
            raise _Finished(Termination.PLAN_PARSE_FAILURE, str(exc)) from exc
        if cfg.schedule == "sequential":
            plan = plan.sequential()
        result.graph, result.plan = graph, plan
        try:
            needed = {n.tool_name for n in graph.nodes} if cfg.mode == "static" else {cfg.search_tool}
            for name in sorted(needed):
                self.tools.get(name)
        except ToolFatal as exc:
            raise _Finished(Termination.TOOL_FATAL, str(exc)) from exc

        bindings: dict[str, str] = {}
        exhausted = False
        for level in plan.levels:
            if result.turns_used >= cfg.max_turns:
                exhausted = True
                break
            if cfg.mode == "interactive":
                events = self._generate(question, policy, rollout, SEARCH_STOP)
                if self._answered(events, result):
                    return
                searches = [e for e in events if e.kind is EventKind.SEARCH]
                if not searches:
                    continue
                try:
                    queries = searches[-1].parsed
                except EmptySearch:
                    queries = []
                calls = [(cfg.search_tool, q) for q in queries]
                results = self._execute(calls)
                labels = [r.label for r in results]
            else:
                nodes = [graph[node_id] for node_id in level]
                try:
                    calls = [(n.tool_name, resolve_query(n, bindings)) for n in nodes]
                except GraphError as exc:
                    raise _Finished(Termination.TOOL_FATAL, str(exc)) from exc
                rollout.events.append(TraceEvent(EventKind.SEARCH, join_queries([q for _, q in calls])))
                results = self._execute(calls)
                for node, res in zip(nodes, results):
                    bindings[node.id] = res.text[: cfg.binding_chars]
                labels = list(level)
            body = render_observation_body([r.text for r in results], labels)
            rollout.events.append(TraceEvent(EventKind.OBSERVATION, body))
            result.batches.append(Batch(tuple(level), calls, results))
            result.turns_used += 1

        # synthesis also runs after an exhausted budget: one forced attempt
        events = self._generate(question, policy, rollout, ANSWER_STOP)
        if self._answered(events, result):
            return
        if exhausted:
            raise _Finished(Termination.BUDGET_EXHAUSTED, f"turn budget {cfg.max_turns} reached before an answer")
        raise _Finished(Termination.POLICY_ERROR, "no answer after synthesis")

    def _answered(self, events: list[TraceEvent], result: RunResult) -> bool:
        for event in events:
            if event.kind is EventKind.ANSWER:
                result.final_answer = event.parsed
                result.termination = Termination.ANSWERED
                return True
        return False

    def _execute(self, calls: list[tuple[str, str]]) -> list[ToolResult]:
        if not calls:
            return []
        cfg = self.config
        try:
            return execute_batch(calls, self.tools, cfg.tool_timeout, cfg.parallelism)
        except ToolFatal as exc:
            raise _Finished(Termination.TOOL_FATAL, str(exc)) from exc


def run(
    question: str,
    policy: Policy,
    tools: ToolRegistry,
    config: RunConfig | None = None,
    tokenizer: Tokenizer = whitespace_tokens,
) -> RunResult:
    return Executor(tools, config, tokenizer).run(question, policy)
