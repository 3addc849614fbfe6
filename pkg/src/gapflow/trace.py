"""The tagged rollout protocol.

A rollout is a flat sequence of ``<tag>body</tag>`` blocks drawn from six
kinds: think, plan, search, observation, reflection and answer. ``<graph>``
is accepted as an alternate plan tag (node/edge DSL) and ``<tool>`` as an
alternate search tag. Tags never nest; anything outside a recognised tag is
ignored.
"""

from __future__ import annotations

import json
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import Any

from .graph import DependencyGraph, TaskNode, validate_dag

SCHEMA_VERSION = 1
DEFAULT_MAX_BODY = 64 * 1024


class EventKind(str, Enum):
    THINK = "think"
    PLAN = "plan"
    SEARCH = "search"
    OBSERVATION = "observation"
    REFLECTION = "reflection"
    ANSWER = "answer"


TAG_KINDS: dict[str, EventKind] = {kind.value: kind for kind in EventKind}
TAG_KINDS["graph"] = EventKind.PLAN
TAG_KINDS["tool"] = EventKind.SEARCH

_TAG_RE = re.compile(r"<(/?)([a-z]+)>")
_MAX_TAG_LEN = max(len(t) for t in TAG_KINDS) + 3


class TraceError(ValueError):
    """Base class for protocol errors."""


class MalformedTag(TraceError):
    pass


class NestedTag(TraceError):
    pass


class EventTooLarge(TraceError):
    pass


class EmptySearch(TraceError):
    pass


class PlanError(TraceError):
    pass


class UnknownTaskReference(PlanError):
    pass


class DuplicateTaskId(PlanError):
    pass


class MalformedNodeElement(PlanError):
    pass


class UnknownToolSyntax(PlanError):
    pass


def close_tag(tag: str) -> str:
    return f"</{tag}>"


@dataclass(frozen=True)
class TraceEvent:
    """One tagged block. ``partial`` marks a trailing tag that was never closed."""

    kind: EventKind
    body: str
    tag: str = ""
    partial: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not self.tag:
            object.__setattr__(self, "tag", self.kind.value)
        elif TAG_KINDS.get(self.tag) is not self.kind:
            raise TraceError(f"tag <{self.tag}> cannot carry a {self.kind.value} event")

    @cached_property
    def parsed(self) -> Any:
        """Kind-specific payload, or ``None`` for think/reflection.

        Plan -> DependencyGraph, Search -> queries, Observation -> result
        texts, Answer -> answer strings. Parsing errors propagate.
        """
        if self.kind is EventKind.PLAN:
            if self.tag == "graph" or "<node" in self.body:
                return parse_graph_dsl(self.body)
            return parse_plan(self.body)
        if self.kind is EventKind.SEARCH:
            return split_queries(self.body)
        if self.kind is EventKind.OBSERVATION:
            return parse_observation(self.body)
        if self.kind is EventKind.ANSWER:
            return split_answers(self.body)
        return None

    def render(self) -> str:
        text = f"<{self.tag}>{self.body}"
        return text if self.partial else text + close_tag(self.tag)


class StreamParser:
    """Incremental scanner: feed text chunks, collect completed events.

    Holds back a trailing fragment that could be the start of a tag so a
    tag split across chunks is still recognised.
    """

    def __init__(self, max_body: int = DEFAULT_MAX_BODY) -> None:
        self.max_body = max_body
        self._pending = ""
        self._open: str | None = None
        self._body: list[str] = []
        self._body_len = 0

    @property
    def open_tag(self) -> str | None:
        return self._open

    def _append(self, text: str) -> None:
        if self._open is None or not text:
            return
        self._body.append(text)
        self._body_len += len(text)
        if self._body_len > self.max_body:
            raise EventTooLarge(f"<{self._open}> body exceeds {self.max_body} characters")

    def feed(self, chunk: str) -> list[TraceEvent]:
        text = self._pending + chunk
        events: list[TraceEvent] = []
        pos = 0
        for match in _TAG_RE.finditer(text):
            closing, name = match.group(1) == "/", match.group(2)
            self._append(text[pos : match.start()])
            pos = match.end()
            if name not in TAG_KINDS:
                self._append(match.group(0))
                continue
            if self._open is None:
                if closing:
                    raise MalformedTag(f"stray closing tag </{name}>")
                self._open, self._body, self._body_len = name, [], 0
            elif not closing:
                raise NestedTag(f"<{name}> opened inside <{self._open}>")
            elif name != self._open:
                raise MalformedTag(f"<{self._open}> closed by </{name}>")
            else:
                events.append(TraceEvent(TAG_KINDS[name], "".join(self._body), name))
                self._open, self._body, self._body_len = None, [], 0
        rest = text[pos:]
        lt = rest.rfind("<")
        if lt != -1 and ">" not in rest[lt:] and len(rest) - lt <= _MAX_TAG_LEN:
            self._append(rest[:lt])
            self._pending = rest[lt:]
        else:
            self._append(rest)
            self._pending = ""
        return events

    def finish(self) -> TraceEvent | None:
        """Flush held-back text; return the unclosed trailing event, if any."""
        self._append(self._pending)
        self._pending = ""
        if self._open is None:
            return None
        event = TraceEvent(TAG_KINDS[self._open], "".join(self._body), self._open, partial=True)
        self._open, self._body, self._body_len = None, [], 0
        return event


def parse_stream(text: str, max_body: int = DEFAULT_MAX_BODY) -> list[TraceEvent]:
    """Parse raw policy output into events, in order of appearance.

    An unclosed final tag yields a trailing event with ``partial=True``.
    """
    parser = StreamParser(max_body)
    events = parser.feed(text)
    tail = parser.finish()
    if tail is not None:
        events.append(tail)
    return events


def serialize_events(events: Iterable[TraceEvent], sep: str = "\n") -> str:
    return sep.join(event.render() for event in events)


def _split_bar(body: str) -> list[str]:
    return [piece.strip() for piece in body.split("|") if piece.strip()]


def split_queries(body: str) -> list[str]:
    """Split a search body on ``|`` into trimmed, non-empty queries."""
    queries = _split_bar(body)
    if not queries:
        raise EmptySearch("search contains no query")
    return queries


def split_answers(body: str) -> list[str]:
    return _split_bar(body)


def join_queries(queries: Sequence[str]) -> str:
    return " | ".join(queries)


# -- observations ---------------------------------------------------------

_DOC_HEADER_RE = re.compile(r"^Doc (\d+)(?: - (.*))?:$", re.MULTILINE)


def render_observation_body(
    results: Sequence[str], labels: Sequence[str | None] | None = None
) -> str:
    if not results:
        return ""
    if labels is None:
        labels = [None] * len(results)
    parts = []
    for i, (text, label) in enumerate(zip(results, labels), start=1):
        label = " ".join(label.split()) if label else ""
        header = f"Doc {i} - {label}:" if label else f"Doc {i}:"
        parts.append(f"{header}\n{text}\n")
    return "\n" + "".join(parts)


def render_observation(
    results: Sequence[str], labels: Sequence[str | None] | None = None
) -> str:
    """One observation block labelling each result ``Doc <n> - <label>:``."""
    return f"<observation>{render_observation_body(results, labels)}</observation>"


def parse_observation_items(body: str) -> list[tuple[int, str | None, str]]:
    """``(ordinal, label, text)`` triples; headers must count up from 1."""
    headers = []
    expected = 1
    for match in _DOC_HEADER_RE.finditer(body):
        if int(match.group(1)) == expected:
            headers.append(match)
            expected += 1
    if not headers:
        stripped = body.strip()
        return [(1, None, stripped)] if stripped else []
    items = []
    for i, match in enumerate(headers):
        end = headers[i + 1].start() if i + 1 < len(headers) else len(body)
        text = body[match.end() + 1 : end]
        if text.endswith("\n"):
            text = text[:-1]
        items.append((i + 1, match.group(2), text))
    return items


def parse_observation(body: str) -> list[str]:
    return [text for _, _, text in parse_observation_items(body)]


# -- plan text format -----------------------------------------------------

_FIELD_RE = re.compile(r"(task\s*id|description|dependencies|depends\s*on)\s*:", re.IGNORECASE)
_HEADER_RE = re.compile(r"^\s*[-*]?\s*(task\s*[a-z0-9_]+)\s*[:.)]\s*(.*)$", re.IGNORECASE)
_BULLET_RE = re.compile(r"^\s*(?:[-*]\s*)?")
_NONE_VALUES = {"", "none", "n/a", "na", "-", "no", "nothing", "[]"}


def _norm_id(raw: str) -> str:
    return re.sub(r"\s+", "", raw.strip().rstrip(",.;"))


def _line_fields(line: str) -> list[tuple[str, str]] | None:
    stripped = _BULLET_RE.sub("", line, count=1)
    matches = list(_FIELD_RE.finditer(stripped))
    if not matches or matches[0].start() != 0:
        return None
    fields = []
    for i, match in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(stripped)
        key = re.sub(r"\s+", " ", match.group(1).lower())
        value = stripped[match.end() : end].strip().rstrip(",").strip()
        fields.append((key, value))
    return fields


def _split_refs(value: str) -> list[str]:
    if value.strip().lower() in _NONE_VALUES:
        return []
    pieces = re.split(r",|;|&|\band\b", value)
    return [_norm_id(p) for p in pieces if p.strip()]


def _resolve_ref(ref: str, ids: Sequence[str], owner: str) -> str:
    if ref in ids:
        return ref
    lowered = {i.lower(): i for i in ids}
    if ref.lower() in lowered:
        return lowered[ref.lower()]
    number = re.fullmatch(r"(?i)(?:task|t)?(\d+)", ref)
    if number:
        hits = [i for i in ids if re.search(rf"(?<!\d){int(number.group(1))}$", i)]
        if len(hits) == 1:
            return hits[0]
    raise UnknownTaskReference(f"task {owner!r} depends on unknown task {ref!r}")


def parse_plan(body: str) -> DependencyGraph:
    """Parse the ``Task N: description`` / ``Dependencies: ...`` plan format.

    Both the one-field-per-line form and ``Task ID: .., Description: ..,
    Dependencies: ..`` on a single line are accepted. Each task becomes a
    search node whose query template is its description.
    """
    tasks: list[dict[str, Any]] = []
    current: dict[str, Any] | None = None

    def start(task_id: str) -> dict[str, Any]:
        if any(t["id"] == task_id for t in tasks):
            raise DuplicateTaskId(f"task {task_id!r} declared twice")
        task = {"id": task_id, "desc": [], "deps": None}
        tasks.append(task)
        return task

    for line in body.splitlines():
        if not line.strip():
            continue
        fields = _line_fields(line)
        if fields is not None:
            for key, value in fields:
                if key == "task id":
                    current = start(_norm_id(value))
                elif current is None:
                    raise PlanError(f"{key!r} given before any task: {line.strip()!r}")
                elif key == "description":
                    current["desc"].append(value)
                else:
                    current["deps"] = _split_refs(value)
            continue
        header = _HEADER_RE.match(line)
        if header:
            current = start(_norm_id(header.group(1)))
            if header.group(2).strip():
                current["desc"].append(header.group(2).strip())
        elif current is not None and current["deps"] is None:
            current["desc"].append(line.strip())

    if not tasks:
        raise PlanError("plan declares no tasks")
    ids = [t["id"] for t in tasks]
    nodes = []
    for task in tasks:
        deps = [_resolve_ref(r, ids, task["id"]) for r in task["deps"] or []]
        desc = " ".join(task["desc"])
        nodes.append(TaskNode(task["id"], desc, "search", desc, tuple(deps)))
    graph = DependencyGraph(tuple(nodes))
    validate_dag(graph)
    return graph


# -- graph DSL ------------------------------------------------------------

_NODE_RE = re.compile(r"<node\b([^>]*)>(.*?)</node>", re.DOTALL)
_ATTR_RE = re.compile(r"\s*([A-Za-z_][\w-]*)\s*=\s*\"([^\"]*)\"")
_CALL_RE = re.compile(
    r"\s*([A-Za-z_]\w*)\s*\(\s*(?:\"((?:[^\"\\]|\\.)*)\"|'((?:[^'\\]|\\.)*)')\s*\)\s*",
    re.DOTALL,
)


def _unescape(text: str) -> str:
    return re.sub(r"\\(.)", r"\1", text, flags=re.DOTALL)


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def _parse_attrs(raw: str) -> dict[str, str]:
    attrs: dict[str, str] = {}
    pos = 0
    while pos < len(raw):
        match = _ATTR_RE.match(raw, pos)
        if match is None:
            if raw[pos:].strip() in ("", "/"):
                break
            raise MalformedNodeElement(f"bad node attributes: {raw.strip()!r}")
        attrs[match.group(1)] = match.group(2)
        pos = match.end()
    return attrs


def parse_graph_dsl(body: str) -> DependencyGraph:
    """Parse ``<node id=".." depends="a,b">tool("args")</node>`` elements."""
    nodes = []
    leftover = _NODE_RE.sub("", body)
    if leftover.strip():
        raise MalformedNodeElement(f"unexpected text in graph: {leftover.strip()[:80]!r}")
    for match in _NODE_RE.finditer(body):
        attrs = _parse_attrs(match.group(1))
        node_id = attrs.get("id", "").strip()
        if not node_id:
            raise MalformedNodeElement("node element without id")
        depends = tuple(d.strip() for d in attrs.get("depends", "").split(",") if d.strip())
        call = _CALL_RE.fullmatch(match.group(2))
        if call is None:
            raise UnknownToolSyntax(f"node {node_id!r}: expected tool(\"args\"), got {match.group(2)!r}")
        raw = call.group(2) if call.group(2) is not None else call.group(3)
        template = _unescape(raw)
        nodes.append(TaskNode(node_id, template, call.group(1), template, depends))
    graph = DependencyGraph(tuple(nodes))
    validate_dag(graph)
    return graph


def serialize_graph_dsl(graph: DependencyGraph) -> str:
    """Inverse of :func:`parse_graph_dsl` (body only, without the graph tag)."""
    lines = []
    for node in graph.nodes:
        deps = f' depends="{",".join(node.depends)}"' if node.depends else ""
        lines.append(
            f'<node id="{node.id}"{deps}>{node.tool_name}("{_escape(node.query_template)}")</node>'
        )
    return "\n" + "\n".join(lines) + "\n"


# -- rollouts -------------------------------------------------------------


@dataclass
class Rollout:
    """The tagged interaction for one question, plus token accounting."""

    question: str
    events: list[TraceEvent] = field(default_factory=list)
    n_in: int = 0
    n_out: int = 0

    def text(self, sep: str = "\n") -> str:
        return serialize_events(self.events, sep)

    def answer_event(self) -> TraceEvent | None:
        for event in self.events:
            if event.kind is EventKind.ANSWER:
                return event
        return None

    def final_answer(self) -> list[str] | None:
        event = self.answer_event()
        return None if event is None else event.parsed

    def search_events(self) -> list[TraceEvent]:
        return [e for e in self.events if e.kind is EventKind.SEARCH]

    def check(self) -> None:
        """Raise :class:`TraceError` if structural invariants are violated."""
        answers = [i for i, e in enumerate(self.events) if e.kind is EventKind.ANSWER]
        if len(answers) > 1:
            raise TraceError("more than one answer event")
        if answers and answers[0] != len(self.events) - 1:
            raise TraceError("answer event is not last")
        for i, event in enumerate(self.events):
            if event.kind is EventKind.OBSERVATION and (
                i == 0 or self.events[i - 1].kind is not EventKind.SEARCH
            ):
                raise TraceError(f"observation at position {i} does not follow a search")


@dataclass
class RolloutRecord:
    """One line of the persisted rollout JSON-lines format."""

    rollout: Rollout
    final_answer: list[str] | None = None
    correct: bool | None = None
    golds: list[str] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        events = []
        for e in self.rollout.events:
            item: dict[str, Any] = {"kind": e.kind.value, "body": e.body}
            if e.tag != e.kind.value:
                item["tag"] = e.tag
            if e.partial:
                item["partial"] = True
            events.append(item)
        doc: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "question": self.rollout.question,
            "events": events,
            "n_in": self.rollout.n_in,
            "n_out": self.rollout.n_out,
            "final_answer": self.final_answer,
            "correct": self.correct,
        }
        if self.golds is not None:
            doc["golds"] = self.golds
        doc.update(self.extra)
        return json.dumps(doc, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> RolloutRecord:
        doc = json.loads(line)
        if not isinstance(doc, dict) or "question" not in doc or "events" not in doc:
            raise TraceError("rollout record needs 'question' and 'events'")
        events = [
            TraceEvent(
                EventKind(e["kind"]), e["body"], e.get("tag", ""), bool(e.get("partial", False))
            )
            for e in doc.pop("events")
        ]
        rollout = Rollout(doc.pop("question"), events, int(doc.pop("n_in", 0)), int(doc.pop("n_out", 0)))
        doc.pop("schema_version", None)
        golds = doc.pop("golds", None)
        return cls(
            rollout,
            final_answer=doc.pop("final_answer", None),
            correct=doc.pop("correct", None),
            golds=golds,
            extra=doc,
        )


def read_rollouts(path) -> list[RolloutRecord]:
    with open(path, encoding="utf-8") as fh:
        return [RolloutRecord.from_json(line) for line in fh if line.strip()]


def write_rollouts(path, records: Iterable[RolloutRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(record.to_json() + "\n")
