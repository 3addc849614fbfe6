"""Sub-task dependency graphs and their ASAP level partition."""

from __future__ import annotations

import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

PLACEHOLDER_RE = re.compile(r"\{([^{}]+)\}")


class GraphError(ValueError):
    """Base class for dependency-graph errors."""


class CycleError(GraphError):
    """The graph contains a directed cycle; ``cycle`` is one witness path."""

    def __init__(self, cycle: Sequence[str]) -> None:
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(self.cycle))


class DanglingDependency(GraphError):
    def __init__(self, node_id: str, missing: str) -> None:
        self.node_id = node_id
        self.missing = missing
        super().__init__(f"node {node_id!r} depends on unknown node {missing!r}")


class DuplicateNodeId(GraphError):
    def __init__(self, node_id: str) -> None:
        self.node_id = node_id
        super().__init__(f"duplicate node id {node_id!r}")


class UnboundPlaceholder(GraphError):
    def __init__(self, name: str, node_id: str | None = None) -> None:
        self.name = name
        self.node_id = node_id
        where = f" in node {node_id!r}" if node_id else ""
        super().__init__(f"placeholder {{{name}}}{where} has no binding")


def placeholders(template: str) -> list[str]:
    """Placeholder names in order of first appearance."""
    seen: dict[str, None] = {}
    for match in PLACEHOLDER_RE.finditer(template):
        seen.setdefault(match.group(1), None)
    return list(seen)


@dataclass(frozen=True)
class TaskNode:
    """One sub-task: a tool invocation whose query may reference dependency outputs."""

    id: str
    description: str = ""
    tool_name: str = "search"
    query_template: str = ""
    depends: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.id or not self.id.strip():
            raise GraphError("node id must be non-empty")
        # ordered set: collapse duplicates, keep first occurrence
        object.__setattr__(self, "depends", tuple(dict.fromkeys(self.depends)))
        if self.id in self.depends:
            raise CycleError([self.id, self.id])
        for name in placeholders(self.query_template):
            if name not in self.depends:
                raise UnboundPlaceholder(name, self.id)


@dataclass(frozen=True)
class DependencyGraph:
    """Nodes in declaration order; an edge ``(u, v)`` means ``v`` depends on ``u``.

    Construction checks that ids are unique and every dependency resolves.
    Acyclicity is checked by :func:`validate_dag`.
    """

    nodes: tuple[TaskNode, ...] = ()
    _index: Mapping[str, TaskNode] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        nodes = tuple(self.nodes)
        object.__setattr__(self, "nodes", nodes)
        index: dict[str, TaskNode] = {}
        for node in nodes:
            if node.id in index:
                raise DuplicateNodeId(node.id)
            index[node.id] = node
        for node in nodes:
            for dep in node.depends:
                if dep not in index:
                    raise DanglingDependency(node.id, dep)
        object.__setattr__(self, "_index", index)

    @classmethod
    def from_edges(
        cls, node_ids: Iterable[str], edges: Iterable[tuple[str, str]]
    ) -> DependencyGraph:
        """Build bare search nodes from an id list and ``(from, to)`` edges."""
        ids = list(node_ids)
        deps: dict[str, list[str]] = {node_id: [] for node_id in ids}
        for src, dst in edges:
            if dst not in deps:
                raise DanglingDependency(src, dst)
            deps[dst].append(src)
        return cls(tuple(TaskNode(id=i, depends=tuple(deps[i])) for i in ids))

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self._index

    def __getitem__(self, node_id: str) -> TaskNode:
        return self._index[node_id]

    @property
    def ids(self) -> list[str]:
        return [node.id for node in self.nodes]

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(dep, node.id) for node in self.nodes for dep in node.depends]

    def successors(self, node_id: str) -> list[str]:
        return [node.id for node in self.nodes if node_id in node.depends]


@dataclass(frozen=True)
class ExecutionPlan:
    """Ordered levels of node ids; each level is one parallel batch."""

    levels: tuple[tuple[str, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def level_of(self, node_id: str) -> int:
        for i, level in enumerate(self.levels):
            if node_id in level:
                return i
        raise KeyError(node_id)

    def flatten(self) -> list[str]:
        return [node_id for level in self.levels for node_id in level]

    def as_sets(self) -> list[set[str]]:
        return [set(level) for level in self.levels]

    def sequential(self) -> ExecutionPlan:
        """One node per level, in level order: the one-call-per-turn baseline."""
        return ExecutionPlan(tuple((node_id,) for node_id in self.flatten()))


def validate_dag(graph: DependencyGraph) -> None:
    """Raise :class:`CycleError` with a witness path if ``graph`` has a cycle."""
    children: dict[str, list[str]] = {node_id: [] for node_id in graph.ids}
    for src, dst in graph.edges:
        if src not in children:
            raise DanglingDependency(dst, src)
        children[src].append(dst)

    WHITE, GREY, BLACK = 0, 1, 2
    color = dict.fromkeys(children, WHITE)
    for root in children:
        if color[root] != WHITE:
            continue
        path = [root]
        stack = [iter(children[root])]
        color[root] = GREY
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                color[path.pop()] = BLACK
                continue
            if color[nxt] == GREY:
                start = path.index(nxt)
                raise CycleError(path[start:] + [nxt])
            if color[nxt] == WHITE:
                color[nxt] = GREY
                path.append(nxt)
                stack.append(iter(children[nxt]))


def topological_levels(graph: DependencyGraph) -> ExecutionPlan:
    """Partition ``graph`` into ASAP levels.

    A node's level is one more than the deepest of its dependencies (0 for
    sources). Within a level, ids keep graph declaration order.
    """
    validate_dag(graph)
    level: dict[str, int] = {}
    pending = list(graph.nodes)
    while pending:
        rest = []
        for node in pending:
            if all(dep in level for dep in node.depends):
                level[node.id] = max((level[d] + 1 for d in node.depends), default=0)
            else:
                rest.append(node)
        pending = rest
    depth = max(level.values(), default=-1) + 1
    buckets: list[list[str]] = [[] for _ in range(depth)]
    for node_id in graph.ids:
        buckets[level[node_id]].append(node_id)
    return ExecutionPlan(tuple(tuple(b) for b in buckets))


def resolve_query(node: TaskNode, bindings: Mapping[str, str]) -> str:
    """Substitute each ``{id}`` placeholder in the node's template."""

    def substitute(match: re.Match[str]) -> str:
        name = match.group(1)
        if name not in bindings:
            raise UnboundPlaceholder(name, node.id)
        return bindings[name]

    return PLACEHOLDER_RE.sub(substitute, node.query_template)
