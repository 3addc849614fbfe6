"""Independent oracles and random generators shared by the test modules.

Nothing here calls into the code paths it is used to check.
"""

from __future__ import annotations

import random
import re
import threading
import time
from fractions import Fraction
from pathlib import Path

FIXTURES = Path(__file__).parent / "fixtures"
CASE_QUESTION = "What occupation was shared by both John Frankenheimer and Tiffanie DeBartolo?"


# -- graph oracles --------------------------------------------------------


def random_digraph(rng: random.Random, max_nodes: int = 10, acyclic: bool | None = None):
    """Random ids and edges. ``acyclic=True`` orients edges along a random order."""
    n = rng.randint(0, max_nodes)
    ids = [f"n{i}" for i in range(n)]
    rng.shuffle(ids)
    density = rng.random()
    edges = []
    if acyclic is None:
        acyclic = rng.random() < 0.5
    order = ids[:]
    rng.shuffle(order)
    rank = {node: i for i, node in enumerate(order)}
    for u in ids:
        for v in ids:
            if u == v or rng.random() >= density * 0.5:
                continue
            if acyclic and rank[u] >= rank[v]:
                continue
            edges.append((u, v))
    return ids, edges


def brute_force_topological_order(ids, edges):
    """Backtracking search over orderings; returns one order or None."""
    preds = {i: {u for u, v in edges if v == i} for i in ids}

    def extend(order, placed):
        if len(order) == len(ids):
            return list(order)
        for node in ids:
            if node not in placed and preds[node] <= placed:
                order.append(node)
                placed.add(node)
                found = extend(order, placed)
                if found:
                    return found
                order.pop()
                placed.discard(node)
        return None

    return extend([], set())


def longest_chain_levels(ids, edges):
    """Level of each node = edges on the longest path ending at it (plain recursion)."""
    preds = {i: [u for u, v in edges if v == i] for i in ids}

    def longest(node):
        return max((1 + longest(p) for p in preds[node]), default=0)

    levels = {}
    for node in ids:
        levels.setdefault(longest(node), []).append(node)
    return [set(levels[k]) for k in sorted(levels)]


def is_cycle(path, edges):
    edge_set = set(edges)
    return (
        len(path) >= 2
        and path[0] == path[-1]
        and all((a, b) in edge_set for a, b in zip(path, path[1:]))
    )


def graph_with_shape(rng: random.Random, k: int, m: int):
    """A DAG with exactly ``k`` ASAP levels and ``m`` nodes (m >= k).

    Each level-i node depends on at least one level-(i-1) node.
    """
    sizes = [1] * k
    for _ in range(m - k):
        sizes[rng.randrange(k)] += 1
    levels, counter = [], 0
    for size in sizes:
        levels.append([f"s{counter + j + 1}" for j in range(size)])
        counter += size
    edges = []
    for i in range(1, k):
        for node in levels[i]:
            edges.append((rng.choice(levels[i - 1]), node))
            for earlier in (x for lvl in levels[:i] for x in lvl):
                if rng.random() < 0.2 and (earlier, node) not in edges:
                    edges.append((earlier, node))
    return levels, edges


# -- calculator oracle ----------------------------------------------------


def random_expr(rng: random.Random, depth: int):
    """Random expression tree of depth <= ``depth``: (text, exact value or None)."""
    if depth == 0 or rng.random() < 0.25:
        if rng.random() < 0.3:
            whole, frac = rng.randint(0, 99), rng.randint(0, 99)
            text = f"{whole}.{frac:02d}"
        else:
            text = str(rng.randint(0, 50))
        return text, Fraction(text)
    if rng.random() < 0.1:
        inner, val = random_expr(rng, depth - 1)
        return f"-({inner})", None if val is None else -val
    op = rng.choice("+-*/")
    lt, lv = random_expr(rng, depth - 1)
    rt, rv = random_expr(rng, depth - 1)
    text = f"({lt} {op} {rt})" if rng.random() < 0.7 else f"({lt}{op}{rt})"
    if lv is None or rv is None:
        return text, None
    if op == "+":
        return text, lv + rv
    if op == "-":
        return text, lv - rv
    if op == "*":
        return text, lv * rv
    return text, None if rv == 0 else lv / rv


class RecursiveDescent:
    """expr := term (('+'|'-') term)*; term := unary (('*'|'/') unary)*;
    unary := '-' unary | atom; atom := number | '(' expr ')'."""

    def __init__(self, text: str) -> None:
        self.toks = re.findall(r"\d+\.\d*|\.\d+|\d+|[-+*/()]", text)
        self.pos = 0

    def peek(self):
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def parse(self):
        value = self.expr()
        if self.peek() is not None:
            raise SyntaxError("trailing tokens")
        return value

    def expr(self):
        value = self.term()
        while self.peek() in ("+", "-"):
            op = self.take()
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self):
        value = self.unary()
        while self.peek() in ("*", "/"):
            op = self.take()
            rhs = self.unary()
            if op == "/":
                if rhs == 0:
                    raise ZeroDivisionError
                value = value / rhs
            else:
                value = value * rhs
        return value

    def unary(self):
        if self.peek() == "-":
            self.take()
            return -self.unary()
        return self.atom()

    def atom(self):
        tok = self.take()
        if tok == "(":
            value = self.expr()
            if self.take() != ")":
                raise SyntaxError("expected )")
            return value
        if tok is None or tok in "+-*/)":
            raise SyntaxError(f"unexpected {tok!r}")
        return Fraction(tok)


# -- tools and scripted rollouts ------------------------------------------


class InFlightCounter:
    """Thread-safe gauge of concurrent calls, recording the peak."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0
        self.calls = 0

    def wrap(self, fn, delay: float = 0.0):
        def inner(query: str):
            with self._lock:
                self.current += 1
                self.calls += 1
                self.peak = max(self.peak, self.current)
            try:
                if delay:
                    time.sleep(delay)
                return fn(query)
            finally:
                with self._lock:
                    self.current -= 1

        return inner


def deterministic_answer(query: str) -> str:
    """A pure stand-in tool: the output depends only on the query."""
    return f"result[{sum(map(ord, query)) % 997}] for {query}"


def graph_chunk(levels, edges, template=lambda node, deps: f"lookup {node}" + "".join(f" {{{d}}}" for d in deps)) -> str:
    """A policy plan chunk in the node DSL for the given levels/edges."""
    lines = []
    for level in levels:
        for node in level:
            deps = [u for u, v in edges if v == node]
            attr = f' depends="{",".join(deps)}"' if deps else ""
            lines.append(f'<node id="{node}"{attr}>search("{template(node, deps)}")</node>')
    return "<think>plan it</think>\n<graph>\n" + "\n".join(lines) + "\n</graph>"


def plan_text_chunk(levels, edges) -> str:
    """The same plan in the ``Task N`` text format; node ``sN`` becomes ``Task N``."""

    def name(node):
        return "Task " + node.lstrip("s")

    lines = []
    for level in levels:
        for node in level:
            deps = [name(u) for u, v in edges if v == node]
            lines.append(f"{name(node)}: look up {node}")
            lines.append(f"- Dependencies: {', '.join(deps) if deps else 'none'}")
    return "<think>plan</think>\n<plan>\n" + "\n".join(lines) + "\n</plan>"


# -- synthetic rollouts ---------------------------------------------------

_WORDS = "alpha beta gamma delta river stone city film writer born year".split()


def synthetic_rollout_text(
    rng: random.Random, searches: int, parallel: bool, pad_words: int = 0, answer: str = "x"
) -> str:
    """Tagged text with a known number of search blocks and a known parallel flag.

    Built by hand (not via the serializer) so it can be used to check it.
    """
    parts = [f"<think>{' '.join(rng.choices(_WORDS, k=pad_words)) or 'go'}</think>"]
    parts.append("<plan>\nTask 1: look\n- Dependencies: none\n</plan>")
    for i in range(searches):
        width = 2 if parallel and i == 0 else 1
        queries = [" ".join(rng.choices(_WORDS, k=3)) for _ in range(width)]
        parts.append(f"<search>{' | '.join(queries)}</search>")
        docs = "".join(f"\nDoc {j + 1} - q{j}:\n{' '.join(rng.choices(_WORDS, k=5))}\n" for j in range(width))
        parts.append(f"<observation>{docs}</observation>")
    parts.append(f"<answer>{answer}</answer>")
    return "\n".join(parts)


def whitespace_count(text: str) -> int:
    return len(text.split())
