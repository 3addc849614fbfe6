"""Tool registry plus the two reference tools: corpus search and a calculator."""

from __future__ import annotations

import json
import math
import re
import threading
from collections import Counter
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path


class ToolError(Exception):
    """A single tool call failed; the executor turns this into error text."""


class ToolFatal(RuntimeError):
    """The registry itself is unusable (e.g. a referenced tool is missing)."""


class EmptyQuery(ToolError):
    pass


class CorpusNotLoaded(ToolError):
    pass


class CorpusError(ValueError):
    pass


class ParseError(ToolError, ValueError):
    pass


class DivisionByZero(ToolError, ZeroDivisionError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str = ""
    concurrency_safe: bool = True


@dataclass(frozen=True)
class ToolOutput:
    """What a tool returns: observation text and an optional short label."""

    text: str
    label: str | None = None


@dataclass(frozen=True)
class ToolResult:
    tool_name: str
    query: str
    text: str
    ok: bool = True
    label: str | None = None
    elapsed: float = 0.0

    @classmethod
    def failure(cls, tool_name: str, query: str, reason: str, elapsed: float = 0.0) -> ToolResult:
        return cls(tool_name, query, f"error: {reason}", ok=False, elapsed=elapsed)


class Tool:
    """A named capability. ``fn`` maps a query string to text or a ToolOutput."""

    def __init__(self, spec: ToolSpec, fn: Callable[[str], str | ToolOutput]) -> None:
        self.spec = spec
        self._fn = fn
        self.lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.spec.name

    def __call__(self, query: str) -> ToolOutput:
        out = self._fn(query)
        return out if isinstance(out, ToolOutput) else ToolOutput(str(out))

    def __repr__(self) -> str:
        return f"Tool({self.spec.name!r})"


class ToolRegistry:
    """Immutable-after-setup mapping of tool name to :class:`Tool`."""

    def __init__(self, tools: Iterable[Tool] = ()) -> None:
        self._tools: dict[str, Tool] = {}
        for tool in tools:
            self.register(tool)

    def register(self, tool: Tool) -> None:
        if tool.name in self._tools:
            raise ValueError(f"tool {tool.name!r} already registered")
        self._tools[tool.name] = tool

    def add(self, name: str, fn: Callable[[str], str | ToolOutput], **spec) -> Tool:
        tool = Tool(ToolSpec(name, **spec), fn)
        self.register(tool)
        return tool

    def get(self, name: str) -> Tool:
        try:
            return self._tools[name]
        except KeyError:
            raise ToolFatal(f"no tool named {name!r} (registered: {sorted(self._tools)})") from None

    def __contains__(self, name: object) -> bool:
        return name in self._tools

    def __iter__(self) -> Iterator[Tool]:
        return iter(self._tools.values())

    def specs(self) -> list[ToolSpec]:
        return [tool.spec for tool in self._tools.values()]


# -- corpus & lexical search ----------------------------------------------

SNIPPET_CHARS = 300
_TOKEN_RE = re.compile(r"\w+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    text: str


@dataclass(frozen=True)
class Hit:
    doc_id: str
    title: str
    snippet: str
    score: float


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)

    def __post_init__(self) -> None:
        seen = set()
        for doc in self.documents:
            if doc.doc_id in seen:
                raise CorpusError(f"duplicate doc_id {doc.doc_id!r}")
            if not doc.text.strip():
                raise CorpusError(f"document {doc.doc_id!r} has empty text")
            seen.add(doc.doc_id)

    def __len__(self) -> int:
        return len(self.documents)

    @classmethod
    def from_jsonl(cls, path: str | Path) -> Corpus:
        docs = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    docs.append(Document(str(row["doc_id"]), str(row.get("title", "")), str(row["text"])))
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise CorpusError(f"{path}:{lineno}: {exc}") from exc
        return cls(docs)

    @classmethod
    def from_directory(cls, root: str | Path, pattern: str = "*.txt") -> Corpus:
        """One document per plain-text file; the file stem is id and title."""
        root = Path(root)
        docs = []
        for path in sorted(root.rglob(pattern)):
            text = path.read_text(encoding="utf-8").strip()
            if not text:
                continue
            doc_id = path.relative_to(root).with_suffix("").as_posix()
            docs.append(Document(doc_id, path.stem.replace("_", " "), text))
        return cls(docs)

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for doc in self.documents:
                fh.write(json.dumps({"doc_id": doc.doc_id, "title": doc.title, "text": doc.text}, ensure_ascii=False) + "\n")


class LexicalIndex:
    """Okapi BM25 over title + text. Read-only after construction."""

    def __init__(self, corpus: Corpus | None, k1: float = 1.5, b: float = 0.75) -> None:
        self.corpus = corpus
        self.k1 = k1
        self.b = b
        self._tf: list[Counter[str]] = []
        self._len: list[int] = []
        self._idf: dict[str, float] = {}
        self._avgdl = 0.0
        if corpus is not None:
            self._build(corpus)

    def _build(self, corpus: Corpus) -> None:
        df: Counter[str] = Counter()
        for doc in corpus.documents:
            tf = Counter(tokenize(f"{doc.title} {doc.text}"))
            self._tf.append(tf)
            self._len.append(sum(tf.values()))
            df.update(tf.keys())
        n = len(corpus.documents)
        self._avgdl = sum(self._len) / n if n else 0.0
        self._idf = {t: math.log(1 + (n - f + 0.5) / (f + 0.5)) for t, f in df.items()}

    @property
    def vocabulary_size(self) -> int:
        return len(self._idf)

    def search(self, query: str, k: int = 3) -> list[Hit]:
        if self.corpus is None:
            raise CorpusNotLoaded("no corpus loaded")
        if k < 1:
            raise ValueError("k must be >= 1")
        terms = tokenize(query)
        if not terms:
            raise EmptyQuery("query has no searchable terms")
        qtf = Counter(terms)
        scored = []
        for i, doc in enumerate(self.corpus.documents):
            tf = self._tf[i]
            norm = self.k1 * (1 - self.b + self.b * self._len[i] / (self._avgdl or 1.0))
            score = 0.0
            for term in sorted(qtf):
                f = tf.get(term, 0)
                if f:
                    score += qtf[term] * self._idf[term] * f * (self.k1 + 1) / (f + norm)
            if score > 0:
                scored.append((-score, doc.doc_id, doc))
        scored.sort(key=lambda row: (row[0], row[1]))
        return [Hit(d.doc_id, d.title, d.text[:SNIPPET_CHARS], -s) for s, _, d in scored[:k]]


def search_tool(index: LexicalIndex, k: int = 1, name: str = "search") -> Tool:
    """Wrap an index as a tool; the top hit's title becomes the label."""

    def run(query: str) -> ToolOutput:
        hits = index.search(query, k)
        if not hits:
            return ToolOutput("no results")
        if len(hits) == 1:
            return ToolOutput(hits[0].snippet, hits[0].title)
        text = "\n".join(f"({i}) {h.title}: {h.snippet}" for i, h in enumerate(hits, 1))
        return ToolOutput(text, hits[0].title)

    return Tool(ToolSpec(name, "lexical search over the local corpus"), run)


# -- calculator -----------------------------------------------------------

_CALC_TOKEN_RE = re.compile(r"\s*(?:(\d+(?:\.\d*)?|\.\d+)|(.))")
_OPS = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "/": "/", "÷": "/"}
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3}


def _calc_tokens(expression: str) -> list[str | Fraction]:
    tokens: list[str | Fraction] = []
    for match in _CALC_TOKEN_RE.finditer(expression):
        number, sym = match.groups()
        if number is not None:
            tokens.append(Fraction(number))
        elif sym is None or sym.isspace():
            continue
        elif sym in _OPS:
            tokens.append(_OPS[sym])
        elif sym in "()":
            tokens.append(sym)
        else:
            raise ParseError(f"unexpected character {sym!r}")
    return tokens


def _apply(op: str, stack: list[Fraction]) -> None:
    if op == "neg":
        stack.append(-stack.pop())
        return
    if len(stack) < 2:
        raise ParseError("missing operand")
    right, left = stack.pop(), stack.pop()
    if op == "+":
        stack.append(left + right)
    elif op == "-":
        stack.append(left - right)
    elif op == "*":
        stack.append(left * right)
    else:
        if right == 0:
            raise DivisionByZero("division by zero")
        stack.append(left / right)


def calculate(expression: str) -> Fraction:
    """Evaluate ``+ - * /`` with parentheses and unary minus, exactly.

    Shunting-yard over rational arithmetic; ``×``/``÷``/``−`` are accepted.
    """
    tokens = _calc_tokens(expression)
    if not tokens:
        raise ParseError("empty expression")
    values: list[Fraction] = []
    ops: list[str] = []
    expect_operand = True
    for tok in tokens:
        if isinstance(tok, Fraction):
            if not expect_operand:
                raise ParseError("missing operator")
            values.append(tok)
            expect_operand = False
        elif tok == "(":
            if not expect_operand:
                raise ParseError("missing operator before '('")
            ops.append(tok)
        elif tok == ")":
            if expect_operand:
                raise ParseError("empty parentheses or dangling operator")
            while ops and ops[-1] != "(":
                _apply(ops.pop(), values)
            if not ops:
                raise ParseError("unbalanced ')'")
            ops.pop()
        elif expect_operand:
            if tok == "-":
                ops.append("neg")
            elif tok != "+":
                raise ParseError(f"operator {tok!r} without left operand")
        else:
            # binary operators are left-associative; unary minus binds tighter
            while ops and ops[-1] != "(" and _PREC[ops[-1]] >= _PREC[tok]:
                _apply(ops.pop(), values)
            ops.append(tok)
            expect_operand = True
    if expect_operand:
        raise ParseError("expression ends with an operator")
    while ops:
        op = ops.pop()
        if op == "(":
            raise ParseError("unbalanced '('")
        _apply(op, values)
    if len(values) != 1:
        raise ParseError("malformed expression")
    return values[0]


def format_number(value: Fraction) -> str:
    if value.denominator == 1:
        return str(value.numerator)
    return repr(float(value))


def calculator_tool(name: str = "calculator") -> Tool:
    return Tool(
        ToolSpec(name, "exact arithmetic: + - * / and parentheses"),
        lambda expr: format_number(calculate(expr)),
    )


def default_registry(corpus: Corpus | None, k: int = 1) -> ToolRegistry:
    return ToolRegistry([search_tool(LexicalIndex(corpus), k), calculator_tool()])
