"""Policies: the text generators the executor drives.

``ScriptedPolicy`` replays pre-recorded chunks (golden traces, tests).
``HttpPolicy`` talks to any chat-completions endpoint.
"""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import httpx

from .trace import Rollout

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = """\
Work through the question with tagged blocks. Available blocks:
<think>...</think>: reason about what you know and what to do next.
<plan>...</plan>: list sub-tasks, one per block, as
  Task 1: <what to look up>
  - Dependencies: none
  Task 2: <what to look up, may use results of earlier tasks>
  - Dependencies: Task 1
<search>...</search>: run searches. Put every query that is ready to run in
  one block, separated by |. Results come back in <observation>...</observation>.
<reflection>...</reflection>: revise the plan when results are unexpected.
<answer>...</answer>: the final short answer; separate several answers with |.
Start with <think>, write the plan before searching, search for independent
tasks together, and only search for a task after the tasks it depends on.
Question: {question}
"""


class PolicyError(RuntimeError):
    pass


class PolicyExhausted(PolicyError):
    pass


@dataclass(frozen=True)
class Generation:
    """A continuation plus provider-reported token usage when available."""

    text: str
    n_in: int | None = None
    n_out: int | None = None


@runtime_checkable
class Policy(Protocol):
    def generate(
        self, question: str, rollout: Rollout, stop: Sequence[str], max_tokens: int | None = None
    ) -> str | Generation: ...


def truncate_at_stop(text: str, stop: Sequence[str]) -> str:
    """Cut ``text`` just after the earliest stop marker, keeping the marker."""
    cut = None
    for marker in stop:
        idx = text.find(marker)
        if idx != -1 and (cut is None or idx + len(marker) < cut):
            cut = idx + len(marker)
    return text if cut is None else text[:cut]


class ScriptedPolicy:
    """Replays chunks in order, one per ``generate`` call."""

    def __init__(self, chunks: Iterable[str]) -> None:
        self.chunks = list(chunks)
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | Path) -> ScriptedPolicy:
        """JSON-lines; each line is a string or an object with a ``text`` field."""
        chunks = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                item = json.loads(line)
                chunks.append(item["text"] if isinstance(item, dict) else str(item))
        return cls(chunks)

    def generate(self, question, rollout, stop, max_tokens=None) -> str:
        if self.calls >= len(self.chunks):
            raise PolicyExhausted(f"script has only {len(self.chunks)} chunks")
        chunk = self.chunks[self.calls]
        self.calls += 1
        return truncate_at_stop(chunk, stop)


class HttpPolicy:
    """Chat-completions client: the rollout so far is sent as an assistant prefix.

    Stop markers go in the request's ``stop`` list. Servers strip the matched
    marker from the reply; the executor restores it.
    """

    def __init__(
        self,
        url: str,
        model: str,
        api_key: str | None = None,
        *,
        max_tokens: int = 512,
        temperature: float = 0.0,
        timeout: float = 60.0,
        retries: int = 1,
        backoff: float = 0.5,
        template: str = PROMPT_TEMPLATE,
        client: httpx.Client | None = None,
    ) -> None:
        self.url = url
        self.model = model
        self.api_key = api_key
        self.max_tokens = max_tokens
        self.temperature = temperature
        self.retries = retries
        self.backoff = backoff
        self.template = template
        self._client = client or httpx.Client(timeout=timeout)

    @classmethod
    def from_env(cls, url: str, model: str, api_key_env: str = "GAPFLOW_API_KEY", **kw) -> HttpPolicy:
        return cls(url, model, os.environ.get(api_key_env), **kw)

    def messages(self, question: str, rollout: Rollout) -> list[dict[str, str]]:
        msgs = [{"role": "user", "content": self.template.format(question=question)}]
        so_far = rollout.text()
        if so_far:
            msgs.append({"role": "assistant", "content": so_far})
        return msgs

    def _post(self, payload: dict) -> httpx.Response:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        for attempt in range(self.retries + 1):
            try:
                return self._client.post(self.url, json=payload, headers=headers)
            except httpx.TransportError as exc:
                if attempt == self.retries:
                    raise PolicyError(f"transport error talking to {self.url}: {exc}") from exc
                delay = self.backoff * 2**attempt
                log.warning("transport error (%s); retrying in %.2fs", exc, delay)
                time.sleep(delay)
        raise AssertionError("unreachable")

    def generate(self, question, rollout, stop, max_tokens=None) -> Generation:
        payload = {
            "model": self.model,
            "messages": self.messages(question, rollout),
            "stop": list(stop),
            "max_tokens": max_tokens or self.max_tokens,
            "temperature": self.temperature,
        }
        response = self._post(payload)
        if response.status_code >= 400:
            raise PolicyError(f"HTTP {response.status_code} from {self.url}: {response.text[:200]}")
        try:
            data = response.json()
            text = data["choices"][0]["message"].get("content") or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise PolicyError(f"unexpected response shape: {exc}") from exc
        usage = data.get("usage") or {}
        return Generation(text, usage.get("prompt_tokens"), usage.get("completion_tokens"))
