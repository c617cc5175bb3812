"""Generator gateway: replay scripts for tests, chat-completions HTTP backend."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import requests

from .bm25 import Passage
from .control import ControlToken, Segment, parse_trajectory, render_segments

DEFAULT_PREAMBLE = (
    "You answer questions by planning retrieval with control tokens. "
    "Emit [INTERMEDIARY] followed by your partial reasoning and [RETRIEVE] "
    "followed by a search query when you need external evidence. "
    "When you can answer, emit [ANSWER] followed by the final answer and "
    "then [SOLVED]."
)

FINALIZE_INSTRUCTION = (
    "The retrieval budget is exhausted. Finalize now: emit the answer control "
    "token, your best final answer from the evidence above, and the "
    "termination token."
)


class GeneratorError(Exception):
    pass


class BackendUnavailableError(GeneratorError):
    pass


class ScriptExhaustedError(GeneratorError):
    pass


class StopReason(Enum):
    CONTROL_BOUNDARY = "control_boundary"
    END_OF_TURN = "end_of_turn"
    LENGTH_LIMIT = "length_limit"


@dataclass(frozen=True)
class EvidenceBlock:
    query: str
    passages: list[Passage]


@dataclass(frozen=True)
class GenerationContext:
    system_preamble: str
    question: str
    evidence_blocks: tuple[EvidenceBlock, ...] = ()
    prior_segments: tuple[Segment, ...] = ()
    finalize_required: bool = False


@dataclass(frozen=True)
class GeneratorEmission:
    text: str
    stop_reason: StopReason = StopReason.END_OF_TURN


def _escape_line(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n")


def render_user_prompt(ctx: GenerationContext) -> str:
    """Deterministic serialization of question, evidence and prior transcript."""
    lines = [f"Question: {_escape_line(ctx.question)}"]
    for block in ctx.evidence_blocks:
        lines.append(f"Query: {_escape_line(block.query)}")
        for k, p in enumerate(block.passages, 1):
            lines.append(f"[{k}] {_escape_line(p.title)}: {_escape_line(p.text)}")
    lines.append("Transcript:")
    lines.append(render_segments(ctx.prior_segments))
    if ctx.finalize_required:
        lines.append(FINALIZE_INSTRUCTION)
    return "\n".join(lines)


def render_prompt(ctx: GenerationContext) -> str:
    return ctx.system_preamble + "\n\n" + render_user_prompt(ctx)


def truncate_at_branch(text: str) -> str:
    """Cut a turn at the first boundary past a complete branch.

    An answer branch is complete at [SOLVED]; an intermediary branch is
    complete at the end of the retrieval query, i.e. the next control token.
    Text with no complete branch is returned unchanged.
    """
    segs = parse_trajectory(text).segments
    for i, seg in enumerate(segs):
        nxt = segs[i + 1] if i + 1 < len(segs) else None
        if seg.marker is ControlToken.ANSWER and nxt and nxt.marker is ControlToken.SOLVED:
            kept = list(segs[: i + 1]) + [Segment(ControlToken.SOLVED, "")]
            return render_segments(kept)
        if seg.marker is ControlToken.INTERMEDIARY and nxt and nxt.marker is ControlToken.RETRIEVE:
            if i + 2 < len(segs):
                return render_segments(list(segs[: i + 2]))
            return text
    return text


class ReplayGenerator:
    """Deterministic scripted stand-in for the generative policy.

    Turns are consumed strictly in order; requesting past the end raises
    ScriptExhaustedError. One script serves exactly one episode.
    """

    def __init__(self, turns: list[str]):
        self.turns = list(turns)
        self.cursor = 0

    def emit_turn(self, ctx: GenerationContext) -> GeneratorEmission:
        if self.cursor >= len(self.turns):
            raise ScriptExhaustedError(
                f"replay script exhausted after {len(self.turns)} turns"
            )
        text = self.turns[self.cursor]
        self.cursor += 1
        return GeneratorEmission(text=text, stop_reason=StopReason.END_OF_TURN)


@dataclass
class GeneratorSettings:
    endpoint: str
    model: str
    temperature: float = 0.0
    max_tokens: int = 512
    auth_env: str = "PLANRAG_API_KEY"
    max_attempts: int = 3
    backoff_base: float = 0.5
    timeout: float = 60.0
    declare_stop: bool = False
    client_truncate: bool = True


Transport = Callable[[str, dict, dict, float], tuple[int, dict]]


def _requests_transport(url: str, headers: dict, payload: dict, timeout: float):
    resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {}
    return resp.status_code, body


class TransportFailure(Exception):
    """Internal marker for retryable transport-level failures."""


class HttpChatGenerator:
    """Chat-completions client with bounded exponential-backoff retries.

    Only transport-level failures (connection errors, timeouts, 5xx) are
    retried; a semantic backend rejection (4xx, malformed body) never is.
    """

    def __init__(self, settings: GeneratorSettings, transport: Transport | None = None):
        self.settings = settings
        self.transport = transport or _requests_transport

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        secret = os.environ.get(self.settings.auth_env, "")
        if secret:
            headers["Authorization"] = f"Bearer {secret}"
        return headers

    def _payload(self, ctx: GenerationContext) -> dict:
        payload = {
            "model": self.settings.model,
            "messages": [
                {"role": "system", "content": ctx.system_preamble},
                {"role": "user", "content": render_user_prompt(ctx)},
            ],
            "temperature": self.settings.temperature,
            "max_tokens": self.settings.max_tokens,
        }
        if self.settings.declare_stop:
            # [SOLVED] is the only token after which no content is ever needed;
            # the other boundaries are handled by client-side truncation.
            payload["stop"] = [ControlToken.SOLVED.surface]
        return payload

    def _request(self, payload: dict) -> dict:
        last_error = "unknown transport failure"
        for attempt in range(self.settings.max_attempts):
            if attempt:
                time.sleep(self.settings.backoff_base * 2 ** (attempt - 1))
            try:
                status, body = self.transport(
                    self.settings.endpoint, self._headers(), payload, self.settings.timeout
                )
            except (requests.ConnectionError, requests.Timeout, TransportFailure) as exc:
                last_error = str(exc) or type(exc).__name__
                continue
            if status >= 500:
                last_error = f"backend returned {status}"
                continue
            if status >= 400:
                raise GeneratorError(f"backend rejected request with status {status}")
            return body
        raise BackendUnavailableError(
            f"backend unavailable after {self.settings.max_attempts} attempts: {last_error}"
        )

    def emit_turn(self, ctx: GenerationContext) -> GeneratorEmission:
        body = self._request(self._payload(ctx))
        try:
            choice = body["choices"][0]
            text = choice["message"]["content"] or ""
            finish = choice.get("finish_reason", "stop")
        except (KeyError, IndexError, TypeError) as exc:
            raise GeneratorError(f"malformed backend response: {exc}") from exc
        stop_reason = StopReason.END_OF_TURN
        if finish == "length":
            stop_reason = StopReason.LENGTH_LIMIT
        if (
            self.settings.declare_stop
            and ControlToken.ANSWER.surface in text
            and ControlToken.SOLVED.surface not in text
        ):
            # the backend swallowed the declared stop sequence
            text += ControlToken.SOLVED.surface
            stop_reason = StopReason.CONTROL_BOUNDARY
        if self.settings.client_truncate:
            truncated = truncate_at_branch(text)
            if truncated != text:
                text = truncated
                stop_reason = StopReason.CONTROL_BOUNDARY
        return GeneratorEmission(text=text, stop_reason=stop_reason)
