"""Control-token grammar: streaming detection, trajectory parsing and validation.

A generation trajectory alternates literal control tokens with free text.
The accepted shape is ``([INTERMEDIARY] text [RETRIEVE] query)* [ANSWER] text
[SOLVED]``; the zero-iteration case is a direct answer. Parsing is total
(every string parses), validity is a separate judgement.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum


class ControlToken(Enum):
    """The four literal control tokens, in the order they may drive a turn."""

    INTERMEDIARY = "[INTERMEDIARY]"
    RETRIEVE = "[RETRIEVE]"
    ANSWER = "[ANSWER]"
    SOLVED = "[SOLVED]"

    @property
    def surface(self) -> str:
        return self.value


_SURFACE_TO_TOKEN = {t.value: t for t in ControlToken}
# No surface form is a prefix or substring of another, so a plain alternation
# scan is unambiguous; longest-match ordering is kept anyway.
_TOKEN_RE = re.compile(
    "|".join(re.escape(s) for s in sorted(_SURFACE_TO_TOKEN, key=len, reverse=True))
)
_MAX_SURFACE_LEN = max(len(s) for s in _SURFACE_TO_TOKEN)


@dataclass(frozen=True)
class Segment:
    """One marker (None only for leading plain text) plus the text that follows it."""

    marker: ControlToken | None
    text: str


@dataclass(frozen=True)
class Trajectory:
    segments: tuple[Segment, ...]
    source: str

    def render(self) -> str:
        return render_segments(self.segments)

    @classmethod
    def from_segments(cls, segments: list[Segment] | tuple[Segment, ...]) -> "Trajectory":
        segs = tuple(segments)
        return cls(segments=segs, source=render_segments(segs))


def render_segments(segments: tuple[Segment, ...] | list[Segment]) -> str:
    return "".join(
        (seg.marker.surface if seg.marker else "") + seg.text for seg in segments
    )


def parse_trajectory(text: str) -> Trajectory:
    """Split text into segments at control-token occurrences. Lossless and total."""
    segments: list[Segment] = []
    matches = list(_TOKEN_RE.finditer(text))
    if not matches:
        if text:
            segments.append(Segment(None, text))
        return Trajectory(tuple(segments), text)
    if matches[0].start() > 0:
        segments.append(Segment(None, text[: matches[0].start()]))
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        segments.append(Segment(_SURFACE_TO_TOKEN[m.group(0)], text[m.end() : end]))
    return Trajectory(tuple(segments), text)


# --- streaming scanner -------------------------------------------------------


@dataclass(frozen=True)
class TextRun:
    text: str


@dataclass(frozen=True)
class TokenEvent:
    token: ControlToken


StreamEvent = TextRun | TokenEvent


@dataclass(frozen=True)
class ScannerState:
    """Carry-over between chunks: the longest tail that may still become a token."""

    pending: str = ""
    emitted: int = 0


def _token_prefix_suffix(text: str) -> int:
    """Length of the longest suffix of text that is a proper prefix of a token."""
    limit = min(len(text), _MAX_SURFACE_LEN - 1)
    for n in range(limit, 0, -1):
        tail = text[-n:]
        if any(s.startswith(tail) for s in _SURFACE_TO_TOKEN):
            return n
    return 0


def scan_stream(
    chunk: str, state: ScannerState | None = None, *, final: bool = False
) -> tuple[list[StreamEvent], ScannerState]:
    """Scan one chunk, emitting text runs and token events.

    Tokens split across chunk boundaries are held in ``state.pending`` until
    resolved. A ``final=True`` call drains the pending tail as plain text.
    """
    state = state or ScannerState()
    buf = state.pending + chunk
    events: list[StreamEvent] = []
    pos = 0
    for m in _TOKEN_RE.finditer(buf):
        if m.start() > pos:
            events.append(TextRun(buf[pos : m.start()]))
        events.append(TokenEvent(_SURFACE_TO_TOKEN[m.group(0)]))
        pos = m.end()
    tail = buf[pos:]
    keep = 0 if final else _token_prefix_suffix(tail)
    if len(tail) > keep:
        events.append(TextRun(tail[: len(tail) - keep]))
    pending = tail[len(tail) - keep :] if keep else ""
    return events, ScannerState(pending=pending, emitted=state.emitted + len(events))


def coalesce_events(events: list[StreamEvent]) -> list[StreamEvent]:
    """Merge adjacent text runs and drop empty ones (canonical event form)."""
    out: list[StreamEvent] = []
    for ev in events:
        if isinstance(ev, TextRun):
            if not ev.text:
                continue
            if out and isinstance(out[-1], TextRun):
                out[-1] = TextRun(out[-1].text + ev.text)
                continue
        out.append(ev)
    return out


# --- validation --------------------------------------------------------------


@dataclass(frozen=True)
class ValidationReport:
    valid: bool
    violations: tuple[str, ...]
    retrieve_count: int


def control_sequence(t: Trajectory) -> list[ControlToken]:
    """Markers in order, text dropped."""
    return [seg.marker for seg in t.segments if seg.marker is not None]


def validate(t: Trajectory, max_rounds: int) -> ValidationReport:
    """Check t against ((INTERMEDIARY text RETRIEVE query)* ANSWER text SOLVED).

    Also flags empty retrieval queries, a retrieve count above max_rounds and
    stray plain text outside the grammar. Whitespace-only leading/trailing
    text is tolerated.
    """
    violations: list[str] = []
    retrieve_count = 0
    # expectation states: "open" (I or A next), "retrieve" (R next),
    # "solved" (S next), "end" (nothing more)
    expect = "open"
    for seg in t.segments:
        if seg.marker is None:
            if seg.text.strip():
                violations.append("plain text before first control token")
            continue
        kind = seg.marker
        if expect == "end":
            violations.append(f"content after Solved ({kind.name})")
            continue
        if kind is ControlToken.INTERMEDIARY:
            if expect == "open":
                expect = "retrieve"
            elif expect == "retrieve":
                violations.append("Intermediary not followed by Retrieve")
            else:
                violations.append("Answer not followed by Solved")
        elif kind is ControlToken.RETRIEVE:
            retrieve_count += 1
            if not seg.text.strip():
                violations.append("Retrieve with empty query")
            if expect == "retrieve":
                expect = "open"
            elif expect == "open":
                violations.append("Retrieve without Intermediary")
            else:
                violations.append("Answer not followed by Solved")
        elif kind is ControlToken.ANSWER:
            if expect == "open":
                expect = "solved"
            elif expect == "retrieve":
                violations.append("Intermediary not followed by Retrieve")
                expect = "solved"
            else:
                violations.append("Answer not followed by Solved")
        elif kind is ControlToken.SOLVED:
            if expect == "solved":
                if seg.text.strip():
                    violations.append("text after Solved")
                expect = "end"
            else:
                violations.append("Solved without Answer")
    if expect == "open":
        violations.append("no Answer emitted")
    elif expect == "retrieve":
        violations.append("Intermediary not followed by Retrieve")
    elif expect == "solved":
        violations.append("Answer without Solved")
    if retrieve_count > max_rounds:
        violations.append(
            f"retrieve count {retrieve_count} exceeds max rounds {max_rounds}"
        )
    return ValidationReport(
        valid=not violations,
        violations=tuple(violations),
        retrieve_count=retrieve_count,
    )
