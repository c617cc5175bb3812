"""Construction of the four structured supervision sample types.

A question is probed twice: once from the generator's own knowledge
(several attempts), once with retrieved passages in context. The two
outcomes classify the question into one of four answerability kinds, each
mapped to a fixed control-token training target.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .bm25 import PassageIndex, Passage
from .control import (
    ControlToken,
    Segment,
    Trajectory,
    control_sequence,
    parse_trajectory,
)
from .generator import EvidenceBlock, GenerationContext, GeneratorError
from .metrics import NormalizationMode, cover_em, exact_match

PARAMETRIC_PROBE_PREAMBLE = "Answer the question directly and concisely."
RETRIEVAL_PROBE_PREAMBLE = (
    "Use the retrieved passages to answer the question directly and concisely."
)
TEACHER_PREAMBLE = (
    "You refine retrieval queries. Given the original question, a partial "
    "answer, and the retrieved documents, restate what is already known and "
    "formulate a more targeted search query for the missing information. "
    "Reply with the query only."
)


class SupervisionKind(Enum):
    ALPHA = "alpha"
    BETA = "beta"
    GAMMA = "gamma"
    THETA = "theta"


class Split(Enum):
    SFT = "sft"
    RL = "rl"


class TeacherFailureError(RuntimeError):
    pass


class EmptyTeacherQueryError(ValueError):
    pass


class InconsistentKindError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeAttempt:
    answer: str
    em: int
    cover_em: int


@dataclass(frozen=True)
class ProbeOutcome:
    attempts: tuple[ProbeAttempt, ...]
    with_retrieval: bool
    passages_used: tuple[str, ...] = ()


@dataclass
class SupervisionSample:
    qid: str
    question: str
    references: list[str]
    kind: SupervisionKind
    target: Trajectory
    teacher_query: str | None = None
    provenance: dict = field(default_factory=dict)


def _extract_answer(text: str) -> str:
    """Answer-segment text when present, otherwise the whole emission."""
    segs = parse_trajectory(text).segments
    answers = [s.text for s in segs if s.marker is ControlToken.ANSWER]
    return (answers[-1] if answers else text).strip()


def _attempt(answer: str, refs: list[str], mode: NormalizationMode) -> ProbeAttempt:
    return ProbeAttempt(
        answer=answer,
        em=exact_match(answer, refs, mode),
        cover_em=cover_em(answer, refs, mode),
    )


def probe_parametric(
    question: str,
    refs: list[str],
    gen,
    attempts_n: int = 3,
    mode: NormalizationMode = NormalizationMode.SQUAD_STYLE,
) -> ProbeOutcome:
    """Generate attempts_n answers without evidence and score each one."""
    if attempts_n < 1:
        raise ValueError("attempts_n must be >= 1")
    attempts = []
    for _ in range(attempts_n):
        ctx = GenerationContext(
            system_preamble=PARAMETRIC_PROBE_PREAMBLE, question=question
        )
        emission = gen.emit_turn(ctx)
        attempts.append(_attempt(_extract_answer(emission.text), refs, mode))
    return ProbeOutcome(attempts=tuple(attempts), with_retrieval=False)


def probe_retrieval(
    question: str,
    refs: list[str],
    gen,
    idx: PassageIndex | None,
    top_k: int = 3,
    mode: NormalizationMode = NormalizationMode.SQUAD_STYLE,
) -> ProbeOutcome:
    """One generation with the question's top-k passages in context."""
    hits = idx.search(question, top_k) if idx is not None else []
    passages = [h.passage for h in hits]
    ctx = GenerationContext(
        system_preamble=RETRIEVAL_PROBE_PREAMBLE,
        question=question,
        evidence_blocks=(EvidenceBlock(query=question, passages=passages),),
    )
    emission = gen.emit_turn(ctx)
    return ProbeOutcome(
        attempts=(_attempt(_extract_answer(emission.text), refs, mode),),
        with_retrieval=True,
        passages_used=tuple(p.id for p in passages),
    )


def classify(parametric: ProbeOutcome, retrieval: ProbeOutcome) -> SupervisionKind:
    """Decision order: alpha, then beta, then gamma, with theta as the rest."""
    if all(a.em == 1 for a in parametric.attempts):
        return SupervisionKind.ALPHA
    if any(a.cover_em == 1 and a.em == 0 for a in parametric.attempts):
        return SupervisionKind.BETA
    ret = retrieval.attempts[0]
    if ret.em == 0 and ret.cover_em == 0:
        return SupervisionKind.GAMMA
    return SupervisionKind.THETA


def teacher_followup_query(
    question: str, intermediary: str, passages: list[Passage], teacher
) -> str:
    """Ask the teacher for a sharper follow-up query given the partial answer."""
    ctx = GenerationContext(
        system_preamble=TEACHER_PREAMBLE,
        question=question,
        evidence_blocks=(EvidenceBlock(query=question, passages=passages),),
        prior_segments=(Segment(ControlToken.INTERMEDIARY, " " + intermediary),),
    )
    try:
        emission = teacher.emit_turn(ctx)
    except GeneratorError as exc:
        raise TeacherFailureError(str(exc)) from exc
    query = emission.text.strip()
    if not query:
        raise EmptyTeacherQueryError("teacher returned an empty follow-up query")
    return query


def _strip_control_tokens(text: str) -> str:
    for token in ControlToken:
        text = text.replace(token.surface, " ")
    return " ".join(text.split())


def _partial_answer(outcome: ProbeOutcome) -> str:
    """The probe's own best coverage-matching attempt, for intermediary text."""
    for a in outcome.attempts:
        if a.cover_em == 1 and a.em == 0:
            return a.answer
    for a in outcome.attempts:
        if a.cover_em == 1:
            return a.answer
    return outcome.attempts[0].answer if outcome.attempts else ""


def _outcome_dict(outcome: ProbeOutcome) -> dict:
    return {
        "with_retrieval": outcome.with_retrieval,
        "attempts": [
            {"answer": a.answer, "em": a.em, "cover_em": a.cover_em}
            for a in outcome.attempts
        ],
        "passages_used": list(outcome.passages_used),
    }


def build_sample(
    question: str,
    refs: list[str],
    kind: SupervisionKind,
    parametric: ProbeOutcome,
    retrieval: ProbeOutcome,
    teacher_query: str | None = None,
    qid: str = "",
) -> SupervisionSample:
    """Instantiate the control-token training target for a classified question."""
    if classify(parametric, retrieval) is not kind:
        raise InconsistentKindError(
            f"probe outcomes classify as {classify(parametric, retrieval).value}, "
            f"not {kind.value}"
        )
    if not refs:
        raise ValueError("a sample needs at least one reference answer")
    gold = _strip_control_tokens(refs[0])
    query = _strip_control_tokens(question)
    answer_tail = f"[ANSWER] {gold} [SOLVED]"
    if kind is SupervisionKind.ALPHA:
        text = answer_tail
    elif kind is SupervisionKind.BETA:
        partial = _strip_control_tokens(_partial_answer(parametric))
        text = f"[INTERMEDIARY] {partial} [RETRIEVE] {query} {answer_tail}"
    elif kind is SupervisionKind.THETA:
        partial = _strip_control_tokens(_partial_answer(retrieval))
        text = f"[INTERMEDIARY] {partial} [RETRIEVE] {query} {answer_tail}"
    else:  # gamma: the teacher supplies the refined second query
        if not teacher_query or not teacher_query.strip():
            raise EmptyTeacherQueryError("gamma sample requires a teacher query")
        first = _strip_control_tokens(_partial_answer(parametric))
        second = _strip_control_tokens(_partial_answer(retrieval))
        refined = _strip_control_tokens(teacher_query)
        text = (
            f"[INTERMEDIARY] {first} [RETRIEVE] {query} "
            f"[INTERMEDIARY] {second} [RETRIEVE] {refined} {answer_tail}"
        )
    return SupervisionSample(
        qid=qid,
        question=question,
        references=list(refs),
        kind=kind,
        target=parse_trajectory(text),
        teacher_query=teacher_query if kind is SupervisionKind.GAMMA else None,
        provenance={
            "parametric": _outcome_dict(parametric),
            "retrieval": _outcome_dict(retrieval),
        },
    )


def sample_record(sample: SupervisionSample, split: Split) -> dict:
    return {
        "id": sample.qid,
        "question": sample.question,
        "kind": sample.kind.value,
        "target": sample.target.source,
        "references": sample.references,
        "teacher_query": sample.teacher_query,
        "split": split.value,
        "control_sequence": [t.name for t in control_sequence(sample.target)],
        "provenance": sample.provenance,
    }


def export_dataset(samples: list[SupervisionSample], split: Split, path: str) -> int:
    """Write samples (ordered by question id) plus a per-kind summary sidecar."""
    ordered = sorted(samples, key=lambda s: s.qid)
    with open(path, "w", encoding="utf-8") as fh:
        for sample in ordered:
            fh.write(json.dumps(sample_record(sample, split), ensure_ascii=False) + "\n")
    counts = {kind.value: 0 for kind in SupervisionKind}
    for sample in ordered:
        counts[sample.kind.value] += 1
    summary = {"split": split.value, "total": len(ordered), "counts": counts}
    with open(path + ".summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return len(ordered)
