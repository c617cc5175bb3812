"""Rule-based reward: answer fidelity plus control accuracy."""

from __future__ import annotations

from dataclasses import dataclass

from .control import ControlToken, Trajectory, control_sequence, validate
from .metrics import bleu
from .supervision import SupervisionSample

CONTROL_MATCH_BONUS = 0.5
INVALID_PENALTY = -0.5


class InvalidTargetError(ValueError):
    pass


class EmptyReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class RewardBreakdown:
    r_ans: float
    r_ctrl: float
    total: float


def answer_fidelity(rollout_answer: str, reference: str) -> float:
    if not reference:
        raise EmptyReferenceError("reference answer is empty")
    return bleu(rollout_answer, reference)


def control_accuracy(
    rollout: Trajectory,
    target: Trajectory,
    max_rounds: int,
    match_bonus: float = CONTROL_MATCH_BONUS,
    invalid_penalty: float = INVALID_PENALTY,
) -> float:
    """Three-level control reward: exact pattern match, valid-but-off, invalid."""
    if not validate(target, max_rounds).valid:
        raise InvalidTargetError("target trajectory does not satisfy the grammar")
    if not validate(rollout, max_rounds).valid:
        return invalid_penalty
    if control_sequence(rollout) == control_sequence(target):
        return match_bonus
    return 0.0


def final_answer_text(t: Trajectory) -> str:
    """Text of the last answer segment; empty when none was emitted."""
    answers = [s.text for s in t.segments if s.marker is ControlToken.ANSWER]
    return answers[-1].strip() if answers else ""


def total_reward(
    rollout: Trajectory,
    sample: SupervisionSample,
    max_rounds: int = 3,
    match_bonus: float = CONTROL_MATCH_BONUS,
    invalid_penalty: float = INVALID_PENALTY,
) -> RewardBreakdown:
    if not sample.references:
        raise EmptyReferenceError("sample has no reference answers")
    r_ans = answer_fidelity(final_answer_text(rollout), sample.references[0])
    r_ctrl = control_accuracy(
        rollout, sample.target, max_rounds, match_bonus, invalid_penalty
    )
    return RewardBreakdown(r_ans=r_ans, r_ctrl=r_ctrl, total=r_ans + r_ctrl)
