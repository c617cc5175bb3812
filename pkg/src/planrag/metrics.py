"""QA scoring: EM, CoverEM, token F1, ROUGE-1/2/L, sentence BLEU, aggregation."""

from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:  # pragma: no cover
    from .planner import Episode


class NormalizationMode(Enum):
    # lowercase + whitespace collapse only
    MINIMAL = "minimal"
    # lowercase + punctuation removal + article removal + whitespace collapse
    SQUAD_STYLE = "squad"


_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNC_TABLE = str.maketrans("", "", string.punctuation)


class EmptyReferencesError(ValueError):
    pass


class EmptyRowsError(ValueError):
    pass


class EmptyInputError(ValueError):
    pass


def normalize(s: str, mode: NormalizationMode = NormalizationMode.SQUAD_STYLE) -> str:
    s = s.lower()
    if mode is NormalizationMode.SQUAD_STYLE:
        s = s.translate(_PUNC_TABLE)
        s = _ARTICLE_RE.sub(" ", s)
    return " ".join(s.split())


def _tokens(s: str, mode: NormalizationMode) -> list[str]:
    return normalize(s, mode).split()


def _require_refs(refs: list[str]) -> None:
    if not refs:
        raise EmptyReferencesError("at least one reference answer is required")


def exact_match(
    pred: str, refs: list[str], mode: NormalizationMode = NormalizationMode.SQUAD_STYLE
) -> int:
    _require_refs(refs)
    p = normalize(pred, mode)
    return int(any(p == normalize(r, mode) for r in refs))


def cover_em(
    pred: str, refs: list[str], mode: NormalizationMode = NormalizationMode.SQUAD_STYLE
) -> int:
    """1 iff the normalized prediction contains a normalized reference as a substring."""
    _require_refs(refs)
    p = normalize(pred, mode)
    return int(any(normalize(r, mode) in p for r in refs))


def _f1_from_counts(overlap: int, n_pred: int, n_ref: int) -> float:
    if n_pred == 0 and n_ref == 0:
        return 1.0
    if n_pred == 0 or n_ref == 0 or overlap == 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_ref
    return 2 * precision * recall / (precision + recall)


def token_f1(
    pred: str, refs: list[str], mode: NormalizationMode = NormalizationMode.SQUAD_STYLE
) -> float:
    """Max over references of the multiset token-overlap F1."""
    _require_refs(refs)
    pred_toks = _tokens(pred, mode)
    best = 0.0
    for ref in refs:
        ref_toks = _tokens(ref, mode)
        overlap = sum((Counter(pred_toks) & Counter(ref_toks)).values())
        best = max(best, _f1_from_counts(overlap, len(pred_toks), len(ref_toks)))
    return best


def _ngrams(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return list(zip(*(tokens[i:] for i in range(n))))


def _overlap_f(pred_grams: list, ref_grams: list) -> float:
    if not pred_grams or not ref_grams:
        return 0.0
    overlap = sum((Counter(pred_grams) & Counter(ref_grams)).values())
    return _f1_from_counts(overlap, len(pred_grams), len(ref_grams))


def _lcs_len(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class RougeScores:
    r1: float
    r2: float
    rl: float
    avg: float


def rouge(
    pred: str, refs: list[str], mode: NormalizationMode = NormalizationMode.SQUAD_STYLE
) -> RougeScores:
    """ROUGE-1/2/L F-measures, each the max over references, plus their mean."""
    _require_refs(refs)
    pred_toks = _tokens(pred, mode)
    r1 = r2 = rl = 0.0
    for ref in refs:
        ref_toks = _tokens(ref, mode)
        r1 = max(r1, _overlap_f(_ngrams(pred_toks, 1), _ngrams(ref_toks, 1)))
        r2 = max(r2, _overlap_f(_ngrams(pred_toks, 2), _ngrams(ref_toks, 2)))
        lcs = _lcs_len(pred_toks, ref_toks)
        rl = max(rl, _f1_from_counts(lcs, len(pred_toks), len(ref_toks)))
    return RougeScores(r1=r1, r2=r2, rl=rl, avg=(r1 + r2 + rl) / 3)


def bleu(pred: str, ref: str) -> float:
    """Sentence BLEU up to order 4 (capped at the prediction length).

    Uniform weights, add-one smoothing on orders >= 2, brevity penalty.
    A zero unigram match or an empty prediction scores 0.
    """
    pred_toks = _tokens(pred, NormalizationMode.MINIMAL)
    ref_toks = _tokens(ref, NormalizationMode.MINIMAL)
    if not pred_toks:
        return 0.0
    max_order = min(4, len(pred_toks))
    log_sum = 0.0
    for n in range(1, max_order + 1):
        pred_grams = _ngrams(pred_toks, n)
        ref_counts = Counter(_ngrams(ref_toks, n))
        matches = sum(
            min(c, ref_counts[g]) for g, c in Counter(pred_grams).items()
        )
        if n == 1:
            if matches == 0:
                return 0.0
            p_n = matches / len(pred_grams)
        else:
            p_n = (matches + 1) / (len(pred_grams) + 1)
        log_sum += math.log(p_n) / max_order
    if len(pred_toks) > len(ref_toks):
        bp = 1.0
    else:
        bp = math.exp(1 - len(ref_toks) / len(pred_toks))
    return bp * math.exp(log_sum)


# --- aggregation -------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    dataset: str
    em: float
    rouge_avg: float
    f1: float


def avg_score(rows: list[MetricRow]) -> float:
    """Unweighted mean over every (dataset, metric) cell."""
    if not rows:
        raise EmptyRowsError("avg_score needs at least one row")
    cells = [v for row in rows for v in (row.em, row.rouge_avg, row.f1)]
    return sum(cells) / len(cells)


def score_row(
    dataset: str,
    predictions: list[str],
    references: list[list[str]],
    mode: NormalizationMode = NormalizationMode.SQUAD_STYLE,
) -> MetricRow:
    """Average EM / ROUGE / F1 of aligned predictions against reference sets."""
    if not predictions:
        raise EmptyInputError("no predictions to score")
    if len(predictions) != len(references):
        raise ValueError("predictions and references are misaligned")
    n = len(predictions)
    em = sum(exact_match(p, r, mode) for p, r in zip(predictions, references)) / n
    rg = sum(rouge(p, r, mode).avg for p, r in zip(predictions, references)) / n
    f1 = sum(token_f1(p, r, mode) for p, r in zip(predictions, references)) / n
    return MetricRow(dataset=dataset, em=em, rouge_avg=rg, f1=f1)


def answer_presence_at_k(
    episode: "Episode",
    refs: list[str],
    k: int,
    mode: NormalizationMode = NormalizationMode.SQUAD_STYLE,
) -> int:
    """1 iff a normalized reference appears in any of the first k passages of a round."""
    if k < 1:
        raise ValueError("k must be >= 1")
    targets = [normalize(r, mode) for r in refs]
    for block in episode.memory:
        for hit in block.results[:k]:
            haystack = normalize(hit.passage.title + " " + hit.passage.text, mode)
            if any(t and t in haystack for t in targets):
                return 1
    return 0


def retrieval_stats(episodes: Iterable["Episode"]) -> dict:
    """Mean retrieval count and the fraction of episodes per realized count."""
    counts = [ep.rounds_used for ep in episodes]
    if not counts:
        raise EmptyInputError("no episodes")
    dist = Counter(counts)
    total = len(counts)
    return {
        "mean": sum(counts) / total,
        "distribution": {r: dist[r] / total for r in sorted(dist)},
    }


@dataclass
class ScoreReport:
    rows: list[MetricRow]
    avg_score: float
    retrieval_stats: dict = field(default_factory=dict)
    presence_at_k: dict = field(default_factory=dict)
    normalization: str = NormalizationMode.SQUAD_STYLE.value

    def to_dict(self) -> dict:
        return {
            "normalization": self.normalization,
            "rows": [
                {
                    "dataset": r.dataset,
                    "em": r.em,
                    "rouge": r.rouge_avg,
                    "f1": r.f1,
                }
                for r in self.rows
            ],
            "avg_score": self.avg_score,
            "retrieval_stats": self.retrieval_stats,
            "presence_at_k": {str(k): v for k, v in sorted(self.presence_at_k.items())},
        }

    def render_table(self) -> str:
        """Aligned text table: EM / ROUGE / F1 per dataset, then Avg.Score (x100)."""
        name_w = max([len("Dataset")] + [len(r.dataset) for r in self.rows])
        lines = [f"{'Dataset':<{name_w}}  {'EM':>6}  {'ROUGE':>6}  {'F1':>6}"]
        for r in self.rows:
            lines.append(
                f"{r.dataset:<{name_w}}  {100 * r.em:>6.1f}  "
                f"{100 * r.rouge_avg:>6.1f}  {100 * r.f1:>6.1f}"
            )
        lines.append(f"{'Avg.Score':<{name_w}}  {100 * self.avg_score:>6.1f}")
        return "\n".join(lines) + "\n"
