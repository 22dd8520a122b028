"""Answer and retrieval metrics: exact match and Hits@K."""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from typing import Iterable, Sequence

_ARTICLES = {"a", "an", "the"}


class _PunctDeleteTable(dict):
    """str.translate table deleting Unicode-punctuation code points, built lazily."""

    def __missing__(self, code: int):
        keep = None if unicodedata.category(chr(code)).startswith("P") else code
        self[code] = keep
        return keep


_PUNCT_TABLE = _PunctDeleteTable()


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation, drop article tokens, squeeze whitespace."""
    s = s.lower().translate(_PUNCT_TABLE)
    tokens = [t for t in s.split() if t not in _ARTICLES]
    return " ".join(tokens)


def exact_match(prediction: str, acceptable: Sequence[str]) -> int:
    """1 iff the normalized prediction equals any normalized acceptable answer."""
    if not acceptable:
        raise ValueError("acceptable answer list must be non-empty")
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(a) for a in acceptable))


def contains_answer(text: str, answers: Sequence[str]) -> bool:
    """Gold-passage rule: normalized text contains any normalized answer."""
    return contains_normalized(normalize_answer(text), [normalize_answer(a) for a in answers])


def contains_normalized(norm_text: str, norm_answers: Sequence[str]) -> bool:
    """Containment over already-normalized strings (hot-path variant)."""
    return any(a and a in norm_text for a in norm_answers)


def hits_at_k(flag_lists: Sequence[Sequence[bool]], k: int) -> float:
    """Fraction of questions with a gold passage in the top-k prefix.

    Rankings shorter than k are evaluated on their available prefix; use
    ``build_eval_result`` to get that condition flagged.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not flag_lists:
        raise ValueError("need at least one ranking")
    hits = sum(1 for flags in flag_lists if any(flags[:k]))
    return hits / len(flag_lists)


@dataclass
class EvalResult:
    """Aggregated answer/retrieval metrics for one evaluation run."""

    em_flags: list[int] = field(default_factory=list)
    em: float = 0.0
    hits: dict[int, float] = field(default_factory=dict)
    truncated_ks: list[int] = field(default_factory=list)
    n_questions: int = 0

    def to_dict(self) -> dict:
        return {
            "n_questions": self.n_questions,
            "em": self.em,
            "em_flags": self.em_flags,
            "hits_at_k": {str(k): v for k, v in sorted(self.hits.items())},
            "truncated_ks": sorted(self.truncated_ks),
        }


def build_eval_result(
    em_flags: Sequence[int] | None,
    gold_flag_lists: Sequence[Sequence[bool]] | None,
    ks: Iterable[int] = (1, 5, 10, 20),
) -> EvalResult:
    res = EvalResult()
    if em_flags is not None:
        res.em_flags = [int(f) for f in em_flags]
        res.n_questions = len(res.em_flags)
        res.em = sum(res.em_flags) / len(res.em_flags) if res.em_flags else 0.0
    if gold_flag_lists:
        res.n_questions = max(res.n_questions, len(gold_flag_lists))
        shortest = min(len(f) for f in gold_flag_lists)
        for k in sorted(set(int(k) for k in ks)):
            res.hits[k] = hits_at_k(gold_flag_lists, k)
            if k > shortest:
                res.truncated_ks.append(k)
    return res


def hits_csv(rows: dict[str, dict[int, float]], ks: Sequence[int]) -> str:
    """Render a Hits@K table (one row per system) as CSV text."""
    header = ["system"] + [f"H@{k}" for k in ks]
    lines = [",".join(header)]
    for name, table in rows.items():
        lines.append(",".join([name] + [f"{table.get(k, float('nan')):.4f}" for k in ks]))
    return "\n".join(lines) + "\n"
