"""Character error rate and edit distance."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence


class EmptyReferenceError(ValueError):
    pass


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over Unicode codepoints (unit costs)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class CerReport:
    dataset: str
    samples: int
    total_chars: int
    total_dist: int
    decoder: str = ""
    model_id: str = ""
    modality: str = ""

    @property
    def cer(self) -> float:
        return self.total_dist / self.total_chars


def cer(predictions: Sequence[str], references: Sequence[str], dataset: str = "",
        decoder: str = "", model_id: str = "", modality: str = "") -> CerReport:
    """Corpus-level CER: total edit distance over total reference codepoints."""
    if len(predictions) != len(references):
        raise ValueError(f"{len(predictions)} predictions vs {len(references)} references")
    if not references:
        raise ValueError("cannot compute CER over an empty set")
    dist = chars = 0
    for i, (p, r) in enumerate(zip(predictions, references)):
        if not r:
            raise EmptyReferenceError(f"reference #{i} is empty")
        dist += edit_distance(p, r)
        chars += len(r)
    return CerReport(dataset, len(references), chars, dist, decoder, model_id, modality)
