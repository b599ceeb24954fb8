"""Khmer character-cluster (KCC) tokenizer.

Text is split into clusters: a Khmer base (consonant or independent vowel)
absorbs the subscripts, dependent vowels and signs that follow it.  Every
other codepoint is its own cluster.  Clusters are mapped to integer ids
through a :class:`Vocabulary` whose first six ids are reserved.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

COENG = "\u17d2"

RESERVED = ("blank", "pad", "bos", "eos", "mask", "unk")
BLANK_ID, PAD_ID, BOS_ID, EOS_ID, MASK_ID, UNK_ID = range(6)


class ClusterKind(str, Enum):
    KHMER = "khmer-cluster"
    LATIN = "latin-char"
    DIGIT = "digit"
    SYMBOL = "symbol"
    SPACE = "space"
    UNKNOWN = "unknown"


def is_khmer_consonant(ch: str) -> bool:
    return "\u1780" <= ch <= "\u17a2"


def is_khmer_independent_vowel(ch: str) -> bool:
    return "\u17a3" <= ch <= "\u17b3"


def is_khmer_base(ch: str) -> bool:
    return is_khmer_consonant(ch) or is_khmer_independent_vowel(ch)


def is_khmer_dependent_vowel(ch: str) -> bool:
    # includes the two invisible inherent vowels U+17B4/U+17B5
    return "\u17b4" <= ch <= "\u17c5"


def is_khmer_diacritic(ch: str) -> bool:
    return ("\u17c6" <= ch <= "\u17d1") or ch == "\u17d3" or ch == "\u17dd"


def is_khmer_combining(ch: str) -> bool:
    """True for marks that can never begin a well-formed cluster."""
    return ch == COENG or is_khmer_dependent_vowel(ch) or is_khmer_diacritic(ch)


@dataclass(frozen=True)
class Cluster:
    text: str
    kind: ClusterKind

    def __post_init__(self):
        if not self.text:
            raise ValueError("cluster text must be non-empty")


def _classify(ch: str) -> ClusterKind:
    if ch.isspace():
        return ClusterKind.SPACE
    cat = unicodedata.category(ch)
    if cat == "Nd":
        return ClusterKind.DIGIT
    if cat[0] == "L":
        return ClusterKind.LATIN if "LATIN" in unicodedata.name(ch, "") else ClusterKind.UNKNOWN
    if cat[0] in "PS" or cat == "No":
        return ClusterKind.SYMBOL
    return ClusterKind.UNKNOWN


def segment(text: str) -> list[Cluster]:
    """Split ``text`` into character clusters.

    The concatenation of the returned cluster texts is always ``text``.
    Combining marks with no Khmer base to attach to (at the start of the
    string or after a non-Khmer cluster) become ``UNKNOWN`` clusters.
    """
    out: list[Cluster] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if is_khmer_base(ch):
            j = i + 1
            while j < n:
                nxt = text[j]
                if nxt == COENG:
                    j += 1
                    if j < n and is_khmer_base(text[j]):
                        j += 1
                elif is_khmer_dependent_vowel(nxt) or is_khmer_diacritic(nxt):
                    j += 1
                else:
                    break
            out.append(Cluster(text[i:j], ClusterKind.KHMER))
            i = j
            continue
        if is_khmer_combining(ch):
            out.append(Cluster(ch, ClusterKind.UNKNOWN))
        else:
            out.append(Cluster(ch, _classify(ch)))
        i += 1
    return out


def clusters(text: str) -> list[str]:
    return [c.text for c in segment(text)]


@dataclass(frozen=True)
class Vocabulary:
    """Dense id <-> cluster mapping; ids 0..5 are the reserved tokens."""

    entries: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        if tuple(self.entries[: len(RESERVED)]) != tuple(f"<{r}>" for r in RESERVED):
            raise ValueError("vocabulary must start with the reserved entries")
        content = self.entries[len(RESERVED):]
        index = {s: i + len(RESERVED) for i, s in enumerate(content)}
        if len(index) != len(content):
            raise ValueError("vocabulary entries must be unique")
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def size(self) -> int:
        return len(self.entries)

    def __contains__(self, cluster: str) -> bool:
        return cluster in self._index

    def id_of(self, cluster: str) -> int:
        return self._index.get(cluster, UNK_ID)

    def is_reserved(self, idx: int) -> bool:
        return 0 <= idx < len(RESERVED)

    def save(self, path: str | Path) -> None:
        lines = [_escape(e) if i >= len(RESERVED) else e for i, e in enumerate(self.entries)]
        Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        raw = Path(path).read_text(encoding="utf-8")
        if raw.endswith("\n"):
            raw = raw[:-1]
        lines = raw.split("\n")
        entries = lines[: len(RESERVED)] + [_unescape(s) for s in lines[len(RESERVED):]]
        return cls(tuple(entries))


def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(s: str) -> str:
    out, i = [], 0
    while i < len(s):
        if s[i] == "\\" and i + 1 < len(s):
            out.append({"n": "\n", "r": "\r", "\\": "\\"}.get(s[i + 1], s[i + 1]))
            i += 2
        else:
            out.append(s[i])
            i += 1
    return "".join(out)


def build_vocab(corpus: Iterable[str], reserved: Sequence[str] = RESERVED) -> Vocabulary:
    """Collect every cluster seen in ``corpus`` into a sorted vocabulary."""
    if tuple(reserved) != RESERVED:
        raise ValueError(f"reserved tokens must be {RESERVED}")
    seen: set[str] = set()
    any_line = False
    for line in corpus:
        any_line = True
        seen.update(clusters(line))
    if not any_line:
        raise ValueError("corpus is empty")
    return Vocabulary(tuple(f"<{r}>" for r in reserved) + tuple(sorted(seen)))


def encode(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id_of(c) for c in clusters(text)]


def decode(ids: Iterable[int], vocab: Vocabulary) -> str:
    parts = []
    size = len(vocab)
    for i in ids:
        i = int(i)
        if i < 0 or i >= size:
            raise IndexError(f"token id {i} out of range for vocabulary of size {size}")
        if i >= len(RESERVED):
            parts.append(vocab.entries[i])
    return "".join(parts)
