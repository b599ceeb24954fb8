"""CTC loss (log-space forward algorithm) and CTC decoding."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .nn import log_softmax
from .tokenizer import BLANK_ID, RESERVED

NEG = -1e30


class CTCInfeasibleError(ValueError):
    """Target cannot be aligned to the available number of frames."""


@dataclass
class DecodeResult:
    ids: list[int]
    score: float
    mode: str
    extras: dict = field(default_factory=dict)


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per label plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss_batch(logits: Tensor, targets: Sequence[Sequence[int]],
                   lengths: Sequence[int] | None = None, blank: int = BLANK_ID) -> tuple[Tensor, Tensor]:
    """Per-sample -log p(target | logits) for a (B, T, c) batch.

    Returns ``(losses, feasible)``; infeasible samples get loss 0 and
    ``feasible`` False so the caller decides what to do with them.
    """
    B, T, _ = logits.shape
    lp = log_softmax(logits, dim=-1)
    lengths = [T] * B if lengths is None else [int(x) for x in lengths]
    Ls = [len(t) for t in targets]
    S = 2 * max(Ls, default=0) + 1
    ext = torch.full((B, S), blank, dtype=torch.long)
    skip = torch.zeros(B, S, dtype=torch.bool)
    for b, tgt in enumerate(targets):
        for i, lab in enumerate(tgt):
            ext[b, 2 * i + 1] = lab
            if i > 0 and tgt[i - 1] != lab:
                skip[b, 2 * i + 1] = True
    feasible = torch.tensor([min_frames(t) <= n for t, n in zip(targets, lengths)], dtype=torch.bool)

    # emissions along the extended label axis: (B, T, S)
    emit = lp.gather(2, ext.unsqueeze(1).expand(B, T, S))
    neg = torch.full((B, S), NEG, dtype=lp.dtype)
    alpha = neg.clone()
    alpha[:, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 1] = emit[:, 0, 1]
    alpha = torch.where(torch.arange(S) < torch.tensor([2 * L + 1 for L in Ls]).unsqueeze(1), alpha, neg)
    len_t = torch.tensor(lengths)
    pad1 = torch.full((B, 1), NEG, dtype=lp.dtype)
    pad2 = torch.full((B, 2), NEG, dtype=lp.dtype)
    for t in range(1, T):
        a1 = torch.cat([pad1, alpha], dim=1)[:, :S]
        a2 = torch.cat([pad2, alpha], dim=1)[:, :S]
        a2 = torch.where(skip, a2, neg)
        new = torch.logsumexp(torch.stack([alpha, a1, a2]), dim=0) + emit[:, t]
        active = (t < len_t).unsqueeze(1)
        alpha = torch.where(active, new, alpha)

    last = torch.tensor([2 * L for L in Ls])
    end_blank = alpha.gather(1, last.unsqueeze(1)).squeeze(1)
    end_label = alpha.gather(1, (last - 1).clamp(min=0).unsqueeze(1)).squeeze(1)
    has_label = torch.tensor([L > 0 for L in Ls])
    ll = torch.where(has_label, torch.logaddexp(end_blank, end_label), end_blank)
    losses = torch.where(feasible, -ll, torch.zeros_like(ll))
    return losses, feasible


def ctc_loss(logits: Tensor, target: Sequence[int], blank: int = BLANK_ID) -> Tensor:
    """-log p(target | logits) for a single (T, c) score matrix."""
    T = logits.shape[0]
    if min_frames(target) > T:
        raise CTCInfeasibleError(
            f"target of length {len(target)} needs {min_frames(target)} frames, only {T} available")
    losses, _ = ctc_loss_batch(logits.unsqueeze(0), [list(target)], blank=blank)
    return losses[0]


def _content(ids, blank):
    return [i for i in ids if i != blank and i >= len(RESERVED)]


def ctc_greedy_decode(logits: Tensor | np.ndarray, blank: int = BLANK_ID) -> DecodeResult:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    lp = log_softmax(torch.as_tensor(logits, dtype=torch.float64), dim=-1)
    best = lp.argmax(dim=-1)
    score = lp.max(dim=-1).values.sum().item()
    path = best.tolist()
    collapsed = [p for i, p in enumerate(path) if i == 0 or p != path[i - 1]]
    ids = [p for p in collapsed if p != blank]
    return DecodeResult(_content(ids, blank), score, "ctc-greedy")


def ctc_beam_decode(logits: Tensor | np.ndarray, beam_width: int = 10,
                    blank: int = BLANK_ID) -> DecodeResult:
    """Prefix beam search in log space.

    The returned score is the total log-probability of the chosen labeling
    (summed over its alignments).  ``beam_width == 1`` degenerates to
    best-path decoding.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if beam_width == 1:
        res = ctc_greedy_decode(logits, blank)
        res.mode = "ctc-beam"
        return res
    lp = log_softmax(torch.as_tensor(logits, dtype=torch.float64), dim=-1).numpy()
    T, C = lp.shape
    ninf = -np.inf
    # prefix -> (log p ending in blank, log p ending in non-blank)
    beams: dict[tuple, tuple[float, float]] = {(): (0.0, ninf)}
    for t in range(T):
        nxt: dict[tuple, list[float]] = defaultdict(lambda: [ninf, ninf])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            e = nxt[prefix]
            e[0] = np.logaddexp(e[0], total + lp[t, blank])
            last = prefix[-1] if prefix else None
            for c in range(C):
                if c == blank:
                    continue
                p = lp[t, c]
                ext = prefix + (c,)
                ee = nxt[ext]
                if c == last:
                    ee[1] = np.logaddexp(ee[1], pb + p)
                    e[1] = np.logaddexp(e[1], pnb + p)
                else:
                    ee[1] = np.logaddexp(ee[1], total + p)
        ranked = sorted(nxt.items(), key=lambda kv: -np.logaddexp(*kv[1]))
        beams = {k: tuple(v) for k, v in ranked[:beam_width]}
    best, (pb, pnb) = max(beams.items(), key=lambda kv: np.logaddexp(*kv[1]))
    return DecodeResult(_content(list(best), blank), float(np.logaddexp(pb, pnb)), "ctc-beam")
