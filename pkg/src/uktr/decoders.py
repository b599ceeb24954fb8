"""Autoregressive Transformer decoder, its loss, context masking and generation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor, nn

from .ctc import DecodeResult
from .nn import (Dropout, Embedding, FeedForward, LayerNorm, Linear, MultiHeadAttention,
                 causal_mask, log_softmax, sinusoidal_positions)
from .tokenizer import BOS_ID, EOS_ID, MASK_ID, PAD_ID, RESERVED


@dataclass
class DecoderConfig:
    layers: int = 3
    heads: int = 8
    ffn: int = 2048
    dropout: float = 0.1
    max_len: int = 256


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, ffn, p, generator=None):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm2 = LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm3 = LayerNorm(d)
        self.ff = FeedForward(d, ffn, p, generator)
        self.drops = nn.ModuleList(Dropout(p, generator) for _ in range(3))

    def forward(self, x, memory, mask):
        h = self.norm1(x)
        x = x + self.drops[0](self.self_attn(h, h, h, mask))
        h = self.norm2(x)
        x = x + self.drops[1](self.cross_attn(h, memory, memory))
        x = x + self.drops[2](self.ff(self.norm3(x)))
        return x


class TransformerDecoder(nn.Module):
    """Causal decoder cross-attending to a (B, d, h, w) feature map."""

    def __init__(self, d: int, vocab_size: int, cfg: DecoderConfig, generator=None):
        super().__init__()
        self.d, self.cfg = d, cfg
        self.embed = Embedding(vocab_size, d)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.ffn, cfg.dropout, generator) for _ in range(cfg.layers))
        self.final_norm = LayerNorm(d) if cfg.layers else None
        self.drop = Dropout(cfg.dropout, generator)
        self.out = Linear(d, vocab_size)

    def embed_context(self, context: Tensor) -> Tensor:
        L = context.shape[1]
        x = self.embed(context) * math.sqrt(self.d)
        return x + sinusoidal_positions(L, self.d, x.dtype)

    def memory(self, u: Tensor) -> Tensor:
        """(B, d, h, w) -> (B, h*w, d) with column positions added, so cross-attention can
        align output tokens with horizontal image position."""
        pe = sinusoidal_positions(u.shape[-1], self.d, u.dtype).T
        return (u + pe[:, None, :]).flatten(2).transpose(1, 2)

    def forward(self, u: Tensor, context: Tensor) -> Tensor:
        L = context.shape[1]
        if L > self.cfg.max_len:
            raise ValueError(f"context length {L} exceeds max_len={self.cfg.max_len}")
        memory = self.memory(u)
        x = self.embed_context(context)
        if not self.layers:
            return self.out(x)
        x = self.drop(x)
        mask = causal_mask(L)
        for layer in self.layers:
            x = layer(x, memory, mask)
        return self.out(self.final_norm(x))


def ar_forward(u: Tensor, context: Tensor, decoder: TransformerDecoder) -> Tensor:
    if (context[:, 0] != BOS_ID).any():
        raise ValueError("context must begin with bos")
    return decoder(u, context)


def ar_loss(logits: Tensor, target: Tensor, pad_id: int = PAD_ID) -> Tensor:
    """Mean token cross-entropy over non-pad target positions."""
    if logits.shape[:-1] != target.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    lp = log_softmax(logits, dim=-1)
    nll = -lp.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    keep = target != pad_id
    return (nll * keep).sum() / keep.sum().clamp(min=1)


def mask_context(context: Tensor, ratio: float = 0.30, generator: torch.Generator | None = None) -> Tensor:
    """Replace round(ratio * n) non-bos, non-pad positions per row with the mask token."""
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    single = context.dim() == 1
    ctx = context.unsqueeze(0).clone() if single else context.clone()
    if ratio > 0:
        for row in ctx:
            eligible = ((row != BOS_ID) & (row != PAD_ID)).nonzero().flatten()
            k = int(math.floor(ratio * len(eligible) + 0.5))
            if k:
                pick = eligible[torch.randperm(len(eligible), generator=generator)[:k]]
                row[pick] = MASK_ID
    return ctx[0] if single else ctx


def make_context_and_target(seqs: Sequence[Sequence[int]]) -> tuple[Tensor, Tensor]:
    """(bos + y, y + eos), right-padded with pad."""
    L = max((len(s) for s in seqs), default=0) + 1
    ctx = torch.full((len(seqs), L), PAD_ID, dtype=torch.long)
    tgt = torch.full((len(seqs), L), PAD_ID, dtype=torch.long)
    for i, s in enumerate(seqs):
        ctx[i, 0] = BOS_ID
        ctx[i, 1:len(s) + 1] = torch.tensor(list(s), dtype=torch.long)
        tgt[i, :len(s)] = torch.tensor(list(s), dtype=torch.long)
        tgt[i, len(s)] = EOS_ID
    return ctx, tgt


def _banned(vocab_size: int) -> Tensor:
    ban = torch.zeros(vocab_size, dtype=torch.bool)
    ban[: len(RESERVED)] = True
    ban[EOS_ID] = False
    return ban


@torch.no_grad()
def ar_generate(u: Tensor, decoder: TransformerDecoder, mode: str = "greedy",
                max_len: int | None = None, beam_width: int = 5) -> list[DecodeResult]:
    """Decode every item of a (B, d, h, w) batch; stops at eos or ``max_len`` tokens."""
    max_len = max_len or decoder.cfg.max_len
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    if mode == "greedy":
        return _greedy(u, decoder, max_len)
    if mode == "beam":
        return [_beam(u[i:i + 1], decoder, max_len, beam_width) for i in range(u.shape[0])]
    raise ValueError(f"unknown mode {mode!r}")


def _greedy(u, decoder, max_len):
    B = u.shape[0]
    ban = _banned(decoder.out.weight.shape[0])
    ctx = torch.full((B, 1), BOS_ID, dtype=torch.long)
    scores = torch.zeros(B, dtype=torch.float64)
    done = torch.zeros(B, dtype=torch.bool)
    out = [[] for _ in range(B)]
    for _ in range(min(max_len + 1, decoder.cfg.max_len)):
        lp = log_softmax(decoder(u, ctx)[:, -1].masked_fill(ban, -1e30), dim=-1)
        best = lp.argmax(dim=-1)
        scores += torch.where(done, 0.0, lp.gather(1, best.unsqueeze(1)).squeeze(1).double())
        for b in range(B):
            if not done[b]:
                if best[b] == EOS_ID:
                    done[b] = True
                elif len(out[b]) < max_len:
                    out[b].append(int(best[b]))
                else:
                    done[b] = True
        if done.all():
            break
        ctx = torch.cat([ctx, best.unsqueeze(1)], dim=1)
    return [DecodeResult(out[b], float(scores[b]), "ar-greedy") for b in range(B)]


def _beam(u, decoder, max_len, width):
    ban = _banned(decoder.out.weight.shape[0])
    beams = [([BOS_ID], 0.0)]
    finished = []
    for _ in range(min(max_len + 1, decoder.cfg.max_len)):
        ctx = torch.tensor([b[0] for b in beams], dtype=torch.long)
        lp = log_softmax(decoder(u.expand(len(beams), *u.shape[1:]), ctx)[:, -1].masked_fill(ban, -1e30), dim=-1)
        cand = []
        for (seq, s), row in zip(beams, lp):
            top = torch.topk(row, min(width, row.numel()))
            for v, i in zip(top.values.tolist(), top.indices.tolist()):
                cand.append((seq + [i], s + v))
        cand.sort(key=lambda x: -x[1])
        beams = []
        for seq, s in cand:
            if seq[-1] == EOS_ID or len(seq) - 1 > max_len:
                finished.append((seq[1:-1] if seq[-1] == EOS_ID else seq[1:max_len + 1], s))
            else:
                beams.append((seq, s))
            if len(beams) == width:
                break
        if not beams or len(finished) >= width:
            break
    finished.extend((seq[1:], s) for seq, s in beams)
    # length-normalized ranking, +1 counts the eos step
    ids, score = max(finished, key=lambda x: x[1] / (len(x[0]) + 1))
    return DecodeResult(list(ids), float(score), "ar-beam")
