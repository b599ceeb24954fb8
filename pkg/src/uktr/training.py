"""Joint CTC + cross-entropy training with the two-phase recipe.

Phase ``general`` trains on document data; phase ``adapt`` continues from a
general checkpoint on scene/handwritten data mixed with an equal number of
document samples.  Both use a triangular cyclic learning rate, Adam and
global-norm gradient clipping.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import torch
from torch import Tensor

from . import checkpoint
from .ctc import ctc_loss_batch
from .data import Sample, to_batch
from .decoders import ar_loss, make_context_and_target, mask_context
from .metrics import cer
from .model import ModelConfig, UKTR
from .nn import backward
from .tokenizer import Vocabulary, decode

log = logging.getLogger(__name__)

PHASE_DEFAULTS = {
    "general": dict(lr_min=1e-5, lr_max=1e-4, epochs=5, batch_size=32),
    "adapt": dict(lr_min=1e-6, lr_max=1e-5, epochs=50, batch_size=32),
}


class NumericError(RuntimeError):
    """A loss became NaN or infinite."""


@dataclass
class TrainConfig:
    phase: str = "general"
    lr_min: float = 1e-5
    lr_max: float = 1e-4
    cycle_period: int = 0          # steps; 0 means two epochs' worth
    epochs: int = 5
    batch_size: int = 32
    grad_clip: float = 50.0
    seed: int = 0
    mask_ratio: float = 0.30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.phase not in PHASE_DEFAULTS:
            raise ValueError(f"phase must be one of {sorted(PHASE_DEFAULTS)}")
        if not 0 < self.lr_min <= self.lr_max:
            raise ValueError("need 0 < lr_min <= lr_max")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    @classmethod
    def for_phase(cls, phase: str, **overrides) -> "TrainConfig":
        return cls(phase=phase, **{**PHASE_DEFAULTS[phase], **overrides})

    @property
    def torch_dtype(self):
        return {"float32": torch.float32, "float64": torch.float64}[self.dtype]


# ------------------------------------------------------------------ pieces

def total_loss(l_ctc: Tensor, l_tr: Tensor) -> Tensor:
    for name, v in (("ctc", l_ctc), ("tr", l_tr)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise NumericError(f"non-finite {name} loss: {float(v)}")
    return l_ctc + l_tr


def cyclic_lr(step: int, lr_min: float, lr_max: float, period: int) -> float:
    """Triangular wave: lr_min at multiples of ``period``, lr_max half-way between."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if period < 2:
        return lr_max
    half = period / 2
    pos = step % period
    frac = pos / half if pos <= half else (period - pos) / half
    if frac >= 1:
        return lr_max  # the additive form below can land an ulp off the peak
    return min(lr_max, lr_min + (lr_max - lr_min) * frac)


@dataclass
class AdamState:
    m: dict[str, Tensor] = field(default_factory=dict)
    v: dict[str, Tensor] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor], state: AdamState, lr: float) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** state.t, 1 - b2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
            m = state.m.get(name)
            if m is None:
                m = state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            v = state.v[name]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    return state


def global_norm(grads: Sequence[Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_gradients(grads: Sequence[Tensor], max_norm: float = 50.0) -> tuple[list[Tensor], float]:
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return list(grads), norm
    scale = max_norm / norm
    out = [g * scale for g in grads]
    # rounding in the gradient dtype can leave the norm a hair above the bound; shrink by one
    # epsilon of that dtype until it holds (a handful of steps at most)
    eps = max(torch.finfo(g.dtype).eps for g in grads)
    while global_norm(out) > max_norm:
        scale *= 1 - eps
        out = [g * scale for g in grads]
    return out, norm


def equal_mix_sampler(n_doc: int, n_sh: int, rng: np.random.Generator) -> list[tuple[str, int]]:
    """One epoch of (source, index) draws: every S&H sample once plus as many documents.

    Documents are subsampled without replacement when there are enough,
    otherwise resampled with replacement.
    """
    if n_doc < 1 or n_sh < 1:
        raise ValueError("both datasets must be non-empty")
    docs = rng.choice(n_doc, size=n_sh, replace=n_doc < n_sh)
    order = [("sh", i) for i in range(n_sh)] + [("doc", int(i)) for i in docs]
    perm = rng.permutation(len(order))
    return [order[i] for i in perm]


# ------------------------------------------------------------------- state

@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    phase: str = "general"
    adam: AdamState = field(default_factory=AdamState)
    torch_rng: torch.Generator = field(default_factory=torch.Generator)
    np_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    running: dict[str, float] = field(default_factory=lambda: {"ctc": 0.0, "tr": 0.0, "total": 0.0})

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        g = torch.Generator()
        g.manual_seed(cfg.seed)
        return cls(phase=cfg.phase, adam=AdamState(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps),
                   torch_rng=g, np_rng=np.random.default_rng(cfg.seed))


def save_training_checkpoint(path, model: UKTR, state: TrainState, vocab: Vocabulary,
                             train_cfg: TrainConfig, extra: dict | None = None) -> None:
    tensors = dict(model.state_dict())
    for name in model.state_dict():
        if name in state.adam.m:
            tensors[f"optim.m.{name}"] = state.adam.m[name]
            tensors[f"optim.v.{name}"] = state.adam.v[name]
    tensors["optim.rng.torch"] = state.torch_rng.get_state()
    meta = {
        "model_config": model.cfg.to_dict(),
        "train_config": asdict(train_cfg),
        "vocab": list(vocab.entries),
        "state": {"step": state.step, "epoch": state.epoch, "phase": state.phase,
                  "adam_t": state.adam.t, "running": state.running,
                  "np_rng": state.np_rng.bit_generator.state},
        **(extra or {}),
    }
    checkpoint.save(path, tensors, meta)


def load_training_checkpoint(path) -> tuple[UKTR, TrainState, Vocabulary, dict]:
    tensors, meta = checkpoint.load(path)
    model = UKTR(ModelConfig(**meta["model_config"]))
    model_keys = set(model.state_dict())
    model.to(tensors[next(iter(model_keys))].dtype)
    model.load_state_dict({k: v for k, v in tensors.items() if k in model_keys})
    tc = meta["train_config"]
    st = meta["state"]
    adam = AdamState(t=st["adam_t"], beta1=tc["beta1"], beta2=tc["beta2"], eps=tc["eps"])
    for k in model_keys:
        if f"optim.m.{k}" in tensors:
            adam.m[k] = tensors[f"optim.m.{k}"]
            adam.v[k] = tensors[f"optim.v.{k}"]
    g = torch.Generator()
    g.set_state(tensors["optim.rng.torch"])
    npr = np.random.default_rng()
    npr.bit_generator.state = st["np_rng"]
    state = TrainState(step=st["step"], epoch=st["epoch"], phase=st["phase"], adam=adam,
                       torch_rng=g, np_rng=npr, running=dict(st["running"]))
    return model, state, Vocabulary(tuple(meta["vocab"])), meta


# ------------------------------------------------------------------- steps

def compute_losses(model: UKTR, samples: Sequence[Sample], vocab: Vocabulary, mask_ratio: float,
                   generator: torch.Generator | None, dtype=torch.float32) -> tuple[Tensor, Tensor, Tensor]:
    batch = to_batch(samples, vocab, dtype)
    ctx, tgt = make_context_and_target(batch.targets)
    ctx = mask_context(ctx, mask_ratio, generator)
    out = model(batch.images, ctx)
    per_sample, feasible = ctc_loss_batch(out.ctc_logits, batch.targets)
    if not feasible.all():
        bad = [batch.texts[i] for i in (~feasible).nonzero().flatten().tolist()]
        log.warning("CTC infeasible for %d sample(s), contributing zero: %s", len(bad), bad[:3])
    l_ctc = per_sample.sum() / max(int(feasible.sum()), 1)
    l_tr = ar_loss(out.ar_logits, tgt)
    return l_ctc, l_tr, total_loss(l_ctc, l_tr)


def train_step(model: UKTR, samples: Sequence[Sample], vocab: Vocabulary, state: TrainState,
               cfg: TrainConfig, period: int) -> dict[str, float]:
    model.train()
    model.set_generator(state.torch_rng)
    l_ctc, l_tr, l_total = compute_losses(model, samples, vocab, cfg.mask_ratio, state.torch_rng,
                                          cfg.torch_dtype)
    names = [n for n, p in model.named_parameters() if p.requires_grad]
    params = dict(model.named_parameters())
    grads = backward(l_total, [params[n] for n in names])
    grads, norm = clip_gradients(grads, cfg.grad_clip)
    lr = cyclic_lr(state.step, cfg.lr_min, cfg.lr_max, period)
    adam_step({n: params[n] for n in names}, dict(zip(names, grads)), state.adam, lr)
    state.step += 1
    return {"ctc": l_ctc.item(), "tr": l_tr.item(), "total": l_total.item(), "lr": lr, "grad_norm": norm}


def _batches(items: list, size: int) -> Iterator[list]:
    for i in range(0, len(items), size):
        yield items[i:i + size]


def epoch_order(datasets: Mapping[str, Sequence[Sample]], phase: str, rng: np.random.Generator) -> list[Sample]:
    if phase == "general":
        docs = datasets["document"]
        if not docs:
            raise ValueError("document dataset is empty")
        return [docs[i] for i in rng.permutation(len(docs))]
    docs, sh = datasets["document"], datasets["scene_handwritten"]
    plan = equal_mix_sampler(len(docs), len(sh), rng)
    return [sh[i] if src == "sh" else docs[i] for src, i in plan]


def steps_per_epoch(datasets: Mapping[str, Sequence[Sample]], cfg: TrainConfig) -> int:
    n = len(datasets["document"]) if cfg.phase == "general" else 2 * len(datasets["scene_handwritten"])
    return max(1, math.ceil(n / cfg.batch_size))


@torch.no_grad()
def quick_cer(model: UKTR, samples: Sequence[Sample], vocab: Vocabulary, batch_size: int = 64,
              dtype=torch.float32) -> float:
    model.eval()
    preds = []
    for chunk in _batches(list(samples), batch_size):
        for res in model.recognize(to_batch(chunk, vocab, dtype).images, "ctc"):
            preds.append(decode(res.ids, vocab))
    return cer(preds, [s.text for s in samples]).cer


def run_phase(model: UKTR, datasets: Mapping[str, Sequence[Sample]], cfg: TrainConfig, vocab: Vocabulary,
              out_dir: str | Path | None = None, state: TrainState | None = None,
              eval_sets: Mapping[str, Sequence[Sample]] | None = None,
              meta: dict | None = None) -> tuple[TrainState, list[dict]]:
    """Train for ``cfg.epochs`` epochs; writes a CSV log and a checkpoint per epoch into ``out_dir``.

    ``datasets`` needs key ``document`` (and ``scene_handwritten`` for the
    adapt phase).  Passing a ``state`` of the same phase continues it.
    ``meta`` is stored in every checkpoint alongside the training state.
    """
    if cfg.phase == "adapt" and not datasets.get("scene_handwritten"):
        raise ValueError("adapt phase needs a non-empty scene_handwritten dataset")
    if state is None or state.phase != cfg.phase:
        state = TrainState.fresh(cfg)
    period = cfg.cycle_period or 2 * steps_per_epoch(datasets, cfg)
    eval_sets = eval_sets or {}
    header = ["epoch", "l_ctc", "l_tr", "l_total", "lr"] + [f"cer_{k}" for k in eval_sets]
    rows: list[dict] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / f"metrics_{cfg.phase}.csv"
        if not log_path.exists() or state.epoch == 0:
            with open(log_path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(header)

    model.to(cfg.torch_dtype)
    while state.epoch < cfg.epochs:
        sums = {"ctc": 0.0, "tr": 0.0, "total": 0.0}
        n = 0
        lr = cyclic_lr(state.step, cfg.lr_min, cfg.lr_max, period)
        for chunk in _batches(epoch_order(datasets, cfg.phase, state.np_rng), cfg.batch_size):
            res = train_step(model, chunk, vocab, state, cfg, period)
            for k in sums:
                sums[k] += res[k]
            n += 1
            lr = res["lr"]
        state.epoch += 1
        state.running = {k: v / max(n, 1) for k, v in sums.items()}
        row = {"epoch": state.epoch, "l_ctc": state.running["ctc"], "l_tr": state.running["tr"],
               "l_total": state.running["total"], "lr": lr}
        for k, samples in eval_sets.items():
            row[f"cer_{k}"] = quick_cer(model, samples, vocab, dtype=cfg.torch_dtype)
        rows.append(row)
        log.info("phase=%s epoch=%d %s", cfg.phase, state.epoch,
                 " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "epoch"))
        if out:
            with open(out / f"metrics_{cfg.phase}.csv", "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow([row[h] for h in header])
            save_training_checkpoint(out / f"{cfg.phase}_epoch{state.epoch:03d}.ckpt", model, state, vocab, cfg, meta)
            save_training_checkpoint(out / f"{cfg.phase}_last.ckpt", model, state, vocab, cfg, meta)
    if out and not rows:
        save_training_checkpoint(out / f"{cfg.phase}_last.ckpt", model, state, vocab, cfg, meta)
    return state, rows


def two_phase(model: UKTR, doc: Sequence[Sample], sh: Sequence[Sample], vocab: Vocabulary,
              general: TrainConfig, adapt: TrainConfig, out_dir: str | Path | None = None,
              eval_sets=None) -> list[dict]:
    """General training on ``doc`` followed by modality adaptation on ``sh`` + equal-mixed ``doc``."""
    _, rows1 = run_phase(model, {"document": doc}, general, vocab, out_dir, eval_sets=eval_sets)
    _, rows2 = run_phase(model, {"document": doc, "scene_handwritten": sh}, adapt, vocab, out_dir,
                         eval_sets=eval_sets)
    return rows1 + rows2
