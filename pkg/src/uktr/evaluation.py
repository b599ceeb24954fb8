"""Benchmarking, decoder timing and the ablation harness."""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import torch

from .data import MODALITIES, Sample, SynthConfig, preprocess, synth_samples, to_batch
from .metrics import CerReport, cer
from .model import ModelConfig, UKTR
from .tokenizer import Vocabulary, build_vocab, decode
from .training import TrainConfig, two_phase

log = logging.getLogger(__name__)

BENCH_HEADER = ["dataset", "modality", "decoder", "samples", "total_chars", "total_dist", "cer"]


@torch.no_grad()
def predict(model: UKTR, samples: Sequence[Sample], vocab: Vocabulary, decoder: str,
            batch_size: int = 32, beam_width: int = 1) -> list[str]:
    model.eval()
    dtype = next(model.parameters()).dtype
    out = []
    for i in range(0, len(samples), batch_size):
        images = to_batch(samples[i:i + batch_size], vocab, dtype).images
        out.extend(decode(r.ids, vocab) for r in model.recognize(images, decoder, beam_width))
    return out


def benchmark(model: UKTR, datasets: Mapping[str, Sequence[Sample]], vocab: Vocabulary,
              decoders: Sequence[str] = ("ctc", "ar"), model_id: str = "",
              batch_size: int = 32) -> list[CerReport]:
    """One CER report per (dataset, decoder)."""
    reports = []
    for name, samples in datasets.items():
        if not samples:
            raise ValueError(f"dataset {name!r} has no samples")
        refs = [s.text for s in samples]
        modality = samples[0].modality
        for dec in decoders:
            preds = predict(model, samples, vocab, dec, batch_size)
            reports.append(cer(preds, refs, name, dec, model_id, modality))
    return reports


def reports_to_csv(reports: Sequence[CerReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_HEADER)
    for r in reports:
        w.writerow([r.dataset, r.modality, r.decoder, r.samples, r.total_chars, r.total_dist, repr(r.cer)])
    return buf.getvalue()


@torch.no_grad()
def time_decoders(model: UKTR, samples: Sequence[Sample], vocab: Vocabulary,
                  decoders: Sequence[str] = ("ctc", "ar")) -> dict[str, float]:
    """Mean per-image wall time (seconds, batch of one, encoder included)."""
    model.eval()
    dtype = next(model.parameters()).dtype
    times = {}
    for dec in decoders:
        total = 0.0
        for s in samples:
            img = to_batch([s], vocab, dtype).images
            t0 = time.perf_counter()
            model.recognize(img, dec)
            total += time.perf_counter() - t0
        times[dec] = total / len(samples)
    return times


# ---------------------------------------------------------------- ablation

@dataclass
class Variant:
    label: str
    overrides: dict = field(default_factory=dict)   # flat "section.key" -> value


@dataclass
class AblationSetup:
    """Everything a toy ablation run needs besides the variant and seed."""

    model: Callable[[int], ModelConfig] = lambda vocab_size: ModelConfig.toy(vocab_size)
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(samples=2000))
    eval_per_modality: int = 60
    height: int = 16
    general: TrainConfig = field(default_factory=lambda: TrainConfig.for_phase("general"))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig.for_phase("adapt"))
    decoders: tuple = ("ctc", "ar")


@dataclass
class AblationResult:
    label: str
    seed: int
    reports: list[CerReport]
    history: list[dict] = field(default_factory=list)
    timing: dict = field(default_factory=dict)
    model: UKTR | None = field(default=None, repr=False, compare=False)

    def cer_of(self, dataset: str, decoder: str) -> float:
        for r in self.reports:
            if r.dataset == dataset and r.decoder == decoder:
                return r.cer
        raise KeyError((dataset, decoder))


def _decode_samples(triples, height) -> dict[str, list[Sample]]:
    out: dict[str, list[Sample]] = {m: [] for m in MODALITIES}
    for modality, text, png in triples:
        out[modality].append(Sample(preprocess(png, height), text, modality))
    return out


def make_toy_data(setup: AblationSetup, seed: int):
    """Seeded imbalanced training split plus a balanced evaluation split."""
    train = _decode_samples(synth_samples(replace(setup.synth, seed=seed)), setup.height)
    n = setup.eval_per_modality
    ev_cfg = replace(setup.synth, seed=seed + 100_003, samples=n * len(MODALITIES),
                     proportions=tuple(1 / len(MODALITIES) for _ in MODALITIES))
    evals = _decode_samples(synth_samples(ev_cfg), setup.height)
    vocab = build_vocab(list(setup.synth.alphabet) + [s.text for v in train.values() for s in v])
    return train, evals, vocab


def apply_overrides(cfg: ModelConfig, overrides: Mapping[str, object]) -> ModelConfig:
    from .config import set_flat
    d = cfg.to_dict()
    for k, v in overrides.items():
        set_flat(d, k, v)
    return ModelConfig(**d)


def run_variant(setup: AblationSetup, variant: Variant, seed: int, data=None,
                out_dir: str | Path | None = None) -> AblationResult:
    train, evals, vocab = data or make_toy_data(setup, seed)
    torch.manual_seed(seed)
    model = UKTR(apply_overrides(setup.model(len(vocab)), variant.overrides))
    sh = train["scene"] + train["handwritten"]
    history = two_phase(model, train["document"], sh, vocab,
                        replace(setup.general, seed=seed), replace(setup.adapt, seed=seed), out_dir)
    reports = benchmark(model, evals, vocab, setup.decoders, model_id=f"{variant.label}/seed{seed}")
    return AblationResult(variant.label, seed, reports, history, model=model)


def run_ablation(setup: AblationSetup, variants: Sequence[Variant], seeds: Sequence[int],
                 out_dir: str | Path | None = None) -> list[AblationResult]:
    """Train and evaluate every variant on every seed; variants share each seed's data."""
    if not variants or not seeds:
        raise ValueError("need at least one variant and one seed")
    results = []
    for seed in seeds:
        data = make_toy_data(setup, seed)
        for v in variants:
            t0 = time.time()
            sub = Path(out_dir) / f"{v.label}_seed{seed}" if out_dir else None
            res = run_variant(setup, v, seed, data, sub)
            log.info("ablation %s seed=%d done in %.0fs: %s", v.label, seed, time.time() - t0,
                     {(r.dataset, r.decoder): round(r.cer, 4) for r in res.reports})
            results.append(res)
    return results


ABLATION_HEADER = ["variant", "seed", "dataset", "modality", "samples", "total_chars"]


def ablation_to_csv(results: Sequence[AblationResult], decoders: Sequence[str] = ("ctc", "ar")) -> str:
    """One row per (variant, seed, dataset) with a CER column per decoder."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_HEADER + [f"cer_{d}" for d in decoders])
    for res in results:
        for ds in dict.fromkeys(r.dataset for r in res.reports):
            first = next(r for r in res.reports if r.dataset == ds)
            w.writerow([res.label, res.seed, ds, first.modality, first.samples, first.total_chars]
                       + [repr(res.cer_of(ds, d)) for d in decoders])
    return buf.getvalue()
