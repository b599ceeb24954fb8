"""Acceptance criteria, each checked at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line (also printed in the terminal
summary) before asserting.  Criteria 6 and 7 share one toy training sweep,
configured by ``configs/toy.cfg``.
"""

import math
import random
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import VERDICTS
from oracles import ctc_enumerate, edit_distance_recursive
from uktr.config import load
from uktr.ctc import ctc_loss
from uktr.data import SynthConfig, Sample, preprocess, synth_samples
from uktr.decoders import DecoderConfig, TransformerDecoder, ar_loss
from uktr.encoder import EncoderConfig, VisualEncoder
from uktr.evaluation import AblationSetup, Variant, run_variant, make_toy_data, time_decoders
from uktr.mafs import Adapter, Router, aggregate
from uktr.metrics import cer, edit_distance
from uktr.model import ModelConfig, UKTR
from uktr.nn import GroupNorm, LayerNorm, MultiHeadAttention, conv2d, gradcheck
from uktr.tokenizer import COENG, UNK_ID, build_vocab, decode, encode, segment
from uktr.training import (TrainConfig, TrainState, clip_gradients, cyclic_lr, epoch_order, equal_mix_sampler,
                           load_training_checkpoint, save_training_checkpoint, train_step)

ROOT = Path(__file__).resolve().parents[1]
F64 = torch.float64


def verdict(n: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'} ({detail})"
    VERDICTS.append(line)
    print(line)
    assert ok, line


# ----------------------------------------------------------------- 1

def test_1_parameter_counts():
    enc = VisualEncoder(EncoderConfig())
    dec = TransformerDecoder(512, 11899, DecoderConfig())
    counts = {"transformer encoder": (sum(p.numel() for p in enc.tr.parameters()), 9.5e6, 0.02),
              "transformer decoder": (sum(p.numel() for p in dec.parameters()), 24.08e6, 0.10),
              "cnn backbone": (sum(p.numel() for p in enc.cnn.parameters()), 13.0e6, 0.15)}
    parts, ok = [], True
    for name, (n, target, tol) in counts.items():
        dev = (n - target) / target
        ok &= abs(dev) <= tol
        parts.append(f"{name} {n:,} ({dev:+.2%}, tol {tol:.0%})")
    verdict(1, "parameter counts", ok, "; ".join(parts))


# ----------------------------------------------------------------- 2

def test_2_ctc_matches_enumeration():
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    while n < 500:
        T, c, L = int(rng.integers(1, 7)), int(rng.integers(2, 5)), int(rng.integers(0, 4))
        target = [int(x) for x in rng.integers(1, c, size=L)]
        logits = rng.normal(scale=2.0, size=(T, c))
        ref = ctc_enumerate(logits, target)
        if math.isinf(ref):
            continue   # infeasible alignment; covered by the unit tests
        got = float(ctc_loss(torch.tensor(logits), target))
        worst = max(worst, abs(got - ref))
        n += 1
    verdict(2, "CTC vs enumeration", worst < 1e-9, f"500 instances, max |diff| = {worst:.2e}")


# ----------------------------------------------------------------- 3

def _grad_cases(seed):
    g = torch.Generator().manual_seed(seed)

    def r(*s):
        return torch.randn(*s, generator=g, dtype=F64)

    def leaf(*s):
        return r(*s).requires_grad_()

    cases = {}
    x, w, b = leaf(1, 2, 5, 5), leaf(3, 2, 3, 3), leaf(3)
    proj = r(1, 3, 3, 3)
    cases["conv"] = (lambda: (conv2d(x, w, b, stride=2, padding=1) * proj).sum(), [x, w, b])

    mha = MultiHeadAttention(6, 2).double()
    q, kv = leaf(1, 3, 6), leaf(1, 4, 6)
    mask = torch.ones(3, 4, dtype=torch.bool).tril(1)
    pa = r(1, 3, 6)
    cases["attention"] = (lambda: (mha(q, kv, kv, mask, return_weights=True)[0] * pa).sum(),
                          [q, kv, mha.q.weight, mha.o.bias])

    ln, gn = LayerNorm(6).double(), GroupNorm(4, 2).double()
    xn, xg = leaf(2, 6), leaf(1, 4, 2, 3)
    pn, pg = r(2, 6), r(1, 4, 2, 3)
    cases["norm"] = (lambda: (ln(xn) * pn).sum() + (gn(xg) * pg).sum(), [xn, xg, ln.weight, gn.bias])

    ad = Adapter(5, 3).double()
    xa, pad_ = leaf(1, 5, 2, 3), r(1, 5, 2, 3)
    cases["adapters"] = (lambda: (ad(xa) * pad_).sum(), [xa, ad.down.weight, ad.up.bias])

    ro = Router(8, 3).double()
    z, pr = leaf(2, 8), r(2, 3)
    cases["router"] = (lambda: (ro(z) * pr).sum(), [z, ro.fc1.weight, ro.fc2.bias])

    lc = leaf(6, 5)
    cases["ctc"] = (lambda: ctc_loss(lc, [1, 3, 3]), [lc])

    le = leaf(2, 4, 7)
    tgt = torch.tensor([[2, 5, 3, 1], [6, 3, 1, 1]])
    cases["cross-entropy"] = (lambda: ar_loss(le, tgt), [le])
    return cases


def test_3_gradient_checks():
    worst = {}
    for seed in range(20):
        with torch.no_grad():
            pass
        torch.manual_seed(seed)
        for name, (fn, inputs) in _grad_cases(seed).items():
            worst[name] = max(worst.get(name, 0.0), *gradcheck(fn, inputs, h=1e-5))
    ok = all(v < 1e-4 for v in worst.values())
    verdict(3, "gradient checks", ok, "20 instances each; worst rel. error " +
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


# ----------------------------------------------------------------- 4

def test_4_mafs_invariants():
    rng = np.random.default_rng(4)
    fails = {"simplex": 0, "vertex": 0, "hull": 0, "linearity": 0}
    for i in range(1000):
        n, d, h, w = (int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 4)),
                      int(rng.integers(1, 6)))
        torch.manual_seed(i)
        router = Router(max(d, 4), n).double()
        z = torch.tensor(rng.normal(scale=3, size=(2, max(d, 4))))
        r = router(z)
        if not ((r >= 0).all() and torch.allclose(r.sum(-1), torch.ones(2, dtype=F64), atol=1e-12, rtol=0)):
            fails["simplex"] += 1
        H = torch.tensor(rng.normal(size=(2, n, d, h, w)))
        H1 = H.mean(-2)
        k = int(rng.integers(0, n))
        onehot = torch.zeros(2, n, dtype=F64)
        onehot[:, k] = 1
        u, u1 = aggregate(H, H1, onehot)
        if not (torch.equal(u, H[:, k]) and torch.equal(u1, H1[:, k])):
            fails["vertex"] += 1
        u, _ = aggregate(H, H1, r)
        if not ((u <= H.amax(1) + 1e-12).all() and (u >= H.amin(1) - 1e-12).all()):
            fails["hull"] += 1
        r2 = torch.softmax(torch.tensor(rng.normal(size=(2, n))), -1)
        a = float(rng.uniform())
        lhs, _ = aggregate(H, H1, a * r + (1 - a) * r2)
        rhs = a * aggregate(H, H1, r)[0] + (1 - a) * aggregate(H, H1, r2)[0]
        if not torch.allclose(lhs, rhs, atol=1e-12, rtol=1e-12):
            fails["linearity"] += 1
    verdict(4, "MAFS invariants", not any(fails.values()),
            "1000 configurations; failures " + ", ".join(f"{k}={v}" for k, v in fails.items()))


# ----------------------------------------------------------------- 5

def _mixed_corpus(n_lines, seed):
    rnd = random.Random(seed)
    consonants = [chr(c) for c in range(0x1780, 0x17A3)]
    vowels = [chr(c) for c in range(0x17B6, 0x17C6)]
    signs = [chr(c) for c in range(0x17C6, 0x17D2)]
    latin = list("ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz")
    other = list("0123456789០១២៣៤៥៦៧៨៩ .,;:!?()-/។៕«»") + ["​"]
    lines = []
    for _ in range(n_lines):
        parts = []
        for _ in range(rnd.randint(0, 15)):
            kind = rnd.random()
            if kind < 0.5:
                c = rnd.choice(consonants)
                if rnd.random() < 0.3:
                    c += COENG + rnd.choice(consonants)
                if rnd.random() < 0.6:
                    c += rnd.choice(vowels)
                if rnd.random() < 0.2:
                    c += rnd.choice(signs)
                parts.append(c)
            elif kind < 0.7:
                parts.append(rnd.choice(latin))
            elif kind < 0.95:
                parts.append(rnd.choice(other))
            else:   # stray combining marks and arbitrary codepoints
                parts.append(rnd.choice(vowels + signs + [chr(rnd.randint(0x20, 0x2FFF))]))
        lines.append("".join(parts))
    return lines


def test_5_tokenizer_partition_and_round_trip():
    corpus = _mixed_corpus(10_000, 5)
    vocab = build_vocab(corpus)
    bad_partition = sum(1 for line in corpus if "".join(c.text for c in segment(line)) != line)
    bad_trip = 0
    for line in corpus:
        ids = encode(line, vocab)
        if UNK_ID in ids or decode(ids, vocab) != line:
            bad_trip += 1
    verdict(5, "tokenizer", bad_partition == 0 and bad_trip == 0,
            f"10000 lines, vocab {len(vocab)}; partition failures {bad_partition}, round-trip failures {bad_trip}")


# ------------------------------------------------------------- 6 and 7

SEEDS = (0, 1, 2)
BUDGET_S = 30 * 60


def _toy_setup():
    cfg = load(ROOT / "configs" / "toy.cfg")
    return AblationSetup(model=cfg.model_config, synth=cfg.synth, eval_per_modality=cfg.data.eval_per_modality,
                         height=cfg.data.height, general=cfg.general, adapt=cfg.adapt)


@pytest.fixture(scope="module")
def sweep():
    torch.set_num_threads(1)
    setup = _toy_setup()
    t0 = time.time()
    results = {}
    for seed in SEEDS:
        data = make_toy_data(setup, seed)
        for label, over in (("mafs", {}), ("no_mafs", {"mafs.enabled": False})):
            results[(label, seed)] = run_variant(setup, Variant(label, over), seed, data)
    return setup, results, time.time() - t0


@pytest.mark.slow
def test_6_toy_ablation(sweep):
    setup, results, elapsed = sweep
    wins = {"scene": 0, "handwritten": 0}
    rows = []
    for seed in SEEDS:
        for mod in wins:
            a = results[("mafs", seed)].cer_of(mod, "ctc")
            b = results[("no_mafs", seed)].cer_of(mod, "ctc")
            wins[mod] += a <= b
            rows.append(f"s{seed} {mod} {a:.3f}/{b:.3f}")
    ok = all(v >= 2 for v in wins.values()) and elapsed <= BUDGET_S
    verdict(6, "toy MAFS ablation", ok,
            f"with/without CTC CER: {', '.join(rows)}; wins {wins}; sweep {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_7_decoder_ordering(sweep):
    setup, results, _ = sweep
    long_cfg = SynthConfig(samples=12, proportions=(1.0, 0.0, 0.0), min_len=20, max_len=24, seed=777,
                           alphabet=setup.synth.alphabet)
    long = [Sample(preprocess(png, setup.height), text, mod) for mod, text, png in synth_samples(long_cfg)]
    timing_ok, acc_wins, parts = True, 0, []
    for seed in SEEDS:
        res = results[("mafs", seed)]
        t = time_decoders(res.model, long, build_vocab(setup.synth.alphabet))
        timing_ok &= t["ar"] > t["ctc"]
        agg = {}
        for dec in ("ctc", "ar"):
            reps = [r for r in res.reports if r.decoder == dec]
            agg[dec] = sum(r.total_dist for r in reps) / sum(r.total_chars for r in reps)
        acc_wins += agg["ar"] <= agg["ctc"]
        parts.append(f"s{seed} time ar {t['ar'] * 1e3:.1f}ms ctc {t['ctc'] * 1e3:.1f}ms, "
                     f"CER ar {agg['ar']:.3f} ctc {agg['ctc']:.3f}")
    verdict(7, "decoder ordering", timing_ok and acc_wins >= 2,
            f"{'; '.join(parts)}; AR at least as accurate in {acc_wins}/3 seeds")


# ----------------------------------------------------------------- 8

def _tiny_model(vocab):
    cfg = ModelConfig.toy(vocab_size=len(vocab)).to_dict()
    cfg["encoder"].update(channels=(4, 4, 8, 8, 16, 16), d=16, ffn=32)
    cfg["mafs"].update(d=16, p=4)
    cfg["decoder"].update(ffn=32)
    torch.manual_seed(0)
    return UKTR(ModelConfig(**cfg)).double()


def test_8_training_machinery(tmp_path):
    notes, ok = [], True
    # cyclic schedule: exact endpoints and peak
    lo, hi, period = 1e-5, 1e-4, 40
    exact = all(cyclic_lr(k * period, lo, hi, period) == lo and cyclic_lr(k * period + period // 2, lo, hi, period) == hi
                for k in range(50))
    ok &= exact
    notes.append(f"lr endpoints/peak exact: {exact}")
    # clipping never leaves a norm above 50
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        grads = [torch.tensor(rng.normal(scale=10 ** rng.uniform(-2, 4), size=int(s)))
                 for s in rng.integers(1, 50, size=3)]
        out, _ = clip_gradients(grads, 50.0)
        worst = max(worst, math.sqrt(sum(float((g ** 2).sum()) for g in out)))
    ok &= worst <= 50.0
    notes.append(f"max post-clip norm {worst:.12g}")
    # equal mixing
    plan = equal_mix_sampler(1600, 400, np.random.default_rng(0))
    frac = sum(src == "sh" for src, _ in plan) / len(plan)
    ok &= abs(frac - 0.5) <= 0.01
    notes.append(f"mix fraction {frac:.3f}")
    # resume reproduces the next 10 losses bit-exactly in float64
    synth = SynthConfig(samples=24, min_len=1, max_len=3, seed=8)
    samples = [Sample(preprocess(png, 16), t, m) for m, t, png in synth_samples(synth)]
    vocab = build_vocab(synth.alphabet)
    cfg = TrainConfig.for_phase("general", lr_min=1e-4, lr_max=1e-3, dtype="float64", seed=3)
    model, state = _tiny_model(vocab), TrainState.fresh(cfg)

    def steps(m, st, k):
        out = []
        for _ in range(k):
            order = epoch_order({"document": samples}, "general", st.np_rng)
            out.append(train_step(m, order[:4], vocab, st, cfg, period=6)["total"])
        return out

    steps(model, state, 4)
    save_training_checkpoint(tmp_path / "r.ckpt", model, state, vocab, cfg)
    ref = steps(model, state, 10)
    m2, s2, v2, _ = load_training_checkpoint(tmp_path / "r.ckpt")
    again = steps(m2, s2, 10)
    same = ref == again
    ok &= same
    notes.append(f"resume bit-exact over 10 losses: {same}")
    verdict(8, "training machinery", ok, "; ".join(notes))


# ----------------------------------------------------------------- 9

def test_9_cer():
    rnd = random.Random(9)
    alphabet = "abcកខគ្ាិ "
    mism = 0
    pairs = []
    for _ in range(1000):
        a = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(0, 12)))
        b = "".join(rnd.choice(alphabet) for _ in range(rnd.randint(1, 12)))
        pairs.append((a, b))
        mism += edit_distance(a, b) != edit_distance_recursive(a, b)
    preds, refs = zip(*pairs)
    rep = cer(list(preds), list(refs))
    expected = sum(edit_distance_recursive(a, b) for a, b in pairs) / sum(len(b) for b in refs)
    exact = rep.cer == expected
    verdict(9, "CER", mism == 0 and exact,
            f"1000 pairs, {mism} mismatches vs recursion; corpus CER {rep.cer:.6f} == sum/sum: {exact}")
