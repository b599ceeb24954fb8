"""Command-line entry point: ``uktr <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing/bad manifest, image or checkpoint), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import config as config_mod
from .checkpoint import CheckpointError
from .data import (MODALITIES, DatasetManifest, ManifestError, load_manifest, preprocess,
                   synth_generate)
from .evaluation import AblationSetup, Variant, ablation_to_csv, benchmark, reports_to_csv, run_ablation
from .model import UKTR
from .tokenizer import Vocabulary, build_vocab, decode, encode
from .training import NumericError, load_training_checkpoint, run_phase

log = logging.getLogger("uktr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ helpers

def _load_config(args) -> config_mod.RunConfig:
    flat = config_mod.parse(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        flat[k] = config_mod._parse_value(v)
    return config_mod.from_dict(flat)


def _echo(cfg: config_mod.RunConfig, name: str = "config.cfg") -> None:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(cfg.out_dir / name)


def _manifests(directory: Path, required: bool = True) -> dict[str, DatasetManifest]:
    out = {}
    for m in MODALITIES:
        p = directory / f"{m}.tsv"
        if p.exists():
            out[m] = load_manifest(p, m)
        elif required:
            raise FileNotFoundError(f"missing manifest {p}")
    return out


def _inputs(paths: list[str]) -> list[tuple[Path, str | None]]:
    """Expand image paths and .tsv manifests into (image path, reference or None)."""
    items = []
    for p in map(Path, paths):
        if p.suffix == ".tsv":
            m = load_manifest(p)
            items.extend((m.root / rel, text) for rel, text in m.entries)
        else:
            if not p.exists():
                raise FileNotFoundError(f"image not found: {p}")
            items.append((p, None))
    return items


def _load_model(path: str) -> tuple[UKTR, Vocabulary, dict]:
    model, _, vocab, meta = load_training_checkpoint(path)
    model.eval()
    return model, vocab, meta


# ----------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    _echo(cfg)
    train = synth_generate(cfg.synth, cfg.train_dir)
    n_eval = cfg.data.eval_per_modality
    eval_cfg = replace(cfg.synth, seed=cfg.synth.seed + 100_003, samples=n_eval * len(MODALITIES),
                       proportions=tuple(1 / len(MODALITIES) for _ in MODALITIES))
    ev = synth_generate(eval_cfg, cfg.eval_dir)
    for name, group in (("train", train), ("eval", ev)):
        print(name + " " + " ".join(f"{m}={len(group[m])}" for m in MODALITIES))
    return EXIT_OK


def cmd_tokenize(args) -> int:
    lines = sys.stdin.read().splitlines()
    if args.build_vocab:
        vocab = build_vocab(lines)
        vocab.save(args.build_vocab)
        print(f"{len(vocab)} entries -> {args.build_vocab}", file=sys.stderr)
        return EXIT_OK
    if not args.vocab:
        raise UsageError("tokenize needs --vocab (or --build-vocab)")
    vocab = Vocabulary.load(args.vocab)
    for line in lines:
        print(" ".join(str(i) for i in encode(line, vocab)))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tcfg = cfg.general if args.phase == "general" else cfg.adapt
    if args.phase == "adapt" and not args.resume:
        raise UsageError("the adapt phase needs --resume <general checkpoint>")
    man = _manifests(cfg.train_dir)
    h = cfg.data.height
    docs = man["document"].load_samples(h)
    sh = man["scene"].load_samples(h) + man["handwritten"].load_samples(h)
    evals = {m: x.load_samples(h) for m, x in _manifests(cfg.eval_dir, required=False).items() if len(x)}

    if args.resume:
        model, state, vocab, meta = load_training_checkpoint(args.resume)
        if meta.get("height", h) != h:
            raise UsageError(f"checkpoint was trained at height {meta['height']}, config says {h}")
    else:
        if cfg.data.vocab:
            vocab = Vocabulary.load(cfg.data.vocab)
        else:
            vocab = build_vocab(list(cfg.synth.alphabet) + [s.text for s in docs + sh])
        torch.manual_seed(cfg.run.seed)
        model, state = UKTR(cfg.model_config(len(vocab))), None
    _echo(cfg, f"config_{args.phase}.cfg")
    vocab.save(cfg.out_dir / "vocab.txt")
    datasets = {"document": docs} if args.phase == "general" else {"document": docs, "scene_handwritten": sh}
    _, rows = run_phase(model, datasets, tcfg, vocab, cfg.out_dir, state, evals,
                        meta={"height": h, "seed": cfg.run.seed})
    for r in rows:
        print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    return EXIT_OK


def cmd_recognize(args) -> int:
    model, vocab, meta = _load_model(args.checkpoint)
    height = meta.get("height", 32)
    items = _inputs(args.inputs)
    dtype = next(model.parameters()).dtype
    for path, _ in items:
        img = preprocess(path.read_bytes(), height)
        batch = torch.from_numpy(img).unsqueeze(0).to(dtype)
        t0 = time.perf_counter()
        res = model.recognize(batch, args.decoder, args.beam)[0]
        dt = time.perf_counter() - t0
        line = f"{path}\t{decode(res.ids, vocab)}"
        if args.timing:
            line += f"\t{dt:.6f}"
        print(line)
    return EXIT_OK


def cmd_benchmark(args) -> int:
    model, vocab, meta = _load_model(args.checkpoint)
    height = meta.get("height", 32)
    datasets = {}
    for p in map(Path, args.manifests):
        m = load_manifest(p)
        if not len(m):
            raise ManifestError(f"manifest {p} has no entries")
        datasets[p.stem] = m.load_samples(height)
    decoders = [d.strip() for d in args.decoders.split(",") if d.strip()]
    for d in decoders:
        if d not in ("ctc", "ar"):
            raise UsageError(f"unknown decoder {d!r}")
    reports = benchmark(model, datasets, vocab, decoders, model_id=Path(args.checkpoint).stem)
    text = reports_to_csv(reports)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        Path(args.output).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    _echo(cfg)
    variants = []
    for name in cfg.ablation.variants:
        if name not in config_mod.VARIANTS:
            raise UsageError(f"unknown variant {name!r}; choose from {sorted(config_mod.VARIANTS)}")
        variants.append(Variant(name, config_mod.VARIANTS[name]))
    setup = AblationSetup(model=cfg.model_config, synth=cfg.synth, eval_per_modality=cfg.data.eval_per_modality,
                          height=cfg.data.height, general=cfg.general, adapt=cfg.adapt)
    results = run_ablation(setup, variants, list(cfg.ablation.seeds), cfg.out_dir)
    text = ablation_to_csv(results)
    (cfg.out_dir / "ablation.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_inspect_router(args) -> int:
    model, vocab, meta = _load_model(args.checkpoint)
    if model.mafs is None:
        raise UsageError("checkpoint has no router (trained without adapters)")
    height = meta.get("height", 32)
    items = _inputs(args.inputs)
    n = model.cfg.mafs.n
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["path"] + [f"r_{i + 1}" for i in range(n)])
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        for path, _ in items:
            img = torch.from_numpy(preprocess(path.read_bytes(), height)).unsqueeze(0).to(dtype)
            _, _, r = model.features(img)
            w.writerow([str(path)] + [repr(float(x)) for x in r[0]])
    return EXIT_OK


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="uktr", description="Khmer multi-modality text recognizer")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration file (section.key = value lines)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("gen-data", help="render the synthetic training and evaluation sets")
    with_config(sp)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("tokenize", help="stdin lines -> space-separated token ids")
    sp.add_argument("--vocab", help="vocabulary file")
    sp.add_argument("--build-vocab", metavar="OUT", help="build a vocabulary from stdin and write it")
    sp.set_defaults(func=cmd_tokenize)

    sp = sub.add_parser("train", help="run one training phase")
    with_config(sp)
    sp.add_argument("--phase", choices=("general", "adapt"), required=True)
    sp.add_argument("--resume", help="training checkpoint to continue from")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("recognize", help="transcribe images (paths or .tsv manifests)")
    sp.add_argument("checkpoint")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--decoder", choices=("ctc", "ar"), default="ctc")
    sp.add_argument("--beam", type=int, default=1, help="beam width (1 = greedy)")
    sp.add_argument("--timing", action="store_true", help="append per-image wall time in seconds")
    sp.set_defaults(func=cmd_recognize)

    sp = sub.add_parser("benchmark", help="CER per manifest and decoder, as CSV")
    sp.add_argument("checkpoint")
    sp.add_argument("manifests", nargs="+")
    sp.add_argument("--decoders", default="ctc,ar")
    sp.add_argument("--output", help="also write the CSV here")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("ablate", help="toy ablation over variants x seeds, as CSV")
    with_config(sp)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("inspect-router", help="router probabilities per image, as CSV")
    sp.add_argument("checkpoint")
    sp.add_argument("inputs", nargs="+")
    sp.set_defaults(func=cmd_inspect_router)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "beam", 1) < 1:
        print("uktr: error: --beam must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"uktr: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"uktr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, CheckpointError) as exc:
        # manifest, image, checkpoint and dataset problems
        print(f"uktr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
