"""Datasets: TSV manifests, image preprocessing, a synthetic multi-modality
text-line generator and pixel augmentation.

Manifest format: UTF-8, one ``relative/path.png<TAB>label`` per line.  Lines
starting with ``#`` are comments; ``# modality: scene`` declares the group.
"""

from __future__ import annotations

import io
import math
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image, ImageDraw
from scipy import ndimage

from .tokenizer import Vocabulary, clusters, encode

MODALITIES = ("document", "scene", "handwritten")
WHITE = 1.0  # normalized value of a 255 pixel


class ManifestError(ValueError):
    pass


class PreprocessError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray           # (C, H, W) float32, normalized
    text: str
    modality: str = "document"  # metadata only; never reaches the model

    def __post_init__(self):
        if not self.text:
            raise ValueError("sample text must be non-empty")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str]]
    modality: str = "document"

    def __len__(self):
        return len(self.entries)

    def write(self, path: str | Path) -> None:
        lines = [f"# modality: {self.modality}"] + [f"{p}\t{t}" for p, t in self.entries]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def load_samples(self, target_height: int, factor: int = 4) -> list[Sample]:
        return [Sample(preprocess((self.root / p).read_bytes(), target_height, factor), t, self.modality)
                for p, t in self.entries]


def load_manifest(path: str | Path, modality: str | None = None) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    entries: list[tuple[str, str]] = []
    seen: dict[str, int] = {}
    declared = None
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("modality:"):
                declared = body.split(":", 1)[1].strip()
            continue
        if "\t" not in line:
            raise ManifestError(f"{path}:{lineno}: missing tab separator")
        rel, label = line.split("\t", 1)
        if not rel or not label:
            raise ManifestError(f"{path}:{lineno}: empty path or label")
        if rel in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image path {rel!r} (first on line {seen[rel]})")
        if not (root / rel).exists():
            raise ManifestError(f"{path}:{lineno}: image file {rel!r} does not exist")
        seen[rel] = lineno
        entries.append((rel, label))
    if not entries:
        warnings.warn(f"manifest {path} is empty")
    return DatasetManifest(root, entries, modality or declared or path.stem)


def preprocess(raw: bytes, target_height: int, factor: int = 4) -> np.ndarray:
    """Decode a PNG, resize to ``target_height`` keeping aspect, normalize to [-1, 1]
    and right-pad the width (with white) to a multiple of ``factor``."""
    if raw[:8] != b"\x89PNG\r\n\x1a\n":
        raise PreprocessError("image is not a PNG")
    try:
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception as exc:  # PIL raises a zoo of types here
        raise PreprocessError(f"undecodable image: {exc}") from exc
    img = img.convert("RGB")
    w, h = img.size
    new_w = max(1, int(round(w * target_height / h)))
    if (new_w, target_height) != (w, h):
        img = img.resize((new_w, target_height), Image.BILINEAR)
    arr = (np.asarray(img, dtype=np.float32) / 255.0 - 0.5) / 0.5
    arr = arr.transpose(2, 0, 1)
    padded_w = int(math.ceil(new_w / factor) * factor)
    if padded_w != new_w:
        arr = np.pad(arr, ((0, 0), (0, 0), (0, padded_w - new_w)), constant_values=WHITE)
    return np.ascontiguousarray(arr)


# ------------------------------------------------------------------ batching

@dataclass
class Batch:
    images: torch.Tensor           # (B, C, H, W)
    targets: list[list[int]]
    texts: list[str]


def collate(items: Sequence[tuple[np.ndarray, str]], vocab: Vocabulary,
            dtype=torch.float32) -> Batch:
    """Stack (image, text) pairs; images are right-padded with white to a common width."""
    width = max(im.shape[-1] for im, _ in items)
    imgs = np.full((len(items), *items[0][0].shape[:2], width), WHITE, dtype=np.float32)
    for i, (im, _) in enumerate(items):
        imgs[i, :, :, : im.shape[-1]] = im
    return Batch(torch.from_numpy(imgs).to(dtype), [encode(t, vocab) for _, t in items],
                 [t for _, t in items])


def to_batch(samples: Sequence[Sample], vocab: Vocabulary, dtype=torch.float32) -> Batch:
    return collate([(s.image, s.text) for s in samples], vocab, dtype)


# ---------------------------------------------------------------- synthesis

DEFAULT_ALPHABET = (
    list("ABCDEFGHKMNPRSTW")
    + list("0123456789")
    + list("កខគងចជញដតនបពមយរលសហអ")
    + ["ក្មែ", "ស្រី", "ខ្ញុំ", "ប្រ", "ភ្នំ", "ស្ត", "ក្រ", "ពេ", "កា", "មុ"]
)


@dataclass
class SynthConfig:
    alphabet: tuple = tuple(DEFAULT_ALPHABET)
    samples: int = 1000
    proportions: tuple = (0.8, 0.1, 0.1)   # document, scene, handwritten
    min_len: int = 3
    max_len: int = 10
    height: int = 32
    glyph_width: int = 20
    seed: int = 0
    # ranges of the nuisance parameters
    scene_warp: float = 0.12
    scene_clutter: int = 6
    hand_jitter: float = 1.5
    hand_width: tuple = (1, 3)
    hand_slant: float = 0.3

    def __post_init__(self):
        self.alphabet = tuple(self.alphabet)
        self.proportions = tuple(float(p) for p in self.proportions)
        if len(self.proportions) != len(MODALITIES):
            raise ValueError(f"need one proportion per modality {MODALITIES}")
        if abs(sum(self.proportions) - 1.0) > 1e-9 or min(self.proportions) < 0:
            raise ValueError("proportions must be non-negative and sum to 1")
        if not self.alphabet:
            raise ValueError("alphabet must be non-empty")
        for g in self.alphabet:
            if len(clusters(g)) != 1:
                raise ValueError(f"alphabet entry {g!r} is not a single cluster")


def allocate(total: int, proportions: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``total`` into integer counts."""
    raw = [total * p for p in proportions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _glyph_strokes(cluster: str) -> list[tuple[float, float, float, float]]:
    """Deterministic stroke skeleton of a glyph in unit-box coordinates.

    The first codepoint draws 3 strokes on a 3x4 grid in the upper band; every
    attached codepoint adds a short stroke in the lower band, so composed
    clusters look like stacked glyphs.
    """
    base, marks = cluster[0], cluster[1:]
    rng = np.random.default_rng(zlib.crc32(base.encode("utf-8")))
    pts = [(x, y) for x in (0.15, 0.5, 0.85) for y in (0.1, 0.3, 0.5, 0.68)]
    strokes = []
    pairs = [(i, j) for i in range(len(pts)) for j in range(i + 1, len(pts))]
    for k in rng.choice(len(pairs), size=3, replace=False):
        (x0, y0), (x1, y1) = pts[pairs[k][0]], pts[pairs[k][1]]
        strokes.append((x0, y0, x1, y1))
    for m in marks:
        mr = np.random.default_rng(zlib.crc32(m.encode("utf-8")) + 7)
        x0, x1 = sorted(mr.uniform(0.1, 0.9, 2))
        y0, y1 = mr.uniform(0.76, 0.95, 2)
        strokes.append((x0, y0, x1, y1))
    return strokes


def render_text(text: str, modality: str, cfg: SynthConfig, rng: np.random.Generator) -> Image.Image:
    glyphs = clusters(text)
    gw, H = cfg.glyph_width, cfg.height
    margin = gw // 2
    W = margin * 2 + gw * len(glyphs)
    hand = modality == "handwritten"
    scene = modality == "scene"

    if scene:
        bg = tuple(int(v) for v in rng.integers(0, 256, 3))
        fg = tuple(255 - v if abs(255 - 2 * v) > 60 else (v + 128) % 256 for v in bg)
    elif hand:
        g = int(rng.integers(215, 250))
        bg, fg = (g, g, int(g * 0.95)), tuple(int(v) for v in rng.integers(0, 70, 3))
    else:
        bg, fg = (255, 255, 255), (0, 0, 0)
    img = Image.new("RGB", (W, H), bg)
    draw = ImageDraw.Draw(img)

    if scene:
        for _ in range(int(rng.integers(1, cfg.scene_clutter + 1))):
            col = tuple(int(np.clip(c + rng.integers(-50, 51), 0, 255)) for c in bg)
            x0, x1 = sorted(rng.integers(0, W, 2))
            y0, y1 = sorted(rng.integers(0, H, 2))
            if rng.random() < 0.5:
                draw.rectangle([int(x0), int(y0), int(x1), int(y1)], fill=col)
            else:
                draw.line([int(x0), int(y0), int(x1), int(y1)], fill=col, width=int(rng.integers(1, 3)))

    top, bottom = 3, H - 2
    slant = rng.uniform(-cfg.hand_slant, cfg.hand_slant) if hand else 0.0
    for gi, glyph in enumerate(glyphs):
        x_off = margin + gi * gw
        y_shift = rng.normal(0, 1.0) if hand else 0.0
        width = int(rng.integers(cfg.hand_width[0], cfg.hand_width[1] + 1)) if hand else 2
        for x0, y0, x1, y1 in _glyph_strokes(glyph):
            pts = []
            for x, y in ((x0, y0), (x1, y1)):
                px = x_off + 2 + x * (gw - 4)
                py = top + y * (bottom - top) + y_shift
                px += slant * (H / 2 - py)
                if hand:
                    px += rng.normal(0, cfg.hand_jitter)
                    py += rng.normal(0, cfg.hand_jitter * 0.5)
                pts.append((float(px), float(py)))
            draw.line(pts, fill=fg, width=width)

    if scene:
        img = _perspective(img, cfg.scene_warp, rng, bg)
        jitter = rng.uniform(0.7, 1.3, 3)
        arr = np.clip(np.asarray(img, dtype=np.float32) * jitter + rng.normal(0, 8, (H, W, 1)), 0, 255)
        img = Image.fromarray(arr.astype(np.uint8))
    return img


def _perspective(img: Image.Image, amount: float, rng: np.random.Generator, fill) -> Image.Image:
    W, H = img.size
    src = [(0, 0), (W, 0), (W, H), (0, H)]
    dst = [(x + rng.uniform(-amount, amount) * H, y + rng.uniform(-amount, amount) * H) for x, y in src]
    # solve for the 8 coefficients mapping output -> input
    A, b = [], []
    for (x, y), (u, v) in zip(dst, src):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y]); b.append(u)
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y]); b.append(v)
    coeffs = np.linalg.solve(np.array(A, dtype=np.float64), np.array(b, dtype=np.float64))
    return img.transform((W, H), Image.PERSPECTIVE, tuple(coeffs), Image.BILINEAR, fillcolor=fill)


def random_text(rng: np.random.Generator, cfg: SynthConfig) -> str:
    n = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    return "".join(cfg.alphabet[i] for i in rng.integers(0, len(cfg.alphabet), n))


def _png_bytes(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def synth_samples(cfg: SynthConfig) -> list[tuple[str, str, bytes]]:
    """Generate ``(modality, text, png_bytes)`` triples in memory."""
    out = []
    counts = allocate(cfg.samples, cfg.proportions)
    for mi, (modality, count) in enumerate(zip(MODALITIES, counts)):
        for i in range(count):
            rng = np.random.default_rng([cfg.seed, mi, i])
            text = random_text(rng, cfg)
            out.append((modality, text, _png_bytes(render_text(text, modality, cfg, rng))))
    return out


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> dict[str, DatasetManifest]:
    """Write PNGs and one manifest per modality (``<modality>.tsv``) under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries: dict[str, list] = {m: [] for m in MODALITIES}
    counters = {m: 0 for m in MODALITIES}
    for modality, text, png in synth_samples(cfg):
        rel = f"{modality}/{counters[modality]:06d}.png"
        counters[modality] += 1
        (out_dir / modality).mkdir(exist_ok=True)
        (out_dir / rel).write_bytes(png)
        entries[modality].append((rel, text))
    manifests = {}
    for m in MODALITIES:
        man = DatasetManifest(out_dir, entries[m], m)
        man.write(out_dir / f"{m}.tsv")
        manifests[m] = man
    return manifests


# -------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentPolicy:
    blur_sigma: float = 0.0        # max Gaussian sigma (pixels)
    brightness: float = 0.0        # max additive shift in normalized units
    rotation: float = 0.0          # max absolute rotation (degrees)

    def __post_init__(self):
        if min(self.blur_sigma, self.brightness, self.rotation) < 0:
            raise ValueError("augmentation magnitudes must be non-negative")

    @property
    def is_identity(self) -> bool:
        return self.blur_sigma == 0 and self.brightness == 0 and self.rotation == 0


def augment(sample: Sample, policy: AugmentPolicy, rng: np.random.Generator) -> Sample:
    """Perturb pixels only; the label and modality tag are carried over unchanged."""
    if policy.is_identity:
        return sample
    img = sample.image.astype(np.float32, copy=True)
    if policy.rotation:
        angle = rng.uniform(-policy.rotation, policy.rotation)
        img = ndimage.rotate(img, angle, axes=(1, 2), reshape=False, order=1, cval=WHITE)
    if policy.blur_sigma:
        sigma = rng.uniform(0, policy.blur_sigma)
        img = ndimage.gaussian_filter(img, sigma=(0, sigma, sigma))
    if policy.brightness:
        img = img + rng.uniform(-policy.brightness, policy.brightness)
    img = np.clip(img, -1.0, 1.0).astype(np.float32)
    return Sample(img, sample.text, sample.modality)
