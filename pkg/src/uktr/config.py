"""Run configuration files.

Format: one ``section.key = value`` per line; lines starting with ``#`` are
comments.  Values
are Python literals (numbers, tuples, booleans, quoted strings); anything
that does not parse as a literal is taken as a bare string.  ``run.preset``
(``full`` or ``toy``) selects the baseline that the other keys override.
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import SynthConfig
from .decoders import DecoderConfig
from .encoder import EncoderConfig
from .mafs import MafsConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataSection:
    height: int = 32
    dir: str = ""                # "" -> <run.out_dir>/data/train
    eval_dir: str = ""           # "" -> <run.out_dir>/data/eval
    eval_per_modality: int = 50
    vocab: str = ""


@dataclass
class RunSection:
    preset: str = "full"
    seed: int = 0
    out_dir: str = "runs/default"
    vocab_size: int = 0          # 0: taken from the vocabulary


@dataclass
class AblationSection:
    variants: tuple = ("mafs", "no_mafs")
    seeds: tuple = (0, 1, 2)


# variant name -> model overrides understood by ``cmd_ablate``
VARIANTS = {
    "mafs": {},
    "no_mafs": {"mafs.enabled": False},
    "n3": {"mafs.n": 3},
    "n5": {"mafs.n": 5},
    "n8": {"mafs.n": 8},
}


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mafs: MafsConfig = field(default_factory=MafsConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    general: TrainConfig = field(default_factory=lambda: TrainConfig.for_phase("general"))
    adapt: TrainConfig = field(default_factory=lambda: TrainConfig.for_phase("adapt"))
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataSection = field(default_factory=DataSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(encoder=self.encoder, mafs=self.mafs, decoder=self.decoder,
                           vocab_size=self.run.vocab_size or vocab_size)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            for k, v in asdict(getattr(self, f.name)).items():
                lines.append(f"{f.name}.{k} = {v!r}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @property
    def out_dir(self) -> Path:
        return Path(self.run.out_dir)

    @property
    def train_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir else self.out_dir / "data" / "train"

    @property
    def eval_dir(self) -> Path:
        return Path(self.data.eval_dir) if self.data.eval_dir else self.out_dir / "data" / "eval"


def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw


def parse(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"line {lineno}: key {key!r} must look like section.key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _parse_value(value)
    return out


def set_flat(d: dict, key: str, value: Any) -> None:
    section, name = key.split(".", 1)
    if section not in d or not isinstance(d[section], dict):
        raise ConfigError(f"unknown section {section!r}")
    if name not in d[section]:
        raise ConfigError(f"unknown key {key!r}")
    d[section][name] = value


def preset_dict(name: str) -> dict:
    base = asdict(RunConfig())
    if name == "full":
        return base
    if name == "toy":
        m = ModelConfig.toy()
        base["encoder"], base["mafs"], base["decoder"] = asdict(m.encoder), asdict(m.mafs), asdict(m.decoder)
        base["data"]["height"] = 16
        base["synth"]["samples"] = 2000
        base["data"]["eval_per_modality"] = 60
        base["general"].update(lr_min=1e-4, lr_max=2e-3, epochs=10, batch_size=16)
        base["adapt"].update(lr_min=1e-4, lr_max=1e-3, epochs=16, batch_size=16)
        return base
    raise ConfigError(f"unknown preset {name!r} (expected 'full' or 'toy')")


def from_dict(flat: dict[str, Any]) -> RunConfig:
    preset = flat.get("run.preset", "full")
    d = preset_dict(preset)
    for k, v in flat.items():
        set_flat(d, k, v)
    d["general"]["phase"], d["adapt"]["phase"] = "general", "adapt"
    # one top-level seed fans out to every subsystem unless overridden explicitly
    seed = d["run"]["seed"]
    for key, value in (("synth.seed", seed), ("general.seed", seed), ("adapt.seed", seed + 1)):
        if key not in flat:
            set_flat(d, key, value)
    if d["mafs"]["d"] != d["encoder"]["d"]:
        d["mafs"]["d"] = d["encoder"]["d"]
    try:
        return RunConfig(**{name: _section_type(name)(**vals) for name, vals in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _section_type(name: str):
    return {"run": RunSection, "encoder": EncoderConfig, "mafs": MafsConfig, "decoder": DecoderConfig,
            "general": TrainConfig, "adapt": TrainConfig, "synth": SynthConfig, "data": DataSection,
            "ablation": AblationSection}[name]


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return from_dict(parse(path.read_text(encoding="utf-8")))
