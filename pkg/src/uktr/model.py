"""The full recognizer: encoder -> (MAFS) -> CTC head + AR decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import Tensor, nn

from . import checkpoint
from .ctc import ctc_beam_decode, ctc_greedy_decode, DecodeResult
from .decoders import DecoderConfig, TransformerDecoder, ar_generate
from .encoder import EncoderConfig, VisualEncoder
from .mafs import MAFS, MafsConfig
from .nn import Linear, count_params, set_dropout_generator


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    mafs: MafsConfig = field(default_factory=MafsConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    vocab_size: int = 11899

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.mafs, dict):
            self.mafs = MafsConfig(**self.mafs)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.mafs.d != self.encoder.d:
            raise ValueError("mafs.d must equal encoder.d")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def toy(cls, vocab_size: int = 64, n: int = 5, mafs: bool = True) -> "ModelConfig":
        d = 64
        return cls(
            encoder=EncoderConfig(channels=(16, 16, 32, 32, 64, 64), repeats=(1, 1, 1, 1, 1, 1),
                                  d=d, layers=1, heads=4, ffn=4 * d, dropout=0.1, norm_groups=4),
            mafs=MafsConfig(n=n, p=16, d=d, enabled=mafs),
            decoder=DecoderConfig(layers=1, heads=4, ffn=4 * d, dropout=0.1, max_len=64),
            vocab_size=vocab_size,
        )


@dataclass
class ModelOutput:
    ctc_logits: Tensor          # (B, T, c)
    ar_logits: Tensor | None    # (B, L, c)
    router: Tensor | None       # (B, n)
    u: Tensor                   # (B, d, h, w)


class UKTR(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = VisualEncoder(cfg.encoder, generator)
        self.mafs = MAFS(cfg.mafs) if cfg.mafs.enabled else None
        self.ctc_head = Linear(cfg.encoder.d, cfg.vocab_size)
        self.decoder = TransformerDecoder(cfg.encoder.d, cfg.vocab_size, cfg.decoder, generator)

    def features(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor | None]:
        g, g1d = self.encoder(images)
        if self.mafs is None:
            return g, g1d, None
        return self.mafs(g, g1d)

    def forward(self, images: Tensor, context: Tensor | None = None) -> ModelOutput:
        u, u1d, r = self.features(images)
        ctc_logits = self.ctc_head(u1d.transpose(1, 2))
        ar_logits = self.decoder(u, context) if context is not None else None
        return ModelOutput(ctc_logits, ar_logits, r, u)

    def set_generator(self, generator: torch.Generator | None) -> None:
        set_dropout_generator(self, generator)

    @torch.no_grad()
    def recognize(self, images: Tensor, decoder: str = "ctc", beam_width: int = 1,
                  max_len: int | None = None) -> list[DecodeResult]:
        u, u1d, _ = self.features(images)
        if decoder == "ctc":
            logits = self.ctc_head(u1d.transpose(1, 2))
            if beam_width > 1:
                return [ctc_beam_decode(l, beam_width) for l in logits]
            return [ctc_greedy_decode(l) for l in logits]
        if decoder == "ar":
            return ar_generate(u, self.decoder, "beam" if beam_width > 1 else "greedy",
                               max_len, beam_width)
        raise ValueError(f"unknown decoder {decoder!r}")

    def param_report(self) -> dict[str, int]:
        rep = {
            "backbone": count_params(self.encoder.cnn),
            "transformer_encoder": count_params(self.encoder.tr),
            "mafs": count_params(self.mafs) if self.mafs is not None else 0,
            "ctc_head": count_params(self.ctc_head),
            "transformer_decoder": count_params(self.decoder),
        }
        rep["total"] = count_params(self)
        return rep

    def save(self, path, meta: dict | None = None) -> None:
        m = {"model_config": self.cfg.to_dict(), **(meta or {})}
        checkpoint.save(path, dict(self.state_dict()), m)

    @classmethod
    def load(cls, path) -> tuple["UKTR", dict]:
        tensors, meta = checkpoint.load(path)
        model = cls(ModelConfig(**meta["model_config"]))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
        model.to(next(iter(tensors.values())).dtype if tensors else torch.float32)
        return model, meta
