"""Visual encoder: ResNet backbone, Transformer encoder and height pooling."""

from __future__ import annotations

from dataclasses import dataclass

from torch import Tensor, nn

from .nn import (Conv2d, Dropout, FeedForward, GroupNorm, LayerNorm, MultiHeadAttention,
                 relu, sinusoidal_positions)


@dataclass
class EncoderConfig:
    """Backbone + Transformer-encoder hyperparameters.

    Defaults are the full-scale setting: six ResNet blocks (32 -> 512
    channels), repeats (1, 3, 4, 6, 6, 3), (2, 2) downsampling in blocks 1
    and 4, then a 3-layer, 8-head Transformer encoder with d = 512.
    """

    in_channels: int = 3
    channels: tuple = (32, 32, 32, 64, 256, 512)
    repeats: tuple = (1, 3, 4, 6, 6, 3)
    downsample: tuple = (False, True, False, False, True, False)
    pointwise: tuple = (False, True, True, True, True, True)
    d: int = 512
    layers: int = 3
    heads: int = 8
    ffn: int = 2048
    dropout: float = 0.1
    norm_groups: int = 8

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.repeats = tuple(self.repeats)
        self.downsample = tuple(bool(x) for x in self.downsample)
        self.pointwise = tuple(bool(x) for x in self.pointwise)
        n = len(self.channels)
        if not (len(self.repeats) == len(self.downsample) == len(self.pointwise) == n):
            raise ValueError("channels, repeats, downsample and pointwise must have equal length")
        if self.channels[-1] != self.d:
            raise ValueError(f"final backbone channels {self.channels[-1]} must equal d={self.d}")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if any(r < 1 for r in self.repeats):
            raise ValueError("every block needs at least one unit")

    @property
    def downsample_factor(self) -> int:
        return 2 ** sum(self.downsample)


class ResUnit(nn.Module):
    """(optional 1x1 conv) -> 3x3 conv, with identity or 1x1-projection skip."""

    def __init__(self, c_in: int, c_out: int, stride: int, pointwise: bool, groups: int):
        super().__init__()
        mid_in = c_in
        if pointwise:
            self.pw = Conv2d(c_in, c_out, 1, bias=False)
            self.pw_norm = GroupNorm(c_out, groups)
            mid_in = c_out
        else:
            self.pw = None
        self.conv = Conv2d(mid_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm = GroupNorm(c_out, groups)
        if stride != 1 or c_in != c_out:
            self.skip = Conv2d(c_in, c_out, 1, stride=stride, bias=False)
        else:
            self.skip = None

    def forward(self, x):
        y = x
        if self.pw is not None:
            y = relu(self.pw_norm(self.pw(y)))
        y = self.norm(self.conv(y))
        s = x if self.skip is None else self.skip(x)
        return relu(y + s)


class Backbone(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        blocks = []
        c_in = cfg.in_channels
        for c, reps, down, pw in zip(cfg.channels, cfg.repeats, cfg.downsample, cfg.pointwise):
            units = []
            for r in range(reps):
                stride = 2 if (down and r == 0) else 1
                units.append(ResUnit(c_in, c, stride, pw, cfg.norm_groups))
                c_in = c
            blocks.append(nn.Sequential(*units))
        self.blocks = nn.ModuleList(blocks)
        self.factor = cfg.downsample_factor

    def forward(self, img: Tensor) -> Tensor:
        H, W = img.shape[-2:]
        if H < self.factor or W < self.factor:
            raise ValueError(f"input {H}x{W} too small for downsampling by {self.factor}")
        x = img
        for b in self.blocks:
            x = b(x)
        return x


class EncoderLayer(nn.Module):
    # pre-norm residual layout
    def __init__(self, d, heads, ffn, p, generator=None):
        super().__init__()
        self.norm1 = LayerNorm(d)
        self.attn = MultiHeadAttention(d, heads)
        self.norm2 = LayerNorm(d)
        self.ff = FeedForward(d, ffn, p, generator)
        self.drop1 = Dropout(p, generator)
        self.drop2 = Dropout(p, generator)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        x = x + self.drop1(self.attn(h, h, h, mask))
        x = x + self.drop2(self.ff(self.norm2(x)))
        return x


class TransformerEncoder(nn.Module):
    """Self-attention over the flattened h*w positions of a feature map.

    With zero layers the output is ``F + positional encoding`` reshaped back.
    """

    def __init__(self, cfg: EncoderConfig, generator=None):
        super().__init__()
        self.d = cfg.d
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d, cfg.heads, cfg.ffn, cfg.dropout, generator) for _ in range(cfg.layers))
        self.final_norm = LayerNorm(cfg.d) if cfg.layers else None
        self.drop = Dropout(cfg.dropout, generator)

    def forward(self, f: Tensor) -> Tensor:
        B, d, h, w = f.shape
        if d != self.d:
            raise ValueError(f"feature depth {d} != d={self.d}")
        x = f.flatten(2).transpose(1, 2)
        x = x + sinusoidal_positions(h * w, d, x.dtype)
        if not self.layers:
            return x.transpose(1, 2).reshape(B, d, h, w)
        x = self.drop(x)
        for layer in self.layers:
            x = layer(x)
        x = self.final_norm(x)
        return x.transpose(1, 2).reshape(B, d, h, w)


def hpool(g: Tensor) -> Tensor:
    """Average a (B, d, h, w) map over height -> (B, d, w)."""
    return g.mean(dim=-2)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, generator=None):
        super().__init__()
        self.cfg = cfg
        self.cnn = Backbone(cfg)
        self.tr = TransformerEncoder(cfg, generator)

    def forward(self, img: Tensor) -> tuple[Tensor, Tensor]:
        g = self.tr(self.cnn(img))
        return g, hpool(g)


def cnn_forward(img: Tensor, backbone: Backbone) -> Tensor:
    squeeze = img.dim() == 3
    out = backbone(img.unsqueeze(0) if squeeze else img)
    return out[0] if squeeze else out


def tr_encode(f: Tensor, encoder: TransformerEncoder) -> Tensor:
    squeeze = f.dim() == 3
    out = encoder(f.unsqueeze(0) if squeeze else f)
    return out[0] if squeeze else out
