"""Modality-aware adaptive feature selection.

A router turns the globally pooled feature vector into a distribution over
``n`` modality sources; ``n`` bottleneck adapters each re-project the encoder
features; the adapted features are averaged under the router distribution.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .nn import Linear, relu, softmax


@dataclass
class MafsConfig:
    n: int = 5
    p: int = 128
    d: int = 512
    enabled: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 1 <= self.p <= self.d:
            raise ValueError("adapter dim p must satisfy 1 <= p <= d")

    @property
    def router_hidden(self) -> int:
        return max(1, self.d // 4)


def gpool(g: Tensor) -> Tensor:
    """Mean over all spatial positions: (B, d, h, w) -> (B, d)."""
    return g.mean(dim=(-2, -1))


class Router(nn.Module):
    """d -> d/4 -> ReLU -> n -> softmax."""

    def __init__(self, d: int, n: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or max(1, d // 4)
        self.fc1 = Linear(d, hidden)
        self.fc2 = Linear(hidden, n)

    def forward(self, z: Tensor) -> Tensor:
        return softmax(self.fc2(relu(self.fc1(z))), dim=-1)


class Adapter(nn.Module):
    """Residual bottleneck d -> p -> d applied along the channel axis."""

    def __init__(self, d: int, p: int):
        super().__init__()
        self.down = Linear(d, p)
        self.up = Linear(p, d)

    def forward(self, x: Tensor) -> Tensor:
        # x: (..., d, *spatial) channel-first
        xl = x.movedim(1, -1)
        y = xl + self.up(relu(self.down(xl)))
        return y.movedim(-1, 1)


def route(z: Tensor, router: Router) -> Tensor:
    return router(z)


def adapt(g: Tensor, g1d: Tensor, adapters: nn.ModuleList) -> tuple[Tensor, Tensor]:
    """Stack adapter outputs: H (B, n, d, h, w) and H_1D (B, n, d, w)."""
    h = torch.stack([a(g) for a in adapters], dim=1)
    h1d = torch.stack([a(g1d) for a in adapters], dim=1)
    return h, h1d


def aggregate(h: Tensor, h1d: Tensor, r: Tensor) -> tuple[Tensor, Tensor]:
    """U = sum_i r_i H_i and U_1D = sum_i r_i H_1D,i."""
    if r.shape[-1] != h.shape[1] or r.shape[-1] != h1d.shape[1]:
        raise ValueError(f"router has {r.shape[-1]} entries but {h.shape[1]} adapters")
    u = (h * r.view(*r.shape, *([1] * (h.dim() - 2)))).sum(dim=1)
    u1d = (h1d * r.view(*r.shape, *([1] * (h1d.dim() - 2)))).sum(dim=1)
    return u, u1d


class MAFS(nn.Module):
    def __init__(self, cfg: MafsConfig):
        super().__init__()
        self.cfg = cfg
        self.router = Router(cfg.d, cfg.n, cfg.router_hidden)
        self.adapters = nn.ModuleList(Adapter(cfg.d, cfg.p) for _ in range(cfg.n))

    def forward(self, g: Tensor, g1d: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        r = self.router(gpool(g))
        h, h1d = adapt(g, g1d, self.adapters)
        u, u1d = aggregate(h, h1d, r)
        return u, u1d, r
