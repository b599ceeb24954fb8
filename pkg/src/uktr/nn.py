"""Layer primitives on top of torch tensors and autograd.

The functional ops here (softmax, layer_norm, attention, dropout) are written
out explicitly; the layer classes call torch's fused kernels where those are
equivalent and much faster.  torch also supplies storage, convolution and
reverse-mode differentiation.  ``gradcheck`` is an independent
central-difference harness used by the test suite.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

_NEG = -1e30


def softmax(x: Tensor, dim: int = -1) -> Tensor:
    if x.shape[dim] == 0:
        raise ValueError("softmax over an empty axis")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(x: Tensor, dim: int = -1) -> Tensor:
    if x.shape[dim] == 0:
        raise ValueError("log_softmax over an empty axis")
    shifted = x - x.amax(dim=dim, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over an empty axis")
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    y = (x - mu) / torch.sqrt(var + eps)
    if weight is not None:
        y = y * weight
    if bias is not None:
        y = y + bias
    return y


def relu(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0.0)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = x @ weight.t()
    return y if bias is None else y + bias


def dropout(x: Tensor, p: float, training: bool, generator: torch.Generator | None = None) -> Tensor:
    if not training or p == 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= p
    return x * keep / (1.0 - p)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int | tuple[int, int] = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """2-D cross-correlation of a (B, C, H, W) batch."""
    if x.dim() != 4 or weight.dim() != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    return torch.nn.functional.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def causal_mask(length: int, device=None) -> Tensor:
    """Boolean (L, L) mask, True where attention is allowed."""
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


def attention(q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over the last two axes.

    ``mask`` broadcasts against the (..., Lq, Lk) score matrix; False entries
    receive exactly zero weight.  Returns ``(output, weights)``.
    """
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    if mask is not None:
        scores = scores.masked_fill(~mask, _NEG)
    w = softmax(scores, dim=-1)
    if mask is not None:
        w = w * mask
    return w @ v, w


def multi_head_attention(query: Tensor, key: Tensor, value: Tensor, heads: int,
                         weights: dict[str, Tensor], mask: Tensor | None = None,
                         return_weights: bool = False):
    """Multi-head attention on (B, L, d) inputs with explicit projection weights.

    ``weights`` holds ``q_w, q_b, k_w, k_b, v_w, v_b, o_w, o_b``.
    """
    d = query.shape[-1]
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads
    B, Lq, Lk = query.shape[0], query.shape[1], key.shape[1]

    def split(x, L):
        return x.view(B, L, heads, dh).transpose(1, 2)

    q = split(linear(query, weights["q_w"], weights["q_b"]), Lq)
    k = split(linear(key, weights["k_w"], weights["k_b"]), Lk)
    v = split(linear(value, weights["v_w"], weights["v_b"]), Lk)
    if mask is not None and mask.dim() == 3:
        mask = mask.unsqueeze(1)
    if return_weights:
        out, w = attention(q, k, v, mask)
    else:
        # fused kernel; numerically equivalent to ``attention`` (checked in tests)
        out = torch.nn.functional.scaled_dot_product_attention(q, k, v, attn_mask=mask)
    out = out.transpose(1, 2).reshape(B, Lq, d)
    out = linear(out, weights["o_w"], weights["o_b"])
    return (out, w) if return_weights else out


def sinusoidal_positions(length: int, d: int, dtype=torch.float32) -> Tensor:
    pos = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    i = torch.arange(0, d, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / d)
    pe = torch.zeros(length, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : d // 2])
    return pe.to(dtype)


# ---------------------------------------------------------------- layers

class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        self.weight = nn.Parameter(torch.empty(d_out, d_in).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out).uniform_(-bound, bound)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int = 1,
                 padding: int = 0, bias: bool = True):
        super().__init__()
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(c_out).uniform_(-bound, bound)) if bias else None
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        # fused kernel; matches ``layer_norm`` (checked in tests)
        return torch.nn.functional.layer_norm(x, self.weight.shape, self.weight, self.bias, self.eps)


class GroupNorm(nn.Module):
    """Batch-free normalization over channel groups of a (B, C, H, W) map."""

    def __init__(self, channels: int, groups: int, eps: float = 1e-5):
        super().__init__()
        self.groups = math.gcd(groups, channels)
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return torch.nn.functional.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Embedding(nn.Module):
    def __init__(self, num: int, d: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(num, d) * 0.02)

    def forward(self, ids):
        return self.weight[ids]


class Dropout(nn.Module):
    """Dropout drawing its mask from an explicit generator (so runs can be resumed)."""

    def __init__(self, p: float, generator: torch.Generator | None = None):
        super().__init__()
        self.p = p
        self.generator = generator

    def forward(self, x):
        return dropout(x, self.p, self.training, self.generator)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"model dim {d} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(d, d)
        self.k = Linear(d, d)
        self.v = Linear(d, d)
        self.o = Linear(d, d)

    def weights(self) -> dict[str, Tensor]:
        return {f"{n}_{p}": getattr(getattr(self, n), "weight" if p == "w" else "bias")
                for n in "qkvo" for p in "wb"}

    def forward(self, query, key, value, mask=None, return_weights=False):
        return multi_head_attention(query, key, value, self.heads, self.weights(), mask, return_weights)


class FeedForward(nn.Module):
    def __init__(self, d: int, d_ff: int, p: float, generator=None):
        super().__init__()
        self.fc1 = Linear(d, d_ff)
        self.fc2 = Linear(d_ff, d)
        self.drop = Dropout(p, generator)

    def forward(self, x):
        return self.fc2(self.drop(relu(self.fc1(x))))


def set_dropout_generator(model: nn.Module, generator: torch.Generator | None) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.generator = generator


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def backward(loss: Tensor, params: Sequence[Tensor]) -> list[Tensor]:
    """Gradients of a scalar ``loss`` w.r.t. ``params`` (zeros for unreachable ones)."""
    if loss.dim() != 0:
        raise ValueError("backward expects a scalar loss")
    if not loss.requires_grad:
        raise RuntimeError("loss is not connected to any recorded operation")
    grads = torch.autograd.grad(loss, list(params), allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


# ------------------------------------------------------------ verification

def finite_difference(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``fn()`` w.r.t. tensor ``x`` (mutated in place)."""
    grad = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a: Tensor, b: Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), with a floor that treats two ~zero gradients as equal."""
    num = (a - b).norm().item()
    den = max(a.norm().item(), b.norm().item(), 1e-10)
    return num / den


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> list[float]:
    """Compare autograd against central differences for every tensor in ``inputs``.

    Returns the relative error per input.  Inputs must be float64 leaves with
    ``requires_grad`` set.
    """
    for x in inputs:
        if x.dtype != torch.float64:
            raise TypeError("gradcheck needs float64 inputs")
    loss = fn()
    analytic = backward(loss, inputs)
    return [relative_error(a, finite_difference(fn, x, h)) for a, x in zip(analytic, inputs)]
