"""Transformer regression head and the log-regularized biomass loss."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .numerics import Rng, make_rng, resolve_dtype, smooth_l1
from .sparse3d import ShapeError

MIN_TARGET_GRAMS = 1.0 + 1e-6


class BiomassDomainError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


@dataclass
class HeadConfig:
    channels: int = 128          # token width c_t
    grid: tuple[int, int] = (2, 2)  # (l_t, w_t) of the incoming feature map
    n_encoders: int = 5
    n_heads: int = 4
    ff_mult: int = 4
    hidden: tuple[int, int] = (512, 256)
    output_scale: float = 1.0

    @property
    def n_tokens(self) -> int:
        return self.grid[0] * self.grid[1] + 1


def _linear(rng: Rng, n_in: int, n_out: int, dtype) -> nn.Linear:
    layer = nn.Linear(n_in, n_out, dtype=dtype)
    bound = 1.0 / math.sqrt(n_in)
    with torch.no_grad():
        layer.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, (n_out, n_in))))
        layer.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, n_out)))
    return layer


class EncoderLayer(nn.Module):
    """Post-norm encoder: x = LN(x + MHSA(x)); x = LN(x + FFN(x))."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int, rng: Rng, dtype):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"token width {dim} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.qkv = _linear(rng, dim, 3 * dim, dtype)
        self.proj = _linear(rng, dim, dim, dtype)
        self.norm1 = nn.LayerNorm(dim, dtype=dtype)
        self.ff1 = _linear(rng, dim, ff_mult * dim, dtype)
        self.ff2 = _linear(rng, ff_mult * dim, dim, dtype)
        self.norm2 = nn.LayerNorm(dim, dtype=dtype)

    def attention(self, x: torch.Tensor) -> torch.Tensor:
        B, T, C = x.shape
        hd = C // self.n_heads
        q, k, v = self.qkv(x).reshape(B, T, 3, self.n_heads, hd).permute(2, 0, 3, 1, 4)
        att = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        return self.proj((att @ v).transpose(1, 2).reshape(B, T, C))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm1(x + self.attention(x))
        return self.norm2(x + self.ff2(torch.relu(self.ff1(x))))


class BiomassHead(nn.Module):
    def __init__(self, config: HeadConfig, seed: int = 0, dtype="float64"):
        super().__init__()
        self.config = config
        dtype = resolve_dtype(dtype)
        rng = make_rng(seed)
        c = config.channels
        self.biomass_token = nn.Parameter(torch.from_numpy(rng.standard_normal(c) * 0.02).to(dtype))
        self.pos_embed = nn.Parameter(torch.from_numpy(rng.standard_normal((config.n_tokens, c)) * 0.02).to(dtype))
        self.encoders = nn.ModuleList(
            [EncoderLayer(c, config.n_heads, config.ff_mult, rng, dtype) for _ in range(config.n_encoders)]
        )
        h1, h2 = config.hidden
        self.mlp1 = _linear(rng, c, h1, dtype)
        self.mlp2 = _linear(rng, h1, h2, dtype)
        self.out = _linear(rng, h2, 1, dtype)

    def tokens(self, fmap: torch.Tensor) -> torch.Tensor:
        """(B, l, w, c) feature maps -> (B, 1 + l*w, c) token sequences."""
        if fmap.dim() == 3:
            fmap = fmap[None]
        B, l, w, c = fmap.shape
        if (l, w) != tuple(self.config.grid) or c != self.config.channels:
            raise ShapeError(
                f"feature map {(l, w, c)} does not match head grid {tuple(self.config.grid)} x {self.config.channels}"
            )
        flat = fmap.reshape(B, l * w, c)
        tok = self.biomass_token.expand(B, 1, c)
        return torch.cat([tok, flat], dim=1) + self.pos_embed

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        x = self.tokens(fmap)
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite activation after encoder {i}")
        h = torch.relu(self.mlp1(x[:, 0]))
        h = torch.relu(self.mlp2(h))
        return self.out(h)[:, 0] * self.config.output_scale

    def encoder_param_count(self) -> int:
        return sum(p.numel() for p in self.encoders[0].parameters()) if len(self.encoders) else 0


def flatten_tokens(fmap: torch.Tensor, params: BiomassHead) -> torch.Tensor:
    return params.tokens(fmap)[0]


def unflatten_tokens(tokens: torch.Tensor, grid: Sequence[int]) -> torch.Tensor:
    """Spatial tokens (dropping the Biomass token) back to (l, w, c)."""
    return tokens[1:].reshape(grid[0], grid[1], -1)


def predict_biomass(fmap: torch.Tensor, params: BiomassHead) -> torch.Tensor:
    return params(fmap)[0]


def check_targets(targets) -> None:
    t = torch.as_tensor(targets)
    if torch.any(t <= MIN_TARGET_GRAMS):
        bad = float(t[t <= MIN_TARGET_GRAMS][0])
        raise BiomassDomainError(f"target {bad} g is not above 1 g; log regularizer undefined")


def biomass_loss(preds, targets, reduction: str = "sum") -> torch.Tensor:
    """Sum over samples of smooth_l1((pred - m) / ln m)."""
    preds = torch.as_tensor(preds, dtype=torch.float64) if not isinstance(preds, torch.Tensor) else preds
    targets = torch.as_tensor(targets, dtype=preds.dtype)
    if preds.shape != targets.shape or preds.numel() == 0:
        raise ShapeError("preds and targets must have equal nonzero length")
    check_targets(targets)
    per = smooth_l1((preds - targets) / torch.log(targets))
    return per.mean() if reduction == "mean" else per.sum()
