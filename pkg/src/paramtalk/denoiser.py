"""Spatio-temporal noise predictor over expression-coefficient sequences.

Pipeline for an input ``z`` of shape ``(B, L, N)``::

    region_attention      per-region frame self-attention, concat, fuse (W_f)
    multiscale_temporal   depthwise convs at dilation 1, 2, 4 -> pointwise
    audio_cross_fusion    [local conv (width k) ; causal audio cross-attn] -> W_o, b_o
    film_modulate         gamma(t) * F + beta(t)
    out_proj              d_model -> N

With ``plain_eq=True`` the stages compose literally. Otherwise residual
connections (F_spatial -> F_temp -> F_final, and around each region's
attention) and GELU activations are added so the network trains well.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from paramtalk.types import SubspacePartition

REGION_ORDER = ("eye", "lip", "global")
DILATIONS = (1, 2, 4)


def region_widths(d_model: int, n_heads: int, n_regions: int = len(REGION_ORDER)) -> list[int]:
    """Split ``d_model`` into per-region widths that are multiples of ``n_heads``."""
    if d_model % n_heads:
        raise ValueError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    units = d_model // n_heads
    if units < n_regions:
        raise ValueError(f"d_model={d_model} too small for {n_regions} regions of {n_heads} heads")
    base, extra = divmod(units, n_regions)
    return [(base + (i < extra)) * n_heads for i in range(n_regions)]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape ``(B, dim)``."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class RelativePositionBias(nn.Module):
    """Learned per-head bias indexed by the clipped frame offset between query and key."""

    def __init__(self, n_heads: int, max_distance: int, causal: bool):
        super().__init__()
        self.max_distance = max_distance
        self.causal = causal
        size = max_distance + 1 if causal else 2 * max_distance + 1
        self.table = nn.Parameter(torch.zeros(n_heads, size))

    def forward(self, lq: int, lk: int) -> torch.Tensor:
        q = torch.arange(lq)[:, None]
        k = torch.arange(lk)[None, :]
        if self.causal:
            idx = (q - k).clamp(0, self.max_distance)
        else:
            idx = (k - q).clamp(-self.max_distance, self.max_distance) + self.max_distance
        return self.table[:, idx]  # (H, lq, lk)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_query: int, d_context: int, width: int, n_heads: int,
                 max_distance: int = 32, causal: bool = False):
        super().__init__()
        if width % n_heads:
            raise ValueError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.causal = causal
        self.q = nn.Linear(d_query, width)
        self.k = nn.Linear(d_context, width)
        self.v = nn.Linear(d_context, width)
        self.out = nn.Linear(width, width)
        self.rel = RelativePositionBias(n_heads, max_distance, causal)

    def _split(self, x):
        B, L, C = x.shape
        return x.view(B, L, self.n_heads, C // self.n_heads).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q, k, v = self._split(self.q(x)), self._split(self.k(context)), self._split(self.v(context))
        scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
        scores = scores + self.rel(x.shape[1], context.shape[1])
        if self.causal:
            future = torch.ones(x.shape[1], context.shape[1], dtype=torch.bool).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        h = scores.softmax(dim=-1) @ v
        B, H, L, D = h.shape
        return self.out(h.transpose(1, 2).reshape(B, L, H * D))


class RegionAttention(nn.Module):
    """Self-attention over frames, one branch per facial region, fused by ``W_f``."""

    def __init__(self, partition: SubspacePartition, d_model: int, n_heads: int,
                 max_distance: int = 32, plain_eq: bool = False):
        super().__init__()
        self.plain_eq = plain_eq
        self.n_dims = partition.n_dims
        self.widths = dict(zip(REGION_ORDER, region_widths(d_model, n_heads)))
        regions = partition.regions()
        for name in REGION_ORDER:
            self.register_buffer(f"idx_{name}", torch.tensor(regions[name], dtype=torch.long), persistent=False)
        self.embed = nn.ModuleDict(
            {r: nn.Linear(len(regions[r]), self.widths[r]) for r in REGION_ORDER}
        )
        self.attn = nn.ModuleDict(
            {r: MultiHeadAttention(self.widths[r], self.widths[r], self.widths[r], n_heads, max_distance)
             for r in REGION_ORDER}
        )
        self.W_f = nn.Linear(d_model, d_model)

    def region_features(self, z: torch.Tensor) -> torch.Tensor:
        """Concatenated per-region attention outputs, before ``W_f``."""
        if z.shape[-1] != self.n_dims:
            raise ValueError(f"input has {z.shape[-1]} dims, partition expects {self.n_dims}")
        parts = []
        for r in REGION_ORDER:
            h = self.embed[r](z.index_select(-1, getattr(self, f"idx_{r}")))
            a = self.attn[r](h)
            parts.append(a if self.plain_eq else h + a)
        return torch.cat(parts, dim=-1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.W_f(self.region_features(z))


class MultiScaleTemporal(nn.Module):
    """Depthwise temporal convs with dilations 1, 2, 4 aggregated by a pointwise conv."""

    def __init__(self, d_model: int, kernel: int = 3, plain_eq: bool = False):
        super().__init__()
        self.plain_eq = plain_eq
        self.depthwise = nn.ModuleList(
            nn.Conv1d(d_model, d_model, kernel, padding=d * (kernel // 2), dilation=d, groups=d_model)
            for d in DILATIONS
        )
        self.pointwise = nn.Conv1d(len(DILATIONS) * d_model, d_model, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = f.transpose(1, 2)
        h = self.pointwise(torch.cat([dw(x) for dw in self.depthwise], dim=1)).transpose(1, 2)
        return h if self.plain_eq else f + F.gelu(h)


class AudioCrossFusion(nn.Module):
    """Local conv path and causal audio cross-attention path, fused by ``W_o`` and ``b_o``."""

    def __init__(self, d_model: int, audio_dim: int, n_heads: int, window: int = 5,
                 max_distance: int = 32, plain_eq: bool = False):
        super().__init__()
        if window % 2 != 1:
            raise ValueError(f"local window must be odd, got {window}")
        self.plain_eq = plain_eq
        self.audio_dim = audio_dim
        self.local = nn.Conv1d(d_model, d_model, window, padding=window // 2)
        self.cross = MultiHeadAttention(d_model, audio_dim, d_model, n_heads, max_distance, causal=True)
        self.W_o = nn.Linear(2 * d_model, d_model)

    def forward(self, f: torch.Tensor, audio: Optional[torch.Tensor] = None,
                keep: Optional[torch.Tensor] = None) -> torch.Tensor:
        """``audio=None`` is the null condition; ``keep`` (B,) zeroes the audio path per item."""
        conv = self.local(f.transpose(1, 2)).transpose(1, 2)
        if not self.plain_eq:
            conv = F.gelu(conv)
        if audio is None:
            ctx = torch.zeros_like(f)
        else:
            if audio.shape[:2] != f.shape[:2]:
                raise ValueError(f"audio frames {tuple(audio.shape[:2])} misaligned with features {tuple(f.shape[:2])}")
            ctx = self.cross(f, audio)
            if keep is not None:
                ctx = ctx * keep.to(ctx.dtype)[:, None, None]
        fused = self.W_o(torch.cat([conv, ctx], dim=-1))
        return fused if self.plain_eq else f + fused


class FiLM(nn.Module):
    def __init__(self, d_model: int):
        super().__init__()
        self.d_model = d_model
        self.mlp = nn.Sequential(nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, 2 * d_model))
        with torch.no_grad():
            self.mlp[2].weight.mul_(0.1)
            self.mlp[2].bias.zero_()
            self.mlp[2].bias[:d_model] = 1.0

    def gamma_beta(self, t: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        emb = timestep_embedding(t, self.d_model).to(self.mlp[0].weight.dtype)
        return self.mlp(emb).chunk(2, dim=-1)

    def forward(self, f: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        gamma, beta = self.gamma_beta(t)
        return gamma[:, None, :] * f + beta[:, None, :]


class Denoiser(nn.Module):
    """Predicts the injected noise from ``(z_t, t, audio)``."""

    def __init__(self, partition: SubspacePartition, audio_dim: int, d_model: int = 128,
                 n_heads: int = 4, local_window: int = 5, max_distance: int = 32,
                 plain_eq: bool = False):
        super().__init__()
        self.partition = partition
        self.arch = dict(audio_dim=audio_dim, d_model=d_model, n_heads=n_heads,
                         local_window=local_window, max_distance=max_distance, plain_eq=plain_eq)
        self.spatial = RegionAttention(partition, d_model, n_heads, max_distance, plain_eq)
        self.temporal = MultiScaleTemporal(d_model, plain_eq=plain_eq)
        self.fusion = AudioCrossFusion(d_model, audio_dim, n_heads, local_window, max_distance, plain_eq)
        self.film = FiLM(d_model)
        self.out_proj = nn.Linear(d_model, partition.n_dims)

    @property
    def n_dims(self) -> int:
        return self.partition.n_dims

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, audio: Optional[torch.Tensor] = None,
                keep: Optional[torch.Tensor] = None) -> torch.Tensor:
        if t.ndim == 0:
            t = t.expand(z_t.shape[0])
        f = self.spatial(z_t)
        f = self.temporal(f)
        f = self.fusion(f, audio, keep)
        f = self.film(f, t)
        return self.out_proj(f)


def predict_noise(model: Denoiser, z_t, t: int, audio=None) -> np.ndarray:
    """Numpy convenience wrapper for a single ``(frames, N)`` sequence."""
    p = next(model.parameters())
    z = torch.as_tensor(np.asarray(z_t), dtype=p.dtype)[None]
    a = None if audio is None else torch.as_tensor(np.asarray(audio), dtype=p.dtype)[None]
    with torch.no_grad():
        eps = model(z, torch.tensor([int(t)]), a)
    return eps[0].cpu().numpy().astype(np.float64)
