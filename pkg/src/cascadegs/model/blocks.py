"""Transformer primitives shared by the cascade stages."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..core import quat_normalize


@dataclass
class TokenGrid:
    """Patch tokens organized per view: ``tokens (B, N, T, D)``, T = rows*cols."""

    tokens: Tensor
    rows: int
    cols: int

    def __post_init__(self) -> None:
        if self.tokens.ndim != 4:
            raise ValueError("tokens must be (B, N, T, D)")
        if self.tokens.shape[2] != self.rows * self.cols:
            raise ValueError("token count does not match rows * cols")

    @property
    def n_views(self) -> int:
        return int(self.tokens.shape[1])


class SelfAttention(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        if dim % n_heads != 0:
            raise ValueError("width must be divisible by the head count")
        self.n_heads = n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(b, s, self.n_heads, -1).transpose(1, 2)
        k = k.view(b, s, self.n_heads, -1).transpose(1, 2)
        v = v.view(b, s, self.n_heads, -1).transpose(1, 2)
        out = F.scaled_dot_product_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(b, s, d))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    """A sequence of blocks with optional intermediate taps."""

    def __init__(self, dim: int, depth: int, n_heads: int):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, n_heads) for _ in range(depth))

    def forward(self, x: Tensor, tap_indices: tuple[int, ...] = ()) -> tuple[Tensor, list[Tensor]]:
        taps: list[Tensor] = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            taps.extend(x for _ in range(tap_indices.count(i)))
        return x, taps


def tap_indices(depth: int) -> tuple[int, int, int]:
    """Indices of two intermediate blocks plus the final one (dense taps)."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return tuple(max(0, -(-depth * k // 3) - 1) for k in (1, 2, 3))  # type: ignore[return-value]


class Tokenizer(nn.Module):
    """Patchify images and add positional plus view-index embeddings."""

    def __init__(self, patch: int, width: int, image_hw: tuple[int, int], max_views: int):
        super().__init__()
        h, w = image_hw
        if h % patch or w % patch:
            raise ValueError("image size must be divisible by the patch size")
        self.patch = patch
        self.rows, self.cols = h // patch, w // patch
        self.max_views = max_views
        self.proj = nn.Linear(patch * patch * 3, width)
        self.pos_embed = nn.Parameter(torch.empty(self.rows * self.cols, width))
        self.view_embed = nn.Parameter(torch.empty(max_views, width))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.view_embed, std=0.02)

    def forward(self, images: Tensor) -> TokenGrid:
        if images.ndim != 5 or images.shape[-1] != 3:
            raise ValueError("images must be (B, N, H, W, 3)")
        b, n, h, w, _ = images.shape
        if n > self.max_views:
            raise ValueError(f"{n} views exceeds the embedding table ({self.max_views})")
        if (h // self.patch, w // self.patch) != (self.rows, self.cols):
            raise ValueError("image size does not match the configured resolution")
        p = self.patch
        x = images.reshape(b, n, self.rows, p, self.cols, p, 3)
        x = x.permute(0, 1, 2, 4, 3, 5, 6).reshape(b, n, self.rows * self.cols, p * p * 3)
        tokens = self.proj(x) + self.pos_embed
        tokens = tokens + self.view_embed[:n][None, :, None, :]
        return TokenGrid(tokens, self.rows, self.cols)


class PoseReadout(nn.Module):
    """Map per-view latents to 7-dim poses; zero-init so the start is identity.

    The raw quaternion gets a unit-w offset before normalization, so the
    readout is well-conditioned around the identity rotation.  View 0 is
    hard-fixed to the identity pose (the gauge).
    """

    def __init__(self, dim: int):
        super().__init__()
        self.head = nn.Linear(dim, 7)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, latents: Tensor) -> tuple[Tensor, Tensor]:
        raw = self.head(latents)  # (B, N, 7)
        offset = raw.new_zeros(4)
        offset[0] = 1.0
        q = quat_normalize(raw[..., :4] + offset)
        t = raw[..., 4:]
        ident_q = torch.zeros_like(q[:, :1])
        ident_q[..., 0] = 1.0
        q = torch.cat([ident_q, q[:, 1:]], dim=1)
        t = torch.cat([torch.zeros_like(t[:, :1]), t[:, 1:]], dim=1)
        return q, t


class PoseEmbed(nn.Module):
    """Embed a 7-dim pose vector into the token width."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(7, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, q: Tensor, t: Tensor) -> Tensor:
        vec = torch.cat([q, t], dim=-1)
        return self.fc2(F.gelu(self.fc1(vec)))


class ViewLatents(nn.Module):
    """One learned reference latent plus a shared source latent per extra view.

    The reference latent marks the gauge view; the source latent is shared
    and duplicated across the remaining views, each offset by a view-index
    embedding so they stay distinguishable.
    """

    def __init__(self, dim: int, max_views: int):
        super().__init__()
        self.reference = nn.Parameter(torch.empty(1, dim))
        self.source = nn.Parameter(torch.empty(1, dim))
        self.view_embed = nn.Parameter(torch.empty(max_views, dim))
        nn.init.trunc_normal_(self.reference, std=0.02)
        nn.init.trunc_normal_(self.source, std=0.02)
        nn.init.trunc_normal_(self.view_embed, std=0.02)

    def forward(self, batch: int, n_views: int) -> Tensor:
        if n_views > self.view_embed.shape[0]:
            raise ValueError("too many views for the latent table")
        base = torch.cat([self.reference, self.source.expand(n_views - 1, -1)], dim=0)
        lat = base + self.view_embed[:n_views]
        return lat[None].expand(batch, -1, -1)
