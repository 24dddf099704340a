"""Dense decoding heads: point maps, confidence, appearance and Gaussians."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..core import quat_normalize
from ..rasterizer import SH_C0, GaussianSet
from .blocks import TokenGrid

SCALE_MIN = 1e-4
SCALE_MAX = 0.5
_INIT_OPACITY = 0.1
_INIT_SCALE = 0.02
_PYRAMID_SEED = 914217


def _up2(x: Tensor) -> Tensor:
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class DenseDecoder(nn.Module):
    """Fuse three transformer taps into a full-resolution dense map.

    A light take on the DPT recipe: each tap is projected to a common conv
    width at token resolution, the three are fused, then three upsample+conv
    stages bring the grid back to pixel resolution (patch size 8 = 2^3).
    """

    def __init__(self, token_dim: int, channels: int, patch: int, out_channels: int):
        super().__init__()
        n_up = int(round(math.log2(patch)))
        if 2**n_up != patch:
            raise ValueError("patch size must be a power of two")
        self.proj = nn.ModuleList(nn.Linear(token_dim, channels) for _ in range(3))
        self.fuse = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))
        self.ups = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(n_up)
        )
        self.head = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, taps: list[TokenGrid]) -> Tensor:
        """Decode to ``(B, N, out_channels, H, W)``."""
        if len(taps) != 3:
            raise ValueError("expected exactly 3 taps")
        b, n, _, _ = taps[0].tokens.shape
        rows, cols = taps[0].rows, taps[0].cols
        x = None
        for grid, proj, fuse in zip(taps, self.proj, self.fuse):
            feat = proj(grid.tokens)  # (B, N, T, C)
            feat = feat.reshape(b * n, rows, cols, -1).permute(0, 3, 1, 2)
            feat = fuse(F.gelu(feat))
            x = feat if x is None else x + feat
        for conv in self.ups:
            x = F.gelu(conv(_up2(x)))
        out = self.head(x)
        return out.reshape(b, n, *out.shape[1:])


class AppearanceDecoder(nn.Module):
    """Decode appearance features at half resolution, then upsample."""

    def __init__(self, token_dim: int, channels: int, patch: int, out_channels: int):
        super().__init__()
        n_up = int(round(math.log2(patch))) - 1
        self.proj = nn.ModuleList(nn.Linear(token_dim, channels) for _ in range(3))
        self.fuse = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))
        self.ups = nn.ModuleList(
            nn.Conv2d(channels, channels, 3, padding=1) for _ in range(max(n_up, 0))
        )
        self.head = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, taps: list[TokenGrid]) -> Tensor:
        if len(taps) != 3:
            raise ValueError("expected exactly 3 taps")
        b, n, _, _ = taps[0].tokens.shape
        rows, cols = taps[0].rows, taps[0].cols
        x = None
        for grid, proj, fuse in zip(taps, self.proj, self.fuse):
            feat = proj(grid.tokens)
            feat = feat.reshape(b * n, rows, cols, -1).permute(0, 3, 1, 2)
            feat = fuse(F.gelu(feat))
            x = feat if x is None else x + feat
        for conv in self.ups:
            x = F.gelu(conv(_up2(x)))
        out = _up2(self.head(x))  # final upsample happens after the head
        return out.reshape(b, n, *out.shape[1:])


def split_points_confidence(raw: Tensor) -> tuple[Tensor, Tensor]:
    """Split a 4-channel dense decode into point maps and confidence.

    ``raw (B, N, 4, H, W)`` becomes positions ``(B, N, H, W, 3)`` and
    confidence ``(B, N, H, W)`` with the ``1 + exp`` parametrization, so
    confidence is strictly greater than 1 and its log strictly positive.
    """
    if raw.shape[2] != 4:
        raise ValueError("expected 4 channels (xyz + confidence)")
    points = raw[:, :, :3].permute(0, 1, 3, 4, 2)
    conf = 1.0 + torch.exp(raw[:, :, 3].clamp(max=20.0))
    return points, conf


class FrozenImagePyramid(nn.Module):
    """Fixed random conv features at three scales (full, 1/2, 1/4).

    Weights are sampled once from a fixed seed and never trained; the same
    module doubles as the perceptual-loss feature extractor and as the image
    branch of the Gaussian head.
    """

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.conv1 = nn.Conv2d(3, c, 3, padding=1)
        self.conv2 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        gen = torch.Generator().manual_seed(_PYRAMID_SEED)
        for conv in (self.conv1, self.conv2, self.conv3):
            fan_in = conv.in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
                )
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def out_channels(self) -> int:
        return self.conv1.out_channels

    def features(self, images: Tensor) -> list[Tensor]:
        """``images (K, 3, H, W)`` -> features at full, 1/2 and 1/4 resolution."""
        f1 = F.gelu(self.conv1(images))
        f2 = F.gelu(self.conv2(f1))
        f3 = F.gelu(self.conv3(f2))
        return [f1, f2, f3]


class GaussianHead(nn.Module):
    """Per-pixel Gaussian parameters from appearance + image features.

    Centers come straight from the global point map.  The head is a 3-layer
    conv stack over the concatenation of the appearance features and the
    full-resolution frozen image features; its final layer is zero-initialized
    (biases excepted) so training starts from identity rotations, opacity
    0.1, scale 0.02 and the input pixel color.
    """

    def __init__(self, appearance_channels: int, image_channels: int, sh_degree: int):
        super().__init__()
        if sh_degree not in (0, 1):
            raise ValueError("sh_degree must be 0 or 1")
        self.sh_degree = sh_degree
        self.n_sh = (sh_degree + 1) ** 2
        width = 64
        out_ch = 1 + 4 + 3 + 3 * self.n_sh
        self.conv1 = nn.Conv2d(appearance_channels + image_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.conv3 = nn.Conv2d(width, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv3.weight)
        nn.init.zeros_(self.conv3.bias)
        with torch.no_grad():
            self.conv3.bias[0] = math.log(_INIT_OPACITY / (1.0 - _INIT_OPACITY))
            # softplus^-1(x) = log(expm1(x))
            self.conv3.bias[5:8] = math.log(math.expm1(_INIT_SCALE))

    def forward(
        self, centers: Tensor, appearance: Tensor, image_feats: Tensor, images: Tensor
    ) -> list[GaussianSet]:
        """Build one GaussianSet per batch element.

        ``centers (B, N, H, W, 3)``, ``appearance (B, N, C_A, H, W)``,
        ``image_feats (B, N, C_I, H, W)``, ``images (B, N, H, W, 3)``.
        """
        b, n, h, w, _ = centers.shape
        x = torch.cat([appearance, image_feats], dim=2).reshape(b * n, -1, h, w)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        raw = self.conv3(x).reshape(b, n, -1, h, w).permute(0, 1, 3, 4, 2)

        opacity = torch.sigmoid(raw[..., 0])
        rot_offset = raw.new_zeros(4)
        rot_offset[0] = 1.0
        rotations = quat_normalize(raw[..., 1:5] + rot_offset)
        scales = F.softplus(raw[..., 5:8]).clamp(SCALE_MIN, SCALE_MAX)
        sh = raw[..., 8:].reshape(b, n, h, w, self.n_sh, 3)
        # Ground the DC term in the observed pixel color.
        sh0_prior = (images - 0.5) / SH_C0
        sh = torch.cat([(sh[..., 0, :] + sh0_prior)[..., None, :], sh[..., 1:, :]], dim=-2)

        out = []
        for i in range(b):
            out.append(
                GaussianSet(
                    centers=centers[i].reshape(-1, 3),
                    opacities=opacity[i].reshape(-1),
                    rotations=rotations[i].reshape(-1, 4),
                    scales=scales[i].reshape(-1, 3),
                    sh=sh[i].reshape(-1, self.n_sh, 3),
                )
            )
        return out
