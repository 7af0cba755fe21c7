"""Convolutional branch and the 3D fusion block joining transformer and conv features."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class LayerNorm3d(nn.Module):
    """LayerNorm over channels at each voxel of a (B, C, h, w, d) map.

    Purely pointwise, so it never couples distant voxels.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.norm = nn.LayerNorm(channels, eps=eps)

    def forward(self, x):
        return self.norm(x.permute(0, 2, 3, 4, 1)).permute(0, 4, 1, 2, 3)


class ConvModule(nn.Module):
    """Residual pair of 3^3 conv -> norm -> GELU layers with hidden width 2C."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        hidden = expansion * channels
        self.conv1 = nn.Conv3d(channels, hidden, 3, padding=1)
        self.norm1 = LayerNorm3d(hidden)
        self.conv2 = nn.Conv3d(hidden, channels, 3, padding=1)
        self.norm2 = LayerNorm3d(channels)

    def zero_init_last(self):
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        return self

    def forward(self, t):
        h = F.gelu(self.norm1(self.conv1(t)))
        return t + F.gelu(self.norm2(self.conv2(h)))


def _check_reduction(channels: int, reduction: int):
    if reduction < 1 or channels % reduction:
        raise ValueError(f"{channels} channels not divisible by reduction {reduction}")


class SEBlock(nn.Module):
    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        _check_reduction(channels, reduction)
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def gate(self, f):
        s = f.mean(dim=(2, 3, 4))
        return torch.sigmoid(self.fc2(F.relu(self.fc1(s))))

    def forward(self, f):
        return f * self.gate(f)[:, :, None, None, None]


class CBAM(nn.Module):
    """Channel attention (shared MLP on avg/max descriptors) then 7^3 spatial attention."""

    def __init__(self, channels: int, reduction: int = 4, kernel_size: int = 7):
        super().__init__()
        _check_reduction(channels, reduction)
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)
        # replicate padding keeps the spatial gate constant on constant input
        self.spatial = nn.Conv3d(
            2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate", bias=False
        )

    def _mlp(self, s):
        return self.fc2(F.relu(self.fc1(s)))

    def channel_gate(self, f):
        avg = f.mean(dim=(2, 3, 4))
        mx = f.amax(dim=(2, 3, 4))
        return torch.sigmoid(self._mlp(avg) + self._mlp(mx))

    def spatial_gate(self, f):
        desc = torch.cat([f.mean(dim=1, keepdim=True), f.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.spatial(desc))

    def forward(self, f):
        f = f * self.channel_gate(f)[:, :, None, None, None]
        return f * self.spatial_gate(f)


@dataclass
class FusedFeature:
    data: torch.Tensor
    aperture_index: int = 0


class FusionBlock(nn.Module):
    """concat(SE(t), t * c, CBAM(c)) followed by a 1x1x1 projection 3C -> C."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        self.se = SEBlock(channels, reduction)
        self.cbam = CBAM(channels, reduction)
        self.proj = nn.Conv3d(3 * channels, channels, 1)

    def concat(self, t, c):
        if t.shape != c.shape:
            raise ValueError(f"transformer map {tuple(t.shape)} != conv map {tuple(c.shape)}")
        return torch.cat([self.se(t), t * c, self.cbam(c)], dim=1)

    def forward(self, t, c):
        return self.proj(self.concat(t, c))


def fuse(t: torch.Tensor, c: torch.Tensor, block: FusionBlock, aperture_index: int = 0) -> FusedFeature:
    return FusedFeature(block(t, c), aperture_index)
