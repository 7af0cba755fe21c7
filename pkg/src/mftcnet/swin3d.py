"""3D Swin Transformer encoder used once per aperture crop."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class SwinConfig:
    embed_dim: int = 12
    patch_size: int = 2
    depths: tuple[int, ...] = (2, 2)
    num_heads: tuple[int, ...] = (2, 4)
    window_size: int = 4
    mlp_ratio: float = 4.0
    qkv_bias: bool = True

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def validate(self) -> None:
        if len(self.depths) != len(self.num_heads) or not self.depths:
            raise ValueError("depths and num_heads must be non-empty and of equal length")
        for s, h in enumerate(self.num_heads):
            if (self.embed_dim * 2**s) % h:
                raise ValueError(f"stage {s}: {self.embed_dim * 2**s} channels not divisible by {h} heads")
        if self.patch_size < 1 or self.window_size < 1 or self.embed_dim < 1:
            raise ValueError("patch_size, window_size and embed_dim must be positive")

    def stage_channels(self, s: int) -> int:
        return self.embed_dim * 2**s

    @classmethod
    def desk(cls) -> "SwinConfig":
        return cls(embed_dim=12, patch_size=2, depths=(2, 2), num_heads=(2, 4), window_size=4)


@dataclass
class FeatureMap:
    data: torch.Tensor  # (B, C, h, w, d)
    scale: int
    aperture_index: int = 0


# ---------------------------------------------------------------------------
# window helpers (channel-last token grids: B, h, w, d, C)

def window_partition(x: torch.Tensor, win: Sequence[int]) -> torch.Tensor:
    b, h, w, d, c = x.shape
    x = x.view(b, h // win[0], win[0], w // win[1], win[1], d // win[2], win[2], c)
    return x.permute(0, 1, 3, 5, 2, 4, 6, 7).reshape(-1, win[0] * win[1] * win[2], c)


def window_reverse(windows: torch.Tensor, win: Sequence[int], dims: Sequence[int]) -> torch.Tensor:
    h, w, d = dims
    c = windows.shape[-1]
    b = windows.shape[0] // ((h // win[0]) * (w // win[1]) * (d // win[2]))
    x = windows.view(b, h // win[0], w // win[1], d // win[2], win[0], win[1], win[2], c)
    return x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, h, w, d, c)


def effective_window(grid: Sequence[int], window: int, shift: bool) -> tuple[tuple, tuple]:
    """Cap the window to the grid; no shift along axes the window already covers."""
    win = tuple(min(window, g) for g in grid)
    sh = tuple(window // 2 if (shift and g > window) else 0 for g in grid)
    return win, sh


@lru_cache(maxsize=None)
def relative_position_index(win: tuple, max_window: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(*[torch.arange(n) for n in win], indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :] + (max_window - 1)
    span = 2 * max_window - 1
    return (rel[0] * span * span + rel[1] * span + rel[2]).reshape(-1)


@lru_cache(maxsize=None)
def _shift_region_ids(dims: tuple, win: tuple, shift: tuple) -> torch.Tensor:
    ids = torch.zeros(dims, dtype=torch.long)
    cnt = 0
    axis_slices = []
    for n, w, s in zip(dims, win, shift):
        if s:
            axis_slices.append((slice(0, n - w), slice(n - w, n - s), slice(n - s, n)))
        else:
            axis_slices.append((slice(0, n),))
    for a in axis_slices[0]:
        for b in axis_slices[1]:
            for c in axis_slices[2]:
                ids[a, b, c] = cnt
                cnt += 1
    return ids


def shifted_window_mask(dims: Sequence[int], win: Sequence[int], shift: Sequence[int]) -> torch.Tensor:
    """Additive mask (num_windows, N, N): 0 within a region, -inf across regions."""
    ids = _shift_region_ids(tuple(dims), tuple(win), tuple(shift))
    wins = window_partition(ids[None, ..., None].float(), win).squeeze(-1)
    diff = wins[:, :, None] != wins[:, None, :]
    mask = torch.zeros(diff.shape)
    return mask.masked_fill(diff, float("-inf"))


# ---------------------------------------------------------------------------
# layers

class PatchEmbed(nn.Module):
    """Non-overlapping p^3 blocks projected to ``embed_dim`` channels."""

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 1):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv3d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)

    def forward(self, x):
        p = self.patch_size
        if any(n % p for n in x.shape[-3:]):
            raise ValueError(f"input spatial shape {tuple(x.shape[-3:])} not divisible by patch size {p}")
        return self.proj(x)


class WindowAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int, window_size: int, qkv_bias: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        span = 2 * window_size - 1
        self.relative_position_bias_table = nn.Parameter(torch.zeros(span**3, num_heads))
        self.qkv = nn.Linear(dim, dim * 3, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)

    def position_bias(self, win: Sequence[int]) -> torch.Tensor:
        n = win[0] * win[1] * win[2]
        idx = relative_position_index(tuple(win), self.window_size).to(self.relative_position_bias_table.device)
        return self.relative_position_bias_table[idx].view(n, n, -1).permute(2, 0, 1)

    def attention_weights(self, x, win=None, mask=None):
        """Softmax attention weights (B_, heads, N, N)."""
        q, k, _ = self._qkv(x)
        return self._weights(q, k, win, mask)

    def _qkv(self, x):
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def _weights(self, q, k, win, mask):
        b, _, n, _ = q.shape
        if win is None:
            win = _cube_window(n)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn + self.position_bias(win).unsqueeze(0).to(attn.dtype)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(b // nw, nw, self.num_heads, n, n) + mask.to(attn.dtype)[None, :, None]
            attn = attn.view(b, self.num_heads, n, n)
        return attn.softmax(dim=-1)

    def forward(self, x, win=None, mask=None):
        """``x``: (num_windows * B, tokens_per_window, C)."""
        b, n, c = x.shape
        if c != self.dim:
            raise ValueError(f"expected {self.dim} channels, got {c}")
        if win is not None and win[0] * win[1] * win[2] != n:
            raise ValueError(f"window {tuple(win)} does not hold {n} tokens")
        q, k, v = self._qkv(x)
        attn = self._weights(q, k, win, mask)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(out)


def _cube_window(n: int) -> tuple:
    w = round(n ** (1 / 3))
    if w**3 != n:
        raise ValueError(f"{n} tokens is not a cubic window; pass win explicitly")
    return (w, w, w)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(nn.Module):
    """LayerNorm -> (shifted) window MSA -> residual -> LayerNorm -> MLP -> residual."""

    def __init__(self, dim, num_heads, window_size, shift: bool, mlp_ratio=4.0, qkv_bias=True):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size, qkv_bias)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x):
        # x: (B, h, w, d, C)
        b, h, w, d, c = x.shape
        win, shift = effective_window((h, w, d), self.window_size, self.shift)
        shortcut = x
        x = self.norm1(x)
        pad = [(-n) % k for n, k in zip((h, w, d), win)]
        if any(pad):
            x = F.pad(x, (0, 0, 0, pad[2], 0, pad[1], 0, pad[0]))
        dims = tuple(x.shape[1:4])
        mask = None
        if any(shift):
            x = torch.roll(x, shifts=tuple(-s for s in shift), dims=(1, 2, 3))
            mask = shifted_window_mask(dims, win, shift)
        windows = window_partition(x, win)
        windows = self.attn(windows, win=win, mask=mask)
        x = window_reverse(windows, win, dims)
        if any(shift):
            x = torch.roll(x, shifts=shift, dims=(1, 2, 3))
        x = x[:, :h, :w, :d].contiguous()
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """2x2x2 neighbourhood concat -> LayerNorm(8C) -> Linear(8C -> 2C)."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(8 * dim)
        self.reduction = nn.Linear(8 * dim, 2 * dim, bias=False)

    def forward(self, x):
        b, h, w, d, c = x.shape
        if h % 2 or w % 2 or d % 2:
            x = F.pad(x, (0, 0, 0, d % 2, 0, w % 2, 0, h % 2))
        parts = [x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinStage(nn.Module):
    def __init__(self, dim, depth, num_heads, window_size, mlp_ratio=4.0, qkv_bias=True, downsample=True):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size, shift=bool(i % 2), mlp_ratio=mlp_ratio, qkv_bias=qkv_bias)
            for i in range(depth)
        )
        self.downsample = PatchMerging(dim) if downsample else None

    def forward(self, x):
        """Returns (stage output before merging, merged map or None); channel-last tensors."""
        for blk in self.blocks:
            x = blk(x)
        return x, (self.downsample(x) if self.downsample is not None else None)


def _init_weights(m):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class SwinEncoder(nn.Module):
    """Patch embedding followed by ``num_stages`` Swin stages.

    ``num_stages`` may be smaller than ``len(cfg.depths)`` (small apertures); the
    first ``num_stages`` entries of the config are used.
    """

    def __init__(self, cfg: SwinConfig, num_stages: Optional[int] = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.num_stages = num_stages or cfg.num_stages
        if not 1 <= self.num_stages <= cfg.num_stages:
            raise ValueError(f"num_stages must be in [1, {cfg.num_stages}]")
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.stages = nn.ModuleList(
            SwinStage(
                cfg.stage_channels(s),
                cfg.depths[s],
                cfg.num_heads[s],
                cfg.window_size,
                cfg.mlp_ratio,
                cfg.qkv_bias,
                downsample=s < self.num_stages - 1,
            )
            for s in range(self.num_stages)
        )
        self.apply(_init_weights)

    @property
    def out_channels(self) -> int:
        return self.cfg.stage_channels(self.num_stages - 1)

    def forward(self, crop: torch.Tensor, num_stages: Optional[int] = None) -> list[torch.Tensor]:
        """``crop``: (B, 1, H, W, D). Returns per-stage maps (B, C_s, h_s, w_s, d_s).

        ``num_stages`` truncates a shared encoder for small apertures.
        """
        n = num_stages or self.num_stages
        if n > self.num_stages:
            raise ValueError(f"encoder has only {self.num_stages} stages")
        unit = self.cfg.patch_size * 2 ** (n - 1)
        if any(k % unit for k in crop.shape[-3:]):
            raise ValueError(
                f"crop {tuple(crop.shape[-3:])} not divisible by patch_size * 2^(stages-1) = {unit}"
            )
        x = self.patch_embed(crop).permute(0, 2, 3, 4, 1)
        outs = []
        for s in range(n):
            stage = self.stages[s]
            for blk in stage.blocks:
                x = blk(x)
            outs.append(x.permute(0, 4, 1, 2, 3).contiguous())
            if s < n - 1:
                x = stage.downsample(x)
        return outs


def encode_aperture(crop: torch.Tensor, encoder: SwinEncoder, aperture_index: int = 0) -> list[FeatureMap]:
    if crop.dim() == 3:
        crop = crop[None, None]
    maps = encoder(crop)
    p = encoder.cfg.patch_size
    return [FeatureMap(m, p * 2**s, aperture_index) for s, m in enumerate(maps)]


def stage_cap(crop_size: int, cfg: SwinConfig, min_tokens: int = 2) -> int:
    """Largest stage count (<= cfg.num_stages) keeping the deepest grid >= ``min_tokens`` per axis.

    A crop that yields fewer than ``min_tokens`` tokens still gets one stage, as long as
    it covers at least one token.
    """
    grid = crop_size // cfg.patch_size
    if grid < 1:
        raise ValueError(f"crop of {crop_size} voxels is smaller than one {cfg.patch_size}^3 token")
    stages = 1
    while stages < cfg.num_stages and grid // 2**stages >= min_tokens:
        stages += 1
    return stages
