"""MFTC-Net: multi-aperture Swin encoders, conv branches, fusion blocks and decoder.

Decoder layout (a reconstruction; the original design is not documented in detail):

* Every aperture ``k`` produces per-stage maps. At a given encoder level ``s`` the
  aperture-``k`` map covers exactly the central region of the aperture-0 map at that
  level, because apertures are nested centre crops at original resolution.
* For each level the decoder builds a *composite skip*: the aperture-0 map with the
  smaller apertures' maps added into their centre regions. An aperture's deepest map
  is its fused map ``F_k`` (or ``T_k`` with fusion disabled).
* From the deepest composite the decoder upsamples with transposed convolutions,
  concatenating the composite skip of each level, then a full-resolution stem of the
  raw patch, and ends with a 1x1x1 convolution to class logits.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .aperture import AperturePyramid, aperture_offsets, build_aperture_pyramid
from .fusion import ConvModule, FusionBlock, LayerNorm3d
from .swin3d import SwinConfig, SwinEncoder, stage_cap


@dataclass
class ModelConfig:
    swin: SwinConfig = field(default_factory=SwinConfig.desk)
    apertures: int = 4
    fusion_enabled: bool = True
    num_classes: int = 9  # output channels, background included
    input_size: int = 32
    # width of the full-resolution head, then one width per encoder level
    decoder_channels: tuple[int, ...] = (16, 24, 48)
    se_reduction: int = 4
    share_weights: bool = False

    def __post_init__(self):
        if isinstance(self.swin, dict):
            self.swin = SwinConfig(**self.swin)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)

    @property
    def has_decoder(self) -> bool:
        return len(self.decoder_channels) > 0

    def crop_sizes(self) -> list[int]:
        return [self.input_size // 2**k for k in range(self.apertures)]

    def aperture_stages(self) -> list[int]:
        return [stage_cap(n, self.swin) for n in self.crop_sizes()]

    def validate(self) -> None:
        self.swin.validate()
        if not 1 <= self.apertures <= 4:
            raise ValueError("apertures must be in [1, 4]")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        unit = 2 ** (self.apertures - 1) * self.swin.patch_size
        if self.input_size % unit:
            raise ValueError(f"input_size {self.input_size} not divisible by 2^(A-1)*p = {unit}")
        stages = self.aperture_stages()
        if self.input_size % (self.swin.patch_size * 2 ** (stages[0] - 1)):
            raise ValueError("input_size incompatible with the stage count")
        for k, (n, s) in enumerate(zip(self.crop_sizes(), stages)):
            if n % (self.swin.patch_size * 2 ** (s - 1)):
                raise ValueError(f"aperture {k} crop {n} not divisible for {s} stages")
        for k, s in enumerate(stages[1:], start=1):
            # crop k sits at offset H/2 - H/2^(k+1), which must land on its deepest token grid
            margin = self.input_size // 2 ** (k + 1)
            if margin % (self.swin.patch_size * 2 ** (s - 1)):
                raise ValueError(
                    f"aperture {k} offset is not aligned to its token grid; "
                    f"input_size must be divisible by 2^A * patch_size"
                )
        if self.has_decoder and len(self.decoder_channels) != stages[0] + 1:
            raise ValueError(
                f"decoder_channels needs {stages[0] + 1} entries (head + one per level), "
                f"got {len(self.decoder_channels)}"
            )
        if self.fusion_enabled:
            for s in stages:
                c = self.swin.stage_channels(s - 1)
                if c % self.se_reduction:
                    raise ValueError(f"fusion width {c} not divisible by se_reduction {self.se_reduction}")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        """128^3 reconstruction sized to the reported ~40M parameters."""
        kw.setdefault(
            "swin",
            SwinConfig(embed_dim=32, patch_size=2, depths=(2, 2, 12), num_heads=(2, 4, 8), window_size=7),
        )
        kw.setdefault("input_size", 128)
        kw.setdefault("decoder_channels", (48, 96, 192, 768))
        kw.setdefault("se_reduction", 16)
        return cls(**kw)


class ResBlock(nn.Module):
    """conv3 -> LN -> GELU -> conv3 -> LN, plus (projected) identity, then GELU."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm1 = LayerNorm3d(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = LayerNorm3d(cout)
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        h = F.gelu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.gelu(h + (self.skip(x) if self.skip is not None else x))


def center_insert(base: torch.Tensor, part: torch.Tensor) -> torch.Tensor:
    """Add ``part`` into the central region of ``base`` (last three axes)."""
    pads = []
    for n, m in zip(reversed(base.shape[-3:]), reversed(part.shape[-3:])):
        if (n - m) % 2 or m > n:
            raise ValueError(f"cannot centre {tuple(part.shape[-3:])} inside {tuple(base.shape[-3:])}")
        pads += [(n - m) // 2, (n - m) // 2]
    return base + F.pad(part, pads)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, levels: int):
        super().__init__()
        dec = cfg.decoder_channels
        sw = cfg.swin
        self.levels = levels
        self.bottleneck = ResBlock(sw.stage_channels(levels - 1), dec[levels])
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for s in range(levels - 2, -1, -1):
            self.ups.append(nn.ConvTranspose3d(dec[s + 2], dec[s + 1], 2, stride=2))
            self.blocks.append(ResBlock(dec[s + 1] + sw.stage_channels(s), dec[s + 1]))
        p = sw.patch_size
        self.head_up = nn.ConvTranspose3d(dec[1], dec[0], p, stride=p)
        self.stem = ResBlock(1, dec[0])
        self.head = ResBlock(2 * dec[0], dec[0])
        self.out = nn.Conv3d(dec[0], cfg.num_classes, 1)

    def forward(self, skips: list[torch.Tensor], image: torch.Tensor) -> torch.Tensor:
        x = self.bottleneck(skips[-1])
        for i, s in enumerate(range(self.levels - 2, -1, -1)):
            x = self.blocks[i](torch.cat([self.ups[i](x), skips[s]], dim=1))
        x = self.head_up(x)
        x = self.head(torch.cat([x, self.stem(image)], dim=1))
        return self.out(x)


class MFTCNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.stages = cfg.aperture_stages()
        if cfg.share_weights:
            shared = SwinEncoder(cfg.swin, self.stages[0])
            self.encoders = nn.ModuleList([shared])
        else:
            self.encoders = nn.ModuleList(SwinEncoder(cfg.swin, s) for s in self.stages)
        if cfg.fusion_enabled:
            widths = [cfg.swin.stage_channels(s - 1) for s in self.stages]
            self.conv_modules = nn.ModuleList(ConvModule(c) for c in widths)
            self.fusions = nn.ModuleList(FusionBlock(c, cfg.se_reduction) for c in widths)
        else:
            self.conv_modules = None
            self.fusions = None
        self.decoder = Decoder(cfg, self.stages[0]) if cfg.has_decoder else None

    def encoder_for(self, k: int) -> SwinEncoder:
        return self.encoders[0 if self.cfg.share_weights else k]

    def encode(self, pyr: AperturePyramid) -> list[list[torch.Tensor]]:
        """Per aperture, the per-stage maps with the deepest one replaced by ``F_k``."""
        if len(pyr) != self.cfg.apertures:
            raise ValueError(f"pyramid has {len(pyr)} levels, model expects {self.cfg.apertures}")
        feats = []
        for k, crop in enumerate(pyr.crops):
            maps = self.encoder_for(k)(crop, self.stages[k])
            if self.fusions is not None:
                t = maps[-1]
                c = self.conv_modules[k](t)
                maps[-1] = self.fusions[k](t, c)
            feats.append(maps)
        return feats

    def composite_skips(self, feats: list[list[torch.Tensor]]) -> list[torch.Tensor]:
        skips = list(feats[0])
        for maps in feats[1:]:
            for s, m in enumerate(maps):
                skips[s] = center_insert(skips[s], m)
        return skips

    def decode(self, feats: list[list[torch.Tensor]], image: torch.Tensor) -> torch.Tensor:
        if self.decoder is None:
            raise RuntimeError("model was configured without a decoder")
        return self.decoder(self.composite_skips(feats), image)

    def forward(self, x) -> torch.Tensor:
        """``x``: (B, 1, H, W, D) tensor or an AperturePyramid of such tensors.

        Returns logits (B, num_classes, H, W, D).
        """
        if isinstance(x, AperturePyramid):
            pyr = x
            pyr = AperturePyramid([_as_batch(c, self) for c in pyr.crops], pyr.offsets)
        else:
            pyr = build_aperture_pyramid(_as_batch(x, self), self.cfg.apertures)
        image = pyr.crops[0]
        if tuple(image.shape[-3:]) != (self.cfg.input_size,) * 3:
            raise ValueError(f"expected {self.cfg.input_size}^3 input, got {tuple(image.shape[-3:])}")
        return self.decode(self.encode(pyr), image)


def _as_batch(x, model: nn.Module) -> torch.Tensor:
    p = next(model.parameters())
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    x = x.to(dtype=p.dtype, device=p.device)
    while x.dim() < 5:
        x = x.unsqueeze(0)
    return x


# ---------------------------------------------------------------------------
# parameter accounting

def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def _linear(i, o, bias=True):
    return i * o + (o if bias else 0)


def _conv(i, o, k, bias=True):
    return k**3 * i * o + (o if bias else 0)


def _layernorm(c):
    return 2 * c


def swin_encoder_params(sw: SwinConfig, stages: int) -> int:
    n = _conv(1, sw.embed_dim, sw.patch_size)
    for s in range(stages):
        c = sw.stage_channels(s)
        hidden = int(c * sw.mlp_ratio)
        block = (
            2 * _layernorm(c)
            + (2 * sw.window_size - 1) ** 3 * sw.num_heads[s]
            + _linear(c, 3 * c, sw.qkv_bias)
            + _linear(c, c)
            + _linear(c, hidden)
            + _linear(hidden, c)
        )
        n += sw.depths[s] * block
        if s < stages - 1:
            n += _layernorm(8 * c) + _linear(8 * c, 2 * c, bias=False)
    return n


def fusion_params(c: int, reduction: int) -> int:
    conv_module = _conv(c, 2 * c, 3) + _layernorm(2 * c) + _conv(2 * c, c, 3) + _layernorm(c)
    mlp = _linear(c, c // reduction) + _linear(c // reduction, c)
    se = mlp
    cbam = mlp + _conv(2, 1, 7, bias=False)
    proj = _conv(3 * c, c, 1)
    return conv_module + se + cbam + proj


def _resblock(i, o):
    return _conv(i, o, 3) + _layernorm(o) + _conv(o, o, 3) + _layernorm(o) + (_conv(i, o, 1) if i != o else 0)


def decoder_params(cfg: ModelConfig, levels: int) -> int:
    dec, sw = cfg.decoder_channels, cfg.swin
    n = _resblock(sw.stage_channels(levels - 1), dec[levels])
    for s in range(levels - 2, -1, -1):
        n += _conv(dec[s + 2], dec[s + 1], 2) + _resblock(dec[s + 1] + sw.stage_channels(s), dec[s + 1])
    n += _conv(dec[1], dec[0], sw.patch_size)
    n += _resblock(1, dec[0]) + _resblock(2 * dec[0], dec[0]) + _conv(dec[0], cfg.num_classes, 1)
    return n


def param_count(cfg: ModelConfig) -> int:
    """Closed-form learnable-parameter count; must equal ``count_parameters(MFTCNet(cfg))``."""
    cfg.validate()
    stages = cfg.aperture_stages()
    if cfg.share_weights:
        n = swin_encoder_params(cfg.swin, stages[0])
    else:
        n = sum(swin_encoder_params(cfg.swin, s) for s in stages)
    if cfg.fusion_enabled:
        n += sum(fusion_params(cfg.swin.stage_channels(s - 1), cfg.se_reduction) for s in stages)
    if cfg.has_decoder:
        n += decoder_params(cfg, stages[0])
    return n


def component_sweep(base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """The five rows T1, T1+T2, ..., T1..T4 + Fusion built from ``base``."""
    from dataclasses import replace

    rows = []
    for a in range(1, 5):
        name = "+".join(f"T{i}" for i in range(1, a + 1))
        rows.append((name, replace(base, apertures=a, fusion_enabled=False)))
    rows.append(("T1+T2+T3+T4+Fusion", replace(base, apertures=4, fusion_enabled=True)))
    return rows
