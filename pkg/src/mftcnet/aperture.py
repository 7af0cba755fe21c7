"""Patch sampling, augmentation and nested center-crop apertures.

Apertures are exact sub-arrays of the sampled patch (no resampling). Crop ``k``
has extent ``H / 2**k`` and sits centred inside crop ``k - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .volio import LabelVolume, Volume

Triple = tuple[int, int, int]


@dataclass
class PatchSample:
    image: np.ndarray
    labels: np.ndarray
    corner: Triple = (0, 0, 0)
    case_id: str = ""

    @property
    def shape(self) -> Triple:
        return tuple(self.image.shape)


@dataclass
class AperturePyramid:
    crops: list
    offsets: list[Triple]

    @property
    def sizes(self) -> list[Triple]:
        return [tuple(c.shape[-3:]) for c in self.crops]

    def __len__(self):
        return len(self.crops)


def check_patch_divisibility(shape: Sequence[int], apertures: int, unit: int) -> None:
    """Every axis must split into ``apertures`` halvings of ``unit``-sized tokens."""
    step = 2 ** (apertures - 1) * unit
    bad = [n for n in shape if n % step]
    if bad:
        raise ValueError(
            f"patch shape {tuple(shape)} not divisible by 2^(A-1)*unit = {step} "
            f"(A={apertures}, unit={unit})"
        )


def pad_to_at_least(x: np.ndarray, size: Sequence[int], value=0) -> np.ndarray:
    pad = [(0, max(0, s - n)) for n, s in zip(x.shape[-3:], size)]
    if not any(p[1] for p in pad):
        return x
    lead = [(0, 0)] * (x.ndim - 3)
    return np.pad(x, lead + pad, mode="constant", constant_values=value)


def sample_patch(
    v: Volume, l: LabelVolume, size: Sequence[int], rng: np.random.Generator
) -> PatchSample:
    """Draw a patch whose corner is uniform over all valid positions.

    Volumes smaller than ``size`` along an axis are zero padded at the far end first.
    """
    size = tuple(int(s) for s in size)
    image = pad_to_at_least(v.data, size)
    labels = pad_to_at_least(l.labels, size)
    corner = tuple(int(rng.integers(0, n - s + 1)) for n, s in zip(image.shape, size))
    sl = tuple(slice(c, c + s) for c, s in zip(corner, size))
    return PatchSample(image[sl].copy(), labels[sl].copy(), corner, v.case_id)


def center_crop(x, out_shape: Sequence[int]):
    """Centred crop over the last three axes. Works on numpy arrays and torch tensors."""
    in_shape = tuple(x.shape[-3:])
    out_shape = tuple(int(s) for s in out_shape)
    offs = []
    for n, m in zip(in_shape, out_shape):
        if m > n:
            raise ValueError(f"crop {out_shape} larger than input {in_shape}")
        if (n - m) % 2:
            raise ValueError(f"odd margin cropping {in_shape} -> {out_shape}")
        offs.append((n - m) // 2)
    return x[..., offs[0]:offs[0] + out_shape[0], offs[1]:offs[1] + out_shape[1], offs[2]:offs[2] + out_shape[2]]


def aperture_offsets(shape: Sequence[int], apertures: int) -> list[Triple]:
    """Location of each aperture crop inside crop 0."""
    offsets = [(0, 0, 0)]
    cur = tuple(shape)
    for _ in range(1, apertures):
        offsets.append(tuple(o + n // 4 for o, n in zip(offsets[-1], cur)))
        cur = tuple(n // 2 for n in cur)
    return offsets


def build_aperture_pyramid(p, apertures: int = 4) -> AperturePyramid:
    """Nested half-size centre crops of ``p`` (a PatchSample, array or tensor)."""
    if apertures < 1:
        raise ValueError("need at least one aperture")
    image = p.image if isinstance(p, PatchSample) else p
    shape = tuple(image.shape[-3:])
    for n in shape:
        if n % 2 ** (apertures - 1):
            raise ValueError(f"patch shape {shape} cannot be halved {apertures - 1} times")
    crops = [image]
    for _ in range(1, apertures):
        crops.append(center_crop(crops[-1], [n // 2 for n in crops[-1].shape[-3:]]))
    return AperturePyramid(crops, aperture_offsets(shape, apertures))


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentConfig:
    p_flip: float = 0.5
    p_rot90: float = 0.5
    p_scale: float = 1.0
    p_shift: float = 1.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0)


def flip(p: PatchSample, axis: int) -> PatchSample:
    return replace(p, image=np.flip(p.image, axis).copy(), labels=np.flip(p.labels, axis).copy())


def rot90_axial(p: PatchSample, k: int) -> PatchSample:
    # axial plane = first two axes; the last axis indexes slices
    return replace(
        p,
        image=np.rot90(p.image, k, axes=(0, 1)).copy(),
        labels=np.rot90(p.labels, k, axes=(0, 1)).copy(),
    )


def augment(p: PatchSample, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> PatchSample:
    cfg = cfg or AugmentConfig()
    # draw every random number unconditionally so the stream does not depend on outcomes
    flips = rng.random(3) < cfg.p_flip
    do_rot = rng.random() < cfg.p_rot90
    k = int(rng.integers(1, 4))
    do_scale = rng.random() < cfg.p_scale
    scale = rng.uniform(*cfg.scale_range)
    do_shift = rng.random() < cfg.p_shift
    shift = rng.uniform(*cfg.shift_range)

    out = replace(p)
    for axis, f in enumerate(flips):
        if f:
            out = flip(out, axis)
    if do_rot and out.image.shape[0] == out.image.shape[1]:
        out = rot90_axial(out, k)
    image = out.image
    if do_scale:
        image = image * np.float32(scale)
    if do_shift:
        image = image + np.float32(shift)
    if image is not out.image:
        out = replace(out, image=image.astype(np.float32))
    return out
