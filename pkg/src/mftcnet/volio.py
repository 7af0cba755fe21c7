"""Volume containers, on-disk formats, unit-spacing resampling and synthetic phantoms.

On-disk layout for a case ``<stem>``::

    <stem>.vol   raw little-endian float32, C order (last axis fastest)
    <stem>.json  sidecar {"shape", "spacing", "dtype", "num_classes", "case_id"}
    <stem>.lbl   optional labels, uint8, same layout as the image
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

Triple = tuple[int, int, int]


class VolumeFormatError(ValueError):
    """Raised for malformed or inconsistent volume files."""


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be 3D with non-empty axes, got {self.data.shape}")
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def shape(self) -> Triple:
        return tuple(self.data.shape)


@dataclass
class LabelVolume:
    labels: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be 3D, got {self.labels.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ValueError(f"label values must lie in [0, {self.num_classes}]")
        self.labels = self.labels.astype(np.uint8)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> Triple:
        return tuple(self.labels.shape)


# ---------------------------------------------------------------------------
# file I/O

def _stem(path) -> Path:
    path = Path(path)
    if path.name.endswith(".nii.gz"):
        return path
    if path.suffix in (".vol", ".json", ".lbl"):
        return path.with_suffix("")
    return path


def write_volume(v: Volume, l: Optional[LabelVolume], path) -> None:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "shape": list(v.shape),
        "spacing": list(v.spacing),
        "dtype": "float32",
        "num_classes": int(l.num_classes) if l is not None else 0,
        "case_id": v.case_id,
    }
    if l is not None and l.shape != v.shape:
        raise ValueError(f"label shape {l.shape} != volume shape {v.shape}")
    stem.with_suffix(".vol").write_bytes(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
    if l is not None:
        stem.with_suffix(".lbl").write_bytes(np.ascontiguousarray(l.labels, dtype=np.uint8).tobytes())
    stem.with_suffix(".json").write_text(json.dumps(meta, indent=2))


def read_volume(path) -> tuple[Volume, Optional[LabelVolume]]:
    """Read a ``.vol`` case (any of its three paths) or a NIfTI-1 file.

    For NIfTI input a sibling label file is looked up as ``<name>_label.nii[.gz]``
    or the same file name under a ``labels`` directory next to ``images``.
    """
    path = Path(path)
    if path.name.endswith((".nii", ".nii.gz")):
        return _read_nifti_case(path)

    stem = _stem(path)
    sidecar, payload = stem.with_suffix(".json"), stem.with_suffix(".vol")
    for f in (sidecar, payload):
        if not f.exists():
            raise FileNotFoundError(f)
    meta = json.loads(sidecar.read_text())
    try:
        shape = tuple(int(s) for s in meta["shape"])
        spacing = tuple(float(s) for s in meta["spacing"])
    except (KeyError, TypeError, ValueError) as exc:
        raise VolumeFormatError(f"bad sidecar {sidecar}: {exc}") from exc
    if len(shape) != 3 or len(spacing) != 3:
        raise VolumeFormatError(f"sidecar {sidecar} must declare 3D shape and spacing")
    if any(not s > 0 for s in spacing):
        raise VolumeFormatError(f"non-positive spacing {spacing} in {sidecar}")
    if meta.get("dtype", "float32") != "float32":
        raise VolumeFormatError(f"unsupported dtype {meta.get('dtype')!r}")

    n = math.prod(shape)
    raw = payload.read_bytes()
    if len(raw) != 4 * n:
        raise VolumeFormatError(
            f"{payload} holds {len(raw) // 4} values but sidecar declares shape {shape} ({n} values)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    vol = Volume(data, spacing, case_id=meta.get("case_id") or stem.name)

    lbl_path = stem.with_suffix(".lbl")
    if not lbl_path.exists():
        return vol, None
    lraw = lbl_path.read_bytes()
    if len(lraw) != n:
        raise VolumeFormatError(f"{lbl_path} holds {len(lraw)} labels, expected {n}")
    labels = np.frombuffer(lraw, dtype=np.uint8).reshape(shape).copy()
    num_classes = int(meta.get("num_classes") or max(int(labels.max()), 1))
    return vol, LabelVolume(labels, num_classes, spacing)


def _read_nifti_case(path: Path) -> tuple[Volume, Optional[LabelVolume]]:
    import nibabel as nib

    if not path.exists():
        raise FileNotFoundError(path)
    img = nib.load(str(path))
    data = np.asarray(img.dataobj, dtype=np.float32)
    if data.ndim == 4 and data.shape[3] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise VolumeFormatError(f"{path}: expected a 3D image, got shape {data.shape}")
    spacing = tuple(float(s) for s in img.header.get_zooms()[:3])
    if any(not s > 0 for s in spacing):
        raise VolumeFormatError(f"{path}: non-positive spacing {spacing}")
    name = path.name.split(".nii")[0]
    vol = Volume(data, spacing, case_id=name)

    ext = path.name[len(name):]
    candidates = [path.with_name(f"{name}_label{ext}")]
    if path.parent.name == "images":
        candidates.append(path.parent.parent / "labels" / path.name)
    for cand in candidates:
        if cand.exists():
            lab = np.rint(np.asarray(nib.load(str(cand)).dataobj)).astype(np.int64)
            if lab.shape != data.shape:
                raise VolumeFormatError(f"{cand}: label shape {lab.shape} != image shape {data.shape}")
            return vol, LabelVolume(lab, max(int(lab.max()), 1), spacing)
    return vol, None


# ---------------------------------------------------------------------------
# resampling

def resample_to_unit_spacing(
    v: Volume, l: Optional[LabelVolume] = None
) -> tuple[Volume, Optional[LabelVolume]]:
    """Resample to 1 mm isotropic voxels; trilinear for intensities, nearest for labels.

    Voxel centres are aligned so that the physical extent is preserved:
    output index ``i`` samples input coordinate ``(i + 0.5) * n_in / n_out - 0.5``.
    """
    in_shape = np.array(v.shape)
    out_shape = tuple(int(round(n * s)) for n, s in zip(in_shape, v.spacing))
    if min(out_shape) < 1:
        raise ValueError(f"resampled shape {out_shape} has an empty axis")
    if out_shape == v.shape and v.spacing == (1.0, 1.0, 1.0):
        return (
            Volume(v.data.copy(), v.spacing, v.case_id),
            None if l is None else LabelVolume(l.labels.copy(), l.num_classes, l.spacing),
        )

    axes = [
        (np.arange(m) + 0.5) * (n / m) - 0.5 for n, m in zip(in_shape, out_shape)
    ]
    coords = np.stack(np.meshgrid(*axes, indexing="ij"))
    data = ndimage.map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    out_v = Volume(data.astype(np.float32), (1.0, 1.0, 1.0), v.case_id)
    out_l = None
    if l is not None:
        # nearest neighbour by explicit rounding; map_coordinates(order=0) rounds half-down inconsistently
        idx = [np.clip(np.floor(a + 0.5).astype(int), 0, n - 1) for a, n in zip(axes, in_shape)]
        lab = l.labels[np.ix_(*idx)]
        out_l = LabelVolume(lab, l.num_classes, (1.0, 1.0, 1.0))
    return out_v, out_l


# ---------------------------------------------------------------------------
# phantoms

@dataclass
class Ellipsoid:
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    label: int

    def mask(self, shape: Sequence[int]) -> np.ndarray:
        grids = np.ogrid[tuple(slice(0, n) for n in shape)]
        q = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, self.center, self.semi_axes))
        return q <= 1.0


@dataclass
class PhantomSpec:
    shape: Triple = (64, 64, 64)
    num_organs: int = 8
    semi_axis_range: tuple[float, float] = (4.0, 9.0)
    intensity_means: Optional[list[float]] = None
    intensity_std: float = 0.03
    background_mean: float = 0.0
    noise_std: float = 0.05
    min_gap: int = 1
    max_retries: int = 1000
    seed: int = 0

    def validate(self) -> None:
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"invalid phantom shape {self.shape}")
        if not 0 <= self.num_organs <= 8:
            raise ValueError("num_organs must be in [0, 8]")
        lo, hi = self.semi_axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"invalid semi_axis_range {self.semi_axis_range}")
        if self.num_organs and 2 * lo + 1 > min(self.shape):
            raise ValueError("smallest organ does not fit in the volume")
        if self.intensity_means is not None and len(self.intensity_means) < self.num_organs:
            raise ValueError("need one intensity mean per organ")
        if self.noise_std < 0 or self.intensity_std < 0:
            raise ValueError("standard deviations must be non-negative")

    def organ_means(self) -> list[float]:
        if self.intensity_means is not None:
            return list(self.intensity_means)
        # evenly spread, well separated from background and from each other
        return [0.3 + 0.1 * k for k in range(max(self.num_organs, 1))]


class PhantomPlacementError(RuntimeError):
    pass


def place_organs(spec: PhantomSpec) -> list[Ellipsoid]:
    """Rejection-sample ``spec.num_organs`` disjoint axis-aligned ellipsoids."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lo, hi = spec.semi_axis_range
    occupied = np.zeros(spec.shape, dtype=bool)
    organs: list[Ellipsoid] = []
    for label in range(1, spec.num_organs + 1):
        for _ in range(spec.max_retries):
            semi = tuple(float(a) for a in rng.uniform(lo, hi, size=3))
            semi = tuple(min(a, (n - 1) / 2) for a, n in zip(semi, spec.shape))
            # keep the whole ellipsoid inside the grid
            center = tuple(
                float(rng.uniform(a, n - 1 - a)) for a, n in zip(semi, spec.shape)
            )
            e = Ellipsoid(center, semi, label)
            m = e.mask(spec.shape)
            if not m.any():
                continue
            grown = ndimage.binary_dilation(m, iterations=spec.min_gap) if spec.min_gap else m
            if not (grown & occupied).any():
                occupied |= m
                organs.append(e)
                break
        else:
            raise PhantomPlacementError(
                f"could not place organ {label} after {spec.max_retries} attempts"
            )
    return organs


def generate_phantom(spec: PhantomSpec, case_id: str = "") -> tuple[Volume, LabelVolume]:
    organs = place_organs(spec)
    rng = np.random.default_rng([spec.seed, 1])
    labels = np.zeros(spec.shape, dtype=np.uint8)
    for e in organs:
        labels[e.mask(spec.shape)] = e.label

    means = spec.organ_means()
    image = np.full(spec.shape, spec.background_mean, dtype=np.float64)
    for e in organs:
        sel = labels == e.label
        image[sel] = means[e.label - 1] + spec.intensity_std * rng.standard_normal(int(sel.sum()))
    image += spec.noise_std * rng.standard_normal(spec.shape)
    vol = Volume(image.astype(np.float32), (1.0, 1.0, 1.0), case_id or f"phantom_{spec.seed}")
    return vol, LabelVolume(labels, max(spec.num_organs, 1), (1.0, 1.0, 1.0))
