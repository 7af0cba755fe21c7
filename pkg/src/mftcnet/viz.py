"""Static exports: axial slice montage with class overlay and per-class OBJ meshes."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from skimage import measure

log = logging.getLogger(__name__)

PALETTE = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
    ],
    dtype=np.uint8,
)
SLICE_FRACTIONS = (0.25, 0.5, 0.75)


def class_color(k: int) -> np.ndarray:
    return PALETTE[(k - 1) % len(PALETTE)]


def _gray(img: np.ndarray) -> np.ndarray:
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return np.zeros(img.shape, dtype=np.uint8)
    return np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)


def montage(labels: np.ndarray, image: Optional[np.ndarray] = None, alpha: float = 0.5) -> np.ndarray:
    """RGB array of the axial slices (last axis) at 25/50/75% depth, side by side."""
    labels = np.asarray(labels)
    d = labels.shape[2]
    idx = [min(d - 1, int(f * d)) for f in SLICE_FRACTIONS]
    tiles = []
    for z in idx:
        base = _gray(np.asarray(image)[:, :, z]) if image is not None else np.zeros(labels.shape[:2], np.uint8)
        rgb = np.repeat(base[..., None], 3, axis=2).astype(np.float64)
        lab = labels[:, :, z]
        for k in np.unique(lab):
            if k == 0:
                continue
            m = lab == k
            rgb[m] = (1 - alpha) * rgb[m] + alpha * class_color(int(k))
        tiles.append(np.round(rgb).astype(np.uint8))
    return np.concatenate(tiles, axis=1)


def save_montage(path, labels, image=None) -> Path:
    path = Path(path)
    Image.fromarray(montage(labels, image)).save(path, format="PNG")
    return path


def class_mesh(labels: np.ndarray, k: int, spacing=(1.0, 1.0, 1.0)) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Marching cubes on the padded binary mask of class ``k`` at level 0.5.

    Returns (vertices, faces) in voxel-index coordinates scaled by spacing, faces wound
    so the enclosed volume is positive, or None for an empty class.
    """
    mask = np.asarray(labels) == k
    if not mask.any():
        return None
    padded = np.pad(mask, 1).astype(np.float32)
    verts, faces, _, _ = measure.marching_cubes(padded, level=0.5, spacing=tuple(spacing), method="lorensen")
    verts = verts - np.asarray(spacing)  # undo the one-voxel pad
    if mesh_volume(verts, faces) < 0:
        faces = faces[:, ::-1]
    return verts, faces


def mesh_volume(verts: np.ndarray, faces: np.ndarray) -> float:
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def mesh_area(verts: np.ndarray, faces: np.ndarray) -> float:
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return float(np.linalg.norm(np.cross(b - a, c - a), axis=1).sum() / 2.0)


def write_obj(path, verts: np.ndarray, faces: np.ndarray) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        for v in verts:
            fh.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for f in faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
    return path


def read_obj(path) -> tuple[np.ndarray, np.ndarray]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    return np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def export(labels, out_dir, image=None, spacing=(1.0, 1.0, 1.0), num_classes: Optional[int] = None) -> dict:
    """Write ``montage.png`` plus ``class_<k>.obj`` for every non-empty class."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = np.asarray(labels)
    files = {"montage": str(save_montage(out / "montage.png", labels, image)), "meshes": {}, "skipped": []}
    top = num_classes if num_classes is not None else int(labels.max())
    for k in range(1, top + 1):
        mesh = class_mesh(labels, k, spacing)
        if mesh is None:
            log.warning("class %d is empty; mesh skipped", k)
            files["skipped"].append(k)
            continue
        files["meshes"][k] = str(write_obj(out / f"class_{k}.obj", *mesh))
    return files
