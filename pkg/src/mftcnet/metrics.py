"""Dice, HD95, per-case reports and sliding-window whole-volume inference."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .distance import distance_to_set, surface_indicator
from .volio import LabelVolume, Volume

# column order of the multi-organ benchmark table; phantom label k maps to entry k-1
ORGAN_NAMES = ("Spl", "Kid(R)", "Kid(L)", "Gal", "Liv", "Sto", "Aor", "Pan")


def _labels(x) -> np.ndarray:
    return np.asarray(x.labels if isinstance(x, LabelVolume) else x)


def dice_score(pred, gt, class_index: int) -> float:
    p, g = _labels(pred) == class_index, _labels(gt) == class_index
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    sp, sg = int(p.sum()), int(g.sum())
    if sp + sg == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / (sp + sg)


def surface_distances(pred, gt, class_index: int, spacing=(1.0, 1.0, 1.0)) -> Optional[np.ndarray]:
    """Pooled pred->gt and gt->pred surface distances, or None if either side is empty."""
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    sp, sg = surface_indicator(p, class_index), surface_indicator(g, class_index)
    if not sp.any() or not sg.any():
        return None
    d_pg = distance_to_set(sg, spacing)[sp]
    d_gp = distance_to_set(sp, spacing)[sg]
    return np.concatenate([d_pg, d_gp])


def hd95(pred, gt, class_index: int, spacing=(1.0, 1.0, 1.0)) -> Optional[float]:
    """95th percentile (linear interpolation) of pooled symmetric surface distances in mm.

    Returns None when the class is empty in either mask.
    """
    d = surface_distances(pred, gt, class_index, spacing)
    if d is None:
        return None
    return float(np.percentile(d, 95))


@dataclass
class MetricsReport:
    per_class: dict = field(default_factory=dict)  # class -> {"dice": float, "hd95": float | None}
    mean_dice: float = float("nan")
    mean_hd95: float = float("nan")
    case_id: str = ""

    def to_json(self) -> str:
        return json.dumps(
            {
                "per_class": {str(k): v for k, v in self.per_class.items()},
                "mean_dice": _json_num(self.mean_dice),
                "mean_hd95": _json_num(self.mean_hd95),
                "case_id": self.case_id,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        return cls(
            {int(k): v for k, v in d["per_class"].items()},
            _from_json_num(d["mean_dice"]),
            _from_json_num(d["mean_hd95"]),
            d["case_id"],
        )

    def csv_rows(self) -> list[dict]:
        rows = []
        for k, v in sorted(self.per_class.items()):
            name = ORGAN_NAMES[k - 1] if 1 <= k <= len(ORGAN_NAMES) else str(k)
            rows.append({"case_id": self.case_id, "class": k, "name": name, "dice": v["dice"], "hd95": v["hd95"]})
        return rows


def _json_num(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def _from_json_num(x):
    return float("nan") if x is None else float(x)


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["case_id", "class", "name", "dice", "hd95"])
        w.writeheader()
        for r in reports:
            for row in r.csv_rows():
                w.writerow({**row, "hd95": "" if row["hd95"] is None else row["hd95"]})


def evaluate_case(pred, gt, num_classes: Optional[int] = None, spacing=None, case_id: str = "") -> MetricsReport:
    """Per-class Dice/HD95 over foreground classes.

    Classes absent from both prediction and ground truth are skipped. A class present
    on only one side scores Dice 0 and has no HD95 (excluded from the HD95 mean).
    """
    p, g = _labels(pred), _labels(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelVolume) else (1.0, 1.0, 1.0)
    if num_classes is None:
        num_classes = gt.num_classes if isinstance(gt, LabelVolume) else int(max(p.max(), g.max()))
    per_class = {}
    for k in range(1, num_classes + 1):
        if not (p == k).any() and not (g == k).any():
            continue
        per_class[k] = {"dice": dice_score(p, g, k), "hd95": hd95(p, g, k, spacing)}
    dices = [v["dice"] for v in per_class.values()]
    hds = [v["hd95"] for v in per_class.values() if v["hd95"] is not None]
    return MetricsReport(
        per_class,
        float(np.mean(dices)) if dices else float("nan"),
        float(np.mean(hds)) if hds else float("nan"),
        case_id,
    )


# ---------------------------------------------------------------------------
# sliding-window inference

def window_starts(n: int, size: int, overlap: float) -> list[int]:
    step = max(1, int(round(size * (1 - overlap))))
    starts = list(range(0, n - size + 1, step))
    if starts[-1] != n - size:
        starts.append(n - size)
    return starts


def gaussian_weights(size: Sequence[int], sigma_scale: float = 1 / 8) -> np.ndarray:
    axes = []
    for s in size:
        i = np.arange(s, dtype=np.float64)
        sigma = s * sigma_scale
        axes.append(np.exp(-((i - (s - 1) / 2) ** 2) / (2 * sigma**2)))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return w / w.max()


def sliding_window_logits(
    image: np.ndarray,
    predict: Callable[[np.ndarray], np.ndarray],
    patch_size: Sequence[int],
    overlap: float = 0.5,
    sigma_scale: float = 1 / 8,
) -> np.ndarray:
    """Gaussian-blended logits (C, H, W, D) from overlapping patches."""
    image = np.asarray(image, dtype=np.float32)
    shape = image.shape
    patch_size = tuple(int(s) for s in patch_size)
    padded = np.pad(image, [(0, max(0, s - n)) for n, s in zip(shape, patch_size)])
    weights = gaussian_weights(patch_size, sigma_scale)
    acc = None
    wsum = np.zeros(padded.shape)
    for x in window_starts(padded.shape[0], patch_size[0], overlap):
        for y in window_starts(padded.shape[1], patch_size[1], overlap):
            for z in window_starts(padded.shape[2], patch_size[2], overlap):
                sl = (slice(x, x + patch_size[0]), slice(y, y + patch_size[1]), slice(z, z + patch_size[2]))
                logits = np.asarray(predict(padded[sl]), dtype=np.float64)
                if acc is None:
                    acc = np.zeros((logits.shape[0],) + padded.shape)
                acc[(slice(None),) + sl] += weights * logits
                wsum[sl] += weights
    out = acc / wsum
    return out[:, : shape[0], : shape[1], : shape[2]]


def model_predictor(model: torch.nn.Module) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap an MFTCNet as a numpy patch -> logits function (eval mode, no grad)."""
    p = next(model.parameters())

    def predict(patch: np.ndarray) -> np.ndarray:
        was_training = model.training
        model.eval()
        with torch.no_grad():
            x = torch.as_tensor(np.ascontiguousarray(patch), dtype=p.dtype, device=p.device)[None, None]
            out = model(x)[0].cpu().numpy()
        model.train(was_training)
        return out

    return predict


def sliding_window_inference(v, model, patch_size=None, overlap: float = 0.5, sigma_scale: float = 1 / 8, num_classes=None) -> LabelVolume:
    """Whole-volume labels by argmax of blended logits.

    ``model`` is an ``nn.Module`` (its ``cfg.input_size`` fixes the patch) or any
    callable mapping a patch to (C, h, w, d) logits.
    """
    image = v.data if isinstance(v, Volume) else np.asarray(v)
    spacing = v.spacing if isinstance(v, Volume) else (1.0, 1.0, 1.0)
    if isinstance(model, torch.nn.Module):
        patch_size = patch_size or (model.cfg.input_size,) * 3
        predict = model_predictor(model)
    else:
        predict = model
        if patch_size is None:
            raise ValueError("patch_size is required for a plain callable")
    if np.isscalar(patch_size):
        patch_size = (int(patch_size),) * 3
    logits = sliding_window_logits(image, predict, patch_size, overlap, sigma_scale)
    labels = logits.argmax(0)
    c = num_classes or max(logits.shape[0] - 1, 1)
    return LabelVolume(labels, c, spacing)
