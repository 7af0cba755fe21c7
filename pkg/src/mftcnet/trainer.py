"""Training loop, cross-validation splits, checkpoints and the ablation driver."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .aperture import AugmentConfig, augment, sample_patch
from .config import from_dict, to_dict
from .losses import LossConfig, loss_terms
from .metrics import evaluate_case, sliding_window_inference
from .model import MFTCNet, ModelConfig, count_parameters, component_sweep
from .volio import LabelVolume, Volume, read_volume

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 5e-5
    epochs: int = 50
    patches_per_epoch: int = 64
    batch_size: int = 1
    folds: int = 5
    split: str = "cv"  # "cv" or "holdout" (first 60% of shuffled cases train)
    schedule: str = "constant"  # or "cosine"
    seed: int = 0
    dtype: str = "float32"
    val_overlap: float = 0.5
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    dataset_root: str = ""

    def validate(self) -> None:
        if not (self.learning_rate > 0 and self.weight_decay >= 0):
            raise ValueError("learning_rate must be > 0 and weight_decay >= 0")
        if self.epochs < 1 or self.patches_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, patches_per_epoch and batch_size must be >= 1")
        if self.split == "cv" and self.folds < 2:
            raise ValueError("cross-validation needs folds >= 2")
        if self.split not in ("cv", "holdout"):
            raise ValueError("split must be 'cv' or 'holdout'")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be 'constant' or 'cosine'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.model.validate()
        self.loss.validate()


# ---------------------------------------------------------------------------
# data

Case = tuple[Volume, LabelVolume]


def load_dataset(root) -> list[Case]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cases = []
    for cid in manifest["case_ids"]:
        v, l = read_volume(root / cid)
        if l is None:
            raise FileNotFoundError(f"case {cid} has no label file")
        cases.append((v, l))
    return cases


def kfold_split(case_ids: Sequence[str], k: int, seed: int = 0) -> list[tuple[list[str], list[str]]]:
    """Seeded shuffle, then ``k`` contiguous validation folds whose sizes differ by at most one."""
    ids = list(case_ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(ids):
        raise ValueError(f"cannot make {k} folds from {len(ids)} cases")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    folds = np.array_split(np.arange(len(ids)), k)
    out = []
    for f in folds:
        val = [shuffled[i] for i in f]
        val_set = set(f.tolist())
        train = [shuffled[i] for i in range(len(ids)) if i not in val_set]
        out.append((train, val))
    return out


def holdout_split(case_ids: Sequence[str], seed: int = 0, train_fraction: float = 0.6) -> tuple[list[str], list[str]]:
    ids = list(case_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(train_fraction * len(ids)))
    return [ids[i] for i in order[:n_train]], [ids[i] for i in order[n_train:]]


# ---------------------------------------------------------------------------
# checkpoints

@dataclass
class Checkpoint:
    config: dict
    params: dict  # name -> float64 tensor, canonical (named_parameters) order
    optimizer: Optional[dict] = None
    epoch: int = 0
    best_val_metric: float = float("nan")
    rng_state: Optional[dict] = None
    history: list = field(default_factory=list)

    def model_config(self) -> ModelConfig:
        return from_dict(ModelConfig, self.config["model"])

    def build_model(self, dtype=torch.float64) -> MFTCNet:
        model = MFTCNet(self.model_config()).to(dtype)
        load_params(model, self.params)
        return model


def snapshot_params(model: torch.nn.Module) -> dict:
    return {n: p.detach().to(torch.float64).clone() for n, p in model.named_parameters()}


def load_params(model: torch.nn.Module, params: dict) -> None:
    names = [n for n, _ in model.named_parameters()]
    if names != list(params):
        raise ValueError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(params[n].to(p.dtype))


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """``params.bin`` (float64 LE, canonical order), ``moments.bin`` and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = list(ckpt.params)
    blob = np.concatenate([ckpt.params[n].numpy().ravel() for n in names]) if names else np.zeros(0)
    (d / "params.bin").write_bytes(blob.astype("<f8").tobytes())
    opt_meta = None
    if ckpt.optimizer is not None:
        moments = []
        steps = []
        for n in names:
            st = ckpt.optimizer["state"].get(n)
            if st is None:
                moments += [np.zeros(ckpt.params[n].numel())] * 2
                steps.append(0)
            else:
                moments += [st["exp_avg"].numpy().ravel(), st["exp_avg_sq"].numpy().ravel()]
                steps.append(int(st["step"]))
        (d / "moments.bin").write_bytes(np.concatenate(moments).astype("<f8").tobytes())
        opt_meta = {"steps": steps, "hyper": ckpt.optimizer["hyper"]}
    manifest = {
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "best_metric": None if math.isnan(ckpt.best_val_metric) else ckpt.best_val_metric,
        "rng_state": ckpt.rng_state,
        "parameters": [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names],
        "optimizer": opt_meta,
        "history": ckpt.history,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    manifest = json.loads((d / "manifest.json").read_text())
    flat = np.frombuffer((d / "params.bin").read_bytes(), dtype="<f8")
    params, pos = {}, 0
    entries = manifest["parameters"]
    for e in entries:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        params[e["name"]] = torch.from_numpy(flat[pos:pos + n].reshape(e["shape"]).copy())
        pos += n
    if pos != flat.size:
        raise ValueError(f"params.bin holds {flat.size} values, manifest describes {pos}")
    optimizer = None
    if manifest.get("optimizer"):
        mom = np.frombuffer((d / "moments.bin").read_bytes(), dtype="<f8")
        state, pos = {}, 0
        for e, step in zip(entries, manifest["optimizer"]["steps"]):
            n = int(np.prod(e["shape"])) if e["shape"] else 1
            a = torch.from_numpy(mom[pos:pos + n].reshape(e["shape"]).copy())
            b = torch.from_numpy(mom[pos + n:pos + 2 * n].reshape(e["shape"]).copy())
            pos += 2 * n
            if step:
                state[e["name"]] = {"step": step, "exp_avg": a, "exp_avg_sq": b}
        optimizer = {"state": state, "hyper": manifest["optimizer"]["hyper"]}
    best = manifest.get("best_metric")
    return Checkpoint(
        manifest["config"],
        params,
        optimizer,
        manifest.get("epoch", 0),
        float("nan") if best is None else float(best),
        manifest.get("rng_state"),
        manifest.get("history", []),
    )


# ---------------------------------------------------------------------------
# training

class NonFiniteLossError(FloatingPointError):
    pass


class Trainer:
    """Owns the model parameters, the AdamW optimiser and the sampling generator."""

    def __init__(self, cfg: TrainConfig, train_cases: list[Case], val_cases: Sequence[Case] = (), log_file=None):
        cfg.validate()
        if not train_cases:
            raise ValueError("empty training fold")
        self.cfg = cfg
        self.train_cases = list(train_cases)
        self.val_cases = list(val_cases)
        self.dtype = torch.float64 if cfg.dtype == "float64" else torch.float32
        torch.manual_seed(cfg.seed)
        self.model = MFTCNet(cfg.model).to(self.dtype)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=cfg.learning_rate,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=cfg.weight_decay,
        )
        total = cfg.epochs * cfg.patches_per_epoch
        self.scheduler = (
            torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=total)
            if cfg.schedule == "cosine"
            else None
        )
        self.rng = np.random.default_rng(cfg.seed)
        self.step_count = 0
        self.log_file = Path(log_file) if log_file else None
        self.history: list[dict] = []

    def _log(self, record: dict) -> None:
        self.history.append(record)
        if self.log_file is not None:
            with open(self.log_file, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def sample_batch(self):
        size = (self.cfg.model.input_size,) * 3
        images, labels = [], []
        for _ in range(self.cfg.batch_size):
            v, l = self.train_cases[int(self.rng.integers(len(self.train_cases)))]
            p = augment(sample_patch(v, l, size, self.rng), self.rng, self.cfg.augment)
            images.append(p.image)
            labels.append(p.labels)
        x = torch.as_tensor(np.stack(images)[:, None], dtype=self.dtype)
        y = torch.as_tensor(np.stack(labels).astype(np.int64))
        return x, y

    def step(self, x: torch.Tensor, y: torch.Tensor, epoch: int = 0) -> dict:
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        terms = loss_terms(self.model(x), y, self.cfg.loss)
        loss = terms["total"]
        if not torch.isfinite(loss):
            raise NonFiniteLossError(
                f"non-finite loss at step {self.step_count}: "
                + ", ".join(f"{k}={float(v.detach())}" for k, v in terms.items())
            )
        loss.backward()
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        self.step_count += 1
        record = {
            "step": self.step_count,
            "epoch": epoch,
            "loss": float(loss.detach()),
            "loss_components": {k: float(v.detach()) for k, v in terms.items() if k != "total"},
        }
        self._log(record)
        return record

    def train_steps(self, n: int, epoch: int = 0) -> list[float]:
        return [self.step(*self.sample_batch(), epoch=epoch)["loss"] for _ in range(n)]

    def validate(self, epoch: int = 0) -> dict:
        reports = []
        for v, l in self.val_cases:
            pred = sliding_window_inference(v, self.model, overlap=self.cfg.val_overlap, num_classes=l.num_classes)
            reports.append(evaluate_case(pred, l, l.num_classes, case_id=v.case_id))
        dices = [r.mean_dice for r in reports if not math.isnan(r.mean_dice)]
        hds = [r.mean_hd95 for r in reports if not math.isnan(r.mean_hd95)]
        per_class: dict = {}
        for r in reports:
            for k, m in r.per_class.items():
                per_class.setdefault(str(k), []).append(m["dice"])
        record = {
            "epoch": epoch,
            "mean_dice": float(np.mean(dices)) if dices else float("nan"),
            "mean_hd95": float(np.mean(hds)) if hds else float("nan"),
            "per_class": {k: float(np.mean(v)) for k, v in per_class.items()},
        }
        self._log(record)
        return record

    def optimizer_state(self) -> dict:
        names = {id(p): n for n, p in self.model.named_parameters()}
        state = {}
        for p, st in self.optimizer.state.items():
            state[names[id(p)]] = {
                "step": int(st["step"]),
                "exp_avg": st["exp_avg"].detach().to(torch.float64).clone(),
                "exp_avg_sq": st["exp_avg_sq"].detach().to(torch.float64).clone(),
            }
        hyper = {k: v for k, v in self.optimizer.param_groups[0].items() if k != "params" and _jsonable(v)}
        return {"state": state, "hyper": hyper}

    def checkpoint(self, epoch: int, metric: float) -> Checkpoint:
        return Checkpoint(
            config=to_dict(self.cfg),
            params=snapshot_params(self.model),
            optimizer=self.optimizer_state(),
            epoch=epoch,
            best_val_metric=metric,
            rng_state=self.rng.bit_generator.state,
        )

    def fit(self) -> Checkpoint:
        """Train for ``cfg.epochs``; keep the checkpoint with the best validation mean Dice."""
        best: Optional[Checkpoint] = None
        for epoch in range(1, self.cfg.epochs + 1):
            self.train_steps(self.cfg.patches_per_epoch, epoch)
            if self.val_cases:
                metric = self.validate(epoch)["mean_dice"]
            else:
                metric = float("nan")
            if best is None or (not math.isnan(metric) and (math.isnan(best.best_val_metric) or metric > best.best_val_metric)):
                best = self.checkpoint(epoch, metric)
        best.history = [h for h in self.history if "mean_dice" in h]
        return best


def _jsonable(v) -> bool:
    try:
        json.dumps(v)
        return True
    except TypeError:
        return False


def fold_cases(cfg: TrainConfig, cases: list[Case], fold: int) -> tuple[list[Case], list[Case]]:
    ids = [v.case_id for v, _ in cases]
    by_id = {v.case_id: (v, l) for v, l in cases}
    if cfg.split == "holdout":
        train_ids, val_ids = holdout_split(ids, cfg.seed)
    else:
        if not 0 <= fold < cfg.folds:
            raise ValueError(f"fold {fold} out of range for {cfg.folds} folds")
        train_ids, val_ids = kfold_split(ids, cfg.folds, cfg.seed)[fold]
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


def train_fold(cfg: TrainConfig, fold: int = 0, cases: Optional[list[Case]] = None, log_file=None) -> Checkpoint:
    if cases is None:
        if not cfg.dataset_root:
            raise ValueError("dataset_root is not set")
        cases = load_dataset(cfg.dataset_root)
    train, val = fold_cases(cfg, cases, fold)
    if not train or not val:
        raise ValueError(f"fold {fold} has an empty train or validation set")
    return Trainer(cfg, train, val, log_file=log_file).fit()


# ---------------------------------------------------------------------------
# ablations

def loss_ablation_matrix(model: ModelConfig, lam: float = 1.0) -> list[tuple[str, ModelConfig, LossConfig]]:
    return [
        ("L_dice", model, LossConfig(variant="dice", lam=lam)),
        ("L_focal", model, LossConfig(variant="focal", lam=lam)),
        ("L_dice + L_ce", model, LossConfig(variant="dice_ce", lam=lam)),
        ("L_dice + L_ce + DistLoss", model, LossConfig(variant="dice_ce_dist", lam=lam)),
    ]


def component_ablation_matrix(model: ModelConfig, loss: Optional[LossConfig] = None) -> list[tuple[str, ModelConfig, LossConfig]]:
    loss = loss or LossConfig()
    return [(name, m, loss) for name, m in component_sweep(model)]


def run_ablation(matrix, base: TrainConfig, cases: Optional[list[Case]] = None, fold: int = 0) -> list[dict]:
    """Train and evaluate every (name, ModelConfig, LossConfig) cell on one shared fold and seed."""
    if cases is None:
        cases = load_dataset(base.dataset_root)
    rows = []
    for name, model_cfg, loss_cfg in matrix:
        cfg = replace(base, model=model_cfg, loss=loss_cfg)
        train, val = fold_cases(cfg, cases, fold)
        trainer = Trainer(cfg, train, val)
        ckpt = trainer.fit()
        first = trainer.history[0]["loss_components"] if trainer.history else {}
        best = [h for h in ckpt.history if h["epoch"] == ckpt.epoch]
        rows.append(
            {
                "name": name,
                "variant": loss_cfg.variant,
                "params": count_parameters(trainer.model),
                "mean_dice": ckpt.best_val_metric,
                "mean_hd95": best[0]["mean_hd95"] if best else float("nan"),
                "first_step_dist": first.get("dist"),
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'Configuration':<28} {'Params':>10} {'Dice':>8} {'HD95':>8}"]
    for r in rows:
        lines.append(f"{r['name']:<28} {r['params']:>10d} {r['mean_dice']:>8.4f} {r['mean_hd95']:>8.3f}")
    return "\n".join(lines)
