"""``mftcnet`` command line: phantom, train, eval, ablate, params, viz."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import trainer as tr
from . import viz
from .config import ConfigError, apply_overrides, from_dict, to_dict
from .metrics import MetricsReport, evaluate_case, sliding_window_inference, write_reports_csv
from .model import ModelConfig, component_sweep, param_count
from .volio import LabelVolume, PhantomSpec, generate_phantom, read_volume, write_volume

log = logging.getLogger("mftcnet")


@dataclass
class Config:
    train: tr.TrainConfig = field(default_factory=tr.TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_cases: int = 5


def load_config(path=None, overrides=(), seed=None) -> Config:
    data = to_dict(Config())
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        from_dict(Config, user)  # rejects unknown keys early
        data = _merge(data, user)
    data = apply_overrides(Config, data, list(overrides))
    if seed is not None:
        data["train"]["seed"] = seed
        data["phantom"]["seed"] = seed
    cfg = from_dict(Config, data)
    try:
        cfg.train.validate()
        cfg.phantom.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    return cfg


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        out[k] = _merge(base[k], v) if isinstance(v, dict) and isinstance(base.get(k), dict) else v
    return out


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def echo_config(cfg: Config, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(to_dict(cfg), indent=1))


# ---------------------------------------------------------------------------

def cmd_phantom(cfg: Config, args) -> int:
    out = prepare_out(args.out, args.force)
    echo_config(cfg, out)
    ids = []
    for i in range(cfg.n_cases):
        cid = f"case_{i:03d}"
        v, l = generate_phantom(replace(cfg.phantom, seed=cfg.phantom.seed + i), case_id=cid)
        write_volume(v, l, out / cid)
        ids.append(cid)
    (out / "manifest.json").write_text(json.dumps({"case_ids": ids, "num_classes": cfg.phantom.num_organs}, indent=1))
    print(f"wrote {len(ids)} cases to {out}")
    return 0


def _dataset_root(cfg: Config, args) -> str:
    root = args.data or cfg.train.dataset_root
    if not root:
        raise ConfigError("no dataset: pass --data or set train.dataset_root")
    return root


def cmd_train(cfg: Config, args) -> int:
    root = _dataset_root(cfg, args)
    cfg = replace(cfg, train=replace(cfg.train, dataset_root=str(root)))
    out = prepare_out(args.out, args.force)
    echo_config(cfg, out)
    ckpt = tr.train_fold(cfg.train, args.fold, log_file=out / "train_log.jsonl")
    tr.save_checkpoint(ckpt, out / "checkpoint")
    print(f"best epoch {ckpt.epoch}, validation mean Dice {ckpt.best_val_metric:.4f}")
    return 0


def _label_files(d: Path) -> dict:
    manifest = d / "manifest.json"
    if manifest.exists():
        return {cid: d / cid for cid in json.loads(manifest.read_text())["case_ids"]}
    return {p.stem: d / p.stem for p in sorted(d.glob("*.json"))}


def cmd_eval(cfg: Config, args) -> int:
    out = prepare_out(args.out, args.force)
    echo_config(cfg, out)
    gt_dir = Path(_dataset_root(cfg, args))
    reports = []
    if args.pred:
        preds = _label_files(Path(args.pred))
        for cid, path in _label_files(gt_dir).items():
            _, gl = read_volume(path)
            if cid not in preds:
                raise FileNotFoundError(f"no prediction for case {cid}")
            _, pl = read_volume(preds[cid])
            reports.append(evaluate_case(pl, gl, gl.num_classes, case_id=cid))
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --pred")
        ckpt = tr.load_checkpoint(args.checkpoint)
        model = ckpt.build_model(torch.float32)
        for cid, path in _label_files(gt_dir).items():
            v, gl = read_volume(path)
            pred = sliding_window_inference(v, model, overlap=cfg.train.val_overlap, num_classes=gl.num_classes)
            write_volume(v, pred, out / f"{cid}_pred")
            reports.append(evaluate_case(pred, gl, gl.num_classes, case_id=cid))
    for r in reports:
        (out / f"{r.case_id}_metrics.json").write_text(r.to_json())
    write_reports_csv(reports, out / "metrics.csv")
    dice = [r.mean_dice for r in reports if not np.isnan(r.mean_dice)]
    hd = [r.mean_hd95 for r in reports if not np.isnan(r.mean_hd95)]
    summary = MetricsReport({}, float(np.mean(dice)) if dice else float("nan"), float(np.mean(hd)) if hd else float("nan"), "mean")
    (out / "summary.json").write_text(summary.to_json())
    print(f"mean Dice {summary.mean_dice:.4f}  mean HD95 {summary.mean_hd95:.4f}")
    return 0


def cmd_ablate(cfg: Config, args) -> int:
    root = _dataset_root(cfg, args)
    out = prepare_out(args.out, args.force)
    echo_config(cfg, out)
    base = replace(cfg.train, dataset_root=str(root))
    if args.study == "losses":
        matrix = tr.loss_ablation_matrix(base.model, base.loss.lam)
    else:
        matrix = tr.component_ablation_matrix(base.model, base.loss)
    rows = tr.run_ablation(matrix, base, fold=args.fold)
    (out / "ablation.json").write_text(json.dumps(rows, indent=1))
    text = tr.format_table(rows)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_params(cfg: Config, args) -> int:
    base = ModelConfig.full() if args.scale == "full" else cfg.train.model
    rows = [{"name": name, "params": param_count(m)} for name, m in component_sweep(base)]
    lines = [f"{'Configuration':<28} {'Params':>12}"]
    lines += [f"{r['name']:<28} {r['params']:>12,d}" for r in rows]
    print("\n".join(lines))
    if args.out:
        out = prepare_out(args.out, args.force)
        echo_config(cfg, out)
        (out / "params.json").write_text(json.dumps(rows, indent=1))
    return 0


def cmd_viz(cfg: Config, args) -> int:
    out = prepare_out(args.out, args.force)
    echo_config(cfg, out)
    v, l = read_volume(args.labels)
    if l is None:
        raise FileNotFoundError(f"{args.labels} has no label file")
    image = v.data
    if args.image:
        image = read_volume(args.image)[0].data
    files = viz.export(l.labels, out, image, l.spacing, l.num_classes)
    for k in files["skipped"]:
        print(f"class {k} is empty, mesh skipped")
    print(f"wrote {out / 'montage.png'} and {len(files['meshes'])} meshes")
    return 0


COMMANDS = {
    "phantom": cmd_phantom,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "params": cmd_params,
    "viz": cmd_viz,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mftcnet")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="write a synthetic dataset")
    s = sub.add_parser("train", parents=[common], help="train one fold")
    s.add_argument("--data")
    s.add_argument("--fold", type=int, default=0)
    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a prediction directory")
    s.add_argument("--data", help="ground-truth dataset directory")
    s.add_argument("--checkpoint")
    s.add_argument("--pred", help="directory of predicted label volumes")
    s = sub.add_parser("ablate", parents=[common], help="run the loss or component ablation")
    s.add_argument("--data")
    s.add_argument("--study", choices=("losses", "components"), default="losses")
    s.add_argument("--fold", type=int, default=0)
    s = sub.add_parser("params", parents=[common], help="parameter counts of the component sweep")
    s.add_argument("--scale", choices=("config", "full"), default="config", help="'full' uses the 128^3 reference config")
    s = sub.add_parser("viz", parents=[common], help="slice montage and class meshes")
    s.add_argument("labels", help="case path (stem, .json or .nii[.gz])")
    s.add_argument("--image")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command not in ("params",) and not args.out:
        print("error: --out is required", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.set, args.seed)
        torch.manual_seed(cfg.train.seed)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
