"""Command-line entry point: ``roadgru {train,infer,eval,synth,heatmap}``.

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags.  Exit codes: 0 success,
1 usage error, 2 data error, 3 non-finite loss.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataError,
    SceneDataset,
    list_dataset,
    load_dataset,
    load_scene,
    synth_scene,
    write_scene,
    read_image,
)
from .evaluate import (
    MetricsCounts,
    confusion_counts,
    confusion_image,
    format_table,
    heatmap,
    pyramid_predict,
    report_from_counts,
)
from .train import NonFiniteLossError, TrainConfig, train, write_history

log = logging.getLogger("roadgru")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str = ""
    seed: int = 0
    data_dir: str | None = None
    model: str | None = None
    out_dir: str = "out"
    # training
    epochs: int = 80
    batch_size: int = 125
    lr: float = 1e-4
    val_fraction: float = 0.015
    views: str = "grid"
    # inference / evaluation
    pyramid: str = "on"
    fusion: str = "union"
    pred_dir: str | None = None
    # synthesis / output
    count: int = 200
    thin_far: bool = False
    format: str = "png"


_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


def _coerce(name: str, raw: Any, kind: Any) -> Any:
    if raw is None or not isinstance(raw, str):
        return raw
    kind = str(kind)
    try:
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
        if kind.startswith("bool"):
            return _BOOL[raw.strip().lower()]
    except (ValueError, KeyError):
        raise UsageError(f"invalid value {raw!r} for {name}")
    return raw


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}")
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def build_config(subcommand: str, file_values: dict[str, str], flags: dict[str, Any]) -> RunConfig:
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    merged: dict[str, Any] = {}
    for source in (file_values, flags):
        for key, value in source.items():
            if value is None:
                continue
            if key not in fields or key == "subcommand":
                raise UsageError(f"unknown setting {key!r}")
            merged[key] = _coerce(key, value, fields[key].type)
    cfg = RunConfig(subcommand=subcommand, **merged)
    if cfg.pyramid not in ("on", "off"):
        raise UsageError("pyramid must be 'on' or 'off'")
    if cfg.fusion not in ("union", "intersection"):
        raise UsageError("fusion must be 'union' or 'intersection'")
    if cfg.views not in ("grid", "random"):
        raise UsageError("views must be 'grid' or 'random'")
    if cfg.format not in ("png", "ppm"):
        raise UsageError("format must be 'png' or 'ppm'")
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def _require(cfg: RunConfig, *names: str) -> None:
    for name in names:
        if getattr(cfg, name) in (None, ""):
            raise UsageError(f"{cfg.subcommand} needs --{name.replace('_', '-')}")


def _save_mask(mask: np.ndarray, path: Path) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def _image_suffix(cfg: RunConfig) -> str:
    return ".png" if cfg.format == "png" else ".ppm"


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "data_dir")
    scenes = load_dataset(cfg.data_dir)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    best_path = out / "best.ckpt"
    config = TrainConfig(batch_size=cfg.batch_size, epochs=cfg.epochs, lr=cfg.lr,
                         val_fraction=cfg.val_fraction, seed=cfg.seed,
                         checkpoint_path=str(best_path))
    dataset = SceneDataset(scenes, views=cfg.views, seed=cfg.seed)
    try:
        result = train(dataset, config)
    except NonFiniteLossError as exc:
        hint = f"; last good checkpoint: {best_path}" if best_path.exists() else ""
        print(f"error: {exc}{hint}", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(result.params, out / "final.ckpt")
    write_history(result.history, out / "loss_history.csv")
    print(f"trained {cfg.epochs} epochs on {len(result.train_scenes)} scenes "
          f"({len(result.val_scenes)} held out); best epoch {result.best_epoch}, "
          f"val MAE {result.history[result.best_epoch - 1].val_mae:.5f}")
    return EXIT_OK


def _infer_inputs(cfg: RunConfig, images: list[str]) -> list[tuple[Path, Path | None]]:
    if images:
        return [(Path(p), None) for p in images]
    if cfg.data_dir:
        return list_dataset(cfg.data_dir, require_gt=False)
    raise UsageError("infer needs image paths or --data-dir")


def cmd_infer(cfg: RunConfig, images: list[str]) -> int:
    _require(cfg, "model")
    inputs = _infer_inputs(cfg, images)
    params = load_checkpoint(cfg.model)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    suffix = _image_suffix(cfg)
    with (out / "boundaries.jsonl").open("w") as fh:
        for img_path, gt_path in inputs:
            image = read_image(img_path)
            res = pyramid_predict(image, params, pyramid=cfg.pyramid == "on", fusion=cfg.fusion)
            _save_mask(res.mask, out / f"{img_path.stem}_mask{suffix}")
            record = {
                "image": img_path.name,
                "left": float(res.near.left),
                "right": float(res.near.right),
                "top": [float(v) for v in res.near.top],
                "pyramid": res.far is not None,
            }
            if res.far is not None:
                record["far"] = {"crop": list(res.crop), "left": float(res.far.left),
                                 "right": float(res.far.right),
                                 "top": [float(v) for v in res.far.top]}
            if gt_path is not None:
                gt = load_scene(img_path, gt_path).gt_mask
                Image.fromarray(confusion_image(res.mask, gt, image)).save(
                    out / f"{img_path.stem}_confusion{suffix}")
            fh.write(json.dumps(record) + "\n")
    return EXIT_OK


def _predicted_mask(cfg: RunConfig, params, img_path: Path, shape) -> np.ndarray:
    if cfg.pred_dir:
        for suffix in (".png", ".ppm", ".pgm"):
            cand = Path(cfg.pred_dir) / f"{img_path.stem}_mask{suffix}"
            if cand.exists():
                with Image.open(cand) as im:
                    mask = np.asarray(im.convert("L")) >= 128
                if mask.shape != shape:
                    raise DataError(f"{cand.name} is {mask.shape}, expected {shape}")
                return mask
        raise DataError(f"no predicted mask for {img_path.name} in {cfg.pred_dir}")
    image = read_image(img_path)
    return pyramid_predict(image, params, pyramid=cfg.pyramid == "on", fusion=cfg.fusion).mask


def cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "data_dir")
    if not cfg.model and not cfg.pred_dir:
        raise UsageError("eval needs --model or --pred-dir")
    pairs = list_dataset(cfg.data_dir, require_gt=True)
    params = load_checkpoint(cfg.model) if not cfg.pred_dir else None
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    total = MetricsCounts()
    for img_path, gt_path in pairs:
        gt = load_scene(img_path, gt_path).gt_mask
        counts = confusion_counts(_predicted_mask(cfg, params, img_path, gt.shape), gt)
        total = total + counts
        rows.append((img_path.stem, report_from_counts(counts)))
    rows.append(("ALL (pixel-pooled)", report_from_counts(total)))
    with (out / "metrics.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image", "TP", "FP", "TN", "FN", *(c for c in ("F1", "AP", "PRE", "REC", "FPR", "FNR"))])
        for name, rep in rows:
            c = rep.counts
            w.writerow([name, c.tp, c.fp, c.tn, c.fn, *(repr(v) for v in rep.row())])
    print("image-space evaluation (no bird's-eye-view transform)")
    print(format_table(rows))
    return EXIT_OK


def cmd_synth(cfg: RunConfig) -> int:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}")
    for i in range(cfg.count):
        scene = synth_scene((cfg.seed, i), thin_far=cfg.thin_far)
        try:
            write_scene(scene, out, i, fmt=cfg.format)
        except OSError as exc:
            raise DataError(f"cannot write to {out}: {exc}")
    print(f"wrote {cfg.count} scenes to {out}")
    return EXIT_OK


def cmd_heatmap(cfg: RunConfig) -> int:
    _require(cfg, "data_dir")
    masks = [load_scene(img, gt).gt_mask for img, gt in list_dataset(cfg.data_dir)]
    hm = heatmap(masks)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"heatmap{_image_suffix(cfg)}"
    Image.fromarray(np.rint(hm * 255).astype(np.uint8)).save(path)
    np.save(out / "heatmap.npy", hm)
    print(f"heat map over {len(masks)} masks written to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="key=value settings file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--data-dir", dest="data_dir")
    shared.add_argument("--model", help="checkpoint path")
    shared.add_argument("--out-dir", dest="out_dir")
    shared.add_argument("-v", "--verbose", action="store_true")

    infer_flags = argparse.ArgumentParser(add_help=False)
    infer_flags.add_argument("--pyramid", choices=("on", "off"))
    infer_flags.add_argument("--fusion", choices=("union", "intersection"))
    infer_flags.add_argument("--format", choices=("png", "ppm"))

    p = _Parser(prog="roadgru", description="CNN + bi-GRU road boundary segmentation")
    sub = p.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    t = sub.add_parser("train", parents=[shared], help="train a model")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--val-fraction", dest="val_fraction", type=float)
    t.add_argument("--views", choices=("grid", "random"))

    i = sub.add_parser("infer", parents=[shared, infer_flags], help="predict road masks")
    i.add_argument("images", nargs="*")

    e = sub.add_parser("eval", parents=[shared, infer_flags], help="score against ground truth")
    e.add_argument("--pred-dir", dest="pred_dir", help="evaluate existing <stem>_mask images")

    s = sub.add_parser("synth", parents=[shared], help="render synthetic scenes")
    s.add_argument("--count", type=int)
    s.add_argument("--thin-far", dest="thin_far", action="store_const", const="true")
    s.add_argument("--format", choices=("png", "ppm"))

    h = sub.add_parser("heatmap", parents=[shared], help="road frequency map")
    h.add_argument("--format", choices=("png", "ppm"))
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    flags = vars(args).copy()
    subcommand = flags.pop("subcommand")
    config_path = flags.pop("config")
    verbose = flags.pop("verbose")
    images = flags.pop("images", [])
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        file_values = read_config_file(config_path) if config_path else {}
        cfg = build_config(subcommand, file_values, flags)
        if subcommand == "train":
            return cmd_train(cfg)
        if subcommand == "infer":
            return cmd_infer(cfg, images)
        if subcommand == "eval":
            return cmd_eval(cfg)
        if subcommand == "synth":
            return cmd_synth(cfg)
        return cmd_heatmap(cfg)
    except UsageError as exc:
        print(f"roadgru: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"roadgru: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NonFiniteLossError as exc:
        print(f"roadgru: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
