"""Command-line entry point: ``python -m inpaintseg <subcommand> ...``.

Subcommands::

    synth               generate a synthetic dataset directory
    train-inpaint       stage 1: RGB inpainter
    train-flow-inpaint  stage 1: flow inpainter
    train               stage 2: detector + segmenter against the frozen inpainter(s)
    eval                EvalReport JSON/CSV and overlay PNGs
    infer               boxes and masks for single images

Training options come from a ``key = value`` config file (``--config``) and
repeatable ``--set key=value`` overrides; ``--seed`` overrides the seed.  An
unknown key exits with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .boxes import BoxGeometry
from .config import TrainConfig, UnknownKeyError, apply_overrides, dump_config, load_config
from .evalkit import evaluate_predictions
from .flowext import attach_flow, ingest_flow
from .inpainter import InpainterTrainConfig, train_inpainter
from .synthdata import (DatasetError, SceneConfig, dequantize, generate_sequence,
                        load_dataset, quantize, save_dataset, stack_frames)
from .trainer import (CheckpointError, Model, Stage2Trainer, TrainingError, load_inpainter,
                      predict_frames, save_inpainter, stage1_config, train_stage2)

log = logging.getLogger("inpaintseg")


class UsageError(Exception):
    pass


def _config(args) -> TrainConfig:
    config = load_config(args.config, args.set or [])
    if args.seed is not None:
        config.seed = args.seed
    config.validate()
    return config


def overlay(frame: np.ndarray, mask=None, boxes=()) -> Image.Image:
    """Frame with the mask tinted red and box outlines drawn in green."""
    rgb = np.asarray(frame, dtype=np.float32).copy()
    if mask is not None:
        alpha = 0.5 * np.clip(np.asarray(mask, dtype=np.float32), 0, 1)[..., None]
        rgb = rgb * (1 - alpha) + alpha * np.array([1.0, 0.0, 0.0], dtype=np.float32)
    image = Image.fromarray(quantize(rgb))
    draw = ImageDraw.Draw(image)
    h, w = rgb.shape[:2]
    for box in boxes:
        x0, y0, x1, y1 = box.corners()
        draw.rectangle([x0 * (w - 1), y0 * (h - 1), x1 * (w - 1), y1 * (h - 1)], outline=(0, 255, 0))
    return image


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    scene = SceneConfig(num_frames=args.frames)
    apply_overrides(scene, args.set or [])
    scene.num_frames = args.frames
    samples = generate_sequence(scene, args.seed if args.seed is not None else 0)
    if args.flow:
        attach_flow(samples)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} frames to {args.out}")
    return 0


def _load_frames(path, limit=None) -> np.ndarray:
    samples = load_dataset(path, with_flow=False)
    if limit:
        samples = samples[:limit]
    return stack_frames(samples)


def _train_stage1(args, flow: bool) -> int:
    config = _config(args)
    if args.steps is not None:
        config.stage1_steps = args.steps
    if flow:
        flows = ingest_flow(args.data)
        if flows is None:
            raise DatasetError(f"{args.data} has no flow/ images")
        frames = np.stack([quantize(f) for f in flows])
    else:
        frames = _load_frames(args.data)
    if args.limit:
        frames = frames[:args.limit]
    model = train_inpainter(frames, stage1_config(config), seed=config.seed, weights=config.loss)
    save_inpainter(args.out, model, config.inpainter_channels, frames.shape[-1],
                   kind="flow_inpainter" if flow else "inpainter", config=config.to_dict())
    print(f"saved {'flow ' if flow else ''}inpainter to {args.out}")
    return 0


def cmd_train_inpaint(args) -> int:
    return _train_stage1(args, flow=False)


def cmd_train_flow_inpaint(args) -> int:
    return _train_stage1(args, flow=True)


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames = _load_frames(args.data, args.limit)
    if args.resume:
        config = None
        trainer = Stage2Trainer.resume(args.resume, frames, _flow_frames(args, len(frames)))
        config = trainer.config
    else:
        config = _config(args)
        if not args.inpainter or not Path(args.inpainter).exists():
            raise TrainingError(f"stage-1 inpainter checkpoint not found: {args.inpainter}")
        flow_inp = None
        if config.flow_enabled:
            if not args.flow_inpainter or not Path(args.flow_inpainter).exists():
                raise TrainingError(f"stage-1 flow inpainter checkpoint not found: {args.flow_inpainter}")
            flow_inp = load_inpainter(args.flow_inpainter)
        flow_frames = _flow_frames(args, len(frames)) if config.flow_enabled else None
        trainer = Stage2Trainer(frames, load_inpainter(args.inpainter), config, flow_frames, flow_inp)
    (out / "config.txt").write_text(dump_config(config))
    steps = args.steps if args.steps is not None else config.stage2_steps - trainer.step_count
    train_stage2(frames, trainer.inpainter, config, steps=steps, checkpoint_dir=out,
                 metrics_path=out / "metrics.jsonl", trainer=trainer)
    print(f"trained {steps} steps; checkpoint {out / 'last.npz'}")
    return 0


def _flow_frames(args, n):
    flows = ingest_flow(args.data)
    if flows is None:
        return None
    return np.stack([quantize(f) for f in flows[:n]])


def _read_predictions(path, num_frames):
    """Predictions in dataset layout: ``masks/*.png`` soft masks + ``manifest.json`` boxes."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    entries = {int(e["index"]): e for e in manifest["frames"]}
    masks, boxes, confs = [], [], []
    for i in range(num_frames):
        if i not in entries:
            raise DatasetError(f"missing prediction {i}")
        mask_path = root / "masks" / f"{i:06d}.png"
        if not mask_path.exists():
            raise DatasetError(f"missing prediction mask {i}")
        with Image.open(mask_path) as im:
            masks.append(dequantize(np.asarray(im)))
        boxes.append(BoxGeometry.from_array(entries[i]["box"]))
        confs.append(float(entries[i].get("confidence", 1.0)))
    return masks, boxes, confs


def cmd_eval(args) -> int:
    samples = load_dataset(args.data, with_flow=False)
    if args.limit:
        samples = samples[-args.limit:] if args.tail else samples[:args.limit]
    if args.predictions:
        soft, boxes, confs = _read_predictions(args.predictions, len(samples))
    elif args.checkpoint:
        model = Model.load(args.checkpoint)
        preds = predict_frames(stack_frames(samples), model, 1)
        soft = [p.masks[0] for p in preds]
        boxes = [p.boxes[0] for p in preds]
        confs = [p.confidences[0] for p in preds]
    else:
        raise UsageError("eval needs --checkpoint or --predictions")
    report = evaluate_predictions(soft, [s.gt_mask for s in samples], boxes, confs,
                                  [s.gt_box for s in samples], [s.index for s in samples],
                                  refine=not args.no_refine)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.to_csv(out / "per_frame.csv")
    if args.overlays:
        (out / "overlays").mkdir(exist_ok=True)
        for s, m, b in zip(samples, soft, boxes):
            overlay(s.frame, m >= report.best_threshold, [b]).save(out / "overlays" / f"{s.index:06d}.png")
    print(json.dumps({"j_measure": report.j_measure, "f_measure": report.f_measure,
                      "map50": report.map50, "best_threshold": report.best_threshold}))
    return 0


def cmd_infer(args) -> int:
    model = Model.load(args.checkpoint)
    paths = []
    for item in args.inputs:
        p = Path(item)
        paths.extend(sorted(p.glob("*.png")) if p.is_dir() else [p])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for path in paths:
        with Image.open(path) as im:
            frame = dequantize(np.asarray(im.convert("RGB")))
        pred = predict_frames(quantize(frame)[None], model, args.k)[0]
        stem = path.stem
        for j, mask in enumerate(pred.masks):
            Image.fromarray(quantize(mask)).save(out / f"{stem}_mask{j}.png")
        overlay(frame, pred.masks.max(0), pred.boxes).save(out / f"{stem}_overlay.png")
        results[stem] = [{"box": [float(v) for v in b.to_array()], "confidence": c}
                         for b, c in zip(pred.boxes, pred.confidences)]
    (out / "detections.json").write_text(json.dumps(results, indent=1))
    print(f"wrote {len(paths)} results to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="inpaintseg", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")
        if config:
            p.add_argument("--config", default=None, help="config file")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--flow", action="store_true", help="also write analytic flow images")
    common(p, config=False)
    p.set_defaults(func=cmd_synth)

    for name, func in (("train-inpaint", cmd_train_inpaint), ("train-flow-inpaint", cmd_train_flow_inpaint)):
        p = sub.add_parser(name, help="stage-1 inpainter training")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="checkpoint file (.npz)")
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--limit", type=int, default=None, help="use only the first N frames")
        common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="stage-2 detector and segmenter training")
    p.add_argument("--data", required=True)
    p.add_argument("--inpainter", default=None)
    p.add_argument("--flow-inpainter", default=None)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--limit", type=int, default=None, help="use only the first N frames")
    p.add_argument("--resume", default=None, help="stage-2 checkpoint to continue from")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or stored predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--predictions", default=None, help="directory with masks/ and manifest.json")
    p.add_argument("--out", required=True)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--tail", action="store_true", help="with --limit, use the last N frames")
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-overlays", dest="overlays", action="store_false")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="boxes and masks for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("inputs", nargs="+", help="PNG files or directories")
    common(p)
    p.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UnknownKeyError as exc:
        print(f"error: unknown config key {exc.key!r}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError, TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
