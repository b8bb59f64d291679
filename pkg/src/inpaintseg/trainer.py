"""Stage-1 and stage-2 training, checkpoints, inference and evaluation.

Stage 1 trains the RGB (and optionally flow) inpainter on random holes.
Stage 2 freezes it and trains the detector and segmenter: every step draws
one candidate per image from the smoothed proposal distribution, inpaints
its (dilated) region, reconstructs the crop and sums the routed objectives.
"""

from __future__ import annotations

import json
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from . import sampler
from .boxes import BoxGeometry
from .config import TrainConfig
from .detector import Detector, top_k_cells
from .evalkit import EvalReport, evaluate_predictions
from .inpainter import Inpainter, InpainterTrainConfig, erase, to_float_frames, train_inpainter
from .objectives import (background_objective, default_features, dilate_boxes,
                         flow_background_objective, foreground_objective, prob_prior,
                         total_loss, v_prior)
from .segmenter import Segmenter
from .stn import crop, paste

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@contextmanager
def seeded(seed: int):
    """Seed torch's global RNG for weight initialization without leaking state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


# ---------------------------------------------------------------------------
# checkpoints: one .npz of named arrays plus a JSON metadata string


def _pack_module(prefix: str, module: nn.Module, out: dict) -> None:
    for name, value in module.state_dict().items():
        out[f"{prefix}/{name}"] = value.detach().cpu().numpy()


def _unpack_module(prefix: str, module: nn.Module, arrays: dict) -> None:
    state = {}
    for name in module.state_dict():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint lacks {key}")
        state[name] = torch.from_numpy(np.array(arrays[key]))
    module.load_state_dict(state)


def _pack_optimizer(opt: torch.optim.Optimizer, out: dict) -> dict:
    sd = opt.state_dict()
    for idx, st in sd["state"].items():
        for name, value in st.items():
            out[f"optimizer/{idx}/{name}"] = torch.as_tensor(value).cpu().numpy()
    return {"param_groups": sd["param_groups"]}


def _unpack_optimizer(opt: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state: dict = {}
    for key in arrays:
        if key.startswith("optimizer/"):
            _, idx, name = key.split("/")
            state.setdefault(int(idx), {})[name] = torch.from_numpy(np.array(arrays[key]))
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})


def save_arrays(path, arrays: dict, meta: dict) -> None:
    arrays = dict(arrays)
    arrays["__meta__"] = np.array(json.dumps(meta))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_arrays(path):
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays.pop("__meta__")))
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return arrays, meta


def save_inpainter(path, model: Inpainter, channels, image_channels: int, kind: str = "inpainter",
                   config: Optional[dict] = None) -> None:
    arrays: dict = {}
    _pack_module("inpainter", model, arrays)
    save_arrays(path, arrays, {"kind": kind, "channels": list(channels),
                               "image_channels": image_channels, "config": config or {}})


def load_inpainter(path) -> Inpainter:
    arrays, meta = load_arrays(path)
    if meta.get("kind") not in ("inpainter", "flow_inpainter"):
        raise CheckpointError(f"{path} is not an inpainter checkpoint")
    model = Inpainter(tuple(meta["channels"]), meta["image_channels"])
    _unpack_module("inpainter", model, arrays)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# stage 1


def stage1_config(config: TrainConfig) -> InpainterTrainConfig:
    return InpainterTrainConfig(
        steps=config.stage1_steps, batch_size=config.batch_size, lr=config.lr_stage1,
        scale_min=config.detector.scale_min, scale_max=config.detector.scale_max,
        erase_scale=config.erase_scale, channels=tuple(config.inpainter_channels))


def train_stage1(frames: np.ndarray, config: TrainConfig, callback=None) -> Inpainter:
    with seeded(config.seed):
        model = Inpainter(tuple(config.inpainter_channels), image_channels=frames.shape[-1])
    return train_inpainter(frames, stage1_config(config), seed=config.seed, weights=config.loss,
                           inpainter=model, callback=callback)


# ---------------------------------------------------------------------------
# stage 2


def _freeze(model: Optional[nn.Module]) -> Optional[nn.Module]:
    if model is not None:
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
    return model


class Stage2Trainer:
    """Holds the detector, segmenter, optimizer and RNG of a stage-2 run.

    Args:
        frames: ``(N, H, W, 3)`` uint8 training frames.
        inpainter: frozen stage-1 RGB inpainter.
        config: training configuration.
        flow_frames: ``(N, H, W, 3)`` uint8 encoded flow, required when
            ``config.flow_enabled``.
        flow_inpainter: frozen stage-1 flow inpainter.
    """

    def __init__(self, frames: np.ndarray, inpainter: Optional[Inpainter], config: TrainConfig,
                 flow_frames: Optional[np.ndarray] = None, flow_inpainter: Optional[Inpainter] = None):
        config.validate()
        if inpainter is None:
            raise TrainingError("stage 2 needs a trained inpainter (run stage 1 first)")
        if config.flow_enabled and (flow_frames is None or flow_inpainter is None):
            raise TrainingError("flow_enabled requires flow frames and a flow inpainter")
        if len(frames) == 0:
            raise TrainingError("empty training set")
        self.config = config
        self.frames = frames
        self.flow_frames = flow_frames if config.flow_enabled else None
        self.image_size = frames.shape[1]
        self.inpainter = _freeze(inpainter)
        self.flow_inpainter = _freeze(flow_inpainter) if config.flow_enabled else None
        with seeded(config.seed):
            self.detector = Detector(config.detector, self.image_size, config.head_mode)
            self.segmenter = Segmenter(config.crop_size, tuple(config.segmenter_channels),
                                       config.segmenter_bottleneck)
        self.phi = default_features(config.perceptual_seed)
        self.optimizer = torch.optim.Adam(
            list(self.detector.parameters()) + list(self.segmenter.parameters()), lr=config.lr_stage2)
        self.generator = torch.Generator().manual_seed(config.seed)
        self.step_count = 0

    # -- sampling -----------------------------------------------------------

    def _sample_cells(self, props):
        """Return ``(image_index, cell, weight)`` flattened over all samples."""
        cfg = self.config
        p = props.probs
        b, c = p.shape
        if cfg.head_mode == "direct_regression":
            cells = torch.zeros(b, 1, dtype=torch.long)
            weights = torch.ones(b, 1, dtype=p.dtype)
        elif cfg.sampling_mode == "exhaustive":
            dist = sampler.uniform(p)
            cells = torch.arange(c).expand(b, c)
            weights = dist.weights(cells)
        elif cfg.sampling_mode == "gumbel":
            ys, cells = [], []
            for _ in range(cfg.samples_per_image):
                y = sampler.gumbel_softmax_sample(props.logits, cfg.gumbel_temperature, self.generator)
                cell = y.detach().argmax(-1, keepdim=True)
                ys.append(torch.gather(y, -1, cell))
                cells.append(cell)
            cells, weights = torch.cat(cells, 1), torch.cat(ys, 1)
        else:
            if cfg.sampling_mode == "uniform":
                dist = sampler.uniform(p)
            else:
                dist = sampler.smooth(p, cfg.epsilon(self.step_count))
            cells = sampler.draw(dist, self.generator, cfg.samples_per_image)
            weights = dist.weights(cells)
        per_image = cells.shape[1]
        image_index = torch.arange(b).repeat_interleave(per_image)
        # every image has the same number of samples, so the mean over all of
        # them equals the mean over images of the per-image sample mean
        return image_index, cells.reshape(-1), weights.reshape(-1), per_image

    # -- one optimization step ---------------------------------------------

    def compute_losses(self, batch_idx: np.ndarray, retain: bool = False) -> dict:
        """Forward pass for the given frame indices; returns loss terms and diagnostics."""
        cfg = self.config
        frames = to_float_frames(self.frames, batch_idx)
        raw = self.detector.raw_outputs(frames)
        if retain:
            raw.retain_grad()
        props = self.detector.proposals_from_raw(raw)
        if retain:
            props.logits.retain_grad()
            props.boxes.retain_grad()
        img, cells, weights, per_image = self._sample_cells(props)
        rep_frames = frames[img]
        boxes = props.boxes[img, cells]
        region = dilate_boxes(boxes, cfg.erase_scale)
        with torch.no_grad():
            backgrounds = self.inpainter(erase(rep_frames, boxes, cfg.erase_scale))
        g_routing = "joint" if (cfg.routing_mode == "joint" or cfg.objective_mode == "G_only"
                                or cfg.head_mode == "direct_regression") else "separate"
        terms: dict = {}
        diag: dict = {"props": props, "raw": raw, "cells": cells, "boxes": boxes, "weights": weights}
        if cfg.objective_mode in ("both", "O_only"):
            fg = foreground_objective(rep_frames, boxes, backgrounds, self.segmenter, weights,
                                      cfg.crop_size, cfg.loss, self.phi, cfg.routing_mode)
            terms["O"] = fg.loss
            # weighted like O so every sampled term estimates an expectation under p
            terms["v_prior"] = (weights.detach() * v_prior(fg.pasted_mask, cfg.loss.lambda_v)).mean()
            diag["foreground"] = fg
        if cfg.objective_mode in ("both", "G_only"):
            terms["G"], diag["region_loss"] = background_objective(
                rep_frames, backgrounds, region, weights, cfg.loss, self.phi, g_routing)
        if cfg.flow_enabled:
            flows = to_float_frames(self.flow_frames, batch_idx)[img]
            with torch.no_grad():
                flow_bg = self.flow_inpainter(erase(flows, boxes, cfg.erase_scale))
            terms["G_flow"], diag["flow_region_loss"] = flow_background_objective(
                flows, flow_bg, region, weights, cfg.loss, self.phi, g_routing)
        if cfg.head_mode == "proposal":
            terms["prob_prior"] = prob_prior(props.probs).mean()
        terms["total"] = total_loss(terms, cfg.loss)
        diag["per_image"] = per_image
        return {"terms": terms, "diag": diag}

    def step(self) -> dict:
        cfg = self.config
        batch_idx = torch.randint(len(self.frames), (cfg.batch_size,), generator=self.generator).numpy()
        epsilon = cfg.epsilon(self.step_count)
        out = self.compute_losses(batch_idx)
        terms = out["terms"]
        total = terms["total"]
        if not torch.isfinite(total):
            raise TrainingError(
                f"non-finite loss at step {self.step_count}; batch frame indices {batch_idx.tolist()}")
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        props = out["diag"]["props"]
        boxes = props.boxes.detach()
        best = props.probs.detach().argmax(-1)
        chosen = boxes[torch.arange(len(best)), best]
        metrics = {
            "step": self.step_count,
            "loss": float(total.detach()),
            **{k: float(v.detach()) for k, v in terms.items() if k != "total"},
            "epsilon": epsilon,
            "sampling_mode": cfg.sampling_mode,
            "routing_mode": cfg.routing_mode,
            "objective_mode": cfg.objective_mode,
            "head_mode": cfg.head_mode,
            "max_prob": float(props.probs.detach().max(-1).values.mean()),
            "mean_box_area": float((chosen[:, 2] * chosen[:, 3]).mean()),
        }
        self.step_count += 1
        return metrics

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        arrays: dict = {}
        _pack_module("detector", self.detector, arrays)
        _pack_module("segmenter", self.segmenter, arrays)
        _pack_module("inpainter", self.inpainter, arrays)
        if self.flow_inpainter is not None:
            _pack_module("flow_inpainter", self.flow_inpainter, arrays)
        opt_meta = _pack_optimizer(self.optimizer, arrays)
        arrays["__rng__"] = self.generator.get_state().numpy()
        meta = {
            "kind": "stage2",
            "config": self.config.to_dict(),
            "step": self.step_count,
            "image_size": self.image_size,
            "inpainter_image_channels": 3,
            "has_flow_inpainter": self.flow_inpainter is not None,
            **opt_meta,
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def resume(cls, path, frames: np.ndarray, flow_frames: Optional[np.ndarray] = None) -> "Stage2Trainer":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "stage2":
            raise CheckpointError(f"{path} is not a stage-2 checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        inpainter = Inpainter(tuple(config.inpainter_channels), 3)
        _unpack_module("inpainter", inpainter, arrays)
        flow_inp = None
        if meta.get("has_flow_inpainter"):
            flow_inp = Inpainter(tuple(config.inpainter_channels), 3)
            _unpack_module("flow_inpainter", flow_inp, arrays)
        trainer = cls(frames, inpainter, config, flow_frames, flow_inp)
        _unpack_module("detector", trainer.detector, arrays)
        _unpack_module("segmenter", trainer.segmenter, arrays)
        _unpack_optimizer(trainer.optimizer, arrays, meta)
        trainer.generator.set_state(torch.from_numpy(np.array(arrays["__rng__"])))
        trainer.step_count = int(meta["step"])
        return trainer


def train_stage2(frames: np.ndarray, inpainter: Inpainter, config: TrainConfig,
                 flow_frames=None, flow_inpainter=None, steps: Optional[int] = None,
                 checkpoint_dir=None, metrics_path=None, trainer: Optional[Stage2Trainer] = None):
    """Run stage 2 for ``steps`` (default ``config.stage2_steps``) steps.

    Writes one JSON line of metrics per step to ``metrics_path`` and periodic
    checkpoints ``step_%06d.npz`` plus ``last.npz`` to ``checkpoint_dir``.
    Returns the trainer.
    """
    trainer = trainer or Stage2Trainer(frames, inpainter, config, flow_frames, flow_inpainter)
    steps = config.stage2_steps if steps is None else steps
    log_fh = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            metrics = trainer.step()
            if log_fh:
                log_fh.write(json.dumps(metrics) + "\n")
            if metrics["step"] % 100 == 0:
                log.info("step %d loss %.5f max_prob %.3f", metrics["step"], metrics["loss"],
                         metrics["max_prob"])
            if checkpoint_dir and config.checkpoint_every and trainer.step_count % config.checkpoint_every == 0:
                trainer.save(Path(checkpoint_dir) / f"step_{trainer.step_count:06d}.npz")
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir:
        trainer.save(Path(checkpoint_dir) / "last.npz")
    return trainer


# ---------------------------------------------------------------------------
# inference and evaluation


@dataclass
class Model:
    """Trained detector + segmenter pair used for inference."""

    detector: Detector
    segmenter: Segmenter
    config: TrainConfig

    @classmethod
    def load(cls, path) -> "Model":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "stage2":
            raise CheckpointError(f"{path} is not a stage-2 checkpoint")
        config = TrainConfig.from_dict(meta["config"])
        detector = Detector(config.detector, meta["image_size"], config.head_mode)
        segmenter = Segmenter(config.crop_size, tuple(config.segmenter_channels), config.segmenter_bottleneck)
        _unpack_module("detector", detector, arrays)
        _unpack_module("segmenter", segmenter, arrays)
        return cls(detector.eval(), segmenter.eval(), config)

    @classmethod
    def from_trainer(cls, trainer: Stage2Trainer) -> "Model":
        return cls(trainer.detector, trainer.segmenter, trainer.config)


@dataclass
class Prediction:
    boxes: list          # k BoxGeometry
    confidences: list    # k probabilities
    masks: np.ndarray    # (k, H, W) soft masks pasted into the frame


@torch.no_grad()
def infer_batch(frames: torch.Tensor, model: Model, k: int = 1) -> list[Prediction]:
    """Top-``k`` boxes and their frame-size soft masks for a batch of NCHW frames."""
    props = model.detector(frames)
    h, w = frames.shape[-2:]
    out = []
    for i in range(frames.shape[0]):
        cells = top_k_cells(props.probs[i], k)
        boxes = props.boxes[i, cells]
        patches = crop(frames[i:i + 1].expand(len(cells), -1, -1, -1), boxes, model.config.crop_size)
        seg = model.segmenter(patches)
        masks = paste(seg.mask, boxes, (h, w))[:, 0]
        out.append(Prediction(
            boxes=[BoxGeometry.from_array(b.numpy()) for b in boxes],
            confidences=[float(props.probs[i, c]) for c in cells],
            masks=masks.numpy(),
        ))
    return out


def infer(frame, model: Model, k: int = 1) -> Prediction:
    """Inference on one ``H x W x 3`` frame in [0, 1]."""
    tensor = torch.as_tensor(np.asarray(frame, dtype=np.float32)).permute(2, 0, 1)[None]
    return infer_batch(tensor, model, k)[0]


def predict_frames(frames: np.ndarray, model: Model, k: int = 1, batch_size: int = 32) -> list[Prediction]:
    out = []
    for start in range(0, len(frames), batch_size):
        idx = np.arange(start, min(start + batch_size, len(frames)))
        out.extend(infer_batch(to_float_frames(frames, idx), model, k))
    return out


def evaluate_model(model: Model, samples, batch_size: int = 32) -> EvalReport:
    from .synthdata import stack_frames

    frames = stack_frames(samples)
    preds = predict_frames(frames, model, 1, batch_size)
    return evaluate_predictions(
        soft_masks=[p.masks[0] for p in preds],
        gt_masks=[s.gt_mask for s in samples],
        pred_boxes=[p.boxes[0] for p in preds],
        confidences=[p.confidences[0] for p in preds],
        gt_boxes=[s.gt_box for s in samples],
        indices=[s.index for s in samples],
    )


def mean_box_area(preds: list[Prediction]) -> float:
    return float(np.mean([p.boxes[0].area for p in preds]))
