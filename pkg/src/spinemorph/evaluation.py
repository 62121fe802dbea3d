"""Metric reports, overlay rendering and Grad-CAM heatmaps.

Segmentation metrics are accumulated as sums over the whole record set and
reduced once at the end, so batching does not change the result.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .criteria import bf1_from_sums, boundary_sums, dice_from_sums, regression_metrics
from .dataset import PreprocessConfig, preprocess
from .landmarks import ANGLE_NAMES
from .morphology import MAP_NAMES, synthesize_maps
from .networks import config_dict, load_checkpoint, model_from_checkpoint
from .training import assemble_inputs, normalize_image

STAGES = ("segmentation", "regression")
SEG_METRICS = tuple(f"{m}_{k}" for k in MAP_NAMES for m in ("dsc", "bf1"))
REG_METRICS = ("mae", "smape", "cmae", "ed", "md", "cd")


class EvaluationError(ValueError):
    """Evaluation inputs are unusable (empty set, missing labels, bad shapes)."""


def config_digest(config) -> str:
    """Short SHA-256 of the canonical JSON form of ``config``."""
    text = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class MetricReport:
    stage: str
    metrics: dict
    n: int
    config_digest: str
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise EvaluationError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.n < 1:
            raise EvaluationError("a report needs at least one sample")
        bad = [k for k, v in self.metrics.items() if not math.isfinite(v)]
        if bad:
            raise EvaluationError(f"non-finite metrics: {bad}")

    def to_dict(self) -> dict:
        """Flat ``{metric: value, ..., "n": N}`` plus stage, digest and config."""
        return {**self.metrics, "n": self.n, "stage": self.stage,
                "config_digest": self.config_digest, "config": self.config}

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        d = dict(d)
        meta = {k: d.pop(k) for k in ("n", "stage", "config_digest")}
        config = d.pop("config", {})
        return cls(meta["stage"], {k: float(v) for k, v in d.items()}, int(meta["n"]), meta["config_digest"], config)

    @classmethod
    def load(cls, path) -> "MetricReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------
# shared plumbing


def _resolve(model, kind):
    """``(callable, config dict, train config dict)`` for a model, checkpoint path or callable."""
    if model is None:
        return None, None, None
    if isinstance(model, (str, Path)):
        ckpt = load_checkpoint(model, kind=kind)
        net = model_from_checkpoint(model, kind=kind)
        return net, ckpt["config"], ckpt["extra"].get("train")
    cfg = getattr(model, "cfg", None)
    if isinstance(model, torch.nn.Module):
        model.eval()
    return model, (config_dict(cfg) if cfg is not None else None), None


def _prepare(records, preprocess_cfg):
    records = list(records)
    if not records:
        raise EvaluationError("empty record set")
    if preprocess_cfg is not None:
        records = [preprocess(r, preprocess_cfg) for r in records]
    return records


def _images(records) -> torch.Tensor:
    return torch.from_numpy(np.stack([normalize_image(r.image) for r in records]))[:, None]


def _gt_maps(records, dilation_kernel) -> torch.Tensor:
    out = []
    for r in records:
        if r.landmarks is None:
            raise EvaluationError(f"record {r.source_id} has no landmarks for ground-truth maps")
        out.append(synthesize_maps(r.landmarks, r.image.shape, dilation_kernel).stack())
    return torch.from_numpy(np.stack(out))


def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


# --------------------------------------------------------------------------
# segmentation


class SegmentationAccumulator:
    """Running DSC/BF1 sums per map channel over binarized predictions."""

    def __init__(self):
        self.sums = {name: np.zeros(6) for name in MAP_NAMES}
        self.n = 0

    def update(self, gt, pred_binary) -> None:
        gt = torch.as_tensor(gt, dtype=torch.float64)
        pred = torch.as_tensor(pred_binary, dtype=torch.float64)
        if gt.shape != pred.shape or gt.ndim != 4 or gt.shape[1] != len(MAP_NAMES):
            raise EvaluationError(f"expected matching (N, 3, H, W) maps, got {tuple(gt.shape)} and {tuple(pred.shape)}")
        for k, name in enumerate(MAP_NAMES):
            g, p = gt[:, k], pred[:, k]
            parts = [(g * p).sum(), (g + p).sum(), *boundary_sums(g, p)]
            self.sums[name] += np.array([float(v) for v in parts])
        self.n += gt.shape[0]

    def metrics(self) -> dict:
        out = {}
        for name in MAP_NAMES:
            s = torch.as_tensor(self.sums[name], dtype=torch.float64)
            out[f"dsc_{name}"] = 100.0 * float(dice_from_sums(s[0], s[1]))
            out[f"bf1_{name}"] = 100.0 * float(bf1_from_sums(*s[2:]))
        return out


def segmentation_report(gt_maps, pred_maps, threshold: float = 0.5, config: dict | None = None) -> MetricReport:
    """Report for already computed ``(N, 3, H, W)`` maps; predictions are binarized at ``threshold``."""
    acc = SegmentationAccumulator()
    pred = (torch.as_tensor(pred_maps) >= threshold).to(torch.float64)
    acc.update(gt_maps, pred)
    if acc.n < 1:
        raise EvaluationError("empty record set")
    config = config or {}
    return MetricReport("segmentation", acc.metrics(), acc.n, config_digest(config), config)


@torch.no_grad()
def evaluate_segmentation(seg, records, threshold: float = 0.5, dilation_kernel: int = 5, batch_size: int = 8,
                          preprocess_cfg: PreprocessConfig | None = None, dump_dir=None) -> MetricReport:
    """Per-channel DSC and BF1 (percent) of ``seg`` against landmark-derived maps.

    ``seg`` is a model, a checkpoint path, or any callable mapping a
    ``(N, 1, H, W)`` image batch to ``(N, 3, H, W)`` probabilities. With
    ``dump_dir`` the ground-truth and binarized predicted maps are written as
    ``gt.npy`` / ``pred.npy`` for independent rescoring.
    """
    records = _prepare(records, preprocess_cfg)
    model, model_cfg, train_cfg = _resolve(seg, "seg")
    if model is None:
        raise EvaluationError("a segmentation model is required")
    acc = SegmentationAccumulator()
    dumps = ([], [])
    for lo, hi in _chunks(len(records), batch_size):
        batch = records[lo:hi]
        gt = _gt_maps(batch, dilation_kernel)
        pred = (model(_images(batch)) >= threshold).to(torch.uint8)
        acc.update(gt, pred)
        if dump_dir is not None:
            dumps[0].append(gt.to(torch.uint8).numpy())
            dumps[1].append(pred.numpy())
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
        np.save(dump_dir / "gt.npy", np.concatenate(dumps[0]))
        np.save(dump_dir / "pred.npy", np.concatenate(dumps[1]))
    config = {"stage": "segmentation", "seg": model_cfg, "seg_train": train_cfg,
              "threshold": threshold, "dilation_kernel": dilation_kernel}
    return MetricReport("segmentation", acc.metrics(), acc.n, config_digest(config), config)


# --------------------------------------------------------------------------
# regression


def regression_report(gt_angles, pred_angles, config: dict | None = None) -> MetricReport:
    gt = torch.as_tensor(np.asarray(gt_angles, dtype=np.float64))
    pred = torch.as_tensor(np.asarray(pred_angles, dtype=np.float64))
    if gt.ndim != 2 or gt.shape[0] < 1:
        raise EvaluationError("empty record set")
    config = config or {}
    return MetricReport("regression", regression_metrics(gt, pred), gt.shape[0], config_digest(config), config)


@torch.no_grad()
def predict_angles(reg, records, seg=None, maps: str = "predicted", inputs=None, dilation_kernel: int = 5,
                   batch_size: int = 8) -> np.ndarray:
    """``(N, 3)`` angle predictions along the inference path image -> maps -> regressor."""
    model, model_cfg, _ = _resolve(reg, "reg")
    seg_model, _, _ = _resolve(seg, "seg")
    if inputs is None:
        inputs = tuple(model_cfg["inputs"]) if model_cfg else ("image",)
    needs_maps = len(inputs) > 1
    if maps not in ("predicted", "ground_truth"):
        raise EvaluationError(f"maps must be 'predicted' or 'ground_truth', got {maps!r}")
    if needs_maps and maps == "predicted" and seg_model is None:
        raise EvaluationError("predicted maps need a segmentation model")
    out = []
    for lo, hi in _chunks(len(records), batch_size):
        batch = records[lo:hi]
        images = _images(batch)
        m = None
        if needs_maps:
            m = seg_model(images) if maps == "predicted" else _gt_maps(batch, dilation_kernel)
        out.append(np.asarray(model(assemble_inputs(images, m, inputs)), dtype=np.float64))
    return np.concatenate(out)


def evaluate_regression(reg, seg, records, maps: str = "predicted", dilation_kernel: int = 5, batch_size: int = 8,
                        preprocess_cfg: PreprocessConfig | None = None) -> MetricReport:
    """MAE, SMAPE, CMAE, ED, MD and CD of the regressor over ``records``.

    ``reg`` and ``seg`` are models, checkpoint paths or callables. ``seg``
    may be None when the regressor takes the image alone or ``maps`` is
    ``"ground_truth"``.
    """
    records = _prepare(records, preprocess_cfg)
    missing = [r.source_id for r in records if r.angles_deg is None]
    if missing:
        raise EvaluationError(f"records without angle labels: {missing[:5]}")
    reg_model, reg_cfg, reg_train = _resolve(reg, "reg")
    seg_model, seg_cfg, _ = _resolve(seg, "seg")
    pred = predict_angles(reg_model, records, seg_model, maps, dilation_kernel=dilation_kernel,
                          batch_size=batch_size)
    gt = np.stack([r.angles_deg.as_array() for r in records])
    config = {"stage": "regression", "reg": reg_cfg, "reg_train": reg_train, "seg": seg_cfg, "maps": maps,
              "dilation_kernel": dilation_kernel}
    return regression_report(gt, pred, config)


# --------------------------------------------------------------------------
# visualization

TP_COLOR = (255, 255, 0)
FN_COLOR = (255, 0, 0)
FP_COLOR = (0, 255, 0)


def render_overlay(gt_map, pred_map, image) -> np.ndarray:
    """RGB uint8 composite: yellow true positives, red misses, green false alarms over ``image``."""
    gt = np.asarray(gt_map) > 0
    pred = np.asarray(pred_map) > 0
    image = np.asarray(image)
    if gt.shape != pred.shape or gt.shape != image.shape[:2]:
        raise EvaluationError(f"shape mismatch: gt {gt.shape}, pred {pred.shape}, image {image.shape}")
    gray = image if image.ndim == 2 else image[..., :3].mean(axis=-1)
    if gray.dtype != np.uint8:
        gray = (255 * normalize_image(gray)).round()
    out = np.repeat(gray.astype(np.uint8)[..., None], 3, axis=-1)
    out[gt & pred] = TP_COLOR
    out[gt & ~pred] = FN_COLOR
    out[~gt & pred] = FP_COLOR
    return out


def gradcam_heatmap(reg, x, target: str = "mt") -> np.ndarray:
    """Grad-CAM map in [0, 1] for one angle output, at the input resolution.

    ``x`` is ``(C, H, W)`` or ``(1, C, H, W)``. Channel weights are the
    spatially averaged gradients of the target output with respect to the
    model's ``cam_layer`` activations.
    """
    if target not in ANGLE_NAMES:
        raise EvaluationError(f"target must be one of {ANGLE_NAMES}, got {target!r}")
    model, _, _ = _resolve(reg, "reg")
    x = torch.as_tensor(x, dtype=torch.float32)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise EvaluationError(f"expected a single (C, H, W) input, got {tuple(x.shape)}")
    x = x.clone().requires_grad_(True)
    captured = {}
    handle = model.cam_layer.register_forward_hook(lambda m, i, o: captured.__setitem__("act", o))
    try:
        with torch.enable_grad():
            score = model(x)[0, ANGLE_NAMES.index(target)]
            act = captured["act"]
            grads, = torch.autograd.grad(score, act)
    finally:
        handle.remove()
    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * act).sum(dim=1, keepdim=True)).detach()
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)[0, 0].double()
    top = float(cam.max())
    if top <= 0:
        return np.zeros(tuple(x.shape[-2:]))
    cam = cam - cam.min()
    span = float(cam.max())
    return (cam / span).numpy() if span > 0 else np.ones(tuple(x.shape[-2:]))


__all__ = [
    "EvaluationError", "MetricReport", "REG_METRICS", "SEG_METRICS", "SegmentationAccumulator",
    "config_digest", "evaluate_regression", "evaluate_segmentation", "gradcam_heatmap", "predict_angles",
    "regression_report", "render_overlay", "segmentation_report",
]
