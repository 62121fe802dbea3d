"""Training loops for the segmentation and regression networks.

Both loops use Adam with a per-epoch cosine learning-rate decay, draw
augmentations from ``(seed, epoch, record index)`` and write one JSON record
per epoch. Morphology targets are synthesized from the augmented landmarks, so
maps always agree with the transformed image.
"""
from __future__ import annotations

import contextlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .criteria import REG_TERMS, dice_coefficient, joint_reg_loss, joint_seg_loss, mae
from .dataset import AugmentationConfig, AugmentDraw, augment
from .morphology import synthesize_maps
from .networks import (
    INPUT_CHANNELS, EfficientNetRegressor, RegNetConfig, ResUNetPlusPlus, SegNetConfig,
    load_backbone_weights, model_from_checkpoint, save_checkpoint,
)

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {"seg": (400, 1e-4), "reg": (1200, 1e-5)}


class TrainingError(RuntimeError):
    """Training could not proceed (bad inputs or a non-finite loss)."""


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "seg"
    epochs: int = 400
    base_lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = False
    augment: bool = True
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    val_fraction: float = 0.1
    dilation_kernel: int = 5
    # segmentation
    seg_losses: tuple = ("dice", "boundary")
    # regression
    reg_input_maps: str = "predicted"
    inputs: tuple = INPUT_CHANNELS
    losses: tuple = REG_TERMS

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "losses", tuple(self.losses))
        object.__setattr__(self, "seg_losses", tuple(self.seg_losses))
        if self.stage not in STAGE_DEFAULTS:
            raise ValueError(f"stage must be 'seg' or 'reg', got {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1 or not self.base_lr > 0:
            raise ValueError("epochs and batch_size must be >= 1 and base_lr > 0")
        if self.reg_input_maps not in ("predicted", "ground_truth"):
            raise ValueError("reg_input_maps must be 'predicted' or 'ground_truth'")
        if not set(self.losses) <= set(REG_TERMS) or not self.losses:
            raise ValueError(f"losses must be a nonempty subset of {REG_TERMS}")
        if "dice" not in self.seg_losses or not set(self.seg_losses) <= {"dice", "boundary"}:
            raise ValueError("seg_losses must contain 'dice' and optionally 'boundary'")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")

    @classmethod
    def for_stage(cls, stage: str, **kwargs) -> "TrainConfig":
        """Config with the stage's default epochs and learning rate."""
        epochs, lr = STAGE_DEFAULTS[stage]
        return cls(**{"stage": stage, "epochs": epochs, "base_lr": lr, **kwargs})

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class TrainResult:
    model: torch.nn.Module
    log: list
    checkpoints: dict


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``base_lr`` at epoch 0 towards 0 at ``cfg.epochs``."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return max(0.0, cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs)))


@contextlib.contextmanager
def deterministic_mode(enabled: bool):
    previous = torch.are_deterministic_algorithms_enabled()
    if enabled:
        torch.use_deterministic_algorithms(True)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(previous)


def normalize_image(image: np.ndarray) -> np.ndarray:
    """Per-image min-max scaling to [0, 1] as float32."""
    img = image.astype(np.float32)
    lo, hi = float(img.min()), float(img.max())
    return (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)


def split_validation(records, fraction: float, seed: int):
    """Seeded hold-out of ``ceil(fraction * n)`` training records for checkpoint selection."""
    n = len(records)
    k = int(math.ceil(fraction * n)) if fraction > 0 and n >= 10 else 0
    order = np.random.default_rng([seed, 7919]).permutation(n)
    val = sorted(order[:k].tolist())
    train = sorted(order[k:].tolist())
    return [records[i] for i in train], [records[i] for i in val]


class SampleSource:
    """Turns records into (image, maps, angles) arrays, augmenting on demand."""

    def __init__(self, records, cfg: TrainConfig, need_maps: bool = True):
        self.records = list(records)
        self.cfg = cfg
        self.need_maps = need_maps
        self._static = {}

    def __len__(self):
        return len(self.records)

    def get(self, index: int, epoch: int):
        rec = self.records[index]
        if self.cfg.augment:
            rec = augment(rec, self.cfg.augmentation, AugmentDraw.for_index(self.cfg.augmentation, index, epoch))
        elif index in self._static:
            return self._static[index]
        maps = None
        if self.need_maps:
            if rec.landmarks is None:
                raise TrainingError(f"record {rec.source_id} has no landmarks to build maps from")
            maps = synthesize_maps(rec.landmarks, rec.image.shape, self.cfg.dilation_kernel).stack()
        angles = rec.angles_deg.as_array().astype(np.float32) if rec.angles_deg is not None else None
        item = (normalize_image(rec.image), maps, angles)
        if not self.cfg.augment:
            self._static[index] = item
        return item

    def batch(self, indices, epoch: int):
        items = [self.get(i, epoch) for i in indices]
        images = torch.from_numpy(np.stack([it[0] for it in items]))[:, None]
        maps = torch.from_numpy(np.stack([it[1] for it in items])) if self.need_maps else None
        angles = None
        if all(it[2] is not None for it in items):
            angles = torch.from_numpy(np.stack([it[2] for it in items]))
        return images, maps, angles


def epoch_batches(n: int, cfg: TrainConfig, epoch: int):
    order = np.random.default_rng([cfg.seed, epoch, 104729]).permutation(n)
    return [order[i:i + cfg.batch_size].tolist() for i in range(0, n, cfg.batch_size)]


def _check_finite(loss, parts, ids, epoch):
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss at epoch {epoch} for batch {ids}: {parts}")


def _write_log(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e) + "\n")


def _mean_parts(rows):
    keys = rows[0].keys()
    return {k: float(np.mean([r[k] for r in rows])) for k in keys}


@torch.no_grad()
def predict_maps(seg_model, images: torch.Tensor, batch_size: int = 16) -> torch.Tensor:
    """Segmentation probabilities for a ``(N, 1, H, W)`` image batch."""
    seg_model.eval()
    return torch.cat([seg_model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


def assemble_inputs(images: torch.Tensor, maps: torch.Tensor | None, inputs) -> torch.Tensor:
    """Concatenate image and selected maps in canonical channel order."""
    chans = [images]
    for k, name in enumerate(INPUT_CHANNELS[1:]):
        if name in inputs:
            if maps is None:
                raise TrainingError(f"input channel {name!r} requested but no maps available")
            chans.append(maps[:, k:k + 1])
    return torch.cat(chans, dim=1)


# --------------------------------------------------------------------------
# segmentation


def train_segmentation(records, cfg: TrainConfig, model_cfg: SegNetConfig | None = None, out_dir=None,
                       val_records=None, model: ResUNetPlusPlus | None = None) -> TrainResult:
    """Optimize the joint segmentation loss with Adam.

    ``records`` must be preprocessed and carry landmarks. Without explicit
    ``val_records`` a ``cfg.val_fraction`` hold-out of ``records`` selects the
    best checkpoint by region DSC. Writes ``seg_log.jsonl``, ``seg_final.pt``
    and ``seg_best.pt`` (when validating) into ``out_dir``.
    """
    if not records:
        raise TrainingError("empty training set")
    if val_records is None:
        records, val_records = split_validation(records, cfg.val_fraction, cfg.seed)
    shape = records[0].image.shape
    if model_cfg is None:
        model_cfg = SegNetConfig(input_size=shape)
    out_dir = Path(out_dir) if out_dir is not None else None
    use_boundary = "boundary" in cfg.seg_losses
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        if model is None:
            model = ResUNetPlusPlus(model_cfg)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
        source = SampleSource(records, cfg)
        val_source = SampleSource(val_records, replace(cfg, augment=False)) if val_records else None
        entries, ckpts, best = [], {}, -1.0
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            rows = []
            for ids in epoch_batches(len(source), cfg, epoch):
                images, maps, _ = source.batch(ids, epoch)
                opt.zero_grad()
                loss, parts = joint_seg_loss(maps, model(images), use_boundary=use_boundary)
                _check_finite(loss, parts, [source.records[i].source_id for i in ids], epoch)
                loss.backward()
                opt.step()
                rows.append({"loss": float(loss.detach()), **parts})
            entry = {"epoch": epoch, "lr": lr, "steps": len(rows), "n_train": len(source), **_mean_parts(rows)}
            if val_source is not None:
                entry["val_dsc_region"] = evaluate_region_dsc(model, val_source)
                if entry["val_dsc_region"] > best and out_dir is not None:
                    best = entry["val_dsc_region"]
                    ckpts["best"] = save_checkpoint(out_dir / "seg_best.pt", model, opt, epoch + 1,
                                                    {"train": cfg.to_dict(), "val_dsc_region": best})
            entries.append(entry)
            log.info("seg epoch %d loss %.5f", epoch, entry["loss"])
        if out_dir is not None:
            ckpts["final"] = save_checkpoint(out_dir / "seg_final.pt", model, opt, cfg.epochs, {"train": cfg.to_dict()})
            _write_log(out_dir / "seg_log.jsonl", entries)
    model.eval()
    return TrainResult(model, entries, ckpts)


@torch.no_grad()
def evaluate_region_dsc(model, source: SampleSource, threshold: float = 0.5) -> float:
    model.eval()
    images, maps, _ = source.batch(list(range(len(source))), 0)
    pred = (predict_maps(model, images) >= threshold).float()
    return float(dice_coefficient(maps[:, 0], pred[:, 0]))


# --------------------------------------------------------------------------
# regression


def _frozen(seg_model):
    if seg_model is None:
        return None
    if isinstance(seg_model, (str, Path)):
        seg_model = model_from_checkpoint(seg_model, kind="seg")
    seg_model.eval()
    for p in seg_model.parameters():
        p.requires_grad_(False)
    return seg_model


def regression_batch(source: SampleSource, ids, epoch, cfg: TrainConfig, seg_model):
    images, maps, angles = source.batch(ids, epoch)
    if angles is None:
        raise TrainingError("regression requires angle labels on every record")
    if len(cfg.inputs) > 1 and cfg.reg_input_maps == "predicted":
        maps = predict_maps(seg_model, images)
    return assemble_inputs(images, maps, cfg.inputs), angles


def train_regression(records, cfg: TrainConfig, seg_model=None, model_cfg: RegNetConfig | None = None,
                     out_dir=None, val_records=None, init_weights=None,
                     model: EfficientNetRegressor | None = None) -> TrainResult:
    """Optimize the joint regression loss on image plus morphology inputs.

    With ``cfg.reg_input_maps == "predicted"`` the maps come from the frozen
    ``seg_model`` (a model or checkpoint path); with ``"ground_truth"`` they
    are synthesized from landmarks. Writes ``reg_log.jsonl``, ``reg_final.pt``
    and ``reg_best.pt`` (lowest validation MAE) into ``out_dir``.
    """
    if not records:
        raise TrainingError("empty training set")
    needs_maps = len(cfg.inputs) > 1
    if needs_maps and cfg.reg_input_maps == "predicted" and seg_model is None:
        raise TrainingError("predicted-map regression needs a segmentation checkpoint")
    seg_model = _frozen(seg_model) if needs_maps and cfg.reg_input_maps == "predicted" else None
    if val_records is None:
        records, val_records = split_validation(records, cfg.val_fraction, cfg.seed)
    shape = records[0].image.shape
    if model_cfg is None:
        model_cfg = RegNetConfig.for_inputs(cfg.inputs, input_size=shape)
    if tuple(model_cfg.inputs) != tuple(cfg.inputs):
        raise TrainingError(f"model inputs {model_cfg.inputs} differ from training inputs {cfg.inputs}")
    out_dir = Path(out_dir) if out_dir is not None else None
    gt_maps = needs_maps and cfg.reg_input_maps == "ground_truth"
    with deterministic_mode(cfg.deterministic):
        torch.manual_seed(cfg.seed)
        if model is None:
            model = EfficientNetRegressor(model_cfg)
        init = "cold"
        if init_weights is not None:
            skipped = load_backbone_weights(model, torch.load(init_weights, map_location="cpu"))
            init = f"{init_weights} (skipped {len(skipped)} tensors)"
        opt = torch.optim.Adam(model.parameters(), lr=cfg.base_lr)
        source = SampleSource(records, cfg, need_maps=gt_maps)
        val_source = SampleSource(val_records, replace(cfg, augment=False), need_maps=gt_maps) if val_records else None
        entries, ckpts, best = [], {}, math.inf
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            rows = []
            for ids in epoch_batches(len(source), cfg, epoch):
                x, y = regression_batch(source, ids, epoch, cfg, seg_model)
                opt.zero_grad()
                loss, parts = joint_reg_loss(y, model(x), cfg.losses)
                _check_finite(loss, parts, [source.records[i].source_id for i in ids], epoch)
                loss.backward()
                opt.step()
                rows.append({"loss": float(loss.detach()), **parts})
            entry = {"epoch": epoch, "lr": lr, "steps": len(rows), "n_train": len(source), "init": init,
                     **_mean_parts(rows)}
            if val_source is not None:
                entry["val_mae"] = evaluate_regression_mae(model, val_source, cfg, seg_model)
                if entry["val_mae"] < best and out_dir is not None:
                    best = entry["val_mae"]
                    ckpts["best"] = save_checkpoint(out_dir / "reg_best.pt", model, opt, epoch + 1,
                                                    {"train": cfg.to_dict(), "val_mae": best})
            entries.append(entry)
            log.info("reg epoch %d loss %.5f", epoch, entry["loss"])
        if out_dir is not None:
            ckpts["final"] = save_checkpoint(out_dir / "reg_final.pt", model, opt, cfg.epochs, {"train": cfg.to_dict()})
            _write_log(out_dir / "reg_log.jsonl", entries)
    model.eval()
    return TrainResult(model, entries, ckpts)


@torch.no_grad()
def evaluate_regression_mae(model, source: SampleSource, cfg: TrainConfig, seg_model=None) -> float:
    model.eval()
    x, y = regression_batch(source, list(range(len(source))), 0, cfg, seg_model)
    return float(mae(y, model(x)))
