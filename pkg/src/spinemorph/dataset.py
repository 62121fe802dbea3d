"""Manifest loading, preprocessing and geometric augmentation.

Manifest layout (JSON)::

    {"samples": [{"id": "...", "image": "images/a.png", "landmarks": "lm/a.csv",
                  "angles_deg": {"pt": 10.0, "mt": 25.1, "tl": 14.9},
                  "split": "train"}]}

Paths are relative to the manifest file. Landmark CSVs hold 68 ``x,y`` rows in
pixels of the original image, vertebra-major, corners TL, TR, BL, BR.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import cv2
import numpy as np

from .landmarks import (
    ANGLE_NAMES, N_POINTS, AngleTriple, LandmarkError, LandmarkSet, swap_left_right,
)
from .morphology import MorphologyMaps, synthesize_maps

log = logging.getLogger(__name__)

SPLITS = ("train", "test")


class DataError(Exception):
    """A dataset entry or file cannot be used."""

    def __init__(self, message, source_id=None):
        super().__init__(message if source_id is None else f"{source_id}: {message}")
        self.source_id = source_id


@dataclass(frozen=True, eq=False)
class SampleRecord:
    image: np.ndarray
    landmarks: LandmarkSet | None = None
    angles_deg: AngleTriple | None = None
    split: str = "train"
    source_id: str = ""
    provenance: tuple = ()
    maps: MorphologyMaps | None = None

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.ndim != 2 or img.size == 0:
            raise DataError(f"image must be a nonempty 2-D grid, got shape {img.shape}", self.source_id)
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}", self.source_id)
        object.__setattr__(self, "image", img.astype(np.uint8, copy=False))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __eq__(self, other):
        if not isinstance(other, SampleRecord):
            return NotImplemented
        return (
            np.array_equal(self.image, other.image)
            and self.landmarks == other.landmarks
            and self.angles_deg == other.angles_deg
            and self.split == other.split
            and self.source_id == other.source_id
            and self.provenance == other.provenance
            and self.maps == other.maps
        )

    def with_note(self, note: str, **changes) -> "SampleRecord":
        return replace(self, provenance=self.provenance + (note,), **changes)


@dataclass(frozen=True)
class PreprocessConfig:
    target_height: int = 512
    target_width: int = 256
    crop_margin_fraction: float = 0.10
    equalize: bool = True

    def __post_init__(self):
        if self.target_height <= 0 or self.target_width <= 0:
            raise ValueError("target size must be positive")
        if not 0.0 <= self.crop_margin_fraction <= 1.0:
            raise ValueError("crop margin must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentationConfig:
    flip_prob: float = 0.5
    rotation_range_deg: tuple = (-25.0, 25.0)
    scale_range: tuple = (0.85, 1.25)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")
        lo, hi = self.rotation_range_deg
        if not lo <= hi:
            raise ValueError("rotation range must be ordered")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale range must be positive and ordered")


@dataclass(frozen=True)
class AugmentDraw:
    """One concrete augmentation: optional horizontal flip, then rotation and scale."""

    flip: bool = False
    angle_deg: float = 0.0
    scale: float = 1.0

    @classmethod
    def sample(cls, cfg: AugmentationConfig, rng: np.random.Generator) -> "AugmentDraw":
        flip = bool(rng.random() < cfg.flip_prob)
        angle = float(rng.uniform(*cfg.rotation_range_deg))
        scale = float(rng.uniform(*cfg.scale_range))
        return cls(flip, angle, scale)

    @classmethod
    def for_index(cls, cfg: AugmentationConfig, index: int, epoch: int = 0) -> "AugmentDraw":
        """Draw seeded by ``(cfg.seed, epoch, index)``; independent of call order."""
        return cls.sample(cfg, np.random.default_rng([cfg.seed, epoch, index]))

    @property
    def is_identity(self) -> bool:
        return not self.flip and self.angle_deg == 0.0 and self.scale == 1.0


# --------------------------------------------------------------------------
# file formats


def read_landmark_csv(path, source_id="") -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 'x,y', got {row!r}", source_id)
            try:
                x, y = float(row[0]), float(row[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed coordinate {row!r}", source_id) from None
            if not (np.isfinite(x) and np.isfinite(y)):
                raise DataError(f"{path}:{lineno}: non-finite coordinate {row!r}", source_id)
            rows.append((x, y))
    if len(rows) != N_POINTS:
        raise DataError(f"{path}: expected {N_POINTS} landmark rows, found {len(rows)}", source_id)
    return np.array(rows, dtype=np.float64)


def write_landmark_csv(path, points) -> None:
    with open(path, "w", newline="") as fh:
        for x, y in np.asarray(points, dtype=np.float64):
            fh.write(f"{float(x)!r},{float(y)!r}\n")


def read_image(path, source_id="") -> np.ndarray:
    if not Path(path).is_file():
        raise DataError(f"image file not found: {path}", source_id)
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise DataError(f"cannot decode image: {path}", source_id)
    return img


def manifest_info(path) -> dict:
    """Top-level manifest keys other than ``samples`` (e.g. preprocessing metadata)."""
    data = json.loads(Path(path).read_text())
    return {k: v for k, v in data.items() if k != "samples"}


def load_manifest(path, diagnostics: list | None = None) -> list[SampleRecord]:
    """Load every manifest entry into a :class:`SampleRecord`, sorted by id.

    A missing or undecodable image is fatal and raises :class:`DataError`.
    Entries with unusable landmarks or angles are skipped; a diagnostic line
    naming the entry is logged and appended to ``diagnostics`` if given.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(data, dict) or not isinstance(data.get("samples"), list):
        raise DataError(f"manifest {path} lacks a 'samples' list")
    root = path.parent
    records, seen = [], set()
    for entry in data["samples"]:
        sid = str(entry.get("id", ""))
        if not sid:
            raise DataError(f"manifest {path}: entry without id")
        if sid in seen:
            raise DataError("duplicate id in manifest", sid)
        seen.add(sid)
        split = entry.get("split", "train")
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}", sid)
        image = read_image(root / entry["image"], sid)
        try:
            landmarks = None
            if entry.get("landmarks"):
                pts = read_landmark_csv(root / entry["landmarks"], sid)
                landmarks = LandmarkSet(pts, image_width=image.shape[1], image_height=image.shape[0])
                landmarks.check()
            angles = None
            if entry.get("angles_deg") is not None:
                a = entry["angles_deg"]
                angles = AngleTriple(*(float(a[k]) for k in ANGLE_NAMES))
        except (DataError, LandmarkError, ValueError, KeyError, TypeError, OSError) as exc:
            msg = f"rejected entry {sid}: {exc}"
            log.warning(msg)
            if diagnostics is not None:
                diagnostics.append(msg)
            continue
        records.append(SampleRecord(
            image=image, landmarks=landmarks, angles_deg=angles, split=split, source_id=sid,
            provenance=tuple(entry.get("provenance", ())),
        ))
    records.sort(key=lambda r: r.source_id)
    return records


def save_manifest(records, directory, name: str = "manifest.json", extra: dict | None = None) -> Path:
    """Write images, landmark CSVs and a manifest so :func:`load_manifest` restores ``records``."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "landmarks").mkdir(parents=True, exist_ok=True)
    samples = []
    for rec in records:
        img_rel = f"images/{rec.source_id}.png"
        if not cv2.imwrite(str(directory / img_rel), rec.image):
            raise DataError(f"cannot write {directory / img_rel}", rec.source_id)
        lm_rel = None
        if rec.landmarks is not None:
            lm_rel = f"landmarks/{rec.source_id}.csv"
            write_landmark_csv(directory / lm_rel, rec.landmarks.points)
        entry = {
            "id": rec.source_id,
            "image": img_rel,
            "landmarks": lm_rel,
            "angles_deg": rec.angles_deg.as_dict() if rec.angles_deg is not None else None,
            "split": rec.split,
        }
        if rec.provenance:
            entry["provenance"] = list(rec.provenance)
        samples.append(entry)
    out = directory / name
    out.write_text(json.dumps({**(extra or {}), "samples": samples}, indent=2))
    return out


def convert_challenge_csv(filenames_csv, landmarks_csv, image_dir, out_dir, split: str,
                          angles_csv=None, angle_columns=ANGLE_NAMES, normalized: bool = True) -> Path:
    """Convert the challenge's CSV distribution into per-image landmark CSVs plus a manifest.

    ``landmarks_csv`` rows carry 136 values: 68 x coordinates followed by 68 y
    coordinates, in [0, 1] image fractions when ``normalized``. ``angle_columns``
    names the angle held by each column of ``angles_csv``; check it against the
    data before trusting the labels.
    """
    out_dir = Path(out_dir)
    (out_dir / "landmarks").mkdir(parents=True, exist_ok=True)

    def rows(p):
        with open(p, newline="") as fh:
            return [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]

    names = [r[0].strip() for r in rows(filenames_csv)]
    coords = rows(landmarks_csv)
    angles = rows(angles_csv) if angles_csv is not None else None
    if len(coords) != len(names) or (angles is not None and len(angles) != len(names)):
        raise DataError("filename, landmark and angle CSVs have different row counts")
    if sorted(angle_columns) != sorted(ANGLE_NAMES):
        raise ValueError(f"angle_columns must be a permutation of {ANGLE_NAMES}")
    samples = []
    for k, fname in enumerate(names):
        sid = Path(fname).stem
        img_path = Path(image_dir) / fname
        vals = np.array([float(v) for v in coords[k]], dtype=np.float64)
        if vals.size != 2 * N_POINTS:
            raise DataError(f"expected {2 * N_POINTS} landmark values, got {vals.size}", sid)
        pts = np.stack([vals[:N_POINTS], vals[N_POINTS:]], axis=1)
        if normalized:
            img = read_image(img_path, sid)
            pts = pts * [img.shape[1], img.shape[0]]
        write_landmark_csv(out_dir / "landmarks" / f"{sid}.csv", pts)
        entry = {
            "id": sid,
            "image": os.path.relpath(img_path, out_dir),
            "landmarks": f"landmarks/{sid}.csv",
            "angles_deg": None,
            "split": split,
        }
        if angles is not None:
            entry["angles_deg"] = {name: float(v) for name, v in zip(angle_columns, angles[k])}
        samples.append(entry)
    out = out_dir / "manifest.json"
    out.write_text(json.dumps({"samples": samples}, indent=2))
    return out


# --------------------------------------------------------------------------
# preprocessing


def equalize_histogram(image: np.ndarray) -> np.ndarray:
    """Global 256-bin histogram equalization, ``v -> round(255 * cdf(v) / N)``.

    This form is idempotent: equalizing an equalized image returns it unchanged.
    """
    image = np.asarray(image, dtype=np.uint8)
    hist = np.bincount(image.ravel(), minlength=256)
    if np.count_nonzero(hist) == 1:
        return image.copy()
    cdf = np.cumsum(hist)
    lut = np.rint(255.0 * cdf / cdf[-1]).astype(np.uint8)
    return lut[image]


def crop_box(record: SampleRecord, margin: float) -> tuple:
    """``(x0, y0, x1, y1)`` crop box in source pixel coordinates."""
    h, w = record.image.shape
    if record.landmarks is None:
        return 0.0, 0.0, float(w - 1), float(h - 1)
    pts = record.landmarks.points
    x0, y0 = pts.min(axis=0)
    x1, y1 = pts.max(axis=0)
    bw, bh = x1 - x0, y1 - y0
    if bw <= 0 or bh <= 0:
        raise DataError("degenerate landmark bounding box", record.source_id)
    return x0 - margin * bw, y0 - margin * bh, x1 + margin * bw, y1 + margin * bh


def crop_affine(box, size) -> np.ndarray:
    """2x3 matrix mapping the box corners onto the corner pixels of a ``(h, w)`` grid."""
    x0, y0, x1, y1 = box
    h, w = size
    sx = (w - 1) / (x1 - x0)
    sy = (h - 1) / (y1 - y0)
    return np.array([[sx, 0.0, -x0 * sx], [0.0, sy, -y0 * sy]])


def apply_affine(points: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return points @ matrix[:, :2].T + matrix[:, 2]


def _is_identity(matrix, size, shape) -> bool:
    return tuple(shape) == tuple(size) and np.allclose(matrix, [[1, 0, 0], [0, 1, 0]], rtol=0, atol=1e-9)


def preprocess(record: SampleRecord, cfg: PreprocessConfig = PreprocessConfig()) -> SampleRecord:
    """Crop around the landmarks, resize to the target grid and equalize.

    The crop box is the landmark bounding box grown by ``crop_margin_fraction``
    of its size on every side (the whole frame if there are no landmarks); it
    may extend past the image, in which case the outside is filled with 0.
    Landmarks follow the same affine map. Angles are untouched.
    """
    size = (cfg.target_height, cfg.target_width)
    box = crop_box(record, cfg.crop_margin_fraction)
    m = crop_affine(box, size)
    if _is_identity(m, size, record.image.shape):
        image = record.image.copy()
        landmarks = record.landmarks
    else:
        image = cv2.warpAffine(record.image, m, (cfg.target_width, cfg.target_height),
                               flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        landmarks = None
        if record.landmarks is not None:
            landmarks = LandmarkSet(apply_affine(record.landmarks.points, m),
                                    image_width=cfg.target_width, image_height=cfg.target_height)
    if cfg.equalize:
        image = equalize_histogram(image)
    note = "preprocess:box=({:.3f},{:.3f},{:.3f},{:.3f}),size={}x{},equalize={}".format(
        *box, cfg.target_height, cfg.target_width, int(cfg.equalize))
    return record.with_note(note, image=image, landmarks=landmarks, maps=None)


# --------------------------------------------------------------------------
# augmentation


def augment_affine(draw: AugmentDraw, shape) -> np.ndarray:
    """2x3 matrix: horizontal flip (if drawn) then rotation/scale about the centre."""
    h, w = shape
    flip = np.array([[-1.0, 0.0, w - 1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]) if draw.flip else np.eye(3)
    rot = cv2.getRotationMatrix2D(((w - 1) / 2.0, (h - 1) / 2.0), draw.angle_deg, draw.scale)
    return (np.vstack([rot, [0.0, 0.0, 1.0]]) @ flip)[:2]


def augment(record: SampleRecord, cfg: AugmentationConfig, draw: AugmentDraw) -> SampleRecord:
    """Apply one geometric augmentation to image, landmarks and maps.

    Angle targets are left alone: flips, rotations and uniform scalings do not
    change the angles between vertebra midlines. Left and right corner roles
    are swapped after a flip so the corner order stays anatomical.
    """
    note = f"augment:flip={int(draw.flip)},angle={draw.angle_deg:.4f},scale={draw.scale:.4f}"
    if draw.is_identity:
        return record.with_note(note)
    h, w = record.image.shape
    m = augment_affine(draw, (h, w))
    image = cv2.warpAffine(record.image, m, (w, h), flags=cv2.INTER_LINEAR,
                           borderMode=cv2.BORDER_CONSTANT, borderValue=0)
    landmarks = None
    if record.landmarks is not None:
        pts = apply_affine(record.landmarks.points, m)
        if draw.flip:
            pts = swap_left_right(pts)
        landmarks = record.landmarks.replace(points=pts)
    maps = None
    if record.maps is not None:
        maps = MorphologyMaps.from_stack(np.stack([
            cv2.warpAffine(g, m, (w, h), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
            for g in record.maps.stack().astype(np.uint8)
        ]))
    return record.with_note(note, image=image, landmarks=landmarks, maps=maps)


# --------------------------------------------------------------------------
# dataset preparation


def prepare_dataset(manifest, out_dir, cfg: PreprocessConfig = PreprocessConfig(), dilation_kernel: int = 5,
                    diagnostics: list | None = None) -> Path:
    """Preprocess every entry, synthesize its morphology maps and write a new manifest.

    The output manifest carries a ``preprocessed`` block recording ``cfg`` so
    downstream loaders can skip preprocessing.
    """
    out_dir = Path(out_dir)
    records = [preprocess(r, cfg) for r in load_manifest(manifest, diagnostics)]
    maps_dir = out_dir / "maps"
    for rec in records:
        if rec.landmarks is not None:
            maps = synthesize_maps(rec.landmarks, (cfg.target_height, cfg.target_width), dilation_kernel)
            maps.save(maps_dir, rec.source_id, dilation_kernel, provenance=";".join(rec.provenance))
    meta = {"preprocessed": {**asdict(cfg), "dilation_kernel": dilation_kernel}}
    return save_manifest(records, out_dir, extra=meta)


def load_records(manifest, cfg: PreprocessConfig = PreprocessConfig(), split: str | None = None,
                 diagnostics: list | None = None) -> list[SampleRecord]:
    """Load a manifest and preprocess it unless it was already prepared with ``cfg``."""
    records = load_manifest(manifest, diagnostics)
    if split is not None:
        records = [r for r in records if r.split == split]
    done = manifest_info(manifest).get("preprocessed")
    if done is not None and all(done.get(k) == v for k, v in asdict(cfg).items()):
        return records
    return [preprocess(r, cfg) for r in records]


__all__ = [
    "AugmentDraw", "AugmentationConfig", "DataError", "PreprocessConfig", "SampleRecord",
    "augment", "augment_affine", "convert_challenge_csv", "crop_affine", "crop_box",
    "equalize_histogram", "load_manifest", "load_records", "manifest_info", "prepare_dataset",
    "preprocess", "read_landmark_csv", "save_manifest", "write_landmark_csv",
]
