"""Synthetic AP spine radiographs with corner landmarks.

Used for tests, demos and smoke training where the challenge data is not
available. Spines are smooth curves with a random lateral S/C deformation;
vertebrae are tilted perpendicular to the curve.
"""
from __future__ import annotations

import cv2
import numpy as np

from .dataset import SampleRecord
from .landmarks import N_VERTEBRAE, LandmarkSet
from .morphology import cobb_from_landmarks, find_self_intersection, region_outline


def random_landmarks(rng: np.random.Generator, shape=(512, 256), span=(0.08, 0.94),
                     amplitude: float | None = None, tilt_noise_deg: float = 1.5) -> np.ndarray:
    """Draw a ``(68, 2)`` landmark array for a plausible curved spine.

    Parameters
    ----------
    rng : numpy Generator
    shape : (height, width) of the canvas the spine should occupy
    span : vertical fraction of the canvas covered from top to bottom vertebra
    amplitude : lateral deviation as a fraction of width; drawn if None
    tilt_noise_deg : per-vertebra tilt jitter
    """
    h, w = shape
    top, bottom = span[0] * h, span[1] * h
    sizes = 1.0 + 0.045 * np.arange(N_VERTEBRAE)
    sizes *= rng.uniform(0.95, 1.05, N_VERTEBRAE)
    gap = 0.3
    unit = (bottom - top) / (sizes.sum() * (1 + gap) - gap * sizes[-1])
    heights = sizes * unit
    starts = top + np.concatenate([[0], np.cumsum(heights * (1 + gap))[:-1]])
    cy = starts + heights / 2

    if amplitude is None:
        amplitude = rng.uniform(0.0, 0.12)
    phase = rng.uniform(0, 2 * np.pi)
    freq = rng.uniform(0.6, 1.4)
    second = rng.uniform(-0.3, 0.3)

    def centre_x(y):
        t = (y - top) / (bottom - top)
        return w / 2 + amplitude * w * (np.sin(2 * np.pi * freq * t + phase) + second * np.sin(4 * np.pi * t))

    eps = 1e-3 * h
    slope = (centre_x(cy + eps) - centre_x(cy - eps)) / (2 * eps)
    tilt = -np.arctan(slope) + np.radians(rng.normal(0.0, tilt_noise_deg, N_VERTEBRAE))
    half_w = 0.5 * heights * rng.uniform(1.5, 1.8) * np.ones(N_VERTEBRAE)
    half_h = 0.5 * heights

    corners = np.array([[-1, -1], [1, -1], [-1, 1], [1, 1]], dtype=np.float64)
    pts = []
    for i in range(N_VERTEBRAE):
        c, s = np.cos(tilt[i]), np.sin(tilt[i])
        rot = np.array([[c, -s], [s, c]])
        local = corners * [half_w[i], half_h[i]]
        pts.append(local @ rot.T + [centre_x(cy[i]), cy[i]])
    return np.concatenate(pts)


def render_radiograph(points: np.ndarray, shape=(512, 256), rng: np.random.Generator | None = None,
                      noise: float = 8.0) -> np.ndarray:
    """Render a grayscale uint8 image with bright vertebral bodies on a dark body."""
    rng = np.random.default_rng(0) if rng is None else rng
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    body = 40 + 30 * np.exp(-(((xx - w / 2) / (0.35 * w)) ** 2))
    img = body + rng.normal(0, noise, shape)
    layer = np.zeros(shape, np.float32)
    scale = 16
    for quad in points.reshape(N_VERTEBRAE, 4, 2):
        poly = np.round(quad[[0, 1, 3, 2]] * scale).astype(np.int32)
        cv2.fillPoly(layer, [poly], float(rng.uniform(120, 170)), lineType=cv2.LINE_AA, shift=4)
    layer = cv2.GaussianBlur(layer, (0, 0), 1.2)
    img = np.clip(img + layer, 0, 255)
    return img.astype(np.uint8)


def synthetic_record(rng: np.random.Generator, source_id: str, shape=(512, 256), split: str = "train",
                     span=None, **kwargs) -> SampleRecord:
    """A complete labelled record whose angles come from its own landmarks."""
    h, w = shape
    if span is None:
        top = rng.uniform(0.05, 0.15)
        span = (top, rng.uniform(0.85, 0.95))
    # strongly tilted neighbours can cross the corner chains; redraw those
    for _ in range(100):
        pts = random_landmarks(rng, shape, span=span, **kwargs)
        if find_self_intersection(region_outline(pts)) is None:
            break
    else:
        raise RuntimeError("could not draw a non-intersecting spine outline")
    lm = LandmarkSet(pts, image_width=w, image_height=h)
    return SampleRecord(
        image=render_radiograph(pts, shape, rng),
        landmarks=lm,
        angles_deg=cobb_from_landmarks(lm),
        split=split,
        source_id=source_id,
        provenance=("synthetic",),
    )


def synthetic_dataset(n: int, seed: int = 0, shape=(512, 256), split: str = "train", prefix: str = "syn"):
    """``n`` synthetic records with ids ``{prefix}0000``, ``{prefix}0001``, ..."""
    rng = np.random.default_rng(seed)
    return [synthetic_record(rng, f"{prefix}{i:04d}", shape, split) for i in range(n)]
