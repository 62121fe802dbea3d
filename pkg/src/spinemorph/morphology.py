"""Spine morphology maps and landmark-derived Cobb angles.

Three binary maps are built from the 68 corner landmarks:

* region: the filled outline running down the left corners and back up the
  right corners,
* centerline: the polyline through the 17 vertebra centroids,
* boundary: the two polylines through the left and right corner chains.

Centerline and boundary are dilated with a square structuring element; the
region is not.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy import ndimage

from .landmarks import (
    BL, BR, N_VERTEBRAE, TL, TR,
    AngleTriple, LandmarkError, as_points,
)

MAP_NAMES = ("region", "centerline", "boundary")


class OutlineError(LandmarkError):
    """The landmark outline crosses itself."""


@dataclass(frozen=True, eq=False)
class MorphologyMaps:
    region: np.ndarray
    centerline: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        shapes = {m.shape for m in (self.region, self.centerline, self.boundary)}
        if len(shapes) != 1 or len(next(iter(shapes))) != 2:
            raise ValueError(f"maps must be 2-D grids of one shape, got {shapes}")
        for name in MAP_NAMES:
            m = np.asarray(getattr(self, name))
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} map must be binary")
            object.__setattr__(self, name, m.astype(np.uint8))

    def __eq__(self, other):
        if not isinstance(other, MorphologyMaps):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in MAP_NAMES)

    @property
    def shape(self):
        return self.region.shape

    def stack(self) -> np.ndarray:
        """Maps as a float32 ``(3, H, W)`` array in region, centerline, boundary order."""
        return np.stack([self.region, self.centerline, self.boundary]).astype(np.float32)

    @classmethod
    def from_stack(cls, arr) -> "MorphologyMaps":
        arr = np.asarray(arr)
        return cls(*(arr[i] for i in range(3)))

    def save(self, directory, stem: str, dilation_kernel: int, provenance: str = "") -> dict:
        """Write the maps as 0/255 PNGs plus a JSON sidecar; return the sidecar dict."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name in MAP_NAMES:
            fname = f"{stem}_{name}.png"
            cv2.imwrite(str(directory / fname), getattr(self, name) * 255)
            files[name] = fname
        sidecar = {
            "files": files,
            "shape": list(self.shape),
            "dilation_kernel": int(dilation_kernel),
            "provenance": provenance,
        }
        (directory / f"{stem}_maps.json").write_text(json.dumps(sidecar, indent=2))
        return sidecar

    @classmethod
    def load(cls, directory, stem: str) -> "MorphologyMaps":
        directory = Path(directory)
        sidecar = json.loads((directory / f"{stem}_maps.json").read_text())
        grids = []
        for name in MAP_NAMES:
            img = cv2.imread(str(directory / sidecar["files"][name]), cv2.IMREAD_GRAYSCALE)
            if img is None:
                raise FileNotFoundError(directory / sidecar["files"][name])
            grids.append((img > 127).astype(np.uint8))
        return cls(*grids)


@dataclass(frozen=True)
class VertebraMidline:
    index: int
    left_mid: tuple
    right_mid: tuple
    direction: tuple


# --------------------------------------------------------------------------
# rasterization


def rasterize_segment(p0, p1) -> np.ndarray:
    """Integer Bresenham rasterization between two points.

    Endpoints are rounded to the nearest pixel. Returns ``(k, 2)`` array of
    ``(row, col)``.
    """
    x0, y0 = (int(round(v)) for v in p0)
    x1, y1 = (int(round(v)) for v in p1)
    dx, dy = abs(x1 - x0), -abs(y1 - y0)
    sx = 1 if x0 < x1 else -1
    sy = 1 if y0 < y1 else -1
    err = dx + dy
    out = []
    while True:
        out.append((y0, x0))
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy
    return np.array(out, dtype=np.int64)


def rasterize_polyline(points, shape) -> np.ndarray:
    """Draw an open polyline of ``(x, y)`` points into a new uint8 grid."""
    grid = np.zeros(shape, dtype=np.uint8)
    points = np.asarray(points, dtype=np.float64)
    h, w = shape
    for a, b in zip(points[:-1], points[1:]):
        rc = rasterize_segment(a, b)
        keep = (rc[:, 0] >= 0) & (rc[:, 0] < h) & (rc[:, 1] >= 0) & (rc[:, 1] < w)
        grid[rc[keep, 0], rc[keep, 1]] = 1
    return grid


def fill_polygon(vertices, shape) -> np.ndarray:
    """Scanline fill of a closed polygon with the even-odd rule.

    A pixel is set when its centre lies inside the polygon. Crossings use the
    half-open rule on edge endpoints so shared vertices count once.
    """
    v = np.asarray(vertices, dtype=np.float64)
    h, w = shape
    grid = np.zeros(shape, dtype=np.uint8)
    x0, y0 = v[:, 0], v[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    r_lo = max(int(np.ceil(v[:, 1].min())), 0)
    r_hi = min(int(np.floor(v[:, 1].max())), h - 1)
    for row in range(r_lo, r_hi + 1):
        active = ((y0 <= row) & (y1 > row)) | ((y1 <= row) & (y0 > row))
        if not active.any():
            continue
        t = (row - y0[active]) / (y1[active] - y0[active])
        xs = np.sort(x0[active] + t * (x1[active] - x0[active]))
        for xa, xb in zip(xs[0::2], xs[1::2]):
            c0 = max(int(np.ceil(xa)), 0)
            c1 = min(int(np.floor(xb)), w - 1)
            if c1 >= c0:
                grid[row, c0:c1 + 1] = 1
    return grid


def dilate(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Binary dilation with a square ``kernel x kernel`` structuring element."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"dilation kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return grid.copy()
    return ndimage.binary_dilation(grid, structure=np.ones((kernel, kernel), bool)).astype(np.uint8)


# --------------------------------------------------------------------------
# outline geometry


def left_chain(landmarks) -> np.ndarray:
    """Left corners top to bottom: TL0, BL0, TL1, ..., BL16."""
    v = as_points(landmarks).reshape(N_VERTEBRAE, 4, 2)
    return v[:, [TL, BL], :].reshape(-1, 2)


def right_chain(landmarks) -> np.ndarray:
    """Right corners top to bottom: TR0, BR0, TR1, ..., BR16."""
    v = as_points(landmarks).reshape(N_VERTEBRAE, 4, 2)
    return v[:, [TR, BR], :].reshape(-1, 2)


def region_outline(landmarks) -> np.ndarray:
    """Closed outline: down the left corners, then up the right corners."""
    return np.concatenate([left_chain(landmarks), right_chain(landmarks)[::-1]])


def centroids(landmarks) -> np.ndarray:
    return as_points(landmarks).reshape(N_VERTEBRAE, 4, 2).mean(axis=1)


def _orient(a, b, c):
    return (b[..., 0] - a[..., 0]) * (c[..., 1] - a[..., 1]) - (b[..., 1] - a[..., 1]) * (c[..., 0] - a[..., 0])


def find_self_intersection(outline: np.ndarray):
    """Return ``(i, j)`` edge indices of the first proper crossing, or ``None``.

    Edge ``k`` joins vertex ``k`` to vertex ``k + 1`` (wrapping). Adjacent
    edges are skipped since they always share a vertex.
    """
    n = len(outline)
    a = outline
    b = np.roll(outline, -1, axis=0)
    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    d1 = _orient(a[i], b[i], a[j])
    d2 = _orient(a[i], b[i], b[j])
    d3 = _orient(a[j], b[j], a[i])
    d4 = _orient(a[j], b[j], b[i])
    crossing = (d1 * d2 < 0) & (d3 * d4 < 0)
    if not crossing.any():
        return None
    k = int(np.flatnonzero(crossing)[0])
    return int(i[k]), int(j[k])


def _outline_vertebra(k: int) -> int:
    # outline vertex k: left chain holds vertebra k // 2, right chain runs upward
    n_side = 2 * N_VERTEBRAE
    return k // 2 if k < n_side else N_VERTEBRAE - 1 - (k - n_side) // 2


def synthesize_maps(landmarks, shape=(512, 256), dilation_kernel: int = 5) -> MorphologyMaps:
    """Build region, centerline and boundary maps from corner landmarks.

    Parameters
    ----------
    landmarks : LandmarkSet or array_like (68, 2)
        Corner landmarks in the coordinate frame of the target grid.
    shape : tuple of int
        ``(height, width)`` of the output grids.
    dilation_kernel : int
        Odd side length of the square element used to thicken the centerline
        and boundary curves.

    Raises
    ------
    OutlineError
        If the left and right landmark chains cross.
    """
    pts = as_points(landmarks)
    outline = region_outline(pts)
    hit = find_self_intersection(outline)
    if hit is not None:
        raise OutlineError(
            f"landmark outline self-intersects between vertebra {_outline_vertebra(hit[0])} "
            f"and vertebra {_outline_vertebra(hit[1])}"
        )
    region = fill_polygon(outline, shape)
    centerline = rasterize_polyline(centroids(pts), shape)
    boundary = rasterize_polyline(left_chain(pts), shape) | rasterize_polyline(right_chain(pts), shape)
    return MorphologyMaps(
        region=region,
        centerline=dilate(centerline, dilation_kernel),
        boundary=dilate(boundary, dilation_kernel),
    )


# --------------------------------------------------------------------------
# Cobb angles


def vertebra_midlines(landmarks) -> list[VertebraMidline]:
    """Per-vertebra midline from the left-side midpoint to the right-side midpoint."""
    v = as_points(landmarks).reshape(N_VERTEBRAE, 4, 2)
    out = []
    for i, (tl, tr, bl, br) in enumerate(v):
        left = (tl + bl) / 2
        right = (tr + br) / 2
        d = right - left
        norm = np.hypot(d[0], d[1])
        if norm == 0:
            raise LandmarkError(f"vertebra {i} is degenerate: zero-length midline")
        out.append(VertebraMidline(i, tuple(left), tuple(right), tuple(d / norm)))
    return out


def pairwise_tilt(landmarks) -> np.ndarray:
    """Symmetric ``(17, 17)`` matrix of angles in degrees between vertebra midlines."""
    d = np.array([m.direction for m in vertebra_midlines(landmarks)])
    dot = np.clip(d @ d.T, -1.0, 1.0)
    cross = np.abs(d[:, None, 0] * d[None, :, 1] - d[:, None, 1] * d[None, :, 0])
    # atan2(|cross|, dot) equals arccos(dot) for unit vectors but keeps full
    # precision near 0 degrees
    return np.degrees(np.arctan2(cross, dot))


def cobb_from_landmarks(landmarks) -> AngleTriple:
    """Cobb angles from corner landmarks using the maximal pairwise tilt rule.

    MT is the largest angle between any two vertebra midlines. With ``(i, j)``
    the pair achieving it (smallest ``i`` then ``j`` on ties), PT is the angle
    between the top vertebra and ``i`` and TL the angle between ``j`` and the
    bottom vertebra.
    """
    a = pairwise_tilt(landmarks)
    iu, ju = np.triu_indices(N_VERTEBRAE, k=1)
    k = int(np.argmax(a[iu, ju]))
    i, j = int(iu[k]), int(ju[k])
    return AngleTriple(pt=a[0, i], mt=a[i, j], tl=a[j, N_VERTEBRAE - 1])
