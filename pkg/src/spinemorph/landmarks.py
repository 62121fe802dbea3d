"""Vertebral corner landmarks and Cobb angle triples.

Landmarks are stored as a ``(68, 2)`` float array of ``(x, y)`` pixel
coordinates, vertebra-major (17 vertebrae, top first), each vertebra listing
its corners as top-left, top-right, bottom-left, bottom-right. Pixel centres
sit on integer coordinates, matching OpenCV's convention.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_VERTEBRAE = 17
N_CORNERS = 4
N_POINTS = N_VERTEBRAE * N_CORNERS

TL, TR, BL, BR = 0, 1, 2, 3

ANGLE_NAMES = ("pt", "mt", "tl")


class LandmarkError(ValueError):
    """Raised when a landmark set violates its structural invariants."""


def as_points(landmarks) -> np.ndarray:
    """Return landmarks as a float64 ``(68, 2)`` array."""
    pts = landmarks.points if isinstance(landmarks, LandmarkSet) else landmarks
    pts = np.asarray(pts, dtype=np.float64)
    if pts.shape != (N_POINTS, 2):
        raise LandmarkError(f"expected {N_POINTS} points of shape (68, 2), got {pts.shape}")
    return pts


def swap_left_right(points: np.ndarray) -> np.ndarray:
    """Exchange left and right corner roles in every vertebra.

    Used after a horizontal reflection, where the anatomical left corner ends
    up on the right of the image.
    """
    v = as_points(points).reshape(N_VERTEBRAE, N_CORNERS, 2)
    return v[:, [TR, TL, BR, BL], :].reshape(N_POINTS, 2).copy()


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray
    image_width: int
    image_height: int

    def __post_init__(self):
        pts = as_points(self.points)
        if not np.all(np.isfinite(pts)):
            raise LandmarkError("landmark coordinates must be finite")
        object.__setattr__(self, "points", pts)

    def __eq__(self, other):
        if not isinstance(other, LandmarkSet):
            return NotImplemented
        return (
            self.image_width == other.image_width
            and self.image_height == other.image_height
            and np.array_equal(self.points, other.points)
        )

    @property
    def vertebrae(self) -> np.ndarray:
        """View of the points as ``(17, 4, 2)``."""
        return self.points.reshape(N_VERTEBRAE, N_CORNERS, 2)

    def check(self, bounds: bool = True) -> None:
        """Validate corner ordering, and optionally that points lie on the canvas.

        Corner order is checked in each vertebra's own frame so tilted
        vertebrae (up to 45 degrees) pass.
        """
        if bounds:
            x, y = self.points[:, 0], self.points[:, 1]
            bad = (x < 0) | (x >= self.image_width) | (y < 0) | (y >= self.image_height)
            if bad.any():
                k = int(np.flatnonzero(bad)[0])
                raise LandmarkError(
                    f"point {k} (vertebra {k // 4}) at {tuple(self.points[k])} lies outside "
                    f"{self.image_width}x{self.image_height} image"
                )
        for i, (tl, tr, bl, br) in enumerate(self.vertebrae):
            u = (tr + br) / 2 - (tl + bl) / 2
            norm = np.hypot(*u)
            if norm == 0:
                raise LandmarkError(f"vertebra {i} is degenerate")
            u = u / norm
            if u[0] < np.cos(np.pi / 4) - 1e-12:
                raise LandmarkError(f"vertebra {i}: left/right corners swapped or tilt above 45 degrees")
            v = np.array([-u[1], u[0]])
            if not (tl @ v < bl @ v and tr @ v < br @ v):
                raise LandmarkError(f"vertebra {i}: top corners are not above bottom corners")
            if not (tl @ u < tr @ u and bl @ u < br @ u):
                raise LandmarkError(f"vertebra {i}: left corners are not left of right corners")

    def replace(self, points=None, image_width=None, image_height=None) -> "LandmarkSet":
        return LandmarkSet(
            self.points if points is None else points,
            self.image_width if image_width is None else image_width,
            self.image_height if image_height is None else image_height,
        )


@dataclass(frozen=True)
class AngleTriple:
    """Proximal thoracic, main thoracic and thoracolumbar Cobb angles in degrees."""

    pt: float
    mt: float
    tl: float

    def __post_init__(self):
        for name in ANGLE_NAMES:
            value = float(getattr(self, name))
            if not 0.0 <= value < 180.0:
                raise ValueError(f"angle {name}={value} outside [0, 180)")
            object.__setattr__(self, name, value)

    def as_array(self) -> np.ndarray:
        return np.array([self.pt, self.mt, self.tl], dtype=np.float64)

    def as_dict(self) -> dict:
        return {"pt": self.pt, "mt": self.mt, "tl": self.tl}

    @classmethod
    def from_sequence(cls, values) -> "AngleTriple":
        pt, mt, tl = (float(v) for v in values)
        return cls(pt, mt, tl)
