"""Independent reference implementations used as test oracles.

These use plain loops, the math module or third-party geometry rather than
the package's own torch code paths.
"""
from __future__ import annotations

import math

import numpy as np
from matplotlib.path import Path as MplPath


def brute_edge(mask: np.ndarray, theta0: int = 3) -> np.ndarray:
    """Foreground pixels with a background pixel inside their in-image window."""
    h, w = mask.shape
    r = theta0 // 2
    out = np.zeros_like(mask, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            if mask[y, x] != 1:
                continue
            win = mask[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
            out[y, x] = 1.0 if (win == 0).any() else 0.0
    return out


def brute_max_filter(grid: np.ndarray, window: int) -> np.ndarray:
    """Window maximum with out-of-image cells counted as 0."""
    h, w = grid.shape
    r = window // 2
    out = np.zeros_like(grid, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            win = grid[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1]
            full = win.size == window * window
            out[y, x] = win.max() if full else max(win.max(), 0.0)
    return out


def bf1_numpy(gt: np.ndarray, pred: np.ndarray, theta0: int = 3, theta1: int = 5, eps: float = 1e-7) -> float:
    """Batch BF1 for binary ``(N, H, W)`` stacks via the brute-force edge oracle."""
    ge = np.stack([brute_edge(g, theta0) for g in gt])
    pe = np.stack([brute_edge(p, theta0) for p in pred])
    gx = np.stack([brute_max_filter(e, theta1) for e in ge])
    px = np.stack([brute_max_filter(e, theta1) for e in pe])
    if ge.sum() == 0 and pe.sum() == 0:
        return 1.0
    if ge.sum() == 0 or pe.sum() == 0:
        return 0.0
    pre = (pe * gx).sum() / (pe.sum() + eps)
    rec = (ge * px).sum() / (ge.sum() + eps)
    return 2 * pre * rec / (pre + rec + eps)


def dice_numpy(gt: np.ndarray, pred: np.ndarray) -> float:
    den = float(gt.sum() + pred.sum())
    return 1.0 if den == 0 else 2.0 * float((gt * pred).sum()) / den


def smape_ref(gt, pred, eps=1e-30) -> float:
    vals = []
    for g, p in zip(gt, pred):
        num = sum(abs(a - b) for a, b in zip(g, p))
        den = sum(abs(a + b + eps) for a, b in zip(g, p))
        vals.append(num / den)
    return 100.0 * sum(vals) / len(vals)


def mae_ref(gt, pred) -> float:
    diffs = [abs(a - b) for g, p in zip(gt, pred) for a, b in zip(g, p)]
    return sum(diffs) / len(diffs)


def cmae_ref(gt, pred) -> float:
    vals = []
    for g, p in zip(gt, pred):
        d = [math.radians(a - b) for a, b in zip(g, p)]
        vals.append(abs(math.degrees(math.atan2(sum(map(math.sin, d)), sum(map(math.cos, d))))))
    return sum(vals) / len(vals)


def distances_ref(gt, pred):
    ed = md = cd = 0.0
    for g, p in zip(gt, pred):
        d = [abs(a - b) for a, b in zip(g, p)]
        ed += math.sqrt(sum(v * v for v in d))
        md += sum(d)
        cd += max(d)
    n = len(gt)
    return ed / n, md / n, cd / n


def inside_polygon(vertices: np.ndarray, points_xy: np.ndarray) -> np.ndarray:
    """Point-in-polygon test via matplotlib's path containment."""
    v = np.asarray(vertices, dtype=np.float64)
    # closed=True treats the final vertex as a CLOSEPOLY marker, so repeat the first one
    return MplPath(np.vstack([v, v[:1]]), closed=True).contains_points(points_xy)


def cobb_brute(points: np.ndarray):
    """Cobb triple from explicit loops over all vertebra pairs."""
    v = np.asarray(points, dtype=np.float64).reshape(17, 4, 2)
    dirs = []
    for tl, tr, bl, br in v:
        d = (tr + br) / 2 - (tl + bl) / 2
        dirs.append(d / math.hypot(*d))

    def ang(i, j):
        dot = max(-1.0, min(1.0, float(dirs[i] @ dirs[j])))
        return math.degrees(math.acos(dot))

    best, pair = -1.0, (0, 0)
    for i in range(17):
        for j in range(i + 1, 17):
            a = ang(i, j)
            if a > best + 1e-12:
                best, pair = a, (i, j)
    i, j = pair
    return ang(0, i), best, ang(j, 16)


def stacked_squares(tilts_deg=None, side: float = 10.0, gap: float = 4.0, x0: float = 60.0, y0: float = 20.0):
    """17 square vertebrae stacked vertically, each rotated about its own centre."""
    tilts = np.zeros(17) if tilts_deg is None else np.asarray(tilts_deg, dtype=np.float64)
    half = side / 2
    local = np.array([[-half, -half], [half, -half], [-half, half], [half, half]])
    pts = []
    for i, t in enumerate(np.radians(tilts)):
        c, s = math.cos(t), math.sin(t)
        rot = np.array([[c, -s], [s, c]])
        centre = np.array([x0, y0 + i * (side + gap)])
        pts.append(local @ rot.T + centre)
    return np.concatenate(pts)


def finite_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + h
        up = f(x)
        flat[k] = orig - h
        down = f(x)
        flat[k] = orig
        gflat[k] = (up - down) / (2 * h)
    return g


def window_gap(grid: np.ndarray, window: int) -> float:
    """Smallest gap between the two largest values over all zero-padded windows."""
    r = window // 2
    padded = np.pad(grid, ((0, 0), (r, r), (r, r)))
    wins = np.lib.stride_tricks.sliding_window_view(padded, (window, window), axis=(1, 2))
    flat = np.sort(wins.reshape(*wins.shape[:3], -1), axis=-1)
    return float((flat[..., -1] - flat[..., -2]).min())
