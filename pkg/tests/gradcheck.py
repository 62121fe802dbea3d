"""Analytic versus finite-difference gradient checks for the loss functions."""
import numpy as np
import torch

from spinemorph.criteria import edge_maps
from oracles import finite_difference, window_gap


def analytic_grad(fn, g, x):
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    fn(torch.as_tensor(g, dtype=torch.float64), xt).backward()
    return xt.grad.numpy()


def grad_rel_error(fn, g, x, h):
    ana = analytic_grad(fn, g, x)
    num = finite_difference(lambda v: float(fn(torch.as_tensor(g), torch.as_tensor(v))), x.copy(), h)
    return np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12)


def map_point(r, h=1e-3):
    """Ground truth and a prediction in [0.2, 0.8] away from max-pool ties."""
    shape = (2, 6, 6)
    n = int(np.prod(shape))
    levels = np.linspace(0.2, 0.8, n)
    while True:
        g = (r.random(shape) < 0.5).astype(np.float64)
        # distinct, jittered levels keep pooling windows free of near-ties
        p = (r.permutation(levels) + r.uniform(-0.002, 0.002, n)).clip(0.2, 0.8).reshape(shape)
        edge = edge_maps(torch.as_tensor(p))[0].numpy()
        if window_gap(1.0 - p, 3) > 4 * h and window_gap(edge, 5) > 4 * h:
            return g, p


def angle_point(r, fn_name):
    while True:
        g = r.uniform(1.0, 170.0, (3, 3))
        p = g + r.choice([-1, 1], g.shape) * r.uniform(0.1, 5.0, g.shape)
        if fn_name != "cmae":
            return g, p
        d = np.radians(g - p)
        mean = np.degrees(np.arctan2(np.sin(d).sum(1), np.cos(d).sum(1)))
        if np.abs(mean).min() > 0.1:
            return g, p
