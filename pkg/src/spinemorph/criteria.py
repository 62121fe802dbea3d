"""Segmentation and regression losses and evaluation metrics.

All functions accept torch tensors (or array-likes, converted to float64
tensors) and are differentiable with respect to the prediction. Angles are in
degrees throughout; trigonometric terms convert internally.

Segmentation maps are batches shaped ``(N, H, W)`` or ``(N, 1, H, W)``;
sums run over the whole batch, so a batch behaves like one large sample.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F

THETA0 = 3
THETA1 = 5
BF1_EPS = 1e-7
SMAPE_EPS = 1e-30

REG_TERMS = ("smape", "mae", "cmae")


def _as_tensor(x, like=None):
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def _pair(gt, pred):
    pred = _as_tensor(pred)
    gt = _as_tensor(gt, pred).to(pred.dtype)
    if gt.shape != pred.shape:
        raise ValueError(f"shape mismatch: ground truth {tuple(gt.shape)} vs prediction {tuple(pred.shape)}")
    return gt, pred


# --------------------------------------------------------------------------
# region overlap


def dice_from_sums(overlap, total) -> torch.Tensor:
    """DSC from ``sum(G P)`` and ``sum(G + P)``; an empty pair counts as a perfect match."""
    overlap, total = torch.as_tensor(overlap), torch.as_tensor(total)
    safe = torch.where(total > 0, total, torch.ones_like(total))
    return torch.where(total > 0, 2.0 * overlap / safe, torch.ones_like(total))


def dice_coefficient(gt, pred) -> torch.Tensor:
    """``2 sum(G P) / sum(G + P)`` over the whole batch."""
    gt, pred = _pair(gt, pred)
    return dice_from_sums((gt * pred).sum(), (gt + pred).sum())


def dice_loss(gt, pred) -> torch.Tensor:
    return 1.0 - dice_coefficient(gt, pred)


# --------------------------------------------------------------------------
# boundaries


def max_pool_same(x: torch.Tensor, window: int) -> torch.Tensor:
    """Stride-1 max pooling over the last two axes, zero padded to keep the shape."""
    shape = x.shape
    flat = x.reshape(-1, 1, shape[-2], shape[-1])
    pad = window // 2
    flat = F.pad(flat, (pad, pad, pad, pad), value=0.0)
    return F.max_pool2d(flat, window, stride=1).reshape(shape)


def edge_maps(mask, theta0: int = THETA0, theta1: int = THETA1):
    """Edge and extended edge of a (soft) mask via max pooling.

    ``edge = maxpool(1 - M, theta0) - (1 - M)``; for a binary mask this marks
    foreground pixels with a background pixel in their ``theta0 x theta0``
    neighbourhood. ``extended = maxpool(edge, theta1)``.
    """
    m = _as_tensor(mask)
    inv = 1.0 - m
    edge = max_pool_same(inv, theta0) - inv
    return edge, max_pool_same(edge, theta1)


def boundary_sums(gt, pred, theta0: int = THETA0, theta1: int = THETA1):
    """``(sum(Pe G_ext), sum(Pe), sum(Ge P_ext), sum(Ge))`` for a batch."""
    gt, pred = _pair(gt, pred)
    g_e, g_ext = edge_maps(gt, theta0, theta1)
    p_e, p_ext = edge_maps(pred, theta0, theta1)
    return (p_e * g_ext).sum(), p_e.sum(), (g_e * p_ext).sum(), g_e.sum()


def bf1_from_sums(p_hit, p_sum, g_hit, g_sum, return_parts: bool = False):
    """BF1 from edge sums. Edge-free pairs score 1; if only one side has an edge, 0."""
    p_hit, p_sum, g_hit, g_sum = (torch.as_tensor(v) for v in (p_hit, p_sum, g_hit, g_sum))
    pre = p_hit / (p_sum + BF1_EPS)
    rec = g_hit / (g_sum + BF1_EPS)
    bf1 = 2.0 * pre * rec / (pre + rec + BF1_EPS)
    one, zero = torch.ones_like(bf1), torch.zeros_like(bf1)
    p_empty, g_empty = p_sum <= 0, g_sum <= 0
    bf1 = torch.where(p_empty & g_empty, one, torch.where(p_empty | g_empty, zero, bf1))
    if return_parts:
        return bf1, pre, rec
    return bf1


def bf1_score(gt, pred, theta0: int = THETA0, theta1: int = THETA1, return_parts: bool = False):
    """Boundary F1 between ground-truth and predicted masks.

    Precision is the share of predicted edge mass inside the extended
    ground-truth edge; recall is the converse.
    """
    return bf1_from_sums(*boundary_sums(gt, pred, theta0, theta1), return_parts=return_parts)


def boundary_loss(gt, pred, theta0: int = THETA0, theta1: int = THETA1) -> torch.Tensor:
    return 1.0 - bf1_score(gt, pred, theta0, theta1)


def joint_seg_loss(gt, pred, use_boundary: bool = True):
    """Mean over the three map channels of dice loss plus boundary loss.

    ``gt`` and ``pred`` are ``(N, 3, H, W)``. Returns ``(loss, parts)`` where
    ``parts`` maps ``dice_<k>`` / ``boundary_<k>`` for channel ``k`` in
    region, centerline, boundary to detached floats.
    """
    gt, pred = _pair(gt, pred)
    if gt.ndim != 4 or gt.shape[1] != 3:
        raise ValueError(f"expected (N, 3, H, W) maps, got {tuple(gt.shape)}")
    names = ("region", "centerline", "boundary")
    total = 0.0
    parts = {}
    for k, name in enumerate(names):
        d = dice_loss(gt[:, k], pred[:, k])
        parts[f"dice_{name}"] = float(d.detach())
        term = d
        if use_boundary:
            b = boundary_loss(gt[:, k], pred[:, k])
            parts[f"boundary_{name}"] = float(b.detach())
            term = term + b
        total = total + term
    return total / 3.0, parts


# --------------------------------------------------------------------------
# angle regression


def _angles(gt, pred):
    gt, pred = _pair(gt, pred)
    if gt.ndim == 1:
        gt, pred = gt[None], pred[None]
    if gt.ndim != 2 or gt.shape[0] < 1:
        raise ValueError(f"expected (N, 3) angle batches, got {tuple(gt.shape)}")
    return gt, pred


def smape(gt, pred, eps: float = SMAPE_EPS, percent: bool = True) -> torch.Tensor:
    """Symmetric mean absolute percentage error over each sample's angles.

    ``mean_i sum_j |G - P| / sum_j |G + P + eps|``, times 100 when ``percent``.
    """
    gt, pred = _angles(gt, pred)
    ratio = (gt - pred).abs().sum(dim=1) / (gt + pred + eps).abs().sum(dim=1)
    out = ratio.mean()
    return out * 100.0 if percent else out


def mae(gt, pred) -> torch.Tensor:
    gt, pred = _angles(gt, pred)
    return (gt - pred).abs().mean()


def cmae(gt, pred) -> torch.Tensor:
    """Circular mean absolute error in degrees.

    Per sample, the circular mean of the three angle differences is taken via
    ``atan2(sum sin, sum cos)``; its magnitude is averaged over the batch.
    """
    gt, pred = _angles(gt, pred)
    diff = torch.deg2rad(gt - pred)
    mean = torch.atan2(torch.sin(diff).sum(dim=1), torch.cos(diff).sum(dim=1))
    return torch.rad2deg(mean.abs()).mean()


def joint_reg_loss(gt, pred, terms=REG_TERMS):
    """Sum of the selected regression terms.

    SMAPE enters as a fraction rather than a percentage so it stays on the
    scale of the degree-valued terms. Returns ``(loss, parts)`` with every
    term evaluated for logging, selected or not.
    """
    unknown = set(terms) - set(REG_TERMS)
    if unknown or not terms:
        raise ValueError(f"loss terms must be a nonempty subset of {REG_TERMS}, got {terms}")
    values = {
        "smape": smape(gt, pred, percent=False),
        "mae": mae(gt, pred),
        "cmae": cmae(gt, pred),
    }
    loss = sum(values[t] for t in REG_TERMS if t in terms)
    return loss, {k: float(v.detach()) for k, v in values.items()}


def distance_metrics(gt, pred):
    """Mean Euclidean, Manhattan and Chebyshev distances between angle triples."""
    gt, pred = _angles(gt, pred)
    d = (gt - pred).abs()
    ed = torch.sqrt((d ** 2).sum(dim=1)).mean()
    md = d.sum(dim=1).mean()
    cd = d.max(dim=1).values.mean()
    return ed, md, cd


def regression_metrics(gt, pred) -> dict:
    """All six angle metrics as floats: MAE, SMAPE (percent), CMAE, ED, MD, CD."""
    gt = _as_tensor(gt).to(torch.float64)
    pred = _as_tensor(pred).to(torch.float64)
    ed, md, cd = distance_metrics(gt, pred)
    return {
        "mae": float(mae(gt, pred)),
        "smape": float(smape(gt, pred)),
        "cmae": float(cmae(gt, pred)),
        "ed": float(ed),
        "md": float(md),
        "cd": float(cd),
    }


def segmentation_metrics(gt, pred, threshold: float = 0.5) -> dict:
    """Per-channel DSC and BF1 in percent for ``(N, 3, H, W)`` maps.

    Predictions are binarized at ``threshold`` first.
    """
    gt = _as_tensor(gt).to(torch.float64)
    pred = (_as_tensor(pred) >= threshold).to(torch.float64)
    out = {}
    for k, name in enumerate(("region", "centerline", "boundary")):
        out[f"dsc_{name}"] = 100.0 * float(dice_coefficient(gt[:, k], pred[:, k]))
        out[f"bf1_{name}"] = 100.0 * float(bf1_score(gt[:, k], pred[:, k]))
    return out


__all__ = [
    "THETA0", "THETA1", "REG_TERMS", "bf1_from_sums", "bf1_score", "boundary_loss", "boundary_sums",
    "cmae", "dice_coefficient", "dice_from_sums",
    "dice_loss", "distance_metrics", "edge_maps", "joint_reg_loss", "joint_seg_loss", "mae",
    "max_pool_same", "regression_metrics", "segmentation_metrics", "smape",
]
