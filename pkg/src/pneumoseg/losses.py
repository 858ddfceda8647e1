"""Segmentation losses (BCE, soft Dice, their sum) and overlap metrics.

Losses take predicted probabilities ``p`` as a Tensor and ground truth ``y``
as an array of {0, 1}; they are differentiable in ``p``. Metrics take binary
masks and score the both-empty case as 1.0.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, record

EPS = 1e-7
SMOOTH = 1.0


def _target(p: Tensor, y):
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y.shape != p.shape:
        raise ShapeError(f"prediction shape {p.shape} does not match target shape {y.shape}")
    return y.astype(p.dtype, copy=False)


def bce(p: Tensor, y, eps: float = EPS) -> Tensor:
    """Mean binary cross-entropy over all elements, with p clamped to [eps, 1-eps]."""
    y = _target(p, y)
    n = p.size
    pc = np.clip(p.data, eps, 1 - eps)
    loss = -np.mean(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    result = Tensor(np.asarray(loss, dtype=p.dtype))

    def backward(g):
        inside = (p.data >= eps) & (p.data <= 1 - eps)
        return (g * inside * ((1 - y) / (1 - pc) - y / pc) / n,)

    record("bce", (p,), result, backward)
    return result


def dice_loss(p: Tensor, y, smooth: float = SMOOTH) -> Tensor:
    """Soft Dice loss 1 - (2*sum(p*y) + smooth) / (sum(p) + sum(y) + smooth)."""
    y = _target(p, y)
    inter = float(np.sum(p.data * y, dtype=np.float64))
    denom = float(np.sum(p.data, dtype=np.float64) + np.sum(y, dtype=np.float64)) + smooth
    numer = 2 * inter + smooth
    result = Tensor(np.asarray(1 - numer / denom, dtype=p.dtype))

    def backward(g):
        # d/dp of -(numer/denom) = -(2y*denom - numer) / denom^2
        return (g * (numer - 2 * y * denom) / denom**2,)

    record("dice_loss", (p,), result, backward)
    return result


def bce_dice(p: Tensor, y) -> Tensor:
    return bce(p, y) + dice_loss(p, y)


def _binary_pair(pred, true):
    pred = np.asarray(pred).astype(bool)
    true = np.asarray(true).astype(bool)
    if pred.shape != true.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    return pred, true


def iou(pred, true) -> float:
    pred, true = _binary_pair(pred, true)
    union = np.count_nonzero(pred | true)
    if union == 0:
        return 1.0
    return np.count_nonzero(pred & true) / union


def dsc(pred, true) -> float:
    pred, true = _binary_pair(pred, true)
    total = np.count_nonzero(pred) + np.count_nonzero(true)
    if total == 0:
        return 1.0
    return 2 * np.count_nonzero(pred & true) / total


def mean_dsc(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_dsc of an empty list")
    return float(np.mean([dsc(p, t) for p, t in pairs]))


def mean_iou(pairs) -> float:
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_iou of an empty list")
    return float(np.mean([iou(p, t) for p, t in pairs]))
