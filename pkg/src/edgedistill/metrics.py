"""Segmentation quality metrics and the weighted distillation loss.

Segmentation maps are ``(H, W)`` integer arrays of class ids, probability
maps are ``(K, H, W)`` float arrays with per-pixel channel sums of one.
``weighted_ce_loss`` also accepts a taped rank-4 probability tensor, in
which case the loss is recorded for backpropagation.
"""

from __future__ import annotations

import numpy as np

from .tape import Tensor, _tape_of

PROB_FLOOR = 1e-12


def class_iou(pred: np.ndarray, label: np.ndarray, c: int) -> float:
    """Intersection-over-union of class ``c`` between two segmentation maps."""
    if pred.shape != label.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {label.shape}")
    p = pred == c
    l = label == c
    union = int(np.logical_or(p, l).sum())
    if union == 0:
        raise ValueError(f"class {c} absent from both maps; IoU undefined")
    return int(np.logical_and(p, l).sum()) / union


def mean_iou(pred: np.ndarray, label: np.ndarray) -> float:
    """Mean of per-class IoU over the classes present in ``label``.

    Classes that appear only in the prediction are not averaged over; they
    still penalize through the union terms of the label's classes.
    """
    classes = np.unique(label)
    return float(sum(class_iou(pred, label, int(c)) for c in classes) / len(classes))


def argmax_segmap(probs: np.ndarray) -> np.ndarray:
    """Collapse a (K, H, W) probability map to a class-id map."""
    return probs.argmax(axis=0).astype(np.uint8)


def weight_mask(label: np.ndarray, w: float = 5.0, r: int = 2) -> np.ndarray:
    """Per-pixel loss weights: ``w`` on and near non-background pixels, 1 elsewhere.

    "Near" is a Chebyshev-distance dilation of radius ``r`` around the
    non-background set.
    """
    if r < 0:
        raise ValueError("dilation radius must be >= 0")
    fg = label != 0
    if r > 0:
        h, wd = fg.shape
        padded = np.zeros((h + 2 * r, wd + 2 * r), dtype=bool)
        padded[r : r + h, r : r + wd] = fg
        win = np.lib.stride_tricks.sliding_window_view(padded, (2 * r + 1, 2 * r + 1))
        fg = win.any(axis=(2, 3))
    mask = np.ones(label.shape, dtype=np.float32)
    mask[fg] = w
    return mask


def _ce_pick(probs_khw: np.ndarray, label: np.ndarray) -> np.ndarray:
    h, w = label.shape
    return probs_khw[label.reshape(-1), np.arange(h * w) // w, np.arange(h * w) % w].reshape(h, w)


def weighted_ce_loss(probs, label: np.ndarray, mask: np.ndarray):
    """Mask-weighted pixel cross-entropy against hard labels.

    ``probs`` may be a plain ``(K, H, W)`` array (returns a float) or a taped
    rank-4 ``(1, K, H, W)`` tensor (returns a scalar tensor on the same tape).
    Normalization is by the mask sum, so rescaling every weight leaves the
    loss unchanged.
    """
    if isinstance(probs, Tensor):
        return _weighted_ce_taped(probs, label, mask)
    if probs.ndim == 4:
        probs = probs[0]
    if probs.shape[1:] != label.shape or label.shape != mask.shape:
        raise ValueError("probability/label/mask spatial dims disagree")
    picked = np.maximum(_ce_pick(probs, label), PROB_FLOOR)
    return float((mask * -np.log(picked)).sum() / mask.sum())


def _weighted_ce_taped(probs: Tensor, label: np.ndarray, mask: np.ndarray) -> Tensor:
    tape = _tape_of(probs)
    if probs.data.ndim != 4 or probs.data.shape[0] != 1:
        raise ValueError("taped loss expects a (1, K, H, W) probability tensor")
    if probs.data.shape[2:] != label.shape or label.shape != mask.shape:
        raise ValueError("probability/label/mask spatial dims disagree")
    h, w = label.shape
    raw = _ce_pick(probs.data[0], label)
    picked = np.maximum(raw, PROB_FLOOR)
    mask_sum = mask.sum(dtype=np.float64)
    loss = np.asarray(
        (mask.astype(np.float64) * -np.log(picked.astype(np.float64))).sum() / mask_sum,
        dtype=probs.data.dtype,
    ).reshape(1)

    def backward(g: np.ndarray) -> None:
        if probs.requires_grad:
            grad = np.zeros_like(probs.data)
            rows = label.reshape(-1)
            cols = np.arange(h * w)
            vals = -(mask.reshape(-1) / (picked.reshape(-1) * mask_sum)) * float(g.reshape(-1)[0])
            vals[raw.reshape(-1) < PROB_FLOOR] = 0.0  # clipped pixels are locally constant
            grad[0, rows, cols // w, cols % w] = vals.astype(probs.data.dtype)
            probs._accumulate(grad)

    return tape.record(loss, (probs,), backward)
