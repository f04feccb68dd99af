"""Supervision losses: dice, focal (plus the Mixup variant), centerness BCE,
IoU box regression, and the two box-supervised mask losses (projection and
color-pairwise).

All functions are pure and operate on numpy arrays in float64. The empty-set
conventions (return 0) and the log clamp live in LossConfig.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import validate_box
from .grid import neighbor_edges
from .numerics import sigmoid, similarity_from_sqdist


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    pair_tau: float = 0.3
    color_kappa: float = 2.0
    mixup_beta: float = 2.0
    dice_epsilon: float = 1e-8
    log_clamp: float = 1e-6
    # "selected" divides the pairwise loss by the number of edges that pass
    # the color-similarity gate; "all_in_box" divides by every in-box edge.
    pair_normalizer: str = "selected"

    def validate(self):
        for name in ("lambda1", "lambda2", "lambda3", "focal_alpha",
                     "focal_gamma", "color_kappa", "mixup_beta",
                     "dice_epsilon", "log_clamp"):
            if getattr(self, name) < 0:
                raise ValueError(f"losses.{name}: must be non-negative")
        if not 0.0 < self.pair_tau <= 1.0:
            raise ValueError(f"losses.pair_tau: must be in (0, 1], got {self.pair_tau}")
        if self.pair_normalizer not in ("selected", "all_in_box"):
            raise ValueError(
                f"losses.pair_normalizer: expected 'selected' or 'all_in_box', "
                f"got {self.pair_normalizer!r}"
            )
        return self


def dice_loss(pred, target, epsilon=1e-8):
    """1 - 2*sum(p*q) / (sum(p^2) + sum(q^2) + eps), in [0, 1]."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"dice_loss: shape mismatch {pred.shape} vs {target.shape}")
    num = 2.0 * float(np.sum(pred * target))
    den = float(np.sum(pred * pred)) + float(np.sum(target * target)) + epsilon
    return 1.0 - num / den


def dice_loss_grad(pred, target, epsilon=1e-8):
    """d(dice_loss)/d(pred), same shape as pred."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    num = 2.0 * float(np.sum(pred * target))
    den = float(np.sum(pred * pred)) + float(np.sum(target * target)) + epsilon
    return (2.0 * pred * num - 2.0 * target * den) / (den * den)


def focal_loss(logit, target, alpha=0.25, gamma=2.0, log_clamp=1e-6):
    """Per-element sigmoid focal loss; broadcasts over array inputs.

    p_t is the probability of the true side; loss is
    -alpha_t * (1 - p_t)^gamma * log(max(p_t, log_clamp)).
    """
    logit = np.asarray(logit, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = sigmoid(logit)
    p_t = target * p + (1.0 - target) * (1.0 - p)
    alpha_t = target * alpha + (1.0 - target) * (1.0 - alpha)
    out = -alpha_t * (1.0 - p_t) ** gamma * np.log(np.maximum(p_t, log_clamp))
    return float(out) if out.ndim == 0 else out


def focal_loss_grad(logit, target, alpha=0.25, gamma=2.0, log_clamp=1e-6):
    """d(focal_loss)/d(logit), elementwise; the clamped log region freezes
    the log factor (its subgradient there is 0)."""
    logit = np.asarray(logit, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = sigmoid(logit)
    p_t = target * p + (1.0 - target) * (1.0 - p)
    alpha_t = target * alpha + (1.0 - target) * (1.0 - alpha)
    log_pt = np.log(np.maximum(p_t, log_clamp))
    one_minus = 1.0 - p_t
    if gamma == 0.0:
        dldpt = np.where(p_t > log_clamp, -alpha_t / p_t, 0.0)
    else:
        dldpt = alpha_t * gamma * one_minus ** (gamma - 1.0) * log_pt
        dldpt = dldpt - np.where(p_t > log_clamp, alpha_t * one_minus ** gamma / p_t, 0.0)
    dptdz = (2.0 * target - 1.0) * p * (1.0 - p)
    out = dldpt * dptdz
    return float(out) if out.ndim == 0 else out


def mixup_focal_loss(feat_i, feat_j, y_i, y_j, lam, classifier,
                     alpha=0.25, gamma=2.0, log_clamp=1e-6):
    """Focal loss on the lam-mixed feature against both labels.

    h = lam*feat_i + (1-lam)*feat_j; logits = classifier^T h; the result is
    lam * sum_c FL(logits_c, y_i_c) + (1-lam) * sum_c FL(logits_c, y_j_c).
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixup_focal_loss: lam must be in [0, 1], got {lam}")
    feat_i = np.asarray(feat_i, dtype=np.float64)
    feat_j = np.asarray(feat_j, dtype=np.float64)
    classifier = np.asarray(classifier, dtype=np.float64)
    if feat_i.shape != feat_j.shape or classifier.shape[0] != feat_i.shape[0]:
        raise ValueError(
            f"mixup_focal_loss: shape mismatch features {feat_i.shape}/"
            f"{feat_j.shape} vs classifier {classifier.shape}"
        )
    h = lam * feat_i + (1.0 - lam) * feat_j
    logits = classifier.T @ h
    li = np.sum(focal_loss(logits, np.asarray(y_i, dtype=np.float64),
                           alpha, gamma, log_clamp))
    lj = np.sum(focal_loss(logits, np.asarray(y_j, dtype=np.float64),
                           alpha, gamma, log_clamp))
    return float(lam * li + (1.0 - lam) * lj)


def full_mask_loss(pred_masks, gt_masks, fg_indicator, epsilon=1e-8):
    """Mean dice loss over foreground locations; 0 when there are none."""
    fg = [i for i, f in enumerate(fg_indicator) if f]
    if not fg:
        return 0.0
    total = sum(dice_loss(pred_masks[i], gt_masks[i], epsilon) for i in fg)
    return total / len(fg)


def projection_loss(pred_mask, gt_box_mask, epsilon=1e-8):
    """Mean of dice losses between the per-axis max projections."""
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    gt_box_mask = np.asarray(gt_box_mask, dtype=np.float64)
    if pred_mask.shape != gt_box_mask.shape:
        raise ValueError(
            f"projection_loss: shape mismatch {pred_mask.shape} vs {gt_box_mask.shape}"
        )
    loss_x = dice_loss(pred_mask.max(axis=0), gt_box_mask.max(axis=0), epsilon)
    loss_y = dice_loss(pred_mask.max(axis=1), gt_box_mask.max(axis=1), epsilon)
    return 0.5 * (loss_x + loss_y)


def pairwise_box_loss(pred_mask, color_map, gt_box_mask, tau=0.3,
                      color_kappa=2.0, log_clamp=1e-6, normalizer="selected"):
    """Color-affinity pairwise loss over 8-neighbor edges touching the GT box.

    P(e) = m_i*m_j + (1-m_i)(1-m_j); edges with color similarity below tau are
    dropped; returns -mean(log P) over the selected edges, 0 if none survive.
    """
    pred_mask = np.asarray(pred_mask, dtype=np.float64)
    color_map = np.asarray(color_map, dtype=np.float64)
    gt_box_mask = np.asarray(gt_box_mask, dtype=np.float64)
    h, w = pred_mask.shape
    if color_map.shape != (h, w, 3) or gt_box_mask.shape != (h, w):
        raise ValueError(
            f"pairwise_box_loss: shape mismatch mask {pred_mask.shape}, "
            f"color {color_map.shape}, box {gt_box_mask.shape}"
        )
    ra, ca, rb, cb = neighbor_edges(h, w)
    in_box = (gt_box_mask[ra, ca] > 0) | (gt_box_mask[rb, cb] > 0)
    if not in_box.any():
        return 0.0
    ra, ca, rb, cb = ra[in_box], ca[in_box], rb[in_box], cb[in_box]
    d2 = np.sum((color_map[ra, ca] - color_map[rb, cb]) ** 2, axis=1)
    sim = similarity_from_sqdist(d2, color_kappa)
    selected = sim >= tau
    n_sel = int(selected.sum())
    if n_sel == 0:
        return 0.0
    mi = pred_mask[ra, ca][selected]
    mj = pred_mask[rb, cb][selected]
    p_same = mi * mj + (1.0 - mi) * (1.0 - mj)
    log_terms = np.log(np.maximum(p_same, log_clamp))
    denom = n_sel if normalizer == "selected" else int(ra.size)
    return -float(np.sum(log_terms)) / denom


def iou_box_loss(pred_box, gt_box, log_clamp=1e-6):
    """-log IoU of two valid boxes."""
    from .boxes import box_iou
    validate_box(pred_box)
    validate_box(gt_box)
    return -float(np.log(max(box_iou(pred_box, gt_box), log_clamp)))


def bce_loss(pred, target, log_clamp=1e-6):
    """Binary cross-entropy on probabilities, clamped away from {0, 1}."""
    pred = np.clip(np.asarray(pred, dtype=np.float64), log_clamp, 1.0 - log_clamp)
    target = np.asarray(target, dtype=np.float64)
    out = -target * np.log(pred) - (1.0 - target) * np.log(1.0 - pred)
    return float(out) if out.ndim == 0 else out


def total_loss(cls_loss, centerness_loss, box_loss, mask_loss, config=None):
    """Weighted sum of the four training terms; all weights default to 1."""
    config = config or LossConfig()
    return (cls_loss + config.lambda1 * centerness_loss
            + config.lambda2 * box_loss + config.lambda3 * mask_loss)
