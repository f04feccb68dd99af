"""Detection and segmentation scoring: IoU, COCO-style AP over an IoU grid,
class-agnostic foreground AP, and the ground-truth allocation probes that
swap predicted classes or masks for their best-overlapping GT counterparts.

Aggregation order is fixed everywhere (scene order for detections, ascending
IoU thresholds, ascending class ids, ascending recall points) so that repeated
runs produce bit-identical floats.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .boxes import box_iou

IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)


@dataclass
class EvalConfig:
    thresholds: tuple = IOU_THRESHOLDS
    mask_threshold: float = 0.5
    # Allocation gate: predictions whose best box IoU falls below this keep
    # their own class/mask. None allocates unconditionally.
    allocation_min_iou: float | None = None

    def validate(self):
        if len(self.thresholds) == 0:
            raise ValueError("eval.thresholds: must not be empty")
        for t in self.thresholds:
            if not 0.0 < t <= 1.0:
                raise ValueError(f"eval.thresholds: entries must be in (0, 1], got {t}")
        if list(self.thresholds) != sorted(self.thresholds):
            raise ValueError("eval.thresholds: must be ascending")
        if not 0.0 < self.mask_threshold <= 1.0:
            raise ValueError(
                f"eval.mask_threshold: must be in (0, 1], got {self.mask_threshold}"
            )
        if self.allocation_min_iou is not None and not 0.0 <= self.allocation_min_iou <= 1.0:
            raise ValueError(
                f"eval.allocation_min_iou: must be in [0, 1], got {self.allocation_min_iou}"
            )
        return self


def mask_iou(a, b, threshold=0.5):
    """IoU of two masks binarized at threshold; empty union gives 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask_iou: shape mismatch {a.shape} vs {b.shape}")
    am = a >= threshold
    bm = b >= threshold
    union = int(np.logical_or(am, bm).sum())
    if union == 0:
        return 0.0
    return float(int(np.logical_and(am, bm).sum())) / float(union)


@dataclass
class APResult:
    mean_ap: float
    ap50: float
    per_class_ap: dict = field(default_factory=dict)
    true_positives: dict = field(default_factory=dict)
    predictions_per_class: dict = field(default_factory=dict)


def _class_detections(scenes, class_id, iou_kind, mask_threshold):
    """Detections of one class sorted by descending score (stable), each with
    its IoU against every same-class GT of its scene."""
    scene_gts = []
    n_gt = 0
    for scene in scenes:
        gts = [g for g in scene.ground_truths if g.class_id == class_id]
        scene_gts.append(gts)
        n_gt += len(gts)
    records = []
    order = 0
    for s_idx, scene in enumerate(scenes):
        gts = scene_gts[s_idx]
        for pred in scene.predictions:
            if pred.class_id != class_id:
                continue
            if iou_kind == "box":
                ious = [box_iou(pred.box, g.box) for g in gts]
            else:
                ious = [mask_iou(pred.mask, g.mask, mask_threshold) for g in gts]
            records.append((-float(pred.score), order, s_idx, ious))
            order += 1
    records.sort(key=lambda r: (r[0], r[1]))
    return records, n_gt, [len(g) for g in scene_gts]


def _match_flags(records, gt_counts, threshold):
    """Greedy matching: each detection takes the highest-IoU unmatched GT at
    or above the threshold; equal IoUs go to the lowest GT index."""
    used = [[False] * n for n in gt_counts]
    flags = []
    for _, _, s_idx, ious in records:
        best_idx = -1
        best_iou = -1.0
        for i, iou in enumerate(ious):
            if used[s_idx][i]:
                continue
            if iou >= threshold and iou > best_iou:
                best_iou = iou
                best_idx = i
        if best_idx >= 0:
            used[s_idx][best_idx] = True
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _interpolated_ap(flags, n_gt):
    """101-point interpolated AP from ordered match flags."""
    tp = 0
    precisions = []
    recalls = []
    for i, flag in enumerate(flags):
        if flag:
            tp += 1
        precisions.append(tp / (i + 1))
        recalls.append(tp / n_gt)
    total = 0.0
    for j in range(101):
        r = j / 100
        best = 0.0
        for p, rec in zip(precisions, recalls):
            if rec >= r and p > best:
                best = p
        total += best
    return total / 101


def average_precision(scenes, iou_kind="box", thresholds=IOU_THRESHOLDS,
                      mask_threshold=0.5):
    """Per-class AP averaged over IoU thresholds, plus AP50 and the raw
    true-positive counts at IoU 0.5.

    Classes are those with at least one GT; a class without GT is excluded
    from the means, and with no GT at all every metric is 0.
    """
    if iou_kind not in ("box", "mask"):
        raise ValueError(f"average_precision: iou_kind must be 'box' or 'mask', got {iou_kind!r}")
    classes = sorted({g.class_id for scene in scenes for g in scene.ground_truths})
    result = APResult(mean_ap=0.0, ap50=0.0)
    for scene in scenes:
        for pred in scene.predictions:
            c = pred.class_id
            result.predictions_per_class[c] = result.predictions_per_class.get(c, 0) + 1
    if not classes:
        return result
    mean_sum = 0.0
    ap50_sum = 0.0
    for c in classes:
        records, n_gt, gt_counts = _class_detections(scenes, c, iou_kind, mask_threshold)
        ap_sum = 0.0
        for t in thresholds:
            ap_sum += _interpolated_ap(_match_flags(records, gt_counts, t), n_gt)
        result.per_class_ap[c] = ap_sum / len(thresholds)
        flags50 = _match_flags(records, gt_counts, 0.5)
        result.true_positives[c] = sum(flags50)
        ap50_sum += _interpolated_ap(flags50, n_gt)
        mean_sum += result.per_class_ap[c]
    result.mean_ap = mean_sum / len(classes)
    result.ap50 = ap50_sum / len(classes)
    return result


def _relabel_foreground(scenes):
    out = []
    for scene in scenes:
        out.append(replace(
            scene,
            ground_truths=[replace(g, class_id=0) for g in scene.ground_truths],
            predictions=[replace(p, class_id=0) for p in scene.predictions],
        ))
    return out


def fg_ap(scenes, iou_kind="box", thresholds=IOU_THRESHOLDS, mask_threshold=0.5):
    """AP with every instance projected onto one foreground class."""
    return average_precision(_relabel_foreground(scenes), iou_kind,
                             thresholds, mask_threshold).mean_ap


@dataclass
class AllocationStats:
    passthrough_no_gt: int = 0
    passthrough_gated: int = 0

    def merge(self, other):
        self.passthrough_no_gt += other.passthrough_no_gt
        self.passthrough_gated += other.passthrough_gated
        return self


def _argmax_gt(pred_box, ground_truths, min_iou):
    best_idx = 0
    best_iou = -1.0
    for i, gt in enumerate(ground_truths):
        iou = box_iou(pred_box, gt.box)
        if iou > best_iou:
            best_iou = iou
            best_idx = i
    if min_iou is not None and best_iou < min_iou:
        return None
    return best_idx


def gt_class_allocation(predictions, ground_truths, min_iou=None):
    """Replace each prediction's class with that of its highest-box-IoU GT.

    Zero IoU everywhere still allocates (to GT index 0) unless min_iou gates
    it. An empty GT list passes predictions through and counts them."""
    stats = AllocationStats()
    out = []
    for pred in predictions:
        if not ground_truths:
            stats.passthrough_no_gt += 1
            out.append(pred)
            continue
        k = _argmax_gt(pred.box, ground_truths, min_iou)
        if k is None:
            stats.passthrough_gated += 1
            out.append(pred)
        else:
            out.append(replace(pred, class_id=ground_truths[k].class_id))
    return out, stats


def gt_mask_allocation(predictions, ground_truths, min_iou=None):
    """Replace each prediction's mask with its highest-box-IoU GT's mask;
    classes, scores, and boxes stay untouched."""
    stats = AllocationStats()
    out = []
    for pred in predictions:
        if not ground_truths:
            stats.passthrough_no_gt += 1
            out.append(pred)
            continue
        k = _argmax_gt(pred.box, ground_truths, min_iou)
        if k is None:
            stats.passthrough_gated += 1
            out.append(pred)
        else:
            out.append(replace(pred, mask=ground_truths[k].mask.copy()))
    return out, stats


def allocate_scene(scene, mode, min_iou=None):
    """Apply one allocation mode ('gt-cls' or 'gt-mask') to a scene."""
    if mode == "gt-cls":
        preds, stats = gt_class_allocation(scene.predictions, scene.ground_truths, min_iou)
    elif mode == "gt-mask":
        preds, stats = gt_mask_allocation(scene.predictions, scene.ground_truths, min_iou)
    else:
        raise ValueError(f"allocate_scene: unknown mode {mode!r}")
    return replace(scene, predictions=preds), stats


def pooled_vs_classmean(tp_by_class, preds_by_class):
    """Pooled sum(TP)/sum(P) against the per-class mean of TP_c/P_c.

    The two differ under class imbalance; classes with zero predictions
    contribute a zero ratio."""
    classes = sorted(preds_by_class)
    if not classes:
        return 0.0, 0.0
    total_tp = sum(tp_by_class.get(c, 0) for c in classes)
    total_p = sum(preds_by_class[c] for c in classes)
    pooled = total_tp / total_p if total_p else 0.0
    ratio_sum = 0.0
    for c in classes:
        p = preds_by_class[c]
        ratio_sum += tp_by_class.get(c, 0) / p if p else 0.0
    return pooled, ratio_sum / len(classes)


@dataclass
class TaskMetrics:
    ap: float
    ap50: float
    fg_ap: float
    per_class_ap: dict
    true_positives: dict
    predictions_per_class: dict


@dataclass
class EvalReport:
    detection: TaskMetrics
    segmentation: TaskMetrics


def _task_metrics(scenes, iou_kind, config):
    res = average_precision(scenes, iou_kind, config.thresholds, config.mask_threshold)
    return TaskMetrics(
        ap=res.mean_ap,
        ap50=res.ap50,
        fg_ap=fg_ap(scenes, iou_kind, config.thresholds, config.mask_threshold),
        per_class_ap=res.per_class_ap,
        true_positives=res.true_positives,
        predictions_per_class=res.predictions_per_class,
    )


def evaluate_scenes(scenes, config=None):
    """Full report over both tasks: box AP for detection, mask AP for
    segmentation, each with AP50, FG-AP, and per-class tables."""
    config = config or EvalConfig()
    return EvalReport(
        detection=_task_metrics(scenes, "box", config),
        segmentation=_task_metrics(scenes, "mask", config),
    )
