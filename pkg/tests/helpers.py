"""Shared test builders: random micro-scenes, constrained allocation scenes,
a from-scratch reference AP implementation kept free of any code from the
package's evaluation module, and the finite-difference harness for the
refinement energy gradient."""

import numpy as np

from masklab.imr import (IMRConfig, build_pairwise_graph, build_unary_context,
                         imr_energy)
from masklab.instances import GroundTruthInstance, InstancePrediction, Scene
from masklab.mask_head import (PARAM_COUNT, MaskHeadParams, grads_to_flat,
                               head_forward)
from masklab.seeding import rng_for
from masklab.synthgen import SynthConfig, generate_scene, instance_rel_coords

REF_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)

FD_STEP = 1e-3

# Scenes and heads for the energy gradient check. The mask head is piecewise
# smooth; central differences are only meaningful where no ReLU input sits
# within the step of its kink (at a kink the two-sided estimate is off by half
# the slope jump regardless of step size). These seeds were screened for a
# clear margin; on them every partial agrees to 1e-5 or better.
ENERGY_FD_SEEDS = (0, 2, 6, 11, 14, 15, 17, 21, 25, 41, 51, 54, 55, 57, 60,
                   71, 76, 78, 81, 83, 96, 98, 99, 102)


def energy_fd_case(seed):
    """Small generated scene plus a random head, with the first instance's
    box as the refinement target."""
    config = SynthConfig(height=8, width=8, min_instances=1, max_instances=2)
    scene = generate_scene(config, seed, scene_id=seed)
    gt = scene.ground_truths[0]
    rel = instance_rel_coords(scene, gt.box)
    params = MaskHeadParams.random(rng_for(seed, 0xFD), scale=0.5)
    return scene, gt, rel, params


def energy_fd_worst(seed, config=None):
    """Worst relative error between the analytic energy gradient and central
    finite differences over all 169 parameters, with the unary context and
    pairwise graph frozen at the evaluation point."""
    cfg = config or IMRConfig()
    scene, gt, rel, params = energy_fd_case(seed)
    feats = scene.mask_features
    out = head_forward(params, feats, rel)
    context = build_unary_context(out.first_layer_features, out.mask, gt.box, cfg)
    graph = build_pairwise_graph(feats, cfg)
    _, grads = imr_energy(params, feats, rel, context, graph, cfg)
    analytic = grads_to_flat(grads)
    flat = params.to_flat().astype(np.float64)
    worst = 0.0
    for k in range(PARAM_COUNT):
        up = flat.copy()
        up[k] += FD_STEP
        dn = flat.copy()
        dn[k] -= FD_STEP
        eu, _ = imr_energy(MaskHeadParams.from_flat(up.astype(np.float32)),
                           feats, rel, context, graph, cfg)
        ed, _ = imr_energy(MaskHeadParams.from_flat(dn.astype(np.float32)),
                           feats, rel, context, graph, cfg)
        fd = (eu - ed) / (2 * FD_STEP)
        worst = max(worst, abs(analytic[k] - fd) / max(1.0, abs(fd)))
    return worst


def blank_scene(sid, h, w, gts, preds):
    return Scene(sid, 0, h, w, np.zeros((h, w, 8), np.float32),
                 np.zeros((h, w, 3), np.float32), gts, preds)


def _int_box(rng, h, w):
    x0 = int(rng.integers(0, w - 1))
    x1 = int(rng.integers(x0 + 1, w + 1))
    y0 = int(rng.integers(0, h - 1))
    y1 = int(rng.integers(y0 + 1, h + 1))
    return np.array([x0, y0, x1, y1], dtype=float)


def _rand_mask(rng, h, w):
    mask = (rng.uniform(size=(h, w)) < 0.4).astype(np.float32)
    mask[int(rng.integers(0, h)), int(rng.integers(0, w))] = 1.0
    return mask


def micro_scene(rng, sid, n_classes=3):
    """Tiny scene with integer boxes, binary masks, and coarse scores (ties on
    purpose); GT and prediction counts may both be zero."""
    h = w = 6
    gts = []
    for _ in range(int(rng.integers(0, 5))):
        gts.append(GroundTruthInstance(int(rng.integers(0, n_classes)),
                                       _int_box(rng, h, w), _rand_mask(rng, h, w)))
    preds = []
    for _ in range(int(rng.integers(0, 6))):
        preds.append(InstancePrediction(int(rng.integers(0, n_classes)),
                                        float(rng.integers(1, 11)) / 10.0,
                                        _int_box(rng, h, w), _rand_mask(rng, h, w)))
    return blank_scene(sid, h, w, gts, preds)


def constrained_scene(rng, sid, jitter_frac):
    """Scene for the allocation probes: well-separated instances, at most one
    prediction per instance, each prediction a jittered copy of its own GT box
    so its argmax GT is strict and unique. jitter_frac bounds the per-axis
    shift as a fraction of the box size (1/6 keeps IoU above 0.5, 0.012 keeps
    it above 0.95)."""
    h = w = 64
    gts = []
    for i in range(int(rng.integers(1, 5))):
        gx, gy = (i % 2) * 32, (i // 2) * 32
        bw = int(rng.integers(6, 13))
        bh = int(rng.integers(6, 13))
        x = gx + int(rng.integers(0, 32 - bw - 4))
        y = gy + int(rng.integers(0, 32 - bh - 4))
        mask = np.zeros((h, w), dtype=np.float32)
        mask[y:y + bh, x:x + bw] = 1.0
        gts.append(GroundTruthInstance(
            int(rng.integers(0, 3)),
            np.array([x, y, x + bw, y + bh], dtype=float), mask))
    preds = []
    for g in gts:
        if rng.uniform() < 0.25:
            continue
        x0, y0, x1, y1 = g.box
        dx = rng.uniform(-1, 1) * (x1 - x0) * jitter_frac
        dy = rng.uniform(-1, 1) * (y1 - y0) * jitter_frac
        preds.append(InstancePrediction(
            class_id=int(rng.integers(0, 3)),
            score=round(float(rng.uniform(0.1, 1.0)), 1),
            box=np.array([x0 + dx, y0 + dy, x1 + dx, y1 + dy]),
            mask=g.mask.copy()))
    return blank_scene(sid, h, w, gts, preds)


def _ref_box_iou(a, b):
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _ref_mask_iou(a, b, thr):
    am = np.asarray(a) >= thr
    bm = np.asarray(b) >= thr
    union = int(np.sum(am | bm))
    if union == 0:
        return 0.0
    return int(np.sum(am & bm)) / union


def _ref_greedy_flags(dets, gt_lists, thr):
    taken = [set() for _ in gt_lists]
    flags = []
    for _neg_score, _order, si, ious in dets:
        choice = -1
        top = -1.0
        for gi, iou in enumerate(ious):
            if gi in taken[si] or iou < thr:
                continue
            if iou > top:
                top = iou
                choice = gi
        if choice >= 0:
            taken[si].add(choice)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def _ref_interp_ap(flags, n_gt):
    tp = 0
    curve = []
    for i, f in enumerate(flags):
        tp += int(f)
        curve.append((tp / (i + 1), tp / n_gt))
    total = 0.0
    for j in range(101):
        r = j / 100
        best = 0.0
        for p, rec in curve:
            if rec >= r and p > best:
                best = p
        total += best
    return total / 101


def ref_average_precision(scenes, iou_kind="box", thresholds=REF_THRESHOLDS,
                          mask_threshold=0.5):
    """Returns (mean_ap, ap50, per_class_ap, true_positives_at_50)."""
    class_ids = sorted({g.class_id for sc in scenes for g in sc.ground_truths})
    if not class_ids:
        return 0.0, 0.0, {}, {}
    per_class = {}
    tp50 = {}
    mean_sum = 0.0
    ap50_sum = 0.0
    for cid in class_ids:
        gt_lists = [[g for g in sc.ground_truths if g.class_id == cid]
                    for sc in scenes]
        n_gt = sum(len(gl) for gl in gt_lists)
        dets = []
        counter = 0
        for si, sc in enumerate(scenes):
            for p in sc.predictions:
                if p.class_id != cid:
                    continue
                if iou_kind == "box":
                    ious = [_ref_box_iou(p.box, g.box) for g in gt_lists[si]]
                else:
                    ious = [_ref_mask_iou(p.mask, g.mask, mask_threshold)
                            for g in gt_lists[si]]
                dets.append((-float(p.score), counter, si, ious))
                counter += 1
        dets.sort(key=lambda d: (d[0], d[1]))
        ap_sum = 0.0
        for thr in thresholds:
            ap_sum += _ref_interp_ap(_ref_greedy_flags(dets, gt_lists, thr), n_gt)
        per_class[cid] = ap_sum / len(thresholds)
        flags50 = _ref_greedy_flags(dets, gt_lists, 0.5)
        tp50[cid] = sum(flags50)
        ap50_sum += _ref_interp_ap(flags50, n_gt)
        mean_sum += per_class[cid]
    return (mean_sum / len(class_ids), ap50_sum / len(class_ids),
            per_class, tp50)
