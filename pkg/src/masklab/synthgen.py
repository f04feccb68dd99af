"""Deterministic synthetic scenes: blob instances with known masks, separable
per-pixel feature embeddings, color maps, and per-instance reference heads.

Everything is a pure function of (config, seed, scene_id); instance-level
randomness (head init, perturbation, scores) derives from a per-instance
seed stream so results do not depend on processing order.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .boxes import box_center, tight_box
from .evaluation import mask_iou
from .instances import GroundTruthInstance, InstancePrediction, Scene
from .losses import dice_loss, dice_loss_grad
from .mask_head import (PARAM_COUNT, MaskHeadParams, grads_to_flat,
                        head_backward, head_forward, relative_coords)
from .numerics import AdamWState, adamw_step
from .seeding import mix_seed, rng_for

logger = logging.getLogger(__name__)

# Blob semi-axes as fractions of the short grid side, floored at one pixel.
AXIS_FRACTION_LO = 0.14
AXIS_FRACTION_HI = 0.22
MIN_BLOB_PIXELS = 4
PLACEMENT_ATTEMPTS = 1000
N_CLASSES = 3
FIT_LR = 0.05
# Weight decay used when fitting reference heads. Keeps fitted logits small
# enough that parameter noise shifts the decision boundary gradually instead
# of flipping the whole mask at once.
FIT_WEIGHT_DECAY = 0.1
# Perturbation redraw budget, the sigma ladder spanned by the attempts
# (relative to head_perturb_sigma), and the initial-mask IoU band aimed for.
PERTURB_ATTEMPTS = 160
PERTURB_SIGMA_SPAN = (0.7, 1.3)
PERTURB_TARGET_BAND = (0.42, 0.78)
# Damage-quality tiers for accepting a perturbation draw: recall over the GT
# mask and the lower-quartile mask value on the GT must clear these floors.
# Spill-dominant damage with a firm core is what refinement can repair;
# eroded or half-dead masks sit in basins that drain to the trivial minima.
TIER_MIN_RECALL = (0.85, 0.75)
TIER_MIN_CORE = (0.9, 0.8)

# Stream tags keep per-instance seeds for fitting, perturbation, and scores
# independent of each other.
FIT_STREAM = 0x46495448
PERTURB_STREAM = 0x50455254
SCORE_STREAM = 0x53435245


@dataclass
class SynthConfig:
    height: int = 32
    width: int = 32
    min_instances: int = 2
    max_instances: int = 4
    blob_shapes: tuple = ("ellipse", "rectangle")
    separation: float = 1.0
    feature_sigma: float = 0.01
    color_sigma: float = 0.05
    head_fit_iterations: int = 500
    head_perturb_sigma: float = 1.0

    def validate(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError(f"synth: grid must be positive, got {self.height}x{self.width}")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ValueError(
                f"synth: need 1 <= min_instances <= max_instances, got "
                f"{self.min_instances}..{self.max_instances}"
            )
        if not self.blob_shapes:
            raise ValueError("synth: blob_shapes must not be empty")
        for s in self.blob_shapes:
            if s not in ("ellipse", "rectangle"):
                raise ValueError(f"synth: unknown blob shape {s!r}")
        if self.separation <= 0:
            raise ValueError(f"synth: separation must be > 0, got {self.separation}")
        for name in ("feature_sigma", "color_sigma", "head_perturb_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"synth.{name}: must be >= 0")
        if self.head_fit_iterations < 0:
            raise ValueError("synth.head_fit_iterations: must be >= 0")
        return self


def _blob_mask(shape, cx, cy, ax, ay, height, width):
    ys, xs = np.mgrid[0:height, 0:width]
    if shape == "ellipse":
        return ((xs - cx) / ax) ** 2 + ((ys - cy) / ay) ** 2 <= 1.0
    return (np.abs(xs - cx) <= ax) & (np.abs(ys - cy) <= ay)


def _place_blobs(config, rng, n_target, scene_id):
    """Sample non-degenerate blobs, capping overlap at 20% of the smaller
    blob and keeping every earlier blob at least 60% visible."""
    h, w = config.height, config.width
    short = min(h, w)
    placed = []
    attempts = 0
    while len(placed) < n_target and attempts < PLACEMENT_ATTEMPTS:
        attempts += 1
        shape = config.blob_shapes[int(rng.integers(0, len(config.blob_shapes)))]
        ax = max(1.0, rng.uniform(AXIS_FRACTION_LO, AXIS_FRACTION_HI) * short)
        ay = max(1.0, rng.uniform(AXIS_FRACTION_LO, AXIS_FRACTION_HI) * short)
        if 2 * ax >= w - 1 or 2 * ay >= h - 1:
            continue
        cx = rng.uniform(ax, w - 1 - ax)
        cy = rng.uniform(ay, h - 1 - ay)
        full = _blob_mask(shape, cx, cy, ax, ay, h, w)
        area = int(full.sum())
        if area < MIN_BLOB_PIXELS:
            continue
        ok = True
        for prev in placed:
            overlap = int(np.logical_and(full, prev["full"]).sum())
            if overlap > 0.2 * min(area, prev["area"]):
                ok = False
                break
        if ok:
            for prev in placed:
                remaining = int(np.logical_and(prev["owned"], ~full).sum())
                if remaining < 0.6 * prev["area"]:
                    ok = False
                    break
        if not ok:
            continue
        for prev in placed:
            prev["owned"] &= ~full
        placed.append({"full": full, "owned": full.copy(), "area": area})
    if len(placed) < n_target:
        logger.warning(
            "scene %d: placed %d of %d instances within %d attempts",
            scene_id, len(placed), n_target, PLACEMENT_ATTEMPTS,
        )
    return placed


def _unit_vector(rng, dim):
    v = rng.normal(0.0, 1.0, dim)
    n = float(np.linalg.norm(v))
    while n < 1e-9:
        v = rng.normal(0.0, 1.0, dim)
        n = float(np.linalg.norm(v))
    return v / n


def generate_scene(config, seed, scene_id):
    """Build one scene: blobs with painter's-algorithm ownership, per-owner
    feature embeddings scaled by the separation, and a color map in [0, 1].
    Ground-truth boxes are the tight bounds of the owned masks; the
    predictions list starts empty."""
    config.validate()
    rng = rng_for(seed, scene_id)
    h, w = config.height, config.width
    n_target = int(rng.integers(config.min_instances, config.max_instances + 1))
    placed = _place_blobs(config, rng, n_target, scene_id)

    class_ids = [int(rng.integers(0, N_CLASSES)) for _ in placed]
    bg_embedding = _unit_vector(rng, 8)
    embeddings = [_unit_vector(rng, 8) for _ in placed]

    features = np.tile(config.separation * bg_embedding, (h, w, 1))
    for blob, emb in zip(placed, embeddings):
        features[blob["owned"]] = config.separation * emb
    if config.feature_sigma > 0:
        features = features + rng.normal(0.0, config.feature_sigma, (h, w, 8))

    bg_color = rng.uniform(0.1, 0.9, 3)
    colors = [rng.uniform(0.1, 0.9, 3) for _ in placed]
    color_map = np.tile(bg_color, (h, w, 1))
    for blob, color in zip(placed, colors):
        color_map[blob["owned"]] = color
    if config.color_sigma > 0:
        color_map = color_map + rng.normal(0.0, config.color_sigma, (h, w, 3))
    color_map = np.clip(color_map, 0.0, 1.0)

    scene = Scene(
        scene_id=int(scene_id),
        seed=int(seed),
        height=h,
        width=w,
        mask_features=features.astype(np.float32),
        color_map=color_map.astype(np.float32),
    )
    for blob, class_id in zip(placed, class_ids):
        mask = blob["owned"].astype(np.float32)
        scene.ground_truths.append(GroundTruthInstance(
            class_id=class_id,
            box=np.asarray(tight_box(mask), dtype=np.float32),
            mask=mask,
        ))
    return scene.validate()


def instance_rel_coords(scene, box):
    cx, cy = box_center(box)
    return relative_coords(scene.height, scene.width, cx, cy)


def fit_reference_head(scene, instance_index, iterations, lr=FIT_LR):
    """Fit a head to one GT mask by AdamW on the dice loss, from a seeded
    small-Gaussian initialization. iterations = 0 returns the initialization.

    The instance center fed to the coordinate channels is jittered uniformly
    over the map each step, so the fit cannot lean on position and must read
    the feature channels; that keeps prototype similarities meaningful under
    refinement. Weight decay FIT_WEIGHT_DECAY bounds the logit scale."""
    gt = scene.ground_truths[instance_index]
    rng = rng_for(scene.seed, scene.scene_id, instance_index, FIT_STREAM)
    flat = MaskHeadParams.random(rng, scale=0.1).to_flat()
    cx, cy = box_center(gt.box)
    jitter = 0.5 * max(scene.height, scene.width)
    target = np.asarray(gt.mask, dtype=np.float64)
    state = AdamWState((PARAM_COUNT,), weight_decay=FIT_WEIGHT_DECAY)
    for _ in range(iterations):
        jx, jy = rng.uniform(-jitter, jitter, 2)
        rel = relative_coords(scene.height, scene.width, cx + jx, cy + jy)
        params = MaskHeadParams.from_flat(flat)
        out = head_forward(params, scene.mask_features, rel)
        upstream = dice_loss_grad(out.mask, target)
        grads = grads_to_flat(head_backward(params, scene.mask_features, rel, upstream))
        updated, state = adamw_step(flat.astype(np.float64), grads, state, lr)
        flat = updated.astype(np.float32)
    return MaskHeadParams.from_flat(flat)


def perturb_head(params, sigma, seed):
    """Add seeded i.i.d. Gaussian noise to all parameters."""
    if sigma < 0:
        raise ValueError(f"perturb_head: sigma must be >= 0, got {sigma}")
    rng = rng_for(seed)
    flat = params.to_flat().astype(np.float64)
    flat = flat + rng.normal(0.0, sigma, flat.size)
    return MaskHeadParams.from_flat(flat.astype(np.float32))


def _pick_initial_head(scene, fitted, gt, rel, base_sigma, seed, instance_index):
    """Scan a seeded ladder of perturbation draws and keep the best one.

    Draws sweep sigma across PERTURB_SIGMA_SPAN * base_sigma. A draw whose
    mask IoU against the GT lies in PERTURB_TARGET_BAND is graded into
    quality tiers by recall over the GT and the lower-quartile mask value on
    it (spill-dominant damage with a firm core refines well; eroded or
    half-dead cores drain to trivial energy minima). The best-scoring draw of
    the best nonempty tier wins; with no in-band draw at all, the draw
    closest to the band midpoint is used. Deterministic in all arguments."""
    lo_sig, hi_sig = PERTURB_SIGMA_SPAN
    lo, hi = PERTURB_TARGET_BAND
    mid = 0.5 * (lo + hi)
    gt_bool = np.asarray(gt.mask) >= 0.5
    gt_area = int(gt_bool.sum())
    tiers = [None] * (len(TIER_MIN_RECALL) + 1)
    fallback = None
    for attempt in range(PERTURB_ATTEMPTS):
        if PERTURB_ATTEMPTS > 1:
            frac = attempt / (PERTURB_ATTEMPTS - 1)
        else:
            frac = 0.0
        sigma = base_sigma * (lo_sig + (hi_sig - lo_sig) * frac)
        perturb_seed = mix_seed(seed, scene.scene_id, instance_index,
                                PERTURB_STREAM, attempt)
        head = perturb_head(fitted, sigma, perturb_seed)
        mask = head_forward(head, scene.mask_features, rel).mask
        iou = mask_iou(mask, gt.mask)
        if fallback is None or abs(iou - mid) < fallback[0]:
            fallback = (abs(iou - mid), head, mask)
        if base_sigma == 0:
            break
        if not lo <= iou <= hi:
            continue
        recall = float(((mask >= 0.5) & gt_bool).sum()) / max(gt_area, 1)
        core = float(np.quantile(mask[gt_bool], 0.25)) if gt_area else 0.0
        tier = len(TIER_MIN_RECALL)
        for t, (min_rec, min_core) in enumerate(zip(TIER_MIN_RECALL, TIER_MIN_CORE)):
            if recall >= min_rec and core >= min_core:
                tier = t
                break
        score = recall + core
        if tiers[tier] is None or score > tiers[tier][0]:
            tiers[tier] = (score, head, mask)
    for entry in tiers:
        if entry is not None:
            return entry[1], entry[2]
    return fallback[1], fallback[2]


def add_predictions(scene, config, seed=None):
    """Attach one prediction per GT: the fitted reference head perturbed by
    head_perturb_sigma, its forward mask, the GT box, and a random score.
    Perturbation draws come from a per-instance seed stream and are selected
    by _pick_initial_head, so results are deterministic and independent of
    processing order."""
    seed = scene.seed if seed is None else seed
    for i, gt in enumerate(scene.ground_truths):
        fitted = fit_reference_head(scene, i, config.head_fit_iterations)
        rel = instance_rel_coords(scene, gt.box)
        head, mask = _pick_initial_head(
            scene, fitted, gt, rel, config.head_perturb_sigma, seed, i)
        score_rng = rng_for(seed, scene.scene_id, i, SCORE_STREAM)
        scene.predictions.append(InstancePrediction(
            class_id=gt.class_id,
            score=float(score_rng.uniform(0.55, 0.95)),
            box=gt.box.copy(),
            mask=mask.astype(np.float32),
            head_params=head,
        ))
    return scene


def suite_config():
    """Config of the frozen 100-seed validation suite: desk-scale defaults
    with exactly one instance per scene, so instance count equals seed
    count."""
    return SynthConfig(min_instances=1, max_instances=1)


def build_suite_scene(seed):
    """One frozen-suite scene, predictions included; deterministic in seed."""
    config = suite_config()
    scene = generate_scene(config, seed, scene_id=seed)
    return add_predictions(scene, config)


@dataclass
class SeparabilityAudit:
    mean_embedding_distance: float
    mean_noise_norm: float

    @property
    def ratio(self):
        if self.mean_noise_norm == 0:
            return float("inf")
        return self.mean_embedding_distance / self.mean_noise_norm


def audit_separability(config, seed, n_scenes=100):
    """Mean distance between per-region mean features (instances plus
    background) against the mean per-pixel deviation norm from the region
    mean, over freshly generated scenes. A ratio well above 1 is what makes
    feature-level similarity usable."""
    distances = []
    deviation_norms = []
    for scene_id in range(n_scenes):
        scene = generate_scene(config, seed, scene_id)
        features = np.asarray(scene.mask_features, dtype=np.float64)
        regions = [np.asarray(gt.mask) > 0 for gt in scene.ground_truths]
        background = ~np.any(regions, axis=0) if regions else np.ones(
            (scene.height, scene.width), dtype=bool)
        regions.append(background)
        means = []
        for region in regions:
            if not region.any():
                continue
            mean = features[region].mean(axis=0)
            means.append(mean)
            deviation_norms.append(
                float(np.mean(np.linalg.norm(features[region] - mean, axis=1))))
        for i in range(len(means)):
            for j in range(i + 1, len(means)):
                distances.append(float(np.linalg.norm(means[i] - means[j])))
    return SeparabilityAudit(
        mean_embedding_distance=float(np.mean(distances)) if distances else 0.0,
        mean_noise_norm=float(np.mean(deviation_norms)) if deviation_norms else 0.0,
    )
