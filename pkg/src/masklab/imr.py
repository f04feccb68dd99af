"""Instance-wise mask refinement: an MRF energy over the head's mask output,
minimized over the 169 head parameters at test time.

The unary term compares each pixel's first-layer head feature against a
foreground prototype (mask-weighted feature mean) and a background prototype
(worst-matching box-perimeter features); pixels whose match to both is poor
form a gray zone that the unary term skips. The pairwise term penalizes mask
differences across 8-neighbor pixel pairs whose raw mask features are
similar. Prototypes, similarities, the gray zone, and edge weights are frozen
while differentiating; the unary context is rebuilt every iteration from the
current iterate, the pairwise graph once per instance.
"""

from dataclasses import dataclass, replace

import numpy as np

from .boxes import box_center, box_iou, box_pixel_bounds, perimeter_pixels
from .evaluation import mask_iou
from .grid import neighbor_edges
from .mask_head import (PARAM_COUNT, MaskHeadParams, grads_to_flat,
                        head_backward, head_forward, relative_coords)
from .numerics import AdamWState, NonFiniteError, adamw_step
from .seeding import mix_seed


@dataclass
class IMRConfig:
    mu1: float = 0.05
    mu2: float = 5.0
    eta: float = 5.0
    kappa_proto: float = 0.05
    kappa_pair: float = 0.2
    pair_weight_threshold: float = 0.5
    bg_topk: int = 5
    gray_divisor: float = 5.0
    iterations: int = 10
    lr: float = 0.05
    # Restrict the energy domain to the predicted box instead of the full map.
    roi_crop: bool = False
    # "soft_area" divides the foreground prototype by sum(mask) instead of
    # the pixel count; kept as an unverified alternative reading.
    fg_normalization: str = "pixel_count"

    def validate(self):
        for name in ("mu1", "mu2", "eta", "kappa_proto", "kappa_pair",
                     "pair_weight_threshold", "gray_divisor", "lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"imr.{name}: must be positive")
        if self.bg_topk < 1:
            raise ValueError(f"imr.bg_topk: must be >= 1, got {self.bg_topk}")
        if self.iterations < 0:
            raise ValueError(f"imr.iterations: must be >= 0, got {self.iterations}")
        if self.fg_normalization not in ("pixel_count", "soft_area"):
            raise ValueError(
                f"imr.fg_normalization: expected 'pixel_count' or 'soft_area', "
                f"got {self.fg_normalization!r}"
            )
        return self


@dataclass
class UnaryContext:
    p_fg: np.ndarray
    p_bg: np.ndarray
    fg_sim: np.ndarray
    bg_sim: np.ndarray
    fg_err: np.ndarray
    bg_err: np.ndarray
    gray_mask: np.ndarray
    rho: float
    g_values: np.ndarray
    edge_pixels: np.ndarray


@dataclass
class PairwiseGraph:
    rows_a: np.ndarray
    cols_a: np.ndarray
    rows_b: np.ndarray
    cols_b: np.ndarray
    weights: np.ndarray

    @property
    def edge_count(self):
        return int(self.weights.size)


def compute_foreground_prototype(first_layer_features, mask, normalization="pixel_count"):
    """Mask-weighted mean feature. The default divides by the total pixel
    count; an all-zero mask gives the zero vector."""
    features = np.asarray(first_layer_features, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if features.shape[:2] != mask.shape:
        raise ValueError(
            f"foreground prototype: features {features.shape} vs mask {mask.shape}"
        )
    weighted = (features * mask[..., None]).sum(axis=(0, 1))
    if normalization == "pixel_count":
        return weighted / float(mask.size)
    soft_area = float(mask.sum())
    if soft_area == 0.0:
        return np.zeros(features.shape[2], dtype=np.float64)
    return weighted / soft_area


def compute_background_prototype(first_layer_features, p_fg, box, topk=5):
    """Mean of the min(topk, perimeter) box-perimeter features farthest from
    the foreground prototype (largest squared error)."""
    features = np.asarray(first_layer_features, dtype=np.float64)
    h, w = features.shape[:2]
    perim = perimeter_pixels(box, h, w)
    if perim.shape[0] == 0:
        raise ValueError("background prototype: box perimeter is empty after clipping")
    feats = features[perim[:, 0], perim[:, 1]]
    errors = ((feats - np.asarray(p_fg, dtype=np.float64)) ** 2).sum(axis=1)
    k = min(topk, feats.shape[0])
    order = np.argsort(-errors, kind="stable")[:k]
    return feats[order].mean(axis=0)


def compute_gray_zone(fg_err, bg_err, gray_divisor=5.0):
    """Pixels poorly matched by both prototypes: g = min(E_fg, E_bg),
    rho = max(g)/divisor, gray where g >= rho. All-zero g gives an empty
    gray zone so the unary term keeps covering every pixel."""
    g = np.minimum(np.asarray(fg_err, dtype=np.float64),
                   np.asarray(bg_err, dtype=np.float64))
    g_max = float(g.max())
    rho = g_max / gray_divisor
    if g_max == 0.0:
        return np.zeros(g.shape, dtype=bool), rho
    return g >= rho, rho


def build_unary_context(first_layer_features, mask, box, config):
    features = np.asarray(first_layer_features, dtype=np.float64)
    h, w = features.shape[:2]
    p_fg = compute_foreground_prototype(features, mask, config.fg_normalization)
    fg_err = ((features - p_fg) ** 2).sum(axis=2)
    p_bg = compute_background_prototype(features, p_fg, box, config.bg_topk)
    bg_err = ((features - p_bg) ** 2).sum(axis=2)
    fg_sim = np.exp(-fg_err / config.kappa_proto)
    bg_sim = np.exp(-bg_err / config.kappa_proto)
    gray_mask, rho = compute_gray_zone(fg_err, bg_err, config.gray_divisor)
    return UnaryContext(
        p_fg=p_fg,
        p_bg=p_bg,
        fg_sim=fg_sim,
        bg_sim=bg_sim,
        fg_err=fg_err,
        bg_err=bg_err,
        gray_mask=gray_mask,
        rho=rho,
        g_values=np.minimum(fg_err, bg_err),
        edge_pixels=perimeter_pixels(box, h, w),
    )


def build_pairwise_graph(mask_features, config, region=None):
    """Edges between 8-neighbor pixels whose raw mask features are similar;
    weight = Sim(f, f') above the threshold, otherwise the edge is absent."""
    features = np.asarray(mask_features, dtype=np.float64)
    h, w = features.shape[:2]
    ra, ca, rb, cb = neighbor_edges(h, w)
    d2 = ((features[ra, ca] - features[rb, cb]) ** 2).sum(axis=1)
    sim = np.exp(-d2 / config.kappa_pair)
    keep = sim > config.pair_weight_threshold
    if region is not None:
        keep &= region[ra, ca] & region[rb, cb]
    return PairwiseGraph(
        rows_a=ra[keep], cols_a=ca[keep],
        rows_b=rb[keep], cols_b=cb[keep],
        weights=sim[keep],
    )


def _roi_region(box, height, width):
    c0, r0, c1, r1 = box_pixel_bounds(box, height, width)
    region = np.zeros((height, width), dtype=bool)
    region[r0:r1, c0:c1] = True
    return region


def imr_energy(params, mask_features, rel_coords, context, graph, config,
               region=None):
    """Energy of the current head under a frozen context, with its exact
    gradient in the 169 parameters.

    energy = mu1 * sum_{x not gray} [eta*S_fg*(1-m) + S_bg*m]
           + mu2 * sum over ordered neighbor pairs of W*(m_x - m_x')^2.
    The graph stores each undirected pair once, hence the factor 2.
    """
    out = head_forward(params, mask_features, rel_coords)
    m = out.mask

    active = ~context.gray_mask
    if region is not None:
        active = active & region
    unary_field = config.eta * context.fg_sim * (1.0 - m) + context.bg_sim * m
    unary = float(unary_field[active].sum())

    ma = m[graph.rows_a, graph.cols_a]
    mb = m[graph.rows_b, graph.cols_b]
    diff = ma - mb
    pairwise = 2.0 * float((graph.weights * diff * diff).sum())

    energy = config.mu1 * unary + config.mu2 * pairwise

    upstream = np.where(
        active, config.mu1 * (context.bg_sim - config.eta * context.fg_sim), 0.0)
    pair_grad = 4.0 * config.mu2 * graph.weights * diff
    np.add.at(upstream, (graph.rows_a, graph.cols_a), pair_grad)
    np.add.at(upstream, (graph.rows_b, graph.cols_b), -pair_grad)

    grads = head_backward(params, mask_features, rel_coords, upstream)
    return energy, grads


def ensemble_heads(initial, refined):
    """Elementwise parameter average of the two heads."""
    mean = 0.5 * (initial.to_flat().astype(np.float64)
                  + refined.to_flat().astype(np.float64))
    return MaskHeadParams.from_flat(mean.astype(np.float32))


@dataclass
class RefineResult:
    refined: MaskHeadParams
    ensembled: MaskHeadParams
    final_mask: np.ndarray
    energy_trace: list
    aborted: bool = False


def refine_instance(initial, scene, box, config=None, seed=0):
    """Minimize the energy from the given head for config.iterations AdamW
    steps, then average with the initial head and run one forward pass.

    The energy trace holds iterations+1 entries, the initial energy first,
    each evaluated under the context rebuilt from that iterate. A non-finite
    energy or gradient aborts and returns the initial head unchanged with the
    aborted flag set. The seed is reserved for stochastic variants; the
    standard path is deterministic.
    """
    config = (config or IMRConfig()).validate()
    del seed
    h, w = scene.height, scene.width
    cx, cy = box_center(box)
    rel = relative_coords(h, w, cx, cy)
    region = _roi_region(box, h, w) if config.roi_crop else None
    graph = build_pairwise_graph(scene.mask_features, config, region)

    flat = initial.to_flat()
    state = AdamWState((PARAM_COUNT,))
    trace = []
    try:
        for _ in range(config.iterations):
            params = MaskHeadParams.from_flat(flat)
            out = head_forward(params, scene.mask_features, rel)
            context = build_unary_context(out.first_layer_features, out.mask,
                                          box, config)
            energy, grads = imr_energy(params, scene.mask_features, rel,
                                       context, graph, config, region)
            if not np.isfinite(energy):
                raise NonFiniteError(f"non-finite energy {energy}")
            trace.append(float(energy))
            updated, state = adamw_step(flat.astype(np.float64),
                                        grads_to_flat(grads), state, config.lr)
            flat = updated.astype(np.float32)
        refined = MaskHeadParams.from_flat(flat)
        out = head_forward(refined, scene.mask_features, rel)
        context = build_unary_context(out.first_layer_features, out.mask,
                                      box, config)
        energy, _ = imr_energy(refined, scene.mask_features, rel, context,
                               graph, config, region)
        if not np.isfinite(energy):
            raise NonFiniteError(f"non-finite energy {energy}")
        trace.append(float(energy))
    except NonFiniteError:
        final_mask = head_forward(initial, scene.mask_features, rel).mask
        return RefineResult(refined=initial, ensembled=initial,
                            final_mask=final_mask, energy_trace=trace,
                            aborted=True)
    ensembled = ensemble_heads(initial, refined)
    final_mask = head_forward(ensembled, scene.mask_features, rel).mask
    return RefineResult(refined=refined, ensembled=ensembled,
                        final_mask=final_mask, energy_trace=trace)


def _matched_gt(prediction, ground_truths):
    best_idx = -1
    best_iou = -1.0
    for i, gt in enumerate(ground_truths):
        iou = box_iou(prediction.box, gt.box)
        if iou > best_iou:
            best_iou = iou
            best_idx = i
    return best_idx


def refine_scene(scene, config, global_seed):
    """Refine every prediction that carries head parameters. Returns the
    scene with ensembled heads and final masks swapped in, plus one record
    per refined instance (IoU against the best box-overlap GT, when any)."""
    records = []
    new_preds = []
    for j, pred in enumerate(scene.predictions):
        if pred.head_params is None:
            new_preds.append(pred)
            continue
        seed = mix_seed(global_seed, scene.scene_id, j)
        result = refine_instance(pred.head_params, scene, pred.box, config, seed)
        record = {
            "scene_id": int(scene.scene_id),
            "instance": int(j),
            "init_iou": None,
            "refined_iou": None,
            "energy_trace": [float(e) for e in result.energy_trace],
            "aborted": bool(result.aborted),
        }
        k = _matched_gt(pred, scene.ground_truths)
        if k >= 0:
            gt_mask = scene.ground_truths[k].mask
            record["init_iou"] = mask_iou(pred.mask, gt_mask)
            record["refined_iou"] = mask_iou(result.final_mask, gt_mask)
        records.append(record)
        new_preds.append(replace(
            pred,
            mask=result.final_mask.astype(np.float32),
            head_params=result.ensembled,
        ))
    return replace(scene, predictions=new_preds), records
