"""Refinement energy: prototypes, gray zone, pairwise graph, the analytic
gradient against finite differences, head ensembling, and the refinement
drivers."""

import math
from dataclasses import replace

import numpy as np
import pytest

from helpers import ENERGY_FD_SEEDS, energy_fd_case, energy_fd_worst
from masklab.imr import (IMRConfig, build_pairwise_graph, build_unary_context,
                         compute_background_prototype,
                         compute_foreground_prototype, compute_gray_zone,
                         ensemble_heads, imr_energy, refine_instance,
                         refine_scene)
from masklab.mask_head import (PARAM_COUNT, MaskHeadParams, grads_to_flat,
                               head_forward, relative_coords)
from masklab.synthgen import SynthConfig, add_predictions, generate_scene


def test_foreground_prototype_constant_features():
    features = np.full((2, 3, 4), 0.7)
    p = compute_foreground_prototype(features, np.ones((2, 3)))
    assert np.allclose(p, 0.7)
    assert np.array_equal(compute_foreground_prototype(features, np.zeros((2, 3))),
                          np.zeros(4))


def test_foreground_prototype_two_pixel_example():
    features = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    mask = np.array([[1.0, 0.5]])
    p = compute_foreground_prototype(features, mask)
    assert np.allclose(p, [0.5, 0.25])
    p_soft = compute_foreground_prototype(features, mask, "soft_area")
    assert np.allclose(p_soft, [1.0 / 1.5, 0.5 / 1.5])


def test_foreground_prototype_soft_area_empty_mask():
    features = np.ones((2, 2, 3))
    p = compute_foreground_prototype(features, np.zeros((2, 2)), "soft_area")
    assert np.array_equal(p, np.zeros(3))


def test_foreground_prototype_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        compute_foreground_prototype(np.ones((2, 2, 3)), np.ones((3, 2)))


def test_background_prototype_small_perimeter_uses_all():
    features = np.zeros((1, 5, 2))
    features[0, :, 0] = [3.0, 1.0, 4.0, 1.0, 5.0]
    p = compute_background_prototype(features, np.zeros(2), (0, 0, 5, 1), topk=5)
    assert np.allclose(p, [np.mean([3, 1, 4, 1, 5]), 0.0])


def test_background_prototype_constant_features():
    features = np.full((6, 6, 3), 0.4)
    p = compute_background_prototype(features, np.zeros(3), (1, 1, 5, 5))
    assert np.allclose(p, 0.4)


def test_background_prototype_picks_worst_matches():
    # six perimeter pixels with distinct errors against a zero prototype;
    # the five largest come from features 6, 5, 4, 3, 2
    features = np.zeros((4, 5, 2))
    features[0, 0:3, 0] = [1.0, 6.0, 2.0]
    features[1, 0:3, 0] = [5.0, 3.0, 4.0]
    p = compute_background_prototype(features, np.zeros(2), (0, 0, 3, 2), topk=5)
    errors = sorted([1, 36, 4, 25, 9, 16], reverse=True)[:5]
    expected = np.mean([np.sqrt(e) for e in errors])
    assert np.allclose(p, [expected, 0.0])
    assert math.isclose(p[0], 4.0)


def test_background_prototype_rejects_outside_box():
    with pytest.raises(ValueError):
        compute_background_prototype(np.ones((4, 4, 2)), np.zeros(2),
                                     (10, 10, 12, 12))


def test_gray_zone_hand_example():
    fg_err = np.array([10.0, 4.0, 1.0])
    bg_err = np.array([100.0, 100.0, 100.0])
    gray, rho = compute_gray_zone(fg_err, bg_err)
    assert rho == 2.0
    assert gray.tolist() == [True, True, False]


def test_gray_zone_uniform_error_marks_everything():
    gray, rho = compute_gray_zone(np.full((2, 2), 3.0), np.full((2, 2), 3.0))
    assert rho == 0.6
    assert gray.all()


def test_gray_zone_zero_error_marks_nothing():
    gray, rho = compute_gray_zone(np.zeros((2, 2)), np.zeros((2, 2)))
    assert rho == 0.0
    assert not gray.any()


def test_pairwise_graph_constant_features_keeps_all_edges():
    features = np.full((4, 4, 8), 0.3, dtype=np.float32)
    graph = build_pairwise_graph(features, IMRConfig())
    # 12 horizontal, 12 vertical, 18 diagonal
    assert graph.edge_count == 42
    assert np.all(graph.weights == 1.0)


def test_pairwise_graph_distant_features_keep_none():
    features = np.zeros((3, 3, 8))
    features[..., 0] = 10.0 * np.arange(9).reshape(3, 3)
    graph = build_pairwise_graph(features, IMRConfig())
    assert graph.edge_count == 0


def test_pairwise_graph_region_filter():
    features = np.full((4, 4, 8), 0.3)
    region = np.zeros((4, 4), dtype=bool)
    region[:, :2] = True
    graph = build_pairwise_graph(features, IMRConfig(), region)
    # edges inside a 4x2 block: 4 horizontal, 6 vertical, 6 diagonal
    assert graph.edge_count == 16


def _zero_head_setup(h=4, w=4):
    params = MaskHeadParams.from_flat(np.zeros(PARAM_COUNT, dtype=np.float32))
    features = np.full((h, w, 8), 0.3, dtype=np.float32)
    rel = relative_coords(h, w, (w - 1) / 2, (h - 1) / 2)
    out = head_forward(params, features, rel)
    config = IMRConfig()
    context = build_unary_context(out.first_layer_features, out.mask,
                                  (0, 0, w, h), config)
    graph = build_pairwise_graph(features, config)
    return params, features, rel, context, graph, config


def test_energy_zero_head_closed_form():
    # the zero head outputs mask 0.5 and zero first-layer features, so both
    # prototypes vanish, no pixel is gray, both similarities are 1, and the
    # pairwise differences are zero:
    # energy = mu1 * N * (eta*0.5 + 0.5), and the only nonzero partial is
    # the output bias: -mu1 * (eta - 1) * sigmoid'(0) * N
    params, features, rel, context, graph, config = _zero_head_setup()
    assert not context.gray_mask.any()
    assert np.all(context.fg_sim == 1.0) and np.all(context.bg_sim == 1.0)
    energy, grads = imr_energy(params, features, rel, context, graph, config)
    n = 16
    assert math.isclose(energy, config.mu1 * n * (config.eta + 1.0) * 0.5,
                        rel_tol=1e-12)
    flat = grads_to_flat(grads)
    expected_bias = -config.mu1 * (config.eta - 1.0) * 0.25 * n
    assert math.isclose(flat[-1], expected_bias, rel_tol=1e-12)
    assert np.all(flat[:-1] == 0.0)


def test_energy_region_restricts_unary():
    params, features, rel, context, graph, config = _zero_head_setup(h=5, w=5)
    region = np.zeros((5, 5), dtype=bool)
    region[1:4, 1:4] = True
    graph_roi = build_pairwise_graph(features, config, region)
    energy, _ = imr_energy(params, features, rel, context, graph_roi, config,
                           region)
    assert math.isclose(energy, config.mu1 * 9 * (config.eta + 1.0) * 0.5,
                        rel_tol=1e-12)


def test_energy_gradient_matches_finite_differences():
    for seed in ENERGY_FD_SEEDS[:8]:
        assert energy_fd_worst(seed) <= 1e-3


def test_energy_ignores_gray_pixel_similarities():
    # values stored at gray pixels must not leak into the energy or gradient
    config = IMRConfig()
    for seed in ENERGY_FD_SEEDS:
        scene, gt, rel, params = energy_fd_case(seed)
        out = head_forward(params, scene.mask_features, rel)
        context = build_unary_context(out.first_layer_features, out.mask,
                                      gt.box, config)
        if not context.gray_mask.any():
            continue
        graph = build_pairwise_graph(scene.mask_features, config)
        e0, g0 = imr_energy(params, scene.mask_features, rel, context, graph,
                            config)
        poisoned = replace(
            context,
            fg_sim=np.where(context.gray_mask, 123.0, context.fg_sim),
            bg_sim=np.where(context.gray_mask, -77.0, context.bg_sim),
        )
        e1, g1 = imr_energy(params, scene.mask_features, rel, poisoned, graph,
                            config)
        assert e1 == e0
        assert np.array_equal(grads_to_flat(g1), grads_to_flat(g0))
        return
    raise AssertionError("no case with a nonempty gray zone")


def test_ensemble_heads_identity_and_symmetry():
    rng_params = MaskHeadParams.random(np.random.default_rng(0), scale=0.5)
    other = MaskHeadParams.random(np.random.default_rng(1), scale=0.5)
    same = ensemble_heads(rng_params, rng_params)
    assert np.array_equal(same.to_flat(), rng_params.to_flat())
    ab = ensemble_heads(rng_params, other)
    ba = ensemble_heads(other, rng_params)
    assert np.array_equal(ab.to_flat(), ba.to_flat())


def test_ensemble_heads_midpoint():
    a = MaskHeadParams.from_flat(np.zeros(PARAM_COUNT, dtype=np.float32))
    b_flat = np.zeros(PARAM_COUNT, dtype=np.float32)
    b_flat[-1] = 0.6
    b = MaskHeadParams.from_flat(b_flat)
    mid = ensemble_heads(a, b)
    assert math.isclose(float(mid.to_flat()[-1]), 0.3, rel_tol=1e-6)


def test_refine_zero_iterations_is_identity():
    scene, gt, rel, params = energy_fd_case(3)
    result = refine_instance(params, scene, gt.box, IMRConfig(iterations=0))
    assert not result.aborted
    assert len(result.energy_trace) == 1
    assert np.array_equal(result.refined.to_flat(), params.to_flat())
    assert np.array_equal(result.ensembled.to_flat(), params.to_flat())
    reference = head_forward(params, scene.mask_features, rel).mask
    assert np.array_equal(result.final_mask, reference)


def test_refine_trace_length_and_determinism():
    scene, gt, _, params = energy_fd_case(4)
    config = IMRConfig(iterations=6)
    a = refine_instance(params, scene, gt.box, config)
    b = refine_instance(params, scene, gt.box, config)
    assert len(a.energy_trace) == 7
    assert all(np.isfinite(e) for e in a.energy_trace)
    assert a.energy_trace == b.energy_trace
    assert np.array_equal(a.final_mask, b.final_mask)
    assert np.array_equal(a.ensembled.to_flat(), b.ensembled.to_flat())


def test_refine_aborts_on_non_finite_head():
    scene, gt, _, params = energy_fd_case(5)
    flat = params.to_flat().copy()
    flat[0] = np.nan
    broken = MaskHeadParams.from_flat(flat)
    result = refine_instance(broken, scene, gt.box, IMRConfig(iterations=3))
    assert result.aborted
    assert result.energy_trace == []
    assert result.refined is broken


def test_refine_with_roi_crop_runs():
    scene, gt, _, params = energy_fd_case(6)
    result = refine_instance(params, scene, gt.box,
                             IMRConfig(iterations=3, roi_crop=True))
    assert not result.aborted
    assert len(result.energy_trace) == 4


def _scene_with_predictions(seed):
    config = SynthConfig(height=16, width=16, min_instances=1, max_instances=2,
                         head_fit_iterations=40)
    scene = generate_scene(config, seed, scene_id=seed)
    add_predictions(scene, config, seed=seed)
    return scene


def test_refine_scene_records():
    scene = _scene_with_predictions(5)
    config = IMRConfig(iterations=4)
    refined, records = refine_scene(scene, config, global_seed=9)
    assert len(records) == len(scene.predictions) >= 1
    for record, pred in zip(records, refined.predictions):
        assert set(record) == {"scene_id", "instance", "init_iou",
                               "refined_iou", "energy_trace", "aborted"}
        assert record["scene_id"] == 5
        assert record["init_iou"] is not None
        assert record["refined_iou"] is not None
        assert len(record["energy_trace"]) == 5
        assert not record["aborted"]
        assert pred.mask.dtype == np.float32
        assert pred.head_params is not None


def test_refine_scene_deterministic():
    scene = _scene_with_predictions(6)
    config = IMRConfig(iterations=3)
    ra = refine_scene(scene, config, global_seed=2)
    rb = refine_scene(scene, config, global_seed=2)
    assert ra[1] == rb[1]
    for pa, pb in zip(ra[0].predictions, rb[0].predictions):
        assert np.array_equal(pa.mask, pb.mask)


def test_refine_scene_skips_predictions_without_head():
    scene = _scene_with_predictions(7)
    stripped = replace(scene.predictions[0], head_params=None)
    scene.predictions[0] = stripped
    refined, records = refine_scene(scene, IMRConfig(iterations=2), 0)
    assert len(records) == len(scene.predictions) - 1
    assert refined.predictions[0] is stripped


def test_imr_config_validation():
    with pytest.raises(ValueError):
        IMRConfig(iterations=-1).validate()
    with pytest.raises(ValueError):
        IMRConfig(mu1=0.0).validate()
    with pytest.raises(ValueError):
        IMRConfig(bg_topk=0).validate()
    with pytest.raises(ValueError):
        IMRConfig(fg_normalization="mean").validate()
    IMRConfig().validate()
