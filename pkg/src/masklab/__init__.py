"""Desk-scale instance mask refinement, composed novel classifiers, and
detection/segmentation evaluation, validated on synthetic scenes."""

from .boxes import box_center, box_iou, box_to_mask, perimeter_pixels, tight_box
from .evaluation import (EvalConfig, EvalReport, average_precision,
                         evaluate_scenes, fg_ap, gt_class_allocation,
                         gt_mask_allocation, mask_iou, pooled_vs_classmean)
from .imr import (IMRConfig, PairwiseGraph, RefineResult, UnaryContext,
                  build_pairwise_graph, build_unary_context,
                  compute_background_prototype, compute_foreground_prototype,
                  compute_gray_zone, ensemble_heads, imr_energy,
                  refine_instance, refine_scene)
from .instances import GroundTruthInstance, InstancePrediction, Scene
from .io_formats import (FormatError, SceneFormatError, TensorFormatError,
                         read_scene, read_tensor, write_scene, write_tensor)
from .losses import (LossConfig, bce_loss, dice_loss, focal_loss,
                     full_mask_loss, iou_box_loss, mixup_focal_loss,
                     pairwise_box_loss, projection_loss, total_loss)
from .mask_head import (PARAM_COUNT, HeadForwardOutput, MaskHeadParams,
                        head_backward, head_forward, relative_coords)
from .ncc import (ComposedClassifier, NCCConfig, build_basis, compose,
                  export_alpha, fit_alpha, make_recovery_problem,
                  numerical_rank, predict_logits)
from .numerics import AdamWState, NonFiniteError, adamw_step, similarity
from .seeding import mix_seed, rng_for, splitmix64
from .synthgen import (SynthConfig, add_predictions, audit_separability,
                       build_suite_scene, fit_reference_head, generate_scene,
                       perturb_head, suite_config)

__version__ = "0.1.0"
