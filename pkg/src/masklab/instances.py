"""Shared scene data model: ground-truth instances, predictions, and the
scene container that binds them to the per-pixel feature and color maps.

Boxes are [x1, y1, x2, y2] in pixel units with x1 < x2 and y1 < y2. Masks are
(H, W) float32 maps; ground-truth masks are binary, prediction masks are
probabilities binarized at 0.5 where an IoU is needed.
"""

from dataclasses import dataclass, field

import numpy as np

from .boxes import validate_box
from .mask_head import MaskHeadParams


@dataclass
class GroundTruthInstance:
    class_id: int
    box: np.ndarray
    mask: np.ndarray

    def validate(self, height, width):
        if self.class_id < 0:
            raise ValueError(f"ground truth class_id must be >= 0, got {self.class_id}")
        validate_box(self.box)
        if self.mask.shape != (height, width):
            raise ValueError(
                f"ground truth mask shape {self.mask.shape} does not match "
                f"scene ({height}, {width})"
            )
        if not (self.mask > 0).any():
            raise ValueError("ground truth mask is empty")
        return self


@dataclass
class InstancePrediction:
    class_id: int
    score: float
    box: np.ndarray
    mask: np.ndarray
    head_params: MaskHeadParams | None = None

    def validate(self, height, width):
        if self.class_id < 0:
            raise ValueError(f"prediction class_id must be >= 0, got {self.class_id}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"prediction score must be in [0, 1], got {self.score}")
        validate_box(self.box)
        if self.mask.shape != (height, width):
            raise ValueError(
                f"prediction mask shape {self.mask.shape} does not match "
                f"scene ({height}, {width})"
            )
        return self


@dataclass
class Scene:
    scene_id: int
    seed: int
    height: int
    width: int
    mask_features: np.ndarray
    color_map: np.ndarray
    ground_truths: list[GroundTruthInstance] = field(default_factory=list)
    predictions: list[InstancePrediction] = field(default_factory=list)

    def validate(self):
        h, w = self.height, self.width
        if h <= 0 or w <= 0:
            raise ValueError(f"scene size must be positive, got ({h}, {w})")
        if self.mask_features.shape != (h, w, 8):
            raise ValueError(
                f"mask_features shape {self.mask_features.shape}, expected ({h}, {w}, 8)"
            )
        if self.color_map.shape != (h, w, 3):
            raise ValueError(
                f"color_map shape {self.color_map.shape}, expected ({h}, {w}, 3)"
            )
        for gt in self.ground_truths:
            gt.validate(h, w)
        for pred in self.predictions:
            pred.validate(h, w)
        return self
