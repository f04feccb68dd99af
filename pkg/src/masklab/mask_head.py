"""The per-instance dynamic mask head: three 1x1 conv layers, 169 parameters.

Layer sizes are 10 -> 8 -> 8 -> 1 with ReLU, ReLU, sigmoid. The 10 input
channels are the 8 mask-branch feature channels concatenated with 2 relative
coordinate channels. Forward and backward passes are written out by hand; the
backward pass is checked against finite differences in the test suite.
"""

from dataclasses import dataclass

import numpy as np

from .numerics import conv1x1_forward, sigmoid

IN_CHANNELS = 10
HIDDEN_CHANNELS = 8
PARAM_COUNT = 169  # 10*8 + 8 + 8*8 + 8 + 8*1 + 1

_BLOCK_SHAPES = (
    ("layer1_w", (10, 8)),
    ("layer1_b", (8,)),
    ("layer2_w", (8, 8)),
    ("layer2_b", (8,)),
    ("layer3_w", (8, 1)),
    ("layer3_b", (1,)),
)


@dataclass
class MaskHeadParams:
    layer1_w: np.ndarray
    layer1_b: np.ndarray
    layer2_w: np.ndarray
    layer2_b: np.ndarray
    layer3_w: np.ndarray
    layer3_b: np.ndarray

    def __post_init__(self):
        for name, shape in _BLOCK_SHAPES:
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shape:
                raise ValueError(
                    f"MaskHeadParams.{name}: expected shape {shape}, got {arr.shape}"
                )
            setattr(self, name, arr)

    @property
    def count(self):
        return sum(getattr(self, name).size for name, _ in _BLOCK_SHAPES)

    def to_flat(self):
        """Flat 169-value float32 vector, blocks in layer order, row-major."""
        return np.concatenate(
            [getattr(self, name).reshape(-1) for name, _ in _BLOCK_SHAPES]
        ).astype(np.float32)

    @classmethod
    def from_flat(cls, flat):
        flat = np.asarray(flat, dtype=np.float32).reshape(-1)
        if flat.size != PARAM_COUNT:
            raise ValueError(
                f"MaskHeadParams.from_flat: expected {PARAM_COUNT} values, "
                f"got {flat.size}"
            )
        blocks = {}
        offset = 0
        for name, shape in _BLOCK_SHAPES:
            n = int(np.prod(shape))
            blocks[name] = flat[offset:offset + n].reshape(shape)
            offset += n
        return cls(**blocks)

    @classmethod
    def zeros(cls):
        return cls.from_flat(np.zeros(PARAM_COUNT, dtype=np.float32))

    @classmethod
    def random(cls, rng, scale=0.1):
        return cls.from_flat(rng.normal(0.0, scale, PARAM_COUNT))


@dataclass
class HeadForwardOutput:
    mask: np.ndarray                  # (H, W), values strictly in (0, 1)
    first_layer_features: np.ndarray  # (H, W, 8), post-ReLU


def relative_coords(height, width, cx, cy):
    """Coordinate channels ((x-cx)/max(H,W), (y-cy)/max(H,W)), shape (H, W, 2)."""
    norm = float(max(height, width))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    out = np.empty((height, width, 2), dtype=np.float64)
    out[..., 0] = (xs - cx) / norm
    out[..., 1] = (ys - cy) / norm
    return out


def _stack_inputs(mask_features, rel_coords):
    mask_features = np.asarray(mask_features, dtype=np.float64)
    rel_coords = np.asarray(rel_coords, dtype=np.float64)
    if mask_features.ndim != 3 or mask_features.shape[2] != 8:
        raise ValueError(
            f"mask_features must be (H, W, 8), got {mask_features.shape}"
        )
    if rel_coords.shape != mask_features.shape[:2] + (2,):
        raise ValueError(
            f"rel_coords must be (H, W, 2) matching features, got {rel_coords.shape}"
        )
    return np.concatenate([mask_features, rel_coords], axis=2)


def _forward_trace(params, x10):
    """All intermediates of the forward map, for reuse by the backward pass."""
    z1 = conv1x1_forward(x10, params.layer1_w, params.layer1_b, "none")
    a1 = np.maximum(z1, 0.0)
    z2 = conv1x1_forward(a1, params.layer2_w, params.layer2_b, "none")
    a2 = np.maximum(z2, 0.0)
    z3 = conv1x1_forward(a2, params.layer3_w, params.layer3_b, "none")
    mask = sigmoid(z3[..., 0])
    return z1, a1, z2, a2, mask


def head_forward(params, mask_features, rel_coords):
    """Run the head. Returns the sigmoid mask and the post-ReLU layer-1 features."""
    x10 = _stack_inputs(mask_features, rel_coords)
    _, a1, _, _, mask = _forward_trace(params, x10)
    return HeadForwardOutput(mask=mask, first_layer_features=a1)


def head_backward(params, mask_features, rel_coords, upstream):
    """Analytic gradients of sum(upstream * mask) w.r.t. all 169 parameters.

    upstream is dL/dmask, shape (H, W). The ReLU derivative at exactly 0 is 0.
    Returns a MaskHeadParams-shaped gradient as float64 blocks in a dict keyed
    by block name, plus nothing else; use grads_to_flat for a flat view.
    """
    x10 = _stack_inputs(mask_features, rel_coords)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != x10.shape[:2]:
        raise ValueError(
            f"upstream must be (H, W) = {x10.shape[:2]}, got {upstream.shape}"
        )
    z1, a1, z2, a2, mask = _forward_trace(params, x10)

    dz3 = (upstream * mask * (1.0 - mask))[..., None]        # (H, W, 1)
    hw = x10.shape[0] * x10.shape[1]
    a2f = a2.reshape(hw, 8)
    dz3f = dz3.reshape(hw, 1)
    g_w3 = a2f.T @ dz3f
    g_b3 = dz3f.sum(axis=0)

    da2 = dz3f @ np.asarray(params.layer3_w, dtype=np.float64).T
    dz2 = da2 * (z2.reshape(hw, 8) > 0)
    g_w2 = a1.reshape(hw, 8).T @ dz2
    g_b2 = dz2.sum(axis=0)

    da1 = dz2 @ np.asarray(params.layer2_w, dtype=np.float64).T
    dz1 = da1 * (z1.reshape(hw, 8) > 0)
    g_w1 = x10.reshape(hw, 10).T @ dz1
    g_b1 = dz1.sum(axis=0)

    return {
        "layer1_w": g_w1, "layer1_b": g_b1,
        "layer2_w": g_w2, "layer2_b": g_b2,
        "layer3_w": g_w3, "layer3_b": g_b3,
    }


def grads_to_flat(grads):
    """Flatten a gradient dict into the 169-vector layout of to_flat."""
    return np.concatenate([grads[name].reshape(-1) for name, _ in _BLOCK_SHAPES])
