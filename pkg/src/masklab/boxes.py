"""Axis-aligned box helpers shared by refinement, losses, synthesis, and eval.

Boxes are (x1, y1, x2, y2) with x1 < x2 and y1 < y2, in pixel units. Integer
boxes follow the half-open convention: a box (0, 0, 2, 2) covers pixel columns
0..1 and rows 0..1.
"""

import numpy as np


def validate_box(box):
    x1, y1, x2, y2 = (float(v) for v in box)
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {box!r}: require x1 < x2 and y1 < y2")
    return x1, y1, x2, y2


def box_iou(a, b):
    """Intersection over union of two boxes; 0 for an empty union."""
    ax1, ay1, ax2, ay2 = validate_box(a)
    bx1, by1, bx2, by2 = validate_box(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_center(box):
    """Center (cx, cy) of a box."""
    x1, y1, x2, y2 = validate_box(box)
    return 0.5 * (x1 + x2), 0.5 * (y1 + y2)


def tight_box(mask):
    """Tight bounding box of a nonempty binary mask, half-open integer coords."""
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise ValueError("tight_box: mask is empty")
    return (float(cols.min()), float(rows.min()),
            float(cols.max() + 1), float(rows.max() + 1))


def box_pixel_bounds(box, height, width):
    """Integer pixel index bounds (c0, r0, c1, r1) of a box, clipped to the grid.

    Half-open: columns c0..c1-1 and rows r0..r1-1 lie inside.
    """
    x1, y1, x2, y2 = validate_box(box)
    c0 = max(int(np.floor(x1)), 0)
    r0 = max(int(np.floor(y1)), 0)
    c1 = min(int(np.ceil(x2)), width)
    r1 = min(int(np.ceil(y2)), height)
    return c0, r0, c1, r1


def box_to_mask(box, height, width):
    """Filled binary mask of a box on an height x width grid (float32 0/1)."""
    c0, r0, c1, r1 = box_pixel_bounds(box, height, width)
    mask = np.zeros((height, width), dtype=np.float32)
    if c0 < c1 and r0 < r1:
        mask[r0:r1, c0:c1] = 1.0
    return mask


def perimeter_pixels(box, height, width):
    """Pixels on the one-pixel-wide boundary ring of a box, corners once.

    Returns an (n, 2) int array of (row, col) pairs in scan order, clipped to
    the grid. Empty boxes after clipping yield an empty array.
    """
    c0, r0, c1, r1 = box_pixel_bounds(box, height, width)
    if c0 >= c1 or r0 >= r1:
        return np.zeros((0, 2), dtype=np.int64)
    coords = []
    for c in range(c0, c1):  # top row
        coords.append((r0, c))
    if r1 - 1 > r0:  # bottom row
        for c in range(c0, c1):
            coords.append((r1 - 1, c))
    for r in range(r0 + 1, r1 - 1):  # side columns, excluding corners
        coords.append((r, c0))
        if c1 - 1 > c0:
            coords.append((r, c1 - 1))
    return np.asarray(coords, dtype=np.int64)
