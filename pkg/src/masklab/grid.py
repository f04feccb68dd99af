"""Pixel-grid topology helpers."""

import numpy as np


def neighbor_edges(height, width):
    """Undirected 8-neighborhood edges as (rows_a, cols_a, rows_b, cols_b).

    Four offsets (E, S, SE, SW) enumerate every adjacent pair exactly once.
    """
    parts = []
    for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
        r0 = max(0, -dr)
        r1 = height - max(0, dr)
        c0 = max(0, -dc)
        c1 = width - max(0, dc)
        if r0 >= r1 or c0 >= c1:
            continue
        ra, ca = np.mgrid[r0:r1, c0:c1]
        parts.append((ra.ravel(), ca.ravel(),
                      (ra + dr).ravel(), (ca + dc).ravel()))
    if not parts:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy(), empty.copy()
    rows_a = np.concatenate([p[0] for p in parts])
    cols_a = np.concatenate([p[1] for p in parts])
    rows_b = np.concatenate([p[2] for p in parts])
    cols_b = np.concatenate([p[3] for p in parts])
    return rows_a, cols_a, rows_b, cols_b
