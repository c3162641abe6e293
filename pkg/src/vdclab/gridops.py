"""Pixel-grid sampling shared by flow warping and synthetic flow generation."""

from __future__ import annotations

import numpy as np


def bilinear_sample(values: np.ndarray, mask: np.ndarray, x: np.ndarray, y: np.ndarray):
    """Sample `values` at continuous pixel coordinates (x, y).

    Coordinates are in pixel units with (0, 0) at the center of the top-left
    pixel. Returns (sampled, ok, weights, indices):

    - sampled: interpolated values, 0 where not ok
    - ok: sample is in bounds and all four contributing pixels are valid
    - weights: (4, ...) bilinear weights for the (y0x0, y0x1, y1x0, y1x1)
      neighbors, zeroed where not ok
    - indices: (4, ...) flat indices of those neighbors into values.ravel()

    The weights/indices make the sampling differentiable bookkeeping: a loss
    can scatter gradient back onto exactly the pixels that contributed.
    """
    h, w = values.shape
    inb = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)

    xc = np.clip(x, 0.0, w - 1.0)
    yc = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0

    w00 = (1.0 - fy) * (1.0 - fx)
    w01 = (1.0 - fy) * fx
    w10 = fy * (1.0 - fx)
    w11 = fy * fx
    weights = np.stack([w00, w01, w10, w11])

    i00 = y0 * w + x0
    i01 = y0 * w + x1
    i10 = y1 * w + x0
    i11 = y1 * w + x1
    indices = np.stack([i00, i01, i10, i11])

    mflat = mask.ravel()
    ok = inb & mflat[i00] & mflat[i01] & mflat[i10] & mflat[i11]
    weights = np.where(ok, weights, 0.0)

    vflat = values.ravel()
    sampled = (weights * vflat[indices]).sum(axis=0)
    return sampled, ok, weights, indices
