"""Estimate pendulum concepts back from a rendered (or decoded) image.

Used to score generated images against requested targets with the same
geometry that produced the training labels.  Estimates are intensity-weighted
centroids per region, so they degrade gracefully on blurry decoder output.
`time` is invisible in the image and is never estimable; the shadow pair is
flagged non-estimable when the shadow mass touches the frame border (the
rendered shadow is clipped there, so its extent no longer encodes the label).
"""

from __future__ import annotations

import numpy as np

from . import generators as g


def _grid(image: np.ndarray):
    h, w = image.shape
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    return np.meshgrid(xs, ys)


def pendulum_estimate(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return (raw_estimates, estimable) over the 5 pendulum concepts.

    Non-estimable entries are NaN.
    """
    img = np.asarray(image, dtype=np.float64)
    X, Y = _grid(img)
    est = np.full(5, np.nan)
    ok = np.zeros(5, dtype=bool)

    # sun: darker-than-background mass in the top band
    band = Y < 0.13
    wgt = np.clip(0.95 - img, 0.0, 1.0) * band
    if wgt.sum() > 1e-6:
        est[1] = float((wgt * X).sum() / wgt.sum())
        ok[1] = True

    # rod + bob: near-black mass below the sun, above the shadow; the centroid
    # of a uniform rod lies on its axis, so the direction from the pivot gives
    # the angle exactly on clean renders
    band = (Y > 0.15) & (Y < 0.78)
    wgt = np.clip(0.45 - img, 0.0, 1.0) * band
    if wgt.sum() > 1e-6:
        cx = float((wgt * X).sum() / wgt.sum())
        cy = float((wgt * Y).sum() / wgt.sum())
        px, py = g.PEND_PIVOT
        est[0] = float(np.rad2deg(np.arctan2(cx - px, cy - py)))
        ok[0] = True

    # shadow: mid-gray band just above the ground line
    band = (Y > g.PEND_GROUND_Y - 0.045) & (Y < g.PEND_GROUND_Y - 0.002)
    wgt = np.where((img > 0.40) & (img < 0.72), 1.0, 0.0) * band
    total = wgt.sum()
    if total > 1e-6:
        col = wgt.sum(axis=0)
        xs = X[0]
        cum = np.cumsum(col) / col.sum()
        lo = float(np.interp(0.02, cum, xs))
        hi = float(np.interp(0.98, cum, xs))
        interior = lo > 0.03 and hi < 0.97
        if interior:
            est[3] = hi - lo
            est[4] = 0.5 * (lo + hi)
            ok[3] = ok[4] = True
    return est, ok


def pendulum_estimate_normalized(image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    est, ok = pendulum_estimate(image)
    ranges = g.pendulum_ranges()
    out = np.full(5, np.nan)
    out[ok] = g.normalize(est[ok], [ranges[i] for i in np.flatnonzero(ok)])
    return out, ok
