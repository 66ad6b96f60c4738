"""Procedural scene generators with analytically checkable concept labels.

Each dataset is defined by a pure label model (raw parameters -> concepts),
a renderer, and a ground-truth structure over its concepts.  Raw parameters
are drawn from a per-sample RNG stream keyed by (global_seed, index), so
samples are bit-identical regardless of generation order.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from ..errors import DataError
from . import render

MAX_RESAMPLE = 1000

# ---------------------------------------------------------------------------
# Pendulum: a rod swinging under a sun, casting a shadow on the floor.
# Concepts: (pendulum_angle, light_position, time, shadow_length, shadow_position)
# ---------------------------------------------------------------------------

PEND_PIVOT = (0.5, 0.2)  # unit image coords, y down
PEND_ROD_LEN = 0.35
PEND_SUN_Y = 0.05
PEND_GROUND_Y = 0.85
PEND_THETA_RANGE = (-40.0, 40.0)  # degrees
PEND_LIGHT_RANGE = (0.1, 0.9)
PEND_TIME_RANGE = (6.0, 18.0)

# gray levels (background is 1.0)
PEND_GRAY = {"ground": 0.30, "shadow": 0.55, "rod": 0.0, "bob": 0.0, "sun": 0.65}
PEND_ROD_RADIUS = 0.012
PEND_BOB_RADIUS = 0.04
PEND_SUN_RADIUS = 0.05


def pendulum_tip(theta_deg):
    th = np.deg2rad(theta_deg)
    return PEND_PIVOT[0] + PEND_ROD_LEN * np.sin(th), PEND_PIVOT[1] + PEND_ROD_LEN * np.cos(th)


def shadow_x(px, py, light_x):
    """Ground intersection of the ray from the sun through point p."""
    return light_x + (PEND_GROUND_Y - PEND_SUN_Y) * (px - light_x) / (py - PEND_SUN_Y)


def pendulum_shadow(theta_deg, light_x):
    """(shadow_length, shadow_position, s_tip, s_pivot) from the projection formulas."""
    tx, ty = pendulum_tip(theta_deg)
    s_tip = shadow_x(tx, ty, light_x)
    s_piv = shadow_x(PEND_PIVOT[0], PEND_PIVOT[1], light_x)
    return np.abs(s_tip - s_piv), 0.5 * (s_tip + s_piv), s_tip, s_piv


@functools.lru_cache(maxsize=1)
def pendulum_label_ranges() -> tuple:
    """Reachable (min, max) of shadow_length / shadow_position over the accepted region.

    Accepted region: tip shadow inside [0,1] (see module notes on the rejection
    rule).  Extremes are taken on a dense grid and padded slightly outward so
    every sampled label normalizes strictly into [0,1].
    """
    th = np.linspace(*PEND_THETA_RANGE, 1601)[:, None]
    xl = np.linspace(*PEND_LIGHT_RANGE, 1601)[None, :]
    ln, pos, s_tip, _ = pendulum_shadow(th, xl)
    ok = (s_tip >= 0.0) & (s_tip <= 1.0)
    pad = 2e-3
    ln_hi = float(ln[ok].max())
    p_lo, p_hi = float(pos[ok].min()), float(pos[ok].max())
    span = p_hi - p_lo
    return (0.0, ln_hi * (1.0 + pad)), (p_lo - pad * span, p_hi + pad * span)


def pendulum_concept_names() -> list[str]:
    return ["pendulum_angle", "light_position", "time", "shadow_length", "shadow_position"]


def pendulum_ranges() -> list[tuple]:
    len_r, pos_r = pendulum_label_ranges()
    return [PEND_THETA_RANGE, PEND_LIGHT_RANGE, PEND_TIME_RANGE, len_r, pos_r]


def pendulum_sample(rng: np.random.Generator) -> np.ndarray:
    """Draw one raw concept vector; resamples while the tip shadow exits the image."""
    for _ in range(MAX_RESAMPLE):
        theta = rng.uniform(*PEND_THETA_RANGE)
        u = rng.uniform()
        eta_l = np.clip(rng.normal(0.0, 0.01), -0.03, 0.03)
        eta_t = np.clip(rng.normal(0.0, 0.1), -0.3, 0.3)
        light = np.clip(0.1 + 0.8 * u + eta_l, *PEND_LIGHT_RANGE)
        time = np.clip(6.0 + 12.0 * u + eta_t, *PEND_TIME_RANGE)
        length, position, s_tip, _ = pendulum_shadow(theta, light)
        if 0.0 <= s_tip <= 1.0:
            return np.array([theta, light, time, length, position], dtype=np.float64)
    raise DataError("pendulum sampler exhausted retries; shadow never landed inside the image")


def pendulum_render(raw: np.ndarray, image_size: int) -> np.ndarray:
    theta, light = float(raw[0]), float(raw[1])
    _, _, s_tip, s_piv = pendulum_shadow(theta, light)
    tip = pendulum_tip(theta)
    cv = render.Canvas(image_size)
    cv.rect(0.0, 1.0, PEND_GROUND_Y - 0.005, PEND_GROUND_Y + 0.005, PEND_GRAY["ground"])
    lo, hi = sorted((float(s_tip), float(s_piv)))
    lo, hi = max(lo, 0.0), min(hi, 1.0)  # rendered shadow is clipped to the frame
    if hi > lo:
        cv.rect(lo, hi, PEND_GROUND_Y - 0.03, PEND_GROUND_Y - 0.006, PEND_GRAY["shadow"])
    cv.capsule(PEND_PIVOT, tip, PEND_ROD_RADIUS, PEND_GRAY["rod"])
    cv.disc(tip[0], tip[1], PEND_BOB_RADIUS, PEND_GRAY["bob"])
    cv.disc(light, PEND_SUN_Y, PEND_SUN_RADIUS, PEND_GRAY["sun"])
    return cv.image()


def pendulum_structure() -> tuple:
    """(adjacency_gt m x m, mask_gt m x m).

    Edges: angle -> {length, position}, light -> {length, position}.  The
    time / light correlation comes from the shared draw u, not an edge; their
    shared factor appears in the mask (factor 2 feeds concepts 1 and 2).
    """
    adj = np.zeros((5, 5), dtype=np.int64)
    adj[0, 3] = adj[0, 4] = 1
    adj[1, 3] = adj[1, 4] = 1
    mask = np.eye(5, dtype=np.int64)
    mask[2, 1] = 1
    return adj, mask


# ---------------------------------------------------------------------------
# Flow: a ball raises the water level of a tank that leaks through a hole.
# Concepts: (ball_size, water_height, hole_height, water_flow)
# ---------------------------------------------------------------------------

FLOW_R_RANGE = (0.08, 0.18)
FLOW_Q_RANGE = (0.1, 0.25)
FLOW_C = 1.2

FLOW_GRAY = {"wall": 0.2, "water": 0.7, "ball": 0.0, "jet": 0.45, "ground": 0.3}
FLOW_LEFT, FLOW_RIGHT, FLOW_BOTTOM = 0.2, 0.72, 0.9
FLOW_WALL_T = 0.015


def flow_height(r):
    """Water height from ball displacement (monotone in r)."""
    return 0.30 + 4.0 * np.square(r)


def flow_reach(h, q):
    """Torricelli-style jet reach; zero when the level is at or below the hole."""
    return FLOW_C * np.sqrt(np.maximum(h - q, 0.0) * q)


def flow_concept_names() -> list[str]:
    return ["ball_size", "water_height", "hole_height", "water_flow"]


def flow_ranges() -> list[tuple]:
    h_lo, h_hi = flow_height(FLOW_R_RANGE[0]), flow_height(FLOW_R_RANGE[1])
    # reach is increasing in h; over q the max sits at q = h/2 (interior here),
    # the min at a q endpoint
    f_hi = FLOW_C * h_hi / 2.0
    f_lo = min(flow_reach(h_lo, FLOW_Q_RANGE[0]), flow_reach(h_lo, FLOW_Q_RANGE[1]))
    return [FLOW_R_RANGE, (float(h_lo), float(h_hi)), FLOW_Q_RANGE, (float(f_lo), float(f_hi))]


def flow_sample(rng: np.random.Generator) -> np.ndarray:
    r = rng.uniform(*FLOW_R_RANGE)
    q = rng.uniform(*FLOW_Q_RANGE)
    h = flow_height(r)
    return np.array([r, h, q, flow_reach(h, q)], dtype=np.float64)


def flow_render(raw: np.ndarray, image_size: int) -> np.ndarray:
    r, h, q, f = (float(v) for v in raw)
    cv = render.Canvas(image_size)
    cv.rect(0.0, 1.0, FLOW_BOTTOM, FLOW_BOTTOM + 0.01, FLOW_GRAY["ground"])
    cv.rect(FLOW_LEFT, FLOW_RIGHT, FLOW_BOTTOM - h, FLOW_BOTTOM, FLOW_GRAY["water"])
    cv.disc(0.40, FLOW_BOTTOM - r, r, FLOW_GRAY["ball"])
    # container walls on top of the water
    cv.rect(FLOW_LEFT - FLOW_WALL_T, FLOW_LEFT, 0.35, FLOW_BOTTOM, FLOW_GRAY["wall"])
    cv.rect(FLOW_RIGHT, FLOW_RIGHT + FLOW_WALL_T, 0.35, FLOW_BOTTOM, FLOW_GRAY["wall"])
    cv.rect(FLOW_LEFT - FLOW_WALL_T, FLOW_RIGHT + FLOW_WALL_T, FLOW_BOTTOM, FLOW_BOTTOM + 0.01, FLOW_GRAY["wall"])
    if f > 0.0:
        s = np.linspace(0.0, 1.0, 24)
        pts = np.stack([FLOW_RIGHT + f * s, (FLOW_BOTTOM - q) + q * s * s], axis=1)
        cv.polyline(pts, 0.008, FLOW_GRAY["jet"])
    return cv.image()


def flow_structure() -> tuple:
    adj = np.zeros((4, 4), dtype=np.int64)
    adj[0, 1] = 1  # ball size -> water height
    adj[1, 3] = 1  # water height -> flow
    adj[2, 3] = 1  # hole height -> flow
    mask = np.eye(4, dtype=np.int64)
    return adj, mask


# ---------------------------------------------------------------------------
# dSprites-style: one filled ellipse; concepts are functions of (scale, x, y).
# Concepts: (scale, pos_x, sum_xy, sumsq_xy)
# ---------------------------------------------------------------------------

SPR_S_RANGE = (0.5, 1.0)
SPR_XY_RANGE = (0.2, 0.8)
SPR_AXES = (0.16, 0.10)


def sprites_concept_names() -> list[str]:
    return ["scale", "pos_x", "sum_xy", "sumsq_xy"]


def sprites_ranges() -> list[tuple]:
    lo, hi = SPR_XY_RANGE
    return [SPR_S_RANGE, SPR_XY_RANGE, (2 * lo, 2 * hi), (2 * lo * lo, 2 * hi * hi)]


def sprites_concepts(s, x, y) -> np.ndarray:
    return np.array([s, x, x + y, x * x + y * y], dtype=np.float64)


def sprites_sample(rng: np.random.Generator) -> np.ndarray:
    s = rng.uniform(*SPR_S_RANGE)
    x = rng.uniform(*SPR_XY_RANGE)
    y = rng.uniform(*SPR_XY_RANGE)
    return np.array([s, x, y], dtype=np.float64)


def sprites_render(raw: np.ndarray, image_size: int) -> np.ndarray:
    s, x, y = (float(v) for v in raw)
    cv = render.Canvas(image_size)
    cv.ellipse(x, y, SPR_AXES[0] * s, SPR_AXES[1] * s, 0.0)
    return cv.image()


def sprites_structure() -> tuple:
    """No causal edges; the mask records which concepts share raw sources.

    x feeds concepts 1,2,3 and y feeds 2,3, so in the lower-triangular
    convention factor 2 also serves concept 1, and factor 3 serves 1 and 2.
    """
    adj = np.zeros((4, 4), dtype=np.int64)
    mask = np.eye(4, dtype=np.int64)
    mask[2, 1] = 1
    mask[3, 1] = 1
    mask[3, 2] = 1
    return adj, mask


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SceneFamily:
    name: str
    concept_names: tuple
    sample: callable
    raw_to_concepts: callable
    render: callable
    structure: callable


def _identity_concepts(raw):
    return raw


def _sprites_raw_to_concepts(raw):
    return sprites_concepts(*raw)


FAMILIES = {
    "pendulum": SceneFamily(
        "pendulum", tuple(pendulum_concept_names()), pendulum_sample, _identity_concepts,
        pendulum_render, pendulum_structure,
    ),
    "flow": SceneFamily(
        "flow", tuple(flow_concept_names()), flow_sample, _identity_concepts,
        flow_render, flow_structure,
    ),
    "dsprites": SceneFamily(
        "dsprites", tuple(sprites_concept_names()), sprites_sample, _sprites_raw_to_concepts,
        sprites_render, sprites_structure,
    ),
}


def family_ranges(name: str) -> list[tuple]:
    return {"pendulum": pendulum_ranges, "flow": flow_ranges, "dsprites": sprites_ranges}[name]()


def normalize(raw: np.ndarray, ranges) -> np.ndarray:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return (np.asarray(raw) - lo) / (hi - lo)


def denormalize(norm: np.ndarray, ranges) -> np.ndarray:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return lo + np.asarray(norm) * (hi - lo)


def make_sample(name: str, index: int, seed: int, image_size: int) -> tuple:
    """Render one sample of a family; bit-identical for a given (seed, index)."""
    fam = FAMILIES[name]
    rng = np.random.default_rng([seed, index])
    raw = fam.sample(rng)
    img = fam.render(raw, image_size)
    concepts = normalize(fam.raw_to_concepts(raw), family_ranges(name))
    return img, concepts, raw
