"""Generation-phase engine: root-factor identification, do-interventions, and
concept control (head inversion followed by root-factor optimization)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import graphs
from . import model as M
from .errors import CyclicGraphError, DataError
from .optim import AdamW

DEFAULT_TAU = 0.1


@dataclass
class ControlSettings:
    steps: int = 500
    step_size: float = 0.05
    restarts: int = 8
    prior_weight: float = 1.0  # weight on ||eps_root||^2 / 2
    deterministic_z: bool = True


@dataclass
class ControlRequest:
    mode: str  # "factor" | "concept"
    assignments: dict = field(default_factory=dict)  # factor index -> value (factor mode)
    targets: dict = field(default_factory=dict)  # concept index -> value in [0,1]
    settings: ControlSettings = field(default_factory=ControlSettings)

    def __post_init__(self):
        if self.mode not in ("factor", "concept"):
            raise DataError(f"mode must be 'factor' or 'concept', got {self.mode!r}")
        for y in self.targets.values():
            if not 0.0 <= y <= 1.0:
                raise DataError(f"concept targets must lie in [0,1], got {y}")


@dataclass
class RootSet:
    indicator: np.ndarray  # {0,1}^n, 1 where the factor has no incoming edge
    threshold: float
    binary_adjacency: np.ndarray

    @property
    def indices(self) -> list[int]:
        return np.flatnonzero(self.indicator).tolist()


def find_roots(adjacency, tau: float = DEFAULT_TAU) -> RootSet:
    """Roots of the thresholded graph: factors with every |A_ji| < tau."""
    a = np.asarray(ad.value(adjacency))
    binary = (np.abs(a) >= tau).astype(np.int64)
    np.fill_diagonal(binary, 0)
    if not graphs.is_acyclic(binary):
        raise CyclicGraphError(
            f"adjacency thresholded at tau={tau} still has a cycle; "
            "raise tau or retrain with a stronger acyclicity penalty")
    indicator = (binary.sum(axis=0) == 0).astype(np.int64)
    return RootSet(indicator=indicator, threshold=float(tau), binary_adjacency=binary)


def intervene(adjacency, epsilon, assignments: dict) -> np.ndarray:
    """do-style intervention: sever incoming edges of assigned factors, clamp
    them, and recompute the rest in topological order.

    Values may be scalars (broadcast over the factor's d dims) or d-vectors.
    An empty assignment reduces to scm_forward exactly (same code path).
    """
    a = np.asarray(ad.value(adjacency), dtype=np.float64)
    eps = np.asarray(ad.value(epsilon), dtype=np.float64)
    n = a.shape[0]
    if not assignments:
        return M.scm_forward(a, eps)
    clean = {}
    for idx, val in assignments.items():
        if not 0 <= int(idx) < n:
            raise DataError(f"factor index {idx} out of range [0, {n})")
        clean[int(idx)] = np.asarray(val, dtype=np.float64)
    mutilated = a.copy()
    for idx in clean:
        mutilated[:, idx] = 0.0
    if not graphs.is_acyclic(graphs.support(mutilated)):
        raise CyclicGraphError("mutilated adjacency still has a cycle; threshold it first")
    return M.propagate_scm(mutilated, eps, assignments=clean)


def invert_concepts(targets: dict, gamma, lo: float = -20.0, hi: float = 20.0,
                    tol: float = 1e-6, max_expand: int = 40) -> dict:
    """Back-compute w'_j for each targeted concept by bisecting the monotone head.

    Targets at exactly 0 or 1 are clamped into [1e-4, 1-1e-4] with a warning;
    the bracket expands geometrically if a clamped target lies outside the
    head's range on [lo, hi].
    """
    m = np.asarray(ad.value(gamma[0])).shape[0]
    out = {}
    for j, y in targets.items():
        j = int(j)
        if not 0 <= j < m:
            raise DataError(f"concept index {j} out of range [0, {m})")
        y = float(y)
        if y <= 0.0 or y >= 1.0:
            clamped = float(np.clip(y, 1e-4, 1.0 - 1e-4))
            warnings.warn(f"concept target {y} clamped to {clamped} (open-interval domain)")
            y = clamped

        def f(t):
            return float(np.asarray(ad.value(M.concept_predict(np.full((1, m), t), gamma)))[0, j])

        a, b = lo, hi
        for _ in range(max_expand):
            if f(a) <= y:
                break
            a *= 2.0
        for _ in range(max_expand):
            if f(b) >= y:
                break
            b *= 2.0
        if not (f(a) <= y <= f(b)):
            raise DataError(f"target {y} for concept {j} is outside the head's reachable range")
        for _ in range(200):
            mid = 0.5 * (a + b)
            fm = f(mid)
            # shrink until the concept residual AND the bracket itself are tight,
            # so w' is pinned even where the head slope is shallow
            if abs(fm - y) <= tol and (b - a) <= 1e-7:
                a = b = mid
                break
            if fm < y:
                a = mid
            else:
                b = mid
        out[j] = 0.5 * (a + b)
    return out


def root_objective(eps_root, model: M.Model, root_indices: list[int], targets_wp: dict,
                   prior_weight: float):
    """J = sum_j (w'_j - w'*_j)^2 + prior_weight * ||eps_root||^2 / 2 as a Tensor."""
    spec = model.spec
    full = np.zeros((spec.n, spec.d), dtype=np.float64)
    rows = []
    cursor = 0
    for i in range(spec.n):
        if i in root_indices:
            rows.append(eps_root[cursor])
            cursor += 1
        else:
            rows.append(ad.astensor(full[i]))
    eps = ad.stack(rows, axis=0)
    adjacency = model.adjacency().astype(np.float64)
    w = M.scm_forward(adjacency, eps)
    mask = model.hard_mask().astype(np.float64)
    beta = (model.params["agg.readout"].astype(np.float64),
            model.params["agg.weight"].astype(np.float64))
    wp = M.mask_pool(ad.reshape(w, (1, spec.n, spec.d)), mask, beta)
    obj = 0.0
    for j, target in targets_wp.items():
        diff = ad.add(wp[0, int(j)], -float(target))
        obj = ad.add(obj, ad.square(diff))
    prior = ad.mul(ad.tsum(ad.square(eps_root)), 0.5 * prior_weight)
    return ad.add(obj, prior), w


def optimize_roots(targets_wp: dict, model: M.Model, roots: RootSet,
                   settings: ControlSettings, rng: np.random.Generator) -> dict:
    """Adjust root-factor noise so pooled bridge values hit their targets.

    Only the eps rows of root factors move; every other eps is pinned at 0 so
    downstream factors are fully determined by the roots.  Multi-restart Adam
    with best-iterate tracking; returns the best w, a z draw, the decoded
    image, and diagnostics.
    """
    root_indices = roots.indices
    if not root_indices:
        raise DataError("no root factors under the current threshold")
    spec = model.spec
    r = len(root_indices)
    best = {"J": np.inf, "eps_root": None}
    for restart in range(max(1, settings.restarts)):
        if restart == 0:
            init = np.zeros((r, spec.d))
        else:
            init = rng.uniform(-2.0, 2.0, size=(r, spec.d))
        eps_root = ad.Tensor(init.astype(np.float64), requires_grad=True)
        opt = AdamW({"eps": eps_root.data}, lr=settings.step_size, weight_decay=0.0)
        for _ in range(settings.steps):
            eps_root.zero_grad()
            obj, _ = root_objective(eps_root, model, root_indices, targets_wp,
                                    settings.prior_weight)
            j = float(ad.value(obj))
            if j < best["J"]:
                best = {"J": j, "eps_root": eps_root.data.copy()}
            obj.backward()
            opt.step({"eps": eps_root.data}, {"eps": eps_root.grad})
        obj, _ = root_objective(eps_root, model, root_indices, targets_wp,
                                settings.prior_weight)
        j = float(ad.value(obj))
        if j < best["J"]:
            best = {"J": j, "eps_root": eps_root.data.copy()}

    eps = np.zeros((spec.n, spec.d), dtype=np.float64)
    for row, i in enumerate(root_indices):
        eps[i] = best["eps_root"][row]
    w_star = np.asarray(M.scm_forward(model.adjacency().astype(np.float64), eps))
    if settings.deterministic_z:
        z = np.zeros((spec.k, spec.d), dtype=np.float64)
    else:
        z = rng.standard_normal((spec.k, spec.d))
    image = np.asarray(M.decode(w_star.astype(np.float32), z.astype(np.float32),
                                model.params, model.image_size))
    beta = (model.params["agg.readout"], model.params["agg.weight"])
    wp = np.asarray(ad.value(M.mask_pool(w_star[None].astype(np.float32),
                                         model.hard_mask().astype(np.float32), beta)))[0]
    y_hat = np.asarray(ad.value(M.concept_predict(wp[None], M.gamma_from_params(model.params))))[0]
    converged = best["J"] <= 1e-2
    if not converged:
        warnings.warn(f"root optimization did not converge: J={best['J']:.4g}")
    return {
        "w": w_star, "z": z, "image": image, "objective": best["J"],
        "w_prime": wp, "predicted_concepts": y_hat, "converged": converged,
        "root_indices": root_indices, "eps": eps,
    }


def concept_control(model: M.Model, targets: dict, settings: ControlSettings | None = None,
                    rng: np.random.Generator | None = None, tau: float = DEFAULT_TAU) -> dict:
    """Full concept-control pipeline: invert heads, then optimize root factors."""
    settings = settings or ControlSettings()
    rng = rng or np.random.default_rng(0)
    gamma = M.gamma_from_params(model.params)
    targets = {int(j): float(y) for j, y in targets.items()}
    targets_wp = invert_concepts(targets, gamma)
    roots = find_roots(model.adjacency(), tau)
    result = optimize_roots(targets_wp, model, roots, settings, rng)
    result["targets"] = targets
    result["targets_w_prime"] = targets_wp
    result["achieved_targets"] = {j: float(result["predicted_concepts"][j]) for j in targets}
    result["self_consistency_error"] = float(
        np.mean([abs(result["predicted_concepts"][j] - targets[j]) for j in targets]))
    return result


def traverse(model: M.Model, factor_index: int, values, base_image,
             tau: float = DEFAULT_TAU) -> dict:
    """Encode a base image, clamp one factor across a grid, decode each point.

    The learned adjacency is thresholded at tau before intervention so the
    propagation order is well defined.  Returns the tiled row plus the frames.
    """
    spec = model.spec
    if not 0 <= factor_index < spec.n:
        raise DataError(f"factor index {factor_index} out of range [0, {spec.n})")
    bundle = model.encode(np.asarray(base_image))
    eps = np.asarray(ad.value(bundle.epsilon))[0].astype(np.float64)
    z = np.asarray(ad.value(bundle.z))[0]
    a = model.adjacency().astype(np.float64)
    a_thr = np.where(np.abs(a) >= tau, a, 0.0)
    if not graphs.is_acyclic(graphs.support(a_thr)):
        raise CyclicGraphError(f"thresholded adjacency (tau={tau}) has a cycle")
    frames = []
    for v in values:
        w = intervene(a_thr, eps, {factor_index: v})
        img = np.asarray(M.decode(w.astype(np.float32), z, model.params, model.image_size))
        frames.append(img)
    return {"frames": frames, "grid": np.concatenate(frames, axis=1),
            "w_base": M.propagate_scm(a_thr, eps)}
