"""Structured generative model.

Latent layout: n causal factor slots w (each d-dimensional) driven through a
linear SCM w = (I - A^T)^{-1} eps, plus k free slots z.  A binary n x m mask
(lower-triangular, unit diagonal) selects which factors feed each concept;
selected factors are pooled through per-factor scalar read-outs into bridging
scalars w', and per-concept monotone heads map w' to predicted concepts.

All math routes through scmvae.autodiff, so the same functions run on plain
arrays (evaluation) or build a gradient graph (training / gradient checks).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataError, SingularSystemError

HEAD_HIDDEN = 8
DEFAULT_WIDTH = 64
LIP_GRID = np.linspace(-6.0, 6.0, 512)


@dataclass(frozen=True)
class LatentSpec:
    n: int  # causal factor slots
    k: int  # free factor slots
    d: int  # per-factor dimension
    m: int  # concept count

    def __post_init__(self):
        if not (self.n >= self.m >= 1):
            raise DataError(f"need n >= m >= 1, got n={self.n}, m={self.m}")
        if self.d < 1 or self.k < 0:
            raise DataError(f"bad latent spec: d={self.d}, k={self.k}")

    @property
    def total_dim(self) -> int:
        return (self.n + self.k) * self.d


@dataclass
class LatentBundle:
    eps_mean: object
    eps_logvar: object
    z_mean: object
    z_logvar: object
    epsilon: object
    z: object
    w: object
    w_prime: object
    mask_sample: object
    mask_relaxed: object = None
    readouts: object = None


def softplus_inv(y: float) -> float:
    return float(np.log(np.expm1(y)))


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def conv_stack_sizes(image_size: int) -> int:
    """Spatial size after the 4 stride-2 convs."""
    if image_size % 16 != 0:
        raise DataError(f"image_size must be divisible by 16, got {image_size}")
    return image_size // 16


def structural_masks(spec: LatentSpec) -> tuple[np.ndarray, np.ndarray]:
    """(diag_ones D, learnable L) patterns of the n x m correlation mask."""
    i = np.arange(spec.n)[:, None]
    j = np.arange(spec.m)[None, :]
    diag = (i == j).astype(np.float64)
    learnable = (i > j).astype(np.float64)
    return diag, learnable


def offdiag(n: int) -> np.ndarray:
    return 1.0 - np.eye(n)


def init_params(spec: LatentSpec, image_size: int, width: int = DEFAULT_WIDTH,
                seed: int = 0, dtype=np.float32) -> dict:
    """Fresh parameter dict keyed by path; values are plain ndarrays."""
    rng = np.random.default_rng([seed, 0xC0DE])
    s0 = conv_stack_sizes(image_size)
    feat = width * s0 * s0
    p: dict[str, np.ndarray] = {}

    def conv(path, cout, cin):
        fan = cin * 16
        p[f"{path}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (4, 4, cin, cout))
        p[f"{path}.b"] = np.zeros(cout)

    def deconv(path, cin, cout):
        fan = cin * 16
        p[f"{path}.w"] = rng.normal(0.0, np.sqrt(2.0 / fan), (4, 4, cout, cin))
        p[f"{path}.b"] = np.zeros(cout)

    def linear(path, fin, fout):
        p[f"{path}.w"] = rng.normal(0.0, 1.0 / np.sqrt(fin), (fin, fout))
        p[f"{path}.b"] = np.zeros(fout)

    conv("enc.conv1", width, 1)
    conv("enc.conv2", width, width)
    conv("enc.conv3", width, width)
    conv("enc.conv4", width, width)
    linear("enc.head_eps", feat, 2 * spec.n * spec.d)
    linear("enc.head_z", feat, 2 * spec.k * spec.d)
    linear("dec.fc", spec.total_dim, feat)
    deconv("dec.deconv1", width, width)
    deconv("dec.deconv2", width, width)
    deconv("dec.deconv3", width, width)
    deconv("dec.deconv4", width, 1)

    p["scm.adjacency"] = np.zeros((spec.n, spec.n))
    p["mask.logits"] = np.full((spec.n, spec.m), -1.0)
    p["agg.readout"] = np.full((spec.n, spec.d), 1.0 / np.sqrt(spec.d))
    p["agg.weight"] = np.full((spec.n, spec.m), softplus_inv(1.0))
    p["head.scale_raw"] = np.full(spec.m, softplus_inv(1.0))
    p["head.amp_raw"] = np.full((spec.m, HEAD_HIDDEN), softplus_inv(0.1))
    p["head.slope_raw"] = np.full((spec.m, HEAD_HIDDEN), softplus_inv(1.0))
    p["head.shift"] = np.tile(np.linspace(-2.0, 2.0, HEAD_HIDDEN), (spec.m, 1))
    return {k: v.astype(dtype) for k, v in p.items()}


# ---------------------------------------------------------------------------
# core operations
# ---------------------------------------------------------------------------

def propagate_scm(adjacency: np.ndarray, epsilon: np.ndarray,
                  assignments: dict | None = None) -> np.ndarray:
    """Forward substitution w_j = sum_i A_ij w_i + eps_j in topological order.

    Plain-array path shared by scm_forward (acyclic support) and do-style
    interventions, so clamping a factor to its own propagated value reproduces
    every downstream value bit-for-bit.  epsilon: (n,d) or (B,n,d).
    """
    from . import graphs  # local import to avoid a cycle at module load

    a = np.asarray(adjacency)
    eps = np.asarray(epsilon)
    order = graphs.topological_order(graphs.support(a))
    w = np.zeros_like(eps)
    assignments = assignments or {}
    for v in order:
        if v in assignments:
            w[..., v, :] = assignments[v]
        else:
            w[..., v, :] = eps[..., v, :] + np.einsum("...nd,n->...d", w, a[:, v])
    return w


def scm_forward(adjacency, epsilon):
    """w = (I - A^T)^{-1} eps, applied per latent dimension.

    epsilon: (n, d) or (B, n, d); differentiable in both arguments.  On plain
    arrays with acyclic support this runs as forward substitution (exactly the
    intervention propagation); tensors and cyclic-support matrices go through
    the dense solve.
    """
    from . import graphs

    a = ad.value(adjacency)
    n = a.shape[0]
    det = np.linalg.det(np.eye(n, dtype=a.dtype) - a.T)
    if abs(det) < 1e-12:
        raise SingularSystemError(f"|det(I - A^T)| = {abs(det):.3e} < 1e-12")
    eps_nd = ad.value(epsilon)
    if eps_nd.ndim not in (2, 3):
        raise DataError(f"epsilon must be (n,d) or (B,n,d), got {eps_nd.shape}")
    if eps_nd.shape[-2] != n:
        raise DataError(f"epsilon rows {eps_nd.shape[-2]} != adjacency size {n}")
    if not (ad.is_tensor(adjacency) or ad.is_tensor(epsilon)) and graphs.is_acyclic(graphs.support(a)):
        return propagate_scm(a, eps_nd)
    if ad.is_tensor(adjacency):
        lhs = ad.add(np.eye(n, dtype=a.dtype), ad.mul(ad.transpose(adjacency), -1.0))
    else:
        lhs = np.eye(n, dtype=a.dtype) - a.T
    if eps_nd.ndim == 2:
        return ad.solve(lhs, epsilon)
    b, n2, d = eps_nd.shape
    # stack batch and dim: solve T @ W = E with E (n, B*d)
    rhs = ad.reshape(ad.transpose(epsilon, (1, 0, 2)), (n, b * d))
    w = ad.solve(lhs, rhs)
    return ad.transpose(ad.reshape(w, (n, b, d)), (1, 0, 2))


def relaxed_mask(mask_logits, noise, temperature):
    """Binary-concrete relaxation on the full n x m grid (structure applied by caller)."""
    if temperature <= 0:
        raise DataError(f"temperature must be positive, got {temperature}")
    return ad.sigmoid(ad.mul(ad.add(mask_logits, noise), 1.0 / float(temperature)))


def compose_mask(relaxed, spec: LatentSpec, hard: bool):
    """Apply structural zeros/ones; optionally straight-through rounding."""
    diag, learn = structural_masks(spec)
    dt = ad.value(relaxed).dtype
    diag, learn = diag.astype(dt), learn.astype(dt)
    if hard:
        rounded = (ad.value(relaxed) > 0.5).astype(dt)
        if ad.is_tensor(relaxed):
            relaxed = ad.add(relaxed, ad.Tensor(rounded - ad.value(relaxed)))
        else:
            relaxed = rounded
    return ad.add(diag, ad.mul(learn, relaxed))


def sample_mask(mask_logits, temperature: float, hard: bool, rng: np.random.Generator):
    """Gumbel-softmax (binary-concrete) mask sample with structural constraints."""
    logits = ad.value(mask_logits)
    spec_like = LatentSpec(n=logits.shape[0], k=0, d=1, m=logits.shape[1])
    noise = rng.logistic(size=logits.shape).astype(logits.dtype)
    return compose_mask(relaxed_mask(mask_logits, noise, temperature), spec_like, hard)


def map_mask(mask_logits, spec: LatentSpec):
    """Deterministic most-likely mask (used at evaluation / generation time)."""
    logits = ad.value(mask_logits)
    diag, learn = structural_masks(spec)
    return diag + learn * (logits > 0.0)


def correlated_set(mask, j: int) -> set[int]:
    """Factors feeding concept j: {i : M_ij = 1}."""
    m = ad.value(mask)
    if not 0 <= j < m.shape[1]:
        raise IndexError(f"concept index {j} out of range [0, {m.shape[1]})")
    return set(int(i) for i in np.flatnonzero(m[:, j] == 1))


def factor_readouts(w, readout):
    """Scalar read-out per factor: r_i = <u_i, w_i>; w (..., n, d) -> (..., n)."""
    return ad.tsum(ad.mul(w, readout), axis=-1)


def mask_pool(w, mask, beta):
    """w' per concept: positive-weighted sum of selected factor read-outs.

    beta = (readout (n,d), weight_raw (n,m)).  Permutation-invariant over the
    selected set and strictly increasing in each read-out (softplus weights).
    """
    readout, weight_raw = beta
    r = factor_readouts(w, readout)  # (..., n)
    coef = ad.mul(ad.softplus(weight_raw), mask)  # (n, m)
    return ad.matmul(r, coef)


def head_curve(w_prime, gamma):
    """Monotone pre-squash map g(t) per concept; strictly increasing in t."""
    scale_raw, amp_raw, slope_raw, shift = gamma
    t = w_prime if ad.value(w_prime).ndim == 2 else ad.reshape(w_prime, (1, -1))
    tt = ad.reshape(t, (*ad.value(t).shape, 1))  # (B, m, 1)
    amp = ad.softplus(amp_raw)
    slope = ad.softplus(slope_raw)
    bumps = ad.tsum(ad.mul(amp, ad.tanh(ad.add(ad.mul(slope, tt), shift))), axis=-1)
    g = ad.add(ad.mul(ad.softplus(scale_raw), t), bumps)
    return g if ad.value(w_prime).ndim == 2 else ad.reshape(g, (-1,))


def concept_predict(w_prime, gamma):
    """Predicted concepts y_hat = sigmoid(g(w')) in (0,1)."""
    return ad.sigmoid(head_curve(w_prime, gamma))


def head_slope(points, gamma, j: int):
    """dg_j/dt at the given points (analytic; always positive)."""
    scale_raw, amp_raw, slope_raw, shift = gamma
    pts = ad.reshape(points, (-1, 1))
    amp = ad.softplus(amp_raw[j])
    slope = ad.softplus(slope_raw[j])
    th = ad.tanh(ad.add(ad.mul(slope, pts), shift[j]))
    sech2 = ad.add(1.0, ad.mul(ad.mul(th, th), -1.0))
    return ad.add(ad.softplus(scale_raw[j]), ad.tsum(ad.mul(ad.mul(amp, slope), sech2), axis=-1))


def lipschitz_estimate(gamma, j: int, grid=None):
    """Max |dg_j/dt| over the probe grid (slope is positive by construction)."""
    pts = LIP_GRID if grid is None else np.asarray(grid, dtype=np.float64)
    pts = pts.astype(ad.value(gamma[0]).dtype, copy=False)
    return ad.tmax(head_slope(pts, gamma, j))


def gamma_from_params(params) -> tuple:
    return (params["head.scale_raw"], params["head.amp_raw"],
            params["head.slope_raw"], params["head.shift"])


def beta_from_params(params) -> tuple:
    return (params["agg.readout"], params["agg.weight"])


def effective_adjacency(params, spec: LatentSpec):
    """Stored adjacency with the diagonal structurally zeroed."""
    return ad.mul(params["scm.adjacency"], offdiag(spec.n).astype(ad.value(params["scm.adjacency"]).dtype))


# ---------------------------------------------------------------------------
# encoder / decoder
# ---------------------------------------------------------------------------

def _as_batched_images(image, image_size: int):
    """(H,W) or (B,H,W) -> channels-last (B,H,W,1)."""
    x = image if ad.is_tensor(image) else np.asarray(image)
    shape = ad.value(x).shape
    if len(shape) == 2:
        x = ad.reshape(x, (1, *shape, 1))
        squeeze = True
    elif len(shape) == 3:
        x = ad.reshape(x, (*shape, 1))
        squeeze = False
    else:
        raise DataError(f"image must be (H,W) or (B,H,W), got {shape}")
    hw = ad.value(x).shape[1:3]
    if hw != (image_size, image_size):
        raise DataError(f"image is {hw}, model expects {(image_size, image_size)}")
    return x, squeeze


def encoder_features(params, x):
    h = x
    for layer in ("enc.conv1", "enc.conv2", "enc.conv3", "enc.conv4"):
        h = ad.conv2d(h, params[f"{layer}.w"], stride=2, pad=1)
        h = ad.silu(ad.add(h, params[f"{layer}.b"]))
    b = ad.value(h).shape[0]
    return ad.reshape(h, (b, -1))


def posterior_params(params, spec: LatentSpec, image, image_size: int):
    """Gaussian posterior params for eps and z from the conv trunk."""
    x, _ = _as_batched_images(image, image_size)
    feats = encoder_features(params, x)
    he = ad.add(ad.matmul(feats, params["enc.head_eps.w"]), params["enc.head_eps.b"])
    hz = ad.add(ad.matmul(feats, params["enc.head_z.w"]), params["enc.head_z.b"])
    b = ad.value(feats).shape[0]
    nd, kd = spec.n * spec.d, spec.k * spec.d
    eps_mean = ad.reshape(he[:, :nd], (b, spec.n, spec.d))
    eps_logvar = ad.reshape(he[:, nd:], (b, spec.n, spec.d))
    z_mean = ad.reshape(hz[:, :kd], (b, spec.k, spec.d))
    z_logvar = ad.reshape(hz[:, kd:], (b, spec.k, spec.d))
    return eps_mean, eps_logvar, z_mean, z_logvar


def reparameterize(mean, logvar, rng: np.random.Generator):
    xi = rng.standard_normal(ad.value(mean).shape).astype(ad.value(mean).dtype)
    return ad.add(mean, ad.mul(ad.exp(ad.mul(logvar, 0.5)), xi))


def draw_noise(spec: LatentSpec, batch: int, rng: np.random.Generator, dtype=np.float32) -> dict:
    """All stochastic draws of one training-mode forward, in a fixed order."""
    return {
        "eps": rng.standard_normal((batch, spec.n, spec.d)).astype(dtype),
        "z": rng.standard_normal((batch, spec.k, spec.d)).astype(dtype),
        "mask": rng.logistic(size=(spec.n, spec.m)).astype(dtype),
    }


def encode_with_noise(image, params, spec: LatentSpec, noise: dict,
                      mask_temperature: float, mask_hard: bool,
                      image_size: int, fixed_mask=None) -> LatentBundle:
    """Training-mode latent pipeline with externally supplied noise draws.

    Deterministic given (params, image, noise), which is what finite-difference
    gradient checks need.  fixed_mask bypasses the Gumbel layer (ground-truth
    structure mode).
    """
    eps_mean, eps_logvar, z_mean, z_logvar = posterior_params(params, spec, image, image_size)
    dt = ad.value(eps_mean).dtype
    epsilon = ad.add(eps_mean, ad.mul(ad.exp(ad.mul(eps_logvar, 0.5)), noise["eps"].astype(dt)))
    z = ad.add(z_mean, ad.mul(ad.exp(ad.mul(z_logvar, 0.5)), noise["z"].astype(dt)))
    if fixed_mask is not None:
        relaxed = None
        mask = np.asarray(fixed_mask, dtype=dt)
    else:
        relaxed = relaxed_mask(params["mask.logits"], noise["mask"].astype(dt), mask_temperature)
        mask = compose_mask(relaxed, spec, hard=mask_hard)
    w = scm_forward(effective_adjacency(params, spec), epsilon)
    w_prime = mask_pool(w, mask, beta_from_params(params))
    return LatentBundle(
        eps_mean=eps_mean, eps_logvar=eps_logvar, z_mean=z_mean, z_logvar=z_logvar,
        epsilon=epsilon, z=z, w=w, w_prime=w_prime,
        mask_sample=mask, mask_relaxed=relaxed,
        readouts=factor_readouts(w, params["agg.readout"]),
    )


def encode(image, params, spec: LatentSpec, rng: np.random.Generator | None,
           train_mode: bool, image_size: int | None = None,
           mask_temperature: float = 0.5, mask_hard: bool = False,
           fixed_mask=None) -> LatentBundle:
    """Full latent pipeline: posteriors -> samples -> SCM -> mask -> pooling.

    In eval mode (train_mode=False) everything is deterministic: eps and z sit
    at their means and the mask is the most-likely (MAP) mask.
    """
    if image_size is None:
        image_size = ad.value(image).shape[-1]
    if train_mode:
        if rng is None:
            raise DataError("train-mode encode needs an rng")
        batch = 1 if ad.value(image).ndim == 2 else ad.value(image).shape[0]
        noise = draw_noise(spec, batch, rng, dtype=ad.value(params["scm.adjacency"]).dtype)
        return encode_with_noise(image, params, spec, noise, mask_temperature,
                                 mask_hard, image_size, fixed_mask=fixed_mask)
    eps_mean, eps_logvar, z_mean, z_logvar = posterior_params(params, spec, image, image_size)
    dt = ad.value(eps_mean).dtype
    mask = np.asarray(fixed_mask, dtype=dt) if fixed_mask is not None \
        else map_mask(params["mask.logits"], spec).astype(dt)
    w = scm_forward(effective_adjacency(params, spec), eps_mean)
    w_prime = mask_pool(w, mask, beta_from_params(params))
    return LatentBundle(
        eps_mean=eps_mean, eps_logvar=eps_logvar, z_mean=z_mean, z_logvar=z_logvar,
        epsilon=eps_mean, z=z_mean, w=w, w_prime=w_prime,
        mask_sample=mask, mask_relaxed=None,
        readouts=factor_readouts(w, params["agg.readout"]),
    )


def decode(w, z, params, image_size: int):
    """(w, z) -> image in [0,1]; accepts (n,d)/(k,d) or batched versions."""
    batched = ad.value(w).ndim == 3
    if not batched:
        w = ad.reshape(w, (1, *ad.value(w).shape))
        z = ad.reshape(z, (1, *ad.value(z).shape))
    b = ad.value(w).shape[0]
    latent = ad.concat([ad.reshape(w, (b, -1)), ad.reshape(z, (b, -1))], axis=1)
    s0 = conv_stack_sizes(image_size)
    width = ad.value(params["dec.deconv1.w"]).shape[3]
    h = ad.silu(ad.add(ad.matmul(latent, params["dec.fc.w"]), params["dec.fc.b"]))
    h = ad.reshape(h, (b, s0, s0, width))
    size = s0
    for layer in ("dec.deconv1", "dec.deconv2", "dec.deconv3"):
        size *= 2
        h = ad.conv_transpose2d(h, params[f"{layer}.w"], stride=2, pad=1, out_hw=(size, size))
        h = ad.silu(ad.add(h, params[f"{layer}.b"]))
    size *= 2
    h = ad.conv_transpose2d(h, params["dec.deconv4.w"], stride=2, pad=1, out_hw=(size, size))
    h = ad.sigmoid(ad.add(h, params["dec.deconv4.b"]))
    out = ad.reshape(h, (b, size, size))
    return out if batched else ad.reshape(out, (size, size))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_MANIFEST = "manifest.json"


def save_checkpoint(ckpt_dir, params: dict, spec: LatentSpec, image_size: int,
                    step: int, width: int = DEFAULT_WIDTH, extra: dict | None = None,
                    state_arrays: dict | None = None) -> None:
    """Checkpoint layout: manifest.json + one raw <f4 row-major file per array."""
    out = Path(ckpt_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = dict(params)
    if state_arrays:
        arrays.update({f"state.{k}": v for k, v in state_arrays.items()})
    manifest = {
        "format": 1,
        "step": int(step),
        "image_size": int(image_size),
        "width": int(width),
        "latent_spec": {"n": spec.n, "k": spec.k, "d": spec.d, "m": spec.m},
        "arrays": {k: list(np.asarray(ad.value(v)).shape) for k, v in arrays.items()},
        "extra": extra or {},
    }
    for key, arr in arrays.items():
        np.asarray(ad.value(arr)).astype("<f4").tofile(out / f"{key}.bin")
    with open(out / CHECKPOINT_MANIFEST, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(ckpt_dir) -> tuple[dict, LatentSpec, dict]:
    """Returns (params, spec, manifest). state.* arrays land in manifest['state_arrays']."""
    root = Path(ckpt_dir)
    mf = root / CHECKPOINT_MANIFEST
    if not mf.exists():
        raise DataError(f"no checkpoint manifest at {mf}")
    with open(mf) as f:
        manifest = json.load(f)
    params, state = {}, {}
    for key, shape in manifest["arrays"].items():
        arr = np.fromfile(root / f"{key}.bin", dtype="<f4")
        expect = int(np.prod(shape)) if shape else 1
        if arr.size != expect:
            raise DataError(f"array {key}: file has {arr.size} floats, manifest says {expect}")
        arr = arr.reshape(shape).astype(np.float32)
        if key.startswith("state."):
            state[key[len("state."):]] = arr
        else:
            params[key] = arr
    ls = manifest["latent_spec"]
    manifest["state_arrays"] = state
    return params, LatentSpec(ls["n"], ls["k"], ls["d"], ls["m"]), manifest


@dataclass
class Model:
    """Thin convenience wrapper around a parameter dict."""
    params: dict
    spec: LatentSpec
    image_size: int
    width: int = DEFAULT_WIDTH
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, ckpt_dir) -> "Model":
        params, spec, manifest = load_checkpoint(ckpt_dir)
        return cls(params=params, spec=spec, image_size=manifest["image_size"],
                   width=manifest["width"], extra=manifest.get("extra", {}))

    def encode(self, image, rng=None, train_mode=False, **kw) -> LatentBundle:
        return encode(image, self.params, self.spec, rng, train_mode,
                      image_size=self.image_size, **kw)

    def decode(self, w, z):
        return decode(w, z, self.params, self.image_size)

    def adjacency(self) -> np.ndarray:
        return np.asarray(ad.value(effective_adjacency(self.params, self.spec)))

    def hard_mask(self) -> np.ndarray:
        return map_mask(self.params["mask.logits"], self.spec)

    def predict_concepts(self, image) -> np.ndarray:
        bundle = self.encode(image)
        return np.asarray(ad.value(concept_predict(bundle.w_prime, gamma_from_params(self.params))))
