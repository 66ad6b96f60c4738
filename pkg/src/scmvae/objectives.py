"""Training loss: reconstruction + concept terms, the two weighted KL terms,
the Lipschitz head penalty, the acyclicity penalty, and mask sparsity."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from . import model as M
from .errors import DataError, NumericError

DAG_SERIES_TERMS = 30


@dataclass
class LossWeights:
    rho1: float = 1.0
    rho2: float = 1.0
    lambda_dag: float = 1.0
    lambda_sparse: float = 0.01
    lambda_lip: float = 0.1
    sigma_x: float = 0.1
    sigma_y: float = 0.05

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise DataError(f"loss weight {f.name} must be >= 0")


@dataclass
class LossReport:
    total: float
    recon: float
    concept_nll: float
    kl_structured: float  # weighted by rho1 in total
    kl_tc: float  # weighted by rho2 in total
    dag_penalty: float
    mask_l1: float
    lip_penalty: float

    FIELDS = ("total", "recon", "concept_nll", "kl_structured", "kl_tc",
              "dag_penalty", "mask_l1", "lip_penalty")

    def row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]

    def weighted_sum(self, w: LossWeights) -> float:
        return (self.recon + self.concept_nll + w.rho1 * self.kl_structured
                + w.rho2 * self.kl_tc + w.lambda_dag * self.dag_penalty
                + w.lambda_sparse * self.mask_l1 + w.lambda_lip * self.lip_penalty)


def _batch_mean_pixel_sum(sq):
    """Sum over pixel axes, mean over an optional leading batch axis."""
    nd = ad.value(sq).ndim
    if nd == 2:
        return ad.tsum(sq)
    return ad.tmean(ad.tsum(sq, axis=(1, 2)))


def recon_nll(image, reconstruction, sigma_x: float):
    """Gaussian reconstruction NLL, constant term dropped: sum (x-x_hat)^2 / 2 sigma^2."""
    if ad.value(image).shape != ad.value(reconstruction).shape:
        raise DataError(
            f"shape mismatch: image {ad.value(image).shape} vs reconstruction "
            f"{ad.value(reconstruction).shape}")
    diff = ad.add(image, ad.mul(reconstruction, -1.0))
    return ad.mul(_batch_mean_pixel_sum(ad.square(diff)), 1.0 / (2.0 * sigma_x**2))


def concept_nll_and_lip(concepts, w_prime, gamma, probe_grid=None, sigma_y: float = 0.05):
    """(concept Gaussian NLL, Lipschitz deviation) of the monotone heads.

    First term: sum_j (y_j - f_c(w'_j))^2 / 2 sigma_y^2, batch-averaged.
    Second: sqrt(sum_j (Lip_j - 1)^2) with Lip taken over the probe grid.
    """
    y_hat = M.concept_predict(w_prime, gamma)
    diff = ad.add(concepts, ad.mul(y_hat, -1.0))
    per_sample = ad.tsum(ad.square(diff), axis=-1)
    nll = ad.mul(ad.tmean(per_sample) if ad.value(per_sample).ndim else per_sample,
                 1.0 / (2.0 * sigma_y**2))
    m = ad.value(gamma[0]).shape[0]
    lips = [M.lipschitz_estimate(gamma, j, grid=probe_grid) for j in range(m)]
    dev = [ad.square(ad.add(l, -1.0)) for l in lips]
    total = dev[0]
    for d in dev[1:]:
        total = ad.add(total, d)
    lip = ad.sqrt(ad.add(total, 1e-24))
    return nll, lip


def gaussian_kl_standard(mean, logvar):
    """KL( N(mean, diag exp(logvar)) || N(0, I) ), summed over coordinates."""
    term = ad.add(ad.add(ad.square(mean), ad.exp(logvar)), ad.add(ad.mul(logvar, -1.0), -1.0))
    s = ad.tsum(term, axis=tuple(range(1, ad.value(term).ndim)))
    return ad.mul(ad.tmean(s), 0.5)


def _factor_log_density_matrix(samples, mean, logvar):
    """log N(sample_i ; mean_b, var_b) per factor block -> (B, B, n_factors).

    samples/mean/logvar: (B, n_factors, d); densities sum over the d coords of
    each factor but stay separate across factors.
    """
    b, nf, d = ad.value(samples).shape
    s = ad.reshape(samples, (b, 1, nf, d))
    m = ad.reshape(mean, (1, b, nf, d))
    lv = ad.reshape(logvar, (1, b, nf, d))
    diff = ad.add(s, ad.mul(m, -1.0))
    quad = ad.mul(ad.square(diff), ad.exp(ad.mul(lv, -1.0)))
    ll = ad.mul(ad.add(quad, ad.add(lv, float(np.log(2 * np.pi)))), -0.5)
    return ad.tsum(ll, axis=3)


def kl_terms(bundle: M.LatentBundle, adjacency, rho1: float, rho2: float,
             dataset_size: int | None = None):
    """The two KL penalties of the objective, unweighted.

    Term 1: KL(q(eps|x) q(z|x) || N(0,I)) in exogenous-noise space; the SCM
    prior over w is the push-forward of N(0,I) through (I - A^T)^{-1}, so this
    equals the KL against the structured prior (adjacency is accepted for the
    contract but cancels in these coordinates).

    Term 2: total correlation of the aggregate posterior across all n + k
    exogenous factor blocks (eps_1..eps_n, z_1..z_k), estimated with minibatch
    mixture weighting.  The SCM prior assumes independent per-factor noises,
    so redundant content split across factors (or causal structure missing
    from A) shows up here and is penalized; w-space dependence induced by A
    itself is, by design, not.  Zero-weight terms are skipped and reported 0.
    """
    for t in (bundle.eps_mean, bundle.eps_logvar, bundle.z_mean, bundle.z_logvar):
        if not np.all(np.isfinite(ad.value(t))):
            raise NumericError("non-finite posterior parameters")
    zero = 0.0
    term1 = zero
    if rho1 != 0.0:
        term1 = ad.add(gaussian_kl_standard(bundle.eps_mean, bundle.eps_logvar),
                       gaussian_kl_standard(bundle.z_mean, bundle.z_logvar))
    term2 = zero
    if rho2 != 0.0:
        b = ad.value(bundle.epsilon).shape[0]
        if b < 2:
            raise DataError("tc estimator needs batch size >= 2")
        n_data = float(dataset_size if dataset_size is not None else b)
        # stratified mixture weights: the sample's own component keeps weight 1,
        # the other B-1 batch components stand in for the remaining N-1 data
        # points; the common -log N normalization cancels in the difference
        logw = np.full((b, b), np.log(max(n_data - 1.0, 1.0) / (b - 1.0)))
        np.fill_diagonal(logw, 0.0)
        log_qe = _factor_log_density_matrix(bundle.epsilon, bundle.eps_mean, bundle.eps_logvar)
        parts = [log_qe]
        if ad.value(bundle.z).shape[1] > 0:
            parts.append(_factor_log_density_matrix(bundle.z, bundle.z_mean, bundle.z_logvar))
        per_factor = concat_bb = parts[0] if len(parts) == 1 else ad.concat(parts, axis=2)
        logw = logw.astype(ad.value(per_factor).dtype)
        n_factors = ad.value(per_factor).shape[2]
        lse_joint = ad.logsumexp(ad.add(ad.tsum(per_factor, axis=2), logw), axis=1)
        lse_marg = ad.logsumexp(ad.add(per_factor, ad.reshape(logw, (b, b, 1))), axis=1)
        tc = ad.add(ad.add(lse_joint, ad.mul(ad.tsum(lse_marg, axis=1), -1.0)),
                    float((n_factors - 1) * np.log(n_data)))
        term2 = ad.tmean(tc)
    return term1, term2


def dag_penalty(adjacency):
    """h(A) = tr(exp(A o A)) - n via a 30-term scaled power series.

    h >= 0 with equality iff the support of A is acyclic; invariant to A -> -A.
    """
    a = ad.value(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DataError(f"adjacency must be square, got {a.shape}")
    n = a.shape[0]
    b = ad.square(adjacency)
    diag_idx = (np.arange(n), np.arange(n))
    p = b
    h = ad.tsum(p[diag_idx])
    for k in range(2, DAG_SERIES_TERMS + 1):
        p = ad.mul(ad.matmul(p, b), 1.0 / float(k))
        h = ad.add(h, ad.tsum(p[diag_idx]))
    return h


def mask_l1(relaxed):
    """Sum of the relaxed mask over learnable entries (strictly-lower, off-diagonal)."""
    r = ad.value(relaxed)
    if np.any(r < -1e-6) or np.any(r > 1.0 + 1e-6):
        raise DataError("relaxed mask entries must lie in [0,1]")
    spec_like = M.LatentSpec(n=r.shape[0], k=0, d=1, m=r.shape[1])
    _, learn = M.structural_masks(spec_like)
    return ad.tsum(ad.mul(relaxed, learn.astype(r.dtype)))


def total_loss(image, reconstruction, concepts, bundle: M.LatentBundle, params,
               spec: M.LatentSpec, weights: LossWeights,
               dataset_size: int | None = None, probe_grid=None):
    """Full objective; returns (total as Tensor/float, LossReport of floats)."""
    recon = recon_nll(image, reconstruction, weights.sigma_x)
    nll, lip = concept_nll_and_lip(concepts, bundle.w_prime,
                                   M.gamma_from_params(params),
                                   probe_grid=probe_grid, sigma_y=weights.sigma_y)
    adjacency = M.effective_adjacency(params, spec)
    kl1, kl2 = kl_terms(bundle, adjacency, weights.rho1, weights.rho2, dataset_size)
    h = dag_penalty(adjacency) if weights.lambda_dag != 0.0 else 0.0
    l1 = 0.0
    if weights.lambda_sparse != 0.0 and bundle.mask_relaxed is not None:
        l1 = mask_l1(bundle.mask_relaxed)
    lip_term = lip if weights.lambda_lip != 0.0 else 0.0

    total = recon
    total = ad.add(total, nll)
    total = ad.add(total, ad.mul(kl1, weights.rho1))
    total = ad.add(total, ad.mul(kl2, weights.rho2))
    total = ad.add(total, ad.mul(h, weights.lambda_dag))
    total = ad.add(total, ad.mul(l1, weights.lambda_sparse))
    total = ad.add(total, ad.mul(lip_term, weights.lambda_lip))

    def f(x):
        return float(np.asarray(ad.value(x)))

    report = LossReport(
        total=f(total), recon=f(recon), concept_nll=f(nll),
        kl_structured=f(kl1), kl_tc=f(kl2), dag_penalty=f(h),
        mask_l1=f(l1), lip_penalty=f(lip_term),
    )
    return total, report


def training_forward(params, spec: M.LatentSpec, images, concepts, weights: LossWeights,
                     noise: dict, mask_temperature: float, mask_hard: bool,
                     image_size: int, dataset_size: int | None = None,
                     fixed_mask=None):
    """One full training-mode forward pass with frozen noise; the single code
    path shared by the optimizer loop and the gradient-fidelity checks."""
    bundle = M.encode_with_noise(images, params, spec, noise, mask_temperature,
                                 mask_hard, image_size, fixed_mask=fixed_mask)
    reconstruction = M.decode(bundle.w, bundle.z, params, image_size)
    total, report = total_loss(images, reconstruction, concepts, bundle, params,
                               spec, weights, dataset_size=dataset_size)
    return total, report, bundle
