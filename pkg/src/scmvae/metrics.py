"""Evaluation suite: PSNR, concept MAE, avgMI, SHD, and mask recovery."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import model as M
from .errors import DataError

PSNR_CAP_DB = 99.0
MI_BINS = 20


@dataclass
class EvalReport:
    psnr_db: float
    mae_per_concept: list
    mae: float
    avg_mi: float
    shd: int
    mask_f1: float
    sample_count: int
    seed: int
    fid: str = "n/a"  # needs an external pretrained classifier; out of scope

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def append_csv(self, path, checkpoint: str, dataset: str) -> None:
        path = Path(path)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["checkpoint", "dataset", "seed", "psnr_db", "mae", "avg_mi",
                            "shd", "mask_f1", "sample_count"])
            w.writerow([checkpoint, dataset, self.seed, f"{self.psnr_db:.6g}",
                        f"{self.mae:.6g}", f"{self.avg_mi:.6g}", self.shd,
                        f"{self.mask_f1:.6g}", self.sample_count])


# ---------------------------------------------------------------------------
# PSNR
# ---------------------------------------------------------------------------

def psnr(reference, reconstruction) -> float:
    """Mean over the batch of 10*log10(1/MSE), capped at 99 dB per image."""
    ref = np.asarray(reference, dtype=np.float64)
    rec = np.asarray(reconstruction, dtype=np.float64)
    if ref.shape != rec.shape:
        raise DataError(f"shape mismatch: {ref.shape} vs {rec.shape}")
    if ref.ndim == 2:
        ref, rec = ref[None], rec[None]
    mse = np.mean((ref - rec) ** 2, axis=(1, 2))
    vals = np.where(mse > 0, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300)), PSNR_CAP_DB)
    return float(np.mean(np.minimum(vals, PSNR_CAP_DB)))


# ---------------------------------------------------------------------------
# concept MAE
# ---------------------------------------------------------------------------

def predict_in_batches(model: M.Model, images: np.ndarray, batch: int = 256):
    preds, reads = [], []
    for lo in range(0, images.shape[0], batch):
        bundle = model.encode(images[lo : lo + batch])
        wp = np.asarray(ad.value(bundle.w_prime))
        preds.append(np.asarray(ad.value(M.concept_predict(wp, M.gamma_from_params(model.params)))))
        reads.append(np.asarray(ad.value(bundle.readouts)))
    return np.concatenate(preds), np.concatenate(reads)


def concept_mae(predictions: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """(per-concept MAE, mean MAE) in normalized units."""
    p = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"shape mismatch: predictions {p.shape} vs labels {y.shape}")
    if p.shape[0] == 0:
        raise DataError("empty split")
    per = np.mean(np.abs(p - y), axis=0)
    return per, float(per.mean())


def model_concept_mae(model: M.Model, images: np.ndarray, labels: np.ndarray):
    preds, _ = predict_in_batches(model, images)
    return concept_mae(preds, labels)


# ---------------------------------------------------------------------------
# avgMI
# ---------------------------------------------------------------------------

def _quantile_bin(x: np.ndarray, bins: int) -> np.ndarray:
    """Equal-count binning; invariant to strictly monotone transforms."""
    ranks = np.argsort(np.argsort(x, kind="stable"), kind="stable")
    return np.minimum((ranks * bins) // x.shape[0], bins - 1)


def mi_matrix(readouts: np.ndarray, labels: np.ndarray, bins: int = MI_BINS) -> np.ndarray:
    """Histogram MI (nats) between each factor read-out and each concept.

    Rank-based equal-count bins keep the estimate invariant to monotone
    transforms of the read-outs.  Constant columns get MI 0 with a warning.
    """
    r = np.asarray(readouts, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n_samples, n = r.shape
    m = y.shape[1]
    if y.shape[0] != n_samples:
        raise DataError("readouts and labels disagree on sample count")
    if n_samples < 2000:
        raise DataError(f"need >= 2000 samples for the MI estimate, got {n_samples}")
    out = np.zeros((n, m))
    r_bins, y_bins = [], []
    for i in range(n):
        if np.var(r[:, i]) < 1e-18:
            warnings.warn(f"factor read-out {i} is constant; its MI entries are 0")
            r_bins.append(None)
        else:
            r_bins.append(_quantile_bin(r[:, i], bins))
    for j in range(m):
        if np.var(y[:, j]) < 1e-18:
            warnings.warn(f"concept column {j} is constant; its MI entries are 0")
            y_bins.append(None)
        else:
            y_bins.append(_quantile_bin(y[:, j], bins))
    for i in range(n):
        if r_bins[i] is None:
            continue
        for j in range(m):
            if y_bins[j] is None:
                continue
            joint = np.zeros((bins, bins))
            np.add.at(joint, (r_bins[i], y_bins[j]), 1.0)
            joint /= n_samples
            px = joint.sum(axis=1, keepdims=True)
            py = joint.sum(axis=0, keepdims=True)
            nz = joint > 0
            out[i, j] = float(np.sum(joint[nz] * np.log(joint[nz] / (px @ py)[nz])))
    return out


def mi_significance_floor(n_samples: int, bins: int = MI_BINS) -> float:
    """Null-hypothesis MI level: 2N*MI ~ chi2 with (bins-1)^2 dof under
    independence; floor at mean + 5 sd so independent pairs read as zero."""
    dof = (bins - 1) ** 2
    return (dof + 5.0 * np.sqrt(2.0 * dof)) / (2.0 * n_samples)


def avg_mi_from_readouts(readouts: np.ndarray, labels: np.ndarray,
                         mask_gt: np.ndarray, bins: int = MI_BINS) -> float:
    """Frobenius distance between the (floored, max-normalized) MI matrix and
    the ground-truth factor-concept mask."""
    mi = mi_matrix(readouts, labels, bins)
    floor = mi_significance_floor(readouts.shape[0], bins)
    mi = np.where(mi > floor, mi, 0.0)
    peak = mi.max()
    if peak > 0:
        mi = mi / peak
    gt = np.asarray(mask_gt, dtype=np.float64)
    n, m = mi.shape
    if gt.shape[1] != m:
        raise DataError(f"mask_gt has {gt.shape[1]} concepts, expected {m}")
    if gt.shape[0] < n:  # model may carry more factor slots than the generator
        gt = np.vstack([gt, np.zeros((n - gt.shape[0], m))])
    elif gt.shape[0] > n:
        raise DataError("mask_gt has more factor rows than the model")
    return float(np.linalg.norm(mi - gt))


def model_avg_mi(model: M.Model, images: np.ndarray, labels: np.ndarray,
                 mask_gt: np.ndarray) -> float:
    _, reads = predict_in_batches(model, images)
    return avg_mi_from_readouts(reads, labels, mask_gt)


# ---------------------------------------------------------------------------
# structure scores
# ---------------------------------------------------------------------------

def threshold_adjacency(adjacency: np.ndarray, tau: float) -> np.ndarray:
    b = (np.abs(np.asarray(adjacency)) >= tau).astype(np.int64)
    np.fill_diagonal(b, 0)
    return b


def shd(learned_bin: np.ndarray, truth_bin: np.ndarray) -> int:
    """Insertions + deletions + reversals between two directed edge sets."""
    a = np.asarray(learned_bin, dtype=bool)
    b = np.asarray(truth_bin, dtype=bool)
    if a.shape != b.shape:
        raise DataError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    total = 0
    for i in range(n):
        for j in range(i + 1, n):
            pair_a = (int(a[i, j]), int(a[j, i]))
            pair_b = (int(b[i, j]), int(b[j, i]))
            if pair_a == pair_b:
                continue
            if pair_a == pair_b[::-1] and any(pair_a):
                total += 1  # reversal
            else:
                total += abs(pair_a[0] - pair_b[0]) + abs(pair_a[1] - pair_b[1])
    return int(total)


def mask_f1(learned_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """F1 over the learnable (strictly lower, off-diagonal) entries."""
    lm = np.asarray(learned_mask)
    tm = np.asarray(truth_mask)
    n, m = lm.shape
    if tm.shape[1] != m:
        raise DataError("mask column mismatch")
    if tm.shape[0] < n:
        tm = np.vstack([tm, np.zeros((n - tm.shape[0], m), dtype=tm.dtype)])
    i = np.arange(n)[:, None]
    j = np.arange(m)[None, :]
    learnable = i > j
    pred = lm[learnable] > 0.5
    true = tm[learnable] > 0.5
    tp = int(np.sum(pred & true))
    fp = int(np.sum(pred & ~true))
    fn = int(np.sum(~pred & true))
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def structure_scores(adjacency: np.ndarray, learned_mask: np.ndarray,
                     structure, tau: float = 0.1) -> tuple[int, float]:
    """(SHD over the first m factor slots, mask F1 over learnable entries)."""
    truth = np.asarray(structure.adjacency_gt)
    m = truth.shape[0]
    a = np.asarray(adjacency)
    if a.shape[0] < m:
        raise DataError(f"adjacency has {a.shape[0]} slots, ground truth needs {m}")
    learned_bin = threshold_adjacency(a[:m, :m], tau)
    return shd(learned_bin, truth != 0), mask_f1(learned_mask, structure.mask_gt)


# ---------------------------------------------------------------------------
# whole-model evaluation
# ---------------------------------------------------------------------------

def reconstruct_in_batches(model: M.Model, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = np.empty_like(images, dtype=np.float64)
    for lo in range(0, images.shape[0], batch):
        bundle = model.encode(images[lo : lo + batch])
        out[lo : lo + batch] = np.asarray(ad.value(M.decode(bundle.w, bundle.z, model.params,
                                                            model.image_size)))
    return out


def evaluate_model(model: M.Model, images: np.ndarray, concepts: np.ndarray,
                   structure=None, val_indices=None, tau: float = 0.1,
                   seed: int = 0, mi_samples: int = 2000) -> EvalReport:
    """PSNR/MAE on the given validation subset, avgMI on >=2000 samples, and
    structure scores against the manifest ground truth (when provided)."""
    val = np.arange(images.shape[0]) if val_indices is None else np.asarray(val_indices)
    recon = reconstruct_in_batches(model, images[val])
    psnr_db = psnr(images[val], recon)
    preds, _ = predict_in_batches(model, images[val])
    per, mean_mae = concept_mae(preds, concepts[val])

    take = min(images.shape[0], max(mi_samples, 2000))
    shd_val, f1 = 0, 1.0
    avg_mi = float("nan")
    if structure is not None:
        if take >= 2000:
            _, reads = predict_in_batches(model, images[:take])
            avg_mi = avg_mi_from_readouts(reads, concepts[:take], structure.mask_gt)
        else:
            warnings.warn(f"avgMI needs >= 2000 samples, have {take}; reporting NaN")
        shd_val, f1 = structure_scores(model.adjacency(), model.hard_mask(), structure, tau)
    return EvalReport(psnr_db=psnr_db, mae_per_concept=[float(v) for v in per],
                      mae=mean_mae, avg_mi=avg_mi, shd=shd_val, mask_f1=f1,
                      sample_count=int(val.shape[0]), seed=seed)
