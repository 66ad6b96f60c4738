"""Optimization loop: AdamW over the full parameter set with Gumbel-temperature
annealing, a two-stage acyclicity weight, checkpoint/resume, the ground-truth
structure mode, and the KL-weight sensitivity sweep."""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import metrics as X
from . import model as M
from . import objectives as O
from .errors import DataError, NonFiniteLossError
from .optim import AdamW
from .scenegen import dataio

STRUCTURE_PARAMS = ("scm.adjacency", "mask.logits")
TOTAL_FACTOR_SLOTS = 8  # n + k when not set explicitly


@dataclass
class GumbelSchedule:
    tau_start: float = 1.0
    tau_end: float = 0.3
    hard_after: float = 0.5  # fraction of epochs after which sampling goes hard

    def tau(self, epoch: int, epochs: int) -> float:
        t = epoch / max(1, epochs - 1)
        return float(self.tau_start * (self.tau_end / self.tau_start) ** t)

    def hard(self, epoch: int, epochs: int) -> bool:
        return epoch >= self.hard_after * epochs


@dataclass
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs/run"
    n: int | None = None  # causal slots; defaults to the concept count
    k: int | None = None  # free slots; defaults to 8 - n
    d: int = 4
    weights: O.LossWeights = field(default_factory=O.LossWeights)
    learning_rate: float = 1e-3
    weight_decay: float = 1e-3
    epochs: int = 200
    batch_size: int = 64
    seed: int = 0
    gumbel: GumbelSchedule = field(default_factory=GumbelSchedule)
    structure_mode: str = "learned"  # or "fixed_true"
    image_size: int | None = None  # defaults to the dataset's size
    width: int = M.DEFAULT_WIDTH
    checkpoint_every: int = 10
    dag_warmup_fraction: float = 0.3
    lambda_dag_after: float = 10.0
    val_fraction: float = 0.1
    eval_tau: float = 0.1

    def __post_init__(self):
        if self.structure_mode not in ("learned", "fixed_true"):
            raise DataError(f"structure_mode must be learned|fixed_true, got {self.structure_mode!r}")
        for name in ("learning_rate", "weight_decay", "epochs", "batch_size", "d", "width"):
            if getattr(self, name) is not None and getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = O.LossWeights(**d["weights"])
        if "gumbel" in d and isinstance(d["gumbel"], dict):
            d["gumbel"] = GumbelSchedule(**d["gumbel"])
        return cls(**d)


def split_indices(count: int, val_fraction: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic 90/10 split by multiplicative index hash (seed-free)."""
    idx = np.arange(count, dtype=np.uint64)
    h = (idx * np.uint64(2654435761)) % np.uint64(2**32)
    is_train = h < np.uint64((1.0 - val_fraction) * 2**32)
    return np.flatnonzero(is_train), np.flatnonzero(~is_train)


def resolve_spec(config: TrainConfig, m: int) -> M.LatentSpec:
    n = config.n if config.n is not None else m
    k = config.k if config.k is not None else max(1, TOTAL_FACTOR_SLOTS - n)
    return M.LatentSpec(n=n, k=k, d=config.d, m=m)


def fixed_structures(manifest: dataio.DatasetManifest, spec: M.LatentSpec):
    """Ground-truth A (padded to n x n) and mask (padded to n x m) as float32."""
    gt = manifest.structure
    m = len(manifest.concept_names)
    a = np.zeros((spec.n, spec.n), dtype=np.float32)
    a[:m, :m] = np.asarray(gt.adjacency_gt, dtype=np.float32)
    mask = np.zeros((spec.n, spec.m), dtype=np.float32)
    rows = np.asarray(gt.mask_gt, dtype=np.float32)
    mask[: rows.shape[0], :] = rows
    return a, mask


@dataclass
class TrainState:
    params: dict
    optimizer: AdamW
    epoch: int
    step: int
    best_val: float

    def checkpoint_extra(self, config: TrainConfig) -> dict:
        return {
            "epoch": self.epoch,
            "opt_t": self.optimizer.t,
            "best_val": self.best_val,
            "config": config.to_dict(),
        }


class Trainer:
    def __init__(self, config: TrainConfig):
        self.config = config
        self.images, self.concepts, self.manifest = dataio.load_dataset(config.dataset)
        if config.image_size is not None and config.image_size != self.manifest.image_size:
            raise DataError(
                f"config image_size {config.image_size} != dataset {self.manifest.image_size}")
        self.image_size = self.manifest.image_size
        self.spec = resolve_spec(config, len(self.manifest.concept_names))
        self.train_idx, self.val_idx = split_indices(self.manifest.sample_count,
                                                     config.val_fraction)
        self.fixed_mask = None
        self.fixed_adjacency = None
        if config.structure_mode == "fixed_true":
            self.fixed_adjacency, self.fixed_mask = fixed_structures(self.manifest, self.spec)
        self.out = Path(config.out_dir)

    # -- setup ---------------------------------------------------------------
    def init_state(self) -> TrainState:
        params = M.init_params(self.spec, self.image_size, self.config.width,
                               seed=self.config.seed)
        if self.fixed_adjacency is not None:
            params["scm.adjacency"] = self.fixed_adjacency.copy()
        opt = AdamW(self._trainable(params), lr=self.config.learning_rate,
                    weight_decay=self.config.weight_decay)
        return TrainState(params=params, optimizer=opt, epoch=0, step=0, best_val=np.inf)

    def _trainable(self, params: dict) -> dict:
        if self.config.structure_mode == "fixed_true":
            return {k: v for k, v in params.items() if k not in STRUCTURE_PARAMS}
        return params

    def effective_weights(self, epoch: int) -> O.LossWeights:
        w = dataclasses.replace(self.config.weights)
        if self.config.structure_mode == "fixed_true":
            w.lambda_dag = 0.0
            w.lambda_sparse = 0.0
        elif epoch >= self.config.dag_warmup_fraction * self.config.epochs:
            w.lambda_dag = self.config.lambda_dag_after
        return w

    # -- core loop -----------------------------------------------------------
    def run_epoch(self, state: TrainState, epoch: int, log_writer) -> None:
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 1000 + epoch])
        order = rng.permutation(self.train_idx)
        bs = cfg.batch_size
        tau = cfg.gumbel.tau(epoch, cfg.epochs)
        hard = cfg.gumbel.hard(epoch, cfg.epochs)
        weights = self.effective_weights(epoch)
        n_batches = len(order) // bs
        if n_batches == 0:
            raise DataError("training split smaller than one batch")
        for b in range(n_batches):
            batch_idx = order[b * bs : (b + 1) * bs]
            images = self.images[batch_idx]
            concepts = self.concepts[batch_idx].astype(np.float32)
            noise = M.draw_noise(self.spec, bs, rng)
            trainable = self._trainable(state.params)
            tensors = {k: ad.Tensor(v, requires_grad=True) for k, v in trainable.items()}
            run_params = dict(state.params)
            run_params.update(tensors)
            total, report, _ = O.training_forward(
                run_params, self.spec, images, concepts, weights, noise, tau, hard,
                self.image_size, dataset_size=len(self.train_idx),
                fixed_mask=self.fixed_mask)
            if not np.isfinite(report.total):
                self._dump_diagnostics(state, epoch, report)
                raise NonFiniteLossError(f"non-finite loss at step {state.step}: {report}")
            total.backward()
            grads = {k: t.grad for k, t in tensors.items() if t.grad is not None}
            state.optimizer.step(trainable, grads)
            state.step += 1
            if log_writer is not None:
                log_writer.writerow([state.step, epoch, f"{tau:.4f}", int(hard)]
                                    + [f"{v:.8g}" for v in report.row()])

    def validation_loss(self, state: TrainState, epoch: int) -> float:
        cfg = self.config
        take = self.val_idx[: min(len(self.val_idx), 256)]
        if len(take) == 0:
            return float("nan")
        rng = np.random.default_rng([cfg.seed, 777])  # frozen noise: comparable epochs
        noise = M.draw_noise(self.spec, len(take), rng)
        weights = self.effective_weights(epoch)
        tau = cfg.gumbel.tau(epoch, cfg.epochs)
        _, report, _ = O.training_forward(
            state.params, self.spec, self.images[take],
            self.concepts[take].astype(np.float32), weights, noise, tau,
            cfg.gumbel.hard(epoch, cfg.epochs), self.image_size,
            dataset_size=len(self.train_idx), fixed_mask=self.fixed_mask)
        return report.total

    def _dump_diagnostics(self, state: TrainState, epoch: int, report) -> None:
        self.out.mkdir(parents=True, exist_ok=True)
        diag = {
            "epoch": epoch, "step": state.step, "report": report.__dict__,
            "param_norms": {k: float(np.linalg.norm(v)) for k, v in state.params.items()},
        }
        with open(self.out / "diagnostics.json", "w") as f:
            json.dump(diag, f, indent=2)

    def snapshot_structure(self, state: TrainState) -> dict:
        probs = M.map_mask(state.params["mask.logits"], self.spec) if self.fixed_mask is None \
            else self.fixed_mask
        relaxed = M.compose_mask(ad.sigmoid(state.params["mask.logits"].astype(np.float64)),
                                 self.spec, hard=False) if self.fixed_mask is None else self.fixed_mask
        return {
            "mask_probs": np.asarray(relaxed, dtype=np.float64),
            "mask_hard": np.asarray(probs, dtype=np.float64),
            "abs_adjacency": np.abs(np.asarray(
                ad.value(M.effective_adjacency(state.params, self.spec)), dtype=np.float64)),
        }

    def save_state(self, state: TrainState, subdir: str) -> Path:
        path = self.out / subdir
        M.save_checkpoint(path, state.params, self.spec, self.image_size,
                          step=state.step, width=self.config.width,
                          extra=state.checkpoint_extra(self.config),
                          state_arrays=state.optimizer.state_arrays())
        return path

    def load_state(self, ckpt) -> TrainState:
        params, spec, manifest = M.load_checkpoint(ckpt)
        if spec != self.spec:
            raise DataError(f"checkpoint spec {spec} != configured {self.spec}")
        opt = AdamW(self._trainable(params), lr=self.config.learning_rate,
                    weight_decay=self.config.weight_decay)
        extra = manifest["extra"]
        opt.load_state_arrays(manifest["state_arrays"], t=extra["opt_t"])
        return TrainState(params=params, optimizer=opt, epoch=extra["epoch"],
                          step=manifest["step"], best_val=extra["best_val"])

    # -- public entry points ---------------------------------------------------
    def train(self, resume_from=None, stop_after: int | None = None) -> dict:
        """Run (or continue) training; stop_after halts early at that epoch
        count while keeping the schedules of the full cfg.epochs run, so a
        stopped-and-resumed run reproduces an uninterrupted one."""
        cfg = self.config
        self.out.mkdir(parents=True, exist_ok=True)
        state = self.init_state() if resume_from is None else self.load_state(resume_from)
        history = {"epoch": [], "val_loss": [], "tau": [], "mask_probs": [],
                   "abs_adjacency": [], "mask_hard": []}
        t0 = time.time()
        last_epoch = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
        log_path = self.out / "loss_log.csv"
        mode = "a" if resume_from is not None and log_path.exists() else "w"
        with open(log_path, mode, newline="") as logf:
            writer = csv.writer(logf)
            if mode == "w":
                writer.writerow(["step", "epoch", "tau", "hard"] + list(O.LossReport.FIELDS))
            for epoch in range(state.epoch, last_epoch):
                self.run_epoch(state, epoch, writer)
                state.epoch = epoch + 1
                val = self.validation_loss(state, epoch)
                snap = self.snapshot_structure(state)
                history["epoch"].append(epoch)
                history["val_loss"].append(val)
                history["tau"].append(cfg.gumbel.tau(epoch, cfg.epochs))
                for k in ("mask_probs", "abs_adjacency", "mask_hard"):
                    history[k].append(snap[k])
                if np.isfinite(val) and val < state.best_val:
                    state.best_val = float(val)
                    self.save_state(state, "best")
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    self.save_state(state, f"epoch_{epoch + 1:04d}")
        final = self.save_state(state, "final")
        np.savez(self.out / "structure_history.npz",
                 epoch=np.array(history["epoch"]),
                 val_loss=np.array(history["val_loss"]),
                 mask_probs=np.stack(history["mask_probs"]),
                 mask_hard=np.stack(history["mask_hard"]),
                 abs_adjacency=np.stack(history["abs_adjacency"]))
        save_structure_heatmaps(self.out, history)
        with open(self.out / "train_summary.json", "w") as f:
            json.dump({"final_checkpoint": str(final), "best_val": state.best_val,
                       "steps": state.step, "wall_seconds": time.time() - t0,
                       "config": cfg.to_dict()}, f, indent=2, default=str)
        return {"final": final, "best_val": state.best_val, "history": history,
                "state": state}


def save_structure_heatmaps(out_dir, history, max_panels: int = 6) -> None:
    """Epoch-series heatmap PNGs of the relaxed mask and |A| (convergence view)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = history["epoch"]
    if not epochs:
        return
    n = len(epochs)
    picks = sorted(set(int(round(x)) for x in np.linspace(0, n - 1, min(max_panels, n))))
    for key, fname in (("mask_probs", "mask_convergence.png"),
                       ("abs_adjacency", "adjacency_convergence.png")):
        fig, axes = plt.subplots(1, len(picks), figsize=(2.2 * len(picks), 2.4))
        if len(picks) == 1:
            axes = [axes]
        for ax, p in zip(axes, picks):
            ax.imshow(history[key][p], vmin=0.0, cmap="viridis")
            ax.set_title(f"epoch {epochs[p] + 1}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.tight_layout()
        fig.savefig(Path(out_dir) / fname, dpi=120)
        plt.close(fig)


def train(config: TrainConfig, resume_from=None, stop_after: int | None = None) -> dict:
    return Trainer(config).train(resume_from=resume_from, stop_after=stop_after)


DEFAULT_SWEEP_GRID = ((0.0, 1.0), (1.0, 0.0), (1.0, 1.0), (10.0, 1.0),
                      (1.0, 10.0), (0.1, 1.0), (1.0, 0.1))


def sensitivity_sweep(base: TrainConfig, grid=DEFAULT_SWEEP_GRID,
                      seeds=(0,), out_dir=None) -> list[dict]:
    """Train every (rho1, rho2) cell and report PSNR / MAE / avgMI per seed."""
    out = Path(out_dir if out_dir is not None else Path(base.out_dir) / "sweep")
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for rho1, rho2 in grid:
        for seed in seeds:
            cfg = TrainConfig.from_dict(base.to_dict())
            cfg.weights = dataclasses.replace(base.weights, rho1=rho1, rho2=rho2)
            cfg.seed = int(seed)
            cfg.out_dir = str(out / f"rho1_{rho1:g}_rho2_{rho2:g}_seed{seed}")
            trainer = Trainer(cfg)
            result = trainer.train()
            mdl = M.Model.load(result["final"])
            rep = X.evaluate_model(mdl, trainer.images,
                                   trainer.concepts, trainer.manifest.structure,
                                   val_indices=trainer.val_idx, tau=cfg.eval_tau,
                                   seed=cfg.seed)
            rows.append({"rho1": rho1, "rho2": rho2, "seed": seed,
                         "psnr_db": rep.psnr_db, "mae": rep.mae, "avg_mi": rep.avg_mi})
    with open(out / "sweep_results.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["rho1", "rho2", "seed", "psnr_db", "mae", "avg_mi"])
        for r in rows:
            w.writerow([f"{r['rho1']:g}", f"{r['rho2']:g}", r["seed"],
                        f"{r['psnr_db']:.6g}", f"{r['mae']:.6g}", f"{r['avg_mi']:.6g}"])
    return rows
