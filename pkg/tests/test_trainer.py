import csv

import numpy as np
import pytest

from scmvae import model as M
from scmvae import trainer as T
from scmvae.errors import DataError
from scmvae.scenegen import gen_pendulum


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "pend128"
    gen_pendulum(out, count=128, seed=11, image_size=32)
    return out


def small_config(data_dir, out_dir, **kw):
    base = dict(dataset=str(data_dir), out_dir=str(out_dir), epochs=2, batch_size=32,
                width=16, seed=3, checkpoint_every=1, d=2)
    base.update(kw)
    return T.TrainConfig(**base)


def read_loss_log(out_dir):
    with open(out_dir / "loss_log.csv", newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], [[float(v) for v in r] for r in rows[1:]]


def test_split_is_deterministic_and_sized():
    tr1, va1 = T.split_indices(1000)
    tr2, va2 = T.split_indices(1000)
    np.testing.assert_array_equal(tr1, tr2)
    assert len(tr1) + len(va1) == 1000
    assert 0.05 < len(va1) / 1000 < 0.15
    assert len(np.intersect1d(tr1, va1)) == 0


def test_resolve_spec_defaults():
    spec = T.resolve_spec(T.TrainConfig(), m=5)
    assert (spec.n, spec.k, spec.d) == (5, 3, 4)
    spec = T.resolve_spec(T.TrainConfig(d=4), m=4)
    assert (spec.n, spec.k) == (4, 4)


def test_config_roundtrip_and_validation():
    cfg = T.TrainConfig(dataset="x", epochs=5)
    again = T.TrainConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(DataError):
        T.TrainConfig(structure_mode="nope")
    with pytest.raises(DataError):
        T.TrainConfig(epochs=0)


def test_train_deterministic_across_runs(small_data, tmp_path):
    r1 = T.train(small_config(small_data, tmp_path / "a"))
    r2 = T.train(small_config(small_data, tmp_path / "b"))
    _, rows1 = read_loss_log(tmp_path / "a")
    _, rows2 = read_loss_log(tmp_path / "b")
    assert rows1 == rows2
    assert r1["best_val"] == r2["best_val"]


def test_fixed_true_mode_freezes_structures(small_data, tmp_path):
    cfg = small_config(small_data, tmp_path / "ft", structure_mode="fixed_true")
    trainer = T.Trainer(cfg)
    state = trainer.init_state()
    a_gt, mask_gt = T.fixed_structures(trainer.manifest, trainer.spec)
    np.testing.assert_array_equal(state.params["scm.adjacency"], a_gt)
    logits_before = state.params["mask.logits"].copy()
    import io

    writer = csv.writer(io.StringIO())
    for epoch in range(2):
        trainer.run_epoch(state, epoch, writer)
        np.testing.assert_array_equal(state.params["scm.adjacency"], a_gt)
        np.testing.assert_array_equal(state.params["mask.logits"], logits_before)
    # dag and sparsity penalties are skipped in this mode
    w = trainer.effective_weights(0)
    assert w.lambda_dag == 0.0 and w.lambda_sparse == 0.0


def test_resume_equivalence(small_data, tmp_path):
    full_cfg = small_config(small_data, tmp_path / "full", epochs=4)
    T.train(full_cfg)
    _, rows_full = read_loss_log(tmp_path / "full")

    half_cfg = small_config(small_data, tmp_path / "half", epochs=4)
    T.train(half_cfg, stop_after=2)
    T.train(half_cfg, resume_from=tmp_path / "half" / "final")
    _, rows_resumed = read_loss_log(tmp_path / "half")

    assert len(rows_full) == len(rows_resumed)
    for a, b in zip(rows_full, rows_resumed):
        assert abs(a[4] - b[4]) <= 1e-5 * max(1.0, abs(a[4]))  # total-loss column


def test_loss_decreases_on_smoke_run(small_data, tmp_path):
    cfg = small_config(small_data, tmp_path / "smoke", epochs=5)
    T.train(cfg)
    _, rows = read_loss_log(tmp_path / "smoke")
    steps_per_epoch = len(rows) // 5
    first = np.mean([r[4] for r in rows[:steps_per_epoch]])
    last = np.mean([r[4] for r in rows[-steps_per_epoch:]])
    assert last < first


def test_train_outputs_exist(small_data, tmp_path):
    out = tmp_path / "arts"
    T.train(small_config(small_data, out))
    assert (out / "final" / "manifest.json").exists()
    assert (out / "loss_log.csv").exists()
    assert (out / "structure_history.npz").exists()
    assert (out / "mask_convergence.png").exists()
    assert (out / "adjacency_convergence.png").exists()
    assert (out / "train_summary.json").exists()
    mdl = M.Model.load(out / "final")
    assert mdl.spec.m == 5


def test_gumbel_schedule_anneals():
    g = T.GumbelSchedule(tau_start=1.0, tau_end=0.3, hard_after=0.5)
    assert g.tau(0, 100) == pytest.approx(1.0)
    assert g.tau(99, 100) == pytest.approx(0.3)
    assert not g.hard(49, 100) and g.hard(50, 100)


def test_sweep_single_cell_matches_direct_train(small_data, tmp_path):
    base = small_config(small_data, tmp_path / "sw", epochs=1)
    rows = T.sensitivity_sweep(base, grid=((1.0, 1.0),), seeds=(3,), out_dir=tmp_path / "sw")
    assert len(rows) == 1
    direct_cfg = small_config(small_data, tmp_path / "direct", epochs=1)
    direct = T.train(direct_cfg)
    from scmvae import metrics as X

    trainer = T.Trainer(direct_cfg)
    mdl = M.Model.load(direct["final"])
    rep = X.evaluate_model(mdl, trainer.images, trainer.concepts,
                           trainer.manifest.structure, val_indices=trainer.val_idx,
                           seed=3)
    assert rows[0]["psnr_db"] == pytest.approx(rep.psnr_db, rel=1e-9)
    assert rows[0]["mae"] == pytest.approx(rep.mae, rel=1e-9)
    assert (tmp_path / "sw" / "sweep_results.csv").exists()
