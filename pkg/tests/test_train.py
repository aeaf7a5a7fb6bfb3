import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molattn import tensor as T
from molattn.chem import parse_smiles
from molattn.featurize import featurize_molecule, make_batch
from molattn.model import MatConfig, init_params, mat_forward
from molattn.tensor import Tensor, make_rng
from molattn.toy import synthetic_corpus, synthetic_regression
from molattn.train import (FINE_TUNE_LR_GRID, Adam, Dataset, TrainConfig, base_rate_loss,
                           compute_loss, mask_nodes, noam_lr, pretrain, pretrain_step,
                           pretrain_targets, random_split, select_best, train_loop)


# ---------------------------------------------------------------- schedule

def test_noam_crossover_and_decay():
    d, f, w = 64, 0.05, 100
    peak = f * d ** -0.5 * w ** -0.5
    assert noam_lr(w, d, f, w) == pytest.approx(peak, rel=1e-15)
    assert noam_lr(4 * w, d, f, w) == pytest.approx(peak / 2, rel=1e-15)
    assert noam_lr(w // 2, d, f, w) == pytest.approx(peak / 2, rel=1e-15)
    assert noam_lr(1, d, f, w) == pytest.approx(peak / w, rel=1e-15)


def test_noam_printed_exponent_step_one():
    assert noam_lr(1, 64, 0.05, 100, warmup_power=0.5) == pytest.approx(6.25e-4, abs=1e-18)


def test_noam_rejects_step_zero():
    with pytest.raises(ValueError):
        noam_lr(0, 64, 0.05, 10)


@settings(max_examples=50, deadline=None)
@given(w=st.integers(1, 500), d=st.sampled_from([16, 64, 1024]))
def test_noam_rises_then_falls(w, d):
    lrs = [noam_lr(s, d, 0.05, w) for s in range(1, 3 * w + 2)]
    peak = int(np.argmax(lrs)) + 1
    assert peak == w
    assert all(a <= b for a, b in zip(lrs[:w - 1], lrs[1:w]))
    assert all(a >= b for a, b in zip(lrs[w - 1:], lrs[w:]))


def test_train_config_derivations():
    cfg = TrainConfig(learning_rate=5e-4, warmup_factor=0.0)
    assert cfg.optimizer_factor == pytest.approx(0.05)
    assert cfg.warmup_steps(1000) == 1
    assert TrainConfig(warmup_factor=0.1).warmup_steps(1000) == 100
    with pytest.raises(ValueError):
        TrainConfig(warmup_factor=0.6)
    assert FINE_TUNE_LR_GRID == (1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)


# ---------------------------------------------------------------- losses and optimizer

def test_losses():
    assert compute_loss(Tensor([0.3, 1.0]), [0.3, 1.0], "regression").item() == 0.0
    assert compute_loss(Tensor([0.0]), [1.0], "binary").item() == pytest.approx(math.log(2))
    assert compute_loss(Tensor([40.0, -40.0]), [1.0, 0.0], "binary").item() < 1e-15
    with pytest.raises(Exception):
        compute_loss(Tensor([np.nan]), [1.0], "regression")
    with pytest.raises(ValueError):
        compute_loss(Tensor([0.0]), [2.0], "binary")


def test_adam_zero_gradient_leaves_params_without_decay():
    p = {"w": Tensor(np.arange(4.0), True)}
    opt = Adam(p)
    p["w"].grad = np.zeros(4)
    opt.step(0.1)
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))
    Adam(p, weight_decay=0.5).step(0.1)
    np.testing.assert_allclose(p["w"].data, np.arange(4.0) * 0.95)


def test_adam_decreases_quadratic():
    w = Tensor(np.array([3.0, -2.0]), True)
    opt = Adam({"w": w})
    before = float((w.data ** 2).sum())
    for _ in range(50):
        opt.zero_grad()
        T.sum_all(T.mul(w, w)).backward()
        opt.step(0.05)
    assert float((w.data ** 2).sum()) < before * 0.5


# ---------------------------------------------------------------- masking

def test_mask_counts():
    mols = [synthetic_corpus(1, seed=s, min_nodes=10, max_nodes=10)[0] for s in range(3)]
    batch = make_batch([featurize_molecule(m) for m in mols])
    _, pos, _ = mask_nodes(batch, 0.15, make_rng(0, "masking"))
    assert pos.sum(axis=1).tolist() == [2, 2, 2]


def test_mask_count_twenty_atoms_exact():
    mols = synthetic_corpus(1000, seed=1, min_nodes=20, max_nodes=20)
    batch = make_batch([featurize_molecule(m) for m in mols])
    _, pos, _ = mask_nodes(batch, 0.15, make_rng(1, "masking"))
    assert np.all(pos.sum(axis=1) == 3)


def test_mask_determinism_and_token():
    batch = make_batch([featurize_molecule(m) for m in synthetic_corpus(4, seed=2)])
    a, pa, orig = mask_nodes(batch, 0.15, make_rng(5, "masking"))
    b, pb, _ = mask_nodes(batch, 0.15, make_rng(5, "masking"))
    np.testing.assert_array_equal(pa, pb)
    assert np.all(a.features[pa] == 0) and np.all(a.node_masked == pa)
    assert not np.any(pa & batch.dummy) and not np.any(pa & ~batch.mask)
    np.testing.assert_array_equal(orig, batch.features)


def test_pretrain_targets_map_charge():
    rows = np.zeros((3, 26))
    rows[:, 23] = [-2, 0, 1]
    np.testing.assert_array_equal(pretrain_targets(rows)[:, 23], [0.0, 0.5, 1.0])


def test_pretrain_loss_ignores_unmasked_logits():
    cfg = MatConfig(d_model=16, n_heads=4, task="node_pretrain")
    params = init_params(cfg, make_rng(0, "init"))
    batch = make_batch([featurize_molecule(m) for m in synthetic_corpus(3, seed=3)])
    masked, pos, orig = mask_nodes(batch, 0.15, make_rng(0, "masking"))
    logits = mat_forward(masked, params, cfg).output
    w = np.broadcast_to(pos[..., None], logits.shape)
    base = compute_loss(logits, pretrain_targets(orig), "node_pretrain", w).item()
    noisy = logits.data + np.where(w, 0.0, 50.0)
    assert compute_loss(Tensor(noisy), pretrain_targets(orig), "node_pretrain", w).item() == base
    z = Tensor(logits.data.copy(), True)
    compute_loss(z, pretrain_targets(orig), "node_pretrain", w).backward()
    assert np.all(z.grad[~pos] == 0)


def test_untrained_pretrain_loss_beats_nothing():
    cfg = MatConfig(d_model=16, n_heads=4, task="node_pretrain")
    params = init_params(cfg, make_rng(1, "init"))
    batch = make_batch([featurize_molecule(m) for m in synthetic_corpus(16, seed=4)])
    masked, pos, orig = mask_nodes(batch, 0.15, make_rng(1, "masking"))
    loss = pretrain_step(masked, pos, orig, params, cfg, "eval").item()
    assert loss > base_rate_loss(pos, orig)
    assert 0.3 < loss < 2.0


def test_pretraining_reduces_loss():
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4)
    ck, hist = pretrain(synthetic_corpus(64, seed=5), cfg, TrainConfig(batch_size=16, learning_rate=1e-3), steps=40)
    losses = [r["train_loss"] for r in hist]
    assert len(losses) == 40 and ck.config.task == "node_pretrain"
    assert np.mean(losses[-8:]) < np.mean(losses[:8])


# ---------------------------------------------------------------- data

def make_ds(n=10, task="regression"):
    mols = synthetic_corpus(n, seed=6)
    labels = np.arange(n, dtype=float) if task == "regression" else np.arange(n) % 2
    return Dataset(mols, labels, task)


def test_split_all_train():
    tr, va, te = random_split(make_ds(10), (1.0, 0.0, 0.0), seed=0)
    assert (len(tr), len(va), len(te)) == (10, 0, 0)


def test_split_deterministic_and_disjoint():
    ds = make_ds(30)
    a = random_split(ds, (0.6, 0.2, 0.2), seed=3)
    b = random_split(ds, (0.6, 0.2, 0.2), seed=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.labels, y.labels)
    labels = np.concatenate([f.labels for f in a])
    assert sorted(labels.tolist()) == list(range(30))


def test_split_standardizes_on_train_fold():
    tr, va, _ = random_split(make_ds(30), (0.6, 0.2, 0.2), seed=1)
    t = tr.targets()
    assert abs(t.mean()) < 1e-9 and abs(t.std() - 1) < 1e-9
    assert va.standardization == tr.standardization
    np.testing.assert_allclose(tr.to_label_units(t), tr.labels)


def test_split_errors():
    with pytest.raises(ValueError):
        random_split(make_ds(10), (0.5, 0.5, 0.5))
    with pytest.raises(ValueError, match="empty"):
        random_split(make_ds(2), (0.9, 0.05, 0.05))


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(synthetic_corpus(2, seed=0), [0, 2], "binary")
    with pytest.raises(ValueError):
        Dataset(synthetic_corpus(2, seed=0), [0.0, np.inf])


# ---------------------------------------------------------------- training loop

def test_train_loop_keeps_best_epoch():
    mols, y = synthetic_regression(40, seed=7)
    tr, va, _ = random_split(Dataset(mols, y), (0.5, 0.5, 0.0), seed=0)
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4)
    ck, hist = train_loop(tr, va, cfg, TrainConfig(epochs=6, batch_size=8, learning_rate=1e-3))
    epochs = [r for r in hist if r["kind"] == "epoch"]
    assert len(epochs) == 6 and sum(r["kind"] == "step" for r in hist) == 6 * 3
    assert ck.meta["epoch"] == select_best(hist, "regression")


def test_select_best_examples():
    hist = [{"kind": "epoch", "epoch": e, "val_metric": m} for e, m in enumerate([0.5, 0.4, 0.2, 0.3], 1)]
    assert select_best(hist, "regression") == 3
    assert select_best(hist, "binary") == 1
    assert select_best([], "binary") is None


def test_fine_tune_loads_pretrained_body():
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4)
    pre, _ = pretrain(synthetic_corpus(16, seed=8), cfg, TrainConfig(batch_size=8), steps=2)
    mols, y = synthetic_regression(8, seed=9)
    ck, _ = train_loop(Dataset(mols, y), None, cfg, TrainConfig(epochs=0), pretrained=pre)
    for name, value in ck.params.items():
        if not name.startswith("head"):
            np.testing.assert_array_equal(value, pre.params[name])
    bad = MatConfig(d_model=32, n_layers=1, n_heads=4)
    with pytest.raises(ValueError, match="shape"):
        train_loop(Dataset(mols, y), None, bad, TrainConfig(epochs=1), pretrained=pre)


def test_training_is_reproducible():
    mols, y = synthetic_regression(12, seed=10)
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4, dropout=0.1)
    tcfg = TrainConfig(epochs=2, batch_size=4, seed=3)
    a, _ = train_loop(Dataset(mols, y), None, cfg, tcfg)
    b, _ = train_loop(Dataset(mols, y), None, cfg, tcfg)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_binary_training_runs():
    mols = [parse_smiles(s) for s in ("CCO", "c1ccccc1", "CCN", "c1ccncc1")]
    ds = Dataset(mols, [0, 1, 0, 1], "binary")
    ck, hist = train_loop(ds, ds, MatConfig(d_model=16, n_layers=1, n_heads=4),
                          TrainConfig(epochs=3, batch_size=2, distance_fallback="topo"))
    assert ck.config.task == "binary"
    assert hist[-1]["val_metric"] is not None
