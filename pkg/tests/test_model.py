import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from molattn.chem import parse_smiles
from molattn.featurize import featurize_molecule, make_batch
from molattn.model import (Checkpoint, MatConfig, NumericError, init_params, mat_forward,
                           molecule_attention, read_attention_file, write_attention_file)
from molattn import tensor as T
from molattn.tensor import Tensor, make_rng
from molattn.toy import synthetic_corpus

from oracles import vanilla_attention


def small_cfg(**kw):
    base = dict(d_model=16, n_layers=2, n_heads=4, n_pff=1, lambda_a=0.3, lambda_d=0.4,
                lambda_g=0.3, kernel="exp")
    base.update(kw)
    return MatConfig(**base)


def predict(mols, params, cfg, pad_to=None):
    batch = make_batch([featurize_molecule(m) for m in mols], pad_to=pad_to)
    return mat_forward(batch, params, cfg).output.data


def test_reduces_to_vanilla_attention():
    cfg = small_cfg(lambda_a=1.0, lambda_d=0.0, lambda_g=0.0)
    params = init_params(cfg, make_rng(0, "init"))
    rng = np.random.default_rng(0)
    for _ in range(20):
        n = int(rng.integers(2, 12))
        x = rng.normal(size=(1, n, 16))
        mask = np.ones((1, n), bool)
        mask[0, n - int(rng.integers(0, 2)):] = False
        mask[0, 0] = True
        out = molecule_attention(Tensor(x), np.zeros((1, n, n)), np.zeros((1, n, n)), mask,
                                 params, "layers.0.attn", cfg).data[0]
        p = {k: params[f"layers.0.attn.{k}"].data for k in ("q.w", "q.b", "k.w", "k.b", "v.w", "v.b", "o.w", "o.b")}
        ref = vanilla_attention(x[0], p["q.w"], p["q.b"], p["k.w"], p["k.b"], p["v.w"], p["v.b"],
                                p["o.w"], p["o.b"], 4, mask[0])
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


def test_adjacency_only_selects_neighbour_values():
    cfg = small_cfg(lambda_a=0.0, lambda_d=0.0, lambda_g=1.0)
    params = init_params(cfg, make_rng(1, "init"))
    for name in ("o.w",):
        params[f"layers.0.attn.{name}"] = Tensor(np.eye(16))
    x = np.random.default_rng(1).normal(size=(1, 2, 16))
    A = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    out = molecule_attention(Tensor(x), A, np.zeros((1, 2, 2)), np.ones((1, 2), bool),
                             params, "layers.0.attn", cfg).data[0]
    v = x[0] @ params["layers.0.attn.v.w"].data + params["layers.0.attn.v.b"].data
    np.testing.assert_allclose(out, v[::-1], atol=1e-14)


def test_record_addends_recombine():
    cfg = small_cfg(kernel="softmax", lambda_a=0.2, lambda_d=0.5, lambda_g=0.3)
    params = init_params(cfg, make_rng(2, "init"))
    mol = synthetic_corpus(1, seed=3)[0]
    res = mat_forward(make_batch([featurize_molecule(mol)]), params, cfg, record=True)
    assert len(res.attention) == cfg.n_layers
    for rec in res.attention:
        comp = 0.2 * rec["softmax"] + 0.5 * rec["distance"] + 0.3 * rec["adjacency"]
        np.testing.assert_allclose(rec["composite"], comp, atol=1e-12)
        assert rec["composite"].shape == (1, 4, len(mol) + 1, len(mol) + 1)
        real = rec["softmax"][0, :, :, :]
        np.testing.assert_allclose(real.sum(-1), 1.0, atol=1e-12)
        np.testing.assert_allclose(rec["distance"][0].sum(-1), 1.0, atol=1e-12)


def test_zero_layers_is_embed_pool_head():
    cfg = small_cfg(n_layers=0)
    params = init_params(cfg, make_rng(3, "init"))
    mt = featurize_molecule(parse_smiles("CCO"), True, "topo")
    out = mat_forward(make_batch([mt]), params, cfg).output.data
    x = np.concatenate([mt.features, np.zeros((mt.n_nodes, 1))], axis=1)
    h = x @ params["embed.w"].data + params["embed.b"].data
    ref = h.mean(axis=0) @ params["head.w"].data + params["head.b"].data
    np.testing.assert_allclose(out, ref, atol=1e-13)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), pad=st.integers(0, 8),
       kernel=st.sampled_from(["exp", "softmax"]))
def test_permutation_and_padding_invariance(seed, pad, kernel):
    cfg = small_cfg(kernel=kernel)
    params = init_params(cfg, make_rng(seed, "init"))
    mol = synthetic_corpus(1, seed=seed)[0]
    perm = np.random.default_rng(seed).permutation(len(mol))
    base = predict([mol], params, cfg)
    other = predict([mol.permute(perm)], params, cfg, pad_to=len(mol) + 1 + pad)
    np.testing.assert_allclose(other, base, rtol=0, atol=1e-9)


def test_batch_composition_does_not_change_predictions():
    cfg = small_cfg()
    params = init_params(cfg, make_rng(4, "init"))
    mols = synthetic_corpus(5, seed=4)
    together = predict(mols, params, cfg)
    alone = np.array([predict([m], params, cfg)[0] for m in mols])
    np.testing.assert_allclose(together, alone, atol=1e-12)


def test_init_determinism_and_unit_gamma():
    cfg = small_cfg()
    a, b = init_params(cfg, make_rng(5, "init")), init_params(cfg, make_rng(5, "init"))
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)
    assert all(np.all(a[k].data == 1) for k in a if k.endswith("gamma"))


def test_glorot_bound_on_large_matrix():
    cfg = MatConfig(d_model=1024, n_layers=1, n_heads=16)
    w = init_params(cfg, make_rng(0, "init"))["layers.0.attn.q.w"].data
    bound = np.sqrt(6.0 / 2048)
    assert w.shape == (1024, 1024)
    assert np.abs(w).max() <= bound and np.abs(w).max() > 0.99 * bound


@pytest.mark.slow
def test_pretrained_scale_forward():
    cfg = MatConfig(d_model=1024, n_layers=8, n_heads=16, n_pff=1)
    params = init_params(cfg, make_rng(0, "init"))
    mol = synthetic_corpus(1, seed=0, min_nodes=30, max_nodes=30)[0]
    assert len(mol) == 30
    out = predict([mol], params, cfg)
    assert out.shape == (1,) and np.isfinite(out).all()


def test_edge_feature_adjacency_has_gradients():
    cfg = small_cfg(adjacency_source="EdgeFeatures", lambda_g=0.5)
    params = init_params(cfg, make_rng(6, "init"))
    params["edge.b"].data[:] = 0.1
    batch = make_batch([featurize_molecule(parse_smiles("CC=CC"), True, "topo")])
    T.sum_all(mat_forward(batch, params, cfg).output).backward()
    assert np.any(params["edge.w"].grad != 0)


def test_zero_fallback_needs_zero_lambda_d(benzene):
    batch = make_batch([featurize_molecule(benzene, True, "zero")])
    with pytest.raises(ValueError, match="lambda_d"):
        mat_forward(batch, init_params(small_cfg(), make_rng(0, "init")), small_cfg())
    cfg = small_cfg(lambda_d=0.0)
    assert np.isfinite(mat_forward(batch, init_params(cfg, make_rng(0, "init")), cfg).output.data).all()


def test_non_finite_attention_names_layer():
    cfg = small_cfg(lambda_a=1.0)
    params = init_params(cfg, make_rng(0, "init"))
    params["layers.1.attn.q.b"].data[:] = np.nan
    batch = make_batch([featurize_molecule(parse_smiles("CCO"), True, "topo")])
    with pytest.raises(NumericError, match="layer 1"):
        mat_forward(batch, params, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        MatConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        MatConfig(kernel="gauss")
    with pytest.raises(ValueError):
        MatConfig(lambda_a=-0.1)
    cfg = small_cfg()
    assert MatConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    cfg = small_cfg(task="binary")
    params = init_params(cfg, make_rng(7, "init"))
    ck = Checkpoint.from_params(cfg, params, (1.5, 2.0), {"epoch": 3})
    ck.save(tmp_path / "m.matw")
    back = Checkpoint.load(tmp_path / "m.matw")
    assert back.config == cfg and back.standardization == (1.5, 2.0) and back.meta == {"epoch": 3}
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32))
    mols = synthetic_corpus(5, seed=7)
    np.testing.assert_allclose(predict(mols, back.tensors(), cfg), predict(mols, params, cfg), rtol=1e-5, atol=1e-6)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(ValueError, match="magic"):
        Checkpoint.load(tmp_path / "bad")


def test_attention_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((2, 4, 5, 5))
    write_attention_file(tmp_path / "a.bin", arr, "composite")
    kind, back = read_attention_file(tmp_path / "a.bin")
    assert kind == "composite"
    np.testing.assert_array_equal(back, arr.astype(np.float32))
