import csv
import json

import numpy as np
import pytest

from molattn.chem import parse_smiles
from molattn.cli import load_inputs, main
from molattn.featurize import featurize_molecule, make_batch
from molattn.model import Checkpoint, MatConfig, init_params, mat_forward, read_attention_file
from molattn.tensor import make_rng
from molattn.toy import marker_distance, toy_generate

FAST = ["--epochs", "2", "--config"]


@pytest.fixture(scope="module")
def toy_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["toygen", "--n", "40", "--seed", "2", "--min-nodes", "10", "--max-nodes", "12",
                 "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "cfg.yaml"
    path.write_text("model:\n  d_model: 16\n  n_layers: 1\n  n_heads: 4\ntrain:\n  batch_size: 8\n")
    return str(path)


@pytest.fixture(scope="module")
def trained(toy_dir, small_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(toy_dir / "toy.csv"), *FAST, small_config, "--out", str(out)]) == 0
    return out


def test_toygen_outputs_and_manifest(toy_dir):
    manifest = json.loads((toy_dir / "manifest.json").read_text())
    assert manifest["command"] == "toygen" and "threshold" in manifest["extra"]
    rows = list(csv.DictReader(open(toy_dir / "toy.csv")))
    assert len(rows) == 40
    frac = np.mean([float(r["label"]) for r in rows])
    assert 0.45 <= frac <= 0.55
    mols, labels, _ = load_inputs(toy_dir / "toy.csv")
    t = manifest["extra"]["threshold"]
    for mol, y in zip(mols, labels):
        assert y == float(marker_distance(mol) < t)


def test_toygen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["toygen", "--n", "100", "--seed", "5", "--out", str(tmp_path / name)]) == 0
    for f in ("toy.sdf", "toy.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_toy_label_definition():
    toy = toy_generate(40, threshold=None, seed=0, min_nodes=10, max_nodes=12)
    np.testing.assert_array_equal(toy.labels, (toy.distances < toy.threshold).astype(float))
    close = toy.distances <= 3.0
    wide = (toy.distances < 20.0).astype(float)
    assert np.all(wide[close] == 1.0)


def test_train_outputs(trained):
    for f in ("model.matw", "history.jsonl", "learning_curve.tsv", "learning_curve.png",
              "metrics.json", "manifest.json"):
        assert (trained / f).exists()
    header = (trained / "learning_curve.tsv").read_text().splitlines()[0].split("\t")
    assert header == ["epoch", "lr", "train_loss", "val_loss", "val_metric"]
    assert json.loads((trained / "metrics.json").read_text())["task"] == "binary"


def test_predict_matches_training_forward(trained, toy_dir, tmp_path):
    assert main(["predict", "--checkpoint", str(trained / "model.matw"), "--data", str(toy_dir / "toy.csv"),
                 "--out", str(tmp_path)]) == 0
    rows = list(csv.DictReader(open(tmp_path / "predictions.csv")))
    ck = Checkpoint.load(trained / "model.matw")
    mols, _, _ = load_inputs(toy_dir / "toy.csv")
    ref = mat_forward(make_batch([featurize_molecule(m) for m in mols[:5]]), ck.tensors(), ck.config).output.data
    np.testing.assert_allclose([float(r["logit"]) for r in rows[:5]], ref, rtol=1e-12)


def test_eval_writes_metrics(trained, toy_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(trained / "model.matw"), "--data", str(toy_dir / "toy.csv"),
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert lines[0] == "metric\tvalue" and lines[1].startswith("roc_auc\t")


def _checkpoint(tmp_path, **kw):
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4, **kw)
    path = tmp_path / "m.matw"
    Checkpoint.from_params(cfg, init_params(cfg, make_rng(0, "init")), meta={"distance_fallback": "topo"}).save(path)
    return path


def test_attn_dump_addends_recombine(tmp_path):
    ck = _checkpoint(tmp_path, lambda_a=0.0, lambda_d=0.6, lambda_g=0.4, kernel="softmax")
    (tmp_path / "in.smi").write_text("c1ccccc1\nCC(=O)O\n")
    out = tmp_path / "dump"
    assert main(["attn-dump", "--checkpoint", str(ck), "--data", str(tmp_path / "in.smi"),
                 "--out", str(out), "--patterns", "O=", "cD2"]) == 0
    weights = json.loads((out / "weights.json").read_text())
    for m in ("mol0000", "mol0001"):
        parts = {k: read_attention_file(out / m / f"{k}.attn")[1]
                 for k in ("composite", "softmax", "distance", "adjacency")}
        recombined = sum(weights[k] * parts[k] for k in ("softmax", "distance", "adjacency"))
        np.testing.assert_allclose(parts["composite"], recombined, atol=1e-6)
        assert np.all(weights["softmax"] * parts["softmax"] == 0)
    stats = (out / "head_stats.tsv").read_text().splitlines()
    assert len(stats) == 1 + 2 * 4 and (out / "head_stats.png").exists()
    assert (out / "mol0000" / "composite_L0H0.png").exists()
    top = (out / "top_attended.tsv").read_text().splitlines()
    assert len(top) == 1 + 2 * 4


def test_attn_dump_benzene_row_sums(tmp_path):
    la, ld, lg = 0.2, 0.5, 0.3
    ck = _checkpoint(tmp_path, lambda_a=la, lambda_d=ld, lambda_g=lg, kernel="softmax")
    (tmp_path / "b.smi").write_text("c1ccccc1\n")
    assert main(["attn-dump", "--checkpoint", str(ck), "--data", str(tmp_path / "b.smi"),
                 "--out", str(tmp_path / "d")]) == 0
    comp = read_attention_file(tmp_path / "d" / "mol0000" / "composite.attn")[1]
    degree = featurize_molecule(parse_smiles("c1ccccc1"), True, "topo").adjacency.sum(axis=1)[:6]
    np.testing.assert_allclose(comp[0, :, :6, :].sum(-1), np.broadcast_to(la + ld + lg * degree, (4, 6)), atol=1e-6)


def test_gradcheck_command(tmp_path):
    assert main(["gradcheck", "--samples", "40", "--kernel", "softmax", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["n_checked"] == 40


def test_sweep_modes(toy_dir, small_config, tmp_path):
    assert main(["sweep", "--data", str(toy_dir / "toy.csv"), "--mode", "lambda-d", "--budget", "2",
                 *FAST, small_config, "--out", str(tmp_path / "abl")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "abl" / "sweep_results.tsv"), delimiter="\t"))
    assert [float(r["lambda_d"]) for r in rows] == [0.0, 1.0]
    assert (tmp_path / "abl" / "sweep.png").exists()
    fixed = tmp_path / "fixed.yaml"
    fixed.write_text("d_model: 16\nn_layers: 1\nn_heads: 2\nepochs: 1\nbatch_size: 16\n")
    assert main(["sweep", "--data", str(toy_dir / "toy.csv"), "--budget", "2", "--workers", "2",
                 "--config", str(fixed), "--seed", "4", "--out", str(tmp_path / "rand")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "rand" / "sweep_results.tsv"), delimiter="\t"))
    assert sorted(int(r["trial"]) for r in rows) == [0, 1]
    for r in rows:
        cfg = json.loads(r["config"])
        assert cfg["model"]["d_model"] == 16 and cfg["train"]["epochs"] == 1
        assert abs(cfg["model"]["lambda_a"] + cfg["model"]["lambda_d"] + cfg["model"]["lambda_g"] - 1) < 1e-9


def test_pretrain_then_fine_tune(toy_dir, small_config, tmp_path):
    assert main(["pretrain", "--data", str(toy_dir / "toy.csv"), "--steps", "3", "--config", small_config,
                 "--out", str(tmp_path / "pre")]) == 0
    assert (tmp_path / "pre" / "pretrain_curve.png").exists()
    assert main(["train", "--data", str(toy_dir / "toy.csv"), *FAST, small_config,
                 "--pretrained", str(tmp_path / "pre" / "pretrained.matw"), "--out", str(tmp_path / "ft")]) == 0


@pytest.mark.parametrize("argv,code", [
    (["train", "--data", "missing.csv"], 4),
    (["train", "--data", "x.csv", "--kernel", "gauss"], 2),
    (["frobnicate"], 2),
])
def test_exit_codes(argv, code, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == code


def test_bad_inputs_exit_two(tmp_path, toy_dir):
    (tmp_path / "bad.csv").write_text("input,label\nC[C@H]O,1\n")
    assert main(["train", "--data", str(tmp_path / "bad.csv"), "--out", str(tmp_path)]) == 2
    (tmp_path / "cfg.yaml").write_text("not_a_field: 3\n")
    assert main(["train", "--data", str(toy_dir / "toy.csv"), "--config", str(tmp_path / "cfg.yaml"),
                 "--out", str(tmp_path)]) == 2


def test_numeric_failure_exit_three(tmp_path, toy_dir):
    cfg = MatConfig(d_model=16, n_layers=1, n_heads=4, task="binary")
    params = init_params(cfg, make_rng(0, "init"))
    params["embed.b"].data[:] = np.nan
    Checkpoint.from_params(cfg, params).save(tmp_path / "nan.matw")
    assert main(["predict", "--checkpoint", str(tmp_path / "nan.matw"), "--data", str(toy_dir / "toy.csv"),
                 "--out", str(tmp_path)]) == 3
