"""Command-line entry point: ``molattn <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Tabular outputs are tab- or comma-separated text; figures are PNG files
rendered next to them.

Exit codes: 0 success, 1 a check did not pass (gradcheck), 2 parse or
configuration error, 3 numeric failure (NaN/inf), 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from filelock import FileLock

from . import __version__
from . import tensor as T
from .analyze import HeadStats, attention_stats, column_scores, evaluate_metrics
from .chem import PatternId, parse_sdf, parse_smiles, write_sdf
from .chem.molecule import ParseError
from .featurize import featurize_molecule, make_batch
from .model import (Checkpoint, MatConfig, NumericError, init_params, mat_forward,
                    write_attention_file)
from .tensor import grad_check, make_rng
from .toy import BalanceError, synthetic_corpus, toy_generate
from .train import Dataset, TrainConfig, evaluate, featurize_all, predict_tensors, pretrain, \
    random_split, train_loop

log = logging.getLogger("molattn")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

# random-search ranges for the sweep command
SEARCH_SPACE = {
    "batch_size": (8, 16, 32, 64, 128),
    "learning_rate": (0.01, 0.005, 0.001, 0.0005, 0.0001),
    "epochs": (30, 100),
    "d_model": (32, 64, 128, 256, 512, 1024),
    "n_layers": (1, 2, 4, 6, 8),
    "n_heads": (1, 2, 4, 8, 16),
    "n_pff": (1,),
    "lambda_a": tuple(round(0.1 * i, 1) for i in range(11)),
    "lambda_d": tuple(round(0.1 * i, 1) for i in range(11)),
    "kernel": ("softmax", "exp"),
    "dropout": (0.0, 0.1, 0.2),
    "weight_decay": (0.0, 1e-5, 1e-4, 1e-3, 1e-2),
    "warmup_factor": (0.0, 0.1, 0.2, 0.3, 0.4, 0.5),
}


class ConfigError(ValueError):
    """Bad command-line or config-file input."""


# ---------------------------------------------------------------- manifest

def build_id() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"molattn-{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"molattn-{__version__}"


@dataclass
class RunManifest:
    command: str
    argv: list
    seed: int
    config: dict
    inputs: list
    outputs: list = field(default_factory=list)
    build_id: str = field(default_factory=build_id)
    started: float = field(default_factory=time.time)
    finished: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        self.finished = time.time()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))
        return path


# ---------------------------------------------------------------- configuration

_MODEL_KEYS = {f.name for f in fields(MatConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)}


def read_config_file(path) -> dict:
    """Flat mapping of field names from a YAML or JSON file.

    Keys may sit at the top level or under ``model:`` / ``train:``.
    """
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    flat = {}
    for key, value in raw.items():
        if key in ("model", "train") and isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    unknown = set(flat) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
    return flat


def resolve_configs(args) -> tuple:
    """(MatConfig, TrainConfig, explicitly-set keys) from defaults, file, then flags."""
    values = read_config_file(args.config) if args.config else {}
    flags = {"lambda_a": args.lambda_a, "lambda_d": args.lambda_d, "lambda_g": args.lambda_g,
             "kernel": args.kernel, "distance_fallback": args.distance_fallback, "seed": args.seed}
    for name in ("epochs", "learning_rate", "batch_size"):
        flags[name] = getattr(args, name, None)
    values.update({k: v for k, v in flags.items() if v is not None})
    try:
        mcfg = MatConfig.from_dict({k: v for k, v in values.items() if k in _MODEL_KEYS})
        tcfg = TrainConfig.from_dict({k: v for k, v in values.items() if k in _TRAIN_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return mcfg, tcfg, set(values)


# ---------------------------------------------------------------- data loading

def _sdf_cache():
    cache = {}

    def get(path: Path, label_tag):
        key = (path.resolve(), label_tag)
        if key not in cache:
            cache[key] = parse_sdf(path.read_text(), label_tag)
        return cache[key]
    return get


def load_inputs(path, label_tag: Optional[str] = None) -> tuple:
    """(molecules, labels or None, input strings) from a CSV, SDF or SMILES file.

    CSV files need an ``input`` column holding a SMILES string or
    ``file.sdf#k`` (k-th record, 0-based, path relative to the CSV) and
    may carry a ``label`` column.  SDF labels come from ``label_tag``.
    Plain text files hold one SMILES per line, optionally followed by a
    label.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".sdf", ".mol", ".sd"):
        mols = parse_sdf(path.read_text(), label_tag)
        labels = None
        if label_tag:
            try:
                labels = [float(m.properties[label_tag]) for m in mols]
            except (KeyError, ValueError):
                raise ConfigError(f"{path}: every record needs a numeric <{label_tag}> field") from None
        return mols, labels, [f"{path.name}#{i}" for i in range(len(mols))]
    if suffix == ".csv":
        get_sdf = _sdf_cache()
        mols, labels, inputs = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if not reader.fieldnames or "input" not in reader.fieldnames:
                raise ConfigError(f"{path}: CSV needs an 'input' column")
            has_label = "label" in reader.fieldnames
            for row_no, row in enumerate(reader, start=2):
                text = row["input"].strip()
                try:
                    if "#" in text and text.split("#", 1)[0].lower().endswith(".sdf"):
                        file_part, idx = text.split("#", 1)
                        mols.append(get_sdf(path.parent / file_part, None)[int(idx)])
                    else:
                        mols.append(parse_smiles(text, source_id=text))
                except (ParseError, IndexError, ValueError) as exc:
                    raise ParseError(f"{path}, line {row_no}: {exc}") from None
                inputs.append(text)
                if has_label:
                    try:
                        labels.append(float(row["label"]))
                    except ValueError:
                        raise ConfigError(f"{path}, line {row_no}: label {row['label']!r} is not a number") from None
        return mols, (labels if has_label else None), inputs
    mols, labels, inputs = [], [], []
    for line_no, line in enumerate(path.read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            mols.append(parse_smiles(parts[0], source_id=parts[0]))
        except ParseError as exc:
            raise ParseError(f"{path}, line {line_no}: {exc}") from None
        inputs.append(parts[0])
        if len(parts) > 1:
            labels.append(float(parts[1]))
    return mols, (labels if labels and len(labels) == len(mols) else None), inputs


def infer_task(labels, requested: str) -> str:
    if requested != "auto":
        return requested
    return "binary" if set(np.unique(labels)) <= {0.0, 1.0} else "regression"


def write_tsv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_jsonl(path: Path, records) -> Path:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


# ---------------------------------------------------------------- commands

def cmd_toygen(args, out: Path) -> int:
    toy = toy_generate(args.n, args.threshold, args.seed or 0, args.min_nodes, args.max_nodes)
    sdf = out / "toy.sdf"
    sdf.write_text(write_sdf(toy.molecules, [{"label": int(y), "marker_distance": f"{d:.6f}"}
                                             for y, d in zip(toy.labels, toy.distances)]))
    with open(out / "toy.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["input", "label", "marker_distance"])
        for i, (y, d) in enumerate(zip(toy.labels, toy.distances)):
            w.writerow([f"toy.sdf#{i}", int(y), f"{d:.6f}"])
    print(f"threshold {toy.threshold:.4f} A, positive fraction {toy.positive_fraction:.3f}")
    args._manifest.outputs += ["toy.sdf", "toy.csv"]
    args._manifest.extra.update(threshold=toy.threshold, positive_fraction=toy.positive_fraction)
    return EXIT_OK


def cmd_pretrain(args, out: Path) -> int:
    from .plotting import learning_curves
    mcfg, tcfg, _ = resolve_configs(args)
    mols, _, _ = load_inputs(args.data, args.label_tag)
    ck, hist = pretrain(mols, mcfg, tcfg, steps=args.steps, log_every=args.log_every)
    ck.save(out / "pretrained.matw")
    write_jsonl(out / "history.jsonl", hist)
    write_tsv(out / "pretrain_curve.tsv", ["step", "lr", "train_loss"],
              [(r["step"], _fmt(r["lr"]), _fmt(r["train_loss"])) for r in hist])
    steps = [r["step"] for r in hist]
    learning_curves({"masked-node BCE": (steps, [r["train_loss"] for r in hist])},
                    out / "pretrain_curve.png", ylabel="pretraining loss")
    args._manifest.config = {"model": ck.config.to_dict(), "train": tcfg.to_dict()}
    args._manifest.outputs += ["pretrained.matw", "history.jsonl", "pretrain_curve.tsv", "pretrain_curve.png"]
    print(f"pretrained {len(hist)} steps, final loss {hist[-1]['train_loss']:.4f}" if hist else "no steps run")
    return EXIT_OK


def _labelled(args, path) -> Dataset:
    mols, labels, _ = load_inputs(path, args.label_tag)
    if labels is None:
        raise ConfigError(f"{path}: labels are required for this command")
    return Dataset(mols, labels, infer_task(labels, args.task))


def _parse_fractions(text: str) -> tuple:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise ConfigError(f"--split expects three comma-separated numbers, got {text!r}") from None
    if len(parts) != 3:
        raise ConfigError(f"--split expects three numbers, got {text!r}")
    return parts


def cmd_train(args, out: Path) -> int:
    from .plotting import learning_curves
    mcfg, tcfg, _ = resolve_configs(args)
    ds = _labelled(args, args.data)
    mcfg = replace(mcfg, task=ds.task)
    train, val, test = random_split(ds, _parse_fractions(args.split), tcfg.seed)
    pretrained = Checkpoint.load(args.pretrained) if args.pretrained else None
    ck, hist = train_loop(train, val if len(val) else None, mcfg, tcfg, pretrained, args.log_every)
    ck.save(out / "model.matw")
    write_jsonl(out / "history.jsonl", hist)
    epochs = [r for r in hist if r["kind"] == "epoch"]
    write_tsv(out / "learning_curve.tsv", ["epoch", "lr", "train_loss", "val_loss", "val_metric"],
              [(r["epoch"], _fmt(r["lr"]), _fmt(r["train_loss"]), _fmt(r["val_loss"]),
                _fmt(r["val_metric"])) for r in epochs])
    curves = {"train": ([r["epoch"] for r in epochs], [r["train_loss"] for r in epochs])}
    if epochs and epochs[0]["val_loss"] is not None:
        curves["validation"] = ([r["epoch"] for r in epochs], [r["val_loss"] for r in epochs])
    if epochs:
        learning_curves(curves, out / "learning_curve.png", ylabel="loss")
    metrics = {"best_epoch": ck.meta.get("epoch"), "task": ds.task}
    params = ck.tensors()
    for name, fold in (("train", train), ("val", val), ("test", test)):
        if len(fold):
            try:
                metrics[name] = evaluate(fold, featurize_all(fold.molecules, tcfg), params, ck.config)
            except ValueError as exc:
                metrics[name] = {"error": str(exc)}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True))
    args._manifest.config = {"model": ck.config.to_dict(), "train": tcfg.to_dict()}
    args._manifest.outputs += ["model.matw", "history.jsonl", "learning_curve.tsv", "metrics.json"]
    if epochs:
        args._manifest.outputs.append("learning_curve.png")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _load_checkpoint_and_inputs(args):
    ck = Checkpoint.load(args.checkpoint)
    mols, labels, inputs = load_inputs(args.data, args.label_tag)
    tcfg = TrainConfig(add_dummy=ck.meta.get("add_dummy", True),
                       distance_fallback=args.distance_fallback or ck.meta.get("distance_fallback", "error"))
    return ck, mols, labels, inputs, tcfg


def cmd_predict(args, out: Path) -> int:
    ck, mols, _, inputs, tcfg = _load_checkpoint_and_inputs(args)
    raw = predict_tensors(featurize_all(mols, tcfg), ck.tensors(), ck.config)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if ck.config.task == "binary":
            w.writerow(["input", "logit", "probability"])
            prob = 1.0 / (1.0 + np.exp(-raw))
            w.writerows([(i, repr(float(z)), repr(float(p))) for i, z, p in zip(inputs, raw, prob)])
        else:
            std = ck.standardization or (0.0, 1.0)
            w.writerow(["input", "prediction"])
            w.writerows([(i, repr(float(v * std[1] + std[0]))) for i, v in zip(inputs, raw)])
    args._manifest.config = {"model": ck.config.to_dict()}
    args._manifest.outputs.append("predictions.csv")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    ck, mols, labels, _, tcfg = _load_checkpoint_and_inputs(args)
    if labels is None:
        raise ConfigError(f"{args.data}: eval needs labels")
    raw = predict_tensors(featurize_all(mols, tcfg), ck.tensors(), ck.config)
    metrics = evaluate_metrics(raw, labels, ck.config.task, ck.standardization)
    write_tsv(out / "metrics.tsv", ["metric", "value"], [(k, _fmt(v)) for k, v in metrics.items()])
    args._manifest.config = {"model": ck.config.to_dict()}
    args._manifest.outputs.append("metrics.tsv")
    print("\t".join(f"{k}={v:.6f}" for k, v in metrics.items()))
    return EXIT_OK


def cmd_gradcheck(args, out: Path) -> int:
    mcfg, tcfg, explicit = resolve_configs(args)
    if "d_model" not in explicit:
        mcfg = replace(mcfg, d_model=16)
    mcfg = replace(mcfg, dropout=0.0)
    seed = tcfg.seed
    params = init_params(mcfg, make_rng(seed, "init"))
    mols = synthetic_corpus(2, seed=seed)
    batch = make_batch([featurize_molecule(m, not args.no_dummy) for m in mols])
    target = make_rng(seed, "gradcheck").normal(size=len(mols))

    def loss():
        return T.mse_loss(mat_forward(batch, params, mcfg, "eval").output, target)
    report = grad_check(loss, params, h=args.step, tol=args.tol, n_samples=args.samples,
                        rng=make_rng(seed, "gradcheck"))
    result = {"passed": bool(report.passed), "max_rel_error": float(report.max_rel_error),
              "n_checked": report.n_checked, "tol": report.tol,
              "worst": f"{report.worst[0]}{list(report.worst[1])}" if report.worst else None,
              "failure": report.failure}
    (out / "gradcheck.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    args._manifest.config = {"model": mcfg.to_dict()}
    args._manifest.outputs.append("gradcheck.json")
    print(("PASS" if report.passed else "FAIL")
          + f" max relative error {report.max_rel_error:.3e} over {report.n_checked} coordinates")
    if report.failure and "non-finite" in report.failure:
        return EXIT_NUMERIC
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def _atom_labels(mol) -> list:
    return [f"{a.symbol}{i}" for i, a in enumerate(mol.atoms)]


def cmd_attn_dump(args, out: Path) -> int:
    from .plotting import attention_heatmap, head_stats_bars
    ck, mols, _, inputs, tcfg = _load_checkpoint_and_inputs(args)
    cfg = ck.config
    params = ck.tensors()
    lambdas = {"softmax": cfg.lambda_a, "distance": cfg.lambda_d, "adjacency": cfg.lambda_g, "composite": 1.0}
    composites, summary = [], []
    for m, (mol, text) in enumerate(zip(mols, inputs)):
        mt = featurize_molecule(mol, tcfg.add_dummy, tcfg.distance_fallback)
        res = mat_forward(make_batch([mt]), params, cfg, "eval", record=True)
        mdir = out / f"mol{m:04d}"
        mdir.mkdir(exist_ok=True)
        for kind in lambdas:
            stack = np.stack([rec[kind][0] for rec in res.attention]) if res.attention else \
                np.zeros((0, cfg.n_heads, mt.n_nodes, mt.n_nodes))
            write_attention_file(mdir / f"{kind}.attn", stack, kind)
            if kind == "composite":
                composites.append(stack)
        comp = composites[-1]
        labels = _atom_labels(mol)
        scores = column_scores(comp, len(mol))                      # [L, H, n_atoms]
        for layer in range(comp.shape[0]):
            for head in range(comp.shape[1]):
                top = np.argsort(-scores[layer, head], kind="stable")[: args.top_k]
                summary.append((m, text, layer, head,
                                ";".join(f"{labels[j]}:{scores[layer, head, j]:.4f}" for j in top)))
        if m < args.heatmaps and comp.shape[0]:
            names = labels + (["dummy"] if mt.has_dummy else [])
            attention_heatmap(comp[0, 0][: len(names), : len(names)], names,
                              mdir / "composite_L0H0.png", title=f"{text} layer 0 head 0")
    write_tsv(out / "top_attended.tsv", ["molecule", "input", "layer", "head", "top_atoms"], summary)
    (out / "weights.json").write_text(json.dumps(lambdas, sort_keys=True))
    args._manifest.outputs += ["top_attended.tsv", "weights.json", "mol*/{composite,softmax,distance,adjacency}.attn"]
    if args.patterns:
        rows, all_stats = [], []
        for pat in args.patterns:
            stats = attention_stats(composites, mols, PatternId(pat))
            all_stats += stats
            rows += [s.row() for s in stats]
        write_tsv(out / "head_stats.tsv", HeadStats.COLUMNS, [[_fmt(v) for v in r] for r in rows])
        head_stats_bars([s for s in all_stats if not s.empty_match], out / "head_stats.png")
        args._manifest.outputs += ["head_stats.tsv", "head_stats.png"]
    args._manifest.config = {"model": cfg.to_dict()}
    return EXIT_OK


def _sample_trial(rng, base_m: MatConfig, base_t: TrainConfig, fixed: set) -> tuple:
    m, t = base_m.to_dict(), base_t.to_dict()
    while True:
        draw = {k: v[int(rng.integers(len(v)))] for k, v in SEARCH_SPACE.items() if k not in fixed}
        m2, t2 = dict(m), dict(t)
        for k, v in draw.items():
            (m2 if k in _MODEL_KEYS else t2)[k] = v
        if "lambda_g" not in fixed:
            m2["lambda_g"] = round(1.0 - m2["lambda_a"] - m2["lambda_d"], 10)
        if m2["lambda_g"] < 0 or m2["d_model"] % m2["n_heads"]:
            continue
        return m2, t2


def _run_trial(payload: dict) -> dict:
    """One sweep trial; runs in a worker process."""
    mols, labels, _ = load_inputs(payload["data"], payload["label_tag"])
    ds = Dataset(mols, labels, payload["task"])
    train, val, test = random_split(ds, payload["split"], payload["split_seed"])
    mcfg = MatConfig.from_dict({**payload["model"], "task": ds.task})
    tcfg = TrainConfig.from_dict(payload["train"])
    row = {"trial": payload["trial"], "model": mcfg.to_dict(), "train": tcfg.to_dict(),
           "val_metric": None, "test_metric": None, "error": None}
    try:
        ck, _ = train_loop(train, val if len(val) else None, mcfg, tcfg)
        params = ck.tensors()
        row["best_epoch"] = ck.meta.get("epoch")
        row["val_metric"] = ck.meta.get("val_metric")
        if len(test):
            row["test_metric"] = evaluate(test, featurize_all(test.molecules, tcfg), params, ck.config)["metric"]
    except (NumericError, FloatingPointError) as exc:
        row["error"] = f"numeric: {exc}"
    results = Path(payload["results"])
    with FileLock(str(results) + ".lock"):
        new = not results.exists()
        with open(results, "a", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            if new:
                w.writerow(["trial", "lambda_a", "lambda_d", "lambda_g", "kernel", "val_metric",
                            "test_metric", "error", "config"])
            w.writerow([row["trial"], mcfg.lambda_a, mcfg.lambda_d, mcfg.lambda_g, mcfg.kernel,
                        _fmt(row["val_metric"]), _fmt(row["test_metric"]), row["error"] or "",
                        json.dumps({"model": row["model"], "train": row["train"]}, sort_keys=True)])
    return row


def cmd_sweep(args, out: Path) -> int:
    from .plotting import ablation_curve, learning_curves
    mcfg, tcfg, explicit = resolve_configs(args)
    mols, labels, _ = load_inputs(args.data, args.label_tag)
    if labels is None:
        raise ConfigError(f"{args.data}: sweep needs labels")
    task = infer_task(labels, args.task)
    split = _parse_fractions(args.split)
    rng = make_rng(tcfg.seed, "sweep")
    trials = []
    for i in range(args.budget):
        if args.mode == "lambda-d":
            ld = round(i / max(1, args.budget - 1), 10)
            rest = round((1.0 - ld) / 2, 10)
            m, t = replace(mcfg, lambda_a=rest, lambda_d=ld, lambda_g=rest).to_dict(), tcfg.to_dict()
        else:
            m, t = _sample_trial(rng, mcfg, tcfg, explicit)
        t["seed"] = tcfg.seed + i
        trials.append({"trial": i, "model": m, "train": t, "data": str(Path(args.data).resolve()),
                       "label_tag": args.label_tag, "task": task, "split": split,
                       "split_seed": tcfg.seed, "results": str(out / "sweep_results.tsv")})
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_run_trial, trials))
    else:
        rows = [_run_trial(p) for p in trials]
    rows.sort(key=lambda r: r["trial"])
    metric = "test_metric"
    if args.mode == "lambda-d":
        good = [r for r in rows if r[metric] is not None]
        if good:
            ablation_curve([r["model"]["lambda_d"] for r in good], [r[metric] for r in good],
                           out / "sweep.png", ylabel="test metric")
    else:
        sign = 1.0 if task == "binary" else -1.0
        best, curve = None, []
        for r in rows:
            v = r["val_metric"]
            if v is not None and (best is None or sign * v > sign * best):
                best = v
            curve.append(np.nan if best is None else best)
        learning_curves({"best validation metric": (list(range(1, len(rows) + 1)), curve)},
                        out / "sweep.png", ylabel="best validation metric")
    args._manifest.config = {"model": mcfg.to_dict(), "train": tcfg.to_dict(), "mode": args.mode}
    args._manifest.outputs += ["sweep_results.tsv", "sweep.png"]
    print(f"{len(rows)} trials written to {out / 'sweep_results.tsv'}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _add_model_flags(p):
    p.add_argument("--config", help="YAML or JSON file with MatConfig / TrainConfig fields")
    p.add_argument("--lambda-a", type=float, dest="lambda_a")
    p.add_argument("--lambda-d", type=float, dest="lambda_d")
    p.add_argument("--lambda-g", type=float, dest="lambda_g")
    p.add_argument("--kernel", choices=("softmax", "exp"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--batch-size", type=int, dest="batch_size")


def _add_data_flags(p, required=True):
    p.add_argument("--data", required=required, help="CSV (input,label), SDF or SMILES file")
    p.add_argument("--label-tag", help="SDF data field holding the label")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", default=".", help="output directory (created if missing)")
    common.add_argument("--distance-fallback", choices=("error", "zero", "topo"), dest="distance_fallback")
    common.add_argument("--budget", type=int, default=10, help="number of sweep trials")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="molattn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("toygen", parents=[common], help="generate the synthetic distance task")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--threshold", type=float, help="marker distance threshold in A (auto-balanced)")
    p.add_argument("--min-nodes", type=int, default=10)
    p.add_argument("--max-nodes", type=int, default=40)
    p.set_defaults(func=cmd_toygen)

    p = sub.add_parser("pretrain", parents=[common], help="masked-node pretraining")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--steps", type=int, help="optimizer steps (default: epochs over the data)")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", parents=[common], help="supervised training with validation selection")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--task", choices=("auto", "regression", "binary"), default="auto")
    p.add_argument("--split", default="0.8,0.1,0.1", help="train,val,test fractions")
    p.add_argument("--pretrained", help="checkpoint from `pretrain` to fine-tune")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("predict", cmd_predict, "predict with a checkpoint"),
                              ("eval", cmd_eval, "score a checkpoint on labelled data")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", required=True)
        _add_data_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    _add_model_flags(p)
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--no-dummy", action="store_true")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-dump", parents=[common], help="write attention matrices and head statistics")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.add_argument("--top-k", type=int, default=3, dest="top_k")
    p.add_argument("--heatmaps", type=int, default=3, help="molecules to render as heatmaps")
    p.add_argument("--patterns", nargs="*", choices=[pid.value for pid in PatternId])
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("sweep", parents=[common], help="random search or lambda_d ablation")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--task", choices=("auto", "regression", "binary"), default="auto")
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.add_argument("--mode", choices=("random", "lambda-d"), default="random")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "sweep" and args.budget != 10:
        log.warning("--budget only affects the sweep command")
    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = [v for v in (getattr(args, "data", None), getattr(args, "checkpoint", None),
                              getattr(args, "pretrained", None), args.__dict__.get("config")) if v]
        args._manifest = RunManifest(args.command, argv, args.seed if args.seed is not None else 0,
                                     {}, inputs)
        code = args.func(args, out)
        args._manifest.write(out)
        return code
    except (NumericError, FloatingPointError) as exc:
        print(f"molattn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"molattn: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ParseError, BalanceError, ValueError, KeyError) as exc:
        print(f"molattn: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
