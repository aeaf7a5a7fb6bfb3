"""Losses, optimizer, learning-rate schedule, masking pretraining and training loops."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .analyze import UndefinedMetricError, roc_auc, rmse
from .featurize import CHARGE_INDEX, N_FEATURES, Batch, featurize_molecule, make_batch
from .model import Checkpoint, MatConfig, NumericError, head_names, init_params, mat_forward
from .tensor import Tensor, make_rng

log = logging.getLogger(__name__)

FINE_TUNE_LR_GRID = (1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6)
MASK_FRACTION = 0.15


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 5e-4
    warmup_factor: float = 0.1
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    add_dummy: bool = True
    distance_fallback: str = "error"
    mask_fraction: float = MASK_FRACTION

    def __post_init__(self):
        if not 0.0 <= self.warmup_factor <= 0.5:
            raise ValueError("warmup_factor must lie in [0, 0.5]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def optimizer_factor(self) -> float:
        return 100.0 * self.learning_rate

    def warmup_steps(self, total_steps: int) -> int:
        return max(1, int(round(self.warmup_factor * total_steps)))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- schedule

def noam_lr(step: int, d_model: int, factor: float, warmup_steps: int,
            warmup_power: float = 1.5) -> float:
    """factor * d_model^-0.5 * min(step^-0.5, step * warmup^-power).

    The default ``warmup_power=1.5`` gives the usual linear warm-up that
    peaks at ``step == warmup_steps``.  ``warmup_power=0.5`` evaluates the
    formula with the exponent exactly as it is sometimes printed, under
    which the crossover happens at ``warmup_steps ** (1/3)`` instead.
    """
    if step < 1:
        raise ValueError(f"step must be a positive integer, got {step}")
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    return factor * d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -warmup_power)


# ---------------------------------------------------------------- losses

def compute_loss(pred: Tensor, target, task: str, weights=None) -> Tensor:
    """MSE for regression, mean BCE-from-logits for binary / node_pretrain."""
    target = np.asarray(target, dtype=np.float64)
    if not (np.all(np.isfinite(pred.data)) and np.all(np.isfinite(target))):
        raise NumericError("non-finite prediction or target passed to the loss")
    if task == "regression":
        return T.mse_loss(pred, target)
    if task in ("binary", "node_pretrain"):
        if np.any((target < 0) | (target > 1)):
            raise ValueError("binary targets must lie in [0, 1]")
        return T.bce_with_logits(pred, target, weights)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with decoupled weight decay (``p -= lr * wd * p`` each step)."""

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * update


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    molecules: list
    labels: np.ndarray
    task: str = "regression"
    standardization: Optional[tuple] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        if len(self.labels) != len(self.molecules):
            raise ValueError("molecules and labels differ in length")
        if not np.all(np.isfinite(self.labels)):
            raise ValueError("labels must be finite")
        if self.task == "binary" and not np.all(np.isin(self.labels, (0.0, 1.0))):
            raise ValueError("binary labels must be 0 or 1")

    def __len__(self):
        return len(self.molecules)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.molecules[i] for i in idx], self.labels[idx], self.task, self.standardization)

    def targets(self) -> np.ndarray:
        """Labels in model units (standardized for regression)."""
        if self.task == "regression" and self.standardization is not None:
            mean, std = self.standardization
            return (self.labels - mean) / std
        return self.labels

    def to_label_units(self, outputs: np.ndarray) -> np.ndarray:
        if self.task == "regression" and self.standardization is not None:
            mean, std = self.standardization
            return np.asarray(outputs) * std + mean
        return np.asarray(outputs)


def standardization_stats(labels) -> tuple:
    labels = np.asarray(labels, dtype=np.float64)
    std = float(labels.std())
    return float(labels.mean()), std if std > 0 else 1.0


def random_split(ds: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    """Seeded random partition into (train, val, test).

    Regression stats come from the train fold and are attached to all
    three folds.  A fold with a positive fraction that would receive no
    records is an error; zero fractions give empty folds.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n = len(ds)
    perm = make_rng(seed, "split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_val = min(n_val, n - n_train)
    cuts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    for name, frac, idx in zip(("train", "val", "test"), fractions, cuts):
        if frac > 0 and len(idx) == 0:
            raise ValueError(f"{name} fold would be empty ({n} records, fraction {frac})")
    stats = ds.standardization
    if ds.task == "regression":
        stats = standardization_stats(ds.labels[cuts[0]])
    return tuple(replace(ds.subset(idx), standardization=stats) for idx in cuts)


def featurize_all(molecules, tcfg: TrainConfig) -> list:
    return [featurize_molecule(m, tcfg.add_dummy, tcfg.distance_fallback) for m in molecules]


def iterate_batches(n: int, batch_size: int, rng: Optional[np.random.Generator] = None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_tensors(tensors: list, params: dict, cfg: MatConfig, batch_size: int = 64) -> np.ndarray:
    """Model outputs (standardized units / logits) in eval mode."""
    out = []
    for idx in iterate_batches(len(tensors), batch_size):
        batch = make_batch([tensors[i] for i in idx])
        out.append(mat_forward(batch, params, cfg, "eval").output.data)
    return np.concatenate(out) if out else np.zeros(0)


# ---------------------------------------------------------------- masking pretraining

def mask_nodes(batch: Batch, fraction: float, rng: np.random.Generator):
    """Replace ceil(fraction * n_atoms) node rows per molecule by the mask token.

    The mask token is an all-zero feature row with the extra input
    channel (``Batch.node_masked``) set.  The dummy node and padding are
    never picked.  Returns ``(masked_batch, positions, originals)``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"mask fraction must lie in (0, 1), got {fraction}")
    positions = np.zeros(batch.mask.shape, dtype=bool)
    candidates_all = batch.mask & ~batch.dummy
    for b in range(len(batch)):
        candidates = np.flatnonzero(candidates_all[b])
        if len(candidates) == 0:
            raise ValueError(f"molecule {b} in the batch has no maskable atom")
        k = math.ceil(round(fraction * len(candidates), 9))
        positions[b, rng.choice(candidates, size=k, replace=False)] = True
    feats = batch.features.copy()
    feats[positions] = 0.0
    masked = replace(batch, features=feats, node_masked=batch.node_masked | positions)
    return masked, positions, batch.features.copy()


def pretrain_targets(originals: np.ndarray) -> np.ndarray:
    """Feature rows as BCE targets; charge mapped by clamp(c, -1, 1) / 2 + 0.5."""
    targets = originals.copy()
    targets[..., CHARGE_INDEX] = np.clip(targets[..., CHARGE_INDEX], -1, 1) / 2 + 0.5
    return targets


def pretrain_step(masked_batch: Batch, positions: np.ndarray, originals: np.ndarray, params: dict,
                  cfg: MatConfig, mode: str = "train", rng=None) -> Tensor:
    """Masked-node BCE, averaged over masked nodes (and their 26 features)."""
    if cfg.task != "node_pretrain":
        raise ValueError("pretrain_step needs a node_pretrain config")
    if not positions.any():
        raise ValueError("batch has no masked nodes")
    logits = mat_forward(masked_batch, params, cfg, mode, rng).output
    weights = np.broadcast_to(positions[..., None], logits.shape)
    return compute_loss(logits, pretrain_targets(originals), "node_pretrain", weights)


def base_rate_loss(positions: np.ndarray, originals: np.ndarray) -> float:
    """BCE of the constant per-feature base-rate predictor on masked nodes."""
    targets = pretrain_targets(originals)[positions]
    p = np.clip(targets.mean(axis=0), 1e-12, 1 - 1e-12)
    per = -(targets * np.log(p) + (1 - targets) * np.log(1 - p))
    return float(per.mean())


def pretrain(molecules: Sequence, cfg: MatConfig, tcfg: TrainConfig, steps: Optional[int] = None,
             log_every: int = 0):
    """Masked-node pretraining; returns (Checkpoint, history).

    ``steps`` caps the number of optimizer steps (otherwise ``epochs``
    passes over the data).
    """
    if cfg.task != "node_pretrain":
        cfg = replace(cfg, task="node_pretrain")
    tensors = featurize_all(molecules, tcfg)
    params = init_params(cfg, make_rng(tcfg.seed, "init"))
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)
    per_epoch = math.ceil(len(tensors) / tcfg.batch_size)
    total = steps if steps is not None else tcfg.epochs * per_epoch
    warmup = tcfg.warmup_steps(total)
    shuffle_rng = make_rng(tcfg.seed, "shuffle")
    mask_rng = make_rng(tcfg.seed, "masking")
    drop_rng = make_rng(tcfg.seed, "dropout")
    history, step = [], 0
    while step < total:
        for idx in iterate_batches(len(tensors), tcfg.batch_size, shuffle_rng):
            step += 1
            batch = make_batch([tensors[i] for i in idx])
            masked, positions, originals = mask_nodes(batch, tcfg.mask_fraction, mask_rng)
            opt.zero_grad()
            loss = pretrain_step(masked, positions, originals, params, cfg, "train", drop_rng)
            if not np.isfinite(loss.item()):
                raise NumericError(f"NaN loss at pretraining step {step}")
            loss.backward()
            lr = noam_lr(step, cfg.d_model, tcfg.optimizer_factor, warmup)
            opt.step(lr)
            history.append({"kind": "step", "step": step, "lr": lr, "train_loss": loss.item()})
            if log_every and step % log_every == 0:
                log.info("pretrain step %d loss %.4f", step, loss.item())
            if step >= total:
                break
    return Checkpoint.from_params(cfg, params, meta={"kind": "pretrain", "steps": step,
                                                  "add_dummy": tcfg.add_dummy,
                                                  "distance_fallback": tcfg.distance_fallback}), history


# ---------------------------------------------------------------- supervised training

def _params_from(cfg: MatConfig, tcfg: TrainConfig, pretrained: Optional[Checkpoint]) -> dict:
    params = init_params(cfg, make_rng(tcfg.seed, "init"))
    if pretrained is None:
        return params
    skip = set(head_names("node_pretrain")) | set(head_names("regression"))
    for name, value in pretrained.params.items():
        if name in skip:
            continue
        if name not in params:
            raise ValueError(f"pretrained parameter {name!r} does not exist in the target model")
        if params[name].shape != value.shape:
            raise ValueError(f"shape mismatch for {name}: {value.shape} vs {params[name].shape}")
        params[name].data = np.array(value, dtype=np.float64)
    missing = [n for n in params if n not in pretrained.params and n not in skip]
    if missing:
        raise ValueError(f"pretrained checkpoint lacks parameters {missing[:5]}")
    return params


def evaluate(ds: Dataset, tensors: list, params: dict, cfg: MatConfig, batch_size: int = 64) -> dict:
    """Loss (model units) and metric (label units) for a fold."""
    outputs = predict_tensors(tensors, params, cfg, batch_size)
    loss = compute_loss(Tensor(outputs), ds.targets(), ds.task).item()
    result = {"loss": loss, "metric": None}
    if ds.task == "regression":
        result["metric"] = rmse(ds.to_label_units(outputs), ds.labels)
    else:
        try:
            result["metric"] = roc_auc(outputs, ds.labels)
        except UndefinedMetricError:
            pass
    return result


def _improves(task: str, key: tuple, best: Optional[tuple]) -> bool:
    """``key`` is ("metric" | "loss", value); a metric always outranks a loss."""
    if best is None:
        return True
    if key[0] != best[0]:
        return key[0] == "metric"
    if key[0] == "loss" or task == "regression":
        return key[1] < best[1]
    return key[1] > best[1]


def train_loop(train: Dataset, val: Optional[Dataset], cfg: MatConfig, tcfg: TrainConfig,
               pretrained: Optional[Checkpoint] = None, log_every: int = 0):
    """Train and keep the snapshot with the best validation metric.

    Returns ``(checkpoint, history)``.  ``history`` holds one ``step``
    record per optimizer step and one ``epoch`` record per epoch.  When no
    validation fold is given (or its metric is undefined) the validation
    loss, or failing that the train loss, drives the selection.
    """
    if len(train) == 0:
        raise ValueError("empty train fold")
    if cfg.task != train.task:
        cfg = replace(cfg, task=train.task)
    if train.task == "regression" and train.standardization is None:
        train = replace(train, standardization=standardization_stats(train.labels))
        if val is not None:
            val = replace(val, standardization=train.standardization)
    params = _params_from(cfg, tcfg, pretrained)
    opt = Adam(params, tcfg.beta1, tcfg.beta2, tcfg.adam_eps, tcfg.weight_decay)
    train_t = featurize_all(train.molecules, tcfg)
    val_t = featurize_all(val.molecules, tcfg) if val is not None and len(val) else None
    targets = train.targets()
    per_epoch = math.ceil(len(train) / tcfg.batch_size)
    total = max(1, tcfg.epochs * per_epoch)
    warmup = tcfg.warmup_steps(total)
    shuffle_rng = make_rng(tcfg.seed, "shuffle")
    drop_rng = make_rng(tcfg.seed, "dropout")

    history = []
    best_key, best = None, None
    step = 0
    for epoch in range(1, tcfg.epochs + 1):
        losses = []
        for idx in iterate_batches(len(train), tcfg.batch_size, shuffle_rng):
            step += 1
            batch = make_batch([train_t[i] for i in idx])
            opt.zero_grad()
            pred = mat_forward(batch, params, cfg, "train", drop_rng).output
            loss = compute_loss(pred, targets[idx], train.task)
            if not np.isfinite(loss.item()):
                raise NumericError(f"NaN loss at step {step}")
            loss.backward()
            lr = noam_lr(step, cfg.d_model, tcfg.optimizer_factor, warmup)
            opt.step(lr)
            losses.append(loss.item())
            history.append({"kind": "step", "step": step, "epoch": epoch, "lr": lr,
                            "train_loss": loss.item(), "val_metric": None})
        record = {"kind": "epoch", "step": step, "epoch": epoch, "lr": history[-1]["lr"],
                  "train_loss": float(np.mean(losses)), "val_loss": None, "val_metric": None}
        if val_t is not None:
            ev = evaluate(val, val_t, params, cfg)
            record["val_loss"], record["val_metric"] = ev["loss"], ev["metric"]
        history.append(record)
        if record["val_metric"] is not None:
            key = ("metric", record["val_metric"])
        elif record["val_loss"] is not None:
            key = ("loss", record["val_loss"])
        else:
            key = ("loss", record["train_loss"])
        if _improves(train.task, key, best_key):
            best_key = key
            best = Checkpoint.from_params(cfg, params, train.standardization,
                                          {"kind": "train", "epoch": epoch, "step": step,
                                           "add_dummy": tcfg.add_dummy,
                                           "distance_fallback": tcfg.distance_fallback,
                                           "val_loss": record["val_loss"],
                                           "val_metric": record["val_metric"]})
        if log_every and epoch % log_every == 0:
            log.info("epoch %d train %.4f val %s", epoch, record["train_loss"], record["val_metric"])
    if best is None:
        best = Checkpoint.from_params(cfg, params, train.standardization,
                                      {"kind": "train", "epoch": 0, "add_dummy": tcfg.add_dummy,
                                       "distance_fallback": tcfg.distance_fallback})
    return best, history


def select_best(history: list, task: str) -> Optional[int]:
    """Epoch number with the best validation metric in ``history``."""
    epochs = [r for r in history if r["kind"] == "epoch" and r.get("val_metric") is not None]
    if not epochs:
        return None
    pick = min if task == "regression" else max
    return pick(epochs, key=lambda r: r["val_metric"])["epoch"]
