"""Metrics and attention-head interpretability statistics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .chem.patterns import PatternId, match_pattern


class UndefinedMetricError(ValueError):
    """The metric is undefined for the given labels (e.g. AUC with one class)."""


def rmse(preds, labels) -> float:
    preds, labels = np.asarray(preds, float), np.asarray(labels, float)
    if preds.shape != labels.shape or preds.size == 0:
        raise ValueError("rmse needs equal, non-empty shapes")
    return float(np.sqrt(np.mean((preds - labels) ** 2)))


def midranks(x) -> np.ndarray:
    """1-based ranks with tied values sharing their average rank."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sorted_x[j + 1] == sorted_x[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney U statistic.

    AUC = (R_pos - n_pos (n_pos + 1) / 2) / (n_pos n_neg) with midranks,
    so a tied positive/negative pair counts one half.
    """
    scores = np.asarray(scores, float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape or scores.size == 0:
        raise ValueError("roc_auc needs equal, non-empty shapes")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC AUC is undefined when only one class is present")
    r = midranks(scores)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_metrics(preds, labels, task: str, standardization: Optional[tuple] = None) -> dict:
    """RMSE (label units) for regression, ROC AUC for binary tasks.

    With ``standardization=(mean, std)`` regression ``preds`` are taken to
    be in standardized units and mapped back before scoring.
    """
    preds = np.asarray(preds, float)
    if task == "regression":
        if standardization is not None:
            preds = preds * standardization[1] + standardization[0]
        return {"rmse": rmse(preds, labels)}
    if task == "binary":
        return {"roc_auc": roc_auc(preds, labels)}
    raise ValueError(f"unknown task {task!r}")


def kruskal_wallis(group_a, group_b) -> tuple:
    """Two-group Kruskal-Wallis H with tie correction; returns (H, p).

    p is the chi-square (df=1) upper tail.  When every value is
    identical H is 0 and p is 1.
    """
    a, b = np.asarray(group_a, float), np.asarray(group_b, float)
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be non-empty")
    pooled = np.concatenate([a, b])
    n = pooled.size
    r = midranks(pooled)
    _, counts = np.unique(pooled, return_counts=True)
    correction = 1.0 - (counts ** 3 - counts).sum() / (n ** 3 - n) if n > 1 else 0.0
    if correction <= 0:
        return 0.0, 1.0
    centre = (n + 1) / 2.0
    h = 0.0
    for ranks in (r[:a.size], r[a.size:]):
        h += ranks.size * (ranks.mean() - centre) ** 2
    h = 12.0 / (n * (n + 1)) * h / correction
    return float(h), float(stats.chi2.sf(h, 1))


@dataclass
class HeadStats:
    layer: int
    head: int
    pattern: str
    mu_plus: float
    sigma_plus: float
    mu_minus: float
    sigma_minus: float
    h_statistic: float
    p_value: float
    n_plus: int
    n_minus: int

    @property
    def empty_match(self) -> bool:
        return self.n_plus == 0

    COLUMNS = ("layer", "head", "pattern", "mu_plus", "sigma_plus", "mu_minus", "sigma_minus",
               "H", "p", "n_plus", "n_minus")

    def row(self) -> tuple:
        return (self.layer, self.head, self.pattern, self.mu_plus, self.sigma_plus, self.mu_minus,
                self.sigma_minus, self.h_statistic, self.p_value, self.n_plus, self.n_minus)


def column_scores(attention: np.ndarray, n_atoms: int) -> np.ndarray:
    """Per-atom score: mean of its column over the real-atom rows.

    ``attention`` is ``[..., n, n]``; only the leading ``n_atoms`` rows
    and columns (real atoms, no dummy, no padding) take part.
    """
    return np.asarray(attention)[..., :n_atoms, :n_atoms].mean(axis=-2)


def attention_stats(records: Sequence[np.ndarray], molecules: Sequence, pattern) -> list:
    """Matched-vs-other attention statistics for every (layer, head).

    ``records[m]`` is molecule ``m``'s ``[layers, heads, n, n]`` attention
    (composite) with real atoms first; trailing dummy/padding nodes are
    ignored.  Standard deviations are population (ddof=0).
    """
    pattern = PatternId(pattern)
    if len(records) != len(molecules):
        raise ValueError("records and molecules must align")
    if not records:
        raise ValueError("no attention records")
    L, H = np.asarray(records[0]).shape[:2]
    plus = [[[] for _ in range(H)] for _ in range(L)]
    minus = [[[] for _ in range(H)] for _ in range(L)]
    for rec, mol in zip(records, molecules):
        rec = np.asarray(rec)
        n_atoms = len(mol.atoms)
        if rec.shape[:2] != (L, H) or rec.shape[-1] < n_atoms:
            raise ValueError(f"attention record for {mol.source_id!r} has shape {rec.shape}")
        scores = column_scores(rec, n_atoms)           # [L, H, n_atoms]
        hit = np.zeros(n_atoms, dtype=bool)
        hit[list(match_pattern(mol, pattern))] = True
        for l in range(L):
            for h in range(H):
                plus[l][h].extend(scores[l, h, hit])
                minus[l][h].extend(scores[l, h, ~hit])
    out = []
    for l in range(L):
        for h in range(H):
            p, m = np.asarray(plus[l][h]), np.asarray(minus[l][h])
            if p.size and m.size:
                hstat, pval = kruskal_wallis(p, m)
            else:
                hstat, pval = float("nan"), float("nan")
            out.append(HeadStats(
                l, h, pattern.value,
                float(p.mean()) if p.size else float("nan"), float(p.std()) if p.size else float("nan"),
                float(m.mean()) if m.size else float("nan"), float(m.std()) if m.size else float("nan"),
                hstat, pval, int(p.size), int(m.size)))
    return out
