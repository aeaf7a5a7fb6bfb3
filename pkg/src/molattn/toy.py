"""Synthetic molecule generators.

``toy_generate`` builds the geometric distance task: random branched
3D walks with exactly one donor marker (Br) and one probe marker (I);
the label says whether the two markers sit closer than a threshold.
``synthetic_regression`` and ``synthetic_corpus`` supply small
coordinate-bearing sets for smoke-scale training and pretraining.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .chem.molecule import Atom, Bond, Molecule, perceive
from .tensor import make_rng

BOND_LENGTH = 1.5
MIN_SEPARATION = 1.0
DONOR, PROBE = "Br", "I"
# ordinary atoms never use the marker elements
_ORDINARY = ("C", "C", "C", "C", "N", "O", "S", "F", "Cl", "B", "P")


class BalanceError(RuntimeError):
    """Class balance could not be reached within the retry budget."""


def _random_unit(rng) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def random_geometric_graph(n: int, rng, extra_edge_prob: float = 0.5):
    """Branched self-avoiding walk: (positions [n, 3], edges).

    Each new node bonds to an earlier node (biased towards recent ones)
    and sits ``BOND_LENGTH`` away from it, at least ``MIN_SEPARATION``
    from every other node.  Extra ring-closing edges join unbonded pairs
    closer than 2.2 A.
    """
    pos = np.zeros((n, 3))
    edges = []
    degree = np.zeros(n, dtype=int)
    for k in range(1, n):
        for _ in range(200):
            lo = max(0, k - 4)
            parent = int(rng.integers(lo, k)) if rng.random() < 0.8 else int(rng.integers(0, k))
            if degree[parent] >= 4:
                continue
            cand = pos[parent] + BOND_LENGTH * _random_unit(rng)
            if np.min(np.linalg.norm(pos[:k] - cand, axis=1)) >= MIN_SEPARATION:
                break
        else:
            raise RuntimeError("could not place a node without clashes")
        pos[k] = cand
        edges.append((parent, k))
        degree[parent] += 1
        degree[k] += 1
    bonded = {tuple(sorted(e)) for e in edges}
    if rng.random() < extra_edge_prob:
        d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        close = [(i, j) for i in range(n) for j in range(i + 1, n)
                 if d[i, j] < 2.2 and (i, j) not in bonded and degree[i] < 4 and degree[j] < 4]
        if close:
            i, j = close[int(rng.integers(len(close)))]
            edges.append((i, j))
    return pos, edges


def _molecule(pos, edges, elements, name) -> Molecule:
    atoms = [Atom(el, position=tuple(float(c) for c in p)) for el, p in zip(elements, pos)]
    bonds = [Bond(a, b, 1.0) for a, b in edges]
    return perceive(atoms, bonds, name)


@dataclass
class ToySet:
    molecules: list
    labels: np.ndarray
    distances: np.ndarray
    threshold: float
    positive_fraction: float


def marker_distance(mol: Molecule) -> float:
    symbols = [a.symbol for a in mol.atoms]
    pos = mol.positions()
    return float(np.linalg.norm(pos[symbols.index(DONOR)] - pos[symbols.index(PROBE)]))


def toy_generate(n: int, threshold: Optional[float] = None, seed: int = 0,
                 min_nodes: int = 10, max_nodes: int = 40,
                 balance: tuple = (0.45, 0.55), retries: int = 5) -> ToySet:
    """Generate ``n`` labelled molecules; label 1 iff marker distance < threshold.

    If ``threshold`` is None, or leaves the positive fraction outside
    ``balance``, it is replaced by the midpoint between the two middle
    sorted distances.  Each retry draws a fresh set.
    """
    if n < 10:
        raise ValueError("toy_generate needs n >= 10")
    if threshold is not None and threshold <= 0:
        raise ValueError("threshold must be positive")
    for attempt in range(retries):
        rng = make_rng(seed + 7919 * attempt, "toy")
        mols, dists = [], []
        for i in range(n):
            size = int(rng.integers(min_nodes, max_nodes + 1))
            pos, edges = random_geometric_graph(size, rng)
            elements = [_ORDINARY[j] for j in rng.integers(len(_ORDINARY), size=size)]
            donor, probe = rng.choice(size, size=2, replace=False)
            elements[donor], elements[probe] = DONOR, PROBE
            mols.append(_molecule(pos, edges, elements, f"toy{i}"))
            dists.append(float(np.linalg.norm(pos[donor] - pos[probe])))
        dists = np.asarray(dists)
        t = threshold
        frac = None if t is None else float(np.mean(dists < t))
        if frac is None or not balance[0] <= frac <= balance[1]:
            s = np.sort(dists)
            t = float(0.5 * (s[(n - 1) // 2] + s[n // 2])) if n % 2 == 0 else float(
                0.5 * (s[n // 2] + s[n // 2 + 1]))
            frac = float(np.mean(dists < t))
        if balance[0] <= frac <= balance[1]:
            labels = (dists < t).astype(float)
            return ToySet(mols, labels, dists, t, frac)
    raise BalanceError(f"class balance {balance} unreachable after {retries} attempts")


# element preferences by heavy-atom degree
_BY_DEGREE = {
    1: (("O", "C", "N", "F", "Cl", "Br", "I", "S"), (0.42, 0.25, 0.1, 0.07, 0.08, 0.03, 0.02, 0.03)),
    2: (("C", "O", "N", "S"), (0.6, 0.15, 0.15, 0.1)),
    3: (("C", "N", "P", "B"), (0.72, 0.2, 0.05, 0.03)),
    4: (("C", "S", "P"), (0.9, 0.05, 0.05)),
}


def chemical_elements(n: int, edges, rng, hetero_repair: float = 0.8) -> list:
    """Valence-aware element labels for a graph.

    Elements follow each node's heavy-atom degree; a bond joining two
    heteroatoms turns one end into carbon with probability
    ``hetero_repair``.  Atom identity is therefore predictable from its
    surroundings, as in real molecules.
    """
    degree = np.zeros(n, dtype=int)
    for a, b in edges:
        degree[a] += 1
        degree[b] += 1
    elements = []
    for d in degree:
        names, probs = _BY_DEGREE[int(min(max(d, 1), 4))]
        elements.append(names[int(rng.choice(len(names), p=probs))])
    for a, b in edges:
        if elements[a] != "C" and elements[b] != "C" and rng.random() < hetero_repair:
            elements[b if rng.random() < 0.5 else a] = "C"
    return elements


def synthetic_corpus(n: int, seed: int = 0, min_nodes: int = 8, max_nodes: int = 24) -> list:
    """Unlabelled random geometric molecules with valence-aware elements."""
    rng = make_rng(seed, "corpus")
    mols = []
    for i in range(n):
        size = int(rng.integers(min_nodes, max_nodes + 1))
        pos, edges = random_geometric_graph(size, rng)
        mols.append(_molecule(pos, edges, chemical_elements(size, edges, rng), f"syn{i}"))
    return mols


def composition_target(mol: Molecule) -> float:
    """A smooth structure-dependent property used by the synthetic regression sets."""
    count = {el: 0 for el in ("C", "N", "O", "S")}
    for a in mol.atoms:
        if a.element in count:
            count[a.element] += 1
    halogens = sum(a.element in ("F", "Cl", "Br", "I") for a in mol.atoms)
    ring = sum(a.in_ring for a in mol.atoms)
    n = len(mol.atoms)
    return (count["C"] - 1.5 * count["O"] + 0.8 * count["N"] + 2.0 * halogens
            + 0.5 * ring - 0.3 * count["S"]) / np.sqrt(n)


def synthetic_regression(n: int, seed: int = 0, **kwargs) -> tuple:
    """(molecules, labels) with labels from :func:`composition_target`."""
    mols = synthetic_corpus(n, seed, **kwargs)
    return mols, np.array([composition_target(m) for m in mols])
