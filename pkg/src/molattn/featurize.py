"""Molecule -> model tensors: atom features, adjacency, distances, batches.

Feature layout per node (26 columns)::

    0-11   identity one-hot: B N C O F P S Cl Br I Dummy other
    12-17  heavy-neighbour count one-hot 0..5 (clamped)
    18-22  hydrogen count one-hot 0..4 (clamped)
    23     formal charge (signed integer)
    24     in ring
    25     aromatic

Batches are node-major: ``features[b, i, :]`` and row-major
``adjacency[b, i, j]`` / ``distance[b, i, j]``.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .chem.molecule import ELEMENTS, Molecule

N_FEATURES = 26
IDENTITY = ELEMENTS + ("Dummy", "Other")
IDENTITY_SLICE = slice(0, 12)
NEIGHBOR_SLICE = slice(12, 18)
HYDROGEN_SLICE = slice(18, 23)
CHARGE_INDEX = 23
RING_INDEX = 24
AROMATIC_INDEX = 25
ONE_HOT_BLOCKS = (IDENTITY_SLICE, NEIGHBOR_SLICE, HYDROGEN_SLICE)

DUMMY_DISTANCE = 1e6
TOPO_BOND_LENGTH = 1.5
N_BOND_FEATURES = 4


class DistanceFallback(str, Enum):
    """What to do when a molecule carries no 3D coordinates."""

    ERROR = "error"
    ZERO = "zero"    # zero distances; only legal with lambda_d == 0
    TOPO = "topo"    # 1.5 A times shortest-path hop count


class Kernel(str, Enum):
    SOFTMAX = "softmax"
    EXP = "exp"


@dataclass
class MolTensors:
    features: np.ndarray
    adjacency: np.ndarray
    distance: np.ndarray
    mask: np.ndarray
    n_real: int
    bond_features: np.ndarray
    has_dummy: bool = False
    distance_source: str = "coords"

    @property
    def n_nodes(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    features: np.ndarray        # [B, n, 26]
    adjacency: np.ndarray       # [B, n, n]
    distance: np.ndarray        # [B, n, n]
    mask: np.ndarray            # [B, n] bool, False on padding
    n_real: np.ndarray          # [B] real nodes (dummy included)
    dummy: np.ndarray           # [B, n] bool, True on the dummy node
    bond_features: np.ndarray   # [B, n, n, 4]
    node_masked: np.ndarray     # [B, n] bool, True where the mask token replaced the row
    distance_sources: tuple = ("coords",)

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.features.shape[1]


def atom_features(mol: Molecule) -> np.ndarray:
    """Table of per-atom features (no dummy node)."""
    n = len(mol.atoms)
    feats = np.zeros((n, N_FEATURES))
    degree = np.zeros(n, dtype=int)
    for bond in mol.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
    for i, atom in enumerate(mol.atoms):
        feats[i, IDENTITY.index(atom.element)] = 1.0
        feats[i, NEIGHBOR_SLICE.start + min(degree[i], 5)] = 1.0
        feats[i, HYDROGEN_SLICE.start + min(atom.total_h, 4)] = 1.0
        feats[i, CHARGE_INDEX] = atom.formal_charge
        feats[i, RING_INDEX] = float(atom.in_ring)
        feats[i, AROMATIC_INDEX] = float(atom.is_aromatic)
    return feats


def dummy_row() -> np.ndarray:
    row = np.zeros(N_FEATURES)
    row[IDENTITY.index("Dummy")] = 1.0
    row[NEIGHBOR_SLICE.start] = 1.0
    row[HYDROGEN_SLICE.start] = 1.0
    return row


def bond_feature_vector(bond) -> np.ndarray:
    """Order, aromatic, conjugated, in-ring."""
    return np.array([bond.order, bond.is_aromatic, bond.is_conjugated, bond.in_ring], dtype=float)


def hop_distances(mol: Molecule) -> np.ndarray:
    """All-pairs shortest path hop counts (inf between fragments)."""
    n = len(mol.atoms)
    nbrs = mol.neighbors()
    hops = np.full((n, n), np.inf)
    for s in range(n):
        hops[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in nbrs[u]:
                if hops[s, v] == np.inf:
                    hops[s, v] = hops[s, u] + 1
                    queue.append(v)
    return hops


def featurize_molecule(mol: Molecule, add_dummy: bool = True,
                       fallback: DistanceFallback | str = DistanceFallback.ERROR) -> MolTensors:
    """Featurize ``mol``; the dummy node, when added, is the last node."""
    n = len(mol.atoms)
    if n == 0:
        raise ValueError(f"molecule {mol.source_id!r} has no atoms")
    fallback = DistanceFallback(fallback)
    if mol.has_coordinates:
        pos = mol.positions()
        diff = pos[:, None, :] - pos[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1))
        source = "coords"
    elif fallback is DistanceFallback.ZERO:
        dist = np.zeros((n, n))
        source = "zero"
    elif fallback is DistanceFallback.TOPO:
        hops = hop_distances(mol)
        # disconnected fragments get the dummy distance
        dist = np.where(np.isinf(hops), DUMMY_DISTANCE, TOPO_BOND_LENGTH * hops)
        source = "topo"
    else:
        raise ValueError(f"molecule {mol.source_id!r} has no coordinates and no distance fallback")

    adj = np.zeros((n, n))
    bf = np.zeros((n, n, N_BOND_FEATURES))
    for bond in mol.bonds:
        adj[bond.a, bond.b] = adj[bond.b, bond.a] = 1.0
        bf[bond.a, bond.b] = bf[bond.b, bond.a] = bond_feature_vector(bond)
    feats = atom_features(mol)

    if add_dummy:
        feats = np.vstack([feats, dummy_row()])
        adj = np.pad(adj, ((0, 1), (0, 1)))
        dist = np.pad(dist, ((0, 1), (0, 1)), constant_values=DUMMY_DISTANCE)
        bf = np.pad(bf, ((0, 1), (0, 1), (0, 0)))
    m = feats.shape[0]
    return MolTensors(feats, adj, dist, np.ones(m, dtype=bool), m, bf,
                      has_dummy=add_dummy, distance_source=source)


def distance_kernel(D: np.ndarray, kind: Kernel | str, mask: np.ndarray) -> np.ndarray:
    """Transform distances into attention weights.

    ``exp``: exp(-d) entrywise.  ``softmax``: row softmax of -D over the
    unmasked columns.  Masked columns are zero in both cases; a row with
    no unmasked column comes back all zero.  ``D`` may carry leading
    batch axes, with ``mask`` shaped like ``D`` minus its last axis.
    """
    kind = Kernel(kind)
    col_mask = np.asarray(mask, dtype=bool)[..., None, :]
    if kind is Kernel.EXP:
        return np.where(col_mask, np.exp(-D), 0.0)
    logits = np.where(col_mask, -D, -np.inf)
    row_max = logits.max(axis=-1, keepdims=True)
    row_max = np.where(np.isfinite(row_max), row_max, 0.0)
    e = np.exp(logits - row_max)
    total = e.sum(axis=-1, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


def edge_feature_matrix(mol_or_bond_features, weights: np.ndarray, bias: float = 0.0) -> np.ndarray:
    """E[i, j] = relu(w . f_ij + b) where f_ij is zero for non-bonded pairs."""
    if isinstance(mol_or_bond_features, Molecule):
        n = len(mol_or_bond_features.atoms)
        bf = np.zeros((n, n, N_BOND_FEATURES))
        for bond in mol_or_bond_features.bonds:
            bf[bond.a, bond.b] = bf[bond.b, bond.a] = bond_feature_vector(bond)
    else:
        bf = np.asarray(mol_or_bond_features, dtype=float)
    return np.maximum(bf @ np.asarray(weights, dtype=float).reshape(-1) + bias, 0.0)


def make_batch(mols: Sequence[MolTensors], pad_to: Optional[int] = None) -> Batch:
    """Stack molecules with zero padding (distance padding = 1e6)."""
    if not mols:
        raise ValueError("cannot batch zero molecules")
    width = {m.features.shape[1] for m in mols}
    if len(width) != 1:
        raise ValueError(f"inconsistent feature widths {sorted(width)}")
    n_max = max(m.n_nodes for m in mols)
    if pad_to is not None:
        if pad_to < n_max:
            raise ValueError(f"pad_to={pad_to} is smaller than the largest molecule ({n_max})")
        n_max = pad_to
    B = len(mols)
    feats = np.zeros((B, n_max, width.pop()))
    adj = np.zeros((B, n_max, n_max))
    dist = np.full((B, n_max, n_max), DUMMY_DISTANCE)
    mask = np.zeros((B, n_max), dtype=bool)
    dummy = np.zeros((B, n_max), dtype=bool)
    bf = np.zeros((B, n_max, n_max, N_BOND_FEATURES))
    n_real = np.zeros(B, dtype=int)
    for b, m in enumerate(mols):
        k = m.n_nodes
        feats[b, :k] = m.features
        adj[b, :k, :k] = m.adjacency
        dist[b, :k, :k] = m.distance
        mask[b, :k] = m.mask
        bf[b, :k, :k] = m.bond_features
        n_real[b] = m.n_real
        if m.has_dummy:
            dummy[b, k - 1] = True
    return Batch(feats, adj, dist, mask, n_real, dummy, bf,
                 np.zeros((B, n_max), dtype=bool),
                 tuple(sorted({m.distance_source for m in mols})))
