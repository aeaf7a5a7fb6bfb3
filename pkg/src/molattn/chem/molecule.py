"""Molecule data model plus graph perception (rings, conjugation, hydrogens)."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

ELEMENTS = ("B", "N", "C", "O", "F", "P", "S", "Cl", "Br", "I")
OTHER = "Other"

# Default valences used to fill implicit hydrogens.
DEFAULT_VALENCE = {"B": 3, "C": 4, "N": 3, "O": 2, "P": 3, "S": 2,
                   "F": 1, "Cl": 1, "Br": 1, "I": 1}

BOND_ORDERS = (1.0, 1.5, 2.0, 3.0)


class ParseError(ValueError):
    """Raised on malformed chemical input.

    The message always names where parsing failed (record/line for
    SDF, byte offset for SMILES).
    """


def element_category(symbol: str) -> str:
    """Map a raw element symbol onto the featurized identity set."""
    return symbol if symbol in ELEMENTS else OTHER


@dataclass(frozen=True)
class Atom:
    element: str
    formal_charge: int = 0
    explicit_h_count: Optional[int] = None
    is_aromatic: bool = False
    position: Optional[tuple] = None
    symbol: str = ""
    implicit_h_count: int = 0
    in_ring: bool = False

    def __post_init__(self):
        if not self.symbol:
            object.__setattr__(self, "symbol", self.element)
        if self.element not in ELEMENTS and self.element != OTHER:
            object.__setattr__(self, "element", OTHER)

    @property
    def total_h(self) -> int:
        return (self.explicit_h_count or 0) + self.implicit_h_count


@dataclass(frozen=True)
class Bond:
    a: int
    b: int
    order: float = 1.0
    is_aromatic: bool = False
    in_ring: bool = False
    is_conjugated: bool = False

    def __post_init__(self):
        if self.a == self.b:
            raise ValueError(f"self-bond on atom {self.a}")
        if self.order not in BOND_ORDERS:
            raise ValueError(f"unsupported bond order {self.order}")
        if (self.order == 1.5) != self.is_aromatic:
            raise ValueError("bond order 1.5 must coincide with aromaticity")

    @property
    def key(self) -> tuple:
        return (min(self.a, self.b), max(self.a, self.b))


@dataclass(frozen=True)
class Molecule:
    atoms: tuple
    bonds: tuple
    source_id: str = ""
    properties: dict = field(default_factory=dict, compare=False)

    def __len__(self):
        return len(self.atoms)

    @property
    def has_coordinates(self) -> bool:
        return bool(self.atoms) and self.atoms[0].position is not None

    def positions(self) -> np.ndarray:
        if not self.has_coordinates:
            raise ValueError(f"molecule {self.source_id!r} has no coordinates")
        return np.array([a.position for a in self.atoms], dtype=float)

    def neighbors(self) -> list:
        nbrs = [[] for _ in self.atoms]
        for bond in self.bonds:
            nbrs[bond.a].append(bond.b)
            nbrs[bond.b].append(bond.a)
        return nbrs

    def heavy_degree(self, i: int) -> int:
        return sum(1 for bond in self.bonds if i in (bond.a, bond.b))

    def bond_between(self, i: int, j: int) -> Optional[Bond]:
        key = (min(i, j), max(i, j))
        for bond in self.bonds:
            if bond.key == key:
                return bond
        return None

    def permute(self, perm: Sequence[int]) -> "Molecule":
        """Relabel atoms so that new atom ``k`` is old atom ``perm[k]``."""
        inverse = np.empty(len(perm), dtype=int)
        inverse[np.asarray(perm)] = np.arange(len(perm))
        atoms = tuple(self.atoms[p] for p in perm)
        bonds = tuple(replace(b, a=int(inverse[b.a]), b=int(inverse[b.b]))
                      for b in self.bonds)
        return Molecule(atoms, bonds, self.source_id, dict(self.properties))


def ring_bonds(n_atoms: int, edges: Sequence[tuple]) -> set:
    """Return the set of edge keys lying on a cycle (i.e. non-bridges).

    Iterative Tarjan bridge finding; an edge is a ring bond iff it is
    not a bridge of the undirected graph.
    """
    adj = [[] for _ in range(n_atoms)]
    for idx, (a, b) in enumerate(edges):
        adj[a].append((b, idx))
        adj[b].append((a, idx))
    disc = [-1] * n_atoms
    low = [0] * n_atoms
    bridges = set()
    timer = 0
    for root in range(n_atoms):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            node, parent_edge, it = stack[-1]
            advanced = False
            for nxt, eidx in it:
                if eidx == parent_edge:
                    continue
                if disc[nxt] == -1:
                    disc[nxt] = low[nxt] = timer
                    timer += 1
                    stack.append((nxt, eidx, iter(adj[nxt])))
                    advanced = True
                    break
                low[node] = min(low[node], disc[nxt])
            if advanced:
                continue
            stack.pop()
            if stack:
                parent = stack[-1][0]
                low[parent] = min(low[parent], low[node])
                if low[node] > disc[parent]:
                    bridges.add(parent_edge)
    return {tuple(sorted(edges[i])) for i in range(len(edges)) if i not in bridges}


def implicit_hydrogens(element: str, bond_order_sum: float, charge: int,
                       explicit_h: int = 0) -> int:
    """Hydrogens needed to reach the default valence.

    Charge shifts the valence isoelectronically: for N/O/P/S/halogens a
    positive charge raises it (NH4+) and a negative one lowers it (O-);
    for B and C any charge lowers it (carbocation, carbanion).
    """
    valence = DEFAULT_VALENCE.get(element)
    if valence is None:
        return 0
    if element in ("B", "C"):
        valence -= abs(charge)
    else:
        valence += charge
    # aromatic bond sums like 4.5 round down so fused carbons get no H
    return max(0, valence - int(np.floor(bond_order_sum + 1e-9)) - explicit_h)


def perceive(atoms: Sequence[Atom], bonds: Sequence[Bond], source_id: str = "",
             fill_hydrogens: Sequence[bool] | None = None,
             properties: dict | None = None) -> Molecule:
    """Build a Molecule with ring, conjugation and implicit-H fields recomputed.

    ``fill_hydrogens[i]`` says whether atom ``i`` gets valence-derived
    implicit hydrogens; bracket SMILES atoms carry their own count.
    """
    n = len(atoms)
    seen = set()
    for bond in bonds:
        if not (0 <= bond.a < n and 0 <= bond.b < n):
            raise ParseError(f"bond {bond.a}-{bond.b} references a missing atom")
        if bond.key in seen:
            raise ParseError(f"duplicate bond {bond.a}-{bond.b}")
        seen.add(bond.key)
    positions = [a.position is not None for a in atoms]
    if any(positions) and not all(positions):
        raise ParseError("coordinates must be given for all atoms or none")

    ring = ring_bonds(n, [b.key for b in bonds])
    ring_atoms = {i for key in ring for i in key}

    unsaturated = [[] for _ in range(n)]
    for idx, bond in enumerate(bonds):
        if bond.order in (2.0, 3.0):
            unsaturated[bond.a].append(idx)
            unsaturated[bond.b].append(idx)

    new_bonds = []
    for idx, bond in enumerate(bonds):
        conj = bond.is_aromatic
        if not conj and bond.order in (1.0, 2.0):
            conj = any(other != idx for end in (bond.a, bond.b) for other in unsaturated[end])
        new_bonds.append(replace(bond, in_ring=bond.key in ring, is_conjugated=conj))

    order_sum = [0.0] * n
    for bond in bonds:
        order_sum[bond.a] += bond.order
        order_sum[bond.b] += bond.order
    new_atoms = []
    for i, atom in enumerate(atoms):
        fill = True if fill_hydrogens is None else fill_hydrogens[i]
        implicit = 0
        if fill:
            implicit = implicit_hydrogens(atom.element, order_sum[i], atom.formal_charge,
                                          atom.explicit_h_count or 0)
        new_atoms.append(replace(atom, implicit_h_count=implicit, in_ring=i in ring_atoms))
    return Molecule(tuple(new_atoms), tuple(new_bonds), source_id, dict(properties or {}))
