"""The six fixed atom patterns used by the attention analysis."""

from __future__ import annotations

from enum import Enum

from .molecule import Molecule


class PatternId(str, Enum):
    AROMATIC_CH = "cD2"        # [c;D2]
    SULFUR = "S"               # [S,s]
    ACYCLIC_N = "NR0"          # [N;R0]
    CARBONYL_O = "O="          # O=*
    AROMATIC_BRANCH = "aD3"    # [a;D3]
    AROMATIC_N = "n"           # n

    @property
    def smarts(self) -> str:
        return _SMARTS[self]


_SMARTS = {
    PatternId.AROMATIC_CH: "[c;D2]",
    PatternId.SULFUR: "[S,s]",
    PatternId.ACYCLIC_N: "[N;R0]",
    PatternId.CARBONYL_O: "O=*",
    PatternId.AROMATIC_BRANCH: "[a;D3]",
    PatternId.AROMATIC_N: "n",
}


def match_pattern(mol: Molecule, pattern) -> set:
    """Indices of atoms selected by ``pattern`` (a PatternId or its CLI string).

    ``D`` counts heavy-atom neighbours, since hydrogens are implicit.
    """
    pattern = PatternId(pattern)
    degree = [0] * len(mol.atoms)
    double_bonded = [False] * len(mol.atoms)
    for bond in mol.bonds:
        degree[bond.a] += 1
        degree[bond.b] += 1
        if bond.order == 2.0:
            double_bonded[bond.a] = double_bonded[bond.b] = True
    hits = set()
    for i, atom in enumerate(mol.atoms):
        el, arom = atom.element, atom.is_aromatic
        if pattern is PatternId.AROMATIC_CH:
            ok = el == "C" and arom and degree[i] == 2
        elif pattern is PatternId.SULFUR:
            ok = el == "S"
        elif pattern is PatternId.ACYCLIC_N:
            ok = el == "N" and not arom and not atom.in_ring
        elif pattern is PatternId.CARBONYL_O:
            ok = el == "O" and not arom and double_bonded[i]
        elif pattern is PatternId.AROMATIC_BRANCH:
            ok = arom and degree[i] == 3
        else:
            ok = el == "N" and arom
        if ok:
            hits.add(i)
    return hits
