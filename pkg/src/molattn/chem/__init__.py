from .molecule import ELEMENTS, Atom, Bond, Molecule, ParseError, perceive
from .patterns import PatternId, match_pattern
from .sdf import parse_sdf, write_sdf
from .smiles import parse_smiles

__all__ = [
    "ELEMENTS", "Atom", "Bond", "Molecule", "ParseError", "perceive",
    "PatternId", "match_pattern", "parse_sdf", "write_sdf", "parse_smiles",
]
