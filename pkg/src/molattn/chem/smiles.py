"""Parser for a SMILES subset.

Supported grammar::

    smiles  := chain ('.' chain)*
    chain   := atom (bond? (atom | ring) | '(' bond? chain ')')*
    atom    := organic | aromatic | '[' symbol 'H' digit? charge? ']'
    organic := B C N O P S F Cl Br I
    aromatic:= b c n o p s
    bond    := '-' | '=' | '#' | ':'
    ring    := digit | '%' digit digit
    charge  := ('+' | '-') digit? | '++' | '--'

Stereo marks (``@ / \\``), isotopes, atom classes and wildcards are
rejected with a :class:`ParseError` carrying the byte offset.
"""

from __future__ import annotations

from .molecule import Atom, Bond, Molecule, ParseError, perceive, ring_bonds

_ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
_AROMATIC = ("b", "c", "n", "o", "p", "s")
_BOND_SYMBOLS = {"-": 1.0, "=": 2.0, "#": 3.0, ":": 1.5}
_BRACKET_AROMATIC = ("se", "as", "b", "c", "n", "o", "p", "s")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self.atoms = []
        self.fill_h = []
        self.bonds = {}
        self.implicit_aromatic = set()
        self.rings = {}

    def error(self, msg, offset=None):
        offset = self.pos if offset is None else offset
        return ParseError(f"SMILES {self.text!r}: {msg} at byte offset {offset}")

    def peek(self):
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def parse(self):
        if not self.text:
            raise self.error("empty string")
        prev = None
        pending_bond = None
        branch_stack = []
        while self.pos < len(self.text):
            ch = self.peek()
            start = self.pos
            if ch == "(":
                if prev is None:
                    raise self.error("branch before any atom")
                branch_stack.append(prev)
                self.pos += 1
            elif ch == ")":
                if not branch_stack:
                    raise self.error("unmatched ')'")
                if pending_bond is not None:
                    raise self.error("bond symbol before ')'")
                prev = branch_stack.pop()
                self.pos += 1
            elif ch in _BOND_SYMBOLS:
                if pending_bond is not None or prev is None:
                    raise self.error(f"unexpected bond {ch!r}")
                pending_bond = _BOND_SYMBOLS[ch]
                self.pos += 1
            elif ch == ".":
                if pending_bond is not None or prev is None or branch_stack:
                    raise self.error("unexpected '.'")
                prev = None
                self.pos += 1
            elif ch.isdigit() or ch == "%":
                if prev is None:
                    raise self.error("ring closure before any atom")
                self.ring_closure(prev, pending_bond, start)
                pending_bond = None
            else:
                idx = self.atom()
                if prev is not None:
                    self.add_bond(prev, idx, pending_bond, start)
                elif pending_bond is not None:
                    raise self.error("bond without a preceding atom", start)
                pending_bond = None
                prev = idx
        if pending_bond is not None:
            raise self.error("dangling bond at end of string")
        if branch_stack:
            raise self.error("unmatched '('")
        if self.rings:
            label, (_, _, offset) = next(iter(self.rings.items()))
            raise self.error(f"unclosed ring bond {label}", offset)

    def atom(self):
        ch = self.peek()
        if ch == "[":
            return self.bracket_atom()
        for sym in _ORGANIC:
            if self.text.startswith(sym, self.pos):
                self.pos += len(sym)
                return self.push(Atom(sym), fill=True)
        if ch in _AROMATIC:
            self.pos += 1
            return self.push(Atom(ch.upper(), is_aromatic=True), fill=True)
        raise self.error(f"unsupported token {ch!r}")

    def bracket_atom(self):
        start = self.pos
        close = self.text.find("]", start)
        if close < 0:
            raise self.error("unterminated bracket atom")
        body = self.text[start + 1:close]
        i = 0
        if body[:1].isdigit():
            raise self.error("isotopes are not supported", start + 1)
        aromatic = False
        for sym in _BRACKET_AROMATIC:
            if body.startswith(sym):
                symbol, aromatic = sym.capitalize(), True
                i = len(sym)
                break
        else:
            if body[:1].isupper():
                i = 2 if body[1:2].islower() else 1
                symbol = body[:i]
            else:
                raise self.error(f"bad bracket atom [{body}]", start + 1)
        h = 0
        charge = 0
        while i < len(body):
            c = body[i]
            if c == "H":
                i += 1
                digits = ""
                while i < len(body) and body[i].isdigit():
                    digits += body[i]
                    i += 1
                h = int(digits) if digits else 1
            elif c in "+-":
                sign = 1 if c == "+" else -1
                i += 1
                if i < len(body) and body[i].isdigit():
                    digits = ""
                    while i < len(body) and body[i].isdigit():
                        digits += body[i]
                        i += 1
                    charge = sign * int(digits)
                else:
                    mag = 1
                    while i < len(body) and body[i] == c:
                        mag += 1
                        i += 1
                    charge = sign * mag
            else:
                raise self.error(f"unsupported token {c!r} in bracket atom", start + 1 + i)
        self.pos = close + 1
        return self.push(Atom(symbol, formal_charge=charge, explicit_h_count=h,
                              is_aromatic=aromatic, symbol=symbol), fill=False)

    def push(self, atom, fill):
        self.atoms.append(atom)
        self.fill_h.append(fill)
        return len(self.atoms) - 1

    def add_bond(self, a, b, order, offset):
        key = (min(a, b), max(a, b))
        if a == b or key in self.bonds:
            raise self.error("duplicate or self bond", offset)
        if order is None:
            if self.atoms[a].is_aromatic and self.atoms[b].is_aromatic:
                order = 1.5
                self.implicit_aromatic.add(key)
            else:
                order = 1.0
        self.bonds[key] = order

    def ring_closure(self, atom_idx, bond, start):
        if self.peek() == "%":
            label = self.text[self.pos + 1:self.pos + 3]
            if len(label) != 2 or not label.isdigit():
                raise self.error("'%' must be followed by two digits")
            self.pos += 3
        else:
            label = self.peek()
            self.pos += 1
        if label in self.rings:
            other, other_bond, _ = self.rings.pop(label)
            if bond is not None and other_bond is not None and bond != other_bond:
                raise self.error(f"conflicting bond orders on ring {label}", start)
            self.add_bond(other, atom_idx, bond if bond is not None else other_bond, start)
        else:
            self.rings[label] = (atom_idx, bond, start)


def parse_smiles(text: str, source_id: str = "") -> Molecule:
    """Parse a SMILES string (supported subset) into a Molecule.

    Implicit aromatic bonds that turn out not to lie on a ring (e.g. the
    biphenyl link written without ``-``) are demoted to single bonds.
    """
    parser = _Parser(text.strip())
    parser.parse()
    keys = list(parser.bonds)
    ring = ring_bonds(len(parser.atoms), keys)
    bonds = []
    for key in keys:
        order = parser.bonds[key]
        if key in parser.implicit_aromatic and key not in ring:
            order = 1.0
        bonds.append(Bond(key[0], key[1], order, is_aromatic=order == 1.5))
    return perceive(parser.atoms, bonds, source_id or text.strip(), fill_hydrogens=parser.fill_h)
