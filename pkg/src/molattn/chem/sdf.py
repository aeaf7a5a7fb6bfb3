"""Reading and writing V2000 molfile / SD streams."""

from __future__ import annotations

from typing import Iterable, Optional

from .molecule import Atom, Bond, Molecule, ParseError, perceive

RECORD_DELIMITER = "$$$$"

# V2000 atom-block charge codes
_CHARGE_CODES = {0: 0, 1: 3, 2: 2, 3: 1, 4: 0, 5: -1, 6: -2, 7: -3}
_BOND_TYPES = {1: 1.0, 2: 2.0, 3: 3.0, 4: 1.5}


def _split_records(text: str):
    """Yield (record_index, first_line_number, lines) per ``$$$$`` record."""
    lines = text.splitlines()
    record, start = [], 1
    index = 0
    for lineno, line in enumerate(lines, start=1):
        if line.strip() == RECORD_DELIMITER:
            if any(l.strip() for l in record):
                yield index, start, record
                index += 1
            record, start = [], lineno + 1
        else:
            record.append(line)
    if any(l.strip() for l in record):
        yield index, start, record


def _int_field(line: str, lo: int, hi: int) -> int:
    return int(line[lo:hi])


def _parse_record(index: int, first: int, lines: list, label_tag: Optional[str]) -> Molecule:
    def fail(offset, msg):
        return ParseError(f"SDF record {index}, line {first + offset}: {msg}")

    if len(lines) < 4:
        raise fail(len(lines), "record too short for header and counts line")
    counts = lines[3]
    try:
        n_atoms = _int_field(counts, 0, 3)
        n_bonds = _int_field(counts, 3, 6)
    except ValueError:
        raise fail(3, f"malformed counts line {counts!r}") from None
    if "V3000" in counts:
        raise fail(3, "V3000 records are not supported")

    atoms = []
    h_atoms = set()
    for k in range(n_atoms):
        off = 4 + k
        if off >= len(lines) or lines[off].startswith("M  "):
            raise fail(off, f"counts line declares {n_atoms} atoms, found {k}")
        line = lines[off]
        try:
            x, y, z = float(line[0:10]), float(line[10:20]), float(line[20:30])
            symbol = line[31:34].strip()
            charge_code = int(line[36:39]) if line[36:39].strip() else 0
        except ValueError:
            tokens = line.split()
            try:
                x, y, z = map(float, tokens[:3])
                symbol = tokens[3]
                charge_code = int(tokens[5]) if len(tokens) > 5 else 0
            except (ValueError, IndexError):
                raise fail(off, f"malformed atom line {line!r}") from None
        if not symbol:
            raise fail(off, "missing element symbol")
        if symbol in ("H", "D", "T"):
            h_atoms.add(k)
        atoms.append(dict(symbol=symbol, position=(x, y, z),
                          charge=_CHARGE_CODES.get(charge_code, 0)))

    bonds = []
    for k in range(n_bonds):
        off = 4 + n_atoms + k
        if off >= len(lines) or lines[off].startswith("M  "):
            raise fail(off, f"counts line declares {n_bonds} bonds, found {k}")
        line = lines[off]
        try:
            a, b, btype = _int_field(line, 0, 3), _int_field(line, 3, 6), _int_field(line, 6, 9)
        except ValueError:
            try:
                a, b, btype = map(int, line.split()[:3])
            except ValueError:
                raise fail(off, f"malformed bond line {line!r}") from None
        if not (1 <= a <= n_atoms and 1 <= b <= n_atoms) or a == b:
            raise fail(off, f"bond atom index out of range ({a}, {b})")
        if btype not in _BOND_TYPES:
            raise fail(off, f"unknown bond type {btype}")
        bonds.append((a - 1, b - 1, btype))

    tail = 4 + n_atoms + n_bonds
    chg_lines = False
    label = None
    off = tail
    while off < len(lines):
        line = lines[off]
        if line.startswith("M  END"):
            off += 1
            break
        if line.startswith("M  CHG"):
            tokens = line.split()
            try:
                count = int(tokens[2])
                pairs = tokens[3:3 + 2 * count]
                if not chg_lines:
                    # per V2000, any M  CHG line supersedes atom-block charges
                    for atom in atoms:
                        atom["charge"] = 0
                    chg_lines = True
                for j in range(count):
                    idx, val = int(pairs[2 * j]), int(pairs[2 * j + 1])
                    if not 1 <= idx <= n_atoms:
                        raise fail(off, f"M  CHG atom index {idx} out of range")
                    atoms[idx - 1]["charge"] = val
            except (ValueError, IndexError):
                raise fail(off, f"malformed M  CHG line {line!r}") from None
        off += 1
    while off < len(lines):
        line = lines[off]
        if line.startswith(">") and label_tag is not None and f"<{label_tag}>" in line:
            label = lines[off + 1].strip() if off + 1 < len(lines) else ""
            off += 1
        off += 1

    # fold explicit hydrogens into their heavy neighbours
    keep = [k for k in range(n_atoms) if k not in h_atoms]
    new_index = {old: new for new, old in enumerate(keep)}
    h_count = [0] * n_atoms
    aromatic = [False] * n_atoms
    heavy_bonds = []
    for a, b, btype in bonds:
        if a in h_atoms and b in h_atoms:
            continue
        if a in h_atoms or b in h_atoms:
            h_count[b if a in h_atoms else a] += 1
            continue
        order = _BOND_TYPES[btype]
        if order == 1.5:
            aromatic[a] = aromatic[b] = True
        heavy_bonds.append(Bond(new_index[a], new_index[b], order, is_aromatic=order == 1.5))
    atom_objs = [Atom(atoms[k]["symbol"], formal_charge=atoms[k]["charge"],
                      explicit_h_count=h_count[k], is_aromatic=aromatic[k],
                      position=atoms[k]["position"], symbol=atoms[k]["symbol"])
                 for k in keep]
    name = lines[0].strip() or f"record{index}"
    props = {} if label is None else {label_tag: label}
    try:
        return perceive(atom_objs, heavy_bonds, name, properties=props)
    except ParseError as exc:
        raise fail(0, str(exc)) from None


def parse_sdf(text: str, label_tag: Optional[str] = None) -> list:
    """Parse every ``$$$$``-separated V2000 record in ``text``.

    Data items after ``M  END`` are skipped, except ``label_tag`` whose
    first value line is stored in ``Molecule.properties``.
    """
    return [_parse_record(i, first, lines, label_tag)
            for i, first, lines in _split_records(text)]


def write_sdf(molecules: Iterable[Molecule], properties: Optional[Iterable[dict]] = None) -> str:
    """Serialize molecules as a V2000 SD stream (heavy atoms only)."""
    inverse_codes = {v: k for k, v in _CHARGE_CODES.items() if k != 4}
    out = []
    props_iter = iter(properties) if properties is not None else None
    for mol in molecules:
        props = next(props_iter) if props_iter is not None else {}
        out.append(mol.source_id or "")
        out.append("  molattn")
        out.append("")
        out.append(f"{len(mol.atoms):3d}{len(mol.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
        for atom in mol.atoms:
            x, y, z = atom.position if atom.position is not None else (0.0, 0.0, 0.0)
            code = inverse_codes.get(atom.formal_charge, 0)
            out.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {atom.symbol:<3}0{code:3d}  0  0  0  0  0  0  0  0  0  0")
        for bond in mol.bonds:
            btype = {1.0: 1, 2.0: 2, 3.0: 3, 1.5: 4}[bond.order]
            out.append(f"{bond.a + 1:3d}{bond.b + 1:3d}{btype:3d}  0")
        charged = [(i + 1, a.formal_charge) for i, a in enumerate(mol.atoms) if a.formal_charge]
        for start in range(0, len(charged), 8):
            chunk = charged[start:start + 8]
            out.append(f"M  CHG{len(chunk):3d}" + "".join(f" {i:3d} {c:3d}" for i, c in chunk))
        out.append("M  END")
        for key, value in props.items():
            out.append(f">  <{key}>")
            out.append(str(value))
            out.append("")
        out.append(RECORD_DELIMITER)
    return "\n".join(out) + "\n"
