"""Plain-text mesh files and CSV field dumps.

Mesh format::

    conical-mesh 1
    V F C
    <V vertex records>   "x y z"  or  "abstract [x y z]"
    <F faces>            "i j k"
    <E edges>            "i j length"   (abstract files only, E = 3F/2)
    <C cones>            "vertex_index beta"

Lines starting with ``#`` and blank lines are ignored anywhere.  The
optional coordinates after ``abstract`` are chart coordinates that do not
determine lengths.  Reals are written with 17 significant digits.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import StructureError
from .geometry import ConicalMesh

MAGIC = "conical-mesh 1"


def fmt(x) -> str:
    return format(float(x), ".17g")


def _content_lines(text: str):
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if line and not line.startswith("#"):
            yield n, line


def parse_mesh(text: str) -> ConicalMesh:
    lines = list(_content_lines(text))
    if not lines or lines[0][1] != MAGIC:
        raise StructureError(f"mesh file must start with {MAGIC!r}")
    pos = 1

    def take(count, what):
        nonlocal pos
        if pos + count > len(lines):
            raise StructureError(f"mesh file truncated while reading {what}")
        out = lines[pos:pos + count]
        pos += count
        return out

    try:
        (n, header), = take(1, "counts")
        V, F, C = (int(t) for t in header.split())
        vertex_lines = take(V, "vertices")
        abstract = [ln.split()[0] == "abstract" for _, ln in vertex_lines]
        if any(abstract) and not all(abstract):
            raise StructureError("vertex records mix coordinates and 'abstract'")
        is_abstract = bool(abstract) and abstract[0]
        positions = []
        for n, ln in vertex_lines:
            toks = ln.split()[1:] if is_abstract else ln.split()
            if toks and len(toks) != 3:
                raise StructureError(f"line {n}: expected 3 coordinates")
            positions.append([float(t) for t in toks] if toks else None)
        faces = []
        for n, ln in take(F, "faces"):
            toks = ln.split()
            if len(toks) != 3:
                raise StructureError(f"line {n}: expected 3 vertex indices")
            faces.append([int(t) for t in toks])
        lengths = {}
        if is_abstract:
            if (3 * F) % 2:
                raise StructureError("a closed surface has an even number of faces")
            for n, ln in take(3 * F // 2, "edge lengths"):
                i, j, length = ln.split()
                lengths[(int(i), int(j))] = float(length)
        divisor = []
        for n, ln in take(C, "cones"):
            v, beta = ln.split()
            divisor.append((int(v), float(beta)))
    except ValueError as exc:
        raise StructureError(f"line {n}: {exc}") from exc
    if pos != len(lines):
        raise StructureError(f"unexpected trailing content at line {lines[pos][0]}")

    if any(p is None for p in positions):
        if not all(p is None for p in positions):
            raise StructureError("chart coordinates must be given for all vertices or none")
        positions = None
    else:
        positions = np.array(positions, dtype=float).reshape(V, 3)
    if not is_abstract:
        mesh = ConicalMesh.from_positions(positions, faces, divisor)
        if mesh.vertex_count != V:
            raise StructureError("vertex count mismatch")
        return mesh
    return ConicalMesh(V, faces, lengths, divisor, positions=positions)


def read_mesh(path) -> ConicalMesh:
    return parse_mesh(Path(path).read_text())


def format_mesh(mesh: ConicalMesh, comments: Iterable[str] = ()) -> str:
    out = [MAGIC]
    out += [f"# {c}" for c in comments]
    out.append(f"{mesh.vertex_count} {mesh.face_count} {len(mesh.divisor)}")
    if mesh.embedded:
        out += [" ".join(fmt(x) for x in p) for p in mesh.positions]
    elif mesh.positions is not None:
        out += ["abstract " + " ".join(fmt(x) for x in p) for p in mesh.positions]
    else:
        out += ["abstract"] * mesh.vertex_count
    out += [f"{a} {b} {c}" for a, b, c in mesh.faces.tolist()]
    if not mesh.embedded:
        out += [f"{i} {j} {fmt(length)}" for (i, j), length in zip(mesh.edges.tolist(), mesh.edge_lengths)]
    out += [f"{v} {fmt(b)}" for v, b in mesh.divisor]
    return "\n".join(out) + "\n"


def write_mesh(mesh: ConicalMesh, path, comments: Iterable[str] = ()) -> None:
    Path(path).write_text(format_mesh(mesh, comments))


def read_field(path, vertex_count: int | None = None) -> np.ndarray:
    """Read a ``vertex_index,value`` CSV (header optional, '#' comments allowed)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(line for line in fh if not line.lstrip().startswith("#")):
            if not row:
                continue
            try:
                rows.append((int(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise StructureError(f"bad field row {row!r} in {path}") from None
    if not rows:
        raise StructureError(f"no field values in {path}")
    n = vertex_count if vertex_count is not None else max(i for i, _ in rows) + 1
    out = np.full(n, np.nan)
    for i, val in rows:
        if not 0 <= i < n:
            raise StructureError(f"vertex index {i} out of range in {path}")
        out[i] = val
    if np.isnan(out).any():
        raise StructureError(f"{path} does not give a value for every vertex")
    return out


def write_field(path, values, header=("vertex_index", "value"), comments: Iterable[str] = ()):
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, v in enumerate(values):
            w.writerow([i, fmt(v)])


def write_table(path, columns: dict, comments: Iterable[str] = ()):
    """Write equally long columns as CSV with 17-digit reals."""
    names = list(columns)
    cols = [columns[k] for k in names]
    with open(path, "w", newline="") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([r if isinstance(r, (int, np.integer)) else fmt(r) for r in row])
