"""Built-in desk-scale meshes for the three signs of the singular Euler characteristic."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .geometry import ConicalMesh


def flat_torus(n: int) -> ConicalMesh:
    """``n x n`` grid on the unit square with opposite sides identified."""
    if n < 3:
        raise ConfigError("flat_torus needs n >= 3")
    idx = lambda i, j: (i % n) + n * (j % n)  # noqa: E731
    faces = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            faces.append((a, b, c))
            faces.append((a, c, d))
    h = 1.0 / n
    lengths = {}
    for a, b, c in faces:
        for p, q in ((a, b), (b, c), (c, a)):
            lengths[(p, q)] = h
    # the diagonals of each square
    for j in range(n):
        for i in range(n):
            lengths[(idx(i, j), idx(i + 1, j + 1))] = math.sqrt(2.0) * h
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    positions = np.column_stack([ii.ravel() * h, jj.ravel() * h, np.zeros(n * n)])
    return ConicalMesh(n * n, faces, lengths, (), positions=positions)


def pillowcase(n: int) -> ConicalMesh:
    """Two unit squares glued along their boundary.

    The four corners carry cone angle ``pi`` (order ``-1/2``); everything
    else is flat, so the singular Euler characteristic is zero.
    """
    if n < 2:
        raise ConfigError("pillowcase needs n >= 2")
    m = n + 1
    front = lambda i, j: i + m * j  # noqa: E731
    back_ids = {}
    nxt = m * m
    for j in range(1, n):
        for i in range(1, n):
            back_ids[(i, j)] = nxt
            nxt += 1

    def back(i, j):
        if 0 < i < n and 0 < j < n:
            return back_ids[(i, j)]
        return front(i, j)

    h = 1.0 / n
    faces, lengths = [], {}
    for sheet, vid in ((0, front), (1, back)):
        for j in range(n):
            for i in range(n):
                a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
                on_rim = lambda p, q: not (0 < p < n and 0 < q < n)  # noqa: E731
                if on_rim(i, j) and on_rim(i + 1, j + 1):
                    # a diagonal between two rim vertices would be shared by both sheets
                    tris = [(a, b, d), (b, c, d)]
                    lengths[(b, d)] = math.sqrt(2.0) * h
                else:
                    tris = [(a, b, c), (a, c, d)]
                    lengths[(a, c)] = math.sqrt(2.0) * h
                if sheet == 1:
                    tris = [(t[0], t[2], t[1]) for t in tris]
                faces.extend(tris)
                for p, q in ((a, b), (b, c), (c, d), (d, a)):
                    lengths[(p, q)] = h
    positions = np.zeros((nxt, 3))
    for j in range(m):
        for i in range(m):
            positions[front(i, j)] = (i * h, j * h, 0.0)
    for (i, j), v in back_ids.items():
        positions[v] = (i * h, j * h, 0.0)
    corners = [front(0, 0), front(n, 0), front(n, n), front(0, n)]
    return ConicalMesh(nxt, faces, lengths, [(c, -0.5) for c in corners], positions=positions)


_OCTAHEDRON_VERTICES = np.array(
    [[1, 0, 0], [0, 1, 0], [0, 0, 1], [-1, 0, 0], [0, -1, 0], [0, 0, -1]], dtype=float
)
_OCTAHEDRON_FACES = [
    (0, 1, 2), (1, 3, 2), (3, 4, 2), (4, 0, 2),
    (1, 0, 5), (3, 1, 5), (4, 3, 5), (0, 4, 5),
]


def _subdivide(positions: list, faces: list):
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a, b):
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            p = positions[a] + positions[b]
            positions.append(p / np.linalg.norm(p))
            cache[key] = len(positions) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out += [(a, ab, ca), (ab, b, bc), (ca, bc, c), (ab, bc, ca)]
    return positions, out


def cone_sphere(n: int, betas: Sequence[float]) -> ConicalMesh:
    """Octahedron refined ``n`` times onto the unit sphere, with cones marked.

    Cone ``k`` sits at octahedron vertex ``k`` (order +x, +y, +z, -x, -y,
    -z).  Edge lengths are chordal, so the metric is *raw*: the angle
    defects do not yet encode the cone orders and the mesh must be
    uniformized before it is used as a background.
    """
    if n < 0 or n > 6:
        raise ConfigError("cone_sphere needs 0 <= n <= 6")
    betas = [float(b) for b in betas]
    if len(betas) > 6:
        raise ConfigError("cone_sphere supports at most six cones")
    if any(not b > -1.0 for b in betas):
        raise ConfigError("cone orders must exceed -1")
    positions = [p.copy() for p in _OCTAHEDRON_VERTICES]
    faces = list(_OCTAHEDRON_FACES)
    for _ in range(n):
        positions, faces = _subdivide(positions, faces)
    return ConicalMesh.from_positions(
        np.array(positions), faces, [(k, b) for k, b in enumerate(betas)]
    )


GENERATORS = {"flat_torus", "pillowcase", "cone_sphere"}


def generate_mesh(name: str, params: dict) -> ConicalMesh:
    """Dispatch a generator by name; ``params`` holds ``n`` and optionally ``betas``."""
    if name not in GENERATORS:
        raise ConfigError(f"unknown generator {name!r}; choose from {sorted(GENERATORS)}")
    try:
        n = int(params["n"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"generator {name} needs an integer parameter n") from exc
    extra = set(params) - {"n", "betas"}
    if extra:
        raise ConfigError(f"unexpected generator parameters {sorted(extra)}")
    if name == "flat_torus":
        return flat_torus(n)
    if name == "pillowcase":
        return pillowcase(n)
    betas = params.get("betas", ())
    if isinstance(betas, str):
        betas = [float(b) for b in betas.replace(",", " ").split()]
    return cone_sphere(n, betas)
