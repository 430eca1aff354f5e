"""Intrinsic triangulated surfaces carrying conical metrics.

A :class:`ConicalMesh` stores only combinatorics, one length per edge and a
divisor ``[(vertex, beta), ...]``.  A cone of order ``beta`` at a vertex is
realised as a persistent angle defect ``-2*pi*beta`` there, so the total
cone angle is ``2*pi*(1 + beta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GeometryError, StructureError

TWO_PI = 2.0 * math.pi

# |chi| below this is treated as the null case
CHI_ZERO_TOL = 1e-12


def _edge_key_array(pairs: np.ndarray) -> np.ndarray:
    return np.sort(pairs, axis=1)


class ConicalMesh:
    """Closed oriented triangulated surface with intrinsic edge lengths.

    Parameters
    ----------
    vertex_count : int
    faces : array_like, shape (F, 3)
        Consistently oriented vertex triples.
    edge_lengths : mapping or array_like
        Either ``{(i, j): length}`` (unordered keys) or an array aligned
        with :attr:`edges` as produced by :meth:`edge_index`.
    divisor : iterable of (int, float)
        Cone vertices and their orders ``beta > -1``.
    positions : array_like, shape (V, 3), optional
        Chart coordinates.  Used to evaluate analytic prescriptions and,
        when ``embedded`` is true, to derive the edge lengths.
    embedded : bool
        Lengths are chordal distances between ``positions``.
    """

    def __init__(
        self,
        vertex_count: int,
        faces,
        edge_lengths,
        divisor: Iterable[tuple[int, float]] = (),
        positions=None,
        embedded: bool = False,
    ):
        self.vertex_count = int(vertex_count)
        faces = np.asarray(faces, dtype=np.int64)
        if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
            raise StructureError("faces must be a non-empty (F, 3) integer array")
        self.faces = faces
        self.faces.setflags(write=False)
        self._build_topology()

        if isinstance(edge_lengths, Mapping):
            lengths = np.empty(len(self.edges))
            seen = np.zeros(len(self.edges), dtype=bool)
            for (i, j), length in edge_lengths.items():
                k = self.edge_index(i, j)
                lengths[k] = float(length)
                seen[k] = True
            if not seen.all():
                missing = self.edges[~seen][0]
                raise StructureError(f"no length given for edge {tuple(missing)}")
        else:
            lengths = np.asarray(edge_lengths, dtype=float).copy()
            if lengths.shape != (len(self.edges),):
                raise StructureError(
                    f"expected {len(self.edges)} edge lengths, got {lengths.shape}"
                )
        self.edge_lengths = lengths
        self.edge_lengths.setflags(write=False)

        self.divisor = tuple((int(v), float(b)) for v, b in divisor)
        self._check_divisor()

        if positions is not None:
            positions = np.asarray(positions, dtype=float)
            if positions.shape != (self.vertex_count, 3):
                raise StructureError("positions must have shape (V, 3)")
            positions = positions.copy()
            positions.setflags(write=False)
        elif embedded:
            raise StructureError("an embedded mesh needs positions")
        self.positions = positions
        self.embedded = bool(embedded)

        bad = np.flatnonzero(~triangle_inequality_ok(self.face_lengths()))
        if len(bad):
            f = int(bad[0])
            raise GeometryError(
                f"face {f} {tuple(self.faces[f])} violates the strict triangle "
                f"inequality with lengths {tuple(self.face_lengths()[f])}",
                face=f,
            )

    @classmethod
    def from_positions(cls, positions, faces, divisor=()) -> "ConicalMesh":
        """Build a mesh whose lengths are the chordal distances of ``positions``."""
        positions = np.asarray(positions, dtype=float)
        faces = np.asarray(faces, dtype=np.int64)
        tmp_edges = np.unique(
            _edge_key_array(faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)), axis=0
        )
        lengths = np.linalg.norm(positions[tmp_edges[:, 0]] - positions[tmp_edges[:, 1]], axis=1)
        return cls(
            len(positions), faces, lengths, divisor, positions=positions, embedded=True
        )

    # -- topology -------------------------------------------------------------

    def _build_topology(self):
        V, faces = self.vertex_count, self.faces
        if faces.min() < 0 or faces.max() >= V:
            raise StructureError("face vertex index out of range")
        if np.any(faces[:, 0] == faces[:, 1]) or np.any(faces[:, 1] == faces[:, 2]) or np.any(
            faces[:, 2] == faces[:, 0]
        ):
            raise StructureError("face with a repeated vertex")
        if len(np.unique(faces.ravel())) != V:
            raise StructureError("isolated vertex (not used by any face)")

        # directed half-edges (a -> b) of corner c are opposite to that corner
        tails = faces[:, [1, 2, 0]]
        heads = faces[:, [2, 0, 1]]
        directed = np.stack([tails.ravel(), heads.ravel()], axis=1)
        codes = directed[:, 0] * V + directed[:, 1]
        if len(np.unique(codes)) != len(codes):
            raise StructureError("inconsistent orientation or non-manifold edge")
        rev = directed[:, 1] * V + directed[:, 0]
        if not np.all(np.isin(rev, codes)):
            raise StructureError("boundary edge: every edge must border exactly two faces")

        undirected = _edge_key_array(directed)
        self.edges, inverse = np.unique(undirected, axis=0, return_inverse=True)
        self.edges.setflags(write=False)
        self.face_edges = inverse.reshape(-1, 3)
        self.face_edges.setflags(write=False)
        self._edge_codes = self.edges[:, 0] * V + self.edges[:, 1]

        self._check_vertex_links()

    def _check_vertex_links(self):
        # the faces around each vertex must form one cycle
        nxt: list[dict[int, int]] = [dict() for _ in range(self.vertex_count)]
        for a, b, c in self.faces.tolist():
            nxt[a][b] = c
            nxt[b][c] = a
            nxt[c][a] = b
        for v, ring in enumerate(nxt):
            start = next(iter(ring))
            cur, n = start, 0
            while True:
                cur = ring[cur]
                n += 1
                if cur == start or n > len(ring):
                    break
            if cur != start or n != len(ring):
                raise StructureError(f"vertex {v} has a non-disk neighbourhood")

    def _check_divisor(self):
        seen = set()
        for v, beta in self.divisor:
            if not 0 <= v < self.vertex_count:
                raise GeometryError(f"divisor vertex {v} out of range")
            if v in seen:
                raise GeometryError(f"divisor vertex {v} listed twice")
            if not beta > -1.0:
                raise GeometryError(f"cone order {beta} at vertex {v} must exceed -1")
            seen.add(v)

    def edge_index(self, i: int, j: int) -> int:
        a, b = (i, j) if i < j else (j, i)
        code = a * self.vertex_count + b
        k = int(np.searchsorted(self._edge_codes, code))
        if k >= len(self._edge_codes) or self._edge_codes[k] != code:
            raise StructureError(f"({i}, {j}) is not an edge")
        return k

    # -- accessors ------------------------------------------------------------

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def betas(self) -> np.ndarray:
        """Cone order per vertex (zero away from the divisor)."""
        out = np.zeros(self.vertex_count)
        for v, b in self.divisor:
            out[v] = b
        return out

    @property
    def cone_vertices(self) -> list[int]:
        return [v for v, _ in self.divisor]

    def face_lengths(self, edge_lengths=None) -> np.ndarray:
        """Lengths ``(F, 3)``; column ``c`` is the edge opposite corner ``c``."""
        lengths = self.edge_lengths if edge_lengths is None else edge_lengths
        return np.asarray(lengths)[self.face_edges]

    def with_lengths(self, edge_lengths) -> "ConicalMesh":
        return ConicalMesh(
            self.vertex_count, self.faces, edge_lengths, self.divisor, self.positions, False
        )

    def with_divisor(self, divisor) -> "ConicalMesh":
        return ConicalMesh(
            self.vertex_count, self.faces, self.edge_lengths, divisor, self.positions,
            self.embedded,
        )

    def relabel(self, perm: Sequence[int]) -> "ConicalMesh":
        """Return the same surface with vertex ``v`` renamed ``perm[v]``."""
        perm = np.asarray(perm, dtype=np.int64)
        lengths = {
            (int(perm[i]), int(perm[j])): length
            for (i, j), length in zip(self.edges.tolist(), self.edge_lengths)
        }
        positions = None
        if self.positions is not None:
            positions = np.empty_like(self.positions)
            positions[perm] = self.positions
        return ConicalMesh(
            self.vertex_count,
            perm[self.faces],
            lengths,
            [(int(perm[v]), b) for v, b in self.divisor],
            positions,
            self.embedded,
        )

    def __repr__(self):
        return (
            f"ConicalMesh(V={self.vertex_count}, E={self.edge_count}, "
            f"F={self.face_count}, divisor={list(self.divisor)})"
        )


def triangle_inequality_ok(face_lengths: np.ndarray) -> np.ndarray:
    a, b, c = face_lengths[:, 0], face_lengths[:, 1], face_lengths[:, 2]
    return (a > 0) & (b > 0) & (c > 0) & (a < b + c) & (b < c + a) & (c < a + b)


def triangle_areas(face_lengths: np.ndarray) -> np.ndarray:
    """Heron's formula in Kahan's cancellation-free ordering."""
    s = np.sort(face_lengths, axis=1)[:, ::-1]
    a, b, c = s[:, 0], s[:, 1], s[:, 2]
    prod = (a + (b + c)) * (c - (a - b)) * (c + (a - b)) * (a + (b - c))
    return 0.25 * np.sqrt(np.maximum(prod, 0.0))


def corner_angles(face_lengths: np.ndarray, areas: np.ndarray | None = None) -> np.ndarray:
    """Interior angles by the law of cosines, evaluated through atan2."""
    if areas is None:
        areas = triangle_areas(face_lengths)
    sq = face_lengths**2
    # corner c: 2*b*c*cos = b^2 + c^2 - a^2 with a opposite, 2*b*c*sin = 4*area
    num = sq.sum(axis=1, keepdims=True) - 2.0 * sq
    return np.arctan2(4.0 * areas[:, None], num)


def corner_cotangents(face_lengths: np.ndarray, areas: np.ndarray | None = None) -> np.ndarray:
    if areas is None:
        areas = triangle_areas(face_lengths)
    sq = face_lengths**2
    num = sq.sum(axis=1, keepdims=True) - 2.0 * sq
    with np.errstate(divide="ignore"):
        return num / (4.0 * areas[:, None])


def euler_characteristic(mesh: ConicalMesh) -> int:
    """``V - E + F`` of the face complex."""
    return mesh.vertex_count - mesh.edge_count + mesh.face_count


def singular_euler(mesh: ConicalMesh) -> float:
    """Topological Euler characteristic plus the sum of cone orders."""
    return math.fsum([float(euler_characteristic(mesh))] + [b for _, b in mesh.divisor])


@dataclass(frozen=True)
class BackgroundMetric:
    """Discrete realisation of the background metric ``g``.

    ``kappa`` is inferred from Gauss-Bonnet, ``kappa * total_volume =
    2*pi*chi``.  Whether the per-vertex angle defects actually agree with a
    constant curvature is decided by :func:`gauss_bonnet_check`.
    """

    vertex_areas: np.ndarray
    corner_angles: np.ndarray
    face_areas: np.ndarray
    cotangents: np.ndarray
    kappa: float
    total_volume: float
    chi: float
    betas: np.ndarray = field(repr=False)
    faces: np.ndarray = field(repr=False)

    @property
    def angle_sums(self) -> np.ndarray:
        V = len(self.vertex_areas)
        return np.bincount(self.faces.ravel(), self.corner_angles.ravel(), minlength=V)

    @property
    def defects(self) -> np.ndarray:
        return TWO_PI - self.angle_sums

    @property
    def smooth_curvature(self) -> np.ndarray:
        """Per-vertex curvature with the singular part ``-2*pi*beta`` removed."""
        return (self.defects + TWO_PI * self.betas) / self.vertex_areas

    @property
    def is_null(self) -> bool:
        return abs(self.chi) <= CHI_ZERO_TOL


def metric_quantities(mesh: ConicalMesh) -> BackgroundMetric:
    """Corner angles, lumped vertex areas and the Gauss-Bonnet curvature."""
    fl = mesh.face_lengths()
    ok = triangle_inequality_ok(fl)
    if not ok.all():
        f = int(np.flatnonzero(~ok)[0])
        raise GeometryError(f"face {f} violates the triangle inequality", face=f)
    areas = triangle_areas(fl)
    angles = corner_angles(fl, areas)
    cots = corner_cotangents(fl, areas)
    vertex_areas = np.bincount(
        mesh.faces.ravel(), np.repeat(areas / 3.0, 3), minlength=mesh.vertex_count
    )
    total = float(math.fsum(areas))
    chi = singular_euler(mesh)
    kappa = 0.0 if abs(chi) <= CHI_ZERO_TOL else TWO_PI * chi / total
    metric = BackgroundMetric(
        vertex_areas=vertex_areas,
        corner_angles=angles,
        face_areas=areas,
        cotangents=cots,
        kappa=kappa,
        total_volume=total,
        chi=chi,
        betas=mesh.betas,
        faces=mesh.faces,
    )
    return metric


@dataclass(frozen=True)
class GaussBonnetReport:
    """Discrepancies of the discrete Gauss-Bonnet identities.

    ``topological``
        ``|sum of angle defects - 2*pi*chi(Sigma)|``; exact up to roundoff on
        every valid mesh.
    ``total``
        ``|kappa * Vol - 2*pi*chi(Sigma, beta)|``.
    ``per_vertex``
        ``max_v |defect_v + 2*pi*beta_v - kappa * A_v|``: how far the metric
        is from having constant curvature ``kappa`` away from the cones.
    """

    topological: float
    total: float
    per_vertex: float
    tol: float

    @property
    def accepted(self) -> bool:
        return self.topological <= self.tol and self.total <= self.tol and self.per_vertex <= self.tol


def default_curvature_tol(metric: BackgroundMetric) -> float:
    return 1e-6 * float(metric.vertex_areas.max())


def gauss_bonnet_check(mesh: ConicalMesh, metric: BackgroundMetric, tol: float | None = None):
    if tol is None:
        tol = default_curvature_tol(metric)
    defects = metric.defects
    topo = abs(math.fsum(defects) - TWO_PI * euler_characteristic(mesh))
    total = abs(metric.kappa * metric.total_volume - TWO_PI * metric.chi)
    pointwise = defects + TWO_PI * metric.betas - metric.kappa * metric.vertex_areas
    return GaussBonnetReport(topo, total, float(np.abs(pointwise).max()), float(tol))
