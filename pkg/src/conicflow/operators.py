"""Discrete Laplace-Beltrami operator, lumped mass and the W^{1,2} structure.

Fields are plain ``numpy`` arrays with one value per vertex.  The Sobolev
space ``H = W^{1,2}`` carries the inner product ``u^T (S + M) w`` where ``S``
is the cotangent stiffness matrix and ``M`` the diagonal of vertex areas.
"""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .errors import ConditioningWarning, NumericalError
from .geometry import BackgroundMetric, ConicalMesh

SOLVERS = ("direct", "cg", "dense")
DEFAULT_SOLVER_TOL = 1e-10
DENSE_LIMIT = 3000
COT_WARN = 1e8


@dataclass(eq=False)
class OperatorPair:
    """Stiffness and lumped mass of one background metric.

    The matrices are never mutated after :func:`assemble`.  Factorisations
    of ``S + M`` are built lazily, once, under a lock, so concurrent solves
    on the same pair are safe.
    """

    stiffness: sp.csr_matrix
    mass: np.ndarray
    edges: np.ndarray = field(repr=False)
    solver: str = "direct"
    solver_tol: float = DEFAULT_SOLVER_TOL
    _cache: dict = field(default_factory=dict, repr=False)
    _lock: threading.RLock = field(default_factory=threading.RLock, repr=False)

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise ValueError(f"unknown solver {self.solver!r}; choose from {SOLVERS}")

    @property
    def size(self) -> int:
        return len(self.mass)

    @property
    def helmholtz(self) -> sp.csr_matrix:
        """The matrix ``S + M`` of the H inner product."""
        return self._cached("helmholtz", lambda: (self.stiffness + sp.diags(self.mass)).tocsr())

    def apply_helmholtz(self, x: np.ndarray) -> np.ndarray:
        return self.stiffness @ x + self.mass * x

    def with_solver(self, solver: str, solver_tol: float | None = None) -> "OperatorPair":
        return OperatorPair(
            self.stiffness, self.mass, self.edges, solver,
            self.solver_tol if solver_tol is None else solver_tol,
        )

    def _cached(self, key, build):
        try:
            return self._cache[key]
        except KeyError:
            pass
        with self._lock:
            if key not in self._cache:
                self._cache[key] = build()
            return self._cache[key]

    def _lu(self):
        return self._cached("lu", lambda: spla.splu(self.helmholtz.tocsc()))

    def _cho(self):
        if self.size > DENSE_LIMIT:
            raise NumericalError(f"dense solver limited to {DENSE_LIMIT} vertices")
        return self._cached("cho", lambda: scipy.linalg.cho_factor(self.helmholtz.toarray()))

    def _jacobi(self):
        return self._cached(
            "jacobi", lambda: spla.LinearOperator(
                (self.size, self.size), matvec=lambda r: r / self.helmholtz.diagonal()
            )
        )


def assemble(mesh: ConicalMesh, metric: BackgroundMetric, solver: str = "direct",
             solver_tol: float = DEFAULT_SOLVER_TOL) -> OperatorPair:
    """Cotangent stiffness and lumped mass of ``metric``.

    Negative cotangent weights are kept: the stiffness matrix is then still
    the exact Dirichlet form of piecewise linear fields.
    """
    cots = metric.cotangents
    big = np.abs(cots) > COT_WARN
    if big.any() or not np.isfinite(cots).all():
        f = int(np.flatnonzero((big | ~np.isfinite(cots)).any(axis=1))[0])
        warnings.warn(
            f"near-degenerate angle in face {f}: cotangent {cots[f]}", ConditioningWarning,
            stacklevel=2,
        )
    V = mesh.vertex_count
    # corner c faces edge (c+1, c+2)
    i = mesh.faces[:, [1, 2, 0]].ravel()
    j = mesh.faces[:, [2, 0, 1]].ravel()
    w = 0.5 * cots.ravel()
    off = sp.coo_matrix((-w, (i, j)), shape=(V, V))
    off = off + off.T
    diag = -np.asarray(off.sum(axis=1)).ravel()
    stiffness = (off + sp.diags(diag)).tocsr()
    stiffness.sum_duplicates()
    return OperatorPair(stiffness, metric.vertex_areas.copy(), np.asarray(mesh.edges), solver,
                        solver_tol)


def integrate(f, metric_or_ops) -> float:
    """Lumped integral ``sum_v f_v A_v``; exact for piecewise linear ``f``."""
    areas = metric_or_ops.vertex_areas if hasattr(metric_or_ops, "vertex_areas") else metric_or_ops.mass
    return float(np.dot(np.broadcast_to(f, areas.shape), areas))


def h_inner(u, w, ops: OperatorPair) -> float:
    return float(u @ (ops.stiffness @ w) + np.dot(u * ops.mass, w))


def h_norm(u, ops: OperatorPair) -> float:
    return math.sqrt(max(h_inner(u, u, ops), 0.0))


def l2_inner(u, w, ops: OperatorPair) -> float:
    return float(np.dot(u * ops.mass, w))


def dirichlet(u, ops: OperatorPair) -> float:
    """``int |grad u|^2``."""
    return float(u @ (ops.stiffness @ u))


def helmholtz_solve(f, ops: OperatorPair, tol: float | None = None,
                    method: str | None = None) -> np.ndarray:
    """Discrete ``(Delta_g + I)^{-1} f``: solve ``(S + M) x = M f``.

    Parameters
    ----------
    f : ndarray
        Field to invert.
    tol : float, optional
        Relative residual bound; defaults to ``ops.solver_tol``.
    method : {"direct", "cg", "dense"}, optional
        Defaults to ``ops.solver``.  ``cg`` is Jacobi preconditioned
        conjugate gradients; ``direct`` reuses one sparse LU factorisation;
        ``dense`` a Cholesky factorisation (test oracle, small meshes).

    Raises
    ------
    NumericalError
        If the relative residual exceeds ``tol`` (``cg`` within its
        iteration budget, or any method after the solve).
    """
    tol = ops.solver_tol if tol is None else tol
    method = ops.solver if method is None else method
    if not tol > 0:
        raise ValueError("tol must be positive")
    f = np.asarray(f, dtype=float)
    b = ops.mass * f
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b)
    if method == "direct":
        x = ops._lu().solve(b)
    elif method == "dense":
        x = scipy.linalg.cho_solve(ops._cho(), b)
    elif method == "cg":
        x, info = spla.cg(
            ops.helmholtz, b, x0=f.copy(), rtol=tol, atol=0.0,
            maxiter=max(10 * ops.size, 1000), M=ops._jacobi(),
        )
        if info != 0:
            res = np.linalg.norm(b - ops.helmholtz @ x) / bnorm
            raise NumericalError(f"conjugate gradients did not converge (residual {res:.3e})", res)
    else:
        raise ValueError(f"unknown solver {method!r}")
    res = np.linalg.norm(b - ops.apply_helmholtz(x)) / bnorm
    if not res <= max(tol, 1e3 * np.finfo(float).eps):
        raise NumericalError(f"Helmholtz solve residual {res:.3e} exceeds {tol:.1e}", res)
    return x


def poincare_lambda(ops: OperatorPair, metric: BackgroundMetric | None = None,
                    tol: float = 1e-13, maxiter: int = 2000, seed: int = 0) -> float:
    """First nonzero eigenvalue of ``S x = lambda M x``.

    Inverse iteration with the Helmholtz solve, restricted to fields of
    zero mean.  The Rayleigh quotient is returned once it stagnates to
    relative ``tol``.
    """
    areas = ops.mass if metric is None else metric.vertex_areas
    n = ops.size
    adj = sp.coo_matrix((np.ones(len(ops.edges)), (ops.edges[:, 0], ops.edges[:, 1])), shape=(n, n))
    if connected_components(adj, directed=False)[0] != 1:
        raise ValueError("poincare_lambda needs a connected mesh")
    vol = areas.sum()
    x = np.random.default_rng(seed).standard_normal(n)
    q_prev = np.inf
    for _ in range(maxiter):
        x = x - np.dot(areas, x) / vol
        x /= math.sqrt(np.dot(areas * x, x))
        q = dirichlet(x, ops)
        if abs(q - q_prev) <= tol * abs(q):
            return q
        q_prev = q
        x = helmholtz_solve(x, ops)
    raise NumericalError("inverse iteration for the Poincare eigenvalue did not converge",
                         abs(q - q_prev) / abs(q))
