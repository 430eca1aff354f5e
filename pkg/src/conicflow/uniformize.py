"""Constant curvature backgrounds and curvature of conformal metrics.

A raw conical metric is conformally rescaled by vertex scaling,
``l'_ij = exp((v_i + v_j) / 2) * l_ij``, until every vertex satisfies

    defect_v + 2*pi*beta_v = kbar * A_v,      kbar = 2*pi*chi / Vol,

with angles and areas measured in the rescaled metric.  The derivative of
the angle sums under vertex scaling is minus the cotangent stiffness
matrix, so Newton's method only needs sparse solves.  The first Newton
step from ``v = 0`` in the null case is the linear solve
``S v = -defect``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import MeshQualityError, UniformizationError
from .geometry import (
    CHI_ZERO_TOL,
    TWO_PI,
    BackgroundMetric,
    ConicalMesh,
    corner_angles,
    corner_cotangents,
    metric_quantities,
    singular_euler,
    triangle_areas,
    triangle_inequality_ok,
)
from .operators import OperatorPair

log = logging.getLogger(__name__)


def curvature_of_conformal(u, ops: OperatorPair, metric: BackgroundMetric) -> np.ndarray:
    """Per-vertex curvature of ``exp(2u) g``: ``exp(-2u) (kappa + Delta u)``."""
    u = np.asarray(u, dtype=float)
    return (metric.kappa * ops.mass + ops.stiffness @ u) / (np.exp(2.0 * u) * ops.mass)


def scaled_lengths(mesh: ConicalMesh, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    return mesh.edge_lengths * np.exp(0.5 * (v[mesh.edges[:, 0]] + v[mesh.edges[:, 1]]))


@dataclass
class UniformizationResult:
    """Output of :func:`uniformize_background`.

    ``v`` is the conformal factor relative to the raw metric, ``mesh`` the
    rescaled mesh and ``metric`` its quantities.  ``residual`` is the largest
    per-vertex deviation ``|K_v - kbar|`` of the smooth curvature.
    """

    v: np.ndarray
    mesh: ConicalMesh
    metric: BackgroundMetric
    kappa_bar: float
    residual: float
    history: list = field(default_factory=list)
    guaranteed: bool = True

    def __iter__(self):
        # unpacks as (v, metric)
        return iter((self.v, self.metric))


def _state(mesh: ConicalMesh, v, chi, betas):
    fl = mesh.face_lengths(scaled_lengths(mesh, v))
    if not triangle_inequality_ok(fl).all():
        return None
    areas = triangle_areas(fl)
    angles = corner_angles(fl, areas)
    V = mesh.vertex_count
    vertex_areas = np.bincount(mesh.faces.ravel(), np.repeat(areas / 3.0, 3), minlength=V)
    vol = areas.sum()
    defect = TWO_PI - np.bincount(mesh.faces.ravel(), angles.ravel(), minlength=V)
    F = defect + TWO_PI * betas - TWO_PI * chi * vertex_areas / vol
    return dict(fl=fl, areas=areas, vertex_areas=vertex_areas, vol=vol, F=F)


def _jacobian(mesh: ConicalMesh, st, chi):
    V = mesh.vertex_count
    fl, areas = st["fl"], st["areas"]
    cots = corner_cotangents(fl, areas)
    f = mesh.faces
    # derivative of the angle sums is -S, so d(defect)/dv = S
    i = f[:, [1, 2, 0]].ravel()
    j = f[:, [2, 0, 1]].ravel()
    w = 0.5 * cots.ravel()
    off = sp.coo_matrix((-w, (i, j)), shape=(V, V))
    off = off + off.T
    S = off + sp.diags(-np.asarray(off.sum(axis=1)).ravel())
    if abs(chi) <= CHI_ZERO_TOL:
        return S.tocsr(), None, None
    # dT/dv_p = (l_b^2 cot_q + l_c^2 cot_r) / 4 for face (p, q, r)
    q = (fl**2) * cots / 4.0
    dT = np.stack([q[:, 1] + q[:, 2], q[:, 2] + q[:, 0], q[:, 0] + q[:, 1]], axis=1)
    rows = np.repeat(f, 3, axis=1).ravel()
    cols = np.tile(f, (1, 3)).ravel()
    vals = np.tile(dT / 3.0, (1, 3)).ravel()
    D = sp.coo_matrix((vals, (rows, cols)), shape=(V, V)).tocsr()
    g = np.bincount(f.ravel(), dT.ravel(), minlength=V)
    return S.tocsr(), D, g


def _newton_direction(st, S, D, g, chi):
    """Solve J dv = -F with the gauge sum(dv) = 0.

    ``J = S - c1 D + c2 A g^T`` is kept sparse through one auxiliary unknown
    ``y = g . dv``; a multiplier column absorbs the left null vector ``1``.
    """
    V = S.shape[0]
    one = np.ones((V, 1))
    if D is None:
        top = sp.hstack([S, sp.csr_matrix(one)])
        bottom = sp.hstack([sp.csr_matrix(one.T), sp.csr_matrix((1, 1))])
        K = sp.vstack([top, bottom]).tocsc()
        rhs = np.concatenate([-st["F"], [0.0]])
        return spla.spsolve(K, rhs)[:V]
    vol = st["vol"]
    c1 = TWO_PI * chi / vol
    c2 = TWO_PI * chi / vol**2
    A = st["vertex_areas"][:, None]
    top = sp.hstack([S - c1 * D, sp.csr_matrix(c2 * A), sp.csr_matrix(one)])
    mid = sp.hstack([sp.csr_matrix(g[None, :]), sp.csr_matrix([[-1.0]]), sp.csr_matrix((1, 1))])
    bottom = sp.hstack([sp.csr_matrix(one.T), sp.csr_matrix((1, 2))])
    K = sp.vstack([top, mid, bottom]).tocsc()
    rhs = np.concatenate([-st["F"], [0.0, 0.0]])
    return spla.spsolve(K, rhs)[:V]


def uniformize_background(mesh: ConicalMesh, raw_metric: BackgroundMetric | None = None,
                          tol: float = 1e-10, max_iter: int = 100):
    """Rescale ``mesh`` conformally to constant curvature away from its cones.

    Parameters
    ----------
    mesh : ConicalMesh
        Raw metric; its angle defects need not encode the divisor yet.
    raw_metric : BackgroundMetric, optional
        Quantities of ``mesh``; recomputed when omitted.
    tol : float
        Stop once ``max_v |K_v - kbar| <= tol * (1 + |kbar|)``.

    Returns
    -------
    UniformizationResult
        Total area is preserved, so ``kbar`` equals the raw Gauss-Bonnet
        curvature.  ``guaranteed`` is false when ``chi > 0``.

    Raises
    ------
    UniformizationError
        Damped Newton stalls or exhausts ``max_iter``; carries the history of
        residual norms.
    MeshQualityError
        The final rescaling violates a triangle inequality.
    """
    if raw_metric is None:
        raw_metric = metric_quantities(mesh)
    chi = singular_euler(mesh)
    betas = mesh.betas
    v = np.zeros(mesh.vertex_count)
    st = _state(mesh, v, chi, betas)
    history = []

    def deviation(s):
        kbar = TWO_PI * chi / s["vol"] if abs(chi) > CHI_ZERO_TOL else 0.0
        return float(np.max(np.abs(s["F"]) / s["vertex_areas"])), kbar

    for it in range(max_iter + 1):
        norm = float(np.linalg.norm(st["F"]))
        dev, kbar = deviation(st)
        history.append(norm)
        log.debug("uniformize iter %d |F|=%.3e deviation=%.3e", it, norm, dev)
        if dev <= tol * (1.0 + abs(kbar)):
            break
        if it == max_iter:
            raise UniformizationError(
                f"Newton did not converge in {max_iter} iterations (deviation {dev:.3e})",
                dev, history,
            )
        S, D, g = _jacobian(mesh, st, chi)
        dv = _newton_direction(st, S, D, g, chi)
        if not np.all(np.isfinite(dv)):
            raise UniformizationError("singular Newton system", dev, history)
        step = 1.0
        while True:
            trial = _state(mesh, v + step * dv, chi, betas)
            if trial is not None and np.linalg.norm(trial["F"]) <= (1.0 - 1e-4 * step) * norm:
                break
            step *= 0.5
            if step < 1e-10:
                raise UniformizationError(
                    f"line search failed at iteration {it} (deviation {dev:.3e})", dev, history
                )
        v = v + step * dv
        st = trial

    # preserve total area, then fix the gauge of v
    shift = 0.5 * math.log(raw_metric.total_volume / st["vol"])
    v = v + shift
    lengths = scaled_lengths(mesh, v)
    if not triangle_inequality_ok(mesh.face_lengths(lengths)).all():
        raise MeshQualityError("rescaled lengths violate a triangle inequality")
    new_mesh = mesh.with_lengths(lengths)
    metric = metric_quantities(new_mesh)
    residual = float(np.max(np.abs(metric.smooth_curvature - metric.kappa)))
    return UniformizationResult(
        v=v, mesh=new_mesh, metric=metric, kappa_bar=metric.kappa, residual=residual,
        history=history, guaranteed=chi <= CHI_ZERO_TOL,
    )
