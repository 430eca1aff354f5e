"""The energy ``J``, the constraint functional ``L`` and their H-gradients.

    J(u) = 1/2 int |grad u|^2 + kappa int u
    L(u) = 1/2 int K exp(2u)

The flow lives on the level set ``L = pi * chi``: integrating the
curvature equation ``Delta u + kappa = K exp(2u)`` against 1 gives
``int K exp(2u) = kappa Vol = 2 pi chi``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.optimize
import scipy.sparse as sp
from scipy.sparse.csgraph import dijkstra

from .errors import ConfigError, DegeneracyError, RangeError, SeedError
from .geometry import CHI_ZERO_TOL, BackgroundMetric, ConicalMesh
from .operators import OperatorPair, dirichlet, h_inner, h_norm, helmholtz_solve, integrate

# exp(2u) overflows beyond this
MAX_EXPONENT = 709.0


@dataclass(frozen=True)
class Prescription:
    """Target curvature ``K`` sampled at the vertices."""

    K: np.ndarray
    sup_K: float
    integral_K: float

    @classmethod
    def from_values(cls, K, metric: BackgroundMetric) -> "Prescription":
        K = np.array(K, dtype=float)
        if K.shape != metric.vertex_areas.shape:
            raise ValueError(f"K has shape {K.shape}, expected {metric.vertex_areas.shape}")
        if not np.all(np.isfinite(K)):
            raise ValueError("K must be finite")
        if not np.any(K != 0.0):
            raise DegeneracyError("K vanishes identically")
        K.setflags(write=False)
        return cls(K, float(K.max()), integrate(K, metric))

    @property
    def K_minus(self) -> np.ndarray:
        return np.maximum(-self.K, 0.0)

    @property
    def sup_K_plus(self) -> float:
        return max(self.sup_K, 0.0)


@dataclass(frozen=True)
class ConstraintSpec:
    """Required value of ``L`` on the constraint set."""

    target: float

    @classmethod
    def for_metric(cls, metric: BackgroundMetric) -> "ConstraintSpec":
        chi = 0.0 if abs(metric.chi) <= CHI_ZERO_TOL else metric.chi
        return cls(math.pi * chi)


def _values(K):
    return K.K if isinstance(K, Prescription) else np.asarray(K, dtype=float)


def _exp2(u):
    top = float(np.max(u))
    if 2.0 * top > MAX_EXPONENT:
        raise RangeError(f"exp(2u) overflows: max u = {top:.6g}", top)
    return np.exp(2.0 * u)


def functional_J(u, ops: OperatorPair, metric: BackgroundMetric) -> float:
    return 0.5 * dirichlet(u, ops) + metric.kappa * integrate(u, ops)


def functional_L(u, K, metric: BackgroundMetric) -> float:
    # exactly rounded sum: the constraint is enforced near machine precision
    terms = _values(K) * _exp2(np.asarray(u, dtype=float)) * metric.vertex_areas
    return 0.5 * math.fsum(terms)


def grad_J(u, ops: OperatorPair, metric: BackgroundMetric, tol=None) -> np.ndarray:
    """``u - (Delta + I)^{-1} (u - kappa)``."""
    u = np.asarray(u, dtype=float)
    return u - helmholtz_solve(u - metric.kappa, ops, tol)


def grad_L(u, K, ops: OperatorPair, tol=None) -> np.ndarray:
    """``(Delta + I)^{-1} (K exp(2u))``."""
    return helmholtz_solve(_values(K) * _exp2(np.asarray(u, dtype=float)), ops, tol)


class ProjectedGradient(NamedTuple):
    field: np.ndarray
    grad_J: np.ndarray
    grad_L: np.ndarray
    multiplier: float
    norm: float


def projected_gradient(u, K, ops: OperatorPair, metric: BackgroundMetric,
                       tol=None) -> ProjectedGradient:
    """Tangential gradient together with its ingredients.

    ``multiplier`` is ``<grad J, grad L>_H / |grad L|_H^2``, the coefficient
    of ``grad L`` removed from ``grad J``; at a stationary point it is the
    constant of ``Delta u + kappa = c K exp(2u)``.
    """
    gJ = grad_J(u, ops, metric, tol)
    gL = grad_L(u, K, ops, tol)
    nL2 = h_inner(gL, gL, ops)
    nJ = h_norm(gJ, ops)
    if not math.sqrt(max(nL2, 0.0)) > 1e-14 * (1.0 + nJ):
        raise DegeneracyError("grad L is numerically zero; is K ~ 0?", math.sqrt(max(nL2, 0.0)))
    c = h_inner(gJ, gL, ops) / nL2
    g = gJ - c * gL
    return ProjectedGradient(g, gJ, gL, c, h_norm(g, ops))


def grad_S_J(u, K, ops: OperatorPair, metric: BackgroundMetric, tol=None) -> np.ndarray:
    """Gradient of ``J`` along the constraint hypersurface."""
    return projected_gradient(u, K, ops, metric, tol).field


def constraint_residual(u, K, metric: BackgroundMetric, spec: ConstraintSpec) -> float:
    return functional_L(u, K, metric) - spec.target


# -- initial data ----------------------------------------------------------------


def bump_profile(mesh: ConicalMesh, metric: BackgroundMetric, K, radius: float | None = None):
    """Hat function of geodesic graph distance around ``argmax K``.

    Restricted to ``{K > 0}`` and normalised to unit integral.
    """
    Kv = _values(K)
    if radius is None:
        radius = 0.25 * math.sqrt(metric.total_volume)
    if not radius > 0:
        raise ConfigError("seed radius must be positive")
    V = mesh.vertex_count
    graph = sp.coo_matrix(
        (mesh.edge_lengths, (mesh.edges[:, 0], mesh.edges[:, 1])), shape=(V, V)
    ).tocsr()
    peak = int(np.argmax(Kv))
    dist = dijkstra(graph, directed=False, indices=peak)
    phi = np.maximum(0.0, 1.0 - dist / radius) * (Kv > 0)
    return phi / integrate(phi, metric)


def seed_on_constraint(K, metric: BackgroundMetric, ops: OperatorPair, spec: ConstraintSpec,
                       profile: str = "auto", mesh: ConicalMesh | None = None,
                       radius: float | None = None) -> np.ndarray:
    """A point ``s * phi`` of the constraint set.

    ``phi`` is constant when ``int K`` and the target share a strict sign
    (then ``s`` has a closed form); otherwise a bump concentrated where
    ``K > 0``, which drives ``L`` to ``+inf`` as ``s`` grows.  The scalar is
    bracketed, found by Brent's method and polished by Newton until
    ``|L - target| <= 1e-12 (1 + |target|)``.
    """
    Kv = _values(K)
    target = spec.target
    intK = integrate(Kv, metric)
    if profile == "auto":
        same_sign = target != 0.0 and intK != 0.0 and (target > 0) == (intK > 0)
        profile = "constant" if same_sign else "bump"
    if profile == "constant":
        phi = np.ones_like(Kv)
    elif profile == "bump":
        if mesh is None:
            raise ConfigError("the bump profile needs the mesh")
        phi = bump_profile(mesh, metric, Kv, radius)
    else:
        raise ConfigError(f"unknown seed profile {profile!r}")

    def h(s):
        return functional_L(s * phi, Kv, metric) - target

    def dh(s):
        return integrate(Kv * _exp2(s * phi) * phi, metric)

    if profile == "constant" and target != 0.0 and (target > 0) == (intK > 0):
        s = 0.5 * math.log(2.0 * target / intK)
    else:
        s = _bracket_root(h, phi)
    scale = 1.0 + abs(target)
    for _ in range(50):
        r = h(s)
        if abs(r) <= 1e-13 * scale:
            break
        d = dh(s)
        if d == 0.0:
            break
        s -= r / d
    u0 = s * phi
    res = abs(h(s))
    if not res <= 1e-12 * scale:
        raise SeedError(f"seed residual {res:.3e} above 1e-12 (1 + |target|)", res)
    return u0


def _bracket_root(h, phi):
    h0 = h(0.0)
    if h0 == 0.0:
        return 0.0
    smax = MAX_EXPONENT / (2.0 * max(float(np.max(np.abs(phi))), 1e-300))
    for direction in (1.0, -1.0):
        lo, s = 0.0, 1e-3
        while s <= smax:
            try:
                hs = h(direction * s)
            except RangeError:
                break
            if np.sign(hs) != np.sign(h0):
                a, b = sorted((direction * lo, direction * s))
                return scipy.optimize.brentq(h, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
            lo, s = s, 2.0 * s
    raise SeedError("could not bracket L(s*phi) = target; try a different seed profile")


# -- hypotheses ------------------------------------------------------------------


@dataclass(frozen=True)
class CompatibilityResult:
    passed: bool
    reason: str
    case: str  # "negative", "null" or "positive"

    def __bool__(self):
        return self.passed


def chi_case(chi: float) -> str:
    if abs(chi) <= CHI_ZERO_TOL:
        return "null"
    return "negative" if chi < 0 else "positive"


def compatibility_check(K, metric: BackgroundMetric, mesh=None) -> CompatibilityResult:
    """Sign conditions on ``K`` for each sign of the singular Euler characteristic."""
    Kv = _values(K)
    intK = integrate(Kv, metric)
    supK = float(Kv.max())
    case = chi_case(metric.chi)
    if case == "negative":
        ok = intK < 0
        reason = "int K < 0" if ok else f"chi < 0 requires int K < 0 (got {intK:.6g})"
    elif case == "null":
        problems = []
        if not intK < 0:
            problems.append(f"int K < 0 (got {intK:.6g})")
        if not supK > 0:
            problems.append(f"sup K > 0 (got {supK:.6g})")
        ok = not problems
        reason = "int K < 0 and sup K > 0" if ok else "chi = 0 requires " + " and ".join(problems)
    else:
        ok = supK > 0
        reason = "sup K > 0" if ok else f"chi > 0 requires sup K > 0 (got {supK:.6g})"
    return CompatibilityResult(ok, reason, case)


@dataclass(frozen=True)
class SmallnessReport:
    """Quantities entering the smallness hypothesis for ``chi < 0``.

    ``product = exp(gamma |u0|_H^2) sup K``.  Never a verdict: the threshold
    is not computable, except that ``K <= 0`` satisfies it trivially.
    """

    sup_K: float
    sup_K_plus: float
    h_norm_sq: float
    gamma: float
    product: float
    auto_satisfied: bool


def smallness_report(u0, K, ops: OperatorPair, gamma: float = 2.0) -> SmallnessReport:
    if not gamma > 1.0:
        raise ConfigError("gamma must exceed 1")
    Kv = _values(K)
    supK = float(Kv.max())
    nsq = h_inner(u0, u0, ops)
    if supK == 0.0:
        product = 0.0
    else:
        expo = gamma * nsq
        product = math.copysign(math.inf, supK) if expo > MAX_EXPONENT else math.exp(expo) * supK
    return SmallnessReport(supK, max(supK, 0.0), nsq, gamma, product, bool(supK <= 0.0))


def trudinger_moser_report(u, ops: OperatorPair, metric: BackgroundMetric) -> dict:
    """Terms of the weak Trudinger-Moser inequality at ``u``.

    ``beta_lower_bound`` is the smallest exponent constant compatible with
    ``C = Vol`` at this ``u``.
    """
    vol = metric.total_volume
    exp_int = integrate(_exp2(np.asarray(u, dtype=float)), ops)
    grad_sq = dirichlet(u, ops)
    mean_term = 2.0 / vol * integrate(u, ops)
    excess = math.log(exp_int / vol) - mean_term
    return {
        "exp_integral": exp_int,
        "dirichlet": grad_sq,
        "mean_term": mean_term,
        "log_excess": excess,
        "beta_lower_bound": excess / grad_sq if grad_sq > 0 else 0.0,
    }


# -- prescriptions ---------------------------------------------------------------


def evaluate_preset(spec: str, mesh: ConicalMesh) -> np.ndarray:
    """Evaluate a named curvature preset at the vertices.

    ``constant:v``
        ``K = v``.
    ``harmonic1[:c]``
        ``cos(2 pi x) - c`` (``c = 0.5`` by default), with ``x`` the first
        chart coordinate.
    ``affine:a,b``
        ``a + b x``.
    ``file:path``
        Per-vertex CSV ``vertex_index,value``.
    """
    name, _, arg = spec.strip().partition(":")
    V = mesh.vertex_count
    try:
        if name == "constant":
            return np.full(V, float(arg))
        if name == "file":
            from .io import read_field

            return read_field(arg, V)
        if name in ("harmonic1", "affine"):
            if mesh.positions is None:
                raise ConfigError(f"preset {name} needs chart coordinates on the mesh")
            x = mesh.positions[:, 0]
            if name == "harmonic1":
                c = float(arg) if arg else 0.5
                return np.cos(2.0 * math.pi * x) - c
            a, b = (float(t) for t in arg.split(","))
            return a + b * x
    except ValueError as exc:
        raise ConfigError(f"bad curvature preset {spec!r}: {exc}") from exc
    raise ConfigError(f"unknown curvature preset {spec!r}")
