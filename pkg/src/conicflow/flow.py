"""Constrained gradient flow ``du/dt = -grad^S J(u)`` on ``{L = target}``.

Time stepping is adaptive Bogacki-Shampine RK3(2) with the local error
measured in the H norm.  After each accepted step the state is pulled
back to the constraint set along ``grad L`` by a scalar Newton solve,
which only corrects the integrator's second-order drift.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DegeneracyError,
    NumericalError,
    ProjectionError,
    RangeError,
    SignError,
    StiffnessError,
)
from .functionals import (
    ConstraintSpec,
    ProjectedGradient,
    _exp2,
    _values,
    chi_case,
    functional_J,
    functional_L,
    projected_gradient,
)
from .geometry import BackgroundMetric
from .operators import OperatorPair, h_norm, helmholtz_solve, integrate

log = logging.getLogger(__name__)

RENORM_TOL = 1e-13


@dataclass(frozen=True)
class FlowConfig:
    dt_initial: float = 1e-3
    dt_min: float = 1e-10
    dt_max: float = 1.0
    grad_tol: float = 1e-8
    t_max: float = 500.0
    constraint_tol: float = 1e-8
    energy_tol: float = 1e-4
    solver_tol: float = 1e-10
    max_steps: int = 1_000_000

    def __post_init__(self):
        for name in ("dt_initial", "dt_min", "dt_max", "grad_tol", "t_max",
                     "constraint_tol", "energy_tol", "solver_tol"):
            val = getattr(self, name)
            if not (isinstance(val, (int, float)) and math.isfinite(val) and val > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {val!r}")
        if not self.dt_min <= self.dt_initial <= self.dt_max:
            raise ConfigError("need dt_min <= dt_initial <= dt_max")
        if int(self.max_steps) < 1:
            raise ConfigError("max_steps must be at least 1")

    @property
    def local_error_tol(self) -> float:
        return 0.1 * self.grad_tol


@dataclass(frozen=True)
class FlowState:
    """One accepted point of the flow.

    ``dissipation`` is the accumulated ``int_0^t |grad^S J|_H^2``;
    ``dt`` is the step size proposed for the next step.
    """

    t: float
    u: np.ndarray = field(repr=False)
    J_value: float
    dissipation: float
    constraint_residual: float
    grad_S_norm: float
    mean_u: float
    integral_u: float
    multiplier: float
    dt: float
    steps: int = 0
    rejected: int = 0
    local_error: float = 0.0
    renorm_shift: float = 0.0
    gradient: ProjectedGradient | None = field(default=None, repr=False, compare=False)


def initial_state(u0, K, ops: OperatorPair, metric: BackgroundMetric, spec: ConstraintSpec,
                  config: FlowConfig) -> FlowState:
    u0 = np.array(u0, dtype=float)
    return _make_state(0.0, u0, K, ops, metric, spec, config, 0.0, config.dt_initial, 0, 0)


def _make_state(t, u, K, ops, metric, spec, config, dissipation, dt, steps, rejected, pg=None,
                local_error=0.0, renorm_shift=0.0):
    if pg is None:
        pg = projected_gradient(u, K, ops, metric, config.solver_tol)
    u.setflags(write=False)
    integral = integrate(u, ops)
    return FlowState(
        t=t, u=u, J_value=functional_J(u, ops, metric), dissipation=dissipation,
        constraint_residual=functional_L(u, K, metric) - spec.target,
        grad_S_norm=pg.norm, mean_u=integral / metric.total_volume, integral_u=integral,
        multiplier=pg.multiplier, dt=dt, steps=steps, rejected=rejected,
        local_error=local_error, renorm_shift=renorm_shift, gradient=pg,
    )


def _renormalize(u, K, ops, metric, spec, grad_L=None, max_iter=30):
    """Move ``u`` along ``grad L / |grad L|_H`` onto the constraint set.

    Returns the new field and the signed distance moved.
    """
    Kv = _values(K)
    if grad_L is None:
        grad_L = helmholtz_solve(Kv * _exp2(u), ops)
    norm = h_norm(grad_L, ops)
    if not norm > 0:
        raise ProjectionError("grad L vanishes; cannot renormalize")
    n = grad_L / norm
    weights = Kv * n * metric.vertex_areas
    scale = 1.0 + abs(spec.target)
    s = 0.0
    r = functional_L(u, Kv, metric) - spec.target
    for _ in range(max_iter):
        # aim a decade below the contract, accept the contract itself
        if abs(r) <= 0.1 * RENORM_TOL * scale:
            return u + s * n, s
        d = float(np.dot(weights, _exp2(u + s * n)))
        if not d > 0:
            raise ProjectionError("constraint not transversal along grad L", abs(r))
        s -= r / d
        r = functional_L(u + s * n, Kv, metric) - spec.target
    if abs(r) <= RENORM_TOL * scale:
        return u + s * n, s
    raise ProjectionError(f"renormalization stalled at residual {abs(r):.3e}", abs(r))


def renormalize_constraint(u, K, ops: OperatorPair, metric: BackgroundMetric,
                           spec: ConstraintSpec) -> np.ndarray:
    """Project ``u`` back onto ``L = target`` by a 1-D Newton solve.

    Raises
    ------
    ProjectionError
        Newton fails to reach ``|L - target| <= 1e-13 (1 + |target|)``.
    """
    return _renormalize(np.asarray(u, dtype=float), K, ops, metric, spec)[0]


def flow_step(state: FlowState, K, ops: OperatorPair, metric: BackgroundMetric,
              spec: ConstraintSpec, config: FlowConfig) -> FlowState:
    """Advance by one accepted adaptive step.

    The step is retried with a smaller ``dt`` while the H-norm local error
    exceeds ``0.1 * grad_tol``, the drift off the constraint set exceeds
    ``constraint_tol`` or a stage leaves the range of ``exp``.

    Raises
    ------
    StiffnessError
        ``dt`` fell below ``dt_min``; the exception carries diagnostics.
    """
    pg0 = state.gradient or projected_gradient(state.u, K, ops, metric, config.solver_tol)
    u = state.u
    if pg0.norm == 0.0:
        return replace(state, t=state.t + state.dt, steps=state.steps + 1)
    tol = config.local_error_tol
    dt = min(state.dt, config.dt_max)
    rejected = state.rejected
    stol = config.solver_tol

    def slope(x):
        return -projected_gradient(x, K, ops, metric, stol).field

    k1 = -pg0.field
    last = {}
    while True:
        if dt < config.dt_min:
            raise StiffnessError(
                f"step size {dt:.3e} fell below dt_min at t = {state.t:.6g}",
                diagnostics=dict(t=state.t, dt=dt, grad_S_norm=state.grad_S_norm, **last),
            )
        try:
            k2 = slope(u + 0.5 * dt * k1)
            k3 = slope(u + 0.75 * dt * k2)
            high = u + dt * (2.0 / 9.0 * k1 + 1.0 / 3.0 * k2 + 4.0 / 9.0 * k3)
            pg_high = projected_gradient(high, K, ops, metric, stol)
            k4 = -pg_high.field
            err = h_norm(dt * (-5.0 / 72.0 * k1 + 1.0 / 12.0 * k2 + 1.0 / 9.0 * k3 - 1.0 / 8.0 * k4), ops)
            drift = abs(functional_L(high, K, metric) - spec.target)
        except (RangeError, DegeneracyError, NumericalError) as exc:
            last = dict(reason=str(exc))
            rejected += 1
            dt *= 0.25
            continue
        last = dict(local_error=err, drift=drift)
        if err <= tol and drift <= config.constraint_tol:
            try:
                new_u, s = _renormalize(high, K, ops, metric, spec, pg_high.grad_L)
            except ProjectionError as exc:
                new_u, s = None, math.inf
                last["reason"] = str(exc)
            if abs(s) <= 10.0 * config.constraint_tol:
                break
        # shrink on error, on drift, or on a failed projection
        factor = 0.9 * (tol / err) ** (1.0 / 3.0) if err > tol else 0.5
        rejected += 1
        dt *= min(0.5, max(0.2, factor))

    pg1 = pg_high if s == 0.0 else projected_gradient(new_u, K, ops, metric, stol)
    dissipation = state.dissipation + 0.5 * dt * (pg0.norm ** 2 + pg1.norm ** 2)
    grow = 5.0 if err == 0.0 else min(5.0, 0.9 * (tol / err) ** (1.0 / 3.0))
    dt_next = min(config.dt_max, dt * max(1.0, grow) if err <= tol else dt)
    return _make_state(state.t + dt, new_u, K, ops, metric, spec, config, dissipation,
                       dt_next, state.steps + 1, rejected, pg1, err, s)


# -- monitoring ------------------------------------------------------------------


TRACE_FIELDS = (
    "step", "t", "dt", "J", "dissipation", "energy_gap", "constraint_residual",
    "grad_S_norm", "grad_J_norm", "mean_u", "integral_u", "min_u", "max_u", "multiplier",
    "local_error", "renorm_shift",
)


def _trace_row(state: FlowState, J0: float, ops: OperatorPair) -> dict:
    return dict(
        step=state.steps, t=state.t, dt=state.dt, J=state.J_value, dissipation=state.dissipation,
        energy_gap=state.J_value + state.dissipation - J0,
        constraint_residual=state.constraint_residual, grad_S_norm=state.grad_S_norm,
        grad_J_norm=h_norm(state.gradient.grad_J, ops) if state.gradient else math.nan,
        mean_u=state.mean_u, integral_u=state.integral_u,
        min_u=float(state.u.min()), max_u=float(state.u.max()), multiplier=state.multiplier,
        local_error=state.local_error, renorm_shift=state.renorm_shift,
    )


@dataclass
class ConvergenceReport:
    """Outcome of :func:`run_flow`.

    ``status`` is ``"converged"`` when ``|grad^S J|_H <= grad_tol`` was
    reached, ``"inconclusive"`` when ``t_max`` or ``max_steps`` ran out
    first.  ``trace`` holds one row per accepted step.
    """

    status: str
    case: str
    t: float
    steps: int
    rejected: int
    grad_S_norm: float
    J_initial: float
    J_final: float
    max_energy_gap: float
    max_constraint_residual: float
    max_mean_drift: float
    guaranteed: bool
    scope: str
    trace: list = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def summary(self) -> dict:
        out = asdict(self)
        out.pop("trace")
        out["converged"] = self.converged
        return out


def _scope(case: str, K) -> tuple[bool, str]:
    Kv = _values(K)
    if case == "positive":
        return False, ("chi > 0 lies outside the convergence theorem; "
                       "any convergence observed here is empirical")
    if case == "negative" and Kv.max() > 0:
        return False, ("chi < 0 with sup K > 0: convergence is guaranteed only under "
                       "the smallness condition, whose threshold is not computable")
    return True, f"chi {'< 0 with K <= 0' if case == 'negative' else '= 0'}: covered by the convergence theorem"


def run_flow(u0, K, ops: OperatorPair, metric: BackgroundMetric, spec: ConstraintSpec,
             config: FlowConfig | None = None, callback=None):
    """Integrate the flow until ``|grad^S J|_H <= grad_tol`` or ``t >= t_max``.

    ``u0`` must already satisfy the constraint to ``1e-12 (1 + |target|)``.
    ``callback(state)`` is called after every accepted step.

    Returns
    -------
    (FlowState, ConvergenceReport)
    """
    config = config or FlowConfig()
    state = initial_state(u0, K, ops, metric, spec, config)
    if abs(state.constraint_residual) > 1e-12 * (1.0 + abs(spec.target)):
        raise ProjectionError(
            f"initial field is off the constraint set by {state.constraint_residual:.3e}",
            abs(state.constraint_residual),
        )
    J0 = state.J_value
    trace = [_trace_row(state, J0, ops)]
    case = chi_case(metric.chi)
    while state.grad_S_norm > config.grad_tol and state.t < config.t_max \
            and state.steps < config.max_steps:
        state = flow_step(state, K, ops, metric, spec, config)
        trace.append(_trace_row(state, J0, ops))
        if callback is not None:
            callback(state)
        if state.steps % 500 == 0:
            log.info("step %d t=%.4g dt=%.3g |g|=%.3e J=%.10g", state.steps, state.t, state.dt,
                     state.grad_S_norm, state.J_value)
    status = "converged" if state.grad_S_norm <= config.grad_tol else "inconclusive"
    guaranteed, scope = _scope(case, K)
    scale = 1.0 + abs(J0)
    report = ConvergenceReport(
        status=status, case=case, t=state.t, steps=state.steps, rejected=state.rejected,
        grad_S_norm=state.grad_S_norm, J_initial=J0, J_final=state.J_value,
        max_energy_gap=max(abs(r["energy_gap"]) for r in trace) / scale,
        max_constraint_residual=max(abs(r["constraint_residual"]) for r in trace),
        max_mean_drift=max(abs(r["integral_u"] - trace[0]["integral_u"]) for r in trace),
        guaranteed=guaranteed, scope=scope, trace=trace,
    )
    return state, report


def energy_identity_check(trace, tol: float = 1e-4) -> tuple[bool, float]:
    """``max_t |J(t) + int_0^t |grad^S J|^2 - J(0)| / (1 + |J(0)|)`` against ``tol``."""
    J0 = trace[0]["J"]
    gap = max(abs(r["J"] + r["dissipation"] - J0) for r in trace) / (1.0 + abs(J0))
    return gap <= tol, gap


def energy_budget_excess(trace) -> float:
    """Largest ``J_{k+1} - J_k`` beyond the step's error budget (<= 0 means monotone).

    The budget of a step is ``|grad J|_H (local_error + |renorm_shift|)``, the
    first-order change of ``J`` caused by the integrator error and the
    projection, plus roundoff in evaluating ``J``.
    """
    eps = np.finfo(float).eps
    worst = -math.inf
    for prev, row in zip(trace, trace[1:]):
        budget = prev["grad_J_norm"] * (row["local_error"] + abs(row["renorm_shift"]))
        budget += 64.0 * eps * (1.0 + abs(prev["J"]))
        worst = max(worst, row["J"] - prev["J"] - budget)
    return worst


# -- the limit -------------------------------------------------------------------


@dataclass(frozen=True)
class KWResidual:
    """Residual of ``Delta u + kappa = K exp(2u)``.

    ``dual`` is the H-dual norm ``sqrt(r^T (S + M)^{-1} r)`` of the weak
    residual vector, ``l2`` the mass-weighted pointwise norm.
    """

    dual: float
    l2: float
    pointwise: np.ndarray = field(repr=False)


def residual_KW(u, K, ops: OperatorPair, metric: BackgroundMetric, c: float = 1.0) -> KWResidual:
    u = np.asarray(u, dtype=float)
    A = ops.mass
    r = ops.stiffness @ u + metric.kappa * A - c * A * _values(K) * _exp2(u)
    x = helmholtz_solve(r / A, ops)
    pointwise = r / A
    return KWResidual(h_norm(x, ops), math.sqrt(float(np.dot(pointwise * A, pointwise))), pointwise)


def estimate_c_infinity(u, K, ops: OperatorPair, metric: BackgroundMetric) -> float:
    """Least-squares ``c`` in ``Delta u + kappa = c K exp(2u)``."""
    u = np.asarray(u, dtype=float)
    A = ops.mass
    Ke = _values(K) * _exp2(u)
    den = float(np.dot(A * Ke, Ke))
    if not den > 0:
        raise DegeneracyError("K exp(2u) vanishes; c is undetermined", den)
    return float(np.dot(ops.stiffness @ u + metric.kappa * A, Ke)) / den


def null_case_shift(u, c_inf: float) -> np.ndarray:
    """``u + log(c)/2`` turns ``Delta u = c K exp(2u)`` into ``c = 1``."""
    if not c_inf > 0:
        raise SignError(f"c = {c_inf:.6g} is not positive; no shift solves the equation")
    return np.asarray(u, dtype=float) + 0.5 * math.log(c_inf)


def multiplier_bound(grad_norm: float, metric: BackgroundMetric) -> float:
    """Upper bound on ``|c - 1|`` from the tangential gradient, for ``chi != 0``."""
    if chi_case(metric.chi) == "null":
        return math.inf
    return grad_norm * math.sqrt(metric.total_volume) / (2.0 * math.pi * abs(metric.chi))
