"""Run configuration and the end-to-end solve pipeline.

Config files are flat ``key = value`` lines; ``#`` starts a comment.  Keys::

    mesh.file            path to a mesh file, or
    mesh.generator       flat_torus | pillowcase | cone_sphere
    mesh.n, mesh.betas   generator parameters
    mesh.uniformize      auto | always | never            (default auto)
    prescription         constant:v | harmonic1[:c] | affine:a,b | file:path
    seed.profile         auto | constant | bump           (default auto)
    seed.radius          bump radius                      (default 0.25 sqrt(Vol))
    solver.method        direct | cg | dense              (default direct)
    flow.<field>         any FlowConfig field
    output_dir           where CSVs and report.json go
    report_interval      flow time between time-series rows (default 0: every step)
    curvature_tol        constant-curvature tolerance     (default 1e-6 max vertex area)

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .errors import (
    ConfigError,
    ConicFlowError,
    GeometryError,
    NumericalError,
    SignError,
    StructureError,
)
from .flow import (
    FlowConfig,
    energy_identity_check,
    estimate_c_infinity,
    multiplier_bound,
    null_case_shift,
    residual_KW,
    run_flow,
)
from .functionals import (
    ConstraintSpec,
    compatibility_check,
    evaluate_preset,
    seed_on_constraint,
    smallness_report,
    trudinger_moser_report,
)
from .generators import generate_mesh
from .geometry import gauss_bonnet_check, metric_quantities
from .operators import SOLVERS, assemble
from .uniformize import curvature_of_conformal, uniformize_background

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INCONCLUSIVE = 2
EXIT_INCOMPATIBLE = 3
EXIT_NUMERICAL = 4

_FLOW_FIELDS = {f.name for f in dataclasses.fields(FlowConfig)}
_KEYS = {
    "mesh.file", "mesh.generator", "mesh.n", "mesh.betas", "mesh.uniformize", "prescription",
    "seed.profile", "seed.radius", "solver.method", "output_dir", "report_interval",
    "curvature_tol",
} | {f"flow.{name}" for name in _FLOW_FIELDS}


@dataclass(frozen=True)
class RunConfig:
    mesh_source: str | dict
    prescription: str
    flow: FlowConfig
    output_dir: Path
    report_interval: float = 0.0
    uniformize: str = "auto"
    seed_profile: str = "auto"
    seed_radius: float | None = None
    solver: str = "direct"
    curvature_tol: float | None = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def config_hash(self) -> str:
        canon = "\n".join(f"{k}={self.raw[k]}" for k in sorted(self.raw))
        return hashlib.sha256(canon.encode()).hexdigest()


def parse_config_text(text: str, base_dir=".") -> RunConfig:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected key = value")
        if key not in _KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        raw[key] = value
    return config_from_dict(raw, base_dir)


def _real(raw, key, default=None):
    if key not in raw:
        return default
    try:
        val = float(raw[key])
    except ValueError:
        raise ConfigError(f"{key} must be a real number, got {raw[key]!r}") from None
    if not math.isfinite(val):
        raise ConfigError(f"{key} must be finite")
    return val


def config_from_dict(raw: dict, base_dir=".") -> RunConfig:
    base = Path(base_dir)
    raw = {k: str(v) for k, v in raw.items()}
    if ("mesh.file" in raw) == ("mesh.generator" in raw):
        raise ConfigError("give exactly one of mesh.file and mesh.generator")
    if "mesh.file" in raw:
        source = str(base / raw["mesh.file"])
    else:
        source = {"name": raw["mesh.generator"], "n": raw.get("mesh.n")}
        if "mesh.betas" in raw:
            source["betas"] = raw["mesh.betas"]
        if source["n"] is None:
            raise ConfigError("mesh.generator needs mesh.n")
    if "prescription" not in raw:
        raise ConfigError("missing key 'prescription'")
    presc = raw["prescription"]
    if presc.startswith("file:"):
        presc = "file:" + str(base / presc[5:])
    flow_kwargs = {}
    for name in _FLOW_FIELDS:
        val = _real(raw, f"flow.{name}")
        if val is not None:
            flow_kwargs[name] = int(val) if name == "max_steps" else val
    flow = FlowConfig(**flow_kwargs)
    interval = _real(raw, "report_interval", 0.0)
    if interval < 0:
        raise ConfigError("report_interval must be nonnegative")
    mode = raw.get("mesh.uniformize", "auto")
    if mode not in ("auto", "always", "never"):
        raise ConfigError("mesh.uniformize must be auto, always or never")
    profile = raw.get("seed.profile", "auto")
    if profile not in ("auto", "constant", "bump"):
        raise ConfigError("seed.profile must be auto, constant or bump")
    solver = raw.get("solver.method", "direct")
    if solver not in SOLVERS:
        raise ConfigError(f"solver.method must be one of {SOLVERS}")
    radius = _real(raw, "seed.radius")
    ctol = _real(raw, "curvature_tol")
    for name, val in (("seed.radius", radius), ("curvature_tol", ctol)):
        if val is not None and not val > 0:
            raise ConfigError(f"{name} must be positive")
    return RunConfig(
        mesh_source=source, prescription=presc, flow=flow,
        output_dir=base / raw.get("output_dir", "out"), report_interval=interval,
        uniformize=mode, seed_profile=profile, seed_radius=radius, solver=solver,
        curvature_tol=ctol, raw=raw,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, path.parent)


def _decimate(trace, interval):
    if interval <= 0:
        return list(trace)
    out, next_t = [], -math.inf
    for row in trace:
        if row["t"] >= next_t:
            out.append(row)
            next_t = row["t"] + interval
    if out[-1] is not trace[-1]:
        out.append(trace[-1])
    return out


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(type(obj).__name__)


def _finite(x):
    # JSON has no inf/nan
    return x if isinstance(x, (int, str, bool)) or x is None or math.isfinite(x) else str(x)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float):
        return _finite(obj)
    return obj


def write_report(path, report: dict):
    Path(path).write_text(json.dumps(_clean(report), indent=2, default=_json_default) + "\n")


def load_mesh(source):
    if isinstance(source, dict):
        params = {k: v for k, v in source.items() if k != "name"}
        return generate_mesh(source["name"], params)
    return io.read_mesh(source)


def prepare_background(mesh, mode="auto", curvature_tol=None):
    """Return ``(mesh, metric, info)`` with a constant curvature background."""
    metric = metric_quantities(mesh)
    gb = gauss_bonnet_check(mesh, metric, curvature_tol)
    info = {"uniformized": False, "raw_gauss_bonnet": dataclasses.asdict(gb)}
    if mode == "always" or (mode == "auto" and not gb.accepted):
        res = uniformize_background(mesh, metric)
        mesh, metric = res.mesh, res.metric
        info.update(uniformized=True, kappa_bar=res.kappa_bar, residual=res.residual,
                    newton_history=res.history, guaranteed=res.guaranteed)
    gb = gauss_bonnet_check(mesh, metric, curvature_tol)
    info["gauss_bonnet"] = dataclasses.asdict(gb) | {"accepted": gb.accepted}
    if not gb.accepted:
        raise NumericalError(
            f"background is not of constant curvature (per-vertex {gb.per_vertex:.3e}, "
            f"tol {gb.tol:.3e}); set mesh.uniformize", gb.per_vertex,
        )
    return mesh, metric, info


def run(config: RunConfig, stream=None) -> int:
    """Execute one solve; writes CSVs and report.json and returns an exit code."""
    stream = stream or sys.stderr
    out = Path(config.output_dir)
    report = {
        "config_hash": config.config_hash,
        "config": config.raw,
        "tolerances": dataclasses.asdict(config.flow) | {
            "curvature_tol": config.curvature_tol, "report_interval": config.report_interval,
            "solver": config.solver,
        },
    }

    def finish(code, status, message=None):
        report["exit_code"] = code
        report["status"] = status
        if message:
            report["message"] = message
            print(f"conicflow: {message}", file=stream)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "report.json", report)
        return code

    try:
        mesh = load_mesh(config.mesh_source)
    except (StructureError, GeometryError, ConfigError) as exc:
        return finish(EXIT_CONFIG, "invalid-input", f"mesh: {exc}")
    except OSError as exc:
        return finish(EXIT_CONFIG, "invalid-input", f"mesh: {exc}")
    try:
        K = evaluate_preset(config.prescription, mesh)
    except (ConfigError, StructureError, OSError) as exc:
        return finish(EXIT_CONFIG, "invalid-input", f"prescription: {exc}")

    try:
        mesh, metric, bg = prepare_background(mesh, config.uniformize, config.curvature_tol)
        report["background"] = bg | {
            "vertices": mesh.vertex_count, "faces": mesh.face_count, "chi": metric.chi,
            "kappa": metric.kappa, "volume": metric.total_volume,
        }
        if bg["uniformized"]:
            out.mkdir(parents=True, exist_ok=True)
            io.write_mesh(mesh, out / "background.mesh",
                          [f"kappa_bar = {io.fmt(metric.kappa)}", f"residual = {io.fmt(bg['residual'])}"])
        ops = assemble(mesh, metric, config.solver, config.flow.solver_tol)

        compat = compatibility_check(K, metric)
        report["compatibility"] = dataclasses.asdict(compat)
        if not compat.passed:
            return finish(EXIT_INCOMPATIBLE, "incompatible", f"incompatible data: {compat.reason}")

        spec = ConstraintSpec.for_metric(metric)
        u0 = seed_on_constraint(K, metric, ops, spec, config.seed_profile, mesh, config.seed_radius)
        report["constraint_target"] = spec.target
        if compat.case == "negative":
            report["smallness"] = dataclasses.asdict(smallness_report(u0, K, ops))
        state, conv = run_flow(u0, K, ops, metric, spec, config.flow)
    except (NumericalError, SignError) as exc:
        extra = getattr(exc, "diagnostics", None)
        if extra:
            report["diagnostics"] = extra
        return finish(EXIT_NUMERICAL, "numerical-error", f"{type(exc).__name__}: {exc}")

    report["flow"] = conv.summary()
    ok_energy, gap = energy_identity_check(conv.trace, config.flow.energy_tol)
    report["energy_identity"] = {"gap": gap, "tol": config.flow.energy_tol, "passed": ok_energy}
    report["trudinger_moser"] = trudinger_moser_report(state.u, ops, metric)

    u = np.array(state.u)
    post = {}
    try:
        c_inf = estimate_c_infinity(u, K, ops, metric)
        post["c_infinity"] = c_inf
        post["multiplier"] = state.multiplier
        post["residual_unshifted"] = dataclasses.asdict(residual_KW(u, K, ops, metric, c_inf))
        post["residual_unshifted"].pop("pointwise")
        if compat.case == "null":
            u = null_case_shift(u, c_inf)
            post["tau"] = 0.5 * math.log(c_inf)
        else:
            post["c_minus_one_bound"] = multiplier_bound(state.grad_S_norm, metric)
        res = residual_KW(u, K, ops, metric)
        post["residual_KW"] = {"dual": res.dual, "l2": res.l2}
    except (NumericalError, SignError) as exc:
        report["postprocess"] = post
        return finish(EXIT_NUMERICAL, "numerical-error", f"post-processing: {exc}")
    report["postprocess"] = post

    out.mkdir(parents=True, exist_ok=True)
    rows = _decimate(conv.trace, config.report_interval)
    cols = ("t", "J", "dissipation", "energy_gap", "constraint_residual", "grad_S_norm",
            "mean_u", "min_u", "max_u")
    io.write_table(out / "timeseries.csv", {c: [r[c] for r in rows] for c in cols},
                   [f"config_hash = {config.config_hash}"])
    io.write_table(out / "final_state.csv", {
        "vertex": list(range(mesh.vertex_count)),
        "u": u,
        "curvature_of_e2u_g": curvature_of_conformal(u, ops, metric),
        "pointwise_KW_residual": res.pointwise,
    }, [f"config_hash = {config.config_hash}"])

    if conv.converged:
        return finish(EXIT_OK, "converged")
    return finish(EXIT_INCONCLUSIVE, "inconclusive",
                  f"stopped at t = {state.t:.6g} with |grad^S J| = {state.grad_S_norm:.3e} "
                  f"(grad_tol {config.flow.grad_tol:.1e})")


def run_path(path) -> int:
    try:
        config = load_config(path)
    except ConfigError as exc:
        print(f"conicflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return run(config)
    except ConicFlowError as exc:
        print(f"conicflow: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
