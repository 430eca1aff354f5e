"""``conicflow`` command line.

    conicflow solve <config> [<config> ...] [--sweep --jobs N]
    conicflow uniformize <mesh> <out>
    conicflow verify <mesh> <field> --prescription PRESET
    conicflow gen <name> <key=value ...> <out>

Exit codes: 0 converged or passed, 1 invalid input or config, 2 inconclusive,
3 incompatible data, 4 numerical failure.  ``CONICFLOW_THREADS`` caps the
threads used by the BLAS/LAPACK backing the linear solves.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext

from . import io
from .errors import ConfigError, ConicFlowError, GeometryError, NumericalError, StructureError
from .flow import FlowConfig, estimate_c_infinity, null_case_shift, residual_KW
from .functionals import (
    ConstraintSpec,
    compatibility_check,
    evaluate_preset,
    functional_J,
    functional_L,
    projected_gradient,
)
from .generators import generate_mesh
from .geometry import gauss_bonnet_check, metric_quantities
from .operators import assemble
from .pipeline import (
    EXIT_CONFIG,
    EXIT_INCOMPATIBLE,
    EXIT_INCONCLUSIVE,
    EXIT_NUMERICAL,
    EXIT_OK,
    _clean,
    load_config,
    run_path,
)
from .uniformize import uniformize_background

THREADS_ENV = "CONICFLOW_THREADS"


def _thread_limit():
    val = os.environ.get(THREADS_ENV)
    if not val:
        return nullcontext()
    try:
        n = int(val)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {val!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {val!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _dump(obj):
    print(json.dumps(_clean(obj), indent=2, default=float))


def cmd_solve(args) -> int:
    if len(args.configs) > 1 and not args.sweep:
        print("conicflow: several configs need --sweep", file=sys.stderr)
        return EXIT_CONFIG
    if not args.sweep:
        return run_path(args.configs[0])
    # each run must own its output directory
    dirs = {}
    for path in args.configs:
        try:
            d = load_config(path).output_dir.resolve()
        except ConfigError as exc:
            print(f"conicflow: {path}: config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if d in dirs:
            print(f"conicflow: {path} and {dirs[d]} share output_dir {d}", file=sys.stderr)
            return EXIT_CONFIG
        dirs[d] = path
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        codes = list(pool.map(run_path, args.configs))
    for path, code in zip(args.configs, codes):
        print(f"{path}: exit {code}")
    return max(codes)


def cmd_uniformize(args) -> int:
    try:
        mesh = io.read_mesh(args.mesh)
    except (OSError, StructureError, GeometryError) as exc:
        print(f"conicflow: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = uniformize_background(mesh, tol=args.tol)
    except (NumericalError, GeometryError) as exc:
        print(f"conicflow: uniformization failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    gb = gauss_bonnet_check(res.mesh, res.metric)
    io.write_mesh(res.mesh, args.out, [
        f"kappa_bar = {io.fmt(res.kappa_bar)}", f"residual = {io.fmt(res.residual)}",
    ])
    _dump({
        "kappa_bar": res.kappa_bar, "residual": res.residual, "newton_history": res.history,
        "guaranteed": res.guaranteed, "gauss_bonnet": dataclasses.asdict(gb) | {"accepted": gb.accepted},
    })
    return EXIT_OK if gb.accepted else EXIT_NUMERICAL


def cmd_verify(args) -> int:
    """All checks on a given field ``u`` over a background mesh."""
    try:
        mesh = io.read_mesh(args.mesh)
        u = io.read_field(args.field, mesh.vertex_count)
        K = evaluate_preset(args.prescription, mesh)
    except (OSError, ConicFlowError) as exc:
        print(f"conicflow: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    metric = metric_quantities(mesh)
    ops = assemble(mesh, metric)
    spec = ConstraintSpec.for_metric(metric)
    gb = gauss_bonnet_check(mesh, metric)
    compat = compatibility_check(K, metric)
    out = {
        "gauss_bonnet": dataclasses.asdict(gb) | {"accepted": gb.accepted},
        "compatibility": dataclasses.asdict(compat),
        "chi": metric.chi, "kappa": metric.kappa,
    }
    try:
        pg = projected_gradient(u, K, ops, metric)
        out["J"] = functional_J(u, ops, metric)
        out["constraint_residual"] = functional_L(u, K, metric) - spec.target
        out["grad_S_norm"] = pg.norm
        c = estimate_c_infinity(u, K, ops, metric)
        out["c_infinity"] = c
        raw = residual_KW(u, K, ops, metric)
        out["residual_KW"] = {"dual": raw.dual, "l2": raw.l2}
        shifted = u
        if compat.case == "null" and c > 0:
            shifted = null_case_shift(u, c)
            out["tau"] = 0.5 * math.log(c)
        res = residual_KW(shifted, K, ops, metric)
        out["residual_KW_shifted"] = {"dual": res.dual, "l2": res.l2}
    except (NumericalError, ConicFlowError) as exc:
        out["error"] = str(exc)
        _dump(out)
        return EXIT_NUMERICAL
    passed = gb.accepted and res.dual <= args.tol
    out["tol"] = args.tol
    out["passed"] = passed
    _dump(out)
    if not compat.passed:
        return EXIT_INCOMPATIBLE
    return EXIT_OK if passed else EXIT_INCONCLUSIVE


def _parse_params(tokens) -> dict:
    params = {}
    for tok in " ".join(tokens).split():
        key, sep, val = tok.partition("=")
        if not sep:
            raise ConfigError(f"generator parameter {tok!r} is not key=value")
        params[key] = val
    return params


def cmd_gen(args) -> int:
    try:
        mesh = generate_mesh(args.name, _parse_params(args.params))
    except ConfigError as exc:
        print(f"conicflow: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    io.write_mesh(mesh, args.out, [f"generated by: gen {args.name} {' '.join(args.params)}"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="conicflow", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="run the flow described by a config file")
    s.add_argument("configs", nargs="+")
    s.add_argument("--sweep", action="store_true", help="run several configs concurrently")
    s.add_argument("--jobs", type=int, default=None)
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("uniformize", help="rescale a mesh to constant curvature")
    s.add_argument("mesh")
    s.add_argument("out")
    s.add_argument("--tol", type=float, default=1e-10)
    s.set_defaults(func=cmd_uniformize)

    s = sub.add_parser("verify", help="residuals and checks for a field on a background mesh")
    s.add_argument("mesh")
    s.add_argument("field")
    s.add_argument("-K", "--prescription", required=True)
    s.add_argument("--tol", type=float, default=10 * FlowConfig().grad_tol)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("gen", help="write a built-in mesh")
    s.add_argument("name")
    s.add_argument("params", nargs="+", help="key=value, e.g. n=8 betas=-0.9,-0.9")
    s.add_argument("out")
    s.set_defaults(func=cmd_gen)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"conicflow: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
