import math
import threading

import numpy as np
import pytest

from conicflow.errors import ConditioningWarning, NumericalError
from conicflow.generators import flat_torus, pillowcase
from conicflow.geometry import ConicalMesh, metric_quantities
from conicflow.operators import (
    assemble,
    dirichlet,
    h_inner,
    h_norm,
    helmholtz_solve,
    integrate,
    l2_inner,
    poincare_lambda,
)

from conftest import Setup, tetrahedron, torus_harmonic_lambda


def dense_stiffness(mesh):
    """Face-by-face cotangent assembly using the law of cosines directly."""
    V = mesh.vertex_count
    S = np.zeros((V, V))
    lengths = {tuple(e): l for e, l in zip(mesh.edges.tolist(), mesh.edge_lengths)}
    L = lambda a, b: lengths[(min(a, b), max(a, b))]  # noqa: E731
    for f in mesh.faces.tolist():
        for k in range(3):
            c, a, b = f[k], f[(k + 1) % 3], f[(k + 2) % 3]
            # angle at c, opposite edge (a, b)
            x, y, z = L(c, a), L(c, b), L(a, b)
            theta = math.acos((x * x + y * y - z * z) / (2 * x * y))
            w = 0.5 / math.tan(theta)
            S[a, b] -= w
            S[b, a] -= w
            S[a, a] += w
            S[b, b] += w
    return S


@pytest.mark.parametrize("name", ["torus16", "pillow8", "negative_sphere"])
def test_operator_invariants(name, request):
    s = request.getfixturevalue(name)
    S = s.ops.stiffness
    assert abs(S - S.T).max() < 1e-14
    assert np.abs(S @ np.ones(s.ops.size)).max() < 1e-12
    assert (s.ops.mass > 0).all()
    assert s.ops.mass.sum() == pytest.approx(s.metric.total_volume, rel=1e-14)
    H = s.ops.helmholtz.toarray()
    assert np.linalg.eigvalsh(H).min() > 0


@pytest.mark.parametrize("name", ["pillow8", "negative_sphere"])
def test_stiffness_matches_dense_oracle(name, request):
    s = request.getfixturevalue(name)
    assert np.abs(s.ops.stiffness.toarray() - dense_stiffness(s.mesh)).max() < 1e-12


def test_equilateral_weights():
    s = Setup(tetrahedron())
    S = s.ops.stiffness.toarray()
    off = S[~np.eye(4, dtype=bool)]
    assert np.allclose(off, -1 / math.sqrt(3), atol=1e-15)


def test_pillowcase_dirichlet_of_chart_coordinate(pillow8):
    # x is piecewise linear on both sheets, |grad x| = 1 on area 2
    x = pillow8.mesh.positions[:, 0]
    assert dirichlet(x, pillow8.ops) == pytest.approx(2.0, rel=1e-13)
    y = pillow8.mesh.positions[:, 1]
    assert float(x @ (pillow8.ops.stiffness @ y)) == pytest.approx(0.0, abs=1e-13)


def test_integrate_matches_face_quadrature(pillow8, rng):
    f = rng.standard_normal(pillow8.mesh.vertex_count)
    fl = pillow8.mesh.face_lengths()
    a, b, c = fl.T
    s = 0.5 * (a + b + c)
    T = np.sqrt(s * (s - a) * (s - b) * (s - c))
    exact = float(np.sum(T * f[pillow8.mesh.faces].mean(axis=1)))
    assert integrate(f, pillow8.metric) == pytest.approx(exact, rel=1e-12)
    assert integrate(1.0, pillow8.metric) == pytest.approx(pillow8.metric.total_volume)
    assert integrate(2.5, pillow8.ops) == pytest.approx(2.5 * pillow8.metric.total_volume)


def test_h_inner_basics(torus16, rng):
    u, w = rng.standard_normal((2, torus16.ops.size))
    one = np.ones(torus16.ops.size)
    assert h_inner(one, one, torus16.ops) == pytest.approx(1.0, rel=1e-12)
    assert h_inner(u, w, torus16.ops) == pytest.approx(h_inner(w, u, torus16.ops), rel=1e-13)
    assert h_inner(u, u, torus16.ops) >= l2_inner(u, u, torus16.ops)
    assert h_norm(u, torus16.ops) ** 2 == pytest.approx(h_inner(u, u, torus16.ops))


def test_rayleigh_quotient_on_torus():
    errs = []
    for n in (8, 16, 32):
        s = Setup(flat_torus(n))
        f = np.sin(2 * math.pi * s.mesh.positions[:, 0])
        q = dirichlet(f, s.ops) / l2_inner(f, f, s.ops)
        assert q == pytest.approx(torus_harmonic_lambda(n), rel=1e-12)
        errs.append(abs(q - 4 * math.pi**2))
    assert errs[0] > errs[1] > errs[2]


@pytest.mark.parametrize("method", ["direct", "cg", "dense"])
def test_helmholtz_constant_and_roundtrip(pillow8, rng, method):
    ops = pillow8.ops
    assert np.allclose(helmholtz_solve(np.full(ops.size, 3.5), ops, method=method), 3.5, atol=1e-9)
    x = rng.standard_normal(ops.size)
    f = ops.apply_helmholtz(x) / ops.mass
    assert np.abs(helmholtz_solve(f, ops, method=method) - x).max() < 1e-8 * np.abs(x).max()


def test_helmholtz_linear(torus16, rng):
    f, g = rng.standard_normal((2, torus16.ops.size))
    lhs = helmholtz_solve(2 * f - 3 * g, torus16.ops)
    rhs = 2 * helmholtz_solve(f, torus16.ops) - 3 * helmholtz_solve(g, torus16.ops)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_helmholtz_on_torus_eigenfunction():
    for n in (16, 32):
        s = Setup(flat_torus(n))
        f = np.cos(2 * math.pi * s.mesh.positions[:, 0])
        x = helmholtz_solve(f, s.ops)
        assert np.abs(x - f / (1 + torus_harmonic_lambda(n))).max() < 1e-12
    assert np.abs(x - f / (1 + 4 * math.pi**2)).max() < 2e-4


def test_self_adjointness(negative_sphere, rng):
    ops = negative_sphere.ops
    f, w = rng.standard_normal((2, ops.size))
    lhs = h_inner(helmholtz_solve(f, ops), w, ops)
    assert lhs == pytest.approx(l2_inner(f, w, ops), rel=1e-9)


def test_bad_solve_reports_residual(torus16, rng, monkeypatch):
    ops = torus16.ops.with_solver("direct")

    class Broken:
        def solve(self, b):
            return np.zeros_like(b)

    monkeypatch.setattr(ops, "_lu", lambda: Broken())
    with pytest.raises(NumericalError) as exc:
        helmholtz_solve(rng.standard_normal(ops.size), ops)
    assert exc.value.residual == pytest.approx(1.0)


def test_poincare_lambda_torus():
    for n in (8, 16):
        s = Setup(flat_torus(n))
        assert poincare_lambda(s.ops) == pytest.approx(torus_harmonic_lambda(n), rel=1e-10)


def test_poincare_lambda_relabel_invariant():
    mesh = pillowcase(4)
    perm = np.random.default_rng(0).permutation(mesh.vertex_count)
    a = poincare_lambda(Setup(mesh).ops)
    b = poincare_lambda(Setup(mesh.relabel(perm)).ops)
    assert a == pytest.approx(b, rel=1e-10)


def test_poincare_inequality(pillow8, rng):
    lam = poincare_lambda(pillow8.ops)
    assert lam > 0
    vol = pillow8.metric.total_volume
    for _ in range(50):
        u = rng.standard_normal(pillow8.ops.size) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        lhs = l2_inner(u, u, pillow8.ops)
        rhs = dirichlet(u, pillow8.ops) / lam + integrate(u, pillow8.ops) ** 2 / vol
        assert lhs <= rhs * (1 + 1e-12)


def test_poincare_needs_connected_mesh():
    a = tetrahedron()
    faces = np.vstack([a.faces, a.faces + 4])
    mesh = ConicalMesh(8, faces, {tuple(e): 1.0 for e in np.vstack([a.edges, a.edges + 4])})
    with pytest.raises(ValueError):
        poincare_lambda(Setup(mesh).ops)


def test_conditioning_warning():
    mesh = flat_torus(4)
    m = metric_quantities(mesh)
    cots = m.cotangents.copy()
    cots[2, 0] = 1e9
    bad = type(m)(**{**m.__dict__, "cotangents": cots})
    with pytest.warns(ConditioningWarning, match="face 2"):
        assemble(mesh, bad)


def test_concurrent_solves_share_factorisation(torus16, rng):
    ops = torus16.ops.with_solver("direct")
    fields = rng.standard_normal((8, ops.size))
    out = [None] * 8

    def work(i):
        out[i] = helmholtz_solve(fields[i], ops)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(8):
        assert np.array_equal(out[i], helmholtz_solve(fields[i], ops))
