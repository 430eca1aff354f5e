import math

import numpy as np
import pytest

from conicflow.generators import cone_sphere, flat_torus, pillowcase
from conicflow.geometry import ConicalMesh, metric_quantities
from conicflow.operators import assemble
from conicflow.uniformize import uniformize_background


class Setup:
    def __init__(self, mesh, metric=None):
        self.mesh = mesh
        self.metric = metric if metric is not None else metric_quantities(mesh)
        self.ops = assemble(mesh, self.metric)


def tetrahedron(edge=1.0, divisor=()):
    faces = [(0, 1, 2), (0, 2, 3), (0, 3, 1), (1, 3, 2)]
    lengths = {(i, j): edge for i in range(4) for j in range(i + 1, 4)}
    return ConicalMesh(4, faces, lengths, divisor)


@pytest.fixture(scope="session")
def torus16():
    return Setup(flat_torus(16))


@pytest.fixture(scope="session")
def torus8():
    return Setup(flat_torus(8))


@pytest.fixture(scope="session")
def pillow8():
    return Setup(pillowcase(8))


@pytest.fixture(scope="session")
def negative_sphere():
    res = uniformize_background(cone_sphere(3, [-0.9, -0.9, -0.9]))
    return Setup(res.mesh, res.metric)


@pytest.fixture(scope="session")
def small_negative_sphere():
    res = uniformize_background(cone_sphere(2, [-0.9, -0.9, -0.9]))
    return Setup(res.mesh, res.metric)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def torus_harmonic_lambda(n):
    # 5-point spectrum: the diagonals of the regular torus grid carry zero weight
    return (2.0 - 2.0 * math.cos(2.0 * math.pi / n)) * n * n
