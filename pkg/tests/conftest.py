"""Session-scoped model fixtures shared across test modules.

Eigenpair extraction is deterministic, so building each operator and its
spectral data once per session is safe and keeps the suite fast.
"""

import numpy as np
import pytest

from eigenpersist.boundary_resolvent import BoundaryResolvent
from eigenpersist.fermi_frame import build_frame, fermi_jacobian
from eigenpersist.operator_lab import (
    CYLINDER_EVEN_SECTOR,
    CYLINDER_FULL,
    FOURTH_ORDER_LINE,
    Dirichlet,
    Grid1D,
    ModelSpec,
    SechPair,
    SechSquaredWell,
    build_operator,
    bump_basis,
    cylinder_bump_basis,
)
from eigenpersist.persistence_solver import solve_eta, split
from eigenpersist.spectral_core import find_embedded_eigenpairs, make_hbar

LINE_WINDOW = (0.5, 1.5)
CYL_EVEN_WINDOW = (3.0, 3.5)
CYL_FULL_WINDOW = (0.1, 0.45)

LINE_CENTERS = (-2.5, -1.0, 0.5, 1.5, 3.0, 4.5)

# Two bumps share the cos(theta) profile at distinct centers: with only the
# j = 0 channel open, one such bump alone would leave the density block of
# the Jacobian rank deficient.
CYL_BUMPS = [
    (-3.0, 0.9, "const", 0, 1.0),
    (-1.0, 0.9, "cos", 1, 1.0),
    (2.5, 0.9, "cos", 1, 1.0),
    (1.0, 0.9, "cos", 2, 1.0),
    (3.0, 0.9, "sin", 1, 1.0),
    (0.0, 0.9, "sin", 2, 1.0),
    (2.0, 0.9, "const", 0, 1.0),
]


@pytest.fixture(scope="session")
def line_grid():
    return Grid1D(-20.0, 20.0, 2001)


@pytest.fixture(scope="session")
def line_model():
    return ModelSpec(kind=FOURTH_ORDER_LINE, potential=SechPair(20.0, -24.0))


@pytest.fixture(scope="session")
def line_op(line_model, line_grid):
    return build_operator(line_model, line_grid, Dirichlet())


@pytest.fixture(scope="session")
def line_spec(line_op):
    return find_embedded_eigenpairs(line_op, LINE_WINDOW)


@pytest.fixture(scope="session")
def line_hbar(line_op, line_spec):
    return make_hbar(line_op, line_spec)


@pytest.fixture(scope="session")
def free_line_op(line_grid):
    model = ModelSpec(kind=FOURTH_ORDER_LINE, potential=SechPair(0.0, 0.0))
    return build_operator(model, line_grid, Dirichlet())


@pytest.fixture(scope="session")
def cyl_grid():
    return Grid1D(-24.0, 24.0, 2401)


@pytest.fixture(scope="session")
def cyl_even_model():
    return ModelSpec(
        kind=CYLINDER_EVEN_SECTOR,
        potential=SechSquaredWell(1.5725),
        angular_cutoff=3,
        angular_index=2,
    )


@pytest.fixture(scope="session")
def cyl_even_op(cyl_even_model, cyl_grid):
    return build_operator(cyl_even_model, cyl_grid, Dirichlet())


@pytest.fixture(scope="session")
def cyl_even_spec(cyl_even_op):
    return find_embedded_eigenpairs(cyl_even_op, CYL_EVEN_WINDOW)


@pytest.fixture(scope="session")
def cyl_full_model():
    return ModelSpec(
        kind=CYLINDER_FULL,
        potential=SechSquaredWell(1.5725),
        angular_cutoff=3,
        angular_index=1,
    )


@pytest.fixture(scope="session")
def cyl_full_op(cyl_full_model, cyl_grid):
    return build_operator(cyl_full_model, cyl_grid, Dirichlet())


@pytest.fixture(scope="session")
def cyl_full_spec(cyl_full_op):
    return find_embedded_eigenpairs(cyl_full_op, CYL_FULL_WINDOW)


@pytest.fixture(scope="session")
def cyl_full_hbar(cyl_full_op, cyl_full_spec):
    return make_hbar(cyl_full_op, cyl_full_spec)


@pytest.fixture(scope="session")
def line_frame(line_spec, line_hbar):
    br = BoundaryResolvent(line_hbar, line_spec.lambda0)
    return build_frame(line_spec, br)


@pytest.fixture(scope="session")
def line_basis(line_grid):
    return bump_basis(line_grid, LINE_CENTERS, 0.8, 1.0)


@pytest.fixture(scope="session")
def line_jacobian(line_frame, line_spec, line_basis):
    return fermi_jacobian(line_frame, line_spec, line_basis)


@pytest.fixture(scope="session")
def line_split(line_jacobian):
    return split(line_jacobian)


@pytest.fixture(scope="session")
def cyl_frame(cyl_full_spec, cyl_full_hbar):
    br = BoundaryResolvent(cyl_full_hbar, cyl_full_spec.lambda0)
    return build_frame(cyl_full_spec, br)


@pytest.fixture(scope="session")
def cyl_basis(cyl_full_model, cyl_grid):
    return cylinder_bump_basis(cyl_full_model, cyl_grid, CYL_BUMPS)


@pytest.fixture(scope="session")
def cyl_jacobian(cyl_frame, cyl_full_spec, cyl_basis):
    return fermi_jacobian(cyl_frame, cyl_full_spec, cyl_basis)


@pytest.fixture(scope="session")
def cyl_split(cyl_jacobian):
    return split(cyl_jacobian)


@pytest.fixture(scope="session")
def cyl_point(cyl_frame, cyl_full_spec, cyl_basis, cyl_split):
    xi = np.zeros(cyl_split.kernel_dim)
    xi[0] = 1e-3
    return solve_eta(cyl_frame, cyl_full_spec, cyl_basis, cyl_split, xi)


def normalized_sech(grid: Grid1D) -> np.ndarray:
    phi = 1.0 / np.cosh(grid.points)
    return phi / (np.sqrt(grid.h) * np.linalg.norm(phi))


def mollifier_bump(points: np.ndarray, center: float, width: float) -> np.ndarray:
    """Smooth bump supported on |x - center| < width, flat to all orders."""
    t = (points - center) / width
    out = np.zeros_like(points)
    bulk = np.abs(t) < 1.0
    out[bulk] = np.exp(-1.0 / (1.0 - t[bulk] ** 2))
    return out
