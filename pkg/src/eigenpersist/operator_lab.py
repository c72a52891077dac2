"""Grids, model operators, potentials, and perturbation bases.

Assembles banded matrix realizations of two model Hamiltonians carrying an
embedded eigenvalue:

* the fourth-order line operator ``H = d^4/dx^4 + V(x)`` on a finite box,
  discretized with the centered 5-point stencil;
* the cylinder operator ``H = -d^2/dz^2 - d^2/dtheta^2 + V(z)`` truncated to
  angular modes ``|j| <= J`` (full trigonometric basis, or the cos-only even
  sector), discretized with the 3-point stencil in ``z``.

Boundary closures are either Dirichlet (exactly symmetric, used for eigenpair
work) or radiation rows: complex one-sided stencils that annihilate precisely
the outgoing and decaying characteristic roots of the discrete interior
recurrence at a fixed energy, used for boundary values of the resolvent.
Perturbations are real multiplication operators spanned by a finite basis.

Discrete vectors are stored flat.  For cylinder models the layout is z-major,
``index = iz * n_modes + mode``, and the angular factor of each mode is an
orthonormal trigonometric function, so the weighted inner product
``<u, v> = h * sum(u * v)`` agrees with the continuum pairing in every model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from ._banded import BandedLU, BandMatrix, BorderedLU
from .errors import (
    BasisError,
    ConfigError,
    DimensionMismatch,
    GridError,
    PotentialError,
)

__all__ = [
    "Grid1D",
    "SechPair",
    "SechSquaredWell",
    "Tabulated",
    "ModelSpec",
    "FOURTH_ORDER_LINE",
    "CYLINDER_EVEN_SECTOR",
    "CYLINDER_FULL",
    "Dirichlet",
    "Radiation",
    "PerturbationBasis",
    "DiscreteOperator",
    "build_operator",
    "apply_field",
    "apply_perturbation",
    "with_radiation",
    "multiplication_field",
    "apply_multiplication",
    "line_radiation_roots",
    "cylinder_radiation_roots",
    "build_modes",
    "theta_nodes",
    "angular_functions",
    "bump_basis",
    "cylinder_bump_basis",
]

FOURTH_ORDER_LINE = "fourth_order_line"
CYLINDER_EVEN_SECTOR = "cylinder_even_sector"
CYLINDER_FULL = "cylinder_full"

_MODEL_KINDS = (FOURTH_ORDER_LINE, CYLINDER_EVEN_SECTOR, CYLINDER_FULL)


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on [x_min, x_max] with n_points nodes (endpoints included)."""

    x_min: float
    x_max: float
    n_points: int

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise GridError(f"x_max={self.x_max} must exceed x_min={self.x_min}")
        if self.n_points < 16:
            raise GridError(f"n_points={self.n_points} < 16")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / (self.n_points - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.n_points)

    @property
    def is_symmetric(self) -> bool:
        return abs(self.x_min + self.x_max) <= 1e-12 * max(1.0, abs(self.x_max))


class _Potential:
    """Common interface: pointwise sampling plus parity/decay metadata."""

    form: str = ""

    def sample(self, x: np.ndarray) -> np.ndarray:  # pragma: no cover - abstract
        raise NotImplementedError

    def is_even(self, grid: Grid1D) -> bool:  # pragma: no cover - abstract
        raise NotImplementedError


def _sech(x) -> np.ndarray:
    # cosh overflows past ~710, exactly where sech underflows to 0
    with np.errstate(over="ignore"):
        return 1.0 / np.cosh(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SechPair(_Potential):
    """V(x) = a / cosh^2 x + b / cosh^4 x."""

    a: float
    b: float
    form = "sech_pair"

    def sample(self, x):
        s = _sech(x)
        return self.a * s**2 + self.b * s**4

    def is_even(self, grid=None):
        return True


@dataclass(frozen=True)
class SechSquaredWell(_Potential):
    """Attractive well V(z) = -v0 / cosh^2 z."""

    v0: float
    form = "sech_squared_well"

    def sample(self, x):
        s = _sech(x)
        return -self.v0 * s**2

    def is_even(self, grid=None):
        return True


@dataclass(frozen=True)
class Tabulated(_Potential):
    """Potential given by its values on the grid nodes."""

    values: np.ndarray
    form = "tabulated"

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)

    def sample(self, x):
        x = np.asarray(x)
        if x.shape != self.values.shape:
            raise PotentialError(
                f"tabulated potential has {self.values.shape[0]} values, "
                f"grid has {x.shape[0]} points"
            )
        return self.values.copy()

    def is_even(self, grid=None):
        v = self.values
        return bool(np.max(np.abs(v - v[::-1]), initial=0.0) <= 1e-12 * max(1.0, np.max(np.abs(v), initial=0.0)))


def _check_decay(potential: _Potential, grid: Grid1D, q: float = 0.51, margin: float = 10.0) -> None:
    """Reject potentials whose box-edge values have not decayed like (1+x^2)^(-q)."""
    x = grid.points
    v = potential.sample(x)
    if np.iscomplexobj(v):
        raise PotentialError("potential values must be real")
    scale = float(np.max(np.abs(v), initial=0.0))
    if scale == 0.0:
        return
    for edge in (0, -1):
        bound = margin * scale * (1.0 + x[edge] ** 2) ** (-q)
        if abs(v[edge]) > bound:
            raise PotentialError(
                f"potential at box edge x={x[edge]:g} is {abs(v[edge]):.3e}, "
                f"exceeding the decay bound {bound:.3e}"
            )


@dataclass(frozen=True)
class ModelSpec:
    """Which Hamiltonian to build, its potential, and cylinder mode data.

    Parameters
    ----------
    kind : str
        One of ``fourth_order_line``, ``cylinder_even_sector``,
        ``cylinder_full``.
    potential : potential object
        ``SechPair``, ``SechSquaredWell``, or ``Tabulated``.
    angular_cutoff : int, optional
        Number J of retained angular frequencies (cylinder kinds only).
    angular_index : int, optional
        Angular frequency n of the embedded state of interest; must satisfy
        ``1 <= n <= J`` (cylinder kinds only).
    weight_index : float, optional
        Intended polynomial weight of the function spaces.  Metadata only:
        on a finite box all weighted norms are equivalent.
    """

    kind: str
    potential: _Potential
    angular_cutoff: Optional[int] = None
    angular_index: Optional[int] = None
    weight_index: float = 1.0

    def __post_init__(self):
        if self.kind not in _MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.kind == FOURTH_ORDER_LINE:
            if self.angular_cutoff is not None or self.angular_index is not None:
                raise ConfigError("line model takes no angular parameters")
        else:
            if self.angular_cutoff is None or self.angular_cutoff < 0:
                raise ConfigError("cylinder model needs angular_cutoff J >= 0")
            if self.angular_index is None or self.angular_index < 1:
                raise ConfigError("cylinder model needs angular_index n >= 1")
            if self.angular_index > self.angular_cutoff:
                raise ConfigError(
                    f"angular_index n={self.angular_index} exceeds cutoff J={self.angular_cutoff}"
                )

    @property
    def is_cylinder(self) -> bool:
        return self.kind != FOURTH_ORDER_LINE


def build_modes(model: ModelSpec) -> tuple[tuple[int, str], ...]:
    """Ordered angular modes ``(j, parity)`` retained by a cylinder model.

    The even sector keeps cos(j theta) for j = 0..J; the full model
    interleaves (j, cos) and (j, sin) for j >= 1.
    """
    if not model.is_cylinder:
        raise ConfigError("line model has no angular modes")
    J = model.angular_cutoff
    if model.kind == CYLINDER_EVEN_SECTOR:
        return tuple((j, "cos") for j in range(J + 1))
    modes: list[tuple[int, str]] = [(0, "cos")]
    for j in range(1, J + 1):
        modes.append((j, "cos"))
        modes.append((j, "sin"))
    return tuple(modes)


def theta_nodes(model: ModelSpec) -> tuple[np.ndarray, float]:
    """Uniform angular quadrature nodes and common weight for a cylinder model.

    The node count 4J + 8 integrates products of any three retained
    trigonometric factors exactly, so Galerkin blocks of multiplication
    operators built on these nodes carry no quadrature error.
    """
    if not model.is_cylinder:
        raise ConfigError("line model has no angular grid")
    n = 4 * model.angular_cutoff + 8
    theta = 2.0 * np.pi * np.arange(n) / n
    return theta, 2.0 * np.pi / n


def angular_functions(modes: Sequence[tuple[int, str]], theta: np.ndarray) -> np.ndarray:
    """Orthonormal angular factors evaluated at ``theta``; shape (n_modes, n_theta)."""
    out = np.empty((len(modes), len(theta)))
    for a, (j, parity) in enumerate(modes):
        if j == 0:
            out[a] = 1.0 / math.sqrt(2.0 * np.pi)
        elif parity == "cos":
            out[a] = np.cos(j * theta) / math.sqrt(np.pi)
        else:
            out[a] = np.sin(j * theta) / math.sqrt(np.pi)
    return out


@dataclass(frozen=True)
class Dirichlet:
    """Zero-extension closure; keeps the matrix exactly symmetric."""

    kind = "dirichlet"


@dataclass(frozen=True)
class Radiation:
    """Outgoing-wave closure at energy ``lam`` on the ``sign`` branch.

    ``sign=+1`` selects boundary values of the resolvent taken from the upper
    half-plane (outgoing waves ``e^{+i mu |x|}``), ``sign=-1`` the complex
    conjugate branch.
    """

    lam: float
    sign: int
    kind = "radiation"

    def __post_init__(self):
        if self.sign not in (-1, 1):
            raise ConfigError(f"radiation sign must be +-1, got {self.sign}")
        if not self.lam > 0.0:
            raise ConfigError(
                f"radiation closure needs lam > 0 (no propagating channel at lam={self.lam})"
            )


@dataclass
class PerturbationBasis:
    """Finite family of real multiplication operators W_1 .. W_p.

    For the line model each element is a vector of node values.  For cylinder
    models each element is a field on the (z, theta) tensor grid, sampled at
    the angular quadrature nodes of :func:`theta_nodes`; its Galerkin blocks
    couple the retained angular modes.

    Elements must be linearly independent as grid functions.  Complex-valued
    elements are storable (so reality violations can be diagnosed by the
    hypothesis checker) but are rejected by :func:`apply_perturbation`.
    """

    elements: np.ndarray
    labels: Sequence[str] = ()
    support_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        el = np.asarray(self.elements)
        if el.ndim not in (2, 3):
            raise BasisError(f"elements must be (p, n) or (p, nz, ntheta), got shape {el.shape}")
        self.elements = el
        if not self.labels:
            self.labels = tuple(f"W{k + 1}" for k in range(el.shape[0]))
        elif len(self.labels) != el.shape[0]:
            raise BasisError("one label per element required")
        flat = el.reshape(el.shape[0], -1)
        gram = flat.conj() @ flat.T
        evals = np.linalg.eigvalsh((gram + gram.conj().T) / 2.0)
        if evals[0] <= 1e-12 * max(evals[-1], 1e-300):
            raise BasisError("basis elements are linearly dependent")

    @property
    def p(self) -> int:
        return self.elements.shape[0]

    @property
    def is_real(self) -> bool:
        return not np.iscomplexobj(self.elements) or bool(
            np.max(np.abs(self.elements.imag), initial=0.0) == 0.0
        )


@dataclass(eq=False)
class DiscreteOperator:
    """Banded matrix realization of a model Hamiltonian (or a shifted variant).

    ``band`` holds the stencil, potential, perturbation diagonal, and (for
    radiation closures) the boundary rows of ``H - lam``.  A low-rank
    projector term ``P0 = weight * sum_i psi_i psi_i^T`` is kept factored in
    ``projector_vecs`` and folded into products and solves on demand; its
    contribution is masked off the radiation rows so closure equations stay
    pure.

    ``kind_tag`` is one of ``H``, ``Hbar``, ``HplusW``, ``HbarPlusW``.
    """

    band: BandMatrix
    grid: Grid1D
    model: ModelSpec
    bc: object
    kind_tag: str
    modes: Optional[tuple[tuple[int, str], ...]] = None
    projector_vecs: Optional[np.ndarray] = None
    bc_rows: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))

    @property
    def weight(self) -> float:
        """Quadrature weight of the discrete inner product <u,v> = weight * sum(uv)."""
        return self.grid.h

    @property
    def n_modes(self) -> int:
        return 1 if self.modes is None else len(self.modes)

    @property
    def n_total(self) -> int:
        return self.band.n

    @property
    def nz(self) -> int:
        return self.grid.n_points

    @property
    def boundary_depth(self) -> int:
        """Rows per end whose stencil is truncated by the box (per mode)."""
        return 2 if self.model.kind == FOURTH_ORDER_LINE else 1

    def edge_rows(self, depth: Optional[int] = None) -> np.ndarray:
        """Flat indices of the outermost ``depth`` node layers at both ends."""
        d = self.boundary_depth if depth is None else depth
        nm = self.n_modes
        layers = list(range(d)) + list(range(self.nz - d, self.nz))
        idx = [iz * nm + a for iz in layers for a in range(nm)]
        return np.array(sorted(set(idx)), dtype=int)

    def inner(self, u: np.ndarray, v: np.ndarray) -> complex | float:
        return self.weight * np.vdot(u, v)

    def norm(self, u: np.ndarray) -> float:
        return math.sqrt(self.weight) * float(np.linalg.norm(u))

    def apply(self, v: np.ndarray) -> np.ndarray:
        y = self.band.matvec(v)
        if self.projector_vecs is not None:
            overlap = self.weight * (self.projector_vecs @ v)
            contrib = self.projector_vecs.T @ overlap
            if self.bc_rows.size:
                contrib[self.bc_rows] = 0
            y = y + contrib
        return y

    def factorize(self):
        """LU of the full matrix (banded part plus masked projector term).

        With a projector the banded part alone is near-singular at the very
        spectral points we solve at, so the bordered factorization is used;
        Woodbury would pivot on the singular part first and lose everything.
        """
        if self.projector_vecs is None:
            return BandedLU(self.band)
        dtype = self.band.data.dtype
        left = (self.weight * self.projector_vecs.T).astype(dtype)
        if self.bc_rows.size:
            left[self.bc_rows, :] = 0
        right = self.projector_vecs.T.astype(dtype)
        return BorderedLU(self.band, left, right)

    def symmetry_defect(self) -> float:
        return self.band.symmetry_defect()

    def mode_block(self, a: int) -> tuple[np.ndarray, np.ndarray]:
        """Diagonal and superdiagonal of angular mode ``a``'s tridiagonal block.

        Only meaningful while modes are uncoupled (no theta-dependent W).
        """
        if self.modes is None:
            raise ConfigError("line operator has no mode blocks")
        nm = self.n_modes
        diag = self.band.data[self.band.kb, a::nm].copy()
        sup = self.band.data[self.band.kb - nm, a + nm :: nm].copy()
        return diag, sup


def _line_band(grid: Grid1D, v_diag: np.ndarray) -> BandMatrix:
    n, h = grid.n_points, grid.h
    band = BandMatrix(n, 2)
    band.set_diagonal(0, 6.0 / h**4 + v_diag)
    for d in (-1, 1):
        band.set_diagonal(d, np.full(n - 1, -4.0 / h**4))
    for d in (-2, 2):
        band.set_diagonal(d, np.full(n - 2, 1.0 / h**4))
    return band


def _cylinder_band(grid: Grid1D, v_diag: np.ndarray, modes) -> BandMatrix:
    nz, h = grid.n_points, grid.h
    nm = len(modes)
    band = BandMatrix(nz * nm, nm)
    jsq = np.array([j * j for j, _ in modes], dtype=float)
    diag = (2.0 / h**2 + v_diag)[:, None] + jsq[None, :]
    band.set_diagonal(0, diag.ravel())
    off = np.full((nz - 1) * nm, -1.0 / h**2)
    band.set_diagonal(nm, off)
    band.set_diagonal(-nm, off)
    return band


def line_radiation_roots(lam: float, h: float, sign: int) -> dict:
    """Characteristic roots of the discrete recurrence ``(rho-1)^4 = lam h^4 rho^2``.

    The quartic factors into ``rho^2 - (2 +- mu^2 h^2) rho + 1 = 0`` with
    ``mu = lam^(1/4)``.  Returns the root pairs admissible at the right end
    (bounded or outgoing as the index grows) and at the left end, on the
    requested branch.
    """
    mu = lam**0.25
    t = mu * mu * h * h
    if t >= 4.0:
        raise ConfigError(f"grid too coarse for radiation closure: mu^2 h^2 = {t:.3g} >= 4")
    # evanescent pair: real roots of rho^2 - (2+t) rho + 1 = 0
    b = 2.0 + t
    rho_ev = (b - math.sqrt(b * b - 4.0)) / 2.0
    # propagating pair: unit-modulus roots of rho^2 - (2-t) rho + 1 = 0
    c = 1.0 - t / 2.0
    s = math.sqrt(max(0.0, 1.0 - c * c))
    rho_pr = complex(c, sign * s)
    return {
        "right": (rho_ev, rho_pr),
        "left": (1.0 / rho_ev, rho_pr.conjugate()),
        "mu": mu,
    }


def cylinder_radiation_roots(lam: float, j: int, h: float, sign: int) -> tuple[complex, complex]:
    """Right- and left-admissible roots of ``rho + 1/rho = 2 - (lam - j^2) h^2``.

    Open channels (``lam > j^2``) carry an outgoing unit-modulus root; closed
    channels a decaying real root.  Exactly at a threshold no closure exists.
    """
    tau = (lam - j * j) * h * h
    if abs(lam - j * j) <= 1e-12 * max(1.0, abs(lam)):
        raise ConfigError(f"energy lam={lam} sits at the threshold of channel j={j}")
    if tau > 0:
        if tau >= 4.0:
            raise ConfigError(f"grid too coarse for channel j={j}: (lam - j^2) h^2 >= 4")
        c = 1.0 - tau / 2.0
        s = math.sqrt(max(0.0, 1.0 - c * c))
        rho = complex(c, sign * s)
        return rho, rho.conjugate()
    b = 2.0 - tau
    rho = (b - math.sqrt(b * b - 4.0)) / 2.0
    return complex(rho), complex(1.0 / rho)


def _install_line_radiation_rows(band: BandMatrix, lam: float, h: float, sign: int) -> np.ndarray:
    roots = line_radiation_roots(lam, h, sign)
    n = band.n
    # Scaled to the interior row magnitude: the annihilators' rejection of
    # inadmissible modes shrinks as h^2, and unscaled rows would push the
    # assembled system's condition number to h^-6.
    scale = 1.0 / h**4

    def annihilator(pair):
        ra, rb = pair
        return scale * np.array([ra * rb, -(ra + rb), 1.0], dtype=complex)

    right = annihilator(roots["right"])
    left = annihilator(roots["left"])
    band.set_row(0, [0, 1, 2], left)
    band.set_row(1, [1, 2, 3], left)
    band.set_row(n - 2, [n - 4, n - 3, n - 2], right)
    band.set_row(n - 1, [n - 3, n - 2, n - 1], right)
    return np.array([0, 1, n - 2, n - 1], dtype=int)


def _install_cylinder_radiation_rows(band: BandMatrix, modes, nz: int, lam: float, h: float, sign: int) -> np.ndarray:
    nm = len(modes)
    rows = []
    scale = 1.0 / h**2  # match the interior row magnitude (see the line rows)
    for a, (j, _) in enumerate(modes):
        rho_right, rho_left = cylinder_radiation_roots(lam, j, h, sign)
        top = a
        band.set_row(top, [top, nm + a], [-scale * rho_left, scale])
        bot = (nz - 1) * nm + a
        band.set_row(bot, [(nz - 2) * nm + a, bot], [-scale * rho_right, scale])
        rows += [top, bot]
    return np.array(sorted(rows), dtype=int)


def build_operator(model: ModelSpec, grid: Grid1D, bc) -> DiscreteOperator:
    """Assemble the discrete Hamiltonian for ``model`` on ``grid`` under ``bc``.

    With a :class:`Radiation` closure the matrix realizes ``H - lam`` with
    outgoing/evanescent boundary rows on the chosen branch; with
    :class:`Dirichlet` it realizes ``H`` and is exactly symmetric.
    """
    if model.potential.is_even(grid) and not grid.is_symmetric:
        raise GridError("even potential requires a grid symmetric about 0")
    _check_decay(model.potential, grid)
    v = np.asarray(model.potential.sample(grid.points), dtype=float)

    if model.kind == FOURTH_ORDER_LINE:
        if grid.n_points < 16:
            raise GridError("fourth-order stencil needs at least 16 points")
        band = _line_band(grid, v)
        modes = None
    else:
        modes = build_modes(model)
        band = _cylinder_band(grid, v, modes)

    op = DiscreteOperator(band=band, grid=grid, model=model, bc=Dirichlet(), kind_tag="H", modes=modes)
    if isinstance(bc, Radiation):
        return with_radiation(op, bc.lam, bc.sign)
    if not isinstance(bc, Dirichlet):
        raise ConfigError(f"unknown boundary condition {bc!r}")
    return op


def with_radiation(op: DiscreteOperator, lam: float, sign: int) -> DiscreteOperator:
    """Radiation-closed realization of ``op - lam`` on the ``sign`` branch.

    Keeps the operator's perturbation diagonal and projector term; only the
    boundary rows and the energy shift change.
    """
    bc = Radiation(lam, sign)  # validates lam > 0 and sign
    band = op.band.astype(complex)
    band.add_diagonal(0, np.full(band.n, -lam))
    if op.model.kind == FOURTH_ORDER_LINE:
        rows = _install_line_radiation_rows(band, lam, op.grid.h, sign)
    else:
        rows = _install_cylinder_radiation_rows(band, op.modes, op.grid.n_points, lam, op.grid.h, sign)
    return DiscreteOperator(
        band=band,
        grid=op.grid,
        model=op.model,
        bc=bc,
        kind_tag=op.kind_tag,
        modes=op.modes,
        projector_vecs=op.projector_vecs,
        bc_rows=rows,
    )


def multiplication_field(op: DiscreteOperator, basis: PerturbationBasis, coeffs) -> np.ndarray:
    """Pointwise field of ``sum_k c_k W_k`` in the operator's own layout.

    Line models get the diagonal (n,); cylinder models get the z-indexed
    family of angular Galerkin blocks (nz, n_modes, n_modes), computed by
    exact trigonometric quadrature.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (basis.p,):
        raise DimensionMismatch(f"need {basis.p} coefficients, got shape {coeffs.shape}")
    if not basis.is_real:
        raise BasisError("perturbation basis must be real-valued")
    el = basis.elements.real if np.iscomplexobj(basis.elements) else basis.elements

    if op.model.kind == FOURTH_ORDER_LINE:
        if el.ndim != 2 or el.shape[1] != op.n_total:
            raise DimensionMismatch(
                f"line basis elements must have {op.n_total} values, got {el.shape[1:]}"
            )
        return el.T @ coeffs

    theta, w = theta_nodes(op.model)
    if el.ndim != 3 or el.shape[1] != op.nz or el.shape[2] != theta.size:
        raise DimensionMismatch(
            f"cylinder basis elements must be ({op.nz}, {theta.size}) fields, got {el.shape[1:]}"
        )
    total = np.tensordot(coeffs, el, axes=(0, 0))  # (nz, ntheta)
    e = angular_functions(op.modes, theta)  # (nm, ntheta)
    return np.einsum("aq,zq,bq->zab", e, w * total, e, optimize=True)


def apply_multiplication(op: DiscreteOperator, fld: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Apply a multiplication field from :func:`multiplication_field` to a vector."""
    if op.model.kind == FOURTH_ORDER_LINE:
        return (v.T * fld).T
    nm = op.n_modes
    vv = v.reshape(op.nz, nm, *v.shape[1:])
    out = np.einsum("zab,zb...->za...", fld, vv)
    return out.reshape(v.shape)


def apply_field(op: DiscreteOperator, fld: np.ndarray) -> DiscreteOperator:
    """Return ``op + fld`` for a multiplication field in the operator's layout.

    ``fld`` is a diagonal (n,) on the line or z-indexed angular blocks
    (nz, n_modes, n_modes) on cylinders, as produced by
    :func:`multiplication_field`.  The band is copied, never mutated in
    place, and boundary-closure rows are left untouched (the closure
    equation is not a PDE row).
    """
    fld = np.asarray(fld)
    band = op.band.copy()
    bc_mask = np.zeros(band.n, dtype=bool)
    if op.bc_rows.size:
        bc_mask[op.bc_rows] = True

    if op.model.kind == FOURTH_ORDER_LINE:
        if fld.shape != (op.n_total,):
            raise DimensionMismatch(f"line field must have shape ({op.n_total},), got {fld.shape}")
        add = np.where(bc_mask, 0.0, fld)
        band.add_diagonal(0, add.astype(band.data.dtype))
    else:
        nm = op.n_modes
        if fld.shape != (op.nz, nm, nm):
            raise DimensionMismatch(
                f"cylinder field must have shape ({op.nz}, {nm}, {nm}), got {fld.shape}"
            )
        kb = band.kb
        for a in range(nm):
            for b in range(nm):
                col_vals = fld[:, a, b].astype(band.data.dtype).copy()
                rows = np.arange(op.nz) * nm + a
                col_vals[bc_mask[rows]] = 0
                band.data[kb + a - b, b::nm] += col_vals

    tag = {"H": "HplusW", "Hbar": "HbarPlusW"}.get(op.kind_tag, op.kind_tag)
    return DiscreteOperator(
        band=band,
        grid=op.grid,
        model=op.model,
        bc=op.bc,
        kind_tag=tag,
        modes=op.modes,
        projector_vecs=op.projector_vecs,
        bc_rows=op.bc_rows.copy(),
    )


def apply_perturbation(op: DiscreteOperator, basis: PerturbationBasis, coeffs) -> DiscreteOperator:
    """Return ``op + sum_k c_k W_k`` as a new operator.

    The perturbation acts as multiplication; under Dirichlet closure symmetry
    is preserved exactly.
    """
    return apply_field(op, multiplication_field(op, basis, coeffs))


def bump_basis(grid: Grid1D, centers: Sequence[float], width: float, amplitude: float = 1.0) -> PerturbationBasis:
    """Gaussian bumps ``amplitude * exp(-((x-c)/width)^2)`` on the line grid."""
    x = grid.points
    els = np.stack([amplitude * np.exp(-(((x - c) / width) ** 2)) for c in centers])
    labels = [f"bump(c={c:g},w={width:g})" for c in centers]
    return PerturbationBasis(elements=els, labels=labels)


def cylinder_bump_basis(
    model: ModelSpec,
    grid: Grid1D,
    specs: Sequence[tuple[float, float, str, int, float]],
) -> PerturbationBasis:
    """Separable bumps ``amp * exp(-((z-c)/w)^2) * f(theta)`` on a cylinder model.

    Each spec is ``(center, width, angular, j, amplitude)`` with ``angular``
    one of ``const``, ``cos``, ``sin`` (frequency ``j``).
    """
    theta, _ = theta_nodes(model)
    z = grid.points
    els = []
    labels = []
    for center, width, angular, j, amp in specs:
        prof = amp * np.exp(-(((z - center) / width) ** 2))
        if angular == "const":
            ang = np.ones_like(theta)
        elif angular == "cos":
            ang = np.cos(j * theta)
        elif angular == "sin":
            ang = np.sin(j * theta)
        else:
            raise BasisError(f"unknown angular factor {angular!r}")
        els.append(np.outer(prof, ang))
        labels.append(f"bump(c={center:g},w={width:g})*{angular}{j if angular != 'const' else ''}")
    return PerturbationBasis(elements=np.stack(els), labels=labels)
