"""Embedded eigenvalues under perturbation: spectra, outgoing boundary values
of resolvents, spectral densities, Fermi maps, and persistence manifolds for
two model Hamiltonians (a fourth-order operator on a line segment and a
Laplacian on a finite cylinder section).
"""

from . import errors
from .operator_lab import (
    CYLINDER_EVEN_SECTOR,
    CYLINDER_FULL,
    FOURTH_ORDER_LINE,
    Dirichlet,
    DiscreteOperator,
    Grid1D,
    ModelSpec,
    PerturbationBasis,
    Radiation,
    SechPair,
    SechSquaredWell,
    Tabulated,
    apply_perturbation,
    build_operator,
    bump_basis,
    cylinder_bump_basis,
    with_radiation,
)
from .spectral_core import (
    HypothesisReport,
    SpectralData,
    check_hypotheses,
    find_embedded_eigenpairs,
    make_hbar,
)
from .boundary_resolvent import (
    EPS_SEQUENCE_DEFAULT,
    EPSILON_EXTRAPOLATION,
    RADIATION_BC,
    BoundaryResolvent,
    CriterionResult,
    DensityOperator,
    default_probes,
    density,
    density_rank,
    eigenvalue_criterion,
    perturbation_identity_residual,
    q_inversion_margin,
    reduced_q,
    resolve,
)
from .fermi_frame import (
    W_EXACT_MAX,
    FermiFrame,
    LambdaSolve,
    base_solve,
    build_frame,
    fermi_jacobian,
    fermi_map,
    shifted_solve,
    solve_lambda,
)
from .persistence_solver import (
    Chain,
    ConstructedW,
    ManifoldPoint,
    ProbeReport,
    ProbeRow,
    SplitBasis,
    chain_table,
    chart_radius,
    construct_persistent_w,
    eigenpair_residual,
    eigenvector_formula,
    off_manifold_probe,
    solve_eta,
    split,
    trace_manifold,
)

__version__ = "0.1.0"
