"""Solving, tracing, and probing the persistence set of an embedded eigenvalue.

The first-order map vanishes on a manifold of perturbation coefficients whose
codimension equals the number of map components: the density rank m for a
simple eigenvalue, m plus multiplicity minus one for a degenerate one.  This
module splits coefficient space into tangent and normal blocks of that map,
corrects tangent predictions by Gauss-Newton in the normal block, recovers
the perturbed eigenvector from one resolvent solve, and certifies the result
by direct residuals.  It also builds perturbations with an exactly known
persistent eigenpair out of a compactly supported displacement, the converse
tool: there the eigenpair is algebraic and the solvers are only verifiers.

Conventions match the rest of the package: real coefficient vectors, grid
inner products carry the mesh weight, and the outgoing branch is used for
every boundary-value solve.
"""

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .boundary_resolvent import (
    RADIATION_BC,
    BoundaryResolvent,
    eigenvalue_criterion,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    LeftWindow,
    NoConvergence,
    NotOrthogonal,
    RankDeficient,
    SupportViolation,
    ZeroDivisor,
)
from .fermi_frame import (
    FermiFrame,
    fermi_map,
    solve_lambda,
    _leading_vectors,
)
from .operator_lab import (
    FOURTH_ORDER_LINE,
    DiscreteOperator,
    PerturbationBasis,
    apply_field,
    apply_multiplication,
    multiplication_field,
    theta_nodes,
)
from .spectral_core import SpectralData

__all__ = [
    "SplitBasis",
    "ManifoldPoint",
    "Chain",
    "ConstructedW",
    "ProbeRow",
    "ProbeReport",
    "split",
    "chart_radius",
    "solve_eta",
    "trace_manifold",
    "chain_table",
    "eigenvector_formula",
    "eigenpair_residual",
    "construct_persistent_w",
    "off_manifold_probe",
]


@dataclass(eq=False)
class SplitBasis:
    """Orthogonal splitting of coefficient space against the first-order map.

    ``kernel_block`` rows span the tangent directions (map kernel),
    ``normal_block`` rows the complement on which the map is invertible;
    both come from one SVD of the Jacobian, so the rows are orthonormal.
    """

    kernel_block: np.ndarray
    normal_block: np.ndarray
    codim: int
    sigma_max: float
    sigma_min: float
    jacobian: np.ndarray

    @property
    def p(self) -> int:
        return self.kernel_block.shape[1]

    @property
    def kernel_dim(self) -> int:
        return self.kernel_block.shape[0]


def split(jacobian: np.ndarray, *, threshold: float = 1e-8) -> SplitBasis:
    """Split coefficient space into the kernel and a complement of the map.

    The Jacobian rows are the map components, columns the basis elements;
    right singular vectors below ``threshold`` times the top singular value
    span the kernel.  The expected codimension is the row count, so fewer
    large singular values mean the surjectivity assumption failed on this
    basis.
    """
    jac = np.asarray(jacobian, dtype=float)
    if jac.ndim != 2:
        raise DimensionMismatch(f"jacobian must be 2-d, got shape {jac.shape}")
    codim, p = jac.shape
    if p < codim:
        raise RankDeficient(
            f"{p} basis elements cannot span {codim} independent map components"
        )
    _, s, vh = np.linalg.svd(jac, full_matrices=True)
    rank = int(np.sum(s >= threshold * s[0])) if s[0] > 0 else 0
    if rank < codim:
        raise RankDeficient(
            f"first-order map has rank {rank} on this basis, expected {codim}"
        )
    return SplitBasis(
        kernel_block=vh[codim:].copy(),
        normal_block=vh[:codim].copy(),
        codim=codim,
        sigma_max=float(s[0]),
        sigma_min=float(s[codim - 1]),
        jacobian=jac.copy(),
    )


def chart_radius(sb: SplitBasis) -> float:
    """Default tangent radius for one corrector chart, 1e-2 over the map norm."""
    return 1e-2 / sb.sigma_max


@dataclass(eq=False)
class ManifoldPoint:
    """One converged point of the persistence set with its certificates."""

    coeffs: np.ndarray
    lam: float
    eigvec: np.ndarray
    fermi_residual: float
    eigen_residual: float
    xi: np.ndarray
    eta: np.ndarray
    edge_amplitude: float

    def summary_dict(self) -> dict:
        return {
            "coeffs": [float(c) for c in self.coeffs],
            "lambda": self.lam,
            "fermi_residual": self.fermi_residual,
            "eigen_residual": self.eigen_residual,
            "xi": [float(c) for c in self.xi],
            "eta": [float(c) for c in self.eta],
            "edge_amplitude": self.edge_amplitude,
        }


def eigenpair_residual(
    op: DiscreteOperator,
    field: Optional[np.ndarray],
    lam: float,
    psi: np.ndarray,
) -> float:
    """Relative residual of ``(H + W - lam) psi`` in the grid norm.

    Accepts the plain operator or the projected one; the rank-one projector
    contribution is removed so the residual always refers to ``H + W``.

    Rows whose stencil reaches past the box edge are excluded: there the
    band compares the tail of ``psi`` against the zero extension, and any
    nonzero tail, however physical, is amplified by the leading stencil
    weight (order ``h**-4`` on the line).  The interior rows are the
    eigenpair statement; the clipped rows only measure the truncation.
    """
    r = op.apply(psi) - lam * psi
    if field is not None:
        r = r + apply_multiplication(op, field, psi)
    if op.projector_vecs is not None:
        overlap = op.weight * (op.projector_vecs @ psi)
        contrib = op.projector_vecs.T @ overlap
        if op.bc_rows.size:
            contrib[op.bc_rows] = 0
        r = r - contrib
    r[op.edge_rows()] = 0
    return op.norm(r) / op.norm(psi)


def eigenvector_formula(
    spec: SpectralData,
    op: DiscreteOperator,
    field: Optional[np.ndarray],
    lam: float,
    *,
    angle: float = 0.0,
) -> np.ndarray:
    """Candidate eigenvector from one outgoing resolvent solve.

    Returns the boundary value of the perturbed projected resolvent applied
    to the leading eigenvector, phase-aligned so its overlap with that
    eigenvector is real positive, and normalized in the grid norm.  On the
    persistence set the result is a genuine eigenvector of ``H + W`` and its
    imaginary part is pure noise; off the set the imaginary part is the
    radiating remainder.
    """
    psi1 = _leading_vectors(spec, angle)[0]
    target = apply_field(op, field) if field is not None else op
    br = BoundaryResolvent(target, lam, 1, RADIATION_BC)
    psi = br.resolve(psi1.astype(complex))
    c = complex(op.inner(psi1, psi))
    if abs(c) < 1e-9:
        c = complex(psi[int(np.argmax(np.abs(psi)))])
    psi = psi * (np.conj(c) / abs(c))
    return psi / op.norm(psi)


def _coeffs_of(sb: SplitBasis, xi: np.ndarray, eta: np.ndarray) -> np.ndarray:
    return xi @ sb.kernel_block + eta @ sb.normal_block


def solve_eta(
    frame: FermiFrame,
    spec: SpectralData,
    basis: PerturbationBasis,
    sb: SplitBasis,
    xi,
    *,
    eta0=None,
    tol_manifold: float = 1e-10,
    tol_eig: float = 1e-7,
    max_iter: int = 30,
    angle: float = 0.0,
    radius: Optional[float] = None,
) -> ManifoldPoint:
    """Correct a tangent prediction to a point where the map vanishes.

    Gauss-Newton in the normal coordinates, preconditioned by the analytic
    first-order matrix; the matrix is refreshed by centered differences only
    when a step contracts the residual by less than half.  The converged
    point carries the recovered eigenvector and both residual certificates.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (sb.kernel_dim,):
        raise DimensionMismatch(f"xi must have length {sb.kernel_dim}, got {xi.shape}")
    if radius is not None and float(np.linalg.norm(xi)) > radius:
        raise ConfigError(
            f"tangent coordinates of size {np.linalg.norm(xi):.3e} exceed the "
            f"chart radius {radius:.3e}"
        )
    eta = np.zeros(sb.codim) if eta0 is None else np.asarray(eta0, dtype=float).copy()
    if eta.shape != (sb.codim,):
        raise DimensionMismatch(f"eta0 must have length {sb.codim}, got {eta.shape}")

    def evaluate(et):
        coeffs = _coeffs_of(sb, xi, et)
        try:
            ls = solve_lambda(spec, frame.base, basis, coeffs, angle=angle, frame=frame)
        except NoConvergence as exc:
            raise LeftWindow(
                f"perturbed eigenvalue not found in the window at "
                f"|xi| = {np.linalg.norm(xi):.3e}, "
                f"|eta| = {np.linalg.norm(et):.3e}: {exc}"
            ) from exc
        f = fermi_map(frame, spec, basis, coeffs, angle=angle, lambda_solve=ls)
        return f, ls, coeffs

    def fd_jacobian(et, h=1e-6):
        jac = np.empty((sb.codim, sb.codim))
        for i in range(sb.codim):
            ep = et.copy()
            ep[i] += h
            em = et.copy()
            em[i] -= h
            jac[:, i] = (evaluate(ep)[0] - evaluate(em)[0]) / (2.0 * h)
        return jac

    # analytic first-order matrix restricted to the normal block
    jac_eta = sb.jacobian @ sb.normal_block.T
    fvec, ls, coeffs = evaluate(eta)
    fnorm = float(np.linalg.norm(fvec))
    refreshed = False
    iterations = 0
    while fnorm > tol_manifold:
        if iterations >= max_iter:
            raise NoConvergence(
                f"manifold corrector hit the iteration cap at residual {fnorm:.3e}"
            )
        iterations += 1
        try:
            step = np.linalg.solve(jac_eta, fvec)
        except np.linalg.LinAlgError as exc:
            raise NoConvergence("singular corrector matrix") from exc
        trial = eta - step
        f_t, ls_t, coeffs_t = evaluate(trial)
        fn_t = float(np.linalg.norm(f_t))
        if fn_t <= max(0.5 * fnorm, tol_manifold):
            eta, fvec, fnorm, ls, coeffs = trial, f_t, fn_t, ls_t, coeffs_t
            refreshed = False
            continue
        if not refreshed:
            jac_eta = fd_jacobian(eta)
            refreshed = True
            continue
        if fn_t < fnorm:
            eta, fvec, fnorm, ls, coeffs = trial, f_t, fn_t, ls_t, coeffs_t
            continue
        raise NoConvergence(f"manifold corrector stagnated at residual {fnorm:.3e}")

    wf = multiplication_field(frame.base, basis, coeffs)
    psi_c = eigenvector_formula(spec, frame.base, wf, ls.lambda_of_W, angle=angle)
    psi = psi_c.real.copy()
    psi /= frame.base.norm(psi)
    eig_res = eigenpair_residual(frame.base, wf, ls.lambda_of_W, psi)
    if eig_res > tol_eig:
        raise NoConvergence(
            f"map converged but the recovered eigenpair has residual "
            f"{eig_res:.3e}, above {tol_eig:.1e}"
        )
    edge = frame.base.edge_rows()
    edge_amp = float(np.max(np.abs(psi[edge])) / np.max(np.abs(psi)))
    return ManifoldPoint(
        coeffs=coeffs,
        lam=ls.lambda_of_W,
        eigvec=psi,
        fermi_residual=fnorm,
        eigen_residual=eig_res,
        xi=xi.copy(),
        eta=eta.copy(),
        edge_amplitude=edge_amp,
    )


@dataclass(eq=False)
class Chain:
    """A continuation run; ``completed`` is False when a corrector failed."""

    points: tuple
    completed: bool
    failure: Optional[str]
    direction: np.ndarray
    step_size: float


def trace_manifold(
    frame: FermiFrame,
    spec: SpectralData,
    basis: PerturbationBasis,
    sb: SplitBasis,
    direction,
    steps: int,
    step_size: float,
    *,
    angle: float = 0.0,
    tol_manifold: float = 1e-10,
    tol_eig: float = 1e-7,
    max_iter: int = 30,
) -> Chain:
    """March along a tangent direction with linear prediction and correction.

    ``direction`` is either a coefficient-space vector inside the tangent
    span or tangent coordinates directly.  The chain stops at the first
    corrector failure and is returned partially with the failure recorded.
    """
    d = np.atleast_1d(np.asarray(direction, dtype=float))
    if d.shape == (sb.p,):
        xi_dir = sb.kernel_block @ d
        resid = d - xi_dir @ sb.kernel_block
        dn = float(np.linalg.norm(d))
        if float(np.linalg.norm(resid)) > 1e-8 * max(dn, 1e-300):
            raise ConfigError("direction must lie in the tangent span of the map")
    elif d.shape == (sb.kernel_dim,):
        xi_dir = d
    else:
        raise DimensionMismatch(
            f"direction must have length {sb.p} or {sb.kernel_dim}, got {d.shape}"
        )

    base = solve_eta(
        frame, spec, basis, sb, np.zeros(sb.kernel_dim),
        tol_manifold=tol_manifold, tol_eig=tol_eig, max_iter=max_iter, angle=angle,
    )
    points = []
    eta_prev2 = base.eta
    eta_prev = base.eta
    for k in range(1, steps + 1):
        # linear extrapolation of the two previous corrections
        eta_guess = 2.0 * eta_prev - eta_prev2
        try:
            pt = solve_eta(
                frame, spec, basis, sb, k * step_size * xi_dir,
                eta0=eta_guess, tol_manifold=tol_manifold, tol_eig=tol_eig,
                max_iter=max_iter, angle=angle,
            )
        except (NoConvergence, LeftWindow) as exc:
            return Chain(tuple(points), False, str(exc), d.copy(), step_size)
        points.append(pt)
        eta_prev2, eta_prev = eta_prev, pt.eta
    return Chain(tuple(points), True, None, d.copy(), step_size)


def chain_table(chain: Chain) -> tuple:
    """Header and rows for a plot-ready table of a continuation chain."""
    if chain.points:
        p = chain.points[0].coeffs.shape[0]
    else:
        p = 0
    header = (
        ["step"]
        + [f"coeff_{k + 1}" for k in range(p)]
        + ["lambda", "fermi_residual", "eigen_residual"]
    )
    rows = []
    for k, pt in enumerate(chain.points, start=1):
        rows.append(
            [float(k)]
            + [float(c) for c in pt.coeffs]
            + [pt.lam, pt.fermi_residual, pt.eigen_residual]
        )
    return header, rows


@dataclass(eq=False)
class ConstructedW:
    """A perturbation with an algebraically exact persistent eigenpair.

    ``basis`` wraps the perturbation as a one-element family for the map and
    eigenvalue solvers; it is None when the perturbation is identically zero.
    """

    basis: Optional[PerturbationBasis]
    field: np.ndarray
    lam: float
    psi: np.ndarray
    u: np.ndarray
    eigen_residual: float


def _ball_masks(x: np.ndarray, ball, h: float):
    lo, hi = float(ball[0]), float(ball[1])
    if not hi > lo:
        raise ConfigError(f"ball ({lo}, {hi}) is empty")
    inside = (x >= lo - 1e-12) & (x <= hi + 1e-12)
    # two-node margin keeps the stencil image of u inside the ball
    lo_e, hi_e = lo + 2.0 * h, hi - 2.0 * h
    eroded = (x >= lo_e - 1e-12) & (x <= hi_e + 1e-12)
    if not np.any(eroded) or not hi_e > lo_e:
        raise ConfigError(f"ball ({lo}, {hi}) is narrower than the stencil margin")
    # smooth window with all derivatives vanishing at the margin; a sharp
    # cutoff would put a stencil-scale kink into the projected u.  The
    # margin is grid-independent once h is small so the projected u has a
    # continuum limit; the 2h floor only guards very coarse grids.
    margin = max(2.0 * h, 0.05 * (hi - lo))
    radius = 0.5 * (hi - lo) - margin
    t = (x - 0.5 * (lo + hi)) / radius
    window = np.zeros_like(x)
    bulk = np.abs(t) < 1.0
    window[bulk] = np.exp(-1.0 / (1.0 - t[bulk] ** 2))
    return inside, eroded, window


def _project_into_ball(op, vecs, u, keep, tol_orth):
    """Remove eigenvector overlaps with windowed correctors in the ball."""
    correctors = vecs * keep
    overlaps = op.weight * (vecs @ u)
    gram = op.weight * (vecs @ correctors.T)
    try:
        beta = np.linalg.solve(gram, overlaps)
    except np.linalg.LinAlgError as exc:
        raise ZeroDivisor("eigenvectors have no mass inside the ball") from exc
    u = u - beta @ correctors
    res = np.max(np.abs(op.weight * (vecs @ u)))
    if res > tol_orth * max(op.norm(u), 1e-300):
        raise NotOrthogonal(
            f"ball-supported projection left overlap {res:.3e}"
        )
    return u


def construct_persistent_w(
    spec: SpectralData,
    op: DiscreteOperator,
    u,
    ball,
    *,
    project: bool = True,
    tol_orth: float = 1e-12,
    angle: float = 0.0,
) -> ConstructedW:
    """Turn a small compactly supported displacement into a persistent W.

    With ``r = (H - lambda0) u`` the multiplication field ``W = r / (phi0 - u)``
    on the ball satisfies ``(H + W) (phi0 - u) = lambda0 (phi0 - u)`` exactly,
    and orthogonality of ``u`` to the eigenspace keeps the perturbed
    eigenvalue at lambda0.  On a cylinder the displacement must share the
    eigenvector's angular factor, since that factor has nodal lines where the
    quotient would blow up; the division then happens channel-wise in z and
    the field is angle-independent.
    """
    if op.projector_vecs is not None:
        raise ConfigError("pass the plain operator, not the projected one")
    u = np.asarray(u, dtype=float).copy()
    if u.shape != (op.n_total,):
        raise DimensionMismatch(f"u must have shape ({op.n_total},), got {u.shape}")
    vecs = spec.eigvecs
    phi0 = _leading_vectors(spec, angle)[0]
    lam0 = spec.lambda0
    grid = op.grid
    x = grid.points
    scale = float(np.max(np.abs(u)))

    if op.model.kind == FOURTH_ORDER_LINE:
        inside, eroded, keep = _ball_masks(x, ball, grid.h)
        outer = ~eroded
    else:
        inside_z, eroded_z, keep_z = _ball_masks(x, ball, grid.h)
        nm = op.n_modes
        inside = np.repeat(inside_z, nm)
        outer = np.repeat(~eroded_z, nm)
        keep = np.repeat(keep_z, nm)

    if scale > 0 and np.max(np.abs(u[outer])) > 1e-14 * scale:
        raise SupportViolation(
            "u must vanish outside the ball, including a two-node stencil margin"
        )
    u[outer] = 0.0

    overlaps = op.weight * (vecs @ u)
    if not project:
        if np.max(np.abs(overlaps), initial=0.0) > tol_orth * max(op.norm(u), 1e-300):
            raise NotOrthogonal(
                f"u has eigenspace overlap {np.max(np.abs(overlaps)):.3e}; "
                "project it or pass project=True"
            )
    elif scale > 0:
        u = _project_into_ball(op, vecs, u, keep, tol_orth)

    if op.model.kind == FOURTH_ORDER_LINE:
        ref = phi0
        u_ch = u
        ball_sel = inside
    else:
        nm = op.n_modes
        phim = phi0.reshape(op.nz, nm)
        mass = np.linalg.norm(phim, axis=0)
        ch = int(np.argmax(mass))
        u_m = u.reshape(op.nz, nm)
        off = np.delete(u_m, ch, axis=1)
        if np.max(np.abs(off), initial=0.0) > 1e-10 * max(scale, 1e-300):
            raise ZeroDivisor(
                "the eigenvector's angular factor has nodal lines; u must "
                "share that factor for the quotient to exist"
            )
        ref = phim[:, ch]
        u_ch = u_m[:, ch]
        ball_sel = inside_z

    peak = float(np.max(np.abs(ref)))
    if np.min(np.abs(ref[ball_sel])) <= 1e-8 * peak:
        raise ZeroDivisor("the reference eigenfunction vanishes on the ball")
    denom = ref - u_ch
    if np.any(denom[ball_sel] * ref[ball_sel] <= 1e-16 * peak**2):
        raise ZeroDivisor("phi0 - u changes sign on the ball; shrink u")

    residual_u = op.apply(u) - lam0 * u

    if op.model.kind == FOURTH_ORDER_LINE:
        w_line = np.zeros(op.n_total)
        w_line[inside] = residual_u[inside] / denom[inside]
        field = w_line
        element = w_line[None, :]
    else:
        r_m = residual_u.reshape(op.nz, op.n_modes)
        r_off = np.delete(r_m, ch, axis=1)
        if np.max(np.abs(r_off), initial=0.0) > 1e-10 * max(
            np.max(np.abs(r_m)), 1e-300
        ):
            raise ZeroDivisor("operator image of u leaks out of the angular channel")
        w_z = np.zeros(op.nz)
        w_z[ball_sel] = r_m[ball_sel, ch] / denom[ball_sel]
        theta, _ = theta_nodes(op.model)
        element = np.tile(w_z[:, None], (1, theta.size))[None, :, :]
        field = None

    psi = phi0 - u
    if np.max(np.abs(element)) > 0:
        basis = PerturbationBasis(element, labels=("constructed",))
        if field is None:
            field = multiplication_field(op, basis, np.array([1.0]))
    else:
        basis = None
        if field is None:
            field = np.zeros((op.nz, op.n_modes, op.n_modes))
    eig_res = eigenpair_residual(op, field, lam0, psi)
    return ConstructedW(
        basis=basis, field=field, lam=lam0, psi=psi, u=u, eigen_residual=eig_res
    )


@dataclass(frozen=True)
class ProbeRow:
    magnitude: float
    min_gap: float
    lam_at_min: float


@dataclass(eq=False)
class ProbeReport:
    """Criterion gaps over a magnitude ladder; small gap means an eigenvalue."""

    rows: tuple
    lam_grid: np.ndarray
    direction: np.ndarray

    def gaps(self) -> np.ndarray:
        return np.array([r.min_gap for r in self.rows])


def off_manifold_probe(
    frame: FermiFrame,
    spec: SpectralData,
    basis: PerturbationBasis,
    sb: Optional[SplitBasis],
    direction,
    magnitudes: Sequence[float],
    *,
    npoints: int = 21,
    window: Optional[tuple] = None,
    require_normal: bool = True,
) -> ProbeReport:
    """Scan the eigenvalue criterion along a ray of perturbations.

    For each magnitude the reduced-matrix gap is minimized over a lambda
    grid spanning the window (the unperturbed eigenvalue is always included
    as a grid point).  A gap bounded away from zero certifies that no
    embedded eigenvalue survived at that magnitude.
    """
    d = np.asarray(direction, dtype=float)
    if d.shape != (basis.p,):
        raise DimensionMismatch(f"direction must have length {basis.p}, got {d.shape}")
    if require_normal:
        if sb is None:
            raise ConfigError("a splitting is required to validate a normal direction")
        proj = (sb.normal_block @ d) @ sb.normal_block
        dn = float(np.linalg.norm(d))
        if float(np.linalg.norm(d - proj)) > 1e-8 * max(dn, 1e-300):
            raise ConfigError("direction must lie in the normal span of the map")
    lo, hi = window if window is not None else spec.window
    # The resolvent rejects the window endpoints; keep the scan interior.
    pad = 1e-3 * (hi - lo)
    grid = np.linspace(lo + pad, hi - pad, npoints)
    grid = np.unique(np.append(grid, spec.lambda0))
    rows = []
    for c in magnitudes:
        wf = multiplication_field(frame.base, basis, float(c) * d) if c != 0 else None
        gaps = [
            eigenvalue_criterion(
                spec, frame.base, float(lam), w_field=wf, window=(lo, hi)
            ).q_eigengap
            for lam in grid
        ]
        k = int(np.argmin(gaps))
        rows.append(ProbeRow(float(c), float(gaps[k]), float(grid[k])))
    return ProbeReport(rows=tuple(rows), lam_grid=grid, direction=d.copy())
