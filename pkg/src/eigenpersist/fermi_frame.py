"""Density frames, the scalar eigenvalue equation, and the first-order map.

The persistence analysis runs through three pieces assembled here:

* a frame for the density's range at the unperturbed energy: probes
  ``phi_j`` with images ``f_j = delta(Hbar - lambda0) phi_j`` and duals
  ``g_l`` biorthogonal to the ``f_j``;
* the scalar equation ``a(lambda, W) = 1`` for the perturbed eigenvalue
  ``lambda(W)``, where ``a`` is the principal-value (real) part of the
  reduced resolvent matrix element of the leading eigenvector;
* the map ``F(W)`` whose zero set is the persistence manifold: the ``m``
  density components ``<g_j, delta(Hbar + W - lambda(W)) psi_1>`` plus, for a
  degenerate eigenvalue of multiplicity ``n``, the ``n - 1`` solvability
  components ``<psi_i, A(lambda(W), W) psi_1>``, together with its analytic
  Jacobian at ``W = 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .boundary_resolvent import (
    RADIATION_BC,
    BoundaryResolvent,
    DensityOperator,
    default_probes,
    density_rank,
)
from .errors import (
    ConfigError,
    DimensionMismatch,
    NoConvergence,
    RankCollapse,
    SolveFailure,
)
from .operator_lab import (
    DiscreteOperator,
    PerturbationBasis,
    apply_field,
    apply_multiplication,
    multiplication_field,
)
from .spectral_core import SpectralData

__all__ = [
    "FermiFrame",
    "LambdaSolve",
    "W_EXACT_MAX",
    "build_frame",
    "base_solve",
    "shifted_solve",
    "solve_lambda",
    "fermi_map",
    "fermi_jacobian",
]

# Largest pointwise perturbation treated by exact increments on the frozen
# unperturbed factorization.  Below this the band's h**-4 diagonal would
# quantize the perturbation away (its entries round at ~1e-8), so assembling
# W into the band is the less accurate route; above it the Neumann series
# loses accuracy faster than assembly loses digits.
W_EXACT_MAX = 3e-3


def _leading_vectors(spec: SpectralData, angle: float) -> np.ndarray:
    """Eigenbasis with the leading vector rotated by ``angle`` in a degenerate pair.

    A degenerate eigenvalue leaves a one-parameter family of normalized
    leading vectors; the angle picks one.  With multiplicity one the angle
    must be zero.
    """
    psi = spec.eigvecs
    if angle == 0.0:
        return psi
    if spec.multiplicity < 2:
        raise ConfigError("rotation angle needs a degenerate eigenspace")
    out = psi.copy()
    c, s = math.cos(angle), math.sin(angle)
    out[0] = c * psi[0] + s * psi[1]
    out[1] = -s * psi[0] + c * psi[1]
    return out


@dataclass(eq=False)
class FermiFrame:
    """Probes, density images, and biorthogonal duals at the unperturbed energy.

    ``probes`` holds the selected ``phi_j`` (one per row), ``densities`` their
    images ``f_j``, and ``duals`` the ``g_l`` solving the Gram system so that
    ``<f_j, g_l> = delta_jl``.  ``resolvent`` keeps the plus-branch evaluator
    the frame was built from; map evaluations reuse its factorization.
    """

    probes: np.ndarray
    densities: np.ndarray
    duals: np.ndarray
    m: int
    lambda0: float
    base: DiscreteOperator
    resolvent: BoundaryResolvent
    selection: np.ndarray
    pivots: np.ndarray

    def biorthogonality_defect(self) -> float:
        """Max deviation of ``<f_j, g_l>`` from the identity."""
        gram = self.base.weight * (self.densities @ self.duals.T)
        return float(np.max(np.abs(gram - np.eye(self.m))))

    def span_residual(self, v: np.ndarray) -> float:
        """Relative distance of ``v`` from the span of the density images."""
        q = np.linalg.qr(self.densities.T)[0]
        rest = v - q @ (q.T @ v)
        return float(np.linalg.norm(rest) / max(np.linalg.norm(v), 1e-300))


def build_frame(
    spec: Optional[SpectralData],
    br: BoundaryResolvent,
    probes: Optional[np.ndarray] = None,
    *,
    m: Optional[int] = None,
    threshold: float = 1e-6,
) -> FermiFrame:
    """Select probes with maximally independent density images and build duals.

    Probes are ranked by pivoted orthogonalization of their weighted images,
    largest pivot first, and the top ``m`` are kept.  The images of real
    probes are real; duals come from the m-by-m Gram system and inherit
    reality.  ``m`` defaults to the density rank measured on the standard
    probe family, independently of the probes supplied here.
    """
    if br.sign != 1:
        br = br.conjugate()
    base = br.base
    if spec is not None and abs(br.lam - spec.lambda0) > 1e-9:
        raise ConfigError(
            f"frame wants the resolvent at lambda0={spec.lambda0:.9g}, "
            f"got lambda={br.lam:.9g}"
        )
    if m is None:
        m, _ = density_rank(DensityOperator(br))
    if probes is None:
        probes = default_probes(base, max(8, m + 3))
    probes = np.asarray(probes, dtype=float)
    if probes.ndim != 2 or probes.shape[1] != base.n_total:
        raise DimensionMismatch(f"probes must be (p, {base.n_total}), got {probes.shape}")

    dop = DensityOperator(br)
    images = np.array([dop.action(p) for p in probes])
    if np.iscomplexobj(images):
        if np.max(np.abs(images.imag)) > 1e-10:
            raise ConfigError("density images of real probes must be real")
        images = images.real

    w = math.sqrt(base.weight)
    _, r, piv = scipy.linalg.qr((w * images).T, mode="economic", pivoting=True)
    pivots = np.abs(np.diag(r))
    independent = int(np.sum(pivots >= threshold * pivots[0])) if pivots[0] > 0 else 0
    if independent < m:
        raise RankCollapse(
            f"only {independent} of {probes.shape[0]} probes give independent "
            f"density images, need {m}"
        )
    sel = np.sort(piv[:m])
    f = images[sel]
    gram = base.weight * (f @ f.T)
    duals = np.linalg.solve(gram, f)
    return FermiFrame(
        probes=probes[sel],
        densities=f,
        duals=duals,
        m=m,
        lambda0=br.lam,
        base=base,
        resolvent=br,
        selection=sel,
        pivots=pivots,
    )


@dataclass(frozen=True)
class LambdaSolve:
    """Solution record of the scalar equation ``a(lambda, W) = 1``."""

    lambda_of_W: float
    iterations: int
    a_value: float
    derivative_check: float

    def summary_dict(self) -> dict:
        return {
            "lambda_of_W": self.lambda_of_W,
            "iterations": self.iterations,
            "a_value": self.a_value,
            "derivative_check": self.derivative_check,
        }


def base_solve(rad_op: DiscreteOperator, lu, b: np.ndarray, refine: int = 2) -> np.ndarray:
    """Solve the assembled radiation system with iterative refinement."""
    u = lu.solve(b)
    for _ in range(refine):
        u = u + lu.solve(b - rad_op.apply(u))
    return u


def shifted_solve(
    rad_op: DiscreteOperator,
    lu,
    b: np.ndarray,
    s: float = 0.0,
    dfld: Optional[np.ndarray] = None,
    order: int = 8,
    base: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Solve ``(A - s*M + dW) u = b`` on a fixed factorization of ``A``.

    ``A`` is an assembled radiation system, ``M`` the identity restricted to
    its interior rows, ``dW`` a small multiplication field on the interior.
    Reassembling the band cannot resolve shifts this small: the stencil
    diagonal is of size ``h**-4``, so adding ``-s`` to it rounds away below
    ``s ~ 1e-8``, and even residual corrections computed through the full
    matrix carry ~1e-10 of matvec round-off noise that jumps around as the
    inputs move.  The Neumann series off a frozen base solve avoids both:
    after the base, every operation is a small-scale product or a
    factorization solve, so the result is smooth in ``s`` and ``dfld`` down
    to round-off.  The series needs ``|s|`` and ``dfld`` well inside the
    frozen factorization's trust region; outside it the terms grow and a
    :class:`SolveFailure` is raised.
    """
    if base is None:
        base = base_solve(rad_op, lu, b)
    if s == 0.0 and dfld is None:
        return base
    bc = rad_op.bc_rows
    u = base
    term = base
    first = last = float(np.linalg.norm(base))
    for _ in range(order):
        w = s * term if s != 0.0 else np.zeros_like(term)
        if dfld is not None:
            w = w - apply_multiplication(rad_op, dfld, term)
        if bc.size:
            w[bc] = 0
        term = lu.solve(w)
        u = u + term
        last = float(np.linalg.norm(term))
    if not math.isfinite(last) or last > 0.5 * first:
        raise SolveFailure(
            "shift or perturbation increment too large for the frozen "
            "factorization; refactorize closer to the target"
        )
    return u


def _field_amplitude(fld: np.ndarray) -> float:
    """Largest pointwise magnitude of a multiplication field, any layout."""
    return float(np.max(np.abs(fld))) if fld.size else 0.0


def _a_series(rad_op, lu, b, psi1, weight, order):
    """Taylor coefficients of ``a(lam_c + s)`` in ``s`` and their trust radius.

    ``a(s) = weight * Re <psi1, (A - s*M)^{-1} b> = sum_k alpha_k s^k`` with
    ``alpha_k = weight * Re <psi1, (LU^{-1} M)^k u0>``.  Freezing the
    coefficients makes ``a`` a polynomial, smooth in ``s`` to round-off,
    which is what lets the eigenvalue equation be solved to 1e-12 when every
    reassembly of the band would quantize ``lam`` at ~1e-8.  The returned
    radius bounds ``|s|`` where the truncated series is trustworthy; it is a
    quarter of the reciprocal of the observed term growth rate.
    """
    bc = rad_op.bc_rows
    term = base_solve(rad_op, lu, b)
    coeffs = [weight * float(np.real(psi1 @ term))]
    growth = 0.0
    prev = float(np.linalg.norm(term))
    for _ in range(order):
        w = term.copy()
        if bc.size:
            w[bc] = 0
        term = lu.solve(w)
        nd = float(np.linalg.norm(term))
        growth = max(growth, nd / max(prev, 1e-300))
        prev = nd
        coeffs.append(weight * float(np.real(psi1 @ term)))
    return np.array(coeffs), 0.25 / max(growth, 1e-300)


def solve_lambda(
    spec: SpectralData,
    op: DiscreteOperator,
    basis: PerturbationBasis,
    coeffs: Sequence[float],
    *,
    guess: Optional[float] = None,
    window: Optional[tuple] = None,
    tol_newton: float = 1e-12,
    max_iter: int = 50,
    order: int = 8,
    angle: float = 0.0,
    frame: Optional["FermiFrame"] = None,
) -> LambdaSolve:
    """Solve ``a(lambda, W) = 1`` for the perturbed eigenvalue.

    ``a`` is the real part of ``<psi_1, (Hbar + W - lambda - i0)^{-1} psi_1>``;
    near the unperturbed point it is increasing with unit slope.  The system
    is factored at a reference energy, ``a`` is expanded as a polynomial in
    the shift (:func:`_a_series`), and safeguarded Newton runs on the
    polynomial; the factorization is refreshed whenever the root lands
    outside the trust radius of the expansion, walking toward remote roots.
    Exhausting the refresh budget or squeezing the bracket to nothing raises
    :class:`NoConvergence`.

    A perturbation below :data:`W_EXACT_MAX` is quantized away by assembly
    (the band diagonal is of size ``h**-4``), so it is solved on the
    unperturbed factorization with ``W`` applied through exact residual
    increments, which keeps the eigenvalue smooth in the coefficients; the
    perturbed eigenvalue then cannot leave a small neighborhood of the
    unperturbed one, so no walk is needed.  ``frame``, when given, supplies
    that factorization instead of a rebuild.
    """
    lo, hi = spec.window if window is None else window
    lam = spec.lambda0 if guess is None else float(guess)
    if not lo < lam < hi:
        raise ConfigError(f"initial guess {lam:g} outside the window ({lo:g}, {hi:g})")
    wf = multiplication_field(op, basis, np.asarray(coeffs, dtype=float))
    wmax = _field_amplitude(wf)
    psi1 = _leading_vectors(spec, angle)[0]

    if wmax > W_EXACT_MAX:
        return _solve_lambda_assembled(
            spec, op, apply_field(op, wf), psi1, lam, lo, hi,
            tol_newton, max_iter, order,
        )
    return _solve_lambda_exact(
        spec, op, wf if wmax > 0 else None, psi1, lam, lo, hi,
        tol_newton, max_iter, order, frame,
    )


def _solve_lambda_assembled(
    spec, op, opw, psi1, lam, lo, hi, tol_newton, max_iter, order
) -> LambdaSolve:
    """Polynomial-expansion Newton walk on the assembled perturbed system."""
    # beyond this shift the frozen closure rows stop representing lambda
    trust = 1e-6
    iterations = 0
    for _ in range(20):
        br = BoundaryResolvent(opw, lam, 1, RADIATION_BC)
        rad, lu = br._rad_op, br._rad_lu
        b = psi1.astype(rad.band.data.dtype).copy()
        if rad.bc_rows.size:
            b[rad.bc_rows] = 0
        alpha, radius = _a_series(rad, lu, b, psi1, op.weight, order)
        dalpha = alpha[1:] * np.arange(1, order + 1)
        smin = max(lo - lam, -radius)
        smax = min(hi - lam, radius)
        s = 0.0
        a = alpha[0]
        stalled = False
        while abs(a - 1.0) > tol_newton:
            iterations += 1
            if iterations > max_iter:
                raise NoConvergence(
                    f"eigenvalue equation not solved in {max_iter} steps, "
                    f"|a-1|={abs(a - 1.0):.3e}"
                )
            # a is increasing: a > 1 means s is above the root
            if a > 1.0:
                smax = min(smax, s)
            else:
                smin = max(smin, s)
            deriv = float(np.polyval(dalpha[::-1], s))
            nxt = s - (a - 1.0) / deriv if deriv > 0 else math.nan
            if not (smin < nxt < smax):
                nxt = 0.5 * (smin + smax)
                if smax - smin < 1e-15:
                    stalled = True
                    break
            s = nxt
            a = float(np.polyval(alpha[::-1], s))
        lam = lam + s
        if not stalled and abs(s) <= trust:
            deriv = float(np.polyval(dalpha[::-1], s))
            return LambdaSolve(
                lambda_of_W=lam, iterations=iterations, a_value=a,
                derivative_check=deriv,
            )
        if stalled and abs(s) < 1e-12:
            raise NoConvergence(
                f"no solution of the eigenvalue equation in the window "
                f"({lo:g}, {hi:g})"
            )
        # re-center and expand again: either the root cleared the trust
        # radius or the expansion ran out of reach in this bracket
    raise NoConvergence(
        f"eigenvalue equation not solved within the refresh budget, "
        f"stopped at lambda={lam:.9g}"
    )


def _solve_lambda_exact(
    spec, op, wf, psi1, lam, lo, hi, tol_newton, max_iter, order, frame
) -> LambdaSolve:
    """Solve the eigenvalue equation with the perturbation applied exactly.

    The carrier is the unperturbed system factored at the unperturbed
    energy, a reference that does not move with the coefficients, so the
    returned eigenvalue is a smooth function of them; differentiating
    lambda(W) numerically is meaningless on the assembled route, whose
    output is quantized at the band's rounding floor.
    """
    if (
        frame is not None
        and frame.base is op
        and abs(frame.lambda0 - spec.lambda0) <= 1e-12
    ):
        br = frame.resolvent
    else:
        br = BoundaryResolvent(op, spec.lambda0, 1, RADIATION_BC)
    rad, lu = br._rad_op, br._rad_lu
    b = psi1.astype(rad.band.data.dtype).copy()
    if rad.bc_rows.size:
        b[rad.bc_rows] = 0
    base = base_solve(rad, lu, b)

    def a_of(s: float) -> float:
        u = shifted_solve(rad, lu, b, s=s, dfld=wf, order=order + 4, base=base)
        return float(np.real(op.weight * (psi1 @ u)))

    smin = lo - spec.lambda0
    smax = hi - spec.lambda0
    s = lam - spec.lambda0
    d = 1e-6
    a = a_of(s)
    iterations = 0
    while abs(a - 1.0) > tol_newton:
        iterations += 1
        if iterations > max_iter:
            raise NoConvergence(
                f"eigenvalue equation not re-solved in {max_iter} steps, "
                f"|a-1|={abs(a - 1.0):.3e}"
            )
        if a > 1.0:
            smax = min(smax, s)
        else:
            smin = max(smin, s)
        deriv = (a_of(s + d) - a_of(s - d)) / (2.0 * d)
        nxt = s - (a - 1.0) / deriv if deriv > 0 else math.nan
        if not (smin < nxt < smax):
            nxt = 0.5 * (smin + smax)
            if smax - smin < 1e-15:
                raise NoConvergence(
                    "eigenvalue re-solve stalled; the exact-increment and "
                    "assembled routes disagree"
                )
        s = nxt
        a = a_of(s)
    deriv = (a_of(s + d) - a_of(s - d)) / (2.0 * d)
    return LambdaSolve(
        lambda_of_W=spec.lambda0 + s, iterations=iterations, a_value=a,
        derivative_check=deriv,
    )


def fermi_map(
    frame: FermiFrame,
    spec: SpectralData,
    basis: PerturbationBasis,
    coeffs: Sequence[float],
    *,
    tol_newton: float = 1e-12,
    angle: float = 0.0,
    lambda_solve: Optional[LambdaSolve] = None,
) -> np.ndarray:
    """Evaluate the persistence map at the perturbation ``sum_k c_k W_k``.

    Solves for ``lambda(W)`` first (or reuses ``lambda_solve``), then returns
    the ``m`` components ``<g_j, delta(Hbar + W - lambda(W)) psi_1>``
    followed, for multiplicity ``n >= 2``, by the ``n - 1`` solvability
    components ``<psi_i, A(lambda(W), W) psi_1>``.  All entries are real.

    A perturbation below :data:`W_EXACT_MAX` is evaluated on the frame's own
    factorization with exact residual increments, the same route
    :func:`solve_lambda` takes, so the map is smooth in the coefficients;
    larger perturbations are assembled.
    """
    op = frame.base
    if lambda_solve is None:
        lambda_solve = solve_lambda(
            spec, op, basis, coeffs, tol_newton=tol_newton, angle=angle,
            frame=frame,
        )
    wf = multiplication_field(op, basis, np.asarray(coeffs, dtype=float))
    wmax = _field_amplitude(wf)
    psi = _leading_vectors(spec, angle)
    if 0.0 < wmax <= W_EXACT_MAX:
        br = frame.resolvent
        rad, lu = br._rad_op, br._rad_lu
        b = psi[0].astype(rad.band.data.dtype).copy()
        if rad.bc_rows.size:
            b[rad.bc_rows] = 0
        u = shifted_solve(
            rad, lu, b, s=lambda_solve.lambda_of_W - frame.lambda0,
            dfld=wf, order=12,
        )
    else:
        opw = apply_field(op, wf) if wmax > 0 else op
        br = BoundaryResolvent(opw, lambda_solve.lambda_of_W, 1, RADIATION_BC)
        u = br.resolve(psi[0])
    delta1 = u.imag / math.pi
    out = list(op.weight * (frame.duals @ delta1))
    for i in range(1, spec.multiplicity):
        out.append(float(np.real(op.weight * (psi[i] @ u))))
    return np.array(out)


def fermi_jacobian(
    frame: FermiFrame,
    spec: SpectralData,
    basis: PerturbationBasis,
    *,
    angle: float = 0.0,
) -> np.ndarray:
    """Analytic Jacobian of the persistence map at ``W = 0``.

    Row ``j``, column ``k`` is ``-<g_j, delta(Hbar - lambda0) W_k psi_1>``;
    a degenerate eigenvalue appends the rows ``-<psi_i, W_k psi_1>``.  The
    frame's stored factorization is reused, one density action per basis
    element.
    """
    op = frame.base
    psi = _leading_vectors(spec, angle)
    dop = DensityOperator(frame.resolvent)
    n_extra = spec.multiplicity - 1
    jac = np.empty((frame.m + n_extra, basis.p))
    unit = np.zeros(basis.p)
    for k in range(basis.p):
        unit[:] = 0.0
        unit[k] = 1.0
        fld = multiplication_field(op, basis, unit)
        wpsi = apply_multiplication(op, fld, psi[0])
        img = dop.action(wpsi)
        jac[: frame.m, k] = -op.weight * (frame.duals @ img)
        for i in range(1, spec.multiplicity):
            jac[frame.m + i - 1, k] = -op.weight * float(psi[i] @ wpsi)
    return jac
