"""Tests for density frames, the scalar eigenvalue solve, and the fermi map.

Expected numbers fall in three groups.  Structural facts (frame dimension,
Jacobian rank, map length) follow from channel counting: on the line at
lambda inside (1, 17) exactly two radiation profiles exist, so m = 2; the
degenerate cylinder pair adds n - 1 = 1 solvability component on top.
First-order facts are checked against independently computed references,
for example the slope of t -> lambda(t W) against the diagonal matrix
element <phi_0, W phi_0>.  The remaining decimals (frozen eigenvalue
shifts, map values, singular values) were produced by this code once,
cross-checked against finite differences and the closed-form reduced
matrix at W = 0, and pinned here to catch regressions.
"""

import math

import numpy as np
import pytest

from eigenpersist import errors
from eigenpersist.boundary_resolvent import (
    BoundaryResolvent,
    DensityOperator,
    default_probes,
)
from eigenpersist.fermi_frame import (
    W_EXACT_MAX,
    FermiFrame,
    LambdaSolve,
    build_frame,
    fermi_jacobian,
    fermi_map,
    solve_lambda,
)
from eigenpersist.operator_lab import (
    FOURTH_ORDER_LINE,
    Dirichlet,
    Grid1D,
    ModelSpec,
    SechPair,
    build_operator,
    bump_basis,
    cylinder_bump_basis,
    line_radiation_roots,
    multiplication_field,
)

from conftest import LINE_WINDOW, CYL_FULL_WINDOW

LINE_COEFFS = np.array([0.012, -0.008, 0.01, 0.006, -0.004, 0.009])


class TestBuildFrame:
    def test_free_line_frame_dimension(self, free_line_op):
        br = BoundaryResolvent(free_line_op, 1.0)
        frame = build_frame(None, br)
        assert frame.m == 2
        assert list(frame.selection) == [0, 6]
        assert frame.densities.shape == (2, free_line_op.n_total)
        assert np.isrealobj(frame.densities) and np.isrealobj(frame.duals)

    def test_free_frame_spans_propagating_trig_pair(self, free_line_op):
        # The density range at lambda = mu^4 is spanned by cos(mu x) and
        # sin(mu x) with mu the grid's own propagating wavenumber; the
        # continuum mu = 1 drifts by O(h^2 L) over the box.
        br = BoundaryResolvent(free_line_op, 1.0)
        frame = build_frame(None, br)
        h = free_line_op.grid.h
        roots = line_radiation_roots(1.0, h, +1)
        prop = [r for r in roots["right"] if abs(abs(r) - 1.0) < 1e-8]
        mu_h = abs(np.angle(prop[0])) / h
        x = free_line_op.grid.points
        for v in (np.cos(mu_h * x), np.sin(mu_h * x)):
            assert frame.span_residual(v) < 1e-8
        assert frame.span_residual(np.cos(x)) < 1e-3

    def test_fresh_probe_density_stays_in_span(self, free_line_op):
        br = BoundaryResolvent(free_line_op, 1.0)
        frame = build_frame(None, br)
        x = free_line_op.grid.points
        fresh = np.exp(-0.5 * ((x - 3.7) / 0.5) ** 2)
        dv = DensityOperator(br).action(fresh)
        assert frame.span_residual(dv) < 1e-8

    def test_biorthogonality(self, line_frame, cyl_frame):
        assert line_frame.biorthogonality_defect() < 1e-12
        assert cyl_frame.biorthogonality_defect() < 1e-12

    def test_hbar_frame_selection_and_span(self, line_spec, line_hbar, line_frame):
        assert line_frame.m == 2
        assert list(line_frame.selection) == [0, 7]
        # pivot spectrum collapses after the first m entries
        assert line_frame.pivots[2] < 1e-6 * line_frame.pivots[0]
        x = line_hbar.grid.points
        fresh = np.exp(-0.5 * ((x + 4.2) / 0.4) ** 2)
        fresh /= line_hbar.norm(fresh)
        dv = DensityOperator(line_frame.resolvent).action(fresh)
        assert line_frame.span_residual(dv) < 1e-10

    def test_probe_family_change_preserves_span(self, line_spec, line_hbar):
        br = BoundaryResolvent(line_hbar, line_spec.lambda0)
        a = build_frame(line_spec, br, default_probes(line_hbar, 8))
        b = build_frame(line_spec, br, default_probes(line_hbar, 9))
        qa = np.linalg.qr(a.densities.T)[0]
        qb = np.linalg.qr(b.densities.T)[0]
        sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
        angles = np.sqrt(2.0 * np.abs(1.0 - sv))
        assert np.max(angles) < 1e-6

    def test_incoming_branch_gives_same_frame(self, line_spec, line_hbar, line_frame):
        br = BoundaryResolvent(line_hbar, line_spec.lambda0, -1)
        other = build_frame(line_spec, br)
        assert np.max(np.abs(other.densities - line_frame.densities)) < 1e-12
        assert other.resolvent.sign == 1

    def test_duplicate_probes_collapse(self, line_spec, line_hbar):
        p = default_probes(line_hbar, 2)
        p[1] = p[0]
        with pytest.raises(errors.RankCollapse):
            build_frame(line_spec, BoundaryResolvent(line_hbar, line_spec.lambda0), p, m=2)

    def test_too_few_probes_collapse(self, line_spec, line_hbar):
        x = line_hbar.grid.points
        p = np.exp(-0.5 * (x / 0.6) ** 2)[None, :]
        with pytest.raises(errors.RankCollapse):
            build_frame(line_spec, BoundaryResolvent(line_hbar, line_spec.lambda0), p, m=2)

    def test_resolvent_energy_must_match(self, line_spec, line_hbar):
        br = BoundaryResolvent(line_hbar, line_spec.lambda0 + 0.05)
        with pytest.raises(errors.ConfigError):
            build_frame(line_spec, br)

    def test_probe_shape_mismatch(self, line_spec, line_hbar):
        bad = np.ones((3, 17))
        with pytest.raises(errors.DimensionMismatch):
            build_frame(line_spec, BoundaryResolvent(line_hbar, line_spec.lambda0), bad)


class TestSolveLambda:
    def test_zero_perturbation_returns_base_eigenvalue(self, line_spec, line_hbar,
                                                       line_basis, line_frame):
        ls = solve_lambda(line_spec, line_hbar, line_basis, np.zeros(6),
                          frame=line_frame)
        assert abs(ls.lambda_of_W - line_spec.lambda0) < 1e-8
        assert abs(ls.a_value - 1.0) < 1e-12
        assert abs(ls.derivative_check - 1.0) < 1e-6
        assert ls.iterations <= 3

    def test_frozen_shift_for_reference_coefficients(self, line_spec, line_hbar,
                                                     line_basis):
        ls = solve_lambda(line_spec, line_hbar, line_basis, LINE_COEFFS)
        assert abs(ls.lambda_of_W - line_spec.lambda0 - 3.686090598178e-3) < 1e-9
        assert abs(ls.a_value - 1.0) < 1e-12
        assert ls.iterations <= 10
        assert LINE_WINDOW[0] < ls.lambda_of_W < LINE_WINDOW[1]

    def test_first_order_slope_matches_diagonal_element(self, line_spec, line_hbar,
                                                        line_basis, line_frame):
        # d/dt lambda(t W) at t = 0 equals <phi_0, W phi_0> for every
        # direction W in the perturbation span.
        rng = np.random.default_rng(11)
        phi0 = line_spec.eigvecs[0]
        t = 1e-5
        ref = solve_lambda(line_spec, line_hbar, line_basis, np.zeros(6),
                           frame=line_frame).lambda_of_W
        worst = 0.0
        for _ in range(10):
            d = rng.standard_normal(6)
            d /= np.linalg.norm(d)
            fld = multiplication_field(line_hbar, line_basis, t * d)
            exact = line_hbar.weight * float(phi0 @ (fld * phi0))
            ls = solve_lambda(line_spec, line_hbar, line_basis, t * d,
                              frame=line_frame)
            worst = max(worst, abs((ls.lambda_of_W - ref) - exact) / abs(exact))
        assert worst < 1e-4

    def test_distant_bump_leaves_eigenvalue_in_place(self, line_spec, line_hbar,
                                                     line_grid, line_frame):
        # phi_0 decays like e^{-|x|}; a bump at x = 15 shifts lambda below
        # the resolution of the solve.
        far = bump_basis(line_grid, (15.0,), 0.8, 1.0)
        ls = solve_lambda(line_spec, line_hbar, far, [0.1], frame=line_frame)
        assert abs(ls.lambda_of_W - line_spec.lambda0) < 1e-8

    def test_route_split_agrees_at_small_amplitude(self, line_spec, line_hbar,
                                                   line_grid, line_frame):
        # amplitude 2e-4 stays on the exact-increment route
        basis = bump_basis(line_grid, (-2.5, 1.5), 0.8, 1.0)
        c = np.array([2e-4, -1.5e-4])
        fld = multiplication_field(line_hbar, basis, c)
        assert np.max(np.abs(fld)) < W_EXACT_MAX
        ls = solve_lambda(line_spec, line_hbar, basis, c)
        ls_f = solve_lambda(line_spec, line_hbar, basis, c, frame=line_frame)
        assert abs(ls.lambda_of_W - 0.999881458092345) < 1e-9
        assert abs(ls.lambda_of_W - ls_f.lambda_of_W) < 1e-12

    def test_overwhelming_perturbation_fails_honestly(self, line_spec, line_hbar,
                                                      line_basis):
        with pytest.raises(errors.NoConvergence):
            solve_lambda(line_spec, line_hbar, line_basis, 80.0 * np.ones(6))

    def test_guess_outside_window_rejected(self, line_spec, line_hbar, line_basis):
        with pytest.raises(errors.ConfigError):
            solve_lambda(line_spec, line_hbar, line_basis, np.zeros(6), guess=2.5)

    def test_rotation_needs_degeneracy(self, line_spec, line_hbar, line_basis):
        with pytest.raises(errors.ConfigError):
            solve_lambda(line_spec, line_hbar, line_basis, np.zeros(6), angle=0.3)

    def test_summary_serializes(self, line_spec, line_hbar, line_basis, line_frame):
        ls = solve_lambda(line_spec, line_hbar, line_basis, np.zeros(6),
                          frame=line_frame)
        d = ls.summary_dict()
        assert set(d) == {"lambda_of_W", "iterations", "a_value", "derivative_check"}
        assert all(np.isfinite(v) for v in d.values())


class TestFermiMap:
    def test_zero_perturbation_map_is_small(self, line_frame, line_spec, line_basis):
        # the Dirichlet tail of phi_0 excites the open channel at the level
        # of the domain-truncation error, not exactly zero
        f0 = fermi_map(line_frame, line_spec, line_basis, np.zeros(6))
        assert f0.shape == (2,)
        assert f0.dtype == np.float64
        assert np.max(np.abs(f0)) < 2e-4
        ref = np.array([-6.669274255519e-05, -6.669274272228e-05])
        assert np.max(np.abs(f0 - ref)) < 1e-10

    def test_frozen_values_at_reference_coefficients(self, line_frame, line_spec,
                                                     line_basis):
        f = fermi_map(line_frame, line_spec, line_basis, LINE_COEFFS)
        ref = np.array([0.001590817572208, -0.001287427422497])
        assert np.max(np.abs(f - ref)) < 1e-9

    def test_reusing_lambda_solve_matches(self, line_frame, line_spec, line_hbar,
                                          line_basis):
        ls = solve_lambda(line_spec, line_hbar, line_basis, LINE_COEFFS)
        a = fermi_map(line_frame, line_spec, line_basis, LINE_COEFFS)
        b = fermi_map(line_frame, line_spec, line_basis, LINE_COEFFS,
                      lambda_solve=ls)
        assert np.max(np.abs(a - b)) < 1e-12

    def test_degenerate_map_has_solvability_components(self, cyl_frame, cyl_full_spec,
                                                       cyl_basis):
        f0 = fermi_map(cyl_frame, cyl_full_spec, cyl_basis, np.zeros(7))
        assert f0.shape == (cyl_frame.m + cyl_full_spec.multiplicity - 1,)
        assert f0.dtype == np.float64
        # psi_1 sits in a closed angular channel, so the truncation tail is
        # far below the line's
        assert np.max(np.abs(f0)) < 1e-12


class TestFermiJacobian:
    def test_line_shape_rank_and_spectrum(self, line_frame, line_spec, line_basis):
        jac = fermi_jacobian(line_frame, line_spec, line_basis)
        assert jac.shape == (2, 6)
        sv = np.linalg.svd(jac, compute_uv=False)
        ref = np.array([0.571730374196204, 0.502143926274703])
        assert np.max(np.abs(sv - ref)) < 1e-9
        assert np.sum(sv > 1e-8 * sv[0]) == 2

    def test_line_jacobian_matches_finite_differences(self, line_frame, line_spec,
                                                      line_hbar, line_basis):
        jac = fermi_jacobian(line_frame, line_spec, line_basis)
        t = 1e-5
        floor = 1e-3 * np.max(np.abs(jac))
        worst = 0.0
        for k in range(6):
            c = np.zeros(6)
            c[k] = t
            fp = fermi_map(line_frame, line_spec, line_basis, c)
            c[k] = -t
            fm = fermi_map(line_frame, line_spec, line_basis, c)
            fd = (fp - fm) / (2.0 * t)
            for j in range(2):
                denom = max(abs(jac[j, k]), floor)
                worst = max(worst, abs(fd[j] - jac[j, k]) / denom)
        assert worst < 1e-3

    def test_zero_basis_element_gives_zero_column(self, line_frame, line_spec,
                                                  line_grid):
        basis = bump_basis(line_grid, (-2.5, 1.5, 0.0), 0.8, 1.0)
        basis.elements[2][:] = 0.0
        jac = fermi_jacobian(line_frame, line_spec, basis)
        assert np.max(np.abs(jac[:, 2])) == 0.0

    def test_degenerate_jacobian_has_full_expected_rank(self, cyl_frame,
                                                        cyl_full_spec, cyl_basis):
        jac = fermi_jacobian(cyl_frame, cyl_full_spec, cyl_basis)
        assert jac.shape == (3, 7)
        sv = np.linalg.svd(jac, compute_uv=False)
        ref = np.array([1.700136279283534, 0.28320829354345, 0.159224966507422])
        assert np.max(np.abs(sv - ref)) < 1e-6
        assert np.sum(sv > 1e-6 * sv[0]) == cyl_frame.m + cyl_full_spec.multiplicity - 1

    def test_degenerate_jacobian_matches_finite_differences(self, cyl_frame,
                                                            cyl_full_spec,
                                                            cyl_full_hbar, cyl_basis):
        jac = fermi_jacobian(cyl_frame, cyl_full_spec, cyl_basis)
        t = 1e-5
        k = 1
        c = np.zeros(7)
        c[k] = t
        lsp = solve_lambda(cyl_full_spec, cyl_full_hbar, cyl_basis, c, frame=cyl_frame)
        fp = fermi_map(cyl_frame, cyl_full_spec, cyl_basis, c, lambda_solve=lsp)
        c[k] = -t
        lsn = solve_lambda(cyl_full_spec, cyl_full_hbar, cyl_basis, c, frame=cyl_frame)
        fm = fermi_map(cyl_frame, cyl_full_spec, cyl_basis, c, lambda_solve=lsn)
        fd = (fp - fm) / (2.0 * t)
        assert np.max(np.abs(fd - jac[:, k])) < 1e-8

    def test_rotated_pair_keeps_rank(self, cyl_frame, cyl_full_spec, cyl_basis):
        jac = fermi_jacobian(cyl_frame, cyl_full_spec, cyl_basis, angle=0.4)
        sv = np.linalg.svd(jac, compute_uv=False)
        ref = np.array([1.581090140960923, 0.237343487984411, 0.171901608380985])
        assert np.max(np.abs(sv - ref)) < 1e-6
        assert np.sum(sv > 1e-6 * sv[0]) == 3
