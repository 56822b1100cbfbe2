"""Tests for error norms, convergence rates and the energy identity probe."""
from types import SimpleNamespace

import numpy as np
import pytest


@pytest.fixture
def static_T(cube_spaces):
    """T at k = 0 with its component matrices."""
    from coupling import assemble_T_matrix, assemble_blocks
    from fem import MediumCoefficients
    V_h, spaces = cube_spaces
    system = assemble_blocks(0.0, MediumCoefficients(0.0), V_h, spaces)
    T = assemble_T_matrix(0.0, MediumCoefficients(0.0), V_h, spaces, system=system)
    return T, system


@pytest.mark.unit
class TestErrorReport:
    """Test the error record."""

    def test_rejects_negative(self):
        """Test negative errors are rejected."""
        from analysis import AnalysisError, ErrorReport
        with pytest.raises(AnalysisError):
            ErrorReport(0.5, 1, 1.0, 0.1, -0.2, 0.1, 0.1)

    def test_rejects_nan(self):
        """Test nonfinite errors are rejected."""
        from analysis import AnalysisError, ErrorReport
        with pytest.raises(AnalysisError):
            ErrorReport(0.5, 1, 1.0, float("nan"), 0.2, 0.1, 0.1)

    def test_quantity_lookup(self):
        """Test quantities by name."""
        from analysis import QUANTITIES, ErrorReport
        report = ErrorReport(0.5, 1, 1.0, 0.1, 0.2, 0.3, 0.4)
        assert [report.quantity(q) for q in QUANTITIES] == [0.1, 0.2, 0.3, 0.4]


@pytest.mark.unit
class TestComputeErrors:
    """Test the four error quantities."""

    def test_polynomial_case_vanishes(self, unit_cube):
        """Test the interpolated polynomial triple has zero error."""
        from analysis import compute_errors
        from bem import build_trace_spaces
        from coupling import exact_triple, poly_exact
        from fem import build_fe_space
        V_h = build_fe_space(unit_cube, 2)
        spaces = build_trace_spaces(V_h.surface, 2)
        case = poly_exact(1.0, 2)
        u, m, uext = exact_triple(case, V_h, spaces)
        report = compute_errors(SimpleNamespace(u=u, m=m, uext=uext), case, V_h, spaces, zero_norm="absolute")
        for name in ("rel_l2_omega", "rel_h1_omega", "scaled_l2_mortar", "scaled_l2_ext"):
            assert report.quantity(name) < 1e-12
        assert report.stats is None
        assert report.dofs == (V_h.num_dofs, spaces.num_w, spaces.num_z)

    def test_zero_exact_norm_raises(self, cube_spaces):
        """Test a vanishing exact norm is rejected by default."""
        from analysis import AnalysisError, compute_errors
        from coupling import exact_triple, poly_exact
        V_h, spaces = cube_spaces
        case = poly_exact(1.0, 1)
        u, m, uext = exact_triple(case, V_h, spaces)
        with pytest.raises(AnalysisError, match="norm is zero"):
            compute_errors(SimpleNamespace(u=u, m=m, uext=uext), case, V_h, spaces)

    def test_boundary_scaling(self, cube_spaces):
        """Test zero boundary unknowns give h^(1/2) and h^(-1/2)."""
        from analysis import compute_errors
        from coupling import exact_triple, tc1
        V_h, spaces = cube_spaces
        case = tc1(2.0)
        u, m, uext = exact_triple(case, V_h, spaces)
        report = compute_errors(SimpleNamespace(u=u, m=0 * m, uext=0 * uext), case, V_h, spaces)
        h = np.sqrt(3.0)
        assert report.h == pytest.approx(h)
        assert report.scaled_l2_mortar == pytest.approx(np.sqrt(h))
        assert report.scaled_l2_ext == pytest.approx(1 / np.sqrt(h))

    def test_interpolant_error_decreases(self, unit_cube):
        """Test the interpolation error of tc1 drops under refinement."""
        from analysis import compute_errors
        from bem import build_trace_spaces
        from coupling import exact_triple, tc1
        from fem import build_fe_space
        from meshes import refine_uniform
        case = tc1(2.0)
        errors = []
        for mesh in (unit_cube, refine_uniform(unit_cube)):
            V_h = build_fe_space(mesh, 1)
            spaces = build_trace_spaces(V_h.surface, 1)
            u, m, uext = exact_triple(case, V_h, spaces)
            errors.append(compute_errors(SimpleNamespace(u=u, m=m, uext=uext), case, V_h, spaces))
        assert errors[1].rel_h1_omega < errors[0].rel_h1_omega
        assert errors[1].rel_l2_omega < errors[0].rel_l2_omega

    def test_quadrature_degree_converged(self, cube2):
        """Test doubling the error quadrature degree leaves the tc1 errors unchanged."""
        from analysis import QUANTITIES, compute_errors
        from bem import build_trace_spaces
        from coupling import exact_triple, tc1
        from fem import build_fe_space
        V_h = build_fe_space(cube2, 1)
        spaces = build_trace_spaces(V_h.surface, 1)
        case = tc1(2.0)
        u, m, uext = exact_triple(case, V_h, spaces)
        solution = SimpleNamespace(u=u, m=m, uext=uext)
        default = compute_errors(solution, case, V_h, spaces)
        doubled = compute_errors(solution, case, V_h, spaces, degree=8)
        for name in QUANTITIES:
            assert doubled.quantity(name) == pytest.approx(default.quantity(name), rel=2e-2)

    def test_interpolant_beats_galerkin(self, cube2):
        """Test the interpolant has no larger H1 error than the Galerkin solution."""
        from analysis import compute_errors
        from bem import build_trace_spaces
        from coupling import assemble_block_system, exact_triple, tc1
        from fem import build_fe_space
        from solver import solve
        V_h = build_fe_space(cube2, 1)
        spaces = build_trace_spaces(V_h.surface, 1)
        case = tc1(1.5 * np.sqrt(3.0) * np.pi)
        u, m, uext = exact_triple(case, V_h, spaces)
        interpolant = compute_errors(SimpleNamespace(u=u, m=m, uext=uext), case, V_h, spaces)
        galerkin = compute_errors(solve(assemble_block_system(case, V_h, spaces)), case, V_h, spaces)
        assert interpolant.rel_h1_omega <= galerkin.rel_h1_omega


@pytest.mark.unit
class TestRates:
    """Test convergence rate estimates."""

    def test_exact_power_law(self):
        """Test e = C h^2 gives rate 2 everywhere."""
        from analysis import rates_from
        h = np.array([0.4, 0.2, 0.1, 0.05])
        pairwise, slope = rates_from(h, 3.0 * h ** 2)
        assert np.allclose(pairwise, 2.0)
        assert slope == pytest.approx(2.0)

    def test_least_squares_smooths(self):
        """Test the fitted slope lies between the extreme pairwise rates."""
        from analysis import rates_from
        h = np.array([0.4, 0.2, 0.1])
        pairwise, slope = rates_from(h, np.array([1.0, 0.4, 0.1]))
        assert min(pairwise) <= slope <= max(pairwise)

    def test_single_level(self):
        """Test one level has no rate."""
        from analysis import AnalysisError, rates_from
        with pytest.raises(AnalysisError):
            rates_from([0.5], [0.1])

    def test_increasing_h(self):
        """Test mesh sizes must decrease."""
        from analysis import AnalysisError, rates_from
        with pytest.raises(AnalysisError, match="decrease"):
            rates_from([0.1, 0.2], [0.1, 0.2])

    def test_convergence_rates_from_reports(self):
        """Test rates for every quantity from error reports."""
        from analysis import QUANTITIES, ErrorReport, convergence_rates
        reports = [ErrorReport(h, 1, 1.0, h ** 2, h, h ** 1.5, h ** 0.5) for h in (0.4, 0.2, 0.1)]
        rates = convergence_rates(reports)
        assert set(rates.pairwise) == set(QUANTITIES)
        assert rates.least_squares["rel_l2_omega"] == pytest.approx(2.0)
        assert rates.least_squares["rel_h1_omega"] == pytest.approx(1.0)
        assert rates.pairwise["scaled_l2_mortar"] == pytest.approx([1.5, 1.5])


@pytest.mark.unit
class TestEnergyIdentity:
    """Test the k = 0 energy identity of T."""

    def test_real_triples(self, static_T):
        """Test the identity holds for real triples."""
        from analysis import energy_identity_probe
        T, system = static_T
        ops = system.operators
        gap = energy_identity_probe(T, system.S, ops.Wm, ops.Vm, system.dims, trials=20)
        assert gap < 1e-10

    def test_complex_triples_real_part(self, static_T):
        """Test the real part of the form matches for complex triples."""
        from analysis import energy_identity_probe
        T, system = static_T
        ops = system.operators
        gap = energy_identity_probe(T, system.S, ops.Wm, ops.Vm, system.dims, trials=20, complex_coefficients=True)
        assert gap < 1e-10

    def test_nonzero_wavenumber_breaks_identity(self, cube_spaces, static_T):
        """Test T at k = 2 does not satisfy the static identity."""
        from analysis import energy_identity_probe
        from coupling import assemble_T_matrix
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        _, static = static_T
        T = assemble_T_matrix(2.0, MediumCoefficients(2.0), V_h, spaces)
        ops = static.operators
        assert energy_identity_probe(T, static.S, ops.Wm, ops.Vm, static.dims, trials=5) > 1e-3

    def test_lower_bound_nonnegative(self, static_T):
        """Test Re(x^H T x) stays nonnegative at k = 0."""
        from analysis import energy_lower_bound
        T, system = static_T
        assert energy_lower_bound(T, system.dims, trials=20) > -1e-10

    def test_no_trials(self, static_T):
        """Test zero trials are rejected."""
        from analysis import AnalysisError, energy_identity_probe, energy_lower_bound
        T, system = static_T
        with pytest.raises(AnalysisError):
            energy_identity_probe(T, system.S, system.B5, system.B5, system.dims, trials=0)
        with pytest.raises(AnalysisError):
            energy_lower_bound(T, system.dims, trials=0)
