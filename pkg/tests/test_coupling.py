"""Tests for manufactured cases and the coupled block system."""
import numpy as np
import pytest


def laplacian(func, x, step=1e-4):
    total = 0.0
    for c in range(3):
        e = np.zeros(3)
        e[c] = step
        total = total + (func(x + e) - 2 * func(x) + func(x - e)) / step ** 2
    return total


def gradient(func, x, step=1e-6):
    out = []
    for c in range(3):
        e = np.zeros(3)
        e[c] = step
        out.append((func(x + e) - func(x - e)) / (2 * step))
    return np.array(out)


@pytest.fixture
def poly_system(unit_cube):
    """Assembled poly-exact system and spaces for p = 2."""
    from bem import build_trace_spaces
    from coupling import assemble_block_system, poly_exact
    from fem import build_fe_space
    V_h = build_fe_space(unit_cube, 2)
    spaces = build_trace_spaces(V_h.surface, 2)
    case = poly_exact(1.3, 2)
    return case, V_h, spaces, assemble_block_system(case, V_h, spaces)


@pytest.mark.unit
class TestManufacturedCases:
    """Test closed-form fields and derived data."""

    @pytest.mark.parametrize("name,k", [("tc1", 2.0), ("poly-exact", 1.5)])
    def test_source_matches_operator(self, name, k):
        """Test f = -div(A grad u) - k^2 u at an interior point."""
        from coupling import make_case
        case = make_case(name, k, p=3)
        x = np.array([0.13, -0.21, 0.34])
        f = -laplacian(lambda y: case.u_int(y), x) - k ** 2 * case.u_int(x)
        assert case.source(x[None, :])[0] == pytest.approx(f, rel=1e-5, abs=1e-5)

    def test_tc2_source_outside_inner_box(self):
        """Test the tc2 source away from the inner box."""
        from coupling import tc2
        case = tc2()
        x = np.array([0.33, -0.27, 0.41])
        f = -laplacian(lambda y: case.u_int(y), x, step=1e-4) - case.k ** 2 * case.u_int(x)
        assert case.source(x[None, :])[0] == pytest.approx(f, rel=1e-4, abs=1e-3)

    def test_tc2_source_inside_inner_box(self):
        """Test the tc2 source scales the Laplacian by the inner diffusion."""
        from coupling import tc2
        case = tc2()
        x = np.array([0.05, -0.1, 0.12])
        f = -2.0 * laplacian(lambda y: case.u_int(y), x, step=1e-4) - case.k ** 2 * case.u_int(x)
        assert case.source(x[None, :])[0] == pytest.approx(f, rel=1e-4, abs=1e-3)

    def test_tc2_vanishes_on_inner_faces(self):
        """Test u and grad u vanish on the inner box faces."""
        from coupling import INNER_BOX, tc2
        case = tc2()
        points = np.array([[INNER_BOX[1], 0.1, -0.05], [0.07, INNER_BOX[0], 0.3], [0.4, -0.3, INNER_BOX[1]]])
        assert np.allclose(case.u_int(points), 0.0, atol=1e-12)
        assert np.allclose(case.grad_u_int(points), 0.0, atol=1e-10)

    def test_tc2_fixed_wavenumber(self):
        """Test tc2 ignores the requested wavenumber."""
        from coupling import make_case
        assert make_case("tc2", 5.0).k == pytest.approx(np.sqrt(3) * np.pi)

    @pytest.mark.parametrize("name", ["tc1", "tc2", "poly-exact"])
    def test_gradients(self, name):
        """Test closed-form gradients against central differences."""
        from coupling import make_case
        case = make_case(name, 2.0, p=3)
        x = np.array([0.31, 0.12, -0.44])
        assert np.allclose(case.grad_u_int(x[None, :])[0], gradient(case.u_int, x), atol=1e-6)
        y = np.array([1.4, -0.3, 0.8])
        assert np.allclose(case.grad_u_ext(y[None, :])[0], gradient(case.u_ext, y), atol=1e-6)

    def test_exterior_field_is_helmholtz(self):
        """Test the outgoing exterior field solves the homogeneous equation."""
        from coupling import tc1
        case = tc1(3.0)
        x = np.array([0.9, -0.7, 0.6])
        residual = laplacian(case.u_ext, x, step=1e-3) + 9.0 * case.u_ext(x)
        assert abs(residual) < 1e-4

    def test_mortar_is_impedance_trace(self):
        """Test m = dn u + ik u."""
        from coupling import tc1
        case = tc1(2.0)
        x = np.array([[0.5, 0.1, -0.2]])
        n = np.array([[1.0, 0.0, 0.0]])
        expected = case.grad_u_int(x)[0, 0] + 2j * case.u_int(x)[0]
        assert case.m_exact(x, n)[0] == pytest.approx(expected)

    def test_plane_wave_has_no_jumps(self):
        """Test identical inner and outer fields give zero jump data."""
        from coupling import plane_wave
        case = plane_wave(2.0, (1.0, 1.0, 0.0))
        x = np.array([[0.5, 0.2, 0.1]])
        assert case.jump_impedance(x, np.array([[1.0, 0.0, 0.0]]))[0] == 0
        assert not case.radiating

    def test_unknown_case(self):
        """Test unknown case names raise KeyError."""
        from coupling import make_case
        with pytest.raises(KeyError):
            make_case("tc9", 1.0)


@pytest.mark.unit
class TestBlockSystem:
    """Test block assembly and its algebraic structure."""

    def test_dims_and_shapes(self, cube_spaces):
        """Test block shapes follow (dim V, dim W, dim Z)."""
        from coupling import assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        system = assemble_blocks(1.0, MediumCoefficients(1.0), V_h, spaces)
        nv, nw, nz = system.dims
        assert (nv, nw, nz) == (8, 12, 8)
        assert system.B1.shape == (nv, nw)
        assert system.B2.shape == (nz, nw)
        assert system.B6.shape == (nw, nz)
        assert system.rhs.shape == (nv + nw + nz,)
        assert np.allclose(system.rhs, 0)

    def test_coupling_blocks_are_transposes(self, cube_spaces):
        """Test B4 = -B1^T and C sums to the surface area."""
        from coupling import assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        system = assemble_blocks(1.0, MediumCoefficients(1.0), V_h, spaces)
        assert np.allclose(system.B4.toarray(), -system.B1.toarray().T)
        assert system.B4.toarray().sum().real == pytest.approx(6.0)

    def test_interior_block_complex_symmetric(self, cube_spaces):
        """Test A = S - M + ik R is complex symmetric with R on the imaginary part."""
        from coupling import assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        system = assemble_blocks(2.0, MediumCoefficients(2.0), V_h, spaces)
        A = system.A.toarray()
        assert np.allclose(A, A.T)
        assert np.allclose(A.imag, 2.0 * system.R.toarray().real)

    def test_full_matrix_matches_matvec(self, toy_system):
        """Test the dense matrix and the block product agree."""
        rng = np.random.default_rng(0)
        nv, nw, nz = toy_system.dims
        x = rng.standard_normal(nv + nw + nz) + 1j * rng.standard_normal(nv + nw + nz)
        expected = toy_system.matvec(x[:nv], x[nv:nv + nw], x[nv + nw:])
        assert np.allclose(toy_system.full_matrix() @ x, expected)

    def test_T_row_order(self, cube_spaces):
        """Test T stacks rows (v, lambda, z) with the z rows negated."""
        from coupling import assemble_T_matrix, assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        system = assemble_blocks(1.0, MediumCoefficients(1.0), V_h, spaces)
        T = assemble_T_matrix(1.0, MediumCoefficients(1.0), V_h, spaces, system=system)
        nv, nw, nz = system.dims
        x = np.random.default_rng(1).standard_normal(nv + nw + nz)
        product = system.matvec(x[:nv], x[nv:nv + nw], x[nv + nw:])
        expected = np.concatenate([product[:nv], product[nv + nz:], -product[nv:nv + nz]])
        assert np.allclose(T @ x, expected)

    def test_wavenumber_mismatch(self, cube_spaces):
        """Test coefficients for another k are rejected."""
        from coupling import DimensionError, assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        with pytest.raises(DimensionError):
            assemble_blocks(1.0, MediumCoefficients(2.0), V_h, spaces)

    def test_operators_for_other_spaces(self, cube_spaces, unit_cube):
        """Test operators from another trace space are rejected."""
        from bem import assemble_operators, build_trace_spaces
        from coupling import DimensionError, assemble_blocks
        from fem import MediumCoefficients
        V_h, spaces = cube_spaces
        other = build_trace_spaces(V_h.surface, 1)
        with pytest.raises(DimensionError):
            assemble_blocks(1.0, MediumCoefficients(1.0), V_h, spaces, operators=assemble_operators(1.0, other))

    def test_trace_map_degree_mismatch(self, unit_cube):
        """Test volume and trace spaces of different degree are rejected."""
        from bem import build_trace_spaces
        from coupling import DimensionError, trace_map
        from fem import build_fe_space
        V_h = build_fe_space(unit_cube, 1)
        with pytest.raises(DimensionError):
            trace_map(V_h, build_trace_spaces(V_h.surface, 2))

    def test_trace_map(self, cube_spaces):
        """Test the trace map points at volume dofs with the same coordinates."""
        from coupling import trace_map
        V_h, spaces = cube_spaces
        assert np.allclose(V_h.dof_coords[trace_map(V_h, spaces)], spaces.z_coords)


@pytest.mark.unit
class TestRightHandSides:
    """Test loads and jump corrections."""

    @pytest.mark.parametrize("p", [1, 2])
    def test_polynomial_case_is_exact(self, unit_cube, p):
        """Test the interpolated polynomial triple satisfies the discrete system."""
        from bem import build_trace_spaces
        from coupling import assemble_block_system, exact_triple, poly_exact
        from fem import build_fe_space
        from solver import relative_residual
        V_h = build_fe_space(unit_cube, p)
        spaces = build_trace_spaces(V_h.surface, p)
        case = poly_exact(2.0, p)
        system = assemble_block_system(case, V_h, spaces)
        u, m, uext = exact_triple(case, V_h, spaces)
        assert np.allclose(uext, 0)
        assert relative_residual(system, u, m, uext) < 1e-10

    def test_zero_jumps_give_zero_corrections(self, cube_spaces):
        """Test r2 = r3 = 0 when interior and exterior fields coincide."""
        from coupling import assemble_block_system, plane_wave
        V_h, spaces = cube_spaces
        system = assemble_block_system(plane_wave(1.0), V_h, spaces)
        assert np.allclose(system.r2, 0)
        assert np.allclose(system.r3, 0)
        assert np.allclose(system.f, 0)

    def test_corrections_use_projected_impedance(self, poly_system):
        """Test r2 = B2 h_W with h the projected jump impedance."""
        from bem import project_w
        case, _, spaces, system = poly_system
        h_w = project_w(spaces, case.jump_impedance)
        assert np.allclose(system.r2, system.B2 @ h_w)
        assert np.abs(system.r3).max() > 0

    def test_pair_with_w_constant(self, cube_spaces):
        """Test pairing 1 with the piecewise constants gives the panel areas."""
        from coupling import pair_with_w
        _, spaces = cube_spaces
        assert np.allclose(pair_with_w(spaces, lambda x: np.ones(x.shape[:-1])), spaces.surface.areas)

    def test_reuses_operators(self, poly_system):
        """Test a supplied operator set is reused."""
        from coupling import assemble_block_system
        case, V_h, spaces, system = poly_system
        again = assemble_block_system(case, V_h, spaces, operators=system.operators)
        assert again.operators is system.operators
        assert np.allclose(again.rhs, system.rhs)

    def test_interpolant_consistency_improves(self, unit_cube):
        """Test the interpolated tc1 triple satisfies the discrete system better on finer meshes."""
        from bem import build_trace_spaces
        from coupling import assemble_block_system, exact_triple, tc1
        from fem import build_fe_space
        from meshes import refine_uniform
        from solver import relative_residual
        case = tc1(2.0)
        residuals = []
        mesh = unit_cube
        for _ in range(3):
            V_h = build_fe_space(mesh, 1)
            spaces = build_trace_spaces(V_h.surface, 1)
            system = assemble_block_system(case, V_h, spaces)
            residuals.append(relative_residual(system, *exact_triple(case, V_h, spaces)))
            mesh = refine_uniform(mesh)
        assert residuals[2] < residuals[1] < residuals[0]
