"""Pytest configuration and fixtures."""
import numpy as np
import pytest
import scipy.sparse as sp


REFERENCE_TET_MSH = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 0 1 0
4 0 0 1
$EndNodes
$Elements
1
1 4 2 7 1 1 2 3 4
$EndElements
"""


def msh_text(vertices, tets, duplicate=False, extra_elements=()):
    """MSH 2.2 ASCII text for a tet mesh, physical tag 0."""
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat", "$Nodes", str(len(vertices))]
    lines += [f"{i + 1} {float(x)!r} {float(y)!r} {float(z)!r}" for i, (x, y, z) in enumerate(vertices)]
    lines += ["$EndNodes", "$Elements"]
    elements = [f"4 2 0 1 {' '.join(str(v + 1) for v in tet)}" for tet in tets]
    if duplicate:
        elements.append(elements[0])
    elements += list(extra_elements)
    lines.append(str(len(elements)))
    lines += [f"{i + 1} {e}" for i, e in enumerate(elements)]
    lines.append("$EndElements")
    return "\n".join(lines) + "\n"


@pytest.fixture
def temp_dir(tmp_path):
    """Create a temporary directory for tests."""
    return tmp_path


@pytest.fixture
def reference_tet():
    """The reference tetrahedron as a mesh."""
    from meshes import VolumeMesh
    return VolumeMesh.from_arrays([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2, 3]])


@pytest.fixture
def unit_cube():
    """Six-tet unit cube centred at the origin."""
    from meshes import cube_mesh
    return cube_mesh(1.0, 1)


@pytest.fixture
def cube2():
    """Unit cube with two subdivisions per edge."""
    from meshes import cube_mesh
    return cube_mesh(1.0, 2)


@pytest.fixture
def reference_tet_file(temp_dir):
    """Gmsh file holding the reference tet with physical tag 7."""
    path = temp_dir / "tet.msh"
    path.write_text(REFERENCE_TET_MSH)
    return path


@pytest.fixture
def cube_file(temp_dir, unit_cube):
    """Gmsh file of the six-tet unit cube."""
    path = temp_dir / "cube.msh"
    path.write_text(msh_text(unit_cube.vertices, unit_cube.tets))
    return path


@pytest.fixture
def cube_spaces(unit_cube):
    """Volume and trace spaces of degree 1 on the six-tet cube."""
    from fem import build_fe_space
    from bem import build_trace_spaces
    V_h = build_fe_space(unit_cube, 1)
    return V_h, build_trace_spaces(V_h.surface, 1)


@pytest.fixture
def refined_spaces(unit_cube):
    """Degree-1 spaces on the once refined cube (48 panels)."""
    from fem import build_fe_space
    from bem import build_trace_spaces
    from meshes import refine_uniform
    V_h = build_fe_space(refine_uniform(unit_cube), 1)
    return V_h, build_trace_spaces(V_h.surface, 1)


@pytest.fixture
def static_operators(refined_spaces):
    """k = 0 operators on the refined cube surface."""
    from bem import assemble_operators
    return assemble_operators(0.0, refined_spaces[1])


@pytest.fixture
def toy_system():
    """Small well-conditioned block system with random complex blocks."""
    from coupling import BlockSystem
    rng = np.random.default_rng(3)
    nv, nw, nz = 6, 4, 5

    def rand(*shape):
        return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)

    A = sp.csr_matrix(6 * np.eye(nv) + 0.3 * rand(nv, nv))
    coupling_block = np.zeros((nv, nw), dtype=complex)
    coupling_block[-nw:, :] = 0.5 * rand(nw, nw)
    return BlockSystem(
        k=1.0, A=A, B1=sp.csr_matrix(coupling_block), B2=0.3 * rand(nz, nw), B3=5 * np.eye(nz) + 0.3 * rand(nz, nz),
        B4=sp.csr_matrix(coupling_block.T), B5=5 * np.eye(nw) + 0.3 * rand(nw, nw), B6=0.3 * rand(nw, nz),
        f=rand(nv), r2=rand(nz), r3=rand(nw), S=None, M=None, R=None, operators=None,
    )


@pytest.fixture
def test_status_dir(temp_dir):
    """Create a test status directory."""
    status_dir = temp_dir / "status"
    status_dir.mkdir()
    return status_dir


@pytest.fixture
def test_output_dir(temp_dir):
    """Create a test output directory."""
    output_dir = temp_dir / "results"
    output_dir.mkdir()
    return output_dir


@pytest.fixture
def mock_study_paths(monkeypatch, test_status_dir, test_output_dir):
    """Mock study paths for testing."""
    import study

    monkeypatch.setattr(study, "STATUS_DIR", test_status_dir)
    monkeypatch.setattr(study, "OUTPUT_DIR", test_output_dir)
    monkeypatch.setattr(study, "ACTIVE_RUNS", {})

    return {
        "status": test_status_dir,
        "output": test_output_dir,
    }
