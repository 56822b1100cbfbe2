"""Three-field FEM-BEM coupling: manufactured cases, block system and the form T.

Unknowns are u (V_h), the mortar m = du/dn + ik u on the boundary (W_h) and
the exterior Dirichlet trace uext (Z_h). The block system is

    [ A   B1  0  ] [u   ]   [f ]      A  = S - M + ik R,   B1 = -C
    [ 0   B2  B3 ] [m   ] = [r2]      B2 = -A'_(Z,W),       B3 = B + ik A'_(Z,Z)
    [ B4  B5  B6 ] [uext]   [r3]      B4 = C^T,  B5 = V,   B6 = -(1/2 + K) - ikV

with C[i, j] = <psi_j, v_i> between W_h and the trace of V_h, and
B = -W - ik(1/2 - K), A' = 1/2 + K' + ikV.

Jump data. With g1 = u_int - u_ext and g2 = dn u_int - dn u_ext on the
boundary, put h = ik g1 + g2. Then the exterior Cauchy data are
uext and m - ik uext - h, and the exterior Calderon identities give

    r2 = -<A' h, z>                = B2 h_W
    r3 = <g1, lambda> + <V h, lambda> = (g1, lambda) + V h_W

where h_W is the L2 projection of h onto W_h. For g1 = g2 = 0 both vanish.

T orders its rows as [v; lambda; z] = [row 1; row 3; -row 2].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

import bem
from bem import assemble_combined, assemble_operators, build_trace_spaces, interpolate_z, project_w
from fem import MediumCoefficients, assemble_interior, assemble_load, interpolate
from quadrature import triangle_rule

log = logging.getLogger(__name__)

__all__ = [
    "ManufacturedCase", "BlockSystem", "build_trace_spaces", "assemble_blocks",
    "assemble_block_system", "apply_jump_corrections", "assemble_T_matrix",
]


class DimensionError(ValueError):
    pass


def _outgoing(k):
    """exp(ik|x|)/|x| and its gradient."""

    def value(x):
        r = np.linalg.norm(x, axis=-1)
        return np.exp(1j * k * r) / r

    def grad(x):
        r = np.linalg.norm(x, axis=-1)
        return (np.exp(1j * k * r) * (1j * k * r - 1.0) / r ** 3)[..., None] * x

    return value, grad


def _zero(x):
    return np.zeros(x.shape[:-1], dtype=complex)


def _zero_grad(x):
    return np.zeros(x.shape, dtype=complex)


@dataclass(frozen=True)
class ManufacturedCase:
    """Closed-form interior and exterior fields with the derived source and jump data."""

    name: str
    k: float
    coefficients: MediumCoefficients
    u_int: object
    grad_u_int: object
    u_ext: object
    grad_u_ext: object
    source: object
    radiating: bool = True

    def g1(self, x):
        return self.u_int(x) - self.u_ext(x)

    def g2(self, x, normals):
        return np.sum((self.grad_u_int(x) - self.grad_u_ext(x)) * normals, axis=-1)

    def jump_impedance(self, x, normals):
        return 1j * self.k * self.g1(x) + self.g2(x, normals)

    def m_exact(self, x, normals):
        return np.sum(self.grad_u_int(x) * normals, axis=-1) + 1j * self.k * self.u_int(x)

    def uext_exact(self, x):
        return self.u_ext(x)

    def neumann_ext(self, x, normals):
        return np.sum(self.grad_u_ext(x) * normals, axis=-1)


def tc1(k):
    """sin(kx) cos(ky) inside, outgoing point source at the origin outside."""

    def u(x):
        return np.sin(k * x[..., 0]) * np.cos(k * x[..., 1]) + 0j

    def grad(x):
        sx, cx = np.sin(k * x[..., 0]), np.cos(k * x[..., 0])
        sy, cy = np.sin(k * x[..., 1]), np.cos(k * x[..., 1])
        return np.stack([k * cx * cy, -k * sx * sy, np.zeros_like(sx)], axis=-1) + 0j

    ext, ext_grad = _outgoing(k)
    return ManufacturedCase("tc1", k, MediumCoefficients(k), u, grad, ext, ext_grad, lambda x: k ** 2 * u(x))


INNER_BOX = (-0.2, 0.2)


def in_inner_box(x):
    lo, hi = INNER_BOX
    return np.all((x > lo) & (x < hi), axis=-1)


def tc2():
    """Diffusion 2 on the inner box, k = sqrt(3) pi; u and grad u vanish on the inner box faces."""
    k = np.sqrt(3.0) * np.pi
    a = 2.5 * np.pi

    def factors(x):
        theta = a * (x - INNER_BOX[1])
        return np.sin(theta) ** 2, a * np.sin(2 * theta), 2 * a ** 2 * np.cos(2 * theta)

    def u(x):
        s, _, _ = factors(x)
        return np.prod(s, axis=-1) + 0j

    def grad(x):
        s, ds, _ = factors(x)
        return np.stack([ds[..., 0] * s[..., 1] * s[..., 2],
                         s[..., 0] * ds[..., 1] * s[..., 2],
                         s[..., 0] * s[..., 1] * ds[..., 2]], axis=-1) + 0j

    def laplacian(x):
        s, _, d2 = factors(x)
        return (d2[..., 0] * s[..., 1] * s[..., 2] + s[..., 0] * d2[..., 1] * s[..., 2]
                + s[..., 0] * s[..., 1] * d2[..., 2])

    def source(x):
        diffusion = np.where(in_inner_box(x), 2.0, 1.0)
        return -diffusion * laplacian(x) - k ** 2 * u(x)

    ext, ext_grad = _outgoing(k)
    coeffs = MediumCoefficients(k, diffusion={1: 2.0, "default": 1.0}, alpha_min=1.0, alpha_max=2.0)
    return ManufacturedCase("tc2", k, coeffs, u, grad, ext, ext_grad, source)


def poly_exact(k, p):
    """Degree p-1 polynomial inside and zero outside, reproduced exactly by the degree-p discretization."""
    a, b = 1.5, np.array([0.3, -0.2, 0.4])
    q = p - 1

    def u(x):
        return ((a + x @ b) ** q) + 0j

    def grad(x):
        if q == 0:
            return np.zeros(x.shape, dtype=complex)
        return (q * (a + x @ b) ** (q - 1))[..., None] * b + 0j

    def source(x):
        lap = q * (q - 1) * (b @ b) * (a + x @ b) ** (q - 2) if q >= 2 else 0.0
        return -lap - k ** 2 * u(x)

    return ManufacturedCase("poly-exact", k, MediumCoefficients(k), u, grad, _zero, _zero_grad, source)


def plane_wave(k, direction=(1.0, 0.0, 0.0)):
    """Plane wave on both sides; its exterior traces are not radiating."""
    d = np.asarray(direction, dtype=float)
    d = d / np.linalg.norm(d)

    def u(x):
        return np.exp(1j * k * (x @ d))

    def grad(x):
        return (1j * k * u(x))[..., None] * d

    return ManufacturedCase("plane-wave", k, MediumCoefficients(k), u, grad, u, grad, _zero, radiating=False)


CASE_NAMES = ("tc1", "tc2", "poly-exact")


def make_case(name, k, p=1):
    """Case by name; tc2 fixes its own wavenumber."""
    if name == "tc1":
        return tc1(k)
    if name == "tc2":
        return tc2()
    if name == "poly-exact":
        return poly_exact(k, p)
    raise KeyError(f"unknown case '{name}'")


@dataclass(frozen=True, eq=False)
class BlockSystem:
    k: float
    A: sp.csr_matrix
    B1: sp.csr_matrix
    B2: np.ndarray
    B3: np.ndarray
    B4: sp.csr_matrix
    B5: np.ndarray
    B6: np.ndarray
    f: np.ndarray
    r2: np.ndarray
    r3: np.ndarray
    S: sp.csr_matrix = field(repr=False)
    M: sp.csr_matrix = field(repr=False)
    R: sp.csr_matrix = field(repr=False)
    operators: object = field(repr=False)

    @property
    def dims(self):
        """(dim V_h, dim W_h, dim Z_h)."""
        return self.A.shape[0], self.B5.shape[0], self.B3.shape[0]

    @property
    def rhs(self):
        return np.concatenate([self.f, self.r2, self.r3])

    def full_matrix(self):
        """Dense monolithic matrix with row blocks (v, z, lambda)."""
        nv, nw, nz = self.dims
        top = np.hstack([self.A.toarray(), self.B1.toarray(), np.zeros((nv, nz), dtype=complex)])
        mid = np.hstack([np.zeros((nz, nv), dtype=complex), self.B2, self.B3])
        bot = np.hstack([self.B4.toarray(), self.B5, self.B6])
        return np.vstack([top, mid, bot])

    def matvec(self, u, m, uext):
        """Block product, independent of any factorization."""
        return np.concatenate([
            self.A @ u + self.B1 @ m,
            self.B2 @ m + self.B3 @ uext,
            self.B4 @ u + self.B5 @ m + self.B6 @ uext,
        ])


def trace_map(V_h, spaces):
    """Volume dof of every Z_h dof."""
    if V_h.degree != spaces.degree or V_h.surface.num_triangles != spaces.surface.num_triangles:
        raise DimensionError("volume and trace spaces are built on different meshes or degrees")
    trace = np.empty(spaces.num_z, dtype=np.int64)
    trace[spaces.z_dofs] = V_h.boundary_dofs
    return trace


def _mortar_pairing(V_h, spaces, operators):
    """C[i, j] = <psi_j, v_i> via the surface mass and the trace selection."""
    nw = spaces.num_w
    trace = trace_map(V_h, spaces)
    select = sp.csr_matrix((np.ones(spaces.num_z), (np.arange(spaces.num_z), trace)),
                           shape=(spaces.num_z, V_h.num_dofs))
    return (select.T @ operators.mass[nw:, :nw]).tocsr().astype(complex)


def assemble_blocks(k, coefficients, V_h, spaces, operators=None, settings=None, threads=1):
    """Block matrices with zero right-hand side."""
    if coefficients.k != k:
        raise DimensionError(f"coefficients carry k={coefficients.k}, expected {k}")
    S, M, R = assemble_interior(V_h, coefficients, threads)
    ops = operators or assemble_operators(k, spaces, bem.KERNELS, settings, threads)
    if ops.spaces is not spaces:
        raise DimensionError("operators assembled on different trace spaces")
    Bk, Ap = assemble_combined(k, spaces, ops)
    nw = spaces.num_w
    C = _mortar_pairing(V_h, spaces, ops)
    mass_wz = ops.block("M", "W", "Z")
    blocks = dict(
        k=k,
        A=(S - M + 1j * k * R).tocsr(),
        B1=-C,
        B2=-Ap[:, :nw],
        B3=Bk + 1j * k * Ap[:, nw:],
        B4=C.T.tocsr(),
        B5=ops.Vm.copy(),
        B6=-0.5 * mass_wz - ops.Km - 1j * k * ops.block("V", "W", "Z"),
        S=S, M=M, R=R, operators=ops,
    )
    nv, nz = V_h.num_dofs, spaces.num_z
    return BlockSystem(f=np.zeros(nv, dtype=complex), r2=np.zeros(nz, dtype=complex),
                       r3=np.zeros(nw, dtype=complex), **blocks)


def pair_with_w(spaces, func, degree=None):
    """(func, lambda_i) for a callable on surface points."""
    tri = triangle_rule(degree or 2 * spaces.degree + 2)
    bary = tri.barycentric()
    ntri = spaces.surface.num_triangles
    points = spaces.points(np.arange(ntri), np.broadcast_to(bary, (ntri,) + bary.shape))
    values = np.asarray(func(points), dtype=complex)
    local = np.einsum("t,q,tq,qi->ti", spaces.jac2, tri.weights, values, spaces.w_basis.values(bary))
    return local.ravel()


def apply_jump_corrections(case, system):
    """Right-hand sides r2, r3 for nonzero trace jumps g1, g2."""
    spaces = system.operators.spaces
    h_w = project_w(spaces, case.jump_impedance)
    r2 = system.B2 @ h_w
    r3 = pair_with_w(spaces, case.g1) + system.B5 @ h_w
    return replace(system, r2=r2, r3=r3)


def assemble_block_system(case, V_h, spaces, operators=None, settings=None, threads=1):
    """Blocks, load vector and jump-corrected right-hand sides for a manufactured case."""
    system = assemble_blocks(case.k, case.coefficients, V_h, spaces, operators, settings, threads)
    system = replace(system, f=assemble_load(V_h, case.source))
    system = apply_jump_corrections(case, system)
    log.info("block system %s: dims %s", case.name, system.dims)
    return system


def assemble_T_matrix(k, coefficients, V_h, spaces, operators=None, settings=None, threads=1, system=None):
    """Dense matrix of T with rows (v, lambda, z) and columns (u, m, uext)."""
    system = system or assemble_blocks(k, coefficients, V_h, spaces, operators, settings, threads)
    nv, nw, nz = system.dims
    row1 = np.hstack([system.A.toarray(), system.B1.toarray(), np.zeros((nv, nz), dtype=complex)])
    row3 = np.hstack([system.B4.toarray(), system.B5, system.B6])
    row2 = np.hstack([np.zeros((nz, nv), dtype=complex), -system.B2, -system.B3])
    return np.vstack([row1, row3, row2])


def exact_triple(case, V_h, spaces):
    """Interpolants of (u_int, m_exact, uext_exact) in V_h x W_h x Z_h."""
    return (interpolate(V_h, case.u_int), project_w(spaces, case.m_exact), interpolate_z(spaces, case.uext_exact))
