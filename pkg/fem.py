"""Continuous Lagrange finite elements on tetrahedra and interior assembly."""
from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from meshes import extract_boundary
from quadrature import MAX_VOLUME_DEGREE, triangle_rule, volume_quadrature

log = logging.getLogger(__name__)

SUPPORTED_DEGREES = (1, 2, 3)


class SpaceError(ValueError):
    pass


class CoefficientError(ValueError):
    def __init__(self, message, location=None):
        self.location = None if location is None else np.asarray(location)
        if location is not None:
            message = f"{message} at x = {np.array2string(self.location, precision=6)}"
        super().__init__(message)


def map_chunks(func, count, threads=1, chunk=256):
    """Apply ``func(start, stop)`` over ``range(count)`` in chunks; results come back in chunk order."""
    bounds = [(s, min(s + chunk, count)) for s in range(0, count, chunk)]
    if threads is None or threads <= 1 or len(bounds) <= 1:
        return [func(a, b) for a, b in bounds]
    if threads > len(bounds):
        log.warning("requested %d threads for %d chunks", threads, len(bounds))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: func(*ab), bounds))


def _factor(values, a, p):
    """prod_{j<a} (p t - j)/(j + 1) and its derivative in t."""
    value = np.ones_like(values)
    deriv = np.zeros_like(values)
    for j in range(a):
        term = (p * values - j) / (j + 1)
        deriv = deriv * term + value * p / (j + 1)
        value = value * term
    return value, deriv


class LagrangeBasis:
    """Equispaced nodal Lagrange basis of a given degree on the reference simplex.

    Nodes are indexed by barycentric multi-indices; vertex nodes come first,
    then edge, face and interior nodes. Degree 0 is the constant on the centroid.
    """

    def __init__(self, dim, degree):
        self.dim = dim
        self.degree = degree
        if degree == 0:
            self.indices = np.zeros((1, dim + 1), dtype=int)
        else:
            idx = [a for a in itertools.product(range(degree + 1), repeat=dim + 1) if sum(a) == degree]
            idx.sort(key=lambda a: (sum(1 for x in a if x > 0), [-x for x in a]))
            self.indices = np.array(idx, dtype=int)

    @property
    def size(self):
        return len(self.indices)

    def nodes(self):
        """Node positions in barycentric coordinates."""
        if self.degree == 0:
            return np.full((1, self.dim + 1), 1.0 / (self.dim + 1))
        return self.indices / self.degree

    def values(self, bary):
        """Basis values, shape bary.shape[:-1] + (size,)."""
        bary = np.asarray(bary, dtype=float)
        if self.degree == 0:
            return np.ones(bary.shape[:-1] + (1,))
        out = np.ones(bary.shape[:-1] + (self.size,))
        for n, alpha in enumerate(self.indices):
            for i, a in enumerate(alpha):
                if a:
                    out[..., n] *= _factor(bary[..., i], a, self.degree)[0]
        return out

    def reference_gradients(self, bary):
        """Gradients w.r.t. the reference coordinates (bary[..., 1:]), shape (..., size, dim)."""
        bary = np.asarray(bary, dtype=float)
        shape = bary.shape[:-1]
        grads = np.zeros(shape + (self.size, self.dim))
        if self.degree == 0:
            return grads
        for n, alpha in enumerate(self.indices):
            vals, ders = zip(*(_factor(bary[..., i], a, self.degree) for i, a in enumerate(alpha)))
            dlam = []
            for i in range(self.dim + 1):
                term = ders[i]
                for j in range(self.dim + 1):
                    if j != i:
                        term = term * vals[j]
                dlam.append(term)
            for k in range(self.dim):
                grads[..., n, k] = dlam[k + 1] - dlam[0]
        return grads

    def node_key(self, n, vertex_ids):
        """Mesh-independent identity of node ``n`` given the global ids of the simplex vertices."""
        alpha = self.indices[n]
        return tuple(sorted((int(v), int(a)) for v, a in zip(vertex_ids, alpha) if a > 0))


@lru_cache(maxsize=None)
def lagrange_basis(dim, degree):
    return LagrangeBasis(dim, degree)


@dataclass(frozen=True, eq=False)
class FESpace:
    """Continuous degree-p space on a VolumeMesh.

    ``boundary_dofs[t]`` lists the volume dofs on surface triangle ``t`` in the
    node order of ``lagrange_basis(2, p)`` applied to the triangle vertices.
    """

    mesh: object
    surface: object
    degree: int
    cell_dofs: np.ndarray
    dof_coords: np.ndarray
    boundary_dofs: np.ndarray
    dof_index: dict = field(repr=False)

    @property
    def num_dofs(self):
        return len(self.dof_coords)

    @property
    def basis(self):
        return lagrange_basis(3, self.degree)

    @property
    def face_basis(self):
        return lagrange_basis(2, self.degree)

    def boundary_dof_list(self):
        return np.unique(self.boundary_dofs)

    def jacobians(self):
        """Affine maps x = v0 + J xi per tet."""
        p = self.mesh.vertices[self.mesh.tets]
        return p[:, 0], np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)

    def physical_points(self, rule, cells=slice(None)):
        origin, jac = self.jacobians()
        return origin[cells, None, :] + np.einsum("tij,qj->tqi", jac[cells], rule.points)

    def evaluate(self, coefficients, rule):
        """Values and gradients of a discrete function at rule points of every tet."""
        _, jac = self.jacobians()
        inv_t = np.linalg.inv(jac).transpose(0, 2, 1)
        bary = rule.barycentric()
        phi = self.basis.values(bary)
        dphi = np.einsum("tij,qnj->tqni", inv_t, self.basis.reference_gradients(bary))
        local = np.asarray(coefficients)[self.cell_dofs]
        return np.einsum("qn,tn->tq", phi, local), np.einsum("tqni,tn->tqi", dphi, local)


def build_fe_space(mesh, p):
    """Continuous Lagrange space of degree p with boundary trace connectivity."""
    if p not in SUPPORTED_DEGREES:
        raise SpaceError(f"unsupported polynomial degree {p}")
    basis = lagrange_basis(3, p)
    nodes = basis.nodes()
    dof_index = {}
    coords = []
    cell_dofs = np.empty((mesh.num_tets, basis.size), dtype=np.int64)
    for t, tet in enumerate(mesh.tets):
        corners = mesh.vertices[tet]
        for n in range(basis.size):
            key = basis.node_key(n, tet)
            dof = dof_index.get(key)
            if dof is None:
                dof = len(coords)
                dof_index[key] = dof
                coords.append(nodes[n] @ corners)
            cell_dofs[t, n] = dof

    surface = extract_boundary(mesh)
    face_basis = lagrange_basis(2, p)
    boundary_dofs = np.empty((surface.num_triangles, face_basis.size), dtype=np.int64)
    for t, tri in enumerate(surface.triangles):
        parent = surface.volume_vertex[tri]
        for n in range(face_basis.size):
            boundary_dofs[t, n] = dof_index[face_basis.node_key(n, parent)]

    log.info("FE space p=%d: %d dofs on %d tets", p, len(coords), mesh.num_tets)
    return FESpace(mesh, surface, p, cell_dofs, np.array(coords), boundary_dofs, dof_index)


def _field(source, points, tags):
    if callable(source):
        flat = np.asarray(points).reshape(-1, 3)
        values = np.broadcast_to(np.asarray(source(flat), dtype=complex), flat.shape[:1])
        return values.reshape(points.shape[:-1])
    if isinstance(source, dict):
        lookup = np.vectorize(lambda t: source.get(int(t), source.get("default", 1.0)), otypes=[complex])
        return np.broadcast_to(lookup(tags)[:, None], points.shape[:-1]).astype(complex)
    return np.full(points.shape[:-1], source, dtype=complex)


@dataclass(frozen=True)
class MediumCoefficients:
    """Wavenumber, diffusion A and refraction index n.

    A and n are constants, dicts keyed by region tag (``"default"`` fallback)
    or callables on (N, 3) point arrays returning (N,) values.
    """

    k: float
    diffusion: object = 1.0
    refraction: object = 1.0
    alpha_min: float = 1e-12
    alpha_max: float = np.inf
    c0: float = 1e-12

    def __post_init__(self):
        if self.k < 0:
            raise CoefficientError(f"wavenumber must be nonnegative, got {self.k}")

    def diffusion_at(self, points, tags):
        return _field(self.diffusion, points, tags)

    def refraction_at(self, points, tags):
        return _field(self.refraction, points, tags)

    def check(self, space, rule):
        """Validate bounds at quadrature points; A = n = 1 on tets touching the boundary."""
        mesh = space.mesh
        points = space.physical_points(rule)
        a = self.diffusion_at(points, mesh.region_tags)
        n = self.refraction_at(points, mesh.region_tags)
        bad = (np.abs(a.imag) > 1e-14) | (a.real < self.alpha_min) | (a.real > self.alpha_max)
        if np.any(bad):
            t, q = np.argwhere(bad)[0]
            raise CoefficientError(f"diffusion {a[t, q]} outside [{self.alpha_min}, {self.alpha_max}]", points[t, q])
        bad = np.abs(n) < self.c0
        if np.any(bad):
            t, q = np.argwhere(bad)[0]
            raise CoefficientError(f"refraction |n| below {self.c0}", points[t, q])
        touching = np.isin(mesh.tets, space.surface.volume_vertex).any(axis=1)
        off = (np.abs(a - 1.0) > 1e-12) | (np.abs(n - 1.0) > 1e-12)
        off &= touching[:, None]
        if np.any(off):
            t, q = np.argwhere(off)[0]
            raise CoefficientError("coefficients must equal 1 on tets touching the boundary", points[t, q])


def _coo(rows, cols, vals, n):
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _local_pattern(dofs):
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    return rows, cols


def assemble_interior(space, coeffs, threads=1, degree=None):
    """Stiffness S = (A grad u, grad v), mass M = ((k n)^2 u, v) and boundary mass R = (u, v)_Gamma."""
    p = space.degree
    rule = volume_quadrature(min(degree or 2 * p, MAX_VOLUME_DEGREE))
    coeffs.check(space, rule)
    bary = rule.barycentric()
    phi = space.basis.values(bary)
    ref_grad = space.basis.reference_gradients(bary)
    origin, jac = space.jacobians()
    tags = space.mesh.region_tags

    def element_block(start, stop):
        det = np.abs(np.linalg.det(jac[start:stop]))
        inv_t = np.linalg.inv(jac[start:stop]).transpose(0, 2, 1)
        grads = np.einsum("tij,qnj->tqni", inv_t, ref_grad)
        points = origin[start:stop, None, :] + np.einsum("tij,qj->tqi", jac[start:stop], rule.points)
        a = coeffs.diffusion_at(points, tags[start:stop])
        n = coeffs.refraction_at(points, tags[start:stop])
        wdet = rule.weights[None, :] * det[:, None]
        s_loc = np.einsum("tq,tqic,tqjc->tij", wdet * a, grads, grads)
        m_loc = np.einsum("tq,qi,qj->tij", wdet * (coeffs.k * n) ** 2, phi, phi)
        return s_loc, m_loc

    blocks = map_chunks(element_block, space.mesh.num_tets, threads)
    s_vals = np.concatenate([b[0] for b in blocks]).ravel()
    m_vals = np.concatenate([b[1] for b in blocks]).ravel()
    rows, cols = _local_pattern(space.cell_dofs)
    n = space.num_dofs
    S = _coo(rows, cols, s_vals, n)
    M = _coo(rows, cols, m_vals, n)
    R = boundary_mass(space, degree=degree)
    log.info("interior blocks assembled: %d dofs, %d nonzeros", n, S.nnz)
    return S, M, R


def boundary_mass(space, degree=None):
    """(u, v)_Gamma on the boundary dofs of the volume space."""
    tri = triangle_rule(degree or 2 * space.degree)
    phi = space.face_basis.values(tri.barycentric())
    local = np.einsum("q,qi,qj->ij", tri.weights, phi, phi)
    vals = (2.0 * space.surface.areas)[:, None, None] * local[None]
    rows, cols = _local_pattern(space.boundary_dofs)
    return _coo(rows, cols, vals.ravel().astype(complex), space.num_dofs)


def assemble_load(space, f, degree=None):
    """Load vector (f, phi_i) for a callable f on (N, 3) points."""
    rule = volume_quadrature(min(degree or 2 * space.degree + 2, MAX_VOLUME_DEGREE))
    points = space.physical_points(rule)
    values = np.asarray(f(points.reshape(-1, 3)), dtype=complex).reshape(points.shape[:2])
    _, jac = space.jacobians()
    det = np.abs(np.linalg.det(jac))
    phi = space.basis.values(rule.barycentric())
    local = np.einsum("t,q,tq,qi->ti", det, rule.weights, values, phi)
    idx = space.cell_dofs.ravel()
    n = space.num_dofs
    return (np.bincount(idx, local.real.ravel(), minlength=n)
            + 1j * np.bincount(idx, local.imag.ravel(), minlength=n))


def interpolate(space, func):
    """Nodal interpolant of a callable on (N, 3) points."""
    return np.asarray(func(space.dof_coords), dtype=complex)
