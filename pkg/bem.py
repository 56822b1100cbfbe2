"""Galerkin boundary element operators for the Helmholtz equation.

Conventions: G_k(x, y) = exp(ik|x-y|) / (4 pi |x-y|), normals point out of
the interior domain, Galerkin matrices are indexed [test, trial]:

    V[i, j]  = <V phi_j, phi_i>,   kernel G
    K[i, j]  = <K z_j, mu_i>,      kernel dG/dn(y)
    Kp[i, j] = <K' mu_j, z_i>,     kernel dG/dn(x)
    W[i, j]  = <W z_j, w_i>,       Maue form with surface curls

With these kernels the interior trace of the double layer potential is
(-1/2 + K) psi and its jump (interior minus exterior) is -psi.

All operators are assembled on the combined space W_h + Z_h (W_h dofs
first), then sliced.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve
from scipy.spatial import cKDTree

from fem import SUPPORTED_DEGREES, SpaceError, lagrange_basis, map_chunks
from quadrature import gauss_legendre, panel_quadrature, triangle_rule

log = logging.getLogger(__name__)

KERNELS = ("V", "K", "Kp", "W")
# points x pairs evaluated per chunk
CHUNK_BUDGET = 1_500_000


class KernelError(ValueError):
    pass


def green_kernel(k, x, y):
    """Helmholtz fundamental solution for broadcastable point arrays."""
    r = np.linalg.norm(np.asarray(x, dtype=float) - np.asarray(y, dtype=float), axis=-1)
    if np.any(r == 0):
        raise KernelError("coincident points")
    return np.exp(1j * k * r) / (4 * np.pi * r)


def _radial(k, r):
    """G and g1 with grad_x G = g1 (x - y)."""
    G = np.exp(1j * k * r) / (4 * np.pi * r)
    return G, G * (1j * k * r - 1.0) / r ** 2


@dataclass(frozen=True)
class QuadratureSettings:
    """Panel-pair quadrature; ``None`` point counts scale with the degree."""

    far_points: int | None = None
    near_points: int | None = None
    singular_order: int = 8
    near_factor: float = 2.0
    potential_order: int = 12

    def resolved(self, p):
        far = self.far_points or p + 1
        near = self.near_points or far + 2
        return far, near, self.singular_order


@dataclass(frozen=True, eq=False)
class TraceSpaces:
    """W_h (discontinuous, degree p-1) and Z_h (continuous, degree p) on one surface."""

    surface: object
    degree: int
    w_dofs: np.ndarray
    z_dofs: np.ndarray
    z_coords: np.ndarray
    z_keys: list = field(repr=False)
    corners: np.ndarray = field(repr=False)
    jac2: np.ndarray = field(repr=False)
    pinv: np.ndarray = field(repr=False)

    @property
    def w_basis(self):
        return lagrange_basis(2, self.degree - 1)

    @property
    def z_basis(self):
        return lagrange_basis(2, self.degree)

    @property
    def num_w(self):
        return int(self.w_dofs.size)

    @property
    def num_z(self):
        return len(self.z_coords)

    @property
    def num_combined(self):
        return self.num_w + self.num_z

    @property
    def combined_dofs(self):
        return np.hstack([self.w_dofs, self.z_dofs + self.num_w])

    def combined_values(self, bary):
        return np.concatenate([self.w_basis.values(bary), self.z_basis.values(bary)], axis=-1)

    def surface_gradients(self, panels, bary):
        """Surface gradients of the Z_h basis, shape bary.shape[:-1] + (nz, 3)."""
        ref = self.z_basis.reference_gradients(bary)
        return np.einsum("...kc,...qnk->...qnc", self.pinv[panels], ref)

    def surface_curls(self, panels, bary):
        grads = self.surface_gradients(panels, bary)
        normals = self.surface.normals[panels]
        return np.cross(normals[..., None, None, :], grads)

    def points(self, panels, bary):
        return np.einsum("...qa,...ac->...qc", bary, self.corners[panels])


def build_trace_spaces(surface, p):
    """W_h of degree p-1 per panel and continuous Z_h of degree p, dofs keyed by parent vertex ids."""
    if p not in SUPPORTED_DEGREES:
        raise SpaceError(f"unsupported polynomial degree {p}")
    w_basis, z_basis = lagrange_basis(2, p - 1), lagrange_basis(2, p)
    ntri = surface.num_triangles
    w_dofs = np.arange(ntri * w_basis.size, dtype=np.int64).reshape(ntri, w_basis.size)

    index, keys, coords = {}, [], []
    z_dofs = np.empty((ntri, z_basis.size), dtype=np.int64)
    nodes = z_basis.nodes()
    for t, tri in enumerate(surface.triangles):
        parent = surface.volume_vertex[tri]
        corners = surface.vertices[tri]
        for n in range(z_basis.size):
            key = z_basis.node_key(n, parent)
            dof = index.get(key)
            if dof is None:
                dof = len(keys)
                index[key] = dof
                keys.append(key)
                coords.append(nodes[n] @ corners)
            z_dofs[t, n] = dof

    corners = surface.vertices[surface.triangles]
    edges = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
    metric = np.einsum("tci,tcj->tij", edges, edges)
    pinv = np.einsum("tij,tcj->tic", np.linalg.inv(metric), edges)
    return TraceSpaces(surface, p, w_dofs, z_dofs, np.array(coords), keys, corners, 2.0 * surface.areas, pinv)


def surface_mass(spaces, degree=None):
    """L2 pairing on the combined space (W_h first), sparse."""
    tri = triangle_rule(degree or 2 * spaces.degree)
    phi = spaces.combined_values(tri.barycentric())
    local = np.einsum("q,qi,qj->ij", tri.weights, phi, phi)
    vals = spaces.jac2[:, None, None] * local[None]
    dofs = spaces.combined_dofs
    nloc = dofs.shape[1]
    rows = np.repeat(dofs, nloc, axis=1).ravel()
    cols = np.tile(dofs, (1, nloc)).ravel()
    n = spaces.num_combined
    return sp.coo_matrix((vals.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def shared_vertex_counts(surface):
    """Sparse matrix of shared-vertex counts between panels."""
    ntri = surface.num_triangles
    incidence = sp.csr_matrix(
        (np.ones(3 * ntri), (np.repeat(np.arange(ntri), 3), surface.triangles.ravel())),
        shape=(ntri, len(surface.vertices)),
    )
    return (incidence @ incidence.T).tocsr()


def classify_pairs(surface, near_factor=2.0):
    """Unordered panel pairs by class: identical, edge, vertex and near (non-touching but close)."""
    shared = sp.triu(shared_vertex_counts(surface), k=1).tocoo()
    pairs = {
        "identical": np.column_stack([np.arange(surface.num_triangles)] * 2),
        "edge": np.column_stack([shared.row, shared.col])[shared.data == 2],
        "vertex": np.column_stack([shared.row, shared.col])[shared.data == 1],
    }
    centroids = surface.centroids()
    diam = surface.diameters()
    tree = cKDTree(centroids)
    candidates = np.array(sorted(tree.query_pairs(near_factor * diam.max())), dtype=np.int64).reshape(-1, 2)
    if len(candidates):
        dist = np.linalg.norm(centroids[candidates[:, 0]] - centroids[candidates[:, 1]], axis=1)
        close = dist < near_factor * np.maximum(diam[candidates[:, 0]], diam[candidates[:, 1]])
        candidates = candidates[close]
        touching = np.asarray(shared_vertex_counts(surface)[candidates[:, 0], candidates[:, 1]]).ravel() > 0
        candidates = candidates[~touching]
    pairs["near"] = candidates
    return pairs


def _canonical_order(tri_a, tri_b, pair_class):
    """Local vertex permutations putting shared vertices first, shared edge equally oriented."""
    if pair_class == "identical":
        return [0, 1, 2], [0, 1, 2]
    common = [v for v in tri_a if v in tri_b]
    pa = [list(tri_a).index(v) for v in common]
    pb = [list(tri_b).index(v) for v in common]
    pa += [i for i in range(3) if i not in pa]
    pb += [i for i in range(3) if i not in pb]
    return pa, pb


@dataclass(frozen=True, eq=False)
class BemOperatorSet:
    """Assembled operators on the combined space and their W_h / Z_h blocks."""

    k: float
    spaces: TraceSpaces
    full: dict
    mass: object

    def block(self, name, test, trial):
        nw = self.spaces.num_w
        sl = {"W": slice(0, nw), "Z": slice(nw, None)}
        if name == "M":
            return self.mass[sl[test], sl[trial]].toarray()
        return self.full[name][sl[test], sl[trial]]

    @property
    def Vm(self):
        return self.block("V", "W", "W")

    @property
    def Km(self):
        return self.block("K", "W", "Z")

    @property
    def Kpm(self):
        return self.block("Kp", "Z", "W")

    @property
    def Wm(self):
        return self.block("W", "Z", "Z")


def _kernel_terms(k, kernels, d, r, na, nb):
    """Kernel arrays for the requested operators."""
    G, g1 = _radial(k, r)
    out = {}
    if "V" in kernels or "W" in kernels:
        out["G"] = G
    if "K" in kernels:
        out["K"] = -g1 * (d * nb).sum(axis=-1)
    if "Kp" in kernels:
        out["Kp"] = g1 * (d * na).sum(axis=-1)
    return out


def _tensor_blocks(k, kernels, spaces, a, b, xa_bary, yb_bary, weights):
    """Local matrices for pairs (a[i], b[i]) under a tensor rule; shapes (P, nloc, nloc)."""
    phi_x = spaces.combined_values(xa_bary)
    phi_y = spaces.combined_values(yb_bary)
    X = spaces.points(a, np.broadcast_to(xa_bary, (len(a),) + xa_bary.shape))
    Y = spaces.points(b, np.broadcast_to(yb_bary, (len(b),) + yb_bary.shape))
    d = X[:, :, None, :] - Y[:, None, :, :]
    r = np.linalg.norm(d, axis=-1)
    na = spaces.surface.normals[a][:, None, None, :]
    nb = spaces.surface.normals[b][:, None, None, :]
    w = (spaces.jac2[a] * spaces.jac2[b])[:, None, None] * weights[None]
    terms = _kernel_terms(k, kernels, d, r, na, nb)
    out = {}
    for name in ("K", "Kp"):
        if name in terms:
            out[name] = np.einsum("pqr,qi,rj->pij", w * terms[name], phi_x, phi_y)
    if "G" in terms:
        wg = w * terms["G"]
        out["V"] = np.einsum("pqr,qi,rj->pij", wg, phi_x, phi_y)
        if "W" in kernels:
            nw = spaces.w_basis.size
            cx = spaces.surface_curls(a, np.broadcast_to(xa_bary, (len(a),) + xa_bary.shape))
            cy = spaces.surface_curls(b, np.broadcast_to(yb_bary, (len(b),) + yb_bary.shape))
            ndot = np.einsum("pc,pc->p", spaces.surface.normals[a], spaces.surface.normals[b])
            out["W"] = (np.einsum("pqr,pqic,prjc->pij", wg, cx, cy)
                        - k ** 2 * ndot[:, None, None] * out["V"][:, nw:, nw:])
    return out


def _diagonal_blocks(k, kernels, spaces, a, b, xa_bary, yb_bary, weights):
    """Local matrices for pairs with per-pair point lists (singular rules)."""
    phi_x = spaces.combined_values(xa_bary)
    phi_y = spaces.combined_values(yb_bary)
    X = spaces.points(a, xa_bary)
    Y = spaces.points(b, yb_bary)
    d = X - Y
    r = np.linalg.norm(d, axis=-1)
    na = spaces.surface.normals[a][:, None, :]
    nb = spaces.surface.normals[b][:, None, :]
    w = (spaces.jac2[a] * spaces.jac2[b])[:, None] * weights[None]
    terms = _kernel_terms(k, kernels, d, r, na, nb)
    out = {}
    for name in ("K", "Kp"):
        if name in terms:
            out[name] = np.einsum("pq,pqi,pqj->pij", w * terms[name], phi_x, phi_y)
    if "G" in terms:
        wg = w * terms["G"]
        out["V"] = np.einsum("pq,pqi,pqj->pij", wg, phi_x, phi_y)
        if "W" in kernels:
            nw = spaces.w_basis.size
            cx = spaces.surface_curls(a, xa_bary)
            cy = spaces.surface_curls(b, yb_bary)
            ndot = np.einsum("pc,pc->p", spaces.surface.normals[a], spaces.surface.normals[b])
            out["W"] = (np.einsum("pq,pqic,pqjc->pij", wg, cx, cy)
                        - k ** 2 * ndot[:, None, None] * out["V"][:, nw:, nw:])
    return out


def _scatter(matrix, rows, cols, vals):
    n = matrix.shape[1]
    rr = np.broadcast_to(rows[:, :, None], vals.shape).ravel()
    cc = np.broadcast_to(cols[:, None, :], vals.shape).ravel()
    vals = vals.ravel()
    if vals.size > matrix.size // 8:
        flat = matrix.reshape(-1)
        idx = rr * n + cc
        flat += np.bincount(idx, vals.real, minlength=matrix.size)
        flat += 1j * np.bincount(idx, vals.imag, minlength=matrix.size)
    else:
        np.add.at(matrix, (rr, cc), vals)


class _Accumulator:
    """Dense operator matrices filled from local pair blocks."""

    def __init__(self, spaces, kernels):
        n = spaces.num_combined
        self.spaces = spaces
        self.mats = {name: np.zeros((n, n), dtype=complex) for name in kernels}
        self.dofs = spaces.combined_dofs
        self.zdofs = spaces.z_dofs + spaces.num_w

    def add(self, a, b, blocks, mirror):
        """Add blocks for (a, b); with ``mirror`` also fill (b, a) by transposition."""
        swap = {"V": "V", "W": "W", "K": "Kp", "Kp": "K"}
        for name, mat in self.mats.items():
            dofs = self.zdofs if name == "W" else self.dofs
            local = blocks[name]
            _scatter(mat, dofs[a], dofs[b], local)
            if mirror:
                _scatter(mat, dofs[b], dofs[a], blocks[swap[name]].transpose(0, 2, 1))


def _chunk_size(points_per_pair, pairs_per_row=1):
    return max(1, int(CHUNK_BUDGET // max(1, points_per_pair * pairs_per_row)))


def assemble_operators(k, spaces, kernels=KERNELS, settings=None, threads=1):
    """Assemble the requested operators in one sweep over panel pairs."""
    settings = settings or QuadratureSettings()
    kernels = tuple(kernels)
    unknown = set(kernels) - set(KERNELS)
    if unknown:
        raise KernelError(f"unknown operators {sorted(unknown)}")
    started = time.time()
    surface = spaces.surface
    ntri = surface.num_triangles
    far_n, near_n, sing_n = settings.resolved(spaces.degree)
    pairs = classify_pairs(surface, settings.near_factor)
    acc = _Accumulator(spaces, kernels)
    # mirrored fills need both double layer variants
    local_kernels = set(kernels) | ({"K", "Kp"} if {"K", "Kp"} & set(kernels) else set())

    excluded = shared_vertex_counts(surface).tolil()
    for a, b in pairs["near"]:
        excluded[a, b] = 1
        excluded[b, a] = 1
    for a in range(ntri):
        excluded[a, a] = 1
    excluded = excluded.tocsr()

    far = panel_quadrature("far", far_n)
    nq = triangle_rule(2 * far_n - 1).size
    xq = far.x[::nq]
    yq = far.y[:nq]
    ww = far.weights.reshape(nq, nq)

    def far_rows(start, stop):
        mask = excluded[start:stop].toarray() == 0
        a, b = np.nonzero(mask)
        a = a + start
        return a, b, _tensor_blocks(k, local_kernels, spaces, a, b, xq, yq, ww)

    rows_per_chunk = _chunk_size(nq * nq, ntri)
    for a, b, blocks in map_chunks(far_rows, ntri, threads, rows_per_chunk):
        acc.add(a, b, blocks, mirror=False)

    near_pairs = pairs["near"]
    if len(near_pairs):
        near = panel_quadrature("far", near_n)
        mq = triangle_rule(2 * near_n - 1).size
        xn, yn, wn = near.x[::mq], near.y[:mq], near.weights.reshape(mq, mq)

        def near_chunk(start, stop):
            a, b = near_pairs[start:stop, 0], near_pairs[start:stop, 1]
            return a, b, _tensor_blocks(k, local_kernels, spaces, a, b, xn, yn, wn)

        for a, b, blocks in map_chunks(near_chunk, len(near_pairs), threads, _chunk_size(mq * mq)):
            acc.add(a, b, blocks, mirror=True)

    for pair_class in ("identical", "edge", "vertex"):
        plist = pairs[pair_class]
        if not len(plist):
            continue
        rule = panel_quadrature(pair_class, sing_n)
        perms = [_canonical_order(surface.triangles[a], surface.triangles[b], pair_class) for a, b in plist]

        def singular_chunk(start, stop, plist=plist, rule=rule, perms=perms):
            a, b = plist[start:stop, 0], plist[start:stop, 1]
            inv_a = np.argsort(np.array([p[0] for p in perms[start:stop]]), axis=1)
            inv_b = np.argsort(np.array([p[1] for p in perms[start:stop]]), axis=1)
            # canonical barycentrics back to each panel's local vertex order
            xb = np.take_along_axis(np.broadcast_to(rule.x, (len(a),) + rule.x.shape), inv_a[:, None, :], axis=2)
            yb = np.take_along_axis(np.broadcast_to(rule.y, (len(b),) + rule.y.shape), inv_b[:, None, :], axis=2)
            return a, b, _diagonal_blocks(k, local_kernels, spaces, a, b, xb, yb, rule.weights)

        for a, b, blocks in map_chunks(singular_chunk, len(plist), threads, _chunk_size(rule.size)):
            if pair_class == "identical":
                for name in ("V", "W"):
                    if name in blocks:
                        blocks[name] = 0.5 * (blocks[name] + blocks[name].transpose(0, 2, 1))
                for name in ("K", "Kp"):
                    if name in blocks:
                        blocks[name] = np.zeros_like(blocks[name])
                acc.add(a, b, blocks, mirror=False)
            else:
                acc.add(a, b, blocks, mirror=True)

    log.info("assembled %s at k=%.6g on %d panels in %.2fs", ",".join(kernels), k, ntri, time.time() - started)
    return BemOperatorSet(k, spaces, acc.mats, surface_mass(spaces))


def assemble_V(k, spaces, settings=None, threads=1):
    """Single layer on W_h x W_h."""
    return assemble_operators(k, spaces, ("V",), settings, threads).Vm


def assemble_K(k, spaces, settings=None, threads=1):
    """Double layer, Z_h trial tested with W_h."""
    return assemble_operators(k, spaces, ("K",), settings, threads).Km


def assemble_Kp(k, spaces, settings=None, threads=1):
    """Adjoint double layer, W_h trial tested with Z_h."""
    return assemble_operators(k, spaces, ("Kp",), settings, threads).Kpm


def assemble_W(k, spaces, settings=None, threads=1, trial="Z"):
    """Hypersingular operator on Z_h x Z_h in Maue form."""
    if trial != "Z":
        raise SpaceError("hypersingular operator needs the continuous space Z_h as trial space")
    return assemble_operators(k, spaces, ("W",), settings, threads).Wm


def assemble_combined(k, spaces, operators=None, settings=None, threads=1):
    """B = -W - ik(1/2 - K) on Z_h x Z_h and A' = 1/2 + K' + ikV tested with Z_h on W_h + Z_h."""
    ops = operators or assemble_operators(k, spaces, KERNELS, settings, threads)
    if ops.spaces is not spaces or ops.k != k:
        raise KernelError("operator set was assembled for different spaces or wavenumber")
    nw = spaces.num_w
    mass_z = ops.mass[nw:, :].toarray()
    B = -ops.Wm - 1j * k * (0.5 * mass_z[:, nw:] - ops.full["K"][nw:, nw:])
    Ap = 0.5 * mass_z + ops.full["Kp"][nw:, :] + 1j * k * ops.full["V"][nw:, :]
    return B, Ap


def export_operators(operators, directory, prefix="bem"):
    """Write the four operator blocks in Matrix Market format."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for name in ("Vm", "Km", "Kpm", "Wm"):
        path = directory / f"{prefix}_{name}.mtx"
        scipy.io.mmwrite(str(path), getattr(operators, name))
        written.append(path)
    return written


# --- surface functions -------------------------------------------------------

def interpolate_z(spaces, func):
    """Nodal interpolant in Z_h."""
    return np.asarray(func(spaces.z_coords), dtype=complex)


def project_w(spaces, func, degree=None):
    """Panelwise L2 projection into W_h of ``func(points, normals)``."""
    tri = triangle_rule(degree or 2 * spaces.degree + 2)
    bary = tri.barycentric()
    ntri = spaces.surface.num_triangles
    panels = np.arange(ntri)
    points = spaces.points(panels, np.broadcast_to(bary, (ntri,) + bary.shape))
    normals = np.broadcast_to(spaces.surface.normals[:, None, :], points.shape)
    values = np.asarray(func(points, normals), dtype=complex).reshape(ntri, tri.size)
    psi = spaces.w_basis.values(bary)
    local_mass = np.einsum("q,qi,qj->ij", tri.weights, psi, psi)
    rhs = np.einsum("q,tq,qi->ti", tri.weights, values, psi)
    coeffs = np.linalg.solve(local_mass, rhs.T).T
    return coeffs.ravel()


def surface_values(spaces, coefficients, which, bary):
    """Values of a W_h or Z_h function at barycentric points on every panel, shape (ntri, nq)."""
    if which == "W":
        return np.einsum("qi,ti->tq", spaces.w_basis.values(bary), np.asarray(coefficients)[spaces.w_dofs])
    return np.einsum("qi,ti->tq", spaces.z_basis.values(bary), np.asarray(coefficients)[spaces.z_dofs])


# --- potentials ---------------------------------------------------------------

def _closest_point(p, corners):
    """Closest point of a triangle to a point ``p`` in its plane."""
    e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
    metric = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    xi = np.linalg.solve(metric, [e1 @ (p - corners[0]), e2 @ (p - corners[0])])
    if xi.min() >= 0 and xi.sum() <= 1:
        return p
    best = None
    for i in range(3):
        a, b = corners[i], corners[(i + 1) % 3]
        s = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0.0, 1.0)
        q = a + s * (b - a)
        if best is None or np.linalg.norm(p - q) < np.linalg.norm(p - best):
            best = q
    return best


def _polar_rule(x, corners, normal, order):
    """Polar rule for one point and one panel, centred at the panel point closest to x.

    Returns points y (m, 3) and area weights (m,). The radial variable uses a
    sinh substitution scaled by the distance from x to the centre.
    """
    height = np.dot(x - corners[0], normal)
    centre = _closest_point(x - height * normal, corners)
    eps = np.linalg.norm(x - centre)
    area2 = np.linalg.norm(np.cross(corners[1] - corners[0], corners[2] - corners[0]))
    u, wu = gauss_legendre(order)
    t, wt = gauss_legendre(order)
    ys, ws = [], []
    for i in range(3):
        v0, v1 = corners[i], corners[(i + 1) % 3]
        c = np.dot(np.cross(v0 - centre, v1 - centre), normal)
        # centre on this edge
        if abs(c) <= 1e-12 * area2:
            continue
        w = (v0 - centre)[None, :] + t[:, None] * (v1 - v0)[None, :]
        rho = np.linalg.norm(w, axis=1)
        if eps > 1e-14 * rho.max():
            mu = np.arcsinh(rho / eps)
            s = (eps / rho)[:, None] * np.sinh(mu[:, None] * u[None, :])
            ds = (eps / rho * mu)[:, None] * np.cosh(mu[:, None] * u[None, :])
        else:
            s = np.broadcast_to(u[None, :], (order, order))
            ds = np.ones((order, order))
        ys.append((centre[None, None, :] + s[:, :, None] * w[:, None, :]).reshape(-1, 3))
        ws.append((c * s * ds * wt[:, None] * wu[None, :]).ravel())
    return np.vstack(ys), np.concatenate(ws)


def _on_panel(x, corners, normal, diam):
    height = np.dot(x - corners[0], normal)
    if abs(height) > 1e-12 * diam:
        return False
    e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
    metric = np.array([[e1 @ e1, e1 @ e2], [e1 @ e2, e2 @ e2]])
    xi = np.linalg.solve(metric, [e1 @ (x - corners[0]), e2 @ (x - corners[0])])
    return xi.min() >= -1e-12 and xi.sum() <= 1 + 1e-12


def eval_potentials(k, spaces, density, points, kind="single", which=None, gradient=False, order=None):
    """Single or double layer potential (or its gradient) of a surface density at points off the surface.

    ``which`` selects the density space ("W" or "Z"); defaults to W for the
    single layer and Z for the double layer.
    """
    if kind not in ("single", "double"):
        raise KernelError(f"unknown potential '{kind}'")
    which = which or ("W" if kind == "single" else "Z")
    order = order or QuadratureSettings().potential_order
    points = np.atleast_2d(np.asarray(points, dtype=float))
    surface = spaces.surface
    basis = spaces.w_basis if which == "W" else spaces.z_basis
    dofs = spaces.w_dofs if which == "W" else spaces.z_dofs
    local = np.asarray(density, dtype=complex)[dofs]
    diam = surface.diameters()
    centroids = surface.centroids()

    far_rule = triangle_rule(2 * order - 1)
    far_bary = far_rule.barycentric()
    far_phi = basis.values(far_bary) @ local.T
    far_y = spaces.points(np.arange(surface.num_triangles), np.broadcast_to(far_bary, (surface.num_triangles,) + far_bary.shape))

    out = np.zeros((len(points), 3) if gradient else len(points), dtype=complex)
    for i, x in enumerate(points):
        dist = np.linalg.norm(centroids - x, axis=1)
        near = np.flatnonzero(dist < 3.0 * diam)
        far = np.setdiff1d(np.arange(surface.num_triangles), near)
        ys = [far_y[far].reshape(-1, 3)]
        ws = [(spaces.jac2[far][:, None] * far_rule.weights[None, :] * far_phi[:, far].T).ravel()]
        ns = [np.repeat(surface.normals[far], far_rule.size, axis=0)]
        for t in near:
            corners = spaces.corners[t]
            if _on_panel(x, corners, surface.normals[t], diam[t]):
                raise KernelError(f"evaluation point {x} lies on panel {t}")
            y, w = _polar_rule(x, corners, surface.normals[t], order)
            xi = np.einsum("kc,mc->mk", spaces.pinv[t], y - corners[0])
            bary = np.column_stack([1.0 - xi.sum(axis=1), xi])
            ys.append(y)
            ws.append(w * (basis.values(bary) @ local[t]))
            ns.append(np.repeat(surface.normals[t][None, :], len(y), axis=0))
        y = np.vstack(ys)
        w = np.concatenate(ws)
        ny = np.vstack(ns)
        d = x[None, :] - y
        r = np.linalg.norm(d, axis=1)
        G, g1 = _radial(k, r)
        dn = np.einsum("mc,mc->m", d, ny)
        if kind == "single":
            out[i] = (w * g1) @ d if gradient else w @ G
        elif not gradient:
            out[i] = w @ (-g1 * dn)
        else:
            g1p = np.exp(1j * k * r) / (4 * np.pi * r ** 4) * (3.0 - 3j * k * r - (k * r) ** 2)
            out[i] = -(w * g1) @ ny - (w * dn * g1p / r) @ d
    return out


def jump_relation_probe(k, spaces, phi, psi, offset, order, panels=None):
    """Offset estimates of the four jump relations at panel centroids.

    Returns relative magnitudes of [V phi], [dn V phi] - phi, [K psi] + psi and
    [dn K psi], each normalised by the density size at the probed points.
    """
    surface = spaces.surface
    if panels is None:
        panels = np.linspace(0, surface.num_triangles - 1, min(6, surface.num_triangles)).astype(int)
    centre = surface.centroids()[panels]
    normal = surface.normals[panels]
    h = surface.diameters()[panels][:, None]
    inside = centre - offset * h * normal
    outside = centre + offset * h * normal
    third = np.full((1, 3), 1.0 / 3.0)
    phi_c = surface_values(spaces, phi, "W", third)[panels, 0]
    psi_c = surface_values(spaces, psi, "Z", third)[panels, 0]

    def normal_jump(kind, density):
        g_in = eval_potentials(k, spaces, density, inside, kind, gradient=True, order=order)
        g_out = eval_potentials(k, spaces, density, outside, kind, gradient=True, order=order)
        return np.einsum("pc,pc->p", g_in - g_out, normal)

    v_jump = (eval_potentials(k, spaces, phi, inside, "single", order=order)
              - eval_potentials(k, spaces, phi, outside, "single", order=order))
    k_jump = (eval_potentials(k, spaces, psi, inside, "double", order=order)
              - eval_potentials(k, spaces, psi, outside, "double", order=order))
    phi_scale = np.abs(phi_c).max() or 1.0
    psi_scale = np.abs(psi_c).max() or 1.0
    return {
        "V": float(np.abs(v_jump).max() / phi_scale),
        "dnV": float(np.abs(normal_jump("single", phi) - phi_c).max() / phi_scale),
        "K": float(np.abs(k_jump + psi_c).max() / psi_scale),
        "dnK": float(np.abs(normal_jump("double", psi)).max() / psi_scale),
    }


def _dual_norm(residual, mass):
    """L2 norm of the Riesz representative of a tested residual."""
    sol = spsolve(sp.csc_matrix(mass), residual)
    return float(np.sqrt(abs(np.vdot(residual, sol).real)))


def calderon_residual(k, operators, g0, g1):
    """Residual norms of the exterior Calderon identities for Z_h Dirichlet and W_h Neumann data.

    r1 tests (1/2 - K) g0 + V g1 with W_h, r2 tests (1/2 + K') g1 + W g0 with Z_h.
    """
    ops = operators
    nw = ops.spaces.num_w
    g0 = np.asarray(g0, dtype=complex)
    g1 = np.asarray(g1, dtype=complex)
    mass = ops.mass
    r1 = 0.5 * (mass[:nw, nw:] @ g0) - ops.Km @ g0 + ops.Vm @ g1
    r2 = 0.5 * (mass[nw:, :nw] @ g1) + ops.Kpm @ g1 + ops.Wm @ g0
    return _dual_norm(r1, mass[:nw, :nw]), _dual_norm(r2, mass[nw:, nw:])
