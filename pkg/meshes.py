"""Tetrahedral meshes of the coupling domain and their boundary surfaces."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from pathlib import Path

import meshio
import numpy as np

log = logging.getLogger(__name__)

# local face i of a tet is the triangle opposite vertex i
TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])
TET_EDGES = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])

# Kuhn split of the unit cube: one tet per axis permutation, all sharing the main diagonal
KUHN_CORNERS = []
for _perm in itertools.permutations(range(3)):
    _corner = np.zeros(3, dtype=int)
    _path = [tuple(_corner)]
    for _axis in _perm:
        _corner[_axis] = 1
        _path.append(tuple(_corner))
    KUHN_CORNERS.append(_path)


class MeshError(ValueError):
    pass


class MeshFormatError(MeshError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


def signed_volumes(vertices, tets):
    """Signed volume of every tet."""
    p = vertices[tets]
    return np.einsum("ij,ij->i", p[:, 1] - p[:, 0], np.cross(p[:, 2] - p[:, 0], p[:, 3] - p[:, 0])) / 6.0


@dataclass(frozen=True, eq=False)
class VolumeMesh:
    vertices: np.ndarray
    tets: np.ndarray
    region_tags: np.ndarray

    @classmethod
    def from_arrays(cls, vertices, tets, region_tags=None):
        """Build a mesh, flipping negatively oriented tets and rejecting flat ones."""
        vertices = np.asarray(vertices, dtype=float)
        tets = np.array(tets, dtype=np.int64, copy=True)
        if vertices.ndim != 2 or vertices.shape[1] != 3:
            raise MeshError("vertices must be an (n, 3) array")
        if tets.ndim != 2 or tets.shape[1] != 4:
            raise MeshError("tets must be an (n, 4) array")
        if len(tets) and (tets.min() < 0 or tets.max() >= len(vertices)):
            raise MeshError("tet references a missing vertex")
        if region_tags is None:
            region_tags = np.zeros(len(tets), dtype=np.int64)
        region_tags = np.asarray(region_tags, dtype=np.int64)
        if region_tags.shape != (len(tets),):
            raise MeshError("one region tag per tet required")

        vol = signed_volumes(vertices, tets)
        scale = np.abs(vol).max() if len(vol) else 1.0
        flat = np.abs(vol) <= 1e-14 * scale
        if np.any(flat):
            raise MeshError(f"degenerate tet {int(np.flatnonzero(flat)[0])}")
        flip = vol < 0
        tets[flip] = tets[flip][:, [0, 1, 3, 2]]
        return cls(_frozen(vertices, float), _frozen(tets, np.int64), _frozen(region_tags, np.int64))

    @property
    def num_tets(self):
        return len(self.tets)

    def volumes(self):
        return signed_volumes(self.vertices, self.tets)

    def total_volume(self):
        return float(self.volumes().sum())

    def centroids(self):
        return self.vertices[self.tets].mean(axis=1)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Boundary triangulation with compact vertex numbering.

    ``volume_vertex[i]`` is the parent-mesh index of surface vertex ``i`` and
    ``parent_face[t] = (tet, local face)``. Triangles are ordered so that
    ``cross(b - a, c - a)`` points out of the domain.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    parent_face: np.ndarray
    normals: np.ndarray
    areas: np.ndarray
    volume_vertex: np.ndarray

    @property
    def num_triangles(self):
        return len(self.triangles)

    def total_area(self):
        return float(self.areas.sum())

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def diameters(self):
        p = self.vertices[self.triangles]
        edges = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
        return np.linalg.norm(edges, axis=2).max(axis=1)

    def enclosed_volume(self):
        """Volume by the divergence theorem."""
        return float(np.sum(np.einsum("ij,ij->i", self.centroids(), self.normals) * self.areas) / 3.0)

    def edges(self):
        """Unique edges as sorted vertex pairs."""
        tri = self.triangles
        pairs = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        return np.unique(np.sort(pairs, axis=1), axis=0)


def tensor_mesh(xs, ys, zs, region=None):
    """Kuhn-split tensor-product mesh through the given breakpoints.

    ``region`` maps subcube centres (n, 3) to integer tags.
    """
    xs, ys, zs = (np.asarray(a, dtype=float) for a in (xs, ys, zs))
    for axis in (xs, ys, zs):
        if len(axis) < 2 or np.any(np.diff(axis) <= 0):
            raise MeshError("breakpoints must be strictly increasing with at least two entries")
    nx, ny, nz = len(xs), len(ys), len(zs)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    vertices = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def vid(i, j, k):
        return (i * ny + j) * nz + k

    tets = []
    centres = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            for k in range(nz - 1):
                for path in KUHN_CORNERS:
                    tets.append([vid(i + a, j + b, k + c) for a, b, c in path])
                    centres.append([(xs[i] + xs[i + 1]) / 2, (ys[j] + ys[j + 1]) / 2, (zs[k] + zs[k + 1]) / 2])
    centres = np.array(centres)
    tags = np.zeros(len(tets), dtype=np.int64) if region is None else np.asarray(region(centres), dtype=np.int64)
    return VolumeMesh.from_arrays(vertices, tets, tags)


def cube_mesh(side, n):
    """Origin-centred cube with ``n`` subdivisions per edge, 6 tets per subcube."""
    if int(n) != n or n < 1:
        raise MeshError(f"subdivisions must be a positive integer, got {n}")
    if side <= 0:
        raise MeshError(f"side must be positive, got {side}")
    ticks = np.linspace(-side / 2.0, side / 2.0, int(n) + 1)
    return tensor_mesh(ticks, ticks, ticks)


def tagged_box_mesh(breakpoints, inner, n=1):
    """Tensor mesh through ``breakpoints`` (each gap split ``n`` times), tag 1 inside the box ``inner``."""
    breakpoints = np.asarray(breakpoints, dtype=float)
    ticks = np.unique(np.concatenate([np.linspace(a, b, n + 1) for a, b in zip(breakpoints[:-1], breakpoints[1:])]))
    lo, hi = inner

    def region(centres):
        return np.all((centres > lo) & (centres < hi), axis=1).astype(np.int64)

    return tensor_mesh(ticks, ticks, ticks, region)


def icosphere_mesh(refinements=0, radius=1.0):
    """Ball whose boundary is the icosahedral sphere approximation; tets are coned to the centre."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
             [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
             [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
             [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(v, dtype=float) / np.linalg.norm(v) for v in verts]
    for _ in range(refinements):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = refined
    vertices = np.vstack([np.zeros((1, 3)), radius * np.array(verts)])
    tets = [[0, a + 1, b + 1, c + 1] for a, b, c in faces]
    return VolumeMesh.from_arrays(vertices, tets)


def mesh_size(mesh):
    """Longest tet edge."""
    if mesh.num_tets == 0:
        raise MeshError("empty mesh")
    p = mesh.vertices[mesh.tets]
    lengths = np.linalg.norm(p[:, TET_EDGES[:, 1]] - p[:, TET_EDGES[:, 0]], axis=2)
    return float(lengths.max())


def _edge_midpoints(mesh):
    """Global midpoint vertex per (tet, local edge), shared between tets."""
    pairs = np.sort(mesh.tets[:, TET_EDGES].reshape(-1, 2), axis=1)
    unique, inverse = np.unique(pairs, axis=0, return_inverse=True)
    inverse = np.asarray(inverse).reshape(mesh.num_tets, 6)
    mids = 0.5 * (mesh.vertices[unique[:, 0]] + mesh.vertices[unique[:, 1]])
    return mids, inverse + len(mesh.vertices)


def refine_uniform(mesh):
    """Red refinement: 8 children per tet, octahedron cut along its shortest diagonal."""
    mids, mid_ids = _edge_midpoints(mesh)
    vertices = np.vstack([mesh.vertices, mids])
    # local edge index of the midpoint between local vertices a and b
    edge_of = {(int(a), int(b)): e for e, (a, b) in enumerate(TET_EDGES)}
    edge_of.update({(b, a): e for (a, b), e in list(edge_of.items())})
    opposite = [(edge_of[0, 1], edge_of[2, 3]), (edge_of[0, 2], edge_of[1, 3]), (edge_of[0, 3], edge_of[1, 2])]

    children = []
    for t, tet in enumerate(mesh.tets):
        m = mid_ids[t]
        v = tet
        children += [
            [v[0], m[edge_of[0, 1]], m[edge_of[0, 2]], m[edge_of[0, 3]]],
            [m[edge_of[0, 1]], v[1], m[edge_of[1, 2]], m[edge_of[1, 3]]],
            [m[edge_of[0, 2]], m[edge_of[1, 2]], v[2], m[edge_of[2, 3]]],
            [m[edge_of[0, 3]], m[edge_of[1, 3]], m[edge_of[2, 3]], v[3]],
        ]
        lengths = np.array([np.linalg.norm(vertices[m[a]] - vertices[m[b]]) for a, b in opposite])
        shortest = lengths.min()
        candidates = [i for i in range(3) if lengths[i] <= shortest * (1 + 1e-12)]
        pick = min(candidates, key=lambda i: tuple(sorted((m[opposite[i][0]], m[opposite[i][1]]))))
        a, b = m[opposite[pick][0]], m[opposite[pick][1]]
        others = [opposite[i] for i in range(3) if i != pick]
        (p1, q1), (p2, q2) = [(m[x], m[y]) for x, y in others]
        ring = [p1, p2, q1, q2]
        for i in range(4):
            children.append([a, b, ring[i], ring[(i + 1) % 4]])
    tags = np.repeat(mesh.region_tags, 8)
    return VolumeMesh.from_arrays(vertices, children, tags)


def _face_table(mesh):
    faces = mesh.tets[:, TET_FACES].reshape(-1, 3)
    keys = np.sort(faces, axis=1)
    unique, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    return faces, np.asarray(inverse).ravel(), counts


def check_conforming(mesh):
    """Reject meshes with a face shared by more than two tets or duplicated tets."""
    keys = np.sort(mesh.tets, axis=1)
    _, counts = np.unique(keys, axis=0, return_counts=True)
    if np.any(counts > 1):
        raise MeshError("duplicate element")
    _, _, face_counts = _face_table(mesh)
    if np.any(face_counts > 2):
        raise MeshError("non-conforming mesh: face shared by more than two tets")


def extract_boundary(mesh):
    """Faces owned by exactly one tet, oriented outward."""
    faces, inverse, counts = _face_table(mesh)
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: face shared by more than two tets")
    owned = np.flatnonzero(counts[inverse] == 1)
    tet_index, local_face = np.divmod(owned, 4)
    tris = faces[owned].copy()

    p = mesh.vertices[tris]
    normal = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    outward = np.einsum("ij,ij->i", normal, p.mean(axis=1) - mesh.centroids()[tet_index])
    flip = outward < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    normal[flip] *= -1

    twice_area = np.linalg.norm(normal, axis=1)
    used, compact = np.unique(tris, return_inverse=True)
    compact = np.asarray(compact).reshape(tris.shape)
    surface = SurfaceMesh(
        vertices=_frozen(mesh.vertices[used], float),
        triangles=_frozen(compact, np.int64),
        parent_face=_frozen(np.column_stack([tet_index, local_face]), np.int64),
        normals=_frozen(normal / twice_area[:, None], float),
        areas=_frozen(twice_area / 2.0, float),
        volume_vertex=_frozen(used, np.int64),
    )
    _check_closed(surface)
    log.debug("extracted %d boundary triangles", surface.num_triangles)
    return surface


def _check_closed(surface):
    tri = surface.triangles
    pairs = np.sort(np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]]), axis=1)
    _, counts = np.unique(pairs, axis=0, return_counts=True)
    if np.any(counts != 2):
        raise MeshError(f"open surface: {int(np.sum(counts != 2))} edges without exactly two boundary triangles")


def _scan_header(path):
    """Check the MSH 2.2 ASCII header and element types, reporting line numbers."""
    section = None
    expect_count = False
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if line.startswith("$"):
                section = None if line.startswith("$End") else line
                expect_count = section in ("$Nodes", "$Elements")
                continue
            if section == "$MeshFormat":
                fields = line.split()
                if len(fields) < 3:
                    raise MeshFormatError("malformed $MeshFormat entry", lineno)
                if not fields[0].startswith("2.2"):
                    raise MeshFormatError(f"unsupported MSH version {fields[0]}", lineno)
                if fields[1] != "0":
                    raise MeshFormatError("only ASCII meshes are supported", lineno)
                section = "$MeshFormat-done"
            elif section == "$Elements" and line:
                fields = line.split()
                try:
                    values = [int(x) for x in fields]
                except ValueError:
                    raise MeshFormatError(f"non-integer element entry '{line}'", lineno)
                if expect_count:
                    expect_count = False
                    continue
                if len(values) < 3:
                    raise MeshFormatError("truncated element entry", lineno)
                if values[1] not in (2, 4, 15):
                    raise MeshFormatError(f"unsupported element type {values[1]}", lineno)
            elif section == "$Nodes" and line:
                if expect_count:
                    expect_count = False
                    continue
                try:
                    [float(x) for x in line.split()]
                except ValueError:
                    raise MeshFormatError(f"non-numeric node entry '{line}'", lineno)


def load_gmsh(path):
    """Read a Gmsh MSH 2.2 ASCII file with tetrahedra; physical tags become region tags."""
    path = Path(path)
    if not path.is_file():
        raise MeshError(f"mesh file not found: {path}")
    _scan_header(path)
    try:
        data = meshio.read(str(path), file_format="gmsh")
    except Exception as e:
        raise MeshFormatError(f"cannot parse {path.name}: {e}")

    tets, tags = [], []
    physical = data.cell_data.get("gmsh:physical")
    for i, block in enumerate(data.cells):
        if block.type == "tetra":
            tets.append(block.data)
            if physical is not None:
                tags.append(np.asarray(physical[i]))
            else:
                tags.append(np.zeros(len(block.data), dtype=np.int64))
        elif block.type not in ("triangle", "vertex"):
            raise MeshFormatError(f"unsupported element type {block.type}")
    if not tets:
        raise MeshFormatError("no tetrahedral elements")
    tets = np.concatenate(tets).astype(np.int64)
    tags = np.concatenate(tags).astype(np.int64)

    used, compact = np.unique(tets, return_inverse=True)
    mesh = VolumeMesh.from_arrays(np.asarray(data.points, dtype=float)[used, :3], np.asarray(compact).reshape(tets.shape), tags)
    check_conforming(mesh)
    extract_boundary(mesh)
    log.info("loaded %s: %d vertices, %d tets", path.name, len(mesh.vertices), mesh.num_tets)
    return mesh
