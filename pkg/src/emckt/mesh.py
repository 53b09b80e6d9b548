"""Tetrahedral meshes with oriented edge/face incidence and Whitney edge data.

Orientation conventions (all derivable from global vertex ids):

* edge ``(a, b)`` with ``a < b`` points from ``a`` to ``b``;
* face ``(a, b, c)`` with ``a < b < c`` has normal ``(x_b - x_a) x (x_c - x_a)``
  and boundary ``[a, b] + [b, c] - [a, c]``;
* each tet stores its vertices sorted ascending, so local Whitney functions
  built from the sorted ids already carry the global orientation.

The built-in box mesher splits every hexahedral cell into six tets along the
main diagonal (Kuhn/Freudenthal template). All cells use the same template,
so face diagonals match across neighbours and the mesh is conforming.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument, PortResolutionError, TopologyError

LOCAL_EDGES = np.array([(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)])
LOCAL_FACES = np.array([(0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)])

# boundary of face (a, b, c): +[a,b] +[b,c] -[a,c]
_FACE_EDGE_PAIRS = ((0, 1, 1.0), (1, 2, 1.0), (0, 2, -1.0))

PORT_SNAP_TOL = 1e-9  # meters

# cube corner k has offset bits (k & 1, k >> 1 & 1, k >> 2 & 1)
_CUBE_OFFSETS = np.array([[(k >> d) & 1 for d in range(3)] for k in range(8)])


def _kuhn_template():
    tets = []
    for perm in permutations(range(3)):
        corner = 0
        path = [corner]
        for axis in perm:
            corner |= 1 << axis
            path.append(corner)
        tets.append(path)
    return np.array(tets)


KUHN_TETS = _kuhn_template()


@dataclass(frozen=True, eq=False)
class TetMesh:
    vertices: np.ndarray
    tets: np.ndarray
    materials: np.ndarray
    edges: np.ndarray
    faces: np.ndarray
    tet_edges: np.ndarray
    tet_faces: np.ndarray
    curl_incidence: sp.csr_matrix
    grad_incidence: sp.csr_matrix
    boundary_face_flags: np.ndarray
    boundary_edge_flags: np.ndarray
    cell_size: tuple | None = None
    box_bounds: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_edges(self):
        return len(self.edges)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_tets(self):
        return len(self.tets)

    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces - self.n_tets

    def geometry(self):
        """Return ``(volumes, grads)``; ``grads[t, k]`` is the gradient of the
        k-th barycentric coordinate of tet ``t``."""
        if "geometry" not in self._cache:
            self._cache["geometry"] = tet_geometry(self.vertices, self.tets)
        return self._cache["geometry"]

    def edge_lengths(self):
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.linalg.norm(d, axis=1)

    def edge_tets(self):
        """CSR-like map edge -> tets containing it, as (offsets, tet ids)."""
        if "edge_tets" not in self._cache:
            te = self.tet_edges.ravel()
            tids = np.repeat(np.arange(self.n_tets), 6)
            order = np.argsort(te, kind="stable")
            counts = np.bincount(te, minlength=self.n_edges)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            self._cache["edge_tets"] = (offsets, tids[order])
        return self._cache["edge_tets"]

    def face_cell_incidence(self):
        """Signed tet-by-face matrix (outward normal = +1); ``D @ C == 0``."""
        if "face_cell" not in self._cache:
            rows, cols, vals = [], [], []
            x = self.vertices
            for lf, (i, j, k) in enumerate(LOCAL_FACES):
                opp = 6 - i - j - k
                a, b, c = (self.tets[:, i], self.tets[:, j], self.tets[:, k])
                normal = np.cross(x[b] - x[a], x[c] - x[a])
                outward = np.einsum("ij,ij->i", normal, x[a] - x[self.tets[:, opp]])
                rows.append(np.arange(self.n_tets))
                cols.append(self.tet_faces[:, lf])
                vals.append(np.where(outward > 0, 1, -1))
            D = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                shape=(self.n_tets, self.n_faces),
                dtype=np.int64,
            )
            self._cache["face_cell"] = D
        return self._cache["face_cell"]


def tet_geometry(vertices, tets):
    x = vertices[tets]
    jac = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0], x[:, 3] - x[:, 0]], axis=1)
    det = np.linalg.det(jac)
    if np.any(np.abs(det) <= 1e-300):
        bad = int(np.argmin(np.abs(det)))
        raise TopologyError(f"degenerate tetrahedron {bad}")
    inv = np.linalg.inv(jac)  # columns are grads of lambda_1..3
    g123 = np.transpose(inv, (0, 2, 1))
    g0 = -g123.sum(axis=1, keepdims=True)
    grads = np.concatenate([g0, g123], axis=1)
    return np.abs(det) / 6.0, grads


def from_arrays(vertices, tets, materials=None, cell_size=None, box_bounds=None):
    """Build a TetMesh (with incidence) from raw vertex/tet arrays."""
    vertices = np.ascontiguousarray(vertices, dtype=float)
    tets = np.sort(np.asarray(tets, dtype=np.int64), axis=1)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise InvalidArgument("vertices must be an (N, 3) array")
    if tets.ndim != 2 or tets.shape[1] != 4:
        raise InvalidArgument("tets must be an (T, 4) array")
    if tets.size and (tets.min() < 0 or tets.max() >= len(vertices)):
        raise TopologyError("tet references a vertex id out of range")
    if np.any(tets[:, 1:] == tets[:, :-1]):
        raise TopologyError("tet with repeated vertex")
    if materials is None:
        materials = np.zeros(len(tets), dtype=np.int64)
    materials = np.asarray(materials, dtype=np.int64)

    pairs = tets[:, LOCAL_EDGES].reshape(-1, 2)
    edges, edge_inv = np.unique(pairs, axis=0, return_inverse=True)
    tet_edges = edge_inv.reshape(-1, 6)

    triples = tets[:, LOCAL_FACES].reshape(-1, 3)
    faces, face_inv, face_count = np.unique(
        triples, axis=0, return_inverse=True, return_counts=True
    )
    tet_faces = face_inv.reshape(-1, 4)
    if np.any(face_count > 2):
        raise TopologyError("non-manifold mesh: a face is shared by more than two tets")

    curl, grad = _incidence(edges, faces, len(vertices))
    boundary_faces = face_count == 1
    boundary_edges = np.zeros(len(edges), dtype=bool)
    bf = faces[boundary_faces]
    for i, j, _ in _FACE_EDGE_PAIRS:
        ids = _edge_lookup(edges, bf[:, [i, j]])
        boundary_edges[ids] = True

    mesh = TetMesh(
        vertices=vertices,
        tets=tets,
        materials=materials,
        edges=edges,
        faces=faces,
        tet_edges=tet_edges,
        tet_faces=tet_faces,
        curl_incidence=curl,
        grad_incidence=grad,
        boundary_face_flags=boundary_faces,
        boundary_edge_flags=boundary_edges,
        cell_size=cell_size,
        box_bounds=box_bounds,
    )
    for arr in (vertices, tets, materials, edges, faces, tet_edges, tet_faces,
                boundary_faces, boundary_edges):
        arr.setflags(write=False)
    return mesh


def _edge_lookup(edges, pairs):
    """Global ids of (sorted) vertex pairs; edges are lexicographically sorted."""
    n = int(edges.max()) + 1 if len(edges) else 1
    keys = edges[:, 0] * n + edges[:, 1]
    q = pairs[:, 0] * n + pairs[:, 1]
    idx = np.searchsorted(keys, q)
    if np.any(idx >= len(keys)) or np.any(keys[np.minimum(idx, len(keys) - 1)] != q):
        raise TopologyError("face references an edge that is not in the mesh")
    return idx


def _incidence(edges, faces, n_vertices):
    rows, cols, vals = [], [], []
    for i, j, s in _FACE_EDGE_PAIRS:
        ids = _edge_lookup(edges, faces[:, [i, j]])
        rows.append(np.arange(len(faces)))
        cols.append(ids)
        vals.append(np.full(len(faces), s))
    curl = sp.csr_matrix(
        (np.concatenate(vals).astype(np.int64), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(faces), len(edges)),
    )
    ne = len(edges)
    grad = sp.csr_matrix(
        (
            np.concatenate([-np.ones(ne, np.int64), np.ones(ne, np.int64)]),
            (np.concatenate([np.arange(ne)] * 2), np.concatenate([edges[:, 0], edges[:, 1]])),
        ),
        shape=(ne, n_vertices),
    )
    curl.sort_indices()
    grad.sort_indices()
    return curl, grad


def derive_incidence(mesh):
    """Return ``(curl_incidence, grad_incidence)`` as signed integer CSR matrices."""
    curl, grad = _incidence(mesh.edges, mesh.faces, mesh.n_vertices)
    if (curl @ grad).count_nonzero() != 0:
        raise TopologyError("curl . grad != 0; inconsistent orientation")
    return curl, grad


def build_box_mesh(nx, ny, nz, dims, origin=(0.0, 0.0, 0.0)):
    """Structured tet mesh of an axis-aligned box, six Kuhn tets per cell.

    Vertex ``(i, j, k)`` gets id ``i + (nx+1) * (j + (ny+1) * k)``.
    """
    counts = (nx, ny, nz)
    if any(int(c) != c or c < 1 for c in counts):
        raise InvalidArgument(f"cell counts must be integers >= 1, got {counts}")
    dims = tuple(float(d) for d in dims)
    if len(dims) != 3 or any(not d > 0 for d in dims):
        raise InvalidArgument(f"box dimensions must be positive, got {dims}")
    nx, ny, nz = (int(c) for c in counts)
    origin = np.asarray(origin, dtype=float)
    h = np.array(dims) / np.array([nx, ny, nz])

    ii, jj, kk = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), np.arange(nz + 1), indexing="ij")
    # order vertices by id = i + (nx+1)(j + (ny+1)k)
    grid = np.stack([ii, jj, kk], axis=-1).transpose(2, 1, 0, 3).reshape(-1, 3)
    vertices = origin + grid * h

    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    cells = np.stack([ci, cj, ck], axis=-1).transpose(2, 1, 0, 3).reshape(-1, 3)
    corners = cells[:, None, :] + _CUBE_OFFSETS[None, :, :]
    corner_ids = corners[..., 0] + (nx + 1) * (corners[..., 1] + (ny + 1) * corners[..., 2])
    tets = corner_ids[:, KUHN_TETS].reshape(-1, 4)
    bounds = (tuple(origin), tuple(origin + np.array(dims)))
    return from_arrays(vertices, tets, cell_size=tuple(h), box_bounds=bounds)


BOX_FACES = ("xmin", "xmax", "ymin", "ymax", "zmin", "zmax")


def box_face_edge_mask(mesh, faces, tol=1e-9):
    """Boundary edges lying entirely in the named planes of the mesh's box.

    Meshes read from file have no stored box; their vertex bounding box is used.
    """
    if mesh.box_bounds is None:
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    else:
        lo, hi = (np.asarray(b) for b in mesh.box_bounds)
    mask = np.zeros(mesh.n_edges, dtype=bool)
    x0 = mesh.vertices[mesh.edges[:, 0]]
    x1 = mesh.vertices[mesh.edges[:, 1]]
    for name in faces:
        if name not in BOX_FACES:
            raise InvalidArgument(f"unknown box face {name!r}")
        axis = "xyz".index(name[0])
        plane = lo[axis] if name.endswith("min") else hi[axis]
        mask |= (np.abs(x0[:, axis] - plane) < tol) & (np.abs(x1[:, axis] - plane) < tol)
    return mask & mesh.boundary_edge_flags


def _edge_tangent_integral(mesh, tet, a, b, p, q):
    """Line integral along p->q of (lambda_a grad lambda_b - lambda_b grad lambda_a)."""
    _, grads = mesh.geometry()
    local = {int(v): k for k, v in enumerate(mesh.tets[tet])}
    ga, gb = grads[tet, local[a]], grads[tet, local[b]]
    t = mesh.vertices[q] - mesh.vertices[p]

    def lam_avg(v):
        # lambda_v is linear; its mean along a mesh edge is the endpoint average
        return 0.5 * ((v == p) + (v == q))

    return lam_avg(a) * float(gb @ t) - lam_avg(b) * float(ga @ t)


def whitney_edge_line_integral(mesh, edge_i, edge_j):
    """Integral of the Whitney function of edge ``j`` along edge ``i``."""
    for e in (edge_i, edge_j):
        if not (0 <= int(e) < mesh.n_edges):
            raise InvalidArgument(f"edge id {e} out of range [0, {mesh.n_edges})")
    edge_i, edge_j = int(edge_i), int(edge_j)
    offsets, tids = mesh.edge_tets()
    shared = [
        t for t in tids[offsets[edge_j]:offsets[edge_j + 1]]
        if edge_i in mesh.tet_edges[t]
    ]
    if not shared:
        return 0.0
    a, b = mesh.edges[edge_j]
    p, q = mesh.edges[edge_i]
    return _edge_tangent_integral(mesh, shared[0], int(a), int(b), int(p), int(q))


@dataclass(frozen=True)
class PortSpec:
    port_id: int
    edges: tuple  # ((edge id, sign), ...) ordered from endpoint A to B
    label: str = ""

    @property
    def edge_ids(self):
        return [e for e, _ in self.edges]

    @property
    def signs(self):
        return [s for _, s in self.edges]


def _snap(mesh, point, tol):
    d = np.linalg.norm(mesh.vertices - np.asarray(point, dtype=float), axis=1)
    v = int(np.argmin(d))
    if d[v] > tol:
        raise PortResolutionError(
            f"port endpoint {tuple(point)} is {d[v]:.3e} m from the nearest vertex"
        )
    return v


def resolve_port(mesh, a, b, port_id=0, label="", tol=PORT_SNAP_TOL):
    """Chain of collinear mesh edges from point ``a`` to point ``b``.

    The returned signs are +1 where the path runs along the global edge
    orientation (low id -> high id).
    """
    va, vb = _snap(mesh, a, tol), _snap(mesh, b, tol)
    if va == vb:
        raise PortResolutionError("port endpoints coincide")
    xa, xb = mesh.vertices[va], mesh.vertices[vb]
    axis = xb - xa
    length = np.linalg.norm(axis)
    axis = axis / length

    x = mesh.vertices
    rel = x - xa
    s = rel @ axis
    off = np.linalg.norm(rel - np.outer(s, axis), axis=1)
    on_segment = (off <= tol) & (s >= -tol) & (s <= length + tol)

    e0, e1 = mesh.edges[:, 0], mesh.edges[:, 1]
    usable = on_segment[e0] & on_segment[e1]
    adj = {}
    for eid in np.flatnonzero(usable):
        u, v = int(e0[eid]), int(e1[eid])
        adj.setdefault(u, []).append((v, int(eid)))
        adj.setdefault(v, []).append((u, int(eid)))

    prev = {va: None}
    queue = deque([va])
    while queue:
        u = queue.popleft()
        if u == vb:
            break
        for v, eid in sorted(adj.get(u, [])):
            if v not in prev and s[v] > s[u]:
                prev[v] = (u, eid)
                queue.append(v)
    if vb not in prev:
        raise PortResolutionError(f"no edge chain between vertices {va} and {vb}")

    chain = []
    v = vb
    while prev[v] is not None:
        u, eid = prev[v]
        chain.append((eid, 1 if u < v else -1))
        v = u
    chain.reverse()
    return PortSpec(port_id=port_id, edges=tuple(chain), label=label or f"P{port_id}")


def validate_ports(mesh, ports):
    seen = set()
    for port in ports:
        for eid, sign in port.edges:
            if not (0 <= eid < mesh.n_edges) or sign not in (1, -1):
                raise InvalidArgument(f"port {port.label}: invalid edge entry {(eid, sign)}")
            if eid in seen:
                raise InvalidArgument(f"edge {eid} appears in more than one port")
            seen.add(eid)
        # connected oriented path
        tail = None
        for eid, sign in port.edges:
            u, v = mesh.edges[eid]
            start, end = (u, v) if sign > 0 else (v, u)
            if tail is not None and start != tail:
                raise InvalidArgument(f"port {port.label}: edges do not form a path")
            tail = end


def read_ascii(path):
    """Read the ``tetmesh <V> <T>`` ASCII format."""
    lines = [ln.split("#", 1)[0].strip() for ln in Path(path).read_text().splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise InvalidArgument(f"{path}: empty mesh file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "tetmesh":
        raise InvalidArgument(f"{path}: expected header 'tetmesh <V> <T>'")
    nv, nt = int(head[1]), int(head[2])
    if len(lines) < 1 + nv + nt:
        raise InvalidArgument(f"{path}: truncated mesh file")
    verts = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + nv]])
    rows = np.array([[int(v) for v in ln.split()] for ln in lines[1 + nv:1 + nv + nt]])
    if verts.shape != (nv, 3) or rows.shape != (nt, 5):
        raise InvalidArgument(f"{path}: malformed vertex or tet records")
    return from_arrays(verts, rows[:, :4], rows[:, 4])


def write_ascii(mesh, path):
    with open(path, "w") as fh:
        fh.write(f"tetmesh {mesh.n_vertices} {mesh.n_tets}\n")
        for x in mesh.vertices:
            fh.write(f"{float(x[0])!r} {float(x[1])!r} {float(x[2])!r}\n")
        for t, m in zip(mesh.tets, mesh.materials):
            fh.write(f"{t[0]} {t[1]} {t[2]} {t[3]} {m}\n")
