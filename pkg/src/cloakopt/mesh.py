"""Triangular meshes: generation, region tagging, obstacle masking, refinement.

All mesh objects are immutable after construction (node/connectivity arrays
are marked read-only) and safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

# Element region tags (also the on-disk encoding).
TAG_EXTERIOR = 0
TAG_OBSTACLE = 1
TAG_CLOAK = 2
TAG_OBSERVATION = 3

# Boundary edge labels.
OUTER_BOUNDARY = 1
OBSTACLE_BOUNDARY = 2


class MeshError(ValueError):
    """Invalid mesh data."""


class TopologyError(MeshError):
    """Mesh topology unsupported by an operation."""


class RegionError(ValueError):
    """Region tagging does not describe a usable problem layout."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass
class TriMesh:
    """A triangulation with labelled boundary edges and per-element region tags.

    Parameters
    ----------
    nodes : array, shape (n_nodes, 2)
        Node coordinates in meters.
    triangles : array, shape (n_elems, 3)
        Counter-clockwise node index triples.
    boundary_edges : array, shape (n_bedges, 2)
        Node index pairs lying on the mesh boundary.
    boundary_labels : array, shape (n_bedges,)
        Integer label per boundary edge (``OUTER_BOUNDARY`` / ``OBSTACLE_BOUNDARY``).
    elem_tags : array, shape (n_elems,), optional
        Region tag per element; defaults to ``TAG_EXTERIOR``.
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: np.ndarray
    elem_tags: np.ndarray | None = None
    areas: np.ndarray = field(init=False)
    centroids: np.ndarray = field(init=False)

    def __post_init__(self):
        self.nodes = np.ascontiguousarray(self.nodes, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64).reshape(-1, 2)
        self.boundary_labels = np.ascontiguousarray(self.boundary_labels, dtype=np.int64)
        if self.elem_tags is None:
            self.elem_tags = np.zeros(len(self.triangles), dtype=np.int64)
        else:
            self.elem_tags = np.ascontiguousarray(self.elem_tags, dtype=np.int64)
        self._validate()
        xy = self.nodes[self.triangles]
        d1 = xy[:, 1] - xy[:, 0]
        d2 = xy[:, 2] - xy[:, 0]
        self.areas = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(self.areas <= 0.0):
            bad = int(np.argmin(self.areas))
            raise MeshError(f"triangle {bad} has non-positive area {self.areas[bad]:g}")
        self.centroids = xy.mean(axis=1)
        for a in (self.nodes, self.triangles, self.boundary_edges,
                  self.boundary_labels, self.elem_tags, self.areas, self.centroids):
            _freeze(a)

    def _validate(self):
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 2:
            raise MeshError("nodes must be an (n, 2) array")
        if not np.all(np.isfinite(self.nodes)):
            raise MeshError("node coordinates must be finite")
        n = len(self.nodes)
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must be an (m, 3) array")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise MeshError("triangle node index out of range")
        if self.boundary_edges.size and (self.boundary_edges.min() < 0 or self.boundary_edges.max() >= n):
            raise MeshError("boundary edge node index out of range")
        if len(self.boundary_labels) != len(self.boundary_edges):
            raise MeshError("one label per boundary edge required")
        if len(self.elem_tags) != len(self.triangles):
            raise MeshError("one tag per element required")
        # The listed boundary must be exactly the topological boundary, each
        # edge of which belongs to one triangle.
        tri_edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        uniq, counts = np.unique(tri_edges, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-manifold edge (shared by more than two triangles)")
        topo = uniq[counts == 1]
        listed = np.sort(self.boundary_edges, axis=1)
        if len(np.unique(listed, axis=0)) != len(listed):
            raise MeshError("duplicate boundary edge")
        topo_set = set(map(tuple, topo))
        listed_set = set(map(tuple, listed))
        if topo_set != listed_set:
            raise MeshError("boundary edge list does not match the topological boundary")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elems(self) -> int:
        return len(self.triangles)

    @property
    def h_max(self) -> float:
        """Length of the longest triangle edge."""
        xy = self.nodes[self.triangles]
        lens = [np.linalg.norm(xy[:, i] - xy[:, j], axis=1) for i, j in ((0, 1), (1, 2), (2, 0))]
        return float(np.max(lens))

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted node index pairs."""
        tri_edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(tri_edges, axis=0)

    def total_area(self) -> float:
        return float(self.areas.sum())


@dataclass
class RegionTags:
    """Element index sets for the obstacle, cloak, and observation regions.

    ``cloak_nodes`` lists every node belonging to at least one cloak element
    (including the interface rings); these are the control degrees of freedom.
    """

    obstacle_elems: np.ndarray
    cloak_elems: np.ndarray
    obs_elems: np.ndarray
    cloak_nodes: np.ndarray
    dirichlet_boundary: int = OBSTACLE_BOUNDARY
    robin_boundary: int = OUTER_BOUNDARY

    def __post_init__(self):
        self.obstacle_elems = _freeze(np.unique(np.asarray(self.obstacle_elems, dtype=np.int64)))
        self.cloak_elems = _freeze(np.unique(np.asarray(self.cloak_elems, dtype=np.int64)))
        self.obs_elems = _freeze(np.unique(np.asarray(self.obs_elems, dtype=np.int64)))
        self.cloak_nodes = _freeze(np.unique(np.asarray(self.cloak_nodes, dtype=np.int64)))
        for a, b, what in ((self.obstacle_elems, self.cloak_elems, "obstacle/cloak"),
                           (self.obstacle_elems, self.obs_elems, "obstacle/observation"),
                           (self.cloak_elems, self.obs_elems, "cloak/observation")):
            if np.intersect1d(a, b).size:
                raise RegionError(f"{what} element sets overlap")


@dataclass
class RestrictionMap:
    """Selection of reference-mesh nodes retained after obstacle masking.

    Restricting a reference-mesh matrix ``A`` to the masked mesh amounts to
    slicing rows and columns at ``kept_nodes``.
    """

    kept_nodes: np.ndarray
    n_ref: int

    def __post_init__(self):
        self.kept_nodes = np.asarray(self.kept_nodes, dtype=np.int64)
        if np.any(np.diff(self.kept_nodes) <= 0):
            raise MeshError("kept_nodes must be strictly increasing")
        if self.kept_nodes.size and (self.kept_nodes[0] < 0 or self.kept_nodes[-1] >= self.n_ref):
            raise MeshError("kept node index out of range")
        _freeze(self.kept_nodes)

    @property
    def n_ocp(self) -> int:
        return len(self.kept_nodes)

    def restrict(self, values: np.ndarray) -> np.ndarray:
        """Restrict nodal values from the reference mesh (last axis)."""
        return np.asarray(values)[..., self.kept_nodes]

    def extend(self, values: np.ndarray) -> np.ndarray:
        """Zero-extend masked-mesh nodal values back to the reference mesh."""
        values = np.asarray(values)
        out = np.zeros(values.shape[:-1] + (self.n_ref,), dtype=values.dtype)
        out[..., self.kept_nodes] = values
        return out

    def restrict_matrix(self, a):
        """Restrict a sparse reference-mesh matrix: rows and columns at kept nodes."""
        return a.tocsr()[self.kept_nodes][:, self.kept_nodes].tocsr()

    def matrix(self):
        """The 0/1 selection matrix of shape (n_ocp, n_ref)."""
        from scipy import sparse

        return sparse.csr_matrix(
            (np.ones(self.n_ocp), (np.arange(self.n_ocp), self.kept_nodes)),
            shape=(self.n_ocp, self.n_ref))


@dataclass
class ParentMap:
    """Per fine node: a containing coarse triangle and barycentric weights."""

    parent_tri: np.ndarray
    vertex_nodes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.parent_tri = _freeze(np.asarray(self.parent_tri, dtype=np.int64))
        self.vertex_nodes = _freeze(np.asarray(self.vertex_nodes, dtype=np.int64))
        self.weights = _freeze(np.asarray(self.weights, dtype=np.float64))

    def interpolate(self, coarse_values: np.ndarray) -> np.ndarray:
        """Linearly interpolate coarse nodal values to every fine node."""
        coarse_values = np.asarray(coarse_values, dtype=np.float64)
        return np.einsum("fk,fk->f", self.weights, coarse_values[self.vertex_nodes])


def build_square_mesh(side: float, h_max: float) -> TriMesh:
    """Structured right-triangle mesh of the square [-side/2, side/2]^2.

    The square is divided into ``n = ceil(side / h_max)`` cells per direction
    (cell size ≤ h_max) and each cell is split into two triangles with
    alternating diagonals. Boundary edges carry ``OUTER_BOUNDARY``.
    """
    if side <= 0 or h_max <= 0:
        raise ValueError("side and h_max must be positive")
    n = int(np.ceil(side / h_max))
    coords = np.linspace(-side / 2.0, side / 2.0, n + 1)
    xg, yg = np.meshgrid(coords, coords, indexing="xy")
    nodes = np.column_stack([xg.ravel(), yg.ravel()])

    def gid(ix, iy):
        return iy * (n + 1) + ix

    tris = []
    for iy in range(n):
        for ix in range(n):
            v00, v10 = gid(ix, iy), gid(ix + 1, iy)
            v01, v11 = gid(ix, iy + 1), gid(ix + 1, iy + 1)
            if (ix + iy) % 2 == 0:
                tris.append((v00, v10, v11))
                tris.append((v00, v11, v01))
            else:
                tris.append((v10, v11, v01))
                tris.append((v10, v01, v00))
    edges = []
    for i in range(n):
        edges.append((gid(i, 0), gid(i + 1, 0)))
        edges.append((gid(i, n), gid(i + 1, n)))
        edges.append((gid(0, i), gid(0, i + 1)))
        edges.append((gid(n, i), gid(n, i + 1)))
    edges = np.array(edges, dtype=np.int64)
    labels = np.full(len(edges), OUTER_BOUNDARY, dtype=np.int64)
    return TriMesh(nodes, np.array(tris, dtype=np.int64), edges, labels)


Predicate = Callable[[np.ndarray], np.ndarray]


def disk_signed_distance(center, radius: float) -> Callable[[np.ndarray], np.ndarray]:
    """Signed distance to a disk boundary (negative inside)."""
    c = np.asarray(center, dtype=np.float64)

    def sdf(pts: np.ndarray) -> np.ndarray:
        return np.linalg.norm(np.asarray(pts) - c, axis=-1) - radius

    return sdf


def polygon_signed_distance(vertices) -> Callable[[np.ndarray], np.ndarray]:
    """Signed distance to a simple polygon boundary (negative inside)."""
    v = np.asarray(vertices, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
        raise ValueError("polygon needs at least three (x, y) vertices")
    a = v
    b = np.roll(v, -1, axis=0)
    ab = b - a
    ab2 = np.maximum((ab * ab).sum(axis=1), 1e-300)

    def sdf(pts: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ap = p[:, None, :] - a[None, :, :]
        t = np.clip((ap * ab[None, :, :]).sum(axis=2) / ab2[None, :], 0.0, 1.0)
        closest = a[None, :, :] + t[:, :, None] * ab[None, :, :]
        dist = np.min(np.linalg.norm(p[:, None, :] - closest, axis=2), axis=1)
        # even-odd crossing test for the sign
        x, y = p[:, 0], p[:, 1]
        cond = (a[None, :, 1] > y[:, None]) != (b[None, :, 1] > y[:, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = a[None, :, 0] + (y[:, None] - a[None, :, 1]) * ab[None, :, 0] / np.where(
                ab[None, :, 1] == 0.0, 1.0, ab[None, :, 1])
        crossings = np.sum(cond & (x[:, None] < xint), axis=1)
        inside = crossings % 2 == 1
        out = np.where(inside, -dist, dist)
        return out if np.asarray(pts).ndim == 2 else out[0]

    return sdf


def band(sdf: Callable[[np.ndarray], np.ndarray], lo: float, hi: float) -> Predicate:
    """Predicate selecting points with signed distance in (lo, hi]."""

    def pred(pts: np.ndarray) -> np.ndarray:
        d = sdf(pts)
        return (d > lo) & (d <= hi)

    return pred


def inside(sdf: Callable[[np.ndarray], np.ndarray]) -> Predicate:
    """Predicate selecting points with signed distance ≤ 0."""

    def pred(pts: np.ndarray) -> np.ndarray:
        return sdf(pts) <= 0.0

    return pred


def tag_regions(mesh: TriMesh, obstacle: Predicate | None = None,
                cloak: Predicate | None = None,
                observation: Predicate | None = None) -> RegionTags:
    """Classify elements by centroid into obstacle, cloak, and observation sets.

    The predicates must be mutually exclusive on element centroids. The cloak
    and observation sets must be non-empty.
    """
    c = mesh.centroids

    def mask(pred):
        if pred is None:
            return np.zeros(mesh.n_elems, dtype=bool)
        return np.asarray(pred(c), dtype=bool)

    m_obstacle = mask(obstacle)
    m_cloak = mask(cloak)
    m_observ = mask(observation)
    if np.any(m_obstacle & m_cloak) or np.any(m_obstacle & m_observ) or np.any(m_cloak & m_observ):
        raise RegionError("region predicates overlap on element centroids")
    if not m_cloak.any():
        raise RegionError("cloak region selects no element")
    if not m_observ.any():
        raise RegionError("observation region selects no element")
    cloak_elems = np.flatnonzero(m_cloak)
    cloak_nodes = np.unique(mesh.triangles[cloak_elems])
    return RegionTags(
        obstacle_elems=np.flatnonzero(m_obstacle),
        cloak_elems=cloak_elems,
        obs_elems=np.flatnonzero(m_observ),
        cloak_nodes=cloak_nodes)


def elem_tag_array(mesh: TriMesh, tags: RegionTags) -> np.ndarray:
    """Per-element tag array (file encoding) for a tagged mesh."""
    out = np.full(mesh.n_elems, TAG_EXTERIOR, dtype=np.int64)
    out[tags.obstacle_elems] = TAG_OBSTACLE
    out[tags.cloak_elems] = TAG_CLOAK
    out[tags.obs_elems] = TAG_OBSERVATION
    return out


def tags_from_mesh(mesh: TriMesh) -> RegionTags:
    """Recover region tags from a mesh carrying per-element tag values."""
    cloak_elems = np.flatnonzero(mesh.elem_tags == TAG_CLOAK)
    if cloak_elems.size == 0:
        raise RegionError("mesh carries no cloak elements")
    obs_elems = np.flatnonzero(mesh.elem_tags == TAG_OBSERVATION)
    if obs_elems.size == 0:
        raise RegionError("mesh carries no observation elements")
    return RegionTags(
        obstacle_elems=np.flatnonzero(mesh.elem_tags == TAG_OBSTACLE),
        cloak_elems=cloak_elems,
        obs_elems=obs_elems,
        cloak_nodes=np.unique(mesh.triangles[cloak_elems]))


def elements_connected(mesh: TriMesh, elems: np.ndarray) -> bool:
    """Whether the given elements form one edge-connected component (BFS)."""
    elems = np.unique(np.asarray(elems, dtype=np.int64))
    if elems.size == 0:
        return True
    sel = np.zeros(mesh.n_elems, dtype=bool)
    sel[elems] = True
    # adjacency through shared edges, restricted to the selection
    tri_edges = np.sort(mesh.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    owner = np.repeat(np.arange(mesh.n_elems), 3)
    keep = sel[owner]
    tri_edges, owner = tri_edges[keep], owner[keep]
    order = np.lexsort((tri_edges[:, 1], tri_edges[:, 0]))
    tri_edges, owner = tri_edges[order], owner[order]
    same = np.all(tri_edges[1:] == tri_edges[:-1], axis=1)
    pairs = np.column_stack([owner[:-1][same], owner[1:][same]])
    adj: dict[int, list[int]] = {int(e): [] for e in elems}
    for a, b in pairs:
        adj[int(a)].append(int(b))
        adj[int(b)].append(int(a))
    seen = {int(elems[0])}
    queue = [int(elems[0])]
    while queue:
        cur = queue.pop()
        for nxt in adj[cur]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == elems.size


def _region_euler_characteristic(mesh: TriMesh, elems: np.ndarray) -> int:
    tris = mesh.triangles[elems]
    v = len(np.unique(tris))
    e = len(np.unique(np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1), axis=0))
    return v - e + len(elems)


def mask_obstacle(mesh: TriMesh, tags: RegionTags) -> tuple[TriMesh, RestrictionMap]:
    """Remove obstacle elements and strictly interior obstacle nodes.

    Interface nodes stay and the interface edges become boundary edges with
    the ``OBSTACLE_BOUNDARY`` label (they carry the Dirichlet value). Returns
    the submesh together with the node restriction map. Region tags of the
    input are baked into the submesh ``elem_tags``.
    """
    full_tags = elem_tag_array(mesh, tags)
    if tags.obstacle_elems.size == 0:
        sub = TriMesh(mesh.nodes.copy(), mesh.triangles.copy(),
                      mesh.boundary_edges.copy(), mesh.boundary_labels.copy(),
                      full_tags)
        return sub, RestrictionMap(np.arange(mesh.n_nodes), mesh.n_nodes)

    obst = tags.obstacle_elems
    obst_nodes = np.unique(mesh.triangles[obst])
    outer_nodes = np.unique(mesh.boundary_edges)
    if np.intersect1d(obst_nodes, outer_nodes).size:
        raise TopologyError("obstacle touches the outer boundary")
    if not elements_connected(mesh, obst):
        raise TopologyError("obstacle element set is not connected")
    if _region_euler_characteristic(mesh, obst) != 1:
        raise TopologyError("obstacle element set is not simply connected")

    keep_mask = np.ones(mesh.n_elems, dtype=bool)
    keep_mask[obst] = False
    kept_elems = np.flatnonzero(keep_mask)
    kept_nodes = np.unique(mesh.triangles[kept_elems])
    renum = np.full(mesh.n_nodes, -1, dtype=np.int64)
    renum[kept_nodes] = np.arange(len(kept_nodes))

    def edge_set(elems):
        return np.unique(np.sort(mesh.triangles[elems][:, [0, 1, 1, 2, 2, 0]]
                                 .reshape(-1, 2), axis=1), axis=0)

    kept_edges = edge_set(kept_elems)
    obst_edges = edge_set(obst)
    both = np.concatenate([kept_edges, obst_edges])
    uniq, counts = np.unique(both, axis=0, return_counts=True)
    interface = uniq[counts == 2]

    new_edges = np.vstack([renum[mesh.boundary_edges], renum[interface]])
    new_labels = np.concatenate([
        mesh.boundary_labels,
        np.full(len(interface), OBSTACLE_BOUNDARY, dtype=np.int64)])
    sub = TriMesh(mesh.nodes[kept_nodes], renum[mesh.triangles[kept_elems]],
                  new_edges, new_labels, full_tags[kept_elems])
    return sub, RestrictionMap(kept_nodes, mesh.n_nodes)


def refine_uniform(mesh: TriMesh) -> tuple[TriMesh, ParentMap]:
    """Split every triangle into four by its edge midpoints.

    Children inherit the parent's region tag and split boundary edges keep
    their label. The returned parent map supports linear interpolation of
    coarse nodal fields onto the fine nodes.
    """
    n = mesh.n_nodes
    tris = mesh.triangles
    flat = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, first, inv = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    mid_id = n + inv.reshape(-1, 3)  # per triangle: midpoints of (01), (12), (20)
    mid_coords = 0.5 * (mesh.nodes[uniq[:, 0]] + mesh.nodes[uniq[:, 1]])
    fine_nodes = np.vstack([mesh.nodes, mid_coords])

    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    mab, mbc, mca = mid_id[:, 0], mid_id[:, 1], mid_id[:, 2]
    children = np.empty((mesh.n_elems * 4, 3), dtype=np.int64)
    children[0::4] = np.column_stack([a, mab, mca])
    children[1::4] = np.column_stack([mab, b, mbc])
    children[2::4] = np.column_stack([mca, mbc, c])
    children[3::4] = np.column_stack([mab, mbc, mca])
    fine_tags = np.repeat(mesh.elem_tags, 4)

    # split boundary edges, finding each edge's midpoint id
    key_sorted = np.sort(mesh.boundary_edges, axis=1)
    pos = _lookup_rows(uniq, key_sorted)
    be_mid = n + pos
    fine_edges = np.vstack([
        np.column_stack([mesh.boundary_edges[:, 0], be_mid]),
        np.column_stack([be_mid, mesh.boundary_edges[:, 1]])])
    fine_labels = np.concatenate([mesh.boundary_labels, mesh.boundary_labels])

    # parent map: coarse nodes keep their value, midpoints average endpoints
    n_fine = n + len(uniq)
    parent_tri = np.empty(n_fine, dtype=np.int64)
    vertex_nodes = np.empty((n_fine, 3), dtype=np.int64)
    weights = np.zeros((n_fine, 3))
    first_tri = np.full(n, -1, dtype=np.int64)
    for k in range(3):
        first_tri[tris[::-1, k]] = np.arange(mesh.n_elems - 1, -1, -1)
    if np.any(first_tri < 0):
        raise MeshError("isolated node (belongs to no triangle)")
    parent_tri[:n] = first_tri
    vertex_nodes[:n] = tris[first_tri]
    for k in range(3):
        weights[np.arange(n), k] = vertex_nodes[:n, k] == np.arange(n)
    edge_tri = first // 3
    parent_tri[n:] = edge_tri
    vertex_nodes[n:] = tris[edge_tri]
    for k in range(3):
        weights[n:, k] = 0.5 * ((vertex_nodes[n:, k] == uniq[:, 0])
                                | (vertex_nodes[n:, k] == uniq[:, 1]))

    fine = TriMesh(fine_nodes, children, fine_edges, fine_labels, fine_tags)
    return fine, ParentMap(parent_tri, vertex_nodes, weights)


def _lookup_rows(table: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Positions of ``rows`` in the lexicographically sorted row ``table``."""
    keys = table[:, 0] * (table.max() + 1) + table[:, 1]
    want = rows[:, 0] * (table.max() + 1) + rows[:, 1]
    order = np.argsort(keys)
    pos = np.searchsorted(keys[order], want)
    if np.any(pos >= len(keys)) or np.any(keys[order][np.minimum(pos, len(keys) - 1)] != want):
        raise MeshError("row not found in table")
    return order[pos]
