"""P1 finite-element assembly on the masked mesh.

All local integrals are exact for piecewise-linear elements: gradients are
constant per triangle, the element mass block is (area/12)(1 + delta_ij), a
boundary edge contributes (len/6)[[2,1],[1,2]], and the nodal hat functions
integrate to area/3 over their triangle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .mesh import (
    OUTER_BOUNDARY,
    RegionError,
    RegionTags,
    RestrictionMap,
    TriMesh,
    mask_obstacle,
    tags_from_mesh,
)

# Direction matrices multiplying the three control functions in the
# diffusivity matrix K = mu*I + u*U + f*L + v*S.
DIRECTION_U = np.array([[1.0, 0.0], [0.0, 0.0]])
DIRECTION_L = np.array([[0.0, 0.0], [0.0, 1.0]])
DIRECTION_S = np.array([[0.0, 1.0], [1.0, 0.0]])
DIRECTIONS = {"U": DIRECTION_U, "L": DIRECTION_L, "S": DIRECTION_S}


class AssemblyError(ValueError):
    """Assembly input that cannot produce a valid operator."""


@dataclass
class ProblemData:
    """Physical and cost-functional parameters.

    Units: diffusivity ``mu`` in m^2/s, source magnitude ``s`` in K/s,
    obstacle temperature ``t_obstacle`` in K. ``robin_sign`` selects the sign
    of the outer-boundary term: +1 gives the dissipative absorbing condition
    (coercive for every mu > 0), -1 the anti-dissipative variant.
    """

    mu: float = 1.0
    s: float = 100.0
    source_center: tuple[float, float] = (1.2, 0.0)
    source_radius: float = 0.2
    t_obstacle: float = 0.0
    alpha: float = 1.0
    eps: float = 1e-3
    beta: float = 1e-9
    beta_g: float = 7e-6
    xi: float = 1e-9
    xi_g: float = 7e-6
    gamma: float = 1e-9
    gamma_g: float = 5e-5
    robin_sign: int = 1
    include_final_cost_node: bool = True

    def __post_init__(self):
        if self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("beta", "beta_g", "xi", "xi_g", "gamma", "gamma_g"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.robin_sign not in (1, -1):
            raise ValueError("robin_sign must be +1 or -1")
        if self.source_radius <= 0:
            raise ValueError("source_radius must be positive")


def _p1_gradients(mesh: TriMesh) -> np.ndarray:
    """Constant P1 shape-function gradients, shape (n_elems, 3, 2)."""
    xy = mesh.nodes[mesh.triangles]
    g = np.empty((mesh.n_elems, 3, 2))
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        g[:, i, 0] = xy[:, j, 1] - xy[:, k, 1]
        g[:, i, 1] = xy[:, k, 0] - xy[:, j, 0]
    g /= (2.0 * mesh.areas)[:, None, None]
    return g


def _accumulate(mesh: TriMesh, local: np.ndarray, elems=None) -> sparse.csr_matrix:
    """Sum (n_sel, 3, 3) local blocks into a global sparse matrix."""
    tris = mesh.triangles if elems is None else mesh.triangles[elems]
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    a = sparse.coo_matrix((local.ravel(), (rows, cols)),
                          shape=(mesh.n_nodes, mesh.n_nodes))
    return a.tocsr()


def assemble_mass(mesh: TriMesh) -> sparse.csr_matrix:
    """Mass matrix M_ij = int phi_i phi_j over the whole mesh."""
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _accumulate(mesh, mesh.areas[:, None, None] * local)


def assemble_region_mass(mesh: TriMesh, elems: np.ndarray) -> sparse.csr_matrix:
    """Mass matrix restricted to an element subset (zero elsewhere)."""
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    return _accumulate(mesh, mesh.areas[elems, None, None] * local, elems)


def assemble_stiffness(mesh: TriMesh, diffusivity) -> sparse.csr_matrix:
    """Stiffness matrix A_ij = int (D grad phi_j) . grad phi_i.

    ``diffusivity`` is a positive scalar or an (n_elems, 2, 2) array of
    symmetric positive-definite matrices.
    """
    g = _p1_gradients(mesh)
    d = np.asarray(diffusivity, dtype=np.float64)
    if d.ndim == 0:
        if d <= 0:
            raise AssemblyError("scalar diffusivity must be positive")
        local = d * np.einsum("e,eid,ejd->eij", mesh.areas, g, g)
    else:
        if d.shape != (mesh.n_elems, 2, 2):
            raise AssemblyError("matrix diffusivity must have shape (n_elems, 2, 2)")
        if not np.allclose(d[:, 0, 1], d[:, 1, 0], atol=1e-12):
            raise AssemblyError("element diffusivity matrices must be symmetric")
        det = d[:, 0, 0] * d[:, 1, 1] - d[:, 0, 1] * d[:, 1, 0]
        if np.any(d[:, 0, 0] <= 0) or np.any(det <= 0):
            raise AssemblyError("element diffusivity matrix is not positive definite")
        local = np.einsum("e,eic,ecd,ejd->eij", mesh.areas, g, d, g)
    return _accumulate(mesh, local)


def assemble_region_stiffness(mesh: TriMesh, elems: np.ndarray) -> sparse.csr_matrix:
    """Unit-diffusivity stiffness restricted to an element subset."""
    g = _p1_gradients(mesh)[elems]
    local = np.einsum("e,eid,ejd->eij", mesh.areas[elems], g, g)
    return _accumulate(mesh, local, elems)


def assemble_robin(mesh: TriMesh, label: int = OUTER_BOUNDARY, alpha: float = 1.0,
                   sign: int = 1) -> sparse.csr_matrix:
    """Boundary mass matrix sign*alpha * int_{edges(label)} phi_j phi_i."""
    if sign not in (1, -1):
        raise AssemblyError("sign must be +1 or -1")
    sel = mesh.boundary_labels == label
    if not np.any(sel):
        raise AssemblyError(f"no boundary edges carry label {label}")
    edges = mesh.boundary_edges[sel]
    lengths = np.linalg.norm(mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]], axis=1)
    local = (sign * alpha / 6.0) * lengths[:, None, None] * (np.ones((2, 2)) + np.eye(2))
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    a = sparse.coo_matrix((local.ravel(), (rows, cols)),
                          shape=(mesh.n_nodes, mesh.n_nodes))
    return a.tocsr()


def disk_support(mesh: TriMesh, center, radius: float) -> np.ndarray:
    """Elements whose centroid lies in the given disk."""
    d = np.linalg.norm(mesh.centroids - np.asarray(center), axis=1)
    return np.flatnonzero(d <= radius)


def assemble_load(mesh: TriMesh, s: float, support: np.ndarray) -> np.ndarray:
    """Load vector F_i = s * int_{support} phi_i (one-third rule per element)."""
    f = np.zeros(mesh.n_nodes)
    support = np.asarray(support, dtype=np.int64)
    contrib = s * mesh.areas[support] / 3.0
    np.add.at(f, mesh.triangles[support].ravel(), np.repeat(contrib, 3))
    return f


@dataclass
class ControlTensor:
    """Sparse rank-3 tensor B with entries int_cloak phi_k (D grad phi_i).grad phi_j.

    Entries are stored grouped by the control index k (position in
    ``ctrl_nodes``); contraction with a nodal control vector sums scaled
    slices, and the k-major layout serves the gradient reduction
    ``g_k = sum_ij B_ijk p_i q_j`` directly.
    """

    n: int
    ctrl_nodes: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    kidx: np.ndarray
    vals: np.ndarray

    def __post_init__(self):
        order = np.lexsort((self.cols, self.rows, self.kidx))
        self.rows = self.rows[order]
        self.cols = self.cols[order]
        self.kidx = self.kidx[order]
        self.vals = self.vals[order]

    @property
    def n_ctrl(self) -> int:
        return len(self.ctrl_nodes)

    def contract(self, ctrl: np.ndarray) -> sparse.csr_matrix:
        """The matrix sum_k ctrl_k B[:, :, k]."""
        ctrl = np.asarray(ctrl, dtype=np.float64)
        if ctrl.shape != (self.n_ctrl,):
            raise ValueError(f"control vector must have length {self.n_ctrl}")
        a = sparse.coo_matrix((self.vals * ctrl[self.kidx], (self.rows, self.cols)),
                              shape=(self.n, self.n))
        return a.tocsr()

    def bilinear(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """The vector over k of sum_ij B_ijk p_i q_j."""
        w = self.vals * p[self.rows] * q[self.cols]
        return np.bincount(self.kidx, weights=w, minlength=self.n_ctrl)


def contract(tensor: ControlTensor, ctrl: np.ndarray) -> sparse.csr_matrix:
    return tensor.contract(ctrl)


def assemble_control_tensor(mesh: TriMesh, cloak_elems: np.ndarray,
                            ctrl_nodes: np.ndarray, direction) -> ControlTensor:
    """Rank-3 control tensor over the cloak for one direction matrix.

    ``direction`` is one of "U", "L", "S" or a symmetric 2x2 array. ``k``
    ranges over positions in ``ctrl_nodes``, which must contain every node of
    every cloak element.
    """
    d = DIRECTIONS[direction] if isinstance(direction, str) else np.asarray(direction)
    cloak_elems = np.asarray(cloak_elems, dtype=np.int64)
    ctrl_nodes = np.asarray(ctrl_nodes, dtype=np.int64)
    tris = mesh.triangles[cloak_elems]
    k_pos = np.full(mesh.n_nodes, -1, dtype=np.int64)
    k_pos[ctrl_nodes] = np.arange(len(ctrl_nodes))
    if np.any(k_pos[tris] < 0):
        raise AssemblyError("ctrl_nodes must cover all nodes of the cloak elements")

    g = _p1_gradients(mesh)[cloak_elems]
    # int_e phi_k = area/3; gradients constant per element
    block = np.einsum("e,eic,cd,ejd->eij", mesh.areas[cloak_elems] / 3.0, g, d, g)
    ne = len(cloak_elems)
    rows = np.repeat(tris, 3, axis=1)            # (ne, 9): i index pattern
    cols = np.tile(tris, (1, 3))                 # (ne, 9): j index pattern
    rows = np.repeat(rows, 3, axis=0).ravel()    # expand over k
    cols = np.repeat(cols, 3, axis=0).ravel()
    kidx = k_pos[np.repeat(tris.ravel(), 9)]
    vals = np.repeat(block.reshape(ne, 9), 3, axis=0).ravel()
    return ControlTensor(mesh.n_nodes, ctrl_nodes, rows, cols, kidx, vals)


@dataclass
class DirichletSystem:
    """Symmetric elimination of Dirichlet nodes from a linear system."""

    matrix: sparse.csr_matrix
    rhs: np.ndarray
    free: np.ndarray
    fixed: np.ndarray
    values: np.ndarray

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        n = len(self.free) + len(self.fixed)
        out = np.empty(x_free.shape[:-1] + (n,))
        out[..., self.free] = x_free
        out[..., self.fixed] = self.values
        return out


def apply_dirichlet(a: sparse.spmatrix, rhs: np.ndarray, nodes: np.ndarray,
                    value) -> DirichletSystem:
    """Eliminate Dirichlet rows/columns, moving the coupling to the rhs.

    The reduced right-hand side includes -A[:, nodes] @ values so the reduced
    solve, re-expanded with the prescribed values, solves the original
    boundary-value problem.
    """
    a = a.tocsr()
    n = a.shape[0]
    nodes = np.asarray(nodes, dtype=np.int64)
    values = np.broadcast_to(np.asarray(value, dtype=np.float64), nodes.shape).copy()
    mask = np.ones(n, dtype=bool)
    mask[nodes] = False
    free = np.flatnonzero(mask)
    a_ff = a[free][:, free].tocsr()
    a_fd = a[free][:, nodes]
    rhs_f = rhs[free] - a_fd @ values
    return DirichletSystem(a_ff, rhs_f, free, nodes, values)


@dataclass
class Operators:
    """Every matrix, vector and tensor needed by the solvers.

    Reference-mesh operators (suffix ``_ref``) live on the unperturbed square;
    the remaining operators live on the obstacle-masked mesh, with control
    vectors indexed by ``ctrl_nodes`` (masked numbering, sorted).
    """

    ref_mesh: TriMesh
    tags: RegionTags
    masked: TriMesh
    rmap: RestrictionMap
    data: ProblemData
    m_ref: sparse.csr_matrix
    k_ref: sparse.csr_matrix
    f_ref: np.ndarray
    mass: sparse.csr_matrix
    s0: sparse.csr_matrix
    load: np.ndarray
    b_u: ControlTensor
    b_f: ControlTensor
    b_v: ControlTensor
    m_obs: sparse.csr_matrix
    obs_area: float
    m_ctrl: sparse.csr_matrix
    a_ctrl: sparse.csr_matrix
    ctrl_nodes: np.ndarray
    ctrl_nodes_ref: np.ndarray
    dirichlet_nodes: np.ndarray
    free_nodes: np.ndarray

    @property
    def n_ctrl(self) -> int:
        return len(self.ctrl_nodes)

    @property
    def n_state(self) -> int:
        return self.masked.n_nodes

    def state_matrix(self, u: np.ndarray, f: np.ndarray, v: np.ndarray) -> sparse.csr_matrix:
        """System matrix S = E(A + A_r)E^T + B_u u + B_f f + B_v v."""
        return (self.s0 + self.b_u.contract(u) + self.b_f.contract(f)
                + self.b_v.contract(v)).tocsr()

    def regularizers(self):
        """The three control-space operators beta*M + beta_g*A (and cyclic)."""
        d = self.data
        return (d.beta * self.m_ctrl + d.beta_g * self.a_ctrl,
                d.xi * self.m_ctrl + d.xi_g * self.a_ctrl,
                d.gamma * self.m_ctrl + d.gamma_g * self.a_ctrl)


def build_operators(mesh: TriMesh, tags: RegionTags, data: ProblemData) -> Operators:
    """Assemble all operators for a tagged reference mesh."""
    masked, rmap = mask_obstacle(mesh, tags)
    mtags = tags_from_mesh(masked)

    support = disk_support(mesh, data.source_center, data.source_radius)
    if support.size == 0:
        raise RegionError("source support does not intersect the mesh")
    m_ref = assemble_mass(mesh)
    k_ref = (assemble_stiffness(mesh, data.mu)
             + assemble_robin(mesh, tags.robin_boundary, data.alpha, data.robin_sign)).tocsr()
    f_ref = assemble_load(mesh, data.s, support)

    mass = rmap.restrict_matrix(m_ref)
    s0 = rmap.restrict_matrix(k_ref)
    load = rmap.restrict(f_ref)

    ctrl_nodes = mtags.cloak_nodes
    b_u = assemble_control_tensor(masked, mtags.cloak_elems, ctrl_nodes, "U")
    b_f = assemble_control_tensor(masked, mtags.cloak_elems, ctrl_nodes, "L")
    b_v = assemble_control_tensor(masked, mtags.cloak_elems, ctrl_nodes, "S")

    m_obs = assemble_region_mass(masked, mtags.obs_elems)
    obs_area = float(masked.areas[mtags.obs_elems].sum())
    m_ctrl = assemble_region_mass(masked, mtags.cloak_elems)[ctrl_nodes][:, ctrl_nodes].tocsr()
    a_ctrl = assemble_region_stiffness(masked, mtags.cloak_elems)[ctrl_nodes][:, ctrl_nodes].tocsr()

    dir_sel = masked.boundary_labels == mtags.dirichlet_boundary
    dirichlet_nodes = np.unique(masked.boundary_edges[dir_sel])
    free_mask = np.ones(masked.n_nodes, dtype=bool)
    free_mask[dirichlet_nodes] = False
    free_nodes = np.flatnonzero(free_mask)

    return Operators(
        ref_mesh=mesh, tags=tags, masked=masked, rmap=rmap, data=data,
        m_ref=m_ref, k_ref=k_ref, f_ref=f_ref,
        mass=mass, s0=s0, load=load,
        b_u=b_u, b_f=b_f, b_v=b_v,
        m_obs=m_obs, obs_area=obs_area,
        m_ctrl=m_ctrl, a_ctrl=a_ctrl,
        ctrl_nodes=ctrl_nodes, ctrl_nodes_ref=rmap.kept_nodes[ctrl_nodes],
        dirichlet_nodes=dirichlet_nodes, free_nodes=free_nodes)
