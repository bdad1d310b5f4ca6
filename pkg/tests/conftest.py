import numpy as np
import pytest

from cloakopt.assembly import ProblemData, build_operators
from cloakopt.mesh import TriMesh, band, build_square_mesh, disk_signed_distance, inside, tag_regions


def jittered_mesh(n_cells=8, side=2.0, seed=0, amp=0.15):
    """Structured mesh with randomly perturbed interior nodes (stays valid)."""
    base = build_square_mesh(side, side / n_cells)
    rng = np.random.default_rng(seed)
    h = side / n_cells
    nodes = base.nodes.copy()
    on_boundary = np.zeros(base.n_nodes, dtype=bool)
    on_boundary[np.unique(base.boundary_edges)] = True
    interior = ~on_boundary
    nodes[interior] += rng.uniform(-amp * h, amp * h, size=(interior.sum(), 2))
    return TriMesh(nodes, base.triangles, base.boundary_edges, base.boundary_labels)


def small_layout(n_cells=12, side=4.0, r_obst=0.7, t_cloak=0.6, t_obs=0.8,
                 data: ProblemData | None = None):
    """A compact obstacle/cloak/observation layout for solver tests."""
    mesh = build_square_mesh(side, side / n_cells)
    sdf = disk_signed_distance((0.0, 0.0), r_obst)
    tags = tag_regions(
        mesh,
        obstacle=inside(sdf),
        cloak=band(sdf, 0.0, t_cloak),
        observation=band(sdf, t_cloak, t_cloak + t_obs),
    )
    if data is None:
        data = ProblemData(source_center=(1.5, 0.0), source_radius=0.35)
    return build_operators(mesh, tags, data)


@pytest.fixture(scope="session")
def small_ops():
    return small_layout()
