"""Readers and writers for meshes, designs, fields, and reports.

All formats are plain ASCII with 17 significant digits, so a write/read
round trip reproduces every float bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .fields import ControlField, Trajectory
from .mesh import TriMesh

MESH_MAGIC = "cloakopt-mesh 1"
DESIGN_MAGIC = "cloakopt-design 1"


class FormatError(ValueError):
    """File contents do not follow the documented format."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_mesh(path: str, mesh: TriMesh):
    """ASCII mesh format: header, nodes, tagged triangles, labelled edges."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MESH_MAGIC + "\n")
        fh.write(f"nodes {mesh.n_nodes}\n")
        for x, y in mesh.nodes:
            fh.write(f"{_fmt(x)} {_fmt(y)}\n")
        fh.write(f"triangles {mesh.n_elems}\n")
        for (i, j, k), tag in zip(mesh.triangles, mesh.elem_tags):
            fh.write(f"{i} {j} {k} {tag}\n")
        fh.write(f"edges {len(mesh.boundary_edges)}\n")
        for (i, j), label in zip(mesh.boundary_edges, mesh.boundary_labels):
            fh.write(f"{i} {j} {label}\n")


class _Lines:
    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            self.lines = fh.read().splitlines()
        self.pos = 0
        self.path = path

    def next(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise FormatError(f"{self.path}: unexpected end of file")

    def expect_count(self, keyword: str) -> int:
        line = self.next()
        parts = line.split()
        if len(parts) != 2 or parts[0] != keyword:
            raise FormatError(f"{self.path}: expected '{keyword} <n>', got {line!r}")
        return int(parts[1])


def read_mesh(path: str) -> TriMesh:
    lines = _Lines(path)
    if lines.next() != MESH_MAGIC:
        raise FormatError(f"{path}: not a mesh file (missing {MESH_MAGIC!r} header)")
    n = lines.expect_count("nodes")
    nodes = np.array([[float(t) for t in lines.next().split()] for _ in range(n)])
    m = lines.expect_count("triangles")
    rows = np.array([[int(t) for t in lines.next().split()] for _ in range(m)],
                    dtype=np.int64).reshape(m, 4)
    b = lines.expect_count("edges")
    erows = np.array([[int(t) for t in lines.next().split()] for _ in range(b)],
                     dtype=np.int64).reshape(b, 3)
    return TriMesh(nodes, rows[:, :3], erows[:, :2], erows[:, 2], rows[:, 3])


def write_design(path: str, ctrl: ControlField, ctrl_nodes: np.ndarray,
                 coords: np.ndarray):
    """Design format: control node ids and coordinates, then u f v per slice."""
    slices = ctrl.n_slices
    k = ctrl.n_ctrl
    if len(ctrl_nodes) != k or coords.shape != (k, 2):
        raise ValueError("control node list does not match the design")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(DESIGN_MAGIC + "\n")
        fh.write(f"nodes {k}\n")
        for idx, (x, y) in zip(ctrl_nodes, coords):
            fh.write(f"{idx} {_fmt(x)} {_fmt(y)}\n")
        fh.write(f"slices {slices}\n")
        fh.write("controls\n")
        for s in range(slices):
            c = ctrl.slice(s)
            for j in range(k):
                fh.write(f"{_fmt(c.u[j])} {_fmt(c.f[j])} {_fmt(c.v[j])}\n")


def read_design(path: str) -> tuple[ControlField, np.ndarray, np.ndarray]:
    lines = _Lines(path)
    if lines.next() != DESIGN_MAGIC:
        raise FormatError(f"{path}: not a design file (missing {DESIGN_MAGIC!r} header)")
    k = lines.expect_count("nodes")
    ids = np.empty(k, dtype=np.int64)
    coords = np.empty((k, 2))
    for j in range(k):
        parts = lines.next().split()
        if len(parts) != 3:
            raise FormatError(f"{path}: node lines are '<id> <x> <y>'")
        ids[j] = int(parts[0])
        coords[j] = (float(parts[1]), float(parts[2]))
    slices = lines.expect_count("slices")
    if lines.next() != "controls":
        raise FormatError(f"{path}: expected 'controls' section")
    vals = np.array([[float(t) for t in lines.next().split()]
                     for _ in range(slices * k)]).reshape(slices, k, 3)
    if slices == 1:
        ctrl = ControlField(vals[0, :, 0], vals[0, :, 1], vals[0, :, 2])
    else:
        ctrl = ControlField(vals[:, :, 0], vals[:, :, 1], vals[:, :, 2])
    return ctrl, ids, coords


def write_fields_vtk(path: str, mesh: TriMesh, point_data: dict[str, np.ndarray],
                     title: str = "cloakopt fields"):
    """Legacy ASCII VTK unstructured grid with one scalar block per field."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 2.0\n")
        fh.write(title + "\n")
        fh.write("ASCII\n")
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.n_nodes} double\n")
        for x, y in mesh.nodes:
            fh.write(f"{_fmt(x)} {_fmt(y)} 0\n")
        fh.write(f"CELLS {mesh.n_elems} {4 * mesh.n_elems}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"3 {i} {j} {k}\n")
        fh.write(f"CELL_TYPES {mesh.n_elems}\n")
        fh.write("5\n" * mesh.n_elems)
        fh.write(f"POINT_DATA {mesh.n_nodes}\n")
        for name, values in point_data.items():
            values = np.asarray(values)
            if values.shape != (mesh.n_nodes,):
                raise ValueError(f"field {name!r} does not match the mesh")
            fh.write(f"SCALARS {name} double\n")
            fh.write("LOOKUP_TABLE default\n")
            for v in values:
                fh.write(_fmt(v) + "\n")


def write_field_csv(path: str, mesh: TriMesh, values: np.ndarray):
    values = np.asarray(values)
    if values.shape != (mesh.n_nodes,):
        raise ValueError("field does not match the mesh")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node,x,y,value\n")
        for i, ((x, y), v) in enumerate(zip(mesh.nodes, values)):
            fh.write(f"{i},{_fmt(x)},{_fmt(y)},{_fmt(v)}\n")


def write_trajectory_vtk(prefix: str, mesh: TriMesh, traj: Trajectory, name: str):
    """One VTK file per time node: <prefix>_0000.vtk etc."""
    paths = []
    for i in range(len(traj.times)):
        p = f"{prefix}_{i:04d}.vtk"
        write_fields_vtk(p, mesh, {name: traj.fields[i]},
                         title=f"{name} at t={traj.times[i]:.6g}")
        paths.append(p)
    return paths


def write_matrix(path: str, a):
    """Sparse matrix as matrix-market ASCII triplets (17 significant digits)."""
    from scipy import io as spio

    spio.mmwrite(path, a.tocoo(), precision=17)


def read_matrix(path: str):
    from scipy import io as spio

    return spio.mmread(path).tocsr()


def write_report(path: str, entries: dict):
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in entries.items():
            if isinstance(value, float):
                fh.write(f"{key} = {_fmt(value)}\n")
            else:
                fh.write(f"{key} = {value}\n")


def read_report(path: str) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out
