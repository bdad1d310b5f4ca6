"""Post-processing: eigen-structure, tracking errors, and control transfer."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .assembly import Operators
from .fields import ControlField, Trajectory
from .mesh import ParentMap

_ISO_TOL = 1e-12


@dataclass
class EigenField:
    """Per-node eigendecomposition of the diffusivity matrix K.

    lam1 >= lam2; angles are measured from the horizontal axis in degrees,
    normalized to (-90, 90]. Isotropic nodes report angle1 = 0, angle2 = 90.
    """

    lam1: np.ndarray
    lam2: np.ndarray
    angle1: np.ndarray
    angle2: np.ndarray


def _normalize_angle(deg: np.ndarray) -> np.ndarray:
    out = np.mod(deg, 180.0)
    out = np.where(out > 90.0, out - 180.0, out)
    return out


def eigen_field(ctrl: ControlField, mu: float) -> EigenField:
    """Closed-form 2x2 symmetric eigendecomposition of K = [[mu+u, v], [v, mu+f]].

    Works on infeasible fields too (diagnostics); transient controls yield
    per-slice arrays.
    """
    a = mu + ctrl.u
    b = mu + ctrl.f
    v = ctrl.v
    mean = 0.5 * (a + b)
    radius = np.sqrt((0.5 * (a - b)) ** 2 + v ** 2)
    lam1 = mean + radius
    lam2 = mean - radius
    angle1 = _normalize_angle(np.degrees(0.5 * np.arctan2(2.0 * v, a - b)))
    iso = (np.abs(v) < _ISO_TOL) & (np.abs(a - b) < _ISO_TOL)
    angle1 = np.where(iso, 0.0, angle1)
    angle2 = _normalize_angle(angle1 + 90.0)
    return EigenField(lam1, lam2, angle1, angle2)


def min_eigenvalues(ctrl: ControlField, mu: float) -> np.ndarray:
    return eigen_field(ctrl, mu).lam2


def mte(ops: Operators, q: np.ndarray, z: np.ndarray) -> float:
    """Mean tracking error: int_obs (q - z)^2 divided by the observation area."""
    if ops.obs_area <= 0.0:
        raise ValueError("observation region has zero area")
    d = q - ops.rmap.restrict(z)
    return float(d @ (ops.m_obs @ d)) / ops.obs_area


def efficiency(mte_uncontrolled: float, mte_optimal: float) -> float:
    """Cloaking efficiency |MTE - MTE*| / MTE of a design against zero control."""
    if mte_uncontrolled <= 0.0:
        raise ValueError("efficiency undefined for zero uncontrolled tracking error")
    return abs(mte_uncontrolled - mte_optimal) / mte_uncontrolled


def spacetime_norm(ops: Operators, traj_q: Trajectory, traj_z: Trajectory) -> float:
    """Squared space-time tracking norm, trapezoidal in time.

    Returns int_0^T ||q(t) - z(t)||^2_{L2(obs)} dt for a masked-mesh state
    trajectory against a reference-mesh trajectory on the same time grid.
    """
    if len(traj_q.times) != len(traj_z.times) or not np.allclose(traj_q.times, traj_z.times):
        raise ValueError("trajectories live on different time grids")
    w = np.ones(len(traj_q.times))
    w[0] = w[-1] = 0.5
    total = 0.0
    for i in range(len(traj_q.times)):
        d = traj_q.fields[i] - ops.rmap.restrict(traj_z.fields[i])
        total += w[i] * float(d @ (ops.m_obs @ d))
    return traj_q.dt * total


def efficiency_series(ops: Operators, traj_unc: Trajectory, traj_opt: Trajectory,
                      traj_z: Trajectory) -> np.ndarray:
    """Per-time-instant efficiency from instantaneous mean tracking errors.

    Nodes where the uncontrolled error vanishes (the initial instant) yield
    NaN.
    """
    out = np.full(len(traj_z.times), np.nan)
    for i in range(len(traj_z.times)):
        m_unc = mte(ops, traj_unc.fields[i], traj_z.fields[i])
        if m_unc > 0.0:
            out[i] = efficiency(m_unc, mte(ops, traj_opt.fields[i], traj_z.fields[i]))
    return out


def prolongate_controls(ctrl: ControlField, parent_map: ParentMap,
                        coarse_ctrl_nodes: np.ndarray, fine_ctrl_nodes: np.ndarray,
                        n_coarse_nodes: int) -> ControlField:
    """Linear transfer of a coarse design onto the fine control nodes.

    Fine nodes shared with the coarse mesh keep their value; edge midpoints
    average their endpoints, so nodal feasibility is preserved (the trace
    margin exactly, positive definiteness by convexity of the SPD cone). A
    fine control node not covered by coarse control values is zero-extended
    with a warning.
    """
    coarse_ctrl_nodes = np.asarray(coarse_ctrl_nodes, dtype=np.int64)
    fine_ctrl_nodes = np.asarray(fine_ctrl_nodes, dtype=np.int64)
    known = np.zeros(n_coarse_nodes, dtype=bool)
    known[coarse_ctrl_nodes] = True
    vtx = parent_map.vertex_nodes[fine_ctrl_nodes]
    w = parent_map.weights[fine_ctrl_nodes]
    covered = np.all(known[vtx] | (w == 0.0), axis=1)
    if not covered.all():
        warnings.warn(f"{int((~covered).sum())} fine control nodes lie outside "
                      "the coarse cloak support; zero-extending",
                      stacklevel=2)

    def transfer(values: np.ndarray) -> np.ndarray:
        full = np.zeros(n_coarse_nodes)
        full[coarse_ctrl_nodes] = values
        out = np.einsum("fk,fk->f", w, full[vtx])
        out[~covered] = 0.0
        return out

    if ctrl.transient:
        u = np.stack([transfer(ctrl.u[i]) for i in range(ctrl.n_slices)])
        f = np.stack([transfer(ctrl.f[i]) for i in range(ctrl.n_slices)])
        v = np.stack([transfer(ctrl.v[i]) for i in range(ctrl.n_slices)])
    else:
        u, f, v = transfer(ctrl.u), transfer(ctrl.f), transfer(ctrl.v)
    return ControlField(u, f, v)
