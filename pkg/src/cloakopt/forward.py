"""Steady and transient heat solves: reference, uncloaked, and controlled.

Time stepping uses the one-parameter theta scheme

    (M + theta*dt*S(c_{i+1})) q_{i+1}
        = (M - (1-theta)*dt*S(c_i)) q_i + dt*(F + F_o),

where S(c) is the control-dependent system matrix and F_o carries the
Dirichlet coupling. theta=1 is backward Euler, theta=1/2 Crank-Nicolson.
Linear systems are solved by sparse LU; factorizations of the implicit
matrices are kept so the adjoint sweep can reuse their transposes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from .assembly import Operators, apply_dirichlet
from .fields import ControlField, Trajectory


class SolverError(RuntimeError):
    """A linear solve failed or left a large residual."""


_RESIDUAL_RTOL = 1e-10


def _factor(a: sparse.spmatrix):
    try:
        return splu(a.tocsc())
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc


def _check_residual(a, x, b):
    res = np.linalg.norm(a @ x - b)
    scale = max(np.linalg.norm(b), np.linalg.norm(a @ x), 1e-300)
    if res > _RESIDUAL_RTOL * scale:
        raise SolverError(f"linear solve residual {res / scale:.3e} exceeds tolerance")


def check_control_feasible(ops: Operators, ctrl: ControlField):
    """Refuse controls whose diffusivity matrix leaves the SPD margin."""
    mu, eps = ops.data.mu, ops.data.eps
    g1 = 2.0 * mu + ctrl.u + ctrl.f - eps
    g2 = (mu + ctrl.u) * (mu + ctrl.f) - ctrl.v ** 2 - eps
    if g1.min() < 0 or g2.min() < 0:
        raise ValueError("control field violates the diffusivity SPD constraints")


def solve_reference_steady(ops: Operators) -> np.ndarray:
    """Obstacle-free steady field on the reference mesh: (A + A_r) z = F."""
    z = _factor(ops.k_ref).solve(ops.f_ref)
    _check_residual(ops.k_ref, z, ops.f_ref)
    return z


def solve_reference_transient(ops: Operators, t_final: float, n_steps: int,
                              theta: float = 1.0) -> Trajectory:
    """Obstacle-free transient field on the reference mesh from a zero start."""
    _check_theta(theta)
    dt = t_final / n_steps
    a_plus = (ops.m_ref + theta * dt * ops.k_ref).tocsc()
    a_minus = (ops.m_ref - (1.0 - theta) * dt * ops.k_ref).tocsr()
    lu = _factor(a_plus)
    n = ops.ref_mesh.n_nodes
    fields = np.zeros((n_steps + 1, n))
    for i in range(n_steps):
        rhs = a_minus @ fields[i] + dt * ops.f_ref
        fields[i + 1] = lu.solve(rhs)
        _check_residual(a_plus, fields[i + 1], rhs)
    return Trajectory(np.linspace(0.0, t_final, n_steps + 1), fields)


def solve_state_steady(ops: Operators, ctrl: ControlField) -> np.ndarray:
    """Controlled steady field on the masked mesh; Dirichlet nodes carry T_o."""
    if ctrl.transient:
        raise ValueError("steady solve takes a single control slice")
    check_control_feasible(ops, ctrl)
    s = ops.state_matrix(ctrl.u, ctrl.f, ctrl.v)
    sys = apply_dirichlet(s, ops.load, ops.dirichlet_nodes, ops.data.t_obstacle)
    xf = _factor(sys.matrix).solve(sys.rhs)
    _check_residual(sys.matrix, xf, sys.rhs)
    return sys.expand(xf)


def _check_theta(theta: float):
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")


def _dirichlet_vector(ops: Operators) -> np.ndarray:
    t = np.zeros(ops.n_state)
    t[ops.dirichlet_nodes] = ops.data.t_obstacle
    return t


def step_theta(ops: Operators, prev: np.ndarray, ctrl_prev: ControlField,
               ctrl_next: ControlField, dt: float, theta: float = 1.0) -> np.ndarray:
    """One theta-method step of the controlled problem on the masked mesh."""
    _check_theta(theta)
    free = ops.free_nodes
    s_next = ops.state_matrix(ctrl_next.u, ctrl_next.f, ctrl_next.v)
    t_vec = _dirichlet_vector(ops)
    rhs = (ops.mass @ prev)[free] - (ops.mass @ t_vec)[free] + dt * ops.load[free] \
        - theta * dt * (s_next @ t_vec)[free]
    if theta < 1.0:
        s_prev = ops.state_matrix(ctrl_prev.u, ctrl_prev.f, ctrl_prev.v)
        rhs -= (1.0 - theta) * dt * (s_prev @ prev)[free]
    a_plus = (ops.mass[free][:, free] + theta * dt * s_next[free][:, free]).tocsr()
    xf = _factor(a_plus).solve(rhs)
    _check_residual(a_plus, xf, rhs)
    out = np.empty(ops.n_state)
    out[free] = xf
    out[ops.dirichlet_nodes] = ops.data.t_obstacle
    return out


@dataclass
class TransientSolution:
    """Forward trajectory plus the reusable per-step implicit factorizations.

    ``lus[i]`` factors the free-node implicit matrix built from the controls
    at time node i (entry 0 unused); ``s_ff[i]`` is the free-node system
    matrix S(c_i). ``n_factorizations`` counts LU decompositions performed
    (1 when the controls are constant in time).
    """

    trajectory: Trajectory
    lus: list
    s_ff: list
    n_factorizations: int


def transient_forward(ops: Operators, ctrl: ControlField, t_final: float,
                      n_steps: int, theta: float = 1.0) -> TransientSolution:
    """Theta-method trajectory from a zero start, keeping factorizations."""
    _check_theta(theta)
    if t_final <= 0 or n_steps < 1:
        raise ValueError("need t_final > 0 and n_steps >= 1")
    if ctrl.transient:
        if ctrl.n_slices != n_steps + 1:
            raise ValueError(f"need {n_steps + 1} control slices, got {ctrl.n_slices}")
    else:
        ctrl = ControlField(np.tile(ctrl.u, (n_steps + 1, 1)),
                            np.tile(ctrl.f, (n_steps + 1, 1)),
                            np.tile(ctrl.v, (n_steps + 1, 1)))
    check_control_feasible(ops, ctrl)
    dt = t_final / n_steps
    free = ops.free_nodes
    mass_ff = ops.mass[free][:, free].tocsr()
    t_vec = _dirichlet_vector(ops)

    constant = (np.all(ctrl.u == ctrl.u[0]) and np.all(ctrl.f == ctrl.f[0])
                and np.all(ctrl.v == ctrl.v[0]))
    s_full = [None] * (n_steps + 1)
    s_ff = [None] * (n_steps + 1)
    lus = [None] * (n_steps + 1)
    n_fact = 0
    for i in range(n_steps + 1):
        if constant and i > 0:
            s_full[i] = s_full[0]
            s_ff[i] = s_ff[0]
            if i > 1:
                lus[i] = lus[1]
                continue
        else:
            c = ctrl.slice(i)
            s_full[i] = ops.state_matrix(c.u, c.f, c.v)
            s_ff[i] = s_full[i][free][:, free].tocsr()
        if i >= 1:
            lus[i] = _factor(mass_ff + theta * dt * s_ff[i])
            n_fact += 1

    fields = np.zeros((n_steps + 1, ops.n_state))
    for i in range(n_steps):
        prev = fields[i]
        rhs = (ops.mass @ prev)[free] - (ops.mass @ t_vec)[free] + dt * ops.load[free] \
            - theta * dt * (s_full[i + 1] @ t_vec)[free]
        if theta < 1.0:
            rhs -= (1.0 - theta) * dt * (s_full[i] @ prev)[free]
        xf = lus[i + 1].solve(rhs)
        a_plus = mass_ff + theta * dt * s_ff[i + 1]
        _check_residual(a_plus, xf, rhs)
        fields[i + 1, free] = xf
        fields[i + 1, ops.dirichlet_nodes] = ops.data.t_obstacle
    traj = Trajectory(np.linspace(0.0, t_final, n_steps + 1), fields)
    return TransientSolution(traj, lus, s_ff, n_fact)


def solve_transient(ops: Operators, ctrl: ControlField, t_final: float,
                    n_steps: int, theta: float = 1.0) -> Trajectory:
    """Controlled transient trajectory on the masked mesh."""
    return transient_forward(ops, ctrl, t_final, n_steps, theta).trajectory
