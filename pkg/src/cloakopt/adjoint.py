"""Discrete cost functional, adjoint solves, and exact cost gradients.

The transient adjoint is the discrete one: it is obtained by differentiating
the Lagrangian of the implemented theta-method recursion, so the returned
gradient is the exact derivative of the discrete cost (up to linear-solver
residuals). The adjoint recursion matrices are the exact transposes of the
forward transition matrices and reuse their factorizations.
"""

from __future__ import annotations

import numpy as np

from .assembly import Operators
from .fields import ControlField, GradientTriple, Trajectory
from .forward import TransientSolution, _check_theta, _factor, transient_forward


def _misfit(ops: Operators, q: np.ndarray, z_ref: np.ndarray) -> np.ndarray:
    return q - ops.rmap.restrict(z_ref)


def _slice_weights(ops: Operators, n_steps: int) -> np.ndarray:
    """Rectangle-rule weight (0 or 1) per time node for the cost sum."""
    w = np.ones(n_steps + 1)
    if ops.data.include_final_cost_node:
        w[0] = 0.0
    else:
        w[n_steps] = 0.0
    return w


def eval_cost(ops: Operators, q, z, ctrl: ControlField) -> float:
    """Tracking-plus-regularization cost of a state against the reference.

    Steady inputs are nodal vectors (state on the masked mesh, reference on
    the reference mesh); transient inputs are aligned trajectories and the
    time integral uses the rectangle rule matched to the adjoint recursion.
    """
    ru, rf, rv = ops.regularizers()
    if isinstance(q, Trajectory):
        if not isinstance(z, Trajectory) or len(q.times) != len(z.times) \
                or not np.allclose(q.times, z.times):
            raise ValueError("state and reference trajectories are not aligned")
        if not ctrl.transient or ctrl.n_slices != len(q.times):
            raise ValueError("need one control slice per time node")
        dt = q.dt
        w = _slice_weights(ops, q.n_steps)
        total = 0.0
        for i in range(len(q.times)):
            if w[i] == 0.0:
                continue
            d = _misfit(ops, q.fields[i], z.fields[i])
            c = ctrl.slice(i)
            total += 0.5 * (d @ (ops.m_obs @ d)) \
                + 0.5 * (c.u @ (ru @ c.u) + c.f @ (rf @ c.f) + c.v @ (rv @ c.v))
        return dt * total
    if ctrl.transient:
        raise ValueError("steady cost takes a single control slice")
    d = _misfit(ops, q, z)
    return float(0.5 * (d @ (ops.m_obs @ d))
                 + 0.5 * (ctrl.u @ (ru @ ctrl.u) + ctrl.f @ (rf @ ctrl.f)
                          + ctrl.v @ (rv @ ctrl.v)))


def solve_adjoint_steady(ops: Operators, q: np.ndarray, z: np.ndarray,
                         ctrl: ControlField, lu=None) -> np.ndarray:
    """Adjoint field: S^T p = M_obs (q - E z), p = 0 on the obstacle boundary."""
    free = ops.free_nodes
    rhs = (ops.m_obs @ _misfit(ops, q, z))[free]
    if lu is None:
        s = ops.state_matrix(ctrl.u, ctrl.f, ctrl.v)
        lu = _factor(s[free][:, free])
    p = np.zeros(ops.n_state)
    p[free] = lu.solve(rhs, trans="T")
    return p


def solve_adjoint_transient(ops: Operators, traj_q: Trajectory, traj_z: Trajectory,
                            ctrl: ControlField, theta: float = 1.0,
                            solution: TransientSolution | None = None) -> Trajectory:
    """Backward adjoint recursion with the exact forward transition transposes.

    The terminal multiplier solves A_+(c_N)^T p_N = w_N*dt*M_obs(q_N - E z_N),
    then A_+(c_i)^T p_i = A_-(c_i)^T p_{i+1} + w_i*dt*M_obs(q_i - E z_i); the
    slot p_0 is identically zero (the initial state is prescribed).
    """
    _check_theta(theta)
    if len(traj_q.times) != len(traj_z.times) or not np.allclose(traj_q.times, traj_z.times):
        raise ValueError("state and reference trajectories are not aligned")
    n_steps = traj_q.n_steps
    dt = traj_q.dt
    if solution is None:
        solution = transient_forward(ops, ctrl, traj_q.times[-1], n_steps, theta)
    free = ops.free_nodes
    mass_ff = ops.mass[free][:, free].tocsr()
    w = _slice_weights(ops, n_steps)
    fields = np.zeros((n_steps + 1, ops.n_state))
    p_next = None
    for i in range(n_steps, 0, -1):
        rhs = w[i] * dt * (ops.m_obs @ _misfit(ops, traj_q.fields[i], traj_z.fields[i]))[free]
        if i < n_steps:
            a_minus_t = (mass_ff - (1.0 - theta) * dt * solution.s_ff[i]).T
            rhs = rhs + a_minus_t @ p_next
        p_next = solution.lus[i].solve(rhs, trans="T")
        fields[i, free] = p_next
    return Trajectory(traj_q.times, fields)


def eval_gradient(ops: Operators, q, p, ctrl: ControlField,
                  theta: float = 1.0) -> GradientTriple:
    """Exact gradient of the discrete cost with respect to the controls.

    Steady: g_u = beta*M_u u + beta_g*A_u u - (B_u p) q and cyclically for f
    and v. Transient: per-slice dt-weighted sums of the same bilinear terms,
    with the implicit side paired with p_i and the explicit side with p_{i+1}.
    """
    ru, rf, rv = ops.regularizers()
    if isinstance(q, Trajectory):
        _check_theta(theta)
        n_steps = q.n_steps
        dt = q.dt
        w = _slice_weights(ops, n_steps)
        g_u = np.zeros_like(ctrl.u)
        g_f = np.zeros_like(ctrl.f)
        g_v = np.zeros_like(ctrl.v)
        for i in range(n_steps + 1):
            c = ctrl.slice(i)
            if w[i] != 0.0:
                g_u[i] += w[i] * dt * (ru @ c.u)
                g_f[i] += w[i] * dt * (rf @ c.f)
                g_v[i] += w[i] * dt * (rv @ c.v)
            qi = q.fields[i]
            if i >= 1 and theta > 0.0:
                pi = p.fields[i]
                g_u[i] -= theta * dt * ops.b_u.bilinear(pi, qi)
                g_f[i] -= theta * dt * ops.b_f.bilinear(pi, qi)
                g_v[i] -= theta * dt * ops.b_v.bilinear(pi, qi)
            if i <= n_steps - 1 and theta < 1.0:
                pn = p.fields[i + 1]
                g_u[i] -= (1.0 - theta) * dt * ops.b_u.bilinear(pn, qi)
                g_f[i] -= (1.0 - theta) * dt * ops.b_f.bilinear(pn, qi)
                g_v[i] -= (1.0 - theta) * dt * ops.b_v.bilinear(pn, qi)
        return GradientTriple(g_u, g_f, g_v)
    return GradientTriple(
        ru @ ctrl.u - ops.b_u.bilinear(p, q),
        rf @ ctrl.f - ops.b_f.bilinear(p, q),
        rv @ ctrl.v - ops.b_v.bilinear(p, q))
