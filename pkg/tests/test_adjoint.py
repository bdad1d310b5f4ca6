import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from cloakopt.adjoint import eval_cost, eval_gradient, solve_adjoint_steady, solve_adjoint_transient
from cloakopt.assembly import ProblemData, apply_dirichlet
from cloakopt.fields import ControlField, Trajectory
from cloakopt.forward import solve_state_steady, transient_forward
from cloakopt.problem import CloakProblem, gradient_check

from conftest import small_layout


def tiny_problem(regime="steady", n_steps=3, theta=1.0, include_final=True):
    data = ProblemData(source_center=(1.5, 0.0), source_radius=0.45,
                       include_final_cost_node=include_final)
    ops = small_layout(n_cells=8, r_obst=0.8, t_cloak=0.7, t_obs=0.9, data=data)
    return CloakProblem(ops, regime=regime, t_final=0.6, n_steps=n_steps, theta=theta)


def random_feasible_control(problem, seed=0, scale=0.25):
    rng = np.random.default_rng(seed)
    shape = (problem.n_ctrl,) if problem.ctrl_slices is None \
        else (problem.ctrl_slices, problem.n_ctrl)
    return ControlField(rng.uniform(-scale, scale, shape),
                        rng.uniform(-scale, scale, shape),
                        rng.uniform(-scale, scale, shape))


def fd_directional(problem, ctrl, direction, tau):
    vec = ctrl.to_vector()
    dvec = direction.to_vector()
    shape = (problem.n_ctrl, problem.ctrl_slices)
    plus = problem.cost(ControlField.from_vector(vec + tau * dvec, *shape))
    minus = problem.cost(ControlField.from_vector(vec - tau * dvec, *shape))
    return (plus - minus) / (2.0 * tau)


def test_cost_zero_when_state_matches_reference_and_no_control():
    prob = tiny_problem()
    z = prob.reference()
    q = prob.ops.rmap.restrict(z)
    assert eval_cost(prob.ops, q, z, prob.zero_control()) == 0.0


def test_cost_is_pure_misfit_for_zero_control():
    prob = tiny_problem()
    z = prob.reference()
    q = solve_state_steady(prob.ops, prob.zero_control())
    d = q - prob.ops.rmap.restrict(z)
    expected = 0.5 * d @ (prob.ops.m_obs @ d)
    assert prob.cost(prob.zero_control()) == pytest.approx(expected, rel=1e-14)


def test_cost_matches_element_quadrature_oracle():
    prob = tiny_problem()
    ops = prob.ops
    rng = np.random.default_rng(1)
    q = rng.normal(size=ops.n_state)
    z = rng.normal(size=ops.ref_mesh.n_nodes)
    k = ops.n_ctrl
    ctrl = ControlField(rng.normal(size=k), rng.normal(size=k), rng.normal(size=k))
    j = eval_cost(ops, q, z, ctrl)

    # independent oracle: exact per-element integration of P1 fields
    from cloakopt.assembly import _p1_gradients
    from cloakopt.mesh import tags_from_mesh
    mesh = ops.masked
    mtags = tags_from_mesh(mesh)
    grads = _p1_gradients(mesh)
    d = q - ops.rmap.restrict(z)

    def quad_sq(elems, nodal):
        # int w^2 with w P1: exact via the local mass block
        total = 0.0
        for e in elems:
            w = nodal[mesh.triangles[e]]
            local = mesh.areas[e] / 12.0 * (np.ones((3, 3)) + np.eye(3))
            total += w @ local @ w
        return total

    def quad_gradsq(elems, nodal):
        total = 0.0
        for e in elems:
            g = grads[e].T @ nodal[mesh.triangles[e]]
            total += mesh.areas[e] * (g @ g)
        return total

    un = np.zeros(ops.n_state)
    fn = np.zeros(ops.n_state)
    vn = np.zeros(ops.n_state)
    un[ops.ctrl_nodes], fn[ops.ctrl_nodes], vn[ops.ctrl_nodes] = ctrl.u, ctrl.f, ctrl.v
    da = ops.data
    oracle = 0.5 * quad_sq(mtags.obs_elems, d) \
        + 0.5 * (da.beta * quad_sq(mtags.cloak_elems, un)
                 + da.beta_g * quad_gradsq(mtags.cloak_elems, un)
                 + da.xi * quad_sq(mtags.cloak_elems, fn)
                 + da.xi_g * quad_gradsq(mtags.cloak_elems, fn)
                 + da.gamma * quad_sq(mtags.cloak_elems, vn)
                 + da.gamma_g * quad_gradsq(mtags.cloak_elems, vn))
    assert j == pytest.approx(oracle, rel=1e-12)


def test_adjoint_zero_for_matching_state():
    prob = tiny_problem()
    z = prob.reference()
    q = prob.ops.rmap.restrict(z)
    p = solve_adjoint_steady(prob.ops, q, z, prob.zero_control())
    assert np.max(np.abs(p)) <= 1e-12


def test_adjoint_equals_direct_solve_with_misfit_rhs():
    prob = tiny_problem()
    ops = prob.ops
    ctrl = random_feasible_control(prob, seed=2)
    z = prob.reference()
    q = solve_state_steady(ops, ctrl)
    p = solve_adjoint_steady(ops, q, z, ctrl)
    free = ops.free_nodes
    s = ops.state_matrix(ctrl.u, ctrl.f, ctrl.v)[free][:, free]
    rhs = (ops.m_obs @ (q - ops.rmap.restrict(z)))[free]
    p_direct = spsolve(s.T.tocsc(), rhs)
    assert np.allclose(p[free], p_direct, atol=1e-12 * max(1.0, np.abs(p_direct).max()))
    assert np.all(p[ops.dirichlet_nodes] == 0.0)


def test_gradient_is_pure_regularization_when_adjoint_vanishes():
    prob = tiny_problem()
    ops = prob.ops
    ctrl = random_feasible_control(prob, seed=3)
    g = eval_gradient(ops, np.zeros(ops.n_state), np.zeros(ops.n_state), ctrl)
    ru, rf, rv = ops.regularizers()
    assert np.allclose(g.g_u, ru @ ctrl.u, atol=1e-15)
    assert np.allclose(g.g_f, rf @ ctrl.f, atol=1e-15)
    assert np.allclose(g.g_v, rv @ ctrl.v, atol=1e-15)


def test_steady_gradient_matches_finite_differences():
    prob = tiny_problem()
    ctrl = random_feasible_control(prob, seed=4)
    _, g = prob.cost_and_gradient(ctrl)
    rng = np.random.default_rng(5)
    h = ControlField(rng.normal(size=ctrl.u.shape), rng.normal(size=ctrl.u.shape),
                     rng.normal(size=ctrl.u.shape))
    fd = fd_directional(prob, ctrl, h, 1e-5)
    exact = g.to_vector() @ h.to_vector()
    assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1e-12)


def test_steady_gradient_fd_error_curve_is_v_shaped():
    prob = tiny_problem()
    ctrl = random_feasible_control(prob, seed=6)
    _, g = prob.cost_and_gradient(ctrl)
    rng = np.random.default_rng(7)
    h = ControlField(rng.normal(size=ctrl.u.shape), rng.normal(size=ctrl.u.shape),
                     rng.normal(size=ctrl.u.shape))
    exact = g.to_vector() @ h.to_vector()
    taus = np.logspace(-1, -9, 9)
    errs = np.array([abs(fd_directional(prob, ctrl, h, t) - exact) / abs(exact)
                     for t in taus])
    k = int(np.argmin(errs))
    assert 0 < k < len(taus) - 1
    assert errs[k] <= 1e-7
    assert errs[0] >= 10 * errs[k]
    assert errs[-1] >= 10 * errs[k]


def test_single_step_gradient_matches_dense_unrolling_oracle():
    prob = tiny_problem(regime="transient", n_steps=1)
    ops = prob.ops
    ctrl = random_feasible_control(prob, seed=8)
    j, g = prob.cost_and_gradient(ctrl)

    # unroll the single implicit step densely: q1 = Aplus(c1)^{-1} rhs(c1)
    dt = prob.t_final
    free = ops.free_nodes
    z1 = prob.reference().fields[1]
    c1 = ctrl.slice(1)
    s_full = ops.state_matrix(c1.u, c1.f, c1.v)
    t_vec = np.zeros(ops.n_state)
    t_vec[ops.dirichlet_nodes] = ops.data.t_obstacle
    a_plus = (ops.mass[free][:, free] + dt * s_full[free][:, free]).toarray()
    rhs = dt * ops.load[free] - dt * (s_full @ t_vec)[free] - (ops.mass @ t_vec)[free]
    q1f = np.linalg.solve(a_plus, rhs)
    q1 = t_vec.copy()
    q1[free] = q1f
    d = q1 - ops.rmap.restrict(z1)
    ru, rf, rv = ops.regularizers()
    lam = np.linalg.solve(a_plus.T, dt * (ops.m_obs @ d)[free])
    lam_full = np.zeros(ops.n_state)
    lam_full[free] = lam
    g_u = dt * (ru @ c1.u) - dt * ops.b_u.bilinear(lam_full, q1)
    g_f = dt * (rf @ c1.f) - dt * ops.b_f.bilinear(lam_full, q1)
    g_v = dt * (rv @ c1.v) - dt * ops.b_v.bilinear(lam_full, q1)
    assert np.allclose(g.g_u[1], g_u, atol=1e-12 * max(1.0, np.abs(g_u).max()))
    assert np.allclose(g.g_f[1], g_f, atol=1e-12 * max(1.0, np.abs(g_f).max()))
    assert np.allclose(g.g_v[1], g_v, atol=1e-12 * max(1.0, np.abs(g_v).max()))
    # with backward Euler and the final-node cost sum, slice 0 is inert
    assert np.all(g.g_u[0] == 0.0)


def test_transient_adjoint_vanishes_for_matching_trajectories():
    prob = tiny_problem(regime="transient", n_steps=3)
    traj_z = prob.reference()
    fields_q = np.array([prob.ops.rmap.restrict(z) for z in traj_z.fields])
    traj_q = Trajectory(traj_z.times, fields_q)
    p = solve_adjoint_transient(prob.ops, traj_q, traj_z, prob.zero_control(), prob.theta)
    assert np.max(np.abs(p.fields)) <= 1e-12


@pytest.mark.parametrize("theta", [1.0, 0.5])
def test_transient_gradient_matches_finite_differences(theta):
    prob = tiny_problem(regime="transient", n_steps=3, theta=theta)
    ctrl = random_feasible_control(prob, seed=9)
    check = gradient_check(prob, ctrl, n_coords=10, seed=10)
    assert check.max_rel_error <= 1e-5


def test_transient_gradient_without_final_cost_node():
    prob = tiny_problem(regime="transient", n_steps=3, include_final=False)
    ctrl = random_feasible_control(prob, seed=11)
    _, g = prob.cost_and_gradient(ctrl)
    # terminal adjoint vanishes, matching the continuous condition p(T) = 0
    sol = transient_forward(prob.ops, ctrl, prob.t_final, prob.n_steps, prob.theta)
    traj_p = solve_adjoint_transient(prob.ops, sol.trajectory, prob.reference(),
                                     ctrl, prob.theta, sol)
    assert np.max(np.abs(traj_p.fields[-1])) <= 1e-14
    rng = np.random.default_rng(12)
    h = ControlField(rng.normal(size=ctrl.u.shape), rng.normal(size=ctrl.u.shape),
                     rng.normal(size=ctrl.u.shape))
    fd = fd_directional(prob, ctrl, h, 1e-5)
    exact = g.to_vector() @ h.to_vector()
    assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1e-12)


def test_adjoint_recursion_matrices_are_exact_transposes():
    prob = tiny_problem(regime="transient", n_steps=2)
    ops = prob.ops
    ctrl = random_feasible_control(prob, seed=13)
    sol = transient_forward(ops, ctrl, prob.t_final, prob.n_steps, prob.theta)
    free = ops.free_nodes
    mass_ff = ops.mass[free][:, free].tocsr()
    dt = prob.t_final / prob.n_steps
    rng = np.random.default_rng(14)
    for i in (1, 2):
        a_plus = (mass_ff + prob.theta * dt * sol.s_ff[i]).tocoo()
        a_plus_t = a_plus.T.tocoo()
        fwd = sorted(zip(a_plus.row, a_plus.col, a_plus.data))
        adj = sorted(zip(a_plus_t.col, a_plus_t.row, a_plus_t.data))
        assert fwd == adj
        # the adjoint transpose solve really inverts a_plus^T
        b = rng.normal(size=len(free))
        x = sol.lus[i].solve(b, trans="T")
        assert np.linalg.norm(a_plus.T @ x - b) <= 1e-10 * np.linalg.norm(b)


def test_gradient_gives_descent_direction():
    prob = tiny_problem()
    ctrl = random_feasible_control(prob, seed=15)
    j0, g = prob.cost_and_gradient(ctrl)
    step = 1e-3 / max(g.norm(), 1.0)
    trial = ControlField.from_vector(ctrl.to_vector() - step * g.to_vector(),
                                     prob.n_ctrl, prob.ctrl_slices)
    assert prob.cost(trial) < j0


def test_problem_kernel_consistent_with_public_operations():
    prob = tiny_problem(regime="transient", n_steps=2)
    ctrl = random_feasible_control(prob, seed=16)
    j, g = prob.cost_and_gradient(ctrl)
    traj_q = prob.state(ctrl)
    traj_z = prob.reference()
    assert eval_cost(prob.ops, traj_q, traj_z, ctrl) == pytest.approx(j, rel=1e-13)
    p = solve_adjoint_transient(prob.ops, traj_q, traj_z, ctrl, prob.theta)
    g2 = eval_gradient(prob.ops, traj_q, p, ctrl, prob.theta)
    assert np.allclose(g2.to_vector(), g.to_vector(), rtol=1e-12, atol=1e-14)
