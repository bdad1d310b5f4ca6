"""One cloaking scenario: operators, regime, and cost/gradient evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adjoint import eval_cost, eval_gradient, solve_adjoint_steady, solve_adjoint_transient
from .assembly import Operators, apply_dirichlet
from .fields import ControlField, GradientTriple, Trajectory
from .forward import (
    _factor,
    check_control_feasible,
    solve_reference_steady,
    solve_reference_transient,
    solve_state_steady,
    solve_transient,
    transient_forward,
)

STEADY = "steady"
TRANSIENT = "transient"


@dataclass
class CloakProblem:
    """A steady or transient cloak design problem over fixed operators."""

    ops: Operators
    regime: str = STEADY
    t_final: float = 2.0
    n_steps: int = 14
    theta: float = 1.0
    _reference: object = field(default=None, repr=False)

    def __post_init__(self):
        if self.regime not in (STEADY, TRANSIENT):
            raise ValueError(f"unknown regime {self.regime!r}")
        if self.regime == TRANSIENT:
            if self.t_final <= 0 or self.n_steps < 1:
                raise ValueError("transient regime needs t_final > 0 and n_steps >= 1")
            if not 0.0 <= self.theta <= 1.0:
                raise ValueError("theta must lie in [0, 1]")

    @property
    def n_ctrl(self) -> int:
        return self.ops.n_ctrl

    @property
    def ctrl_slices(self) -> int | None:
        return None if self.regime == STEADY else self.n_steps + 1

    def zero_control(self) -> ControlField:
        return ControlField.zeros(self.n_ctrl, self.ctrl_slices)

    def reference(self):
        """Obstacle-free reference solution (cached)."""
        if self._reference is None:
            if self.regime == STEADY:
                self._reference = solve_reference_steady(self.ops)
            else:
                self._reference = solve_reference_transient(
                    self.ops, self.t_final, self.n_steps, self.theta)
        return self._reference

    def state(self, ctrl: ControlField):
        if self.regime == STEADY:
            return solve_state_steady(self.ops, ctrl)
        return solve_transient(self.ops, ctrl, self.t_final, self.n_steps, self.theta)

    def cost(self, ctrl: ControlField) -> float:
        return eval_cost(self.ops, self.state(ctrl), self.reference(), ctrl)

    def cost_and_gradient(self, ctrl: ControlField) -> tuple[float, GradientTriple]:
        """Forward solve, adjoint solve, and exact gradient in one pass.

        The steady path factorizes the state matrix once and reuses it
        (transposed) for the adjoint; the transient path reuses the per-step
        implicit factorizations the same way.
        """
        ops = self.ops
        z = self.reference()
        if self.regime == STEADY:
            check_control_feasible(ops, ctrl)
            s = ops.state_matrix(ctrl.u, ctrl.f, ctrl.v)
            sys = apply_dirichlet(s, ops.load, ops.dirichlet_nodes, ops.data.t_obstacle)
            lu = _factor(sys.matrix)
            q = sys.expand(lu.solve(sys.rhs))
            p = solve_adjoint_steady(ops, q, z, ctrl, lu=lu)
            return eval_cost(ops, q, z, ctrl), eval_gradient(ops, q, p, ctrl)
        sol = transient_forward(ops, ctrl, self.t_final, self.n_steps, self.theta)
        traj_p = solve_adjoint_transient(ops, sol.trajectory, z, ctrl, self.theta, sol)
        j = eval_cost(ops, sol.trajectory, z, ctrl)
        return j, eval_gradient(ops, sol.trajectory, traj_p, ctrl, self.theta)


@dataclass
class GradientCheck:
    """Result of a finite-difference audit of the adjoint gradient."""

    coords: np.ndarray
    adjoint: np.ndarray
    fd: np.ndarray
    rel_errors: np.ndarray
    max_rel_error: float
    tau: float


def gradient_check(problem: CloakProblem, ctrl: ControlField | None = None,
                   n_coords: int = 10, tau: float = 1e-4,
                   seed: int = 0) -> GradientCheck:
    """Compare the adjoint gradient against central finite differences.

    Each sampled coordinate's relative error uses the scale-aware denominator
    max(|g_k|, |fd_k|, 1e-5 * max|g|): central differences of the cost cannot
    resolve components much smaller than the dominant gradient scale, so the
    floor keeps roundoff in J from masquerading as gradient error while any
    wrong term (which perturbs at the dominant scale) is still flagged.
    """
    if ctrl is None:
        rng = np.random.default_rng(seed)
        shape = (problem.n_ctrl,) if problem.ctrl_slices is None \
            else (problem.ctrl_slices, problem.n_ctrl)
        ctrl = ControlField(rng.uniform(-0.2, 0.2, shape),
                            rng.uniform(-0.2, 0.2, shape),
                            rng.uniform(-0.2, 0.2, shape))
    _, grad = problem.cost_and_gradient(ctrl)
    gvec = grad.to_vector()
    rng = np.random.default_rng(seed + 1)
    active = np.arange(gvec.size)
    if problem.regime == TRANSIENT and problem.theta == 1.0 \
            and problem.ops.data.include_final_cost_node:
        # backward Euler never reads the slice-0 controls: skip their indices
        m = problem.n_ctrl * (problem.n_steps + 1)
        keep = np.ones(3 * m, dtype=bool)
        for comp in range(3):
            keep[comp * m: comp * m + problem.n_ctrl] = False
        active = np.flatnonzero(keep)
    n_coords = min(n_coords, len(active))
    coords = rng.choice(active, size=n_coords, replace=False)
    base = ctrl.to_vector()
    floor = 1e-5 * max(np.abs(gvec).max(), 1e-30)
    fd = np.empty(n_coords)
    rel = np.empty(n_coords)
    for idx, k in enumerate(coords):
        e = np.zeros_like(base)
        e[k] = 1.0
        jp = problem.cost(ControlField.from_vector(base + tau * e, problem.n_ctrl,
                                                   problem.ctrl_slices))
        jm = problem.cost(ControlField.from_vector(base - tau * e, problem.n_ctrl,
                                                   problem.ctrl_slices))
        fd[idx] = (jp - jm) / (2.0 * tau)
        rel[idx] = abs(fd[idx] - gvec[k]) / max(abs(gvec[k]), abs(fd[idx]), floor)
    return GradientCheck(coords, gvec[coords], fd, rel, float(rel.max()), tau)
