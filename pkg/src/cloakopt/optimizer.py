"""Interior-point solution of the cloak design NLP.

The pointwise SPD constraints on the diffusivity matrix,

    g1 = 2*mu + u + f - eps >= 0,
    g2 = (mu + u)(mu + f) - v^2 - eps >= 0,

are handled by a log barrier: Phi = J - mu_b * sum(log g1 + log g2). Each
barrier stage runs gradient descent with a Barzilai-Borwein initial step and
Armijo backtracking; a trial step is accepted only if it is strictly
feasible, decreases Phi sufficiently, and does not increase J. The barrier
parameter then shrinks geometrically.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .fields import ControlField, GradientTriple
from .problem import CloakProblem


@dataclass
class ConstraintValues:
    """Pointwise SPD-constraint margins (feasible iff all entries >= 0)."""

    g1: np.ndarray
    g2: np.ndarray

    @property
    def min_g1(self) -> float:
        return float(self.g1.min())

    @property
    def min_g2(self) -> float:
        return float(self.g2.min())

    @property
    def feasible(self) -> bool:
        return self.min_g1 >= 0.0 and self.min_g2 >= 0.0

    @property
    def strictly_feasible(self) -> bool:
        return self.min_g1 > 0.0 and self.min_g2 > 0.0


def eval_constraints(ctrl: ControlField, mu: float, eps: float) -> ConstraintValues:
    """Trace and determinant margins of K = [[mu+u, v], [v, mu+f]] per node."""
    g1 = 2.0 * mu + ctrl.u + ctrl.f - eps
    g2 = (mu + ctrl.u) * (mu + ctrl.f) - ctrl.v ** 2 - eps
    return ConstraintValues(g1, g2)


def barrier_value_and_gradient(ctrl: ControlField, j: float, grad: GradientTriple,
                               mu_b: float, mu: float, eps: float
                               ) -> tuple[float, GradientTriple]:
    """Barrier objective Phi and its analytic gradient.

    With mu_b = 0 the inputs pass through unchanged. The input control must
    be strictly feasible otherwise.
    """
    if mu_b == 0.0:
        return j, grad
    cons = eval_constraints(ctrl, mu, eps)
    if not cons.strictly_feasible:
        raise ValueError("barrier requires a strictly feasible control")
    phi = j - mu_b * (np.log(cons.g1).sum() + np.log(cons.g2).sum())
    g_u = grad.g_u - mu_b * (1.0 / cons.g1 + (mu + ctrl.f) / cons.g2)
    g_f = grad.g_f - mu_b * (1.0 / cons.g1 + (mu + ctrl.u) / cons.g2)
    g_v = grad.g_v + mu_b * (2.0 * ctrl.v / cons.g2)
    return float(phi), GradientTriple(g_u, g_f, g_v)


@dataclass
class OptimizeOptions:
    """Interior-point schedule and line-search parameters.

    ``precondition`` takes the descent direction in the control-space L2
    inner product (lumped control mass), which removes the mesh-size scaling
    from the assembled gradient; without it the descent crawls on fine
    meshes.
    """

    barrier_init: float = 1e-2
    barrier_shrink: float = 0.1
    barrier_final: float = 1e-8
    max_inner: int = 400
    grad_tol: float = 1e-6
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    step_init: float = 0.05
    step_min: float = 1e-12
    step_max: float = 1e4
    precondition: bool = True
    init_mode: str = "zeros"
    verbose: bool = False

    def __post_init__(self):
        if not 0 < self.barrier_final <= self.barrier_init:
            raise ValueError("need 0 < barrier_final <= barrier_init")
        if not 0 < self.barrier_shrink < 1:
            raise ValueError("barrier_shrink must lie in (0, 1)")
        if not 0 < self.armijo_c1 < 1 or not 0 < self.backtrack < 1:
            raise ValueError("armijo_c1 and backtrack must lie in (0, 1)")
        if self.max_inner < 1 or self.max_backtracks < 1:
            raise ValueError("iteration limits must be positive")
        if self.init_mode not in ("zeros", "warm"):
            raise ValueError("init_mode must be 'zeros' or 'warm'")

    def barrier_schedule(self) -> list[float]:
        out = []
        mu_b = self.barrier_init
        while mu_b > self.barrier_final * (1.0 + 1e-12):
            out.append(mu_b)
            mu_b *= self.barrier_shrink
        out.append(self.barrier_final)
        return out


@dataclass
class IterationRecord:
    iteration: int
    stage: int
    mu_b: float
    j: float
    phi: float
    grad_norm: float
    min_g1: float
    min_g2: float
    step: float
    backtracks: int


@dataclass
class OptimizeReport:
    """Per-iteration history plus run-level outcome."""

    history: list[IterationRecord] = field(default_factory=list)
    termination: str = ""
    wall_time: float = 0.0
    n_cost_evals: int = 0
    n_grad_evals: int = 0
    final_j: float = np.nan
    final_grad_norm: float = np.nan

    def rows(self) -> list[dict]:
        return [vars(r).copy() for r in self.history]


def _log(rec: IterationRecord):
    print(f"iter={rec.iteration} J={rec.j:.9e} grad={rec.grad_norm:.3e} "
          f"ming1={rec.min_g1:.3e} ming2={rec.min_g2:.3e} mu_b={rec.mu_b:.1e}",
          file=sys.stderr)


def _preconditioner(problem: CloakProblem) -> np.ndarray:
    """Inverse lumped control mass, tiled over components (and time slices)."""
    mlump = np.asarray(problem.ops.m_ctrl.sum(axis=1)).ravel()
    inv = 1.0 / mlump
    if problem.ctrl_slices is not None:
        inv = np.tile(inv, problem.ctrl_slices)
    return np.concatenate([inv, inv, inv])


def optimize(problem: CloakProblem, init: ControlField | None = None,
             opts: OptimizeOptions | None = None
             ) -> tuple[ControlField, OptimizeReport]:
    """Minimize the discrete cost subject to the SPD constraints.

    Every accepted iterate is strictly feasible and does not increase J, so
    J is non-increasing within (and across) barrier stages. A stage whose
    line search stalls hands over to the next (smaller) barrier parameter;
    stalls in the final stage end the run. Returns the last accepted control
    and the iteration report.
    """
    opts = opts or OptimizeOptions()
    data = problem.ops.data
    mu, eps = data.mu, data.eps
    if init is None:
        init = problem.zero_control()
    if not eval_constraints(init, mu, eps).strictly_feasible:
        raise ValueError("initial control is not strictly feasible")

    t0 = time.perf_counter()
    report = OptimizeReport()
    x = init.copy()
    xvec = x.to_vector()
    n_ctrl, slices = problem.n_ctrl, problem.ctrl_slices
    pinv = _preconditioner(problem) if opts.precondition else np.ones(xvec.size)

    j, grad = problem.cost_and_gradient(x)
    report.n_cost_evals += 1
    report.n_grad_evals += 1

    iteration = 0
    termination = "converged"
    schedule = opts.barrier_schedule()
    for stage, mu_b in enumerate(schedule):
        phi, gphi = barrier_value_and_gradient(x, j, grad, mu_b, mu, eps)
        gvec = gphi.to_vector()
        prev_step = None
        s_prev = None
        y_prev = None
        for _ in range(opts.max_inner):
            gnorm = float(np.linalg.norm(gvec))
            if gnorm <= opts.grad_tol:
                break
            d = -pinv * gvec
            slope = float(gvec @ d)
            if s_prev is not None and s_prev @ y_prev > 0:
                t = float((s_prev @ s_prev) / (s_prev @ y_prev))
            elif prev_step is not None:
                t = 2.0 * prev_step
            else:
                t = opts.step_init
            t = min(max(t, opts.step_min), opts.step_max)

            accepted = False
            backtracks = 0
            j_tol = j + max(1e-12 * abs(j), 1e-300)
            while backtracks <= opts.max_backtracks:
                trial_vec = xvec + t * d
                trial = ControlField.from_vector(trial_vec, n_ctrl, slices)
                cons = eval_constraints(trial, mu, eps)
                if cons.strictly_feasible:
                    j_trial = problem.cost(trial)
                    report.n_cost_evals += 1
                    phi_trial = j_trial - mu_b * (np.log(cons.g1).sum()
                                                  + np.log(cons.g2).sum())
                    if phi_trial <= phi + opts.armijo_c1 * t * slope and j_trial <= j_tol:
                        accepted = True
                        break
                t *= opts.backtrack
                backtracks += 1
            if not accepted:
                if stage == len(schedule) - 1:
                    termination = "line_search_failure"
                break

            j_new, grad_new = problem.cost_and_gradient(trial)
            report.n_cost_evals += 1
            report.n_grad_evals += 1
            phi_new, gphi_new = barrier_value_and_gradient(trial, j_new, grad_new,
                                                           mu_b, mu, eps)
            gvec_new = gphi_new.to_vector()
            s_prev = trial_vec - xvec
            y_prev = gvec_new - gvec
            prev_step = t
            x, xvec = trial, trial_vec
            j, grad = j_new, grad_new
            phi, gvec = phi_new, gvec_new
            iteration += 1
            rec = IterationRecord(iteration, stage, mu_b, j, phi,
                                  float(np.linalg.norm(gvec)),
                                  cons.min_g1, cons.min_g2, t, backtracks)
            report.history.append(rec)
            if opts.verbose:
                _log(rec)
        else:
            if stage == len(schedule) - 1:
                termination = "max_iterations"

    report.termination = termination
    report.wall_time = time.perf_counter() - t0
    report.final_j = j
    final_cons = eval_constraints(x, mu, eps)
    _, gphi_f = barrier_value_and_gradient(x, j, grad, schedule[-1], mu, eps)
    report.final_grad_norm = gphi_f.norm()
    if not final_cons.strictly_feasible:
        raise AssertionError("optimizer returned an infeasible iterate")
    return x, report
