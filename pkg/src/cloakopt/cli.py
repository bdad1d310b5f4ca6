"""Command-line entry point: scenario runs and exports.

Exit codes: 0 success, 2 configuration error, 3 solver/runtime error,
4 audit failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .analysis import (
    efficiency,
    efficiency_series,
    eigen_field,
    mte,
    prolongate_controls,
    spacetime_norm,
)
from .assembly import build_operators
from .config import ConfigError, ScenarioConfig, build_mesh_and_tags, load_config
from .fields import ControlField, Trajectory
from .forward import SolverError
from .io_files import (
    FormatError,
    read_design,
    write_design,
    write_field_csv,
    write_fields_vtk,
    write_report,
    write_trajectory_vtk,
)
from .mesh import MeshError, RegionError, TriMesh, elem_tag_array, refine_uniform, tags_from_mesh
from .optimizer import eval_constraints, optimize
from .problem import STEADY, CloakProblem, gradient_check

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_AUDIT = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloakopt",
        description="Passive thermal cloak design by bilinear optimal control")
    parser.add_argument("command",
                        choices=["reference", "uncloaked", "optimize", "evaluate",
                                 "transfer", "check-gradient"])
    parser.add_argument("--config", required=True, help="scenario configuration file")
    parser.add_argument("--out", default=None, help="output directory (default from config)")
    parser.add_argument("--design", default=None,
                        help="stored design file (evaluate/transfer input, optimize warm start)")
    parser.add_argument("--source-x", type=float, default=None,
                        help="override the probing source center x")
    parser.add_argument("--source-y", type=float, default=None,
                        help="override the probing source center y")
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (CLOAKOPT_THREADS overrides)")
    return parser


def _apply_threads(args):
    threads = os.environ.get("CLOAKOPT_THREADS")
    if threads is None and args.threads is not None:
        threads = str(args.threads)
    if threads is not None:
        if int(threads) < 1:
            raise ConfigError("thread count must be at least 1")
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = threads


def _problem_from(cfg: ScenarioConfig) -> CloakProblem:
    mesh, tags = build_mesh_and_tags(cfg)
    ops = build_operators(mesh, tags, cfg.data)
    return CloakProblem(ops, regime=cfg.regime, t_final=cfg.t_final,
                        n_steps=cfg.n_steps, theta=cfg.theta)


def _tracking_error_field(prob: CloakProblem, q, z) -> np.ndarray:
    if isinstance(q, Trajectory):
        q, z = q.fields[-1], z.fields[-1]
    return np.abs(q - prob.ops.rmap.restrict(z))


def cmd_reference(cfg: ScenarioConfig, out: str) -> int:
    prob = _problem_from(cfg)
    z = prob.reference()
    mesh = prob.ops.ref_mesh
    if cfg.regime == STEADY:
        write_fields_vtk(os.path.join(out, "reference.vtk"), mesh, {"z": z})
        write_field_csv(os.path.join(out, "reference.csv"), mesh, z)
        peak = float(np.max(z))
    else:
        write_trajectory_vtk(os.path.join(out, "reference"), mesh, z, "z")
        peak = float(np.max(z.fields))
    write_report(os.path.join(out, "reference_report.txt"),
                 {"regime": cfg.regime, "n_nodes": mesh.n_nodes,
                  "n_elems": mesh.n_elems, "max_value": peak})
    print(f"reference written to {out} (max {peak:.6g})")
    return EXIT_OK


def cmd_uncloaked(cfg: ScenarioConfig, out: str) -> int:
    prob = _problem_from(cfg)
    z = prob.reference()
    q = prob.state(prob.zero_control())
    masked = prob.ops.masked
    report: dict = {"regime": cfg.regime}
    if cfg.regime == STEADY:
        report["mte_uncontrolled"] = mte(prob.ops, q, z)
        write_fields_vtk(os.path.join(out, "uncloaked.vtk"), masked,
                         {"q": q, "tracking_error": _tracking_error_field(prob, q, z)})
        write_field_csv(os.path.join(out, "uncloaked.csv"), masked, q)
        print(f"uncloaked MTE = {report['mte_uncontrolled']:.6e}")
    else:
        report["tracking_norm_uncontrolled"] = spacetime_norm(prob.ops, q, z)
        write_trajectory_vtk(os.path.join(out, "uncloaked"), masked, q, "q")
        print(f"uncloaked space-time tracking norm = "
              f"{report['tracking_norm_uncontrolled']:.6e}")
    write_report(os.path.join(out, "uncloaked_report.txt"), report)
    return EXIT_OK


def _design_paths(prob: CloakProblem):
    nodes_ref = prob.ops.ctrl_nodes_ref
    coords = prob.ops.ref_mesh.nodes[nodes_ref]
    return nodes_ref, coords


def cmd_optimize(cfg: ScenarioConfig, out: str, design_path: str | None = None) -> int:
    prob = _problem_from(cfg)
    init = None
    if design_path is not None:
        # warm start; a steady design is tiled over the transient time grid
        init = _load_design_for(prob, design_path, allow_tiling=True)
    design, rep = optimize(prob, init=init, opts=cfg.optimizer)
    z = prob.reference()
    q = prob.state(design)
    nodes_ref, coords = _design_paths(prob)
    write_design(os.path.join(out, "design.txt"), design, nodes_ref, coords)

    report: dict = {
        "regime": cfg.regime,
        "j_final": rep.final_j,
        "grad_norm": rep.final_grad_norm,
        "iterations": len(rep.history),
        "termination": rep.termination,
        "wall_time": rep.wall_time,
        "n_cost_evals": rep.n_cost_evals,
    }
    masked = prob.ops.masked
    if cfg.regime == STEADY:
        q0 = prob.state(prob.zero_control())
        report["mte_uncontrolled"] = mte(prob.ops, q0, z)
        report["mte_optimal"] = mte(prob.ops, q, z)
        report["eta"] = efficiency(report["mte_uncontrolled"], report["mte_optimal"])
        write_fields_vtk(os.path.join(out, "optimal_state.vtk"), masked,
                         {"q": q, "tracking_error": _tracking_error_field(prob, q, z)})
        print(f"optimize done: J={rep.final_j:.6e} eta={report['eta']:.4f} "
              f"({rep.termination}, {rep.wall_time:.1f}s)")
    else:
        q0 = prob.state(prob.zero_control())
        report["tracking_norm_uncontrolled"] = spacetime_norm(prob.ops, q0, z)
        report["tracking_norm_optimal"] = spacetime_norm(prob.ops, q, z)
        report["tracking_ratio"] = (report["tracking_norm_optimal"]
                                    / report["tracking_norm_uncontrolled"])
        write_trajectory_vtk(os.path.join(out, "optimal_state"), masked, q, "q")
        print(f"optimize done: J={rep.final_j:.6e} "
              f"tracking ratio={report['tracking_ratio']:.4f} "
              f"({rep.termination}, {rep.wall_time:.1f}s)")
    with open(os.path.join(out, "optimize_history.csv"), "w", encoding="utf-8") as fh:
        fh.write("iteration,stage,mu_b,j,phi,grad_norm,min_g1,min_g2,step,backtracks\n")
        for r in rep.history:
            fh.write(f"{r.iteration},{r.stage},{r.mu_b:.17g},{r.j:.17g},{r.phi:.17g},"
                     f"{r.grad_norm:.17g},{r.min_g1:.17g},{r.min_g2:.17g},"
                     f"{r.step:.17g},{r.backtracks}\n")
    write_report(os.path.join(out, "optimize_report.txt"), report)
    return EXIT_OK


def _load_design_for(prob: CloakProblem, path: str,
                     allow_tiling: bool = False) -> ControlField:
    ctrl, ids, coords = read_design(path)
    nodes_ref, expect = _design_paths(prob)
    if len(ids) != len(nodes_ref) or not np.array_equal(ids, nodes_ref):
        raise ConfigError("design control nodes do not match the scenario mesh")
    if not np.allclose(coords, expect, atol=1e-12):
        raise ConfigError("design node coordinates do not match the scenario mesh")
    want = prob.ctrl_slices or 1
    if ctrl.n_slices == want:
        return ctrl
    if allow_tiling and not ctrl.transient and want > 1:
        return ControlField(np.tile(ctrl.u, (want, 1)), np.tile(ctrl.f, (want, 1)),
                            np.tile(ctrl.v, (want, 1)))
    raise ConfigError(f"design has {ctrl.n_slices} time slices, scenario needs {want}")


def _export_eigen(out: str, prob: CloakProblem, ctrl: ControlField):
    c = ctrl.slice(ctrl.n_slices - 1) if ctrl.transient else ctrl
    eig = eigen_field(c, prob.ops.data.mu)
    coords = prob.ops.masked.nodes[prob.ops.ctrl_nodes]
    with open(os.path.join(out, "eigen.csv"), "w", encoding="utf-8") as fh:
        fh.write("node,x,y,lam1,lam2,angle1,angle2\n")
        for i, nid in enumerate(prob.ops.ctrl_nodes):
            fh.write(f"{nid},{coords[i, 0]:.17g},{coords[i, 1]:.17g},"
                     f"{eig.lam1[i]:.17g},{eig.lam2[i]:.17g},"
                     f"{eig.angle1[i]:.17g},{eig.angle2[i]:.17g}\n")


def cmd_evaluate(cfg: ScenarioConfig, out: str, design_path: str) -> int:
    if design_path is None:
        raise ConfigError("evaluate requires --design")
    prob = _problem_from(cfg)
    ctrl = _load_design_for(prob, design_path)
    z = prob.reference()
    q = prob.state(ctrl)
    q0 = prob.state(prob.zero_control())
    report: dict = {"regime": cfg.regime, "design": os.path.abspath(design_path),
                    "source_x": cfg.data.source_center[0],
                    "source_y": cfg.data.source_center[1]}
    if cfg.regime == STEADY:
        report["mte_uncontrolled"] = mte(prob.ops, q0, z)
        report["mte_design"] = mte(prob.ops, q, z)
        report["eta"] = efficiency(report["mte_uncontrolled"], report["mte_design"])
        print(f"evaluate: eta = {report['eta']:.4f}")
    else:
        report["tracking_norm_uncontrolled"] = spacetime_norm(prob.ops, q0, z)
        report["tracking_norm_design"] = spacetime_norm(prob.ops, q, z)
        report["tracking_ratio"] = (report["tracking_norm_design"]
                                    / report["tracking_norm_uncontrolled"])
        series = efficiency_series(prob.ops, q0, q, z)
        report["eta_final_instant"] = series[-1]
        print(f"evaluate: tracking ratio = {report['tracking_ratio']:.4f}")
    cons = eval_constraints(ctrl, cfg.data.mu, cfg.data.eps)
    report["min_g1"] = cons.min_g1
    report["min_g2"] = cons.min_g2
    _export_eigen(out, prob, ctrl)
    write_report(os.path.join(out, "evaluate_report.txt"), report)
    return EXIT_OK


def cmd_transfer(cfg: ScenarioConfig, out: str, design_path: str) -> int:
    if design_path is None:
        raise ConfigError("transfer requires --design")
    coarse_mesh, coarse_tags = build_mesh_and_tags(cfg)
    coarse_ops = build_operators(coarse_mesh, coarse_tags, cfg.data)
    coarse = CloakProblem(coarse_ops, regime=cfg.regime, t_final=cfg.t_final,
                          n_steps=cfg.n_steps, theta=cfg.theta)
    ctrl = _load_design_for(coarse, design_path)

    tagged = TriMesh(coarse_mesh.nodes, coarse_mesh.triangles,
                     coarse_mesh.boundary_edges, coarse_mesh.boundary_labels,
                     elem_tag_array(coarse_mesh, coarse_tags))
    fine_mesh, pmap = refine_uniform(tagged)
    fine_tags = tags_from_mesh(fine_mesh)
    fine_ops = build_operators(fine_mesh, fine_tags, cfg.data)
    fine = CloakProblem(fine_ops, regime=cfg.regime, t_final=cfg.t_final,
                        n_steps=cfg.n_steps, theta=cfg.theta)

    fine_ctrl = prolongate_controls(ctrl, pmap, coarse_ops.ctrl_nodes_ref,
                                    fine_ops.ctrl_nodes_ref, coarse_mesh.n_nodes)
    z_c = coarse.reference()
    z_f = fine.reference()
    report: dict = {
        "coarse_ctrl_nodes": coarse_ops.n_ctrl,
        "fine_ctrl_nodes": fine_ops.n_ctrl,
        "coarse_elems": coarse_mesh.n_elems,
        "fine_elems": fine_mesh.n_elems,
    }
    cons_c = eval_constraints(ctrl, cfg.data.mu, cfg.data.eps)
    cons_f = eval_constraints(fine_ctrl, cfg.data.mu, cfg.data.eps)
    report["coarse_min_g1"] = cons_c.min_g1
    report["fine_min_g1"] = cons_f.min_g1
    report["fine_min_g2"] = cons_f.min_g2
    if cfg.regime == STEADY:
        report["eta_coarse"] = efficiency(
            mte(coarse_ops, coarse.state(coarse.zero_control()), z_c),
            mte(coarse_ops, coarse.state(ctrl), z_c))
        report["eta_fine_transferred"] = efficiency(
            mte(fine_ops, fine.state(fine.zero_control()), z_f),
            mte(fine_ops, fine.state(fine_ctrl), z_f))
        print(f"transfer: {report['coarse_ctrl_nodes']} -> {report['fine_ctrl_nodes']} "
              f"control nodes, eta {report['eta_coarse']:.4f} -> "
              f"{report['eta_fine_transferred']:.4f}")
    else:
        report["tracking_ratio_fine"] = (
            spacetime_norm(fine_ops, fine.state(fine_ctrl), z_f)
            / spacetime_norm(fine_ops, fine.state(fine.zero_control()), z_f))
        print(f"transfer: {report['coarse_ctrl_nodes']} -> {report['fine_ctrl_nodes']} "
              f"control nodes, fine tracking ratio {report['tracking_ratio_fine']:.4f}")
    nodes_ref, coords = _design_paths(fine)
    write_design(os.path.join(out, "design_fine.txt"), fine_ctrl, nodes_ref, coords)
    write_report(os.path.join(out, "transfer_report.txt"), report)
    return EXIT_OK


def cmd_check_gradient(cfg: ScenarioConfig, out: str) -> int:
    prob = _problem_from(cfg)
    check = gradient_check(prob, n_coords=cfg.fd_coords, tau=cfg.fd_step,
                           seed=cfg.seed)
    report = {"max_rel_error": check.max_rel_error, "tolerance": cfg.fd_tolerance,
              "n_coords": len(check.coords), "fd_step": check.tau,
              "regime": cfg.regime}
    write_report(os.path.join(out, "gradient_report.txt"), report)
    status = "PASS" if check.max_rel_error <= cfg.fd_tolerance else "FAIL"
    print(f"gradient audit {status}: max relative error "
          f"{check.max_rel_error:.3e} over {len(check.coords)} coordinates "
          f"(tolerance {cfg.fd_tolerance:g})")
    return EXIT_OK if status == "PASS" else EXIT_AUDIT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _apply_threads(args)
        cfg = load_config(args.config)
        if args.source_x is not None or args.source_y is not None:
            sx = args.source_x if args.source_x is not None else cfg.data.source_center[0]
            sy = args.source_y if args.source_y is not None else cfg.data.source_center[1]
            cfg.data.source_center = (sx, sy)
        out = args.out or cfg.output_dir
        os.makedirs(out, exist_ok=True)
        if args.command == "reference":
            return cmd_reference(cfg, out)
        if args.command == "uncloaked":
            return cmd_uncloaked(cfg, out)
        if args.command == "optimize":
            return cmd_optimize(cfg, out, args.design)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, out, args.design)
        if args.command == "transfer":
            return cmd_transfer(cfg, out, args.design)
        return cmd_check_gradient(cfg, out)
    except (ConfigError, FormatError, MeshError, RegionError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
