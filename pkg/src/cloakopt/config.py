"""Scenario configuration: a line-oriented key = value format.

Defaults reproduce the standard parameter set (mu=1, alpha=1, eps=1e-3,
s=100, T_o=0 and the six regularization weights); an empty file is a valid
configuration.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .assembly import ProblemData, build_operators
from .mesh import (
    RegionTags,
    TriMesh,
    band,
    build_square_mesh,
    disk_signed_distance,
    inside,
    polygon_signed_distance,
    tag_regions,
    tags_from_mesh,
)
from .optimizer import OptimizeOptions
from .problem import STEADY, TRANSIENT, CloakProblem


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class GeometrySpec:
    """Mesh source and region layout."""

    mesh_path: str | None = None
    side: float = 4.0
    h_max: float = 0.1232
    obstacle_shape: str = "disk"  # disk | polygon | none
    obstacle_center: tuple[float, float] = (0.0, 0.0)
    obstacle_radius: float = 0.3
    obstacle_polygon: list[tuple[float, float]] | None = None
    cloak_thickness: float = 0.2
    obs_thickness: float = 0.5


@dataclass
class ScenarioConfig:
    """Fully validated scenario description with defaults filled in."""

    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    data: ProblemData = field(default_factory=ProblemData)
    optimizer: OptimizeOptions = field(default_factory=OptimizeOptions)
    regime: str = STEADY
    t_final: float = 2.0
    n_steps: int = 14
    theta: float = 1.0
    output_dir: str = "out"
    seed: int = 0
    fd_coords: int = 10
    fd_step: float = 1e-4
    fd_tolerance: float = 1e-5
    threads: int = 1
    # the steady optimality system's extra forcing term is read as the
    # Dirichlet lifting already carried by the eliminated boundary columns
    focp_interpretation: str = "dirichlet_lifting"

    @property
    def dt(self) -> float:
        return self.t_final / self.n_steps


def _parse_bool(raw: str) -> bool:
    if raw.lower() in ("true", "yes", "1", "on"):
        return True
    if raw.lower() in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_polygon(raw: str) -> list[tuple[float, float]]:
    pts = []
    for tok in raw.split():
        xy = tok.split(",")
        if len(xy) != 2:
            raise ValueError(f"polygon vertices are x,y pairs, got {tok!r}")
        pts.append((float(xy[0]), float(xy[1])))
    if len(pts) < 3:
        raise ValueError("polygon needs at least three vertices")
    return pts


# key -> (target object name, attribute, converter)
_KEYS = {
    "mesh": ("geometry", "mesh_path", lambda r: None if r == "generate" else r),
    "side": ("geometry", "side", float),
    "h_max": ("geometry", "h_max", float),
    "obstacle": ("geometry", "obstacle_shape", str),
    "obstacle_x": ("geometry", "_cx", float),
    "obstacle_y": ("geometry", "_cy", float),
    "obstacle_radius": ("geometry", "obstacle_radius", float),
    "obstacle_polygon": ("geometry", "obstacle_polygon", _parse_polygon),
    "cloak_thickness": ("geometry", "cloak_thickness", float),
    "obs_thickness": ("geometry", "obs_thickness", float),
    "mu": ("data", "mu", float),
    "alpha": ("data", "alpha", float),
    "eps": ("data", "eps", float),
    "s": ("data", "s", float),
    "source_x": ("data", "_sx", float),
    "source_y": ("data", "_sy", float),
    "source_radius": ("data", "source_radius", float),
    "t_obstacle": ("data", "t_obstacle", float),
    "beta": ("data", "beta", float),
    "beta_g": ("data", "beta_g", float),
    "xi": ("data", "xi", float),
    "xi_g": ("data", "xi_g", float),
    "gamma": ("data", "gamma", float),
    "gamma_g": ("data", "gamma_g", float),
    "robin_sign": ("data", "robin_sign", int),
    "include_final_cost_node": ("data", "include_final_cost_node", _parse_bool),
    "regime": ("top", "regime", str),
    "T": ("top", "t_final", float),
    "N": ("top", "n_steps", int),
    "theta": ("top", "theta", float),
    "output_dir": ("top", "output_dir", str),
    "seed": ("top", "seed", int),
    "fd_coords": ("top", "fd_coords", int),
    "fd_step": ("top", "fd_step", float),
    "fd_tolerance": ("top", "fd_tolerance", float),
    "threads": ("top", "threads", int),
    "focp": ("top", "focp_interpretation", str),
    "barrier_init": ("optimizer", "barrier_init", float),
    "barrier_shrink": ("optimizer", "barrier_shrink", float),
    "barrier_final": ("optimizer", "barrier_final", float),
    "max_inner": ("optimizer", "max_inner", int),
    "grad_tol": ("optimizer", "grad_tol", float),
    "armijo_c1": ("optimizer", "armijo_c1", float),
    "backtrack": ("optimizer", "backtrack", float),
    "max_backtracks": ("optimizer", "max_backtracks", int),
    "step_init": ("optimizer", "step_init", float),
    "init_mode": ("optimizer", "init_mode", str),
    "verbose": ("optimizer", "verbose", _parse_bool),
}


def parse_config(text: str, base_dir: str = ".") -> ScenarioConfig:
    """Parse and validate configuration text; errors carry line numbers."""
    raw: dict[str, tuple[object, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        _, _, conv = _KEYS[key]
        try:
            raw[key] = (conv(value), lineno)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from exc

    geo_kw: dict[str, object] = {}
    data_kw: dict[str, object] = {}
    opt_kw: dict[str, object] = {}
    top_kw: dict[str, object] = {}
    center = [0.0, 0.0]
    source = [None, None]
    for key, (value, lineno) in raw.items():
        target, attr, _ = _KEYS[key]
        if attr == "_cx":
            center[0] = value
        elif attr == "_cy":
            center[1] = value
        elif attr == "_sx":
            source[0] = value
        elif attr == "_sy":
            source[1] = value
        elif target == "geometry":
            geo_kw[attr] = value
        elif target == "data":
            data_kw[attr] = value
        elif target == "optimizer":
            opt_kw[attr] = value
        else:
            top_kw[attr] = value
    geo_kw["obstacle_center"] = (center[0], center[1])
    default_source = ProblemData().source_center
    data_kw["source_center"] = (
        source[0] if source[0] is not None else default_source[0],
        source[1] if source[1] is not None else default_source[1])

    try:
        cfg = ScenarioConfig(geometry=GeometrySpec(**geo_kw),
                             data=ProblemData(**data_kw),
                             optimizer=OptimizeOptions(**opt_kw), **top_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _validate(cfg, base_dir)
    return cfg


def _validate(cfg: ScenarioConfig, base_dir: str):
    if cfg.regime not in (STEADY, TRANSIENT):
        raise ConfigError(f"regime must be steady or transient, got {cfg.regime!r}")
    if not 0.0 <= cfg.theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {cfg.theta}")
    if cfg.regime == TRANSIENT and cfg.theta < 0.5:
        raise ConfigError("theta < 1/2 is conditionally stable; refusing by default")
    if cfg.t_final <= 0:
        raise ConfigError("T must be positive")
    if cfg.n_steps < 1:
        raise ConfigError("N must be at least 1")
    if cfg.geometry.side <= 0 or cfg.geometry.h_max <= 0:
        raise ConfigError("side and h_max must be positive")
    if cfg.geometry.obstacle_shape not in ("disk", "polygon", "none"):
        raise ConfigError(f"unknown obstacle shape {cfg.geometry.obstacle_shape!r}")
    if cfg.geometry.obstacle_shape == "polygon" and cfg.geometry.obstacle_polygon is None:
        raise ConfigError("obstacle = polygon requires obstacle_polygon")
    if cfg.geometry.cloak_thickness <= 0 or cfg.geometry.obs_thickness <= 0:
        raise ConfigError("cloak_thickness and obs_thickness must be positive")
    if cfg.threads < 1:
        raise ConfigError("threads must be at least 1")
    if cfg.fd_coords < 1 or cfg.fd_step <= 0 or cfg.fd_tolerance <= 0:
        raise ConfigError("finite-difference audit parameters must be positive")
    if cfg.focp_interpretation != "dirichlet_lifting":
        raise ConfigError("the only supported focp interpretation is 'dirichlet_lifting'")
    if cfg.geometry.mesh_path is not None:
        path = cfg.geometry.mesh_path
        if not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        if not os.path.exists(path):
            raise ConfigError(f"mesh file does not exist: {path}")
        cfg.geometry.mesh_path = path


def load_config(path: str) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base_dir=os.path.dirname(os.path.abspath(path)))


def build_mesh_and_tags(cfg: ScenarioConfig) -> tuple[TriMesh, RegionTags]:
    """Generate (or load) the reference mesh and classify its regions."""
    geo = cfg.geometry
    if geo.mesh_path is not None:
        from .io_files import read_mesh

        mesh = read_mesh(geo.mesh_path)
        return mesh, tags_from_mesh(mesh)
    mesh = build_square_mesh(geo.side, geo.h_max)
    if geo.obstacle_shape == "disk":
        sdf = disk_signed_distance(geo.obstacle_center, geo.obstacle_radius)
        obstacle = inside(sdf)
    elif geo.obstacle_shape == "polygon":
        sdf = polygon_signed_distance(geo.obstacle_polygon)
        obstacle = inside(sdf)
    else:
        sdf = disk_signed_distance(geo.obstacle_center, geo.obstacle_radius)
        obstacle = None
    tags = tag_regions(
        mesh,
        obstacle=obstacle,
        cloak=band(sdf, 0.0, geo.cloak_thickness),
        observation=band(sdf, geo.cloak_thickness,
                         geo.cloak_thickness + geo.obs_thickness))
    return mesh, tags


def build_problem(cfg: ScenarioConfig) -> CloakProblem:
    mesh, tags = build_mesh_and_tags(cfg)
    ops = build_operators(mesh, tags, cfg.data)
    return CloakProblem(ops, regime=cfg.regime, t_final=cfg.t_final,
                        n_steps=cfg.n_steps, theta=cfg.theta)
