"""Containers for nodal control fields, gradients, and time-indexed states."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ControlField:
    """Nodal values of the three diffusivity controls on the cloak nodes.

    Arrays are 1-D of length n_ctrl for steady problems, or 2-D of shape
    (n_slices, n_ctrl) with one row per time node for transient problems.
    """

    u: np.ndarray
    f: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.f = np.asarray(self.f, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if not (self.u.shape == self.f.shape == self.v.shape):
            raise ValueError("u, f, v must have identical shapes")
        if self.u.ndim not in (1, 2):
            raise ValueError("control arrays must be 1-D or 2-D (time, node)")

    @classmethod
    def zeros(cls, n_ctrl: int, n_slices: int | None = None) -> "ControlField":
        shape = (n_ctrl,) if n_slices is None else (n_slices, n_ctrl)
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape))

    @property
    def n_ctrl(self) -> int:
        return self.u.shape[-1]

    @property
    def transient(self) -> bool:
        return self.u.ndim == 2

    @property
    def n_slices(self) -> int:
        return self.u.shape[0] if self.transient else 1

    def slice(self, i: int) -> "ControlField":
        """Time slice i as a steady-shaped view (the field itself if steady)."""
        if not self.transient:
            return self
        return ControlField(self.u[i], self.f[i], self.v[i])

    def copy(self) -> "ControlField":
        return ControlField(self.u.copy(), self.f.copy(), self.v.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.u.ravel(), self.f.ravel(), self.v.ravel()])

    @classmethod
    def from_vector(cls, vec: np.ndarray, n_ctrl: int,
                    n_slices: int | None = None) -> "ControlField":
        shape = (n_ctrl,) if n_slices is None else (n_slices, n_ctrl)
        m = int(np.prod(shape))
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (3 * m,):
            raise ValueError(f"expected vector of length {3 * m}")
        return cls(vec[:m].reshape(shape), vec[m:2 * m].reshape(shape),
                   vec[2 * m:].reshape(shape))


@dataclass
class GradientTriple:
    """Cost gradient with respect to the three control fields."""

    g_u: np.ndarray
    g_f: np.ndarray
    g_v: np.ndarray

    def __post_init__(self):
        self.g_u = np.asarray(self.g_u, dtype=np.float64)
        self.g_f = np.asarray(self.g_f, dtype=np.float64)
        self.g_v = np.asarray(self.g_v, dtype=np.float64)
        if not (self.g_u.shape == self.g_f.shape == self.g_v.shape):
            raise ValueError("gradient components must have identical shapes")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.g_u.ravel(), self.g_f.ravel(), self.g_v.ravel()])

    def norm(self) -> float:
        return float(np.linalg.norm(self.to_vector()))


@dataclass
class Trajectory:
    """Time-indexed nodal fields on a uniform time grid from 0 to T."""

    times: np.ndarray
    fields: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.fields = np.asarray(self.fields, dtype=np.float64)
        if self.fields.ndim != 2 or len(self.times) != len(self.fields):
            raise ValueError("fields must be (n_times, n_dofs) aligned with times")
        if len(self.times) >= 2:
            steps = np.diff(self.times)
            if not np.allclose(steps, steps[0], rtol=1e-12, atol=1e-14):
                raise ValueError("time grid must be uniform")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])
