"""Right-hand sides of the governed systems and forward-Euler stepping.

All ``*_array`` functions act on ``(..., 2, ny, nx)`` arrays so that a batch
of trajectories can be advanced in one call.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .field import DivergenceError, Field, Grid2D, ParamVector
from .stencil import laplacian_array, upwind_convection_array


@dataclass(frozen=True)
class RdFull:
    """FitzHugh-Nagumo reaction-diffusion: diffusion plus cubic reaction."""

    gamma: float
    alpha: float = 0.01
    beta: float = 0.25
    laplacian_order: int = 6

    name = "rd"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise ValueError("alpha and beta must be finite")

    @property
    def diffusivity(self) -> float:
        return self.gamma

    def params(self) -> ParamVector:
        return ParamVector(("gamma",), (self.gamma,))

    def rhs_array(self, u: np.ndarray, grid: Grid2D, coef=None) -> np.ndarray:
        gamma = self.gamma if coef is None else coef
        out = gamma * laplacian_array(u, grid, self.laplacian_order)
        a, b = u[..., 0, :, :], u[..., 1, :, :]
        out[..., 0, :, :] += a - a**3 - b + self.alpha
        out[..., 1, :, :] += self.beta * (a - b)
        return out


@dataclass(frozen=True)
class RdDiffusionOnly:
    """Only the diffusion part of the reaction-diffusion system."""

    gamma: float
    laplacian_order: int = 6

    name = "rd_diffusion"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")

    @property
    def diffusivity(self) -> float:
        return self.gamma

    def params(self) -> ParamVector:
        return ParamVector(("gamma",), (self.gamma,))

    def rhs_array(self, u: np.ndarray, grid: Grid2D, coef=None) -> np.ndarray:
        gamma = self.gamma if coef is None else coef
        return gamma * laplacian_array(u, grid, self.laplacian_order)


@dataclass(frozen=True)
class Burgers:
    """2D viscous Burgers: ``du/dt = -(u . grad) u + nu lap u``."""

    nu: float
    laplacian_order: int = 6

    name = "burgers"

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError("nu must be positive")

    @property
    def diffusivity(self) -> float:
        return self.nu

    def params(self) -> ParamVector:
        return ParamVector(("nu",), (self.nu,))

    def rhs_array(self, u: np.ndarray, grid: Grid2D, coef=None) -> np.ndarray:
        nu = self.nu if coef is None else coef
        return (nu * laplacian_array(u, grid, self.laplacian_order)
                - upwind_convection_array(u, u, grid))


PdeSpec = RdFull | RdDiffusionOnly | Burgers

SYSTEMS = {"rd": RdFull, "rd_diffusion": RdDiffusionOnly, "burgers": Burgers}


def make_spec(system: str, value: float, laplacian_order: int = 6) -> PdeSpec:
    """Build a spec from its system name and its single scalar parameter."""
    try:
        cls = SYSTEMS[system]
    except KeyError:
        raise ValueError(f"unknown system {system!r}; expected one of {sorted(SYSTEMS)}") from None
    return cls(value, laplacian_order=laplacian_order)


def with_param(spec: PdeSpec, value: float) -> PdeSpec:
    return make_spec(spec.name, value, spec.laplacian_order)


def stable_dt(spec: PdeSpec, grid: Grid2D) -> float:
    """Conservative diffusive step bound ``0.1 min(dx, dy)**2 / diffusivity``."""
    return 0.1 * min(grid.dx, grid.dy) ** 2 / spec.diffusivity


def rhs(spec: PdeSpec, u: Field) -> Field:
    if u.channels != 2:
        raise ValueError(f"{spec.name} needs a 2-channel state, got {u.channels}")
    return u.with_data(spec.rhs_array(u.data, u.grid))


def euler_step(spec: PdeSpec, u: Field, dt: float) -> Field:
    """``u + dt * rhs``; the result is flagged diverged if it is not finite."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if u.diverged:
        return u
    if dt == 0:
        return u
    return u.with_data(u.data + dt * spec.rhs_array(u.data, u.grid))


def integrate_array(spec: PdeSpec, u: np.ndarray, grid: Grid2D, dt_total: float,
                    substeps: int = 1, coef=None) -> np.ndarray:
    """``substeps`` Euler steps of ``dt_total/substeps``; raises on blow-up.

    ``coef`` overrides the PdeSpec's scalar parameter, e.g. with a ``(B, 1, 1, 1)``
    array when ``u`` stacks trajectories with different parameters.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    dt = dt_total / substeps
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(substeps):
            u = u + dt * spec.rhs_array(u, grid, coef)
            if not np.all(np.isfinite(u)):
                raise DivergenceError("explicit Euler integration diverged", step=k + 1)
    return u


def integrate(spec: PdeSpec, u: Field, dt_total: float, substeps: int = 1) -> Field:
    if u.diverged:
        raise DivergenceError("integrating an already diverged field", step=0)
    if dt_total / substeps > stable_dt(spec, u.grid):
        warnings.warn(f"Euler sub-step {dt_total / substeps:.3g} exceeds the conservative "
                      f"diffusive bound {stable_dt(spec, u.grid):.3g}", RuntimeWarning, stacklevel=2)
    return Field(u.grid, integrate_array(spec, u.data, u.grid, dt_total, substeps))
