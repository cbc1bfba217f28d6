"""Finite-difference stencils applied as periodic 1D convolutions.

A stencil is stored as separable 1D taps: the derivative at index ``i`` is
``sum_k taps[k] * u[i + start + k] / h**spacing_power``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import factorial

import numpy as np
from scipy.ndimage import correlate1d

from .field import Field

_AXIS = {"x": -1, "y": -2}


@dataclass(frozen=True)
class Stencil:
    taps: tuple[float, ...]
    start: int
    axis: str
    derivative_order: int
    accuracy_order: int

    @property
    def spacing_power(self) -> int:
        return self.derivative_order

    @property
    def offsets(self) -> range:
        return range(self.start, self.start + len(self.taps))

    def along(self, axis: str) -> "Stencil":
        return Stencil(self.taps, self.start, axis, self.derivative_order, self.accuracy_order)

    def mirrored(self) -> "Stencil":
        """Reflect offsets; an odd derivative flips sign."""
        sign = -1.0 if self.derivative_order % 2 else 1.0
        taps = tuple(sign * t for t in reversed(self.taps))
        return Stencil(taps, -(self.start + len(self.taps) - 1), self.axis,
                       self.derivative_order, self.accuracy_order)


_SECOND = {
    2: (Fraction(1), Fraction(-2), Fraction(1)),
    6: (Fraction(1, 90), Fraction(-3, 20), Fraction(3, 2), Fraction(-49, 18),
        Fraction(3, 2), Fraction(-3, 20), Fraction(1, 90)),
}
# positive flow: (u[i-2] - 6 u[i-1] + 3 u[i] + 2 u[i+1]) / 6h
_UPWIND3 = (Fraction(1, 6), Fraction(-1), Fraction(1, 2), Fraction(1, 3))
# negative flow: mirrored offsets, sign flipped (odd derivative)
_UPWIND3_MINUS = tuple(-t for t in reversed(_UPWIND3))


def exactness_defect(taps, start: int, derivative_order: int, degree: int) -> float:
    """Largest moment-condition violation for monomials up to ``degree``.

    A stencil is exact on ``x**m`` at ``x = 0`` with unit spacing iff
    ``sum_k taps[k] * k**m`` equals ``m!`` for ``m == derivative_order`` and 0
    otherwise.
    """
    worst = Fraction(0)
    for m in range(degree + 1):
        target = factorial(m) if m == derivative_order else 0
        moment = sum(Fraction(t) * Fraction(start + k) ** m for k, t in enumerate(taps))
        worst = max(worst, abs(moment - target))
    return float(worst)


def _build(taps, start, axis, d, acc) -> Stencil:
    if exactness_defect(taps, start, d, d + acc - 1) != 0:
        raise AssertionError(f"stencil table for d={d}, order={acc} fails the exactness check")
    return Stencil(tuple(float(t) for t in taps), start, axis, d, acc)


# validate the coefficient tables once at import
_TABLES = {
    ("second", 2): _build(_SECOND[2], -1, "x", 2, 2),
    ("second", 6): _build(_SECOND[6], -3, "x", 2, 6),
    ("upwind3", "+"): _build(_UPWIND3, -2, "x", 1, 3),
    ("upwind3", "-"): _build(_UPWIND3_MINUS, -1, "x", 1, 3),
}


def second_derivative_stencil(order: int = 6, axis: str = "x") -> Stencil:
    if order not in (2, 6):
        raise ValueError(f"unsupported central-difference order {order}; use 2 or 6")
    return _TABLES[("second", order)].along(axis)


def first_derivative_upwind3(axis: str = "x", flow_sign: str = "+") -> Stencil:
    if flow_sign not in ("+", "-"):
        raise ValueError("flow_sign must be '+' or '-'")
    return _TABLES[("upwind3", flow_sign)].along(axis)


def apply_taps(a: np.ndarray, taps, start: int, axis: int) -> np.ndarray:
    """Periodic ``out[i] = sum_k taps[k] * a[i + start + k]`` along ``axis``."""
    n = len(taps)
    if n > a.shape[axis]:
        raise ValueError("stencil wider than the periodic axis")
    origin = -(n // 2) - start
    return correlate1d(a, np.asarray(taps, dtype=np.float64), axis=axis, mode="wrap", origin=origin)


def spacing(grid, axis: str) -> float:
    return grid.dx if axis == "x" else grid.dy


def apply_stencil_array(a: np.ndarray, s: Stencil, h: float) -> np.ndarray:
    return apply_taps(a, s.taps, s.start, _AXIS[s.axis]) / h ** s.spacing_power


def apply_stencil(f: Field, s: Stencil) -> Field:
    return f.with_data(apply_stencil_array(f.data, s, spacing(f.grid, s.axis)))


def laplacian_array(a: np.ndarray, grid, order: int = 6) -> np.ndarray:
    s = second_derivative_stencil(order)
    return (apply_stencil_array(a, s, grid.dx)
            + apply_stencil_array(a, s.along("y"), grid.dy))


def laplacian(f: Field, order: int = 6) -> Field:
    return f.with_data(laplacian_array(f.data, f.grid, order))


def upwind_masks(velocity: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Boolean masks choosing the positive-flow stencil along x and y.

    ``velocity`` is ``(..., 2, ny, nx)``; a zero component counts as positive.
    """
    return velocity[..., 0, :, :] >= 0, velocity[..., 1, :, :] >= 0


def upwind_convection_array(velocity: np.ndarray, advected: np.ndarray, grid) -> np.ndarray:
    """``(u d/dx + v d/dy) advected`` with pointwise upwinding, batched over leading dims."""
    pos_x, pos_y = upwind_masks(velocity)
    out = np.zeros(np.broadcast_shapes(advected.shape, velocity.shape[:-3] + advected.shape[-3:]))
    for comp, axis, mask in ((0, "x", pos_x), (1, "y", pos_y)):
        h = spacing(grid, axis)
        plus = apply_stencil_array(advected, first_derivative_upwind3(axis, "+"), h)
        minus = apply_stencil_array(advected, first_derivative_upwind3(axis, "-"), h)
        deriv = np.where(mask[..., None, :, :], plus, minus)
        out += velocity[..., comp:comp + 1, :, :] * deriv
    return out


def upwind_convection(velocity: Field, advected: Field) -> Field:
    if velocity.channels != 2:
        raise ValueError("velocity must have exactly 2 channels")
    if velocity.grid != advected.grid:
        raise ValueError("velocity and advected field live on different grids")
    out = upwind_convection_array(velocity.data, advected.data, velocity.grid)
    return Field(advected.grid, out, diverged=velocity.diverged or advected.diverged
                 or not np.all(np.isfinite(out)))
