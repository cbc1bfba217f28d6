"""Periodic 2D grids, multi-channel fields and multi-resolution transfer.

Grid point ``(i, j)`` sits at ``(i*dx, j*dy)``; index ``nx`` aliases index 0,
so no boundary column is duplicated. Field data is stored as a
``(channels, ny, nx)`` array.
"""
from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np


class DivergenceError(ArithmeticError):
    """Raised when a field picks up non-finite values.

    ``step`` is the (1-based) step index at which the blow-up was detected,
    when the caller knows it.
    """

    def __init__(self, message: str = "field diverged", step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class Grid2D:
    nx: int
    ny: int
    lx: float
    ly: float

    def __post_init__(self):
        if self.nx < 4 or self.ny < 4:
            raise ValueError(f"grid needs at least 4 points per axis, got {self.nx}x{self.ny}")
        if not (self.lx > 0 and self.ly > 0):
            raise ValueError("domain lengths must be positive")

    @classmethod
    def square(cls, n: int, length: float) -> "Grid2D":
        return cls(n, n, float(length), float(length))

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Meshgrid ``(X, Y)`` of shape ``(ny, nx)``."""
        x = np.arange(self.nx) * self.dx
        y = np.arange(self.ny) * self.dy
        return np.meshgrid(x, y, indexing="xy")

    def same_domain(self, other: "Grid2D") -> bool:
        return self.lx == other.lx and self.ly == other.ly


@dataclass(frozen=True)
class ParamVector:
    """Ordered named scalar parameters (e.g. ``gamma`` or ``nu``)."""

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if len(self.names) != len(self.values):
            raise ValueError("names and values differ in length")
        if not all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class Field:
    """Immutable ``(channels, ny, nx)`` sample array on a periodic grid."""

    grid: Grid2D
    data: np.ndarray
    diverged: bool = dc_field(default=False)

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3 or data.shape[1:] != self.grid.shape:
            raise ValueError(f"data shape {data.shape} does not match grid {self.grid.shape}")
        if not self.diverged and not np.all(np.isfinite(data)):
            raise DivergenceError("non-finite entries in a field not flagged as diverged")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    def with_data(self, data: np.ndarray) -> "Field":
        """New field on the same grid; flagged diverged if ``data`` is non-finite or self is."""
        bad = self.diverged or not np.all(np.isfinite(data))
        return Field(self.grid, data, diverged=bad)

    def __add__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.data + other.data, diverged=self.diverged or other.diverged)

    def __sub__(self, other: "Field") -> "Field":
        _check_same_grid(self, other)
        return Field(self.grid, self.data - other.data, diverged=self.diverged or other.diverged)

    def __mul__(self, a: float) -> "Field":
        return self.with_data(self.data * a)

    __rmul__ = __mul__

    def roll(self, shift_y: int, shift_x: int) -> "Field":
        return Field(self.grid, np.roll(self.data, (shift_y, shift_x), axis=(1, 2)), self.diverged)


def _check_same_grid(a: Field, b: Field) -> None:
    if a.grid != b.grid or a.channels != b.channels:
        raise ValueError("fields live on different grids or have different channel counts")


def constant_field(grid: Grid2D, channels: int, value: float) -> Field:
    if channels < 1:
        raise ValueError("channels must be >= 1")
    return Field(grid, np.full((channels, grid.ny, grid.nx), float(value)))


def l2_norm(f: Field | np.ndarray) -> float:
    """Discrete 2-norm over all channels and points (no quadrature weights)."""
    data = f.data if isinstance(f, Field) else np.asarray(f)
    if (isinstance(f, Field) and f.diverged) or not np.all(np.isfinite(data)):
        raise DivergenceError("l2_norm of a diverged field")
    return float(np.sqrt(np.sum(np.square(data, dtype=np.float64))))


def linear_rescale(f: Field, lo: float = 0.1, hi: float = 1.1) -> Field:
    """Affine map taking the global min to ``lo`` and the global max to ``hi``."""
    if not hi > lo:
        raise ValueError("need hi > lo")
    return Field(f.grid, rescale_array(f.data, lo, hi))


def rescale_array(a: np.ndarray, lo: float, hi: float) -> np.ndarray:
    amin, amax = a.min(), a.max()
    if not amax > amin:
        raise ValueError("cannot rescale a constant field")
    out = lo + (a - amin) * ((hi - lo) / (amax - amin))
    # pin the endpoints; the affine expression can be off by one ulp
    out[a == amin] = lo
    out[a == amax] = hi
    return out


# --- resampling ---------------------------------------------------------------

def _linear_kernel(t: float) -> list[tuple[int, float]]:
    return [(0, 1.0 - t), (1, t)]


def _cubic_kernel(t: float, a: float = -0.5) -> list[tuple[int, float]]:
    # Keys cubic convolution; a = -0.5 is Catmull-Rom
    def w(s):
        s = abs(s)
        if s <= 1:
            return (a + 2) * s**3 - (a + 3) * s**2 + 1
        if s < 2:
            return a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a
        return 0.0

    return [(-1, w(1 + t)), (0, w(t)), (1, w(1 - t)), (2, w(2 - t))]


@lru_cache(maxsize=64)
def interp_matrix(n_src: int, n_dst: int, kind: str) -> np.ndarray:
    """Dense ``(n_dst, n_src)`` periodic interpolation matrix along one axis.

    Destination point ``k`` sits at physical fraction ``k/n_dst`` of the period.
    """
    kernel = {"linear": _linear_kernel, "cubic": _cubic_kernel}[kind]
    m = np.zeros((n_dst, n_src))
    for k in range(n_dst):
        # exact rational position in source-index units
        num = k * n_src
        i0, rem = divmod(num, n_dst)
        t = rem / n_dst
        for off, w in kernel(t):
            m[k, (i0 + off) % n_src] += w
    m.flags.writeable = False
    return m


def resample_array(a: np.ndarray, src: Grid2D, dst: Grid2D, kind: str) -> np.ndarray:
    """Separable periodic resampling of ``(..., ny, nx)`` arrays."""
    if not src.same_domain(dst):
        raise ValueError("source and destination grids cover different domains")
    my = interp_matrix(src.ny, dst.ny, kind)
    mx = interp_matrix(src.nx, dst.nx, kind)
    out = np.matmul(my, a)
    return np.matmul(out, mx.T)


def downsample_bilinear(f: Field, coarse: Grid2D) -> Field:
    if coarse.nx > f.grid.nx or coarse.ny > f.grid.ny:
        raise ValueError("coarse grid is finer than the field's grid")
    return Field(coarse, resample_array(f.data, f.grid, coarse, "linear"), diverged=f.diverged)


def upsample_bicubic(f: Field, fine: Grid2D) -> Field:
    if fine.nx < f.grid.nx or fine.ny < f.grid.ny:
        raise ValueError("target grid is coarser than the field's grid")
    return Field(fine, resample_array(f.data, f.grid, fine, "cubic"), diverged=f.diverged)
