"""Initial conditions, reference trajectories and the on-disk dataset container."""
from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import DivergenceError, Field, Grid2D, ParamVector, rescale_array
from .physics import PdeSpec, make_spec

log = logging.getLogger(__name__)

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finaliser (Steele, Lea & Flood)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def trajectory_seed(dataset_seed: int, index: int) -> int:
    """``splitmix64(splitmix64(dataset_seed) ^ index)``: order-independent per-trajectory seed."""
    return splitmix64(splitmix64(dataset_seed & MASK64) ^ (index & MASK64))


# --- initial conditions ---------------------------------------------------------

def rd_random_ic(grid: Grid2D, seed: int) -> Field:
    """I.i.d. standard-normal samples for both channels, rescaled to [0.1, 1.1]."""
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((2, grid.ny, grid.nx))
    return Field(grid, rescale_array(raw, 0.1, 1.1))


def fourier_field(grid: Grid2D, coeffs: np.ndarray) -> np.ndarray:
    """Sum of ``a sin(k_i x + k_j y) + b cos(k_i x + k_j y)`` over modes.

    ``coeffs`` has shape ``(4, 2m+1, 2m+1)``: sin/cos weights for u, then for v,
    indexed ``[i + m, j + m]`` for wavenumber indices ``i, j`` in ``[-m, m]``.
    Wavenumbers are ``k_i = 2 pi i / lx`` so every mode is periodic on the grid.
    """
    m = (coeffs.shape[-1] - 1) // 2
    x = np.arange(grid.nx) * grid.dx
    y = np.arange(grid.ny) * grid.dy
    modes = np.arange(-m, m + 1)
    kx = 2 * np.pi * modes / grid.lx
    ky = 2 * np.pi * modes / grid.ly
    # phase[i, j, y, x]
    phase = kx[:, None, None, None] * x[None, None, None, :] + ky[None, :, None, None] * y[None, None, :, None]
    s, c = np.sin(phase), np.cos(phase)
    u = np.einsum("ij,ijyx->yx", coeffs[0], s) + np.einsum("ij,ijyx->yx", coeffs[1], c)
    v = np.einsum("ij,ijyx->yx", coeffs[2], s) + np.einsum("ij,ijyx->yx", coeffs[3], c)
    return np.stack([u, v])


def burgers_fourier_ic(grid: Grid2D, seed: int, max_mode: int = 4,
                       rescale: bool = True) -> Field:
    rng = np.random.default_rng(seed)
    coeffs = rng.standard_normal((4, 2 * max_mode + 1, 2 * max_mode + 1))
    data = fourier_field(grid, coeffs)
    if rescale:
        data = rescale_array(data, 0.1, 1.1)
    return Field(grid, data)


def initial_condition(system: str, grid: Grid2D, seed: int, max_mode: int = 4) -> Field:
    if system in ("rd", "rd_diffusion"):
        return rd_random_ic(grid, seed)
    if system == "burgers":
        return burgers_fourier_ic(grid, seed, max_mode)
    raise ValueError(f"unknown system {system!r}")


# --- trajectories -----------------------------------------------------------------

@dataclass
class Trajectory:
    """Snapshots ``(n_snap, C, ny, nx)`` at spacing ``dt_learn``."""

    params: ParamVector
    snapshots: np.ndarray
    dt_learn: float
    grid: Grid2D

    def __post_init__(self):
        if self.snapshots.ndim != 4 or self.snapshots.shape[2:] != self.grid.shape:
            raise ValueError(f"snapshot array {self.snapshots.shape} does not match {self.grid}")
        if len(self.snapshots) < 2:
            raise ValueError("a trajectory needs at least 2 snapshots")

    def __len__(self) -> int:
        return len(self.snapshots)

    def field(self, t: int) -> Field:
        return Field(self.grid, self.snapshots[t])

    @property
    def channels(self) -> int:
        return self.snapshots.shape[1]


def advance_batch(spec: PdeSpec, u: np.ndarray, grid: Grid2D, coef: np.ndarray | None,
                  dt_num: float, steps_per_snapshot: int, n_snapshots: int,
                  burn_in: int = 0) -> np.ndarray:
    """Run Euler on ``u`` of shape ``(B, C, ny, nx)``; returns ``(B, n_snap, C, ny, nx)``.

    Raises :class:`DivergenceError` carrying the global numerical step index.
    """
    if dt_num <= 0 or steps_per_snapshot < 1 or n_snapshots < 1:
        raise ValueError("need dt_num > 0, steps_per_snapshot >= 1, n_snapshots >= 1")
    out = np.empty((u.shape[0], n_snapshots) + u.shape[1:], dtype=np.float64)
    step = 0

    def run(u, n):
        nonlocal step
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(n):
                u = u + dt_num * spec.rhs_array(u, grid, coef)
                step += 1
                if not np.isfinite(u).all():
                    raise DivergenceError("reference solver diverged", step=step)
        return u

    u = run(u, burn_in)
    out[:, 0] = u
    for t in range(1, n_snapshots):
        u = run(u, steps_per_snapshot)
        out[:, t] = u
    return out


def generate_trajectory(spec: PdeSpec, ic: Field, dt_num: float, steps_per_snapshot: int,
                        n_snapshots: int, burn_in: int = 0) -> Trajectory:
    snaps = advance_batch(spec, ic.data[None], ic.grid, None, dt_num, steps_per_snapshot,
                          n_snapshots, burn_in)[0]
    return Trajectory(spec.params(), snaps, steps_per_snapshot * dt_num, ic.grid)


# --- datasets ---------------------------------------------------------------------

@dataclass
class Dataset:
    grid: Grid2D
    dt_learn: float
    param_names: tuple[str, ...]
    trajectories: list[Trajectory] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for tr in self.trajectories:
            if tr.grid != self.grid or tr.dt_learn != self.dt_learn:
                raise ValueError("heterogeneous trajectories in dataset")
            if tr.params.names != tuple(self.param_names):
                raise ValueError("trajectory parameter names differ from the dataset's")
        if len({(tr.channels, len(tr)) for tr in self.trajectories}) > 1:
            raise ValueError("trajectories differ in channel or snapshot count")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_snapshots(self) -> int:
        return len(self.trajectories[0]) if self.trajectories else 0

    @property
    def channels(self) -> int:
        return self.trajectories[0].channels if self.trajectories else int(self.meta.get("channels", 2))

    def params_array(self) -> np.ndarray:
        return np.array([tr.params.values for tr in self.trajectories], dtype=np.float64)


@dataclass(frozen=True)
class DataConfig:
    """Recipe for one dataset. Desk-scale defaults shrink the reference setup proportionally."""

    system: str = "rd"
    n_fine: int = 64
    length: float = 6.4
    dt_num: float = 8e-5
    steps_per_snapshot: int = 200
    n_snapshots: int = 50
    burn_in: int = 2000
    param_values: tuple[float, ...] = (0.6, 0.8333333333333334, 1.0666666666666667, 1.3)
    ics_per_param: int = 4
    seed: int = 0
    max_mode: int = 4
    laplacian_order: int = 6

    @property
    def grid(self) -> Grid2D:
        return Grid2D.square(self.n_fine, self.length)

    @property
    def dt_learn(self) -> float:
        return self.steps_per_snapshot * self.dt_num


def evenly_spaced(lo: float, hi: float, n: int) -> tuple[float, ...]:
    return tuple(float(v) for v in np.linspace(lo, hi, n))


def sample_test_params(lo: float, hi: float, n: int, seed: int, exclude=(),
                       extrapolate: bool = False) -> tuple[float, ...]:
    """Uniform draws from ``[lo, hi]`` avoiding training values.

    With ``extrapolate`` the draws come from the interval's mirror images just
    outside it, ``[lo - w/2, lo) U (hi, hi + w/2]`` with ``w = hi - lo``.
    """
    rng = np.random.default_rng(seed)
    out: list[float] = []
    excl = np.asarray(exclude, dtype=np.float64)
    while len(out) < n:
        if extrapolate:
            w = hi - lo
            r = rng.uniform(0, w / 2)
            v = lo - r if rng.random() < 0.5 else hi + r
        else:
            v = rng.uniform(lo, hi)
        if excl.size and np.min(np.abs(excl - v)) < 1e-12:
            continue
        out.append(float(v))
    return tuple(out)


def generate_dataset(cfg: DataConfig, params: tuple[float, ...] | None = None,
                     ics_per_param: int | None = None) -> Dataset:
    """Simulate ``len(params) * ics_per_param`` trajectories in one batched solve.

    Trajectory ``k`` takes parameter ``params[k // ics_per_param]`` and an IC
    drawn with ``trajectory_seed(cfg.seed, k)``.
    """
    params = cfg.param_values if params is None else tuple(params)
    per = cfg.ics_per_param if ics_per_param is None else ics_per_param
    grid = cfg.grid
    spec = make_spec(cfg.system, params[0] if params else 1.0, cfg.laplacian_order)
    names = spec.params().names
    values = [p for p in params for _ in range(per)]
    seeds = [trajectory_seed(cfg.seed, k) for k in range(len(values))]
    meta = {
        "system": cfg.system,
        "param_names": list(names),
        "laplacian_order": cfg.laplacian_order,
        "convection": "upwind3" if cfg.system == "burgers" else "none",
        "dt_num": cfg.dt_num,
        "steps_per_snapshot": cfg.steps_per_snapshot,
        "burn_in": cfg.burn_in,
        "dataset_seed": cfg.seed,
        "trajectory_seeds": seeds,
        "max_mode": cfg.max_mode,
    }
    ds = Dataset(grid, cfg.dt_learn, names, [], meta)
    if not values:
        return ds
    ics = np.stack([initial_condition(cfg.system, grid, s, cfg.max_mode).data for s in seeds])
    coef = np.asarray(values, dtype=np.float64)[:, None, None, None]
    for v in values:
        make_spec(cfg.system, v, cfg.laplacian_order)  # validates the parameter
    snaps = advance_batch(spec, ics, grid, coef, cfg.dt_num, cfg.steps_per_snapshot,
                          cfg.n_snapshots, cfg.burn_in)
    for v, traj in zip(values, snaps):
        # stored at training precision
        ds.trajectories.append(Trajectory(ParamVector(names, (v,)), traj.astype(np.float32),
                                          cfg.dt_learn, grid))
    log.info("generated %d %s trajectories x %d snapshots (dt_learn=%g)",
             len(values), cfg.system, cfg.n_snapshots, cfg.dt_learn)
    return ds


# --- binary container ---------------------------------------------------------------
#
#   magic "PPDS" | u32 version=1 | u32 channels | u32 ny | u32 nx | f64 lx | f64 ly
#   | f64 dt_learn | u32 n_traj | u32 n_snap | u32 n_params
#   then per trajectory: n_params f64 values, n_snap * channels*ny*nx f32 (row-major)
#   all little-endian. Sidecar ``<path>.meta.json`` holds names, seeds and scheme.

MAGIC = b"PPDS"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIdddIII")


class FormatError(ValueError):
    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class VersionMismatchError(FormatError):
    code = "version-mismatch"


class TruncatedFileError(FormatError):
    code = "truncated"


class DimensionError(FormatError):
    code = "dimension-mismatch"


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode_dataset(ds: Dataset) -> bytes:
    n_params = len(ds.param_names)
    header = _HEADER.pack(MAGIC, VERSION, ds.channels, ds.grid.ny, ds.grid.nx, ds.grid.lx,
                          ds.grid.ly, ds.dt_learn, len(ds), ds.n_snapshots, n_params)
    parts = [header]
    for tr in ds.trajectories:
        parts.append(np.asarray(tr.params.values, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(tr.snapshots, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_dataset(buf: bytes, meta: dict | None = None) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a PPDS dataset (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("dataset header truncated")
    _, version, ch, ny, nx, lx, ly, dt_learn, n_traj, n_snap, n_params = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, expected {VERSION}")
    if ch < 1 or nx < 4 or ny < 4 or not (lx > 0 and ly > 0) or (n_traj and n_snap < 2):
        raise DimensionError(f"inconsistent header: C={ch} {ny}x{nx} L=({lx},{ly}) n_snap={n_snap}")
    per_traj = 8 * n_params + 4 * n_snap * ch * ny * nx
    expected = _HEADER.size + n_traj * per_traj
    if len(buf) < expected:
        raise TruncatedFileError(f"dataset has {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise DimensionError(f"{len(buf) - expected} trailing bytes after the last trajectory")
    meta = dict(meta or {})
    names = tuple(meta.get("param_names", [f"p{k}" for k in range(n_params)]))
    if len(names) != n_params:
        raise DimensionError("sidecar parameter names disagree with the header")
    meta.setdefault("channels", ch)
    grid = Grid2D(nx, ny, lx, ly)
    ds = Dataset(grid, dt_learn, names, [], meta)
    off = _HEADER.size
    for _ in range(n_traj):
        vals = np.frombuffer(buf, "<f8", n_params, off)
        off += 8 * n_params
        snaps = np.frombuffer(buf, "<f4", n_snap * ch * ny * nx, off).reshape(n_snap, ch, ny, nx)
        off += 4 * snaps.size
        ds.trajectories.append(Trajectory(ParamVector(names, vals), snaps.astype(np.float32),
                                          dt_learn, grid))
    return ds


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_dataset(ds: Dataset, path: str | os.PathLike) -> None:
    for tr in ds.trajectories:
        if not np.all(np.isfinite(tr.snapshots)):
            raise DivergenceError("refusing to store a trajectory with non-finite values")
    atomic_write_bytes(path, encode_dataset(ds))
    meta = dict(ds.meta, param_names=list(ds.param_names))
    atomic_write_bytes(sidecar_path(path), (json.dumps(meta, indent=2, sort_keys=True) + "\n").encode())


def read_dataset(path: str | os.PathLike) -> Dataset:
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else None
    return decode_dataset(Path(path).read_bytes(), meta)
