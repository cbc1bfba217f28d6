"""Autoregressive rollout, the relative full-field error and model comparison."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .datagen import Dataset, Trajectory
from .field import DivergenceError, Field, Grid2D, ParamVector
from .model import ModelConfig, NextStepModel


class Stepper(Protocol):
    label: str

    def step_array(self, u: np.ndarray, params: np.ndarray) -> np.ndarray: ...


class CoarseSolver:
    """The PDE-preserving branch used on its own: forward Euler on the coarse grid."""

    label = "coarse"

    def __init__(self, cfg: ModelConfig):
        if not cfg.is_ppnn:
            raise ValueError("coarse solver needs a PDE system")
        self.cfg = cfg
        self._branch = NextStepModel(cfg, weights=None, seed=0, dtype=np.float64)

    def step_array(self, u: np.ndarray, params: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        return u + self._branch.pde_increment(u, params)


class FunctionStepper:
    def __init__(self, fn: Callable[[np.ndarray, np.ndarray], np.ndarray], label: str = "custom"):
        self.fn = fn
        self.label = label

    def step_array(self, u, params):
        return self.fn(u, params)


@dataclass
class Rollout:
    """States ``(n_steps + 1, C, ny, nx)``; rows from ``diverged_at`` on are NaN."""

    states: np.ndarray
    params: ParamVector
    grid: Grid2D
    diverged_at: int | None = None

    def __len__(self) -> int:
        return len(self.states)

    def field(self, t: int) -> Field:
        if self.diverged_at is not None and t >= self.diverged_at:
            return Field(self.grid, self.states[t], diverged=True)
        return Field(self.grid, self.states[t])


def _safe_step(stepper, u: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Step a batch; returns ``(next, ok)`` where ``ok`` flags finite results.

    A divergence raised for the batch is localised by re-stepping samples one at a time.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            nxt = np.asarray(stepper.step_array(u, p), dtype=np.float64)
        except DivergenceError:
            nxt = np.empty_like(u)
            for i in range(len(u)):
                try:
                    nxt[i] = stepper.step_array(u[i:i + 1], p[i:i + 1])[0]
                except DivergenceError:
                    nxt[i] = np.nan
    ok = np.all(np.isfinite(nxt.reshape(len(nxt), -1)), axis=1)
    return nxt, ok


def rollout_batch(stepper, u0: np.ndarray, params: np.ndarray, n_steps: int,
                  batch_size: int = 16) -> tuple[np.ndarray, list[int | None]]:
    """Roll a batch of initial states forward ``n_steps`` times.

    Returns ``(states, diverged_at)`` with ``states`` of shape
    ``(B, n_steps + 1, C, ny, nx)``. A trajectory that turns non-finite at step
    ``k`` is frozen: rows ``k..n_steps`` are NaN and ``diverged_at`` is ``k``.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    u0 = np.asarray(u0, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64).reshape(len(u0), -1)
    out = np.full((len(u0), n_steps + 1) + u0.shape[1:], np.nan)
    out[:, 0] = u0
    diverged: list[int | None] = [None] * len(u0)
    for lo in range(0, len(u0), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(u0)))
        u = u0[idx]
        alive = np.ones(len(idx), dtype=bool)
        for t in range(1, n_steps + 1):
            if not alive.any():
                break
            live = np.flatnonzero(alive)
            nxt, ok = _safe_step(stepper, u[live], params[idx[live]])
            for j, good in zip(live, ok):
                if not good:
                    alive[j] = False
                    diverged[idx[j]] = t
            u = u.copy()
            u[live[ok]] = nxt[ok]
            out[idx[live[ok]], t] = nxt[ok]
    return out, diverged


def rollout(stepper, u0: Field, params: ParamVector, n_steps: int) -> Rollout:
    states, div = rollout_batch(stepper, u0.data[None], np.array([params.values]), n_steps)
    return Rollout(states[0], params, u0.grid, div[0])


# --- error metric -------------------------------------------------------------------

def relative_errors(preds: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Per-trajectory, per-step ``||pred - ref||_2 / ||ref||_2`` over all channels and points.

    Inputs are ``(N, T, C, ny, nx)``; NaN predictions give NaN errors.
    """
    preds = np.asarray(preds, dtype=np.float64)
    refs = np.asarray(refs, dtype=np.float64)
    if preds.shape != refs.shape:
        raise ValueError(f"prediction shape {preds.shape} != reference shape {refs.shape}")
    axes = tuple(range(2, preds.ndim))
    ref_norm = np.sqrt(np.sum(refs**2, axis=axes))
    if np.any(ref_norm == 0):
        raise ZeroDivisionError("reference field with zero norm")
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.sum((preds - refs) ** 2, axis=axes)) / ref_norm


@dataclass
class StepStats:
    mean: np.ndarray
    min: np.ndarray
    max: np.ndarray
    n_alive: np.ndarray


def epsilon_t(errors: np.ndarray) -> StepStats:
    """Mean and envelope over trajectories, skipping diverged (NaN) entries."""
    errors = np.asarray(errors, dtype=np.float64)
    alive = np.isfinite(errors)
    n_alive = alive.sum(axis=0)
    safe = np.where(alive, errors, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n_alive > 0, safe.sum(axis=0) / np.maximum(n_alive, 1), np.nan)
    mn = np.where(n_alive > 0, np.where(alive, errors, np.inf).min(axis=0), np.nan)
    mx = np.where(n_alive > 0, np.where(alive, errors, -np.inf).max(axis=0), np.nan)
    # an arithmetic mean can land one ulp outside its envelope
    mean = np.clip(mean, mn, mx)
    return StepStats(mean, mn, mx, n_alive)


def epsilon_t_trajectories(preds: Sequence[np.ndarray], refs: Sequence[Trajectory]) -> StepStats:
    """Error statistics for predicted state sequences against reference trajectories.

    Step 0 (the shared initial condition) is excluded.
    """
    if len(preds) != len(refs):
        raise ValueError("need one prediction per reference trajectory")
    p = np.stack([np.asarray(x, dtype=np.float64) for x in preds])
    r = np.stack([tr.snapshots.astype(np.float64) for tr in refs])
    return epsilon_t(relative_errors(p[:, 1:], r[:, 1:]))


@dataclass
class RolloutReport:
    label: str
    dt_learn: float
    errors: np.ndarray  # (N, n_steps), NaN once diverged
    diverged_at: list[int | None]
    train_horizon: int
    params: np.ndarray = field(default_factory=lambda: np.zeros((0, 1)))
    param_mode: str = "interpolation"

    @property
    def stats(self) -> StepStats:
        return epsilon_t(self.errors)

    @property
    def steps(self) -> np.ndarray:
        return np.arange(1, self.errors.shape[1] + 1)

    def at(self, step: int) -> float:
        return float(self.stats.mean[step - 1])

    def rows(self):
        s = self.stats
        for k, step in enumerate(self.steps):
            yield (int(step), float(step * self.dt_learn), self.label, float(s.mean[k]),
                   float(s.min[k]), float(s.max[k]), int(s.n_alive[k]))


CSV_HEADER = ("step", "time", "model", "eps_mean", "eps_min", "eps_max", "n_alive")


def reports_to_csv(reports: Sequence[RolloutReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in reports:
        for row in rep.rows():
            w.writerow([row[0], repr(row[1]), row[2], *(repr(x) for x in row[3:6]), row[6]])
    return buf.getvalue()


def compare(steppers: Sequence, test_set: Dataset, n_steps: int | None = None,
            train_horizon: int | None = None, param_mode: str = "interpolation") -> list[RolloutReport]:
    """Roll every stepper out from each test trajectory's first snapshot and score it."""
    n_steps = test_set.n_snapshots - 1 if n_steps is None else n_steps
    if n_steps > test_set.n_snapshots - 1:
        raise ValueError(f"test trajectories only cover {test_set.n_snapshots - 1} steps")
    refs = np.stack([tr.snapshots[: n_steps + 1] for tr in test_set.trajectories]).astype(np.float64)
    params = test_set.params_array()
    horizon = train_horizon if train_horizon is not None else n_steps
    reports = []
    for st in steppers:
        states, div = rollout_batch(st, refs[:, 0], params, n_steps)
        errs = relative_errors(states[:, 1:], refs[:, 1:])
        reports.append(RolloutReport(st.label, test_set.dt_learn, errs, div, horizon, params, param_mode))
    return reports
