"""Next-step supervised training on consecutive snapshot pairs."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datagen import Dataset
from .field import interp_matrix
from .model import NextStepModel
from .stencil import _TABLES

log = logging.getLogger(__name__)


class TrainingDivergedError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr: float = 3e-4
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")


@dataclass
class LossHistory:
    epoch: list[int] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)
    eval_mse: list[float] = field(default_factory=list)

    def append(self, epoch: int, train: float, evaluation: float = float("nan")) -> None:
        self.epoch.append(epoch)
        self.train_mse.append(train)
        self.eval_mse.append(evaluation)

    def extend(self, other: "LossHistory") -> None:
        """Append a continuation; its epochs must pick up where this history ends."""
        if self.epoch and other.epoch and other.epoch[0] != self.epoch[-1] + 1:
            raise ValueError(f"continuation starts at epoch {other.epoch[0]}, "
                             f"expected {self.epoch[-1] + 1}")
        for e, t, v in zip(other.epoch, other.train_mse, other.eval_mse):
            self.append(e, t, v)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "eval_mse"])
        for row in zip(self.epoch, self.train_mse, self.eval_mse):
            w.writerow([row[0], repr(row[1]), repr(row[2])])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "LossHistory":
        h = cls()
        for row in csv.DictReader(io.StringIO(text)):
            h.append(int(row["epoch"]), float(row["train_mse"]), float(row["eval_mse"]))
        return h


def make_pairs(ds: Dataset) -> list[tuple[np.ndarray, np.ndarray, tuple[float, ...]]]:
    return [(tr.snapshots[t], tr.snapshots[t + 1], tr.params.values)
            for tr in ds.trajectories for t in range(len(tr) - 1)]


def pair_arrays(ds: Dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked ``(inputs, next states, params)`` over all consecutive pairs."""
    if not ds.trajectories:
        raise ValueError("empty dataset")
    u = np.concatenate([tr.snapshots[:-1] for tr in ds.trajectories])
    v = np.concatenate([tr.snapshots[1:] for tr in ds.trajectories])
    p = np.concatenate([np.repeat([tr.params.values], len(tr) - 1, axis=0) for tr in ds.trajectories])
    return u.astype(np.float64), v.astype(np.float64), p.astype(np.float64)


def pde_features(model: NextStepModel, u: np.ndarray, p: np.ndarray, chunk: int = 64) -> np.ndarray | None:
    if not model.cfg.is_ppnn:
        return None
    return np.concatenate([model.pde_increment(u[i:i + chunk], p[i:i + chunk])
                           for i in range(0, len(u), chunk)])


def pde_branch_fingerprint(model: NextStepModel) -> str:
    """Hash of everything the fixed branch computes with: stencils, transfer matrices, setup."""
    cfg = model.cfg
    h = hashlib.sha256()
    h.update(repr((cfg.pde_system, cfg.laplacian_order, cfg.substeps, cfg.dt_learn)).encode())
    for key in sorted(_TABLES, key=repr):
        h.update(np.asarray(_TABLES[key].taps).tobytes())
    for n_src, n_dst, kind in ((cfg.fine_grid.nx, cfg.coarse_grid.nx, "linear"),
                               (cfg.fine_grid.ny, cfg.coarse_grid.ny, "linear"),
                               (cfg.coarse_grid.nx, cfg.fine_grid.nx, "cubic"),
                               (cfg.coarse_grid.ny, cfg.fine_grid.ny, "cubic")):
        h.update(interp_matrix(n_src, n_dst, kind).tobytes())
    return h.hexdigest()


def _check_compatible(model: NextStepModel, ds: Dataset) -> None:
    cfg = model.cfg
    if ds.grid != cfg.fine_grid or ds.channels != cfg.channels:
        raise ValueError(f"model expects {cfg.fine_grid} with {cfg.channels} channels, "
                         f"dataset has {ds.grid} with {ds.channels}")
    if len(ds.param_names) != cfg.n_params:
        raise ValueError("dataset and model disagree on the number of parameters")
    if not np.isclose(ds.dt_learn, cfg.dt_learn, rtol=1e-12):
        raise ValueError(f"dataset dt_learn {ds.dt_learn} != model dt_learn {cfg.dt_learn}")


def _batch_loss(model, u, target, p, feature):
    pred = model.predict_increment(u, p, feature)
    return ad.mse_loss(pred, ad.Tensor(target.astype(model.dtype)))


def evaluate_onestep(model: NextStepModel, ds: Dataset, batch_size: int = 32) -> float:
    """Mean one-step squared error over every pair, without touching the weights."""
    _check_compatible(model, ds)
    u, v, p = pair_arrays(ds)
    total, count = 0.0, 0
    for i in range(0, len(u), batch_size):
        ub, vb, pb = u[i:i + batch_size], v[i:i + batch_size], p[i:i + batch_size]
        pred = model.step_array(ub, pb)
        total += float(np.sum((pred - vb) ** 2))
        count += vb.size
    return total / count


def train(model: NextStepModel, ds: Dataset, cfg: TrainConfig, eval_ds: Dataset | None = None,
          progress=None, start_epoch: int = 0) -> tuple[NextStepModel, LossHistory]:
    """Adam on the mean-squared increment error; deterministic for a fixed seed.

    ``start_epoch`` numbers the epochs of a resumed run so that each one draws
    the same shuffle it would have drawn in an uninterrupted run.
    """
    _check_compatible(model, ds)
    u, v, p = pair_arrays(ds)
    target = v - u
    feats = pde_features(model, u, p)
    opt = ad.Adam(model.params, lr=cfg.lr)
    history = LossHistory()
    n = len(u)
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        t0 = time.perf_counter()
        order = (np.random.default_rng([cfg.seed, epoch]).permutation(n) if cfg.shuffle
                 else np.arange(n))
        total = 0.0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = _batch_loss(model, u[idx], target[idx], p[idx],
                               None if feats is None else feats[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step()
            total += value * len(idx)
        ev = evaluate_onestep(model, eval_ds) if eval_ds is not None else float("nan")
        history.append(epoch, total / n, ev)
        log.info("%s epoch %d train_mse %.4e eval_mse %.4e (%.1fs)", model.label, epoch,
                 total / n, ev, time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, total / n, ev)
    return model, history
