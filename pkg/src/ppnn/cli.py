"""Command-line pipeline: gen-data, train, compare and coarse.

Every command reads a flat ``key = value`` config file, applies the ``--seed``
and ``--out`` overrides, writes the resolved config next to its outputs and
writes each output file atomically.
"""
from __future__ import annotations

import argparse
import contextlib
import dataclasses
import hashlib
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .datagen import DataConfig, Dataset, FormatError, atomic_write_bytes, evenly_spaced, \
    generate_dataset, read_dataset, sample_test_params, write_dataset
from .field import DivergenceError, Grid2D
from .model import FUSIONS, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .physics import SYSTEMS
from .rollout import CoarseSolver, RolloutReport, compare, reports_to_csv
from .train import LossHistory, TrainConfig, TrainingDivergedError, train

log = logging.getLogger("ppnn")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

PDE_SPECS = ("full", "diffusion", "none")
MODEL_KINDS = {"ppnn": "full", "ppnn-partial": "diffusion", "blackbox": "none"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """All knobs of a run. Defaults are the desk reaction-diffusion setup."""

    # system and grids
    system: str = "rd"
    n_fine: int = 64
    n_coarse: int = 16
    length: float = 6.4
    laplacian_order: int = 6
    # reference data
    dt_num: float = 8e-5
    steps_per_snapshot: int = 200
    burn_in: int = 2000
    max_mode: int = 4
    param_lo: float = 0.6
    param_hi: float = 1.3
    n_train_params: int = 4
    ics_per_param: int = 4
    n_snapshots: int = 51
    test_trajectories: int = 8
    test_snapshots: int = 101
    extrapolate: bool = False
    seed: int = 0
    # model
    pde_spec: str = "full"
    hidden_channels: int = 16
    n_resblocks: int = 3
    substeps: int = 1
    pde_fusion: str = "add+input"
    feature_scale: float = 1.0
    # training
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-4
    # rollout
    rollout_steps: int = 100
    out: str = "runs"

    def __post_init__(self):
        checks = [
            (self.system in SYSTEMS and self.system != "rd_diffusion",
             f"system must be 'rd' or 'burgers', got {self.system!r}"),
            (self.pde_spec in PDE_SPECS, f"pde_spec must be one of {PDE_SPECS}"),
            (self.pde_spec != "diffusion" or self.system == "rd",
             "pde_spec=diffusion only applies to system=rd"),
            (self.pde_fusion in FUSIONS, f"pde_fusion must be one of {FUSIONS}"),
            (self.n_fine >= 4 and self.n_coarse >= 4, "grids need at least 4 points per side"),
            (self.length > 0 and self.dt_num > 0, "length and dt_num must be positive"),
            (0 < self.param_lo <= self.param_hi, "need 0 < param_lo <= param_hi"),
            (min(self.steps_per_snapshot, self.n_train_params, self.ics_per_param,
                 self.test_trajectories, self.epochs, self.batch_size, self.substeps) >= 1,
             "counts must be >= 1"),
            (self.n_snapshots >= 2 and self.test_snapshots >= 2, "need at least 2 snapshots"),
            (self.burn_in >= 0, "burn_in must be >= 0"),
            (self.lr >= 0, "lr must be >= 0"),
            (1 <= self.rollout_steps < self.test_snapshots,
             "rollout_steps must be in [1, test_snapshots)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # --- derived recipes ----------------------------------------------------------

    @property
    def train_params(self) -> tuple[float, ...]:
        return evenly_spaced(self.param_lo, self.param_hi, self.n_train_params)

    def data_config(self, split: str) -> DataConfig:
        base = DataConfig(system=self.system, n_fine=self.n_fine, length=self.length,
                          dt_num=self.dt_num, steps_per_snapshot=self.steps_per_snapshot,
                          n_snapshots=self.n_snapshots, burn_in=self.burn_in,
                          param_values=self.train_params, ics_per_param=self.ics_per_param,
                          seed=self.seed, max_mode=self.max_mode,
                          laplacian_order=self.laplacian_order)
        if split == "train":
            return base
        if split == "test":
            # unseen ICs come from a disjoint seed stream
            return dataclasses.replace(base, n_snapshots=self.test_snapshots,
                                       seed=self.seed + 1_000_003)
        raise ConfigError(f"unknown split {split!r}")

    def test_params(self) -> tuple[float, ...]:
        return sample_test_params(self.param_lo, self.param_hi, self.test_trajectories,
                                  seed=self.seed + 17, exclude=self.train_params,
                                  extrapolate=self.extrapolate)

    def model_config(self, dataset: Dataset, pde_spec: str | None = None) -> ModelConfig:
        spec = self.pde_spec if pde_spec is None else pde_spec
        system = {"full": self.system, "diffusion": "rd_diffusion", "none": None}[spec]
        fine = dataset.grid
        if fine != self.data_config("train").grid:
            raise ConfigError(f"dataset grid {fine} does not match the configured "
                              f"{self.n_fine}x{self.n_fine} over length {self.length}")
        coarse = Grid2D(self.n_coarse, self.n_coarse, fine.lx, fine.ly)
        return ModelConfig(fine, coarse, dataset.dt_learn, pde_system=system,
                           channels=dataset.channels, n_params=len(dataset.param_names),
                           hidden_channels=self.hidden_channels, n_resblocks=self.n_resblocks,
                           substeps=self.substeps, laplacian_order=self.laplacian_order,
                           pde_fusion=self.pde_fusion, feature_scale=self.feature_scale)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                           seed=self.seed)

    # --- text form ------------------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(raw)
        if kind is float:
            v = float(raw)
            if not math.isfinite(v):
                raise ValueError(raw)
            return v
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def parse_config(text: str, overrides: dict | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    known = {f.name: _TYPES[f.type] for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, known[key])
    for key, v in (overrides or {}).items():
        if v is not None:
            values[key] = v
    return RunConfig(**values)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    text = Path(path).read_text() if path else ""
    return parse_config(text, overrides)


# --- SVG ------------------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def svg_chart(reports: Sequence[RolloutReport], title: str = "", width: int = 640,
              height: int = 400) -> str:
    """Line chart of mean error per model on a log y axis, with a dashed training-horizon marker."""
    left, right, top, bottom = 70, 140, 30, 50
    pw, ph = width - left - right, height - top - bottom
    n_steps = max(r.errors.shape[1] for r in reports)
    vals = np.concatenate([r.stats.mean for r in reports])
    vals = vals[np.isfinite(vals) & (vals > 0)]
    if vals.size:
        lo, hi = math.floor(math.log10(vals.min())), math.ceil(math.log10(vals.max()))
    else:
        lo, hi = -3, 0
    if hi <= lo:
        hi = lo + 1

    def sx(step):
        return left + pw * (step - 1) / max(n_steps - 1, 1)

    def sy(v):
        return top + ph * (hi - math.log10(v)) / (hi - lo)

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<title>{escape(title or "relative error per step")}</title>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#000000"/>',
    ]
    for e in range(lo, hi + 1):
        y = sy(10.0 ** e)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" '
                   'stroke="#dddddd" stroke-width="0.5"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" font-size="11" '
                   f'text-anchor="end">1e{e}</text>')
    for step in np.unique(np.linspace(1, n_steps, 6).round().astype(int)):
        x = sx(step)
        out.append(f'<text x="{x:.2f}" y="{top + ph + 16}" font-size="11" '
                   f'text-anchor="middle">{step}</text>')
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 10}" font-size="12" '
               'text-anchor="middle">step</text>')
    out.append(f'<text x="16" y="{top + ph / 2:.2f}" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2:.2f})">relative error</text>')
    horizon = reports[0].train_horizon if reports else 0
    if 1 <= horizon <= n_steps:
        x = sx(horizon)
        out.append(f'<line x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + ph}" '
                   'stroke="#555555" stroke-dasharray="5,4"/>')
    for k, rep in enumerate(reports):
        color = PALETTE[k % len(PALETTE)]
        segs, pen_down = [], False
        for step, v in zip(rep.steps, rep.stats.mean):
            if not (np.isfinite(v) and v > 0):
                pen_down = False
                continue
            segs.append(f'{"L" if pen_down else "M"}{sx(step):.2f},{sy(v):.2f}')
            pen_down = True
        if segs:
            out.append(f'<path d="{" ".join(segs)}" fill="none" stroke="{color}" '
                       'stroke-width="1.5"/>')
        y = top + 14 + 18 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{y}" x2="{left + pw + 30}" y2="{y}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{y + 4}" font-size="11">'
                   f'{escape(rep.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --- commands -----------------------------------------------------------------------

def _write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


@contextlib.contextmanager
def _run_dir(cfg: RunConfig, command: str):
    """Output directory with the resolved config; timestamps go only to ``<command>.log``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / f"{command}.resolved.cfg", cfg.to_text())
    handler = logging.FileHandler(out / f"{command}.log", mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s %(message)s"))
    root = logging.getLogger()
    old_level = root.level
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    try:
        yield out
    finally:
        root.removeHandler(handler)
        root.setLevel(old_level)
        handler.close()


def cmd_gen_data(cfg: RunConfig, split: str = "train") -> Path:
    with _run_dir(cfg, f"gen-data-{split}") as out:
        dcfg = cfg.data_config(split)
        if split == "train":
            ds = generate_dataset(dcfg)
        else:
            ds = generate_dataset(dcfg, cfg.test_params(), 1)
        ds.meta["split"] = split
        ds.meta["param_mode"] = "extrapolation" if cfg.extrapolate else "interpolation"
        path = out / f"{split}.ppds"
        write_dataset(ds, path)
        digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
        print(f"{path}: {len(ds)} trajectories x {ds.n_snapshots} snapshots, "
              f"dt_learn={ds.dt_learn:g}, sha256={digest}")
        return path


def cmd_train(cfg: RunConfig, dataset: str, kind: str | None = None,
              resume: str | None = None) -> Path:
    spec = MODEL_KINDS[kind] if kind else cfg.pde_spec
    label = {v: k for k, v in MODEL_KINDS.items()}[spec]
    with _run_dir(cfg, f"train-{label}") as out:
        ds = read_dataset(dataset)
        mcfg = cfg.model_config(ds, spec)
        history = LossHistory()
        if resume:
            model = load_checkpoint(resume, mcfg)
            loss_csv = Path(resume).with_suffix(".loss.csv")
            if loss_csv.exists():
                history = LossHistory.from_csv(loss_csv.read_text())
        else:
            model = build_model(mcfg, seed=cfg.seed)
        start = history.epoch[-1] + 1 if history.epoch else 0
        model, new = train(model, ds, cfg.train_config(), start_epoch=start)
        history.extend(new)
        ckpt = out / f"{label}.ppck"
        save_checkpoint(model, ckpt, {"epochs_done": len(history.epoch), "dataset": str(dataset)})
        _write_text(ckpt.with_suffix(".loss.csv"), history.to_csv())
        print(f"{ckpt}: {model.n_trainable()} trainable weights, "
              f"final train mse {history.train_mse[-1]:.6e}")
        return ckpt


def _emit_report(out: Path, stem: str, reports: list[RolloutReport], title: str) -> None:
    _write_text(out / f"{stem}.csv", reports_to_csv(reports))
    _write_text(out / f"{stem}.svg", svg_chart(reports, title))
    for rep in reports:
        s = rep.stats
        div = [d for d in rep.diverged_at if d is not None]
        print(f"{rep.label:>14s}  eps@{rep.steps[-1]} = {s.mean[-1]:.4e}  "
              f"alive {int(s.n_alive[-1])}/{len(rep.diverged_at)}"
              + (f"  first divergence at step {min(div)}" if div else ""))


def cmd_compare(cfg: RunConfig, checkpoints: Sequence[str], dataset: str,
                train_horizon: int | None = None) -> Path:
    with _run_dir(cfg, "compare") as out:
        ds = read_dataset(dataset)
        models = [load_checkpoint(c) for c in checkpoints]
        horizon = cfg.n_snapshots - 1 if train_horizon is None else train_horizon
        mode = ds.meta.get("param_mode", "interpolation")
        reports = compare(models, ds, cfg.rollout_steps, horizon, mode)
        _emit_report(out, "report", reports, f"{cfg.system}: relative error per step")
        return out / "report.csv"


def cmd_coarse(cfg: RunConfig, dataset: str) -> Path:
    with _run_dir(cfg, "coarse") as out:
        ds = read_dataset(dataset)
        solver = CoarseSolver(cfg.model_config(ds, "full"))
        mode = ds.meta.get("param_mode", "interpolation")
        reports = compare([solver], ds, cfg.rollout_steps, cfg.n_snapshots - 1, mode)
        _emit_report(out, "coarse_report", reports, f"{cfg.system}: coarse solver")
        return out / "coarse_report.csv"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ppnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("gen-data", help="simulate a reference dataset")
    common(p)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p = sub.add_parser("train", help="train a next-step model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--model", choices=sorted(MODEL_KINDS),
                   help="model kind; defaults to the config's pde_spec")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("compare", help="roll out checkpoints and score them")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--train-horizon", type=int)
    p = sub.add_parser("coarse", help="score the coarse solver on its own")
    common(p)
    p.add_argument("--dataset", required=True)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "out": args.out})
        if args.command == "gen-data":
            cmd_gen_data(cfg, args.split)
        elif args.command == "train":
            cmd_train(cfg, args.dataset, args.model, args.resume)
        elif args.command == "compare":
            cmd_compare(cfg, args.checkpoints, args.dataset, args.train_horizon)
        else:
            cmd_coarse(cfg, args.dataset)
    except (TrainingDivergedError, DivergenceError) as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FormatError, OSError) as exc:
        code = getattr(exc, "code", "io")
        print(f"error [{code}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
