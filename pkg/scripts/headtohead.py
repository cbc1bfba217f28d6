"""Train a PPNN and a black-box network on one desk system and compare their rollouts.

    python scripts/headtohead.py burgers --hidden 16 --epochs 20 --out runs/burgers
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import time
from pathlib import Path

import numpy as np

from ppnn.datagen import DataConfig, evenly_spaced, generate_dataset, read_dataset, \
    sample_test_params, write_dataset
from ppnn.field import Grid2D
from ppnn.model import ModelConfig, build_model
from ppnn.rollout import CoarseSolver, compare, reports_to_csv
from ppnn.train import TrainConfig, train

DESK = {
    "rd": dict(data=DataConfig(system="rd", length=6.4, dt_num=8e-5, steps_per_snapshot=200,
                               burn_in=2000), lo=0.6, hi=1.3),
    "burgers": dict(data=DataConfig(system="burgers", length=3.2, dt_num=1e-4,
                                    steps_per_snapshot=200, burn_in=0), lo=0.02, hi=0.07),
}


def datasets(system: str, out: Path, n_test: int = 8, test_steps: int = 100):
    d = DESK[system]
    train_cfg = dataclasses.replace(d["data"], n_snapshots=51,
                                    param_values=evenly_spaced(d["lo"], d["hi"], 4))
    test_cfg = dataclasses.replace(train_cfg, n_snapshots=test_steps + 1, seed=train_cfg.seed + 1000)
    out.mkdir(parents=True, exist_ok=True)
    sets = []
    for name, cfg, params, per in (("train", train_cfg, None, None),
                                   ("test", test_cfg, sample_test_params(
                                       d["lo"], d["hi"], n_test, seed=7,
                                       exclude=train_cfg.param_values), 1)):
        path = out / f"{name}.ppds"
        if path.exists():
            sets.append(read_dataset(path))
            continue
        t0 = time.perf_counter()
        ds = generate_dataset(cfg, params, per)
        write_dataset(ds, path)
        logging.info("%s set: %.1fs", name, time.perf_counter() - t0)
        sets.append(ds)
    return sets


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("system", choices=sorted(DESK))
    ap.add_argument("--hidden", type=int, default=16)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--batch", type=int, default=16)
    ap.add_argument("--dec-scale", type=float, default=0.01, help="decoder init scale")
    ap.add_argument("--models", default="ppnn,blackbox", help="comma list of ppnn, blackbox, ppnn-partial")
    ap.add_argument("--out", type=Path, default=Path("runs"))
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    train_ds, test_ds = datasets(args.system, args.out)
    fine = train_ds.grid
    coarse = Grid2D.square(fine.nx // 4, fine.lx)
    base = ModelConfig(fine, coarse, train_ds.dt_learn, hidden_channels=args.hidden,
                       decoder_init_scale=args.dec_scale)
    systems = {"ppnn": args.system, "blackbox": None, "ppnn-partial": "rd_diffusion"}
    variants = {name: dataclasses.replace(base, pde_system=systems[name])
                for name in args.models.split(",")}
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=0)
    steppers = [CoarseSolver(dataclasses.replace(base, pde_system=args.system))]
    for name, cfg in variants.items():
        t0 = time.perf_counter()
        model, hist = train(build_model(cfg, seed=0), train_ds, tcfg)
        logging.info("%s trained in %.0fs, final mse %.3e", name, time.perf_counter() - t0,
                     hist.train_mse[-1])
        steppers.append(model)
    reports = compare(steppers, test_ds, train_horizon=train_ds.n_snapshots - 1)
    (args.out / "report.csv").write_text(reports_to_csv(reports))
    for rep in reports:
        s = rep.stats
        print(f"{rep.label:14s} eps@1 {s.mean[0]:.3e} eps@10 {s.mean[9]:.3e} "
              f"eps@50 {s.mean[49]:.3e} eps@100 {s.mean[-1]:.3e} alive {s.n_alive[-1]}")


if __name__ == "__main__":
    main()
