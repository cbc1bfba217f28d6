"""Coarse solver alone at several resolutions against a trained PPNN checkpoint.

    python scripts/coarse_contrast.py runs/burgers/test.ppds runs/burgers/ppnn.ppck --grids 16,8

Prints the mean error at a few steps, the first divergence step (if any) and
the smallest coarse/PPNN error ratio over the steps where both are finite.
"""
from __future__ import annotations

import argparse
import dataclasses

import numpy as np

from ppnn.datagen import read_dataset
from ppnn.field import Grid2D
from ppnn.model import load_checkpoint
from ppnn.rollout import CoarseSolver, compare


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("dataset")
    ap.add_argument("checkpoint")
    ap.add_argument("--grids", default="16,8", help="comma list of coarse grid sizes")
    ap.add_argument("--steps", type=int, default=None)
    args = ap.parse_args(argv)

    ds = read_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    solvers = []
    for n in (int(v) for v in args.grids.split(",")):
        cfg = dataclasses.replace(model.cfg, coarse_grid=Grid2D(n, n, ds.grid.lx, ds.grid.ly))
        s = CoarseSolver(cfg)
        s.label = f"coarse{n}"
        solvers.append(s)
    reports = compare([model, *solvers], ds, args.steps)
    ref = reports[0].stats.mean
    marks = [k for k in (1, 10, 50, 100) if k <= len(ref)]
    for rep in reports:
        m = rep.stats.mean
        div = [d for d in rep.diverged_at if d is not None]
        ok = np.isfinite(m) & np.isfinite(ref)
        ratio = (m[ok] / ref[ok]).min() if ok.any() else float("nan")
        print(f"{rep.label:10s} " + " ".join(f"eps@{k} {m[k - 1]:.3e}" for k in marks)
              + f"  min ratio {ratio:.2f}" + (f"  diverged at {min(div)}" if div else ""))


if __name__ == "__main__":
    main()
