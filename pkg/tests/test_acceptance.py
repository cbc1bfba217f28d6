"""Acceptance checks AC-1 .. AC-10.

Each test records one PASS/FAIL line (shown in the "acceptance criteria"
section of the pytest summary) and then asserts it. The head-to-head checks
train real models through the command-line pipeline and take several minutes
each on one core; they are marked ``slow``.
"""
import csv
import hashlib
import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from ppnn import autodiff as ad
from ppnn.cli import main
from ppnn.datagen import (BadMagicError, DimensionError, FormatError, TruncatedFileError,
                          VersionMismatchError, decode_dataset, encode_dataset, generate_dataset,
                          generate_trajectory, read_dataset, write_dataset, DataConfig)
from ppnn.field import Field, Grid2D
from ppnn.model import (FingerprintMismatchError, MissingTensorError, ModelConfig, NextStepModel,
                        decode_checkpoint, encode_checkpoint, init_weights, load_checkpoint,
                        save_checkpoint, zero_trainable)
from ppnn.physics import RdDiffusionOnly
from ppnn.rollout import CoarseSolver, epsilon_t, relative_errors, rollout_batch
from ppnn.stencil import (first_derivative_upwind3, laplacian, second_derivative_stencil,
                          upwind_convection)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def timed(fn, *args):
    t0 = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t0


# --- AC-1 -----------------------------------------------------------------------------

def moment_defect(taps, offsets, d, degree):
    """Worst relative defect of sum_k t_k o_k^j against j! [j == d] for j <= degree."""
    worst = 0.0
    for j in range(degree + 1):
        terms = [t * o ** j for t, o in zip(taps, offsets)]
        want = math.factorial(d) if j == d else 0.0
        worst = max(worst, abs(sum(terms) - want) / max(1.0, sum(abs(x) for x in terms)))
    return worst


def measured_order(err, n=32):
    return math.log2(err(n) / err(2 * n))


def test_ac1_stencil_exactness(verdict):
    t0 = time.perf_counter()
    checks = []
    for s, degree in ((second_derivative_stencil(6), 7), (second_derivative_stencil(2), 3),
                      (first_derivative_upwind3(flow_sign="+"), 3),
                      (first_derivative_upwind3(flow_sign="-"), 3)):
        offsets = range(s.start, s.start + len(s.taps))
        checks.append(moment_defect(s.taps, offsets, s.derivative_order, degree))
    worst = max(checks)

    def lap_err(order):
        def err(n):
            g = Grid2D.square(n, 2 * np.pi)
            x, y = g.coords()
            u = np.sin(3 * x) * np.sin(2 * y)
            return np.max(np.abs(laplacian(Field(g, u[None]), order).data[0] + 13 * u))
        return err

    def upwind_err(n):
        g = Grid2D.square(n, 2 * np.pi)
        x, _ = g.coords()
        vel = Field(g, np.stack([np.ones_like(x), np.zeros_like(x)]))
        return np.max(np.abs(upwind_convection(vel, Field(g, np.sin(x)[None])).data[0] - np.cos(x)))

    orders = {"lap6": (measured_order(lap_err(6)), 6), "lap2": (measured_order(lap_err(2)), 2),
              "upwind3": (measured_order(upwind_err), 3)}
    elapsed = time.perf_counter() - t0
    ok = (worst <= 1e-9 and all(abs(m - n) <= 0.5 for m, n in orders.values()) and elapsed < 10)
    detail = (f"max moment defect {worst:.1e}; orders "
              + ", ".join(f"{k} {m:.2f}" for k, (m, _) in orders.items()) + f"; {elapsed:.1f}s")
    assert verdict("AC-1", ok, detail)


# --- AC-2 -----------------------------------------------------------------------------

def test_ac2_diffusion_mode_decay(verdict):
    t0 = time.perf_counter()
    g = Grid2D.square(64, 6.4)
    x, y = g.coords()
    k = 2 * np.pi / 6.4 * np.array([1.0, 1.0])
    mode = np.sin(k[0] * x + k[1] * y)
    gamma, dt_num, per = 1.0, 8e-5, 200
    tr = generate_trajectory(RdDiffusionOnly(gamma), Field(g, np.stack([mode, -0.5 * mode])),
                             dt_num, per, 101)
    t = 100 * per * dt_num
    exact = np.exp(-gamma * (k @ k) * t) * np.stack([mode, -0.5 * mode])
    rel = np.linalg.norm(tr.snapshots[100] - exact) / np.linalg.norm(exact)
    elapsed = time.perf_counter() - t0
    ok = rel <= 1e-3 and elapsed < 30
    assert verdict("AC-2", ok, f"relative error {rel:.2e} after 100 steps (t={t:g}); {elapsed:.1f}s")


# --- AC-3 -----------------------------------------------------------------------------

def _op_cases(rng):
    x4 = rng.standard_normal((2, 2, 8, 8))
    relu_in = rng.standard_normal((2, 3, 4, 4))
    relu_in[np.abs(relu_in) < 1e-3] = 0.5
    return {
        "conv2d": (lambda x, w, b: ad.conv2d(x, w, b, 2, 2),
                   [x4, rng.standard_normal((3, 2, 6, 6)), rng.standard_normal(3)]),
        "conv2d_periodic": (lambda x, w, b: ad.conv2d(x, w, b, 1, "periodic"),
                            [x4, rng.standard_normal((3, 2, 5, 5)), rng.standard_normal(3)]),
        "relu": (ad.relu, [relu_in]),
        "layer_norm": (lambda x, gn, bn: ad.layer_norm(x, gn, bn),
                       [rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((3, 1, 1)),
                        rng.standard_normal((3, 1, 1))]),
        "pixel_shuffle": (lambda x: ad.pixel_shuffle(x, 2), [rng.standard_normal((2, 8, 3, 3))]),
        "rank1_param_map": (ad.rank1_param_map, [rng.standard_normal(2), rng.standard_normal((4, 1)),
                                                 rng.standard_normal((1, 6))]),
        "concat": (lambda a, b: ad.concat_channels([a, b]),
                   [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 3, 3))]),
        "add": (ad.add, [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 1))]),
        "scale": (lambda a: ad.scale(a, -1.7), [rng.standard_normal((2, 3))]),
        "mse": (ad.mse_loss, [rng.standard_normal((2, 5)), rng.standard_normal((2, 5))]),
    }


def _ppnn_case(seed):
    from test_model import relu_margin  # shared helper, keeps away from ReLU kinks
    g, c = Grid2D.square(16, 1.6), Grid2D.square(8, 1.6)
    m = NextStepModel(ModelConfig(g, c, 0.01, "rd", hidden_channels=16, n_resblocks=1),
                      seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    p = np.array([[0.5], [0.9]])
    while True:
        u = rng.random((2, 2, 16, 16))
        feat = m.pde_increment(u, p)
        if relu_margin(m, u, p, feat) > 1e-4:
            break
    names = ["param0.col", "param0.row", "enc0.w", "enc1.b", "res0.w", "res0.ln_g", "res0.ln_b", "dec.w"]

    def fn(*ws):
        for n, w in zip(names, ws):
            m.params[n] = w
        return m.predict_increment(u, p, feat)
    return fn, [m.params[n].data for n in names]


def test_ac3_gradient_suite(verdict):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in range(20):
        cases = _op_cases(np.random.default_rng(seed))
        cases["ppnn_forward"] = _ppnn_case(seed)
        for name, (fn, ins) in cases.items():
            r = ad.gradcheck(fn, ins, seed=seed, max_coords=12 if name == "ppnn_forward" else None)
            worst[name] = max(worst.get(name, 0.0), r.max_rel_error)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) <= 1e-5 and elapsed < 120
    assert verdict("AC-3", ok, f"{len(worst)} ops x 20 seeds, worst {top} {worst[top]:.1e}; "
                               f"{elapsed:.0f}s")


# --- shared head-to-head pipelines ----------------------------------------------------

def pipeline(cfg: Path, out: Path, models: tuple[str, ...]) -> dict:
    """gen-data (train, test) -> train each model -> compare, timing every stage."""
    def run(*args):
        code = main([args[0], "--config", str(cfg), "--out", str(out), *args[1:]])
        assert code == 0, f"ppnn {' '.join(args)} exited with {code}"

    times = {}
    _, times["data"] = timed(lambda: (run("gen-data", "--split", "train"),
                                      run("gen-data", "--split", "test")))
    for m in models:
        _, times[m] = timed(run, "train", "--dataset", str(out / "train.ppds"), "--model", m)
    ckpts = [str(out / f"{m}.ppck") for m in models]
    _, times["compare"] = timed(run, "compare", "--dataset", str(out / "test.ppds"),
                                "--checkpoints", *ckpts)
    rows = list(csv.DictReader((out / "report.csv").open()))
    curves = {m: np.array([float(r["eps_mean"]) for r in rows if r["model"] == m]) for m in models}
    return {"out": out, "times": times, "curves": curves}


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="session")
def burgers_run(tmp_path_factory):
    return pipeline(CONFIGS / "burgers_desk.cfg", tmp_path_factory.mktemp("burgers"),
                    ("ppnn", "blackbox"))


@pytest.fixture(scope="session")
def rd_run(tmp_path_factory):
    return pipeline(CONFIGS / "rd_desk.cfg", tmp_path_factory.mktemp("rd"),
                    ("ppnn", "blackbox", "ppnn-partial"))


def _budget(run, models):
    t = run["times"]
    return t["data"] + t["compare"] + sum(t[m] for m in models)


# --- AC-4 .. AC-7 ---------------------------------------------------------------------

@pytest.mark.slow
def test_ac4_burgers_head_to_head(verdict, burgers_run):
    pp, bb = burgers_run["curves"]["ppnn"], burgers_run["curves"]["blackbox"]
    late = np.arange(50, len(pp))  # steps 51..100
    never_above = bool(np.all(pp[late] <= bb[late]))
    ratio = pp[99] / bb[99]
    elapsed = _budget(burgers_run, ("ppnn", "blackbox"))
    ok = ratio <= 0.5 and never_above and elapsed < 900
    assert verdict("AC-4", ok, f"eps@100 ppnn {pp[99]:.3e} vs blackbox {bb[99]:.3e} (ratio {ratio:.3f}); "
                               f"ppnn <= blackbox after step 50: {never_above}; {elapsed:.0f}s")


@pytest.mark.slow
def test_ac5_rd_head_to_head(verdict, rd_run):
    pp, bb = rd_run["curves"]["ppnn"], rd_run["curves"]["blackbox"]
    elapsed = _budget(rd_run, ("ppnn", "blackbox"))
    ok = pp[99] < bb[99] and pp[99] < 0.1 and elapsed < 900
    assert verdict("AC-5", ok, f"eps@2T ppnn {pp[99]:.3e} vs blackbox {bb[99]:.3e}; {elapsed:.0f}s")


@pytest.mark.slow
def test_ac6_partial_physics(verdict, rd_run):
    part, bb = rd_run["curves"]["ppnn-partial"], rd_run["curves"]["blackbox"]
    elapsed = _budget(rd_run, ("ppnn-partial", "blackbox"))
    ok = part[99] < bb[99] and elapsed < 900
    assert verdict("AC-6", ok, f"eps@2T ppnn-partial {part[99]:.4e} vs blackbox {bb[99]:.4e}; "
                               f"{elapsed:.0f}s")


@pytest.mark.slow
def test_ac7_coarse_solver_contrast(verdict, burgers_run, tmp_path):
    t0 = time.perf_counter()
    out = burgers_run["out"]
    test = read_dataset(out / "test.ppds")
    model = load_checkpoint(out / "ppnn.ppck")
    zero_trainable(model)
    u0 = np.stack([tr.snapshots[0] for tr in test.trajectories]).astype(np.float64)
    a, _ = rollout_batch(model, u0, test.params_array(), 100)
    b, _ = rollout_batch(CoarseSolver(model.cfg), u0, test.params_array(), 100)
    bitwise = a.tobytes() == b.tobytes()

    # the physics branch alone on a grid twice as coarse as the PPNN's
    cfg = tmp_path / "under.cfg"
    cfg.write_text((CONFIGS / "burgers_desk.cfg").read_text().replace("n_coarse = 16", "n_coarse = 8"))
    assert main(["coarse", "--config", str(cfg), "--out", str(tmp_path), "--dataset",
                 str(out / "test.ppds")]) == 0
    rows = list(csv.DictReader((tmp_path / "coarse_report.csv").open()))
    coarse = np.array([float(r["eps_mean"]) for r in rows])
    alive = np.array([int(r["n_alive"]) for r in rows])
    pp = burgers_run["curves"]["ppnn"]
    diverged = np.flatnonzero(alive < len(test))
    finite = np.isfinite(coarse)
    ratio = coarse[finite] / pp[finite]
    contrast = diverged.size > 0 or bool(np.all(ratio >= 5))
    elapsed = time.perf_counter() - t0
    how = (f"diverged at step {diverged[0] + 1}" if diverged.size
           else f"min coarse/ppnn ratio {ratio.min():.2f} over {finite.sum()} steps")
    ok = bitwise and contrast and elapsed < 300
    assert verdict("AC-7", ok, f"zeroed PPNN == coarse solver bitwise: {bitwise}; 8x8 coarse {how}; "
                               f"{elapsed:.0f}s")


# --- AC-8, AC-9 -----------------------------------------------------------------------

def test_ac8_metric(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    refs = rng.standard_normal((4, 6, 2, 8, 8))
    preds = refs + 0.1 * rng.standard_normal(refs.shape)
    zero = epsilon_t(relative_errors(refs, refs)).mean
    one = epsilon_t(relative_errors(np.zeros_like(refs), refs)).mean
    base = relative_errors(preds, refs)
    scaled = relative_errors(4.0 * preds, 4.0 * refs)  # power-of-two scaling is exact
    pair = epsilon_t(np.array([[0.1], [0.3]]))
    ok = (np.all(zero == 0) and np.all(one == 1) and np.array_equal(base, scaled)
          and abs(pair.mean[0] - 0.2) < 1e-15 and time.perf_counter() - t0 < 1)
    assert verdict("AC-8", ok, "eps(perfect)=0, eps(zero)=1, joint scaling invariant, mean(0.1, 0.3)=0.2")


def _raises_code(fn, exc, code):
    try:
        fn()
    except exc as e:
        return getattr(e, "code", None) == code
    except Exception:
        return False
    return False


def test_ac9_formats(verdict, tmp_path):
    t0 = time.perf_counter()
    ds = generate_dataset(DataConfig(system="burgers", n_fine=16, length=3.2, dt_num=1e-4,
                                     steps_per_snapshot=5, n_snapshots=3, burn_in=0,
                                     param_values=(0.03, 0.05), ics_per_param=1))
    write_dataset(ds, tmp_path / "d.ppds")
    back = read_dataset(tmp_path / "d.ppds")
    ds_ok = (encode_dataset(back) == encode_dataset(ds)
             and all(np.array_equal(a.snapshots, b.snapshots) and a.params == b.params
                     for a, b in zip(ds.trajectories, back.trajectories)))
    buf = encode_dataset(ds)
    ds_codes = [
        _raises_code(lambda: decode_dataset(b"XXXX" + buf[4:]), BadMagicError, "bad-magic"),
        _raises_code(lambda: decode_dataset(buf[:4] + struct.pack("<I", 7) + buf[8:]),
                     VersionMismatchError, "version-mismatch"),
        _raises_code(lambda: decode_dataset(buf[:-3]), TruncatedFileError, "truncated"),
        _raises_code(lambda: decode_dataset(buf + b"\0"), DimensionError, "dimension-mismatch"),
    ]
    mc = ModelConfig(Grid2D.square(16, 3.2), Grid2D.square(8, 3.2), ds.dt_learn, "burgers",
                     hidden_channels=16, n_resblocks=1)
    m = NextStepModel(mc, seed=4)
    save_checkpoint(m, tmp_path / "m.ppck")
    loaded = load_checkpoint(tmp_path / "m.ppck")
    ck_ok = all(loaded.params[k].data.tobytes() == t.data.tobytes() for k, t in m.params.items())
    cb = encode_checkpoint(mc, init_weights(mc, 0))
    partial = init_weights(mc, 0)
    del partial["dec.w"]
    other = ModelConfig(mc.fine_grid, mc.coarse_grid, mc.dt_learn, None, hidden_channels=16,
                        n_resblocks=1)
    ck_codes = [
        _raises_code(lambda: decode_checkpoint(b"NOPE" + cb[4:], mc), BadMagicError, "bad-magic"),
        _raises_code(lambda: decode_checkpoint(cb[:4] + struct.pack("<I", 7) + cb[8:], mc),
                     VersionMismatchError, "version-mismatch"),
        _raises_code(lambda: decode_checkpoint(cb[:-5], mc), TruncatedFileError, "truncated"),
        _raises_code(lambda: decode_checkpoint(cb, other), FingerprintMismatchError,
                     "fingerprint-mismatch"),
        _raises_code(lambda: decode_checkpoint(encode_checkpoint(mc, partial), mc),
                     MissingTensorError, "missing-tensor"),
    ]
    elapsed = time.perf_counter() - t0
    n_ok = sum(ds_codes) + sum(ck_codes)
    ok = ds_ok and ck_ok and n_ok == len(ds_codes) + len(ck_codes) and elapsed < 5
    assert verdict("AC-9", ok, f"roundtrips bitwise: dataset {ds_ok}, checkpoint {ck_ok}; "
                               f"{n_ok}/{len(ds_codes) + len(ck_codes)} corruptions rejected "
                               f"with the right code; {elapsed:.1f}s")
    assert issubclass(BadMagicError, FormatError)


# --- AC-10 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_ac10_pipeline_determinism(verdict, burgers_run, tmp_path_factory):
    again = pipeline(CONFIGS / "burgers_desk.cfg", tmp_path_factory.mktemp("burgers_again"),
                     ("ppnn", "blackbox"))
    names = ("train.ppds", "test.ppds", "ppnn.ppck", "blackbox.ppck", "ppnn.loss.csv",
             "blackbox.loss.csv", "report.csv")
    same = [n for n in names if sha(again["out"] / n) == sha(burgers_run["out"] / n)]
    elapsed = _budget(burgers_run, ("ppnn", "blackbox")) + _budget(again, ("ppnn", "blackbox"))
    ok = len(same) == len(names)
    assert verdict("AC-10", ok, f"{len(same)}/{len(names)} outputs bitwise identical across two "
                                f"full runs; {elapsed:.0f}s total")
