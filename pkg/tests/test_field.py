import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ppnn.field import (DivergenceError, Field, Grid2D, ParamVector, constant_field,
                        downsample_bilinear, interp_matrix, l2_norm, linear_rescale,
                        upsample_bicubic)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid2D(3, 8, 1.0, 1.0)
    with pytest.raises(ValueError):
        Grid2D(8, 8, 0.0, 1.0)
    g = Grid2D(8, 4, 2.0, 1.0)
    assert g.shape == (4, 8) and g.dx == 0.25 and g.dy == 0.25
    assert g.dx * g.nx == g.lx


def test_coords_omit_duplicated_periodic_point():
    x, y = Grid2D.square(8, 1.0).coords()
    assert x[0, 0] == 0.0 and x[0, -1] == pytest.approx(7 / 8)


def test_constant_field_examples():
    z = constant_field(Grid2D.square(4, 1.0), 2, 0.0)
    assert not z.data.any()
    assert np.all(constant_field(Grid2D.square(4, 1.0), 1, 7.0).data == 7.0)
    ones = constant_field(Grid2D.square(64, 1.0), 2, 1.0)
    assert l2_norm(ones) == pytest.approx(math.sqrt(2 * 64 * 64))
    assert l2_norm(ones) == pytest.approx(90.51, abs=5e-3)


def test_l2_norm_examples():
    g = Grid2D.square(4, 1.0)
    assert l2_norm(constant_field(g, 1, 0.0)) == 0.0
    d = np.zeros((1, 4, 4))
    d[0, 1, 2] = 3.0
    assert l2_norm(Field(g, d)) == 3.0
    assert l2_norm(np.ones((1, 2, 2))) == 2.0


def test_non_finite_field_rejected_unless_flagged():
    g = Grid2D.square(4, 1.0)
    bad = np.full((1, 4, 4), np.nan)
    with pytest.raises(DivergenceError):
        Field(g, bad)
    f = Field(g, bad, diverged=True)
    with pytest.raises(DivergenceError):
        l2_norm(f)


def test_field_is_immutable():
    f = constant_field(Grid2D.square(4, 1.0), 1, 1.0)
    with pytest.raises(ValueError):
        f.data[0, 0, 0] = 2.0


def test_param_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        ParamVector(("gamma",), (float("inf"),))


def test_linear_rescale_examples():
    g = Grid2D(4, 4, 1.0, 1.0)
    d = np.zeros((1, 4, 4))
    d[0, 0, 0], d[0, 0, 1], d[0, 0, 2] = -2.0, 3.0, 0.5
    r = linear_rescale(Field(g, d)).data
    assert r[0, 0, 0] == 0.1 and r[0, 0, 1] == 1.1
    assert r[0, 0, 2] == pytest.approx(0.6, abs=1e-15)
    with pytest.raises(ValueError):
        linear_rescale(constant_field(g, 1, 2.0))


def test_rescale_is_global_across_channels():
    g = Grid2D.square(4, 1.0)
    d = np.stack([np.full((4, 4), 0.0), np.full((4, 4), 10.0)])
    r = linear_rescale(Field(g, d)).data
    assert np.all(r[0] == 0.1) and np.all(r[1] == 1.1)


def test_standard_normal_rescaled_endpoints_exact(rng):
    g = Grid2D.square(16, 1.0)
    r = linear_rescale(Field(g, rng.standard_normal((2, 16, 16)))).data
    assert r.min() == 0.1 and r.max() == 1.1


def test_downsample_constant_and_full_scale_sizes():
    fine = Grid2D.square(256, 6.4)
    f = constant_field(fine, 2, 7.0)
    c = downsample_bilinear(f, Grid2D.square(48, 6.4))
    assert c.data.shape == (2, 48, 48)
    np.testing.assert_allclose(c.data, 7.0, rtol=0, atol=1e-13)
    up = upsample_bicubic(c, fine)
    assert up.data.shape == (2, 256, 256)
    np.testing.assert_allclose(up.data, 7.0, rtol=0, atol=1e-12)


def test_domain_mismatch_rejected():
    f = constant_field(Grid2D.square(16, 1.0), 1, 1.0)
    with pytest.raises(ValueError):
        downsample_bilinear(f, Grid2D.square(8, 2.0))
    with pytest.raises(ValueError):
        upsample_bicubic(f, Grid2D.square(32, 2.0))


def test_bilinear_reproduces_linear_function_at_interior_points():
    # a + b x + c y is only periodic-consistent away from the wrap cell
    fine, coarse = Grid2D.square(64, 6.4), Grid2D.square(24, 6.4)
    xf, yf = fine.coords()
    xc, yc = coarse.coords()
    f = Field(fine, (1.5 + 0.3 * xf - 0.7 * yf)[None])
    c = downsample_bilinear(f, coarse).data[0]
    interior = (xc < 6.4 - fine.dx) & (yc < 6.4 - fine.dy)
    np.testing.assert_allclose(c[interior], (1.5 + 0.3 * xc - 0.7 * yc)[interior], atol=1e-12)


def test_bicubic_single_mode_accuracy():
    L = 1.0
    coarse, fine = Grid2D(32, 4, L, L), Grid2D(128, 4, L, L)
    xc, _ = coarse.coords()
    xf, _ = fine.coords()
    up = upsample_bicubic(Field(coarse, np.sin(2 * np.pi * xc / L)[None]), fine).data[0]
    assert np.max(np.abs(up - np.sin(2 * np.pi * xf / L))) < 1e-2


def test_bicubic_reproduces_linear_at_interior_points():
    coarse, fine = Grid2D.square(16, 1.0), Grid2D.square(64, 1.0)
    xc, yc = coarse.coords()
    xf, yf = fine.coords()
    up = upsample_bicubic(Field(coarse, (2 * xc + yc)[None]), fine).data[0]
    mask = (xf > 2 * coarse.dx) & (xf < 1 - 3 * coarse.dx) & (yf > 2 * coarse.dy) & (yf < 1 - 3 * coarse.dy)
    np.testing.assert_allclose(up[mask], (2 * xf + yf)[mask], atol=1e-12)


@pytest.mark.parametrize("kind", ["linear", "cubic"])
@pytest.mark.parametrize("n_src,n_dst", [(64, 16), (256, 48), (16, 64), (48, 256), (10, 10)])
def test_interp_rows_partition_unity(kind, n_src, n_dst):
    m = interp_matrix(n_src, n_dst, kind)
    assert m.shape == (n_dst, n_src)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-14)


def test_identity_resampling_on_matched_grid(rng):
    g = Grid2D.square(12, 1.0)
    f = Field(g, rng.standard_normal((2, 12, 12)))
    np.testing.assert_allclose(downsample_bilinear(f, g).data, f.data, atol=1e-15)
    np.testing.assert_allclose(upsample_bicubic(f, g).data, f.data, atol=1e-15)


arrays = st.integers(0, 2**32 - 1).map(lambda s: np.random.default_rng(s).standard_normal((2, 32, 32)))
scalars = st.floats(-10, 10, allow_nan=False)


@given(arrays, arrays, scalars, scalars)
def test_resamplers_are_linear(a, b, alpha, beta):
    fine, coarse = Grid2D.square(32, 1.0), Grid2D.square(8, 1.0)
    fa, fb = Field(fine, a), Field(fine, b)
    comb = Field(fine, alpha * a + beta * b)
    d = downsample_bilinear
    np.testing.assert_allclose(d(comb, coarse).data,
                               alpha * d(fa, coarse).data + beta * d(fb, coarse).data, atol=1e-12)
    ca, cb = Field(coarse, a[:, ::4, ::4]), Field(coarse, b[:, ::4, ::4])
    ccomb = Field(coarse, alpha * a[:, ::4, ::4] + beta * b[:, ::4, ::4])
    u = upsample_bicubic
    np.testing.assert_allclose(u(ccomb, fine).data,
                               alpha * u(ca, fine).data + beta * u(cb, fine).data, atol=1e-12)


@given(arrays, st.integers(-3, 3), st.integers(-3, 3))
def test_resamplers_commute_with_whole_cell_shifts(a, sy, sx):
    fine, coarse = Grid2D.square(32, 1.0), Grid2D.square(8, 1.0)
    f = Field(fine, a)
    # a shift by one coarse cell is four fine cells
    down = downsample_bilinear(f.roll(4 * sy, 4 * sx), coarse).data
    np.testing.assert_allclose(down, downsample_bilinear(f, coarse).roll(sy, sx).data, atol=1e-12)
    c = Field(coarse, a[:, :8, :8])
    up = upsample_bicubic(c.roll(sy, sx), fine).data
    np.testing.assert_allclose(up, upsample_bicubic(c, fine).roll(4 * sy, 4 * sx).data, atol=1e-12)


@given(st.floats(-100, 100, allow_nan=False), st.sampled_from([8, 12, 20]))
def test_down_then_up_of_constant_is_identity(value, n_coarse):
    fine, coarse = Grid2D.square(40, 2.0), Grid2D.square(n_coarse, 2.0)
    f = constant_field(fine, 2, value)
    back = upsample_bicubic(downsample_bilinear(f, coarse), fine)
    np.testing.assert_allclose(back.data, value, atol=1e-12 * max(1.0, abs(value)))


@given(arrays, arrays, scalars)
def test_norm_triangle_and_homogeneity(a, b, alpha):
    assert l2_norm(a + b) <= l2_norm(a) + l2_norm(b) + 1e-12
    assert l2_norm(alpha * a) == pytest.approx(abs(alpha) * l2_norm(a), rel=1e-12, abs=1e-12)
