import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from euvptycho.errors import GeometryError, InvalidArgumentError, PreprocessingError
from euvptycho.field import make_grid
from euvptycho.simulator import nudft_oracle
from euvptycho.tilt import (
    TiltGeometry,
    build_tilt_map,
    detector_frequencies,
    preprocess_frames,
    resample_adjoint,
    resample_mask,
    resample_pattern,
    shift_frames,
    threshold_mask,
    zeroth_order_center,
)

DET = make_grid(64, 48, 15e-6, 15e-6)


def test_zero_tilt_is_identity(rng):
    m = build_tilt_map(TiltGeometry(0.0, 0.088, DET))
    assert m.out_grid.shape == DET.shape and np.all(m.weights == 1) and np.all(m.inside)
    I = rng.random(DET.shape)
    out, mask = resample_pattern(I, m)
    assert np.max(np.abs(out - I)) < 1e-12 and mask.all()
    c, _ = resample_pattern(np.full(DET.shape, 3.0), m)
    assert np.allclose(c, 3.0)


def test_output_pitch_scales_with_cos():
    det = make_grid(256, 256, 15e-6, 15e-6)
    m = build_tilt_map(TiltGeometry(np.deg2rad(70), 0.088, det))
    assert m.out_grid.px == pytest.approx(15e-6 * np.cos(np.deg2rad(70)), rel=1e-12)
    assert m.out_grid.px == pytest.approx(5.13e-6, abs=0.01e-6)
    assert m.out_grid.py == 15e-6
    # extent and pitch along the tilt both shrink by about cos(theta), so the
    # pixel count stays close to the camera's
    assert det.nx <= m.out_grid.nx <= 1.1 * det.nx and m.out_grid.ny == det.ny
    rows = build_tilt_map(TiltGeometry(np.deg2rad(70), 0.088, det, tilt_axis=0))
    assert rows.out_grid.py == pytest.approx(m.out_grid.px) and rows.out_grid.shape == m.out_grid.shape[::-1]


def test_in_bounds_fraction_decreases_with_angle():
    out_shape = (64, 160)
    fractions = [build_tilt_map(TiltGeometry(np.deg2rad(a), 0.088, DET, out_shape=out_shape,
                                             out_pitch=(15e-6, 15e-6 * np.cos(np.deg2rad(70))))).inside.mean()
                 for a in (0, 30, 60, 70)]
    assert all(a > b for a, b in zip(fractions, fractions[1:]))


def test_matches_untilted_pattern_nudft():
    rng = np.random.default_rng(1)
    lam, L = 13.5e-9, 0.088
    det = make_grid(96, 96, 15e-6, 15e-6)
    fmax = 48 * 15e-6 / (lam * L)
    dx = 1.35 / fmax
    og = make_grid(16, 16, dx, dx)
    obj = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    geom = TiltGeometry(np.deg2rad(70), L, det)
    ft, fo = detector_frequencies(geom, lam)
    # counts per camera pixel carry the frequency-area Jacobian of that pixel
    jac = np.abs(np.gradient(ft, axis=1) * np.gradient(fo, axis=0) - np.gradient(ft, axis=0) * np.gradient(fo, axis=1))
    tilted = np.abs(nudft_oracle(obj, og, np.stack([fo, ft], -1))) ** 2 * jac
    m = build_tilt_map(geom)
    out, mask = resample_pattern(tilted, m)
    Yt, Xt = np.meshgrid(m.out_grid.y, m.out_grid.x, indexing="ij")
    R = np.sqrt(Xt**2 + Yt**2 + L**2)
    ref = np.abs(nudft_oracle(obj, og, np.stack([Yt / R / lam, Xt / R / lam], -1))) ** 2
    a, b = out[mask], ref[mask]
    assert a @ b / np.linalg.norm(a) / np.linalg.norm(b) >= 0.99


def test_energy_is_conserved_for_smooth_input():
    geom = TiltGeometry(np.deg2rad(40), 0.088, DET)
    y, x = np.meshgrid(np.arange(48) - 24, np.arange(64) - 32, indexing="ij")
    I = np.exp(-(x**2 + y**2) / (2 * 6.0**2))
    out, _ = resample_pattern(I, build_tilt_map(geom))
    assert out.sum() == pytest.approx(I.sum(), rel=0.01)


@given(st.integers(0, 2**31), st.floats(0.0, 1.3))
def test_resample_adjoint(seed, theta):
    rng = np.random.default_rng(seed)
    det = make_grid(12, 10, 15e-6, 15e-6)
    m = build_tilt_map(TiltGeometry(theta, 0.02, det))
    x = rng.random(det.shape)
    y = rng.random(m.out_grid.shape)
    lhs = np.sum(resample_pattern(x, m)[0] * y)
    rhs = np.sum(x * resample_adjoint(y, m))
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), 1.0)


def test_geometry_errors():
    with pytest.raises(GeometryError):
        TiltGeometry(np.pi / 2, 0.088, DET)
    with pytest.raises(GeometryError):
        TiltGeometry(-0.1, 0.088, DET)
    with pytest.raises(GeometryError):
        TiltGeometry(0.1, 0.0, DET)
    m = build_tilt_map(TiltGeometry(0.2, 0.088, DET))
    with pytest.raises(InvalidArgumentError):
        resample_pattern(np.zeros((3, 3)), m)


def test_thresholds():
    raw = np.array([[65535.0, 100.0, 5.0, 4.0]])
    dark = np.array([[1.0, 1.0, 0.0, 0.0]])
    corrected = np.maximum(raw - dark, 0)
    assert threshold_mask(raw, corrected).tolist() == [[False, True, True, False]]


def _spot_stack(offset, K=3, shape=(48, 48)):
    y, x = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    cy, cx = shape[0] // 2 + offset[0], shape[1] // 2 + offset[1]
    spot = 5000 * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / 4.0) + 10.0
    return np.repeat(spot[None], K, axis=0)


def test_zeroth_order_centering():
    raw = _spot_stack((7, -3))
    assert zeroth_order_center(raw) == pytest.approx((24 + 7, 24 - 3), abs=1e-9)
    det = make_grid(48, 48, 15e-6, 15e-6)
    ds = preprocess_frames(raw, np.zeros((48, 48)), TiltGeometry(0.0, 0.05, det), [13.5e-9], np.zeros((3, 2)))
    assert ds.metadata["centering_shift"] == [-7, 3]
    assert np.unravel_index(np.argmax(ds.patterns[0]), (48, 48)) == (24, 24)
    with pytest.raises(PreprocessingError):
        zeroth_order_center(np.zeros((2, 8, 8)))


def test_dark_equal_raw_masks_everything():
    det = make_grid(16, 16, 15e-6, 15e-6)
    raw = np.full((2, 16, 16), 100.0)
    ds = preprocess_frames(raw, raw[0], TiltGeometry(0.0, 0.05, det), [13.5e-9], np.zeros((2, 2)), center=False)
    assert np.all(ds.patterns == 0) and not ds.masks.any()


def test_saturated_pixel_masked_in_its_frame():
    raw = _spot_stack((0, 0))
    raw[1, 5, 5] = 65535.0
    det = make_grid(48, 48, 15e-6, 15e-6)
    ds = preprocess_frames(raw, np.zeros((48, 48)), TiltGeometry(0.0, 0.05, det), [13.5e-9], np.zeros((3, 2)))
    assert not ds.masks[1, 5, 5] and ds.masks[0, 5, 5] and ds.masks[2, 5, 5]


def test_masks_idempotent():
    m = build_tilt_map(TiltGeometry(0.0, 0.05, DET))
    mask = np.random.default_rng(0).random(DET.shape) > 0.2
    once = resample_mask(mask, m)
    assert np.array_equal(resample_mask(once, m), once)


def test_shift_frames():
    a = np.arange(16).reshape(4, 4)
    s = shift_frames(a, (1, -2), fill=-1)
    assert s[1, 0] == a[0, 2] and s[0].tolist() == [-1] * 4 and s[1, 3] == -1
    assert np.array_equal(shift_frames(s, (0, 0)), s)
