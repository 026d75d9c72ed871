import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from euvptycho.analysis import (
    circular_mean,
    estimate_height,
    fourier_ring_correlation,
    half_bit_threshold,
    mode_power_spectrum,
    mode_subspace_angle,
    orthogonalize_modes,
    pupil_function,
    refocus_sweep,
    remove_power_ramp,
    split_amplitude_clusters,
)
from euvptycho.errors import ClusteringError, InvalidArgumentError
from euvptycho.field import ComplexField, dft2, idft2, make_grid
from euvptycho.propagators import angular_spectrum_transfer

from conftest import crandn


def test_frc_identical_images(rng):
    a = crandn(rng, 64, 64)
    curve = fourier_ring_correlation(a, a)
    assert np.allclose(curve.correlation, 1.0) and curve.resolution is None
    assert curve.frequencies.size == 32


def test_frc_independent_noise():
    inside = []
    for seed in range(5):
        rng = np.random.default_rng(seed)
        c = fourier_ring_correlation(rng.standard_normal((128, 128)), rng.standard_normal((128, 128)))
        inside.append(np.abs(c.correlation[1:]) < 3 / np.sqrt(c.ring_pixels[1:]))
    assert np.mean(np.concatenate(inside)) >= 0.95


def test_frc_band_limited_pair(rng):
    a = rng.standard_normal((128, 128))
    k = np.arange(128) - 64
    lowpass = np.hypot(k[:, None], k[None, :]) < 30
    # a weak independent floor keeps the correlation defined above the cutoff
    b = idft2(dft2(a) * lowpass).real + 0.01 * rng.standard_normal(a.shape)
    c = fourier_ring_correlation(a, b, pitch=10e-9)
    ring = np.arange(c.frequencies.size)
    assert np.all(c.correlation[ring < 29] > 0.99)
    assert np.all(np.abs(c.correlation[ring >= 30]) < 4 / np.sqrt(c.ring_pixels[ring >= 30]))
    assert c.crossing_ring == 30 and c.resolution == pytest.approx(c.frequencies[30])


def test_frc_validation_and_threshold():
    with pytest.raises(InvalidArgumentError):
        fourier_ring_correlation(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(InvalidArgumentError):
        fourier_ring_correlation(np.zeros((4, 4)), np.zeros((4, 4)), ring_width=0.5)
    assert half_bit_threshold(1) == pytest.approx(1.0, abs=1e-4)
    assert half_bit_threshold(1e12) == pytest.approx(0.2071 / 1.2071, rel=1e-5)


def _grating(n=1024, pitch=200e-9, dx=25e-9, rows=8):
    g = make_grid(n, rows, dx, dx)
    line = (np.arange(n) * dx) % pitch < pitch / 2
    return g, np.broadcast_to(line.astype(complex), (rows, n)).copy()


def test_refocus_oscillation_period():
    # 50% fill kills the even orders, so the 1/p intensity component is
    # |cos(pi * lambda * dz / p**2)|: period p**2/lambda
    g, obj = _grating()
    lam, p = 13.5e-9, 200e-9
    _, c = refocus_sweep(obj, g, lam, dz_range=8e-6, step=20e-9)
    analytic = np.abs(np.cos(np.pi * lam * c.dz / p**2))
    assert np.corrcoef(c.strength, analytic)[0, 1] > 0.99
    s = c.strength
    minima = [i for i in range(1, s.size - 1) if s[i] < s[i - 1] and s[i] <= s[i + 1]]
    assert np.mean(np.diff(c.dz[minima])) == pytest.approx(p**2 / lam, rel=0.02)


@pytest.mark.parametrize("defocus", [0.0, 3.5e-6])
def test_refocus_finds_focus(defocus):
    lam = 13.5e-9
    g = make_grid(1024, 16, 25e-9, 25e-9)
    x = g.x
    lines = (np.abs(x) < 1.2e-6) & ((x + 1.2e-6) % 200e-9 < 100e-9)
    obj = np.broadcast_to(lines.astype(complex), g.shape)
    blurred = idft2(dft2(obj) * angular_spectrum_transfer(g, lam, defocus))
    roi = (slice(None), np.abs(x) < 1.3e-6)
    best, _ = refocus_sweep(blurred, g, lam, roi=roi)
    assert abs(best + defocus) <= 200e-9


def test_refocus_validation():
    g, obj = _grating(64)
    with pytest.raises(InvalidArgumentError):
        refocus_sweep(obj, g, 13.5e-9, dz_range=1e-6, step=0.3e-6)
    with pytest.raises(InvalidArgumentError):
        refocus_sweep(obj, g, 13.5e-9, probe_freq=1e9)
    with pytest.raises(InvalidArgumentError):
        refocus_sweep(obj[:, :10], g, 13.5e-9)


def _two_level(rng, phase_step, n=4000, noise=0.02):
    hi = 0.6 * np.exp(1j * (phase_step + noise * rng.standard_normal(n)))
    lo = 0.1 * np.exp(1j * noise * rng.standard_normal(n))
    vals = np.concatenate([hi, lo]) * (1 + noise * rng.standard_normal(2 * n))
    return vals.reshape(80, 100)


def test_height_zero(rng):
    rep = estimate_height(_two_level(rng, 0.0), 13.5e-9, 0.0, 0.0)
    assert abs(rep.phase_difference) < 5e-3 and abs(rep.height) < 0.01e-9
    assert rep.counts == (4000, 4000) and rep.structure_amplitude > rep.substrate_amplitude


def test_height_known_step(rng):
    lam, theta, h, fresnel = 17.3e-9, np.deg2rad(70), 20e-9, 1.3
    step = fresnel + 4 * np.pi * h * np.cos(theta) / lam
    obj = _two_level(rng, step)
    rep = estimate_height(obj, lam, theta, fresnel, nominal_height=20e-9)
    assert rep.height == pytest.approx(h, rel=0.02) and rep.height_error < 0.1e-9
    # a global phase moves both clusters together
    again = estimate_height(obj * np.exp(2.1j), lam, theta, fresnel, nominal_height=20e-9)
    assert again.height == pytest.approx(rep.height, abs=1e-15)


def test_height_needs_two_clusters(rng):
    with pytest.raises(ClusteringError):
        estimate_height(np.full((10, 10), 0.5 + 0j), 13.5e-9, 0.0, 0.0)
    with pytest.raises(ClusteringError):
        split_amplitude_clusters(rng.normal(1.0, 0.1, 5000))


def test_circular_mean():
    phi, r = circular_mean(np.exp(1j * np.array([np.pi - 0.1, -np.pi + 0.1])))
    assert abs(abs(phi) - np.pi) < 1e-12 and r == pytest.approx(np.cos(0.1))


def test_pupil_recovers_aperture_and_defect():
    g = make_grid(128, 128, 20e-9, 20e-9)
    yy, xx = g.mesh()
    ap = (((xx / 0.6e-6) ** 2 + (yy / 0.4e-6) ** 2) <= 1).astype(complex)
    ap[60:64, 70:74] = 0
    probe = ComplexField(g, dft2(ap))
    pupil = pupil_function(probe)
    assert np.corrcoef(np.abs(pupil.values).ravel(), np.abs(ap).ravel())[0, 1] >= 0.99
    assert np.sum(np.abs(pupil.values) ** 2) == pytest.approx(np.sum(np.abs(probe.values) ** 2), rel=1e-12)
    assert np.max(np.abs(pupil.values[60:64, 70:74])) < 1e-12
    scaled = pupil_function(probe, 13.5e-9, 0.01)
    assert scaled.grid.px == pytest.approx(13.5e-9 * 0.01 / (128 * 20e-9))


def test_orthogonalize_examples(rng):
    a = crandn(rng, 32, 32)
    b = crandn(rng, 32, 32)
    b -= np.vdot(a, b) / np.vdot(a, a) * a
    modes = np.stack([2 * a, b])
    out, frac = orthogonalize_modes(modes)
    for m in range(2):
        ratio = out[m] / modes[m]
        assert np.allclose(ratio, ratio.flat[0], atol=1e-10) and abs(abs(ratio.flat[0]) - 1) < 1e-10
    assert frac.sum() == pytest.approx(1.0)
    dup, frac = orthogonalize_modes(np.stack([a, a]))
    assert frac == pytest.approx([1.0, 0.0], abs=1e-12) and np.max(np.abs(dup[1])) < 1e-6


@given(st.integers(0, 2**31), st.integers(1, 4))
def test_orthogonalize_invariants(seed, M):
    rng = np.random.default_rng(seed)
    modes = crandn(rng, 2, M, 8, 8)
    out, frac = orthogonalize_modes(modes)
    inc = np.sum(np.abs(modes) ** 2, axis=1)
    assert np.max(np.abs(np.sum(np.abs(out) ** 2, axis=1) - inc)) <= 1e-10 * inc.max()
    assert np.allclose(frac.sum(axis=1), 1.0) and np.all(np.diff(frac, axis=1) <= 1e-12)
    gram = np.einsum("lmyx,lnyx->lmn", out.conj(), out)
    off = gram - np.einsum("lmm->lm", gram)[..., None] * np.eye(M)
    assert np.max(np.abs(off)) <= 1e-10 * np.max(np.abs(gram))
    assert np.allclose(mode_power_spectrum(out).sum(axis=1), mode_power_spectrum(modes).sum(axis=1))


def test_mode_subspace_angle(rng):
    modes = crandn(rng, 2, 16, 16)
    U = np.linalg.qr(crandn(rng, 2, 2))[0]
    mixed = np.einsum("mn,nyx->myx", U, modes)
    assert mode_subspace_angle(mixed, modes) < 1e-6
    assert mode_subspace_angle(np.roll(mixed, (2, -1), axis=(-2, -1)), modes, max_shift=4) < 1e-6
    other = crandn(rng, 1, 16, 16)
    assert mode_subspace_angle(other, modes[:1]) > 1.0


def test_remove_power_ramp(rng):
    pos = rng.uniform(-1e-6, 1e-6, (20, 2))
    ref = np.exp(0.1 * rng.standard_normal(20))
    est = ref * np.exp(3.0 + pos @ np.array([2e5, -4e5]))
    ratio = remove_power_ramp(est, ref, pos) / ref
    assert np.allclose(ratio, ratio[0], rtol=1e-10)
    with pytest.raises(InvalidArgumentError):
        remove_power_ramp(-est, ref, pos)
    with pytest.raises(InvalidArgumentError):
        remove_power_ramp(est[:3], ref, pos)
