"""Post-reconstruction analysis: FRC, refocusing, height, pupil and modes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles
from scipy.ndimage import gaussian_filter1d, uniform_filter1d

from .errors import ClusteringError, InvalidArgumentError, UndefinedMetricError
from .field import ComplexField, Grid, ModalStack, best_alignment, dft2, idft2
from .propagators import angular_spectrum_transfer

__all__ = [
    "FrcCurve",
    "RefocusCurve",
    "HeightReport",
    "half_bit_threshold",
    "fourier_ring_correlation",
    "talbot_distance",
    "refocus_sweep",
    "split_amplitude_clusters",
    "circular_mean",
    "estimate_height",
    "pupil_function",
    "orthogonalize_modes",
    "mode_power_spectrum",
    "mode_subspace_angle",
    "remove_power_ramp",
]


# ---------------------------------------------------------------------------
# Fourier ring correlation


@dataclass(frozen=True)
class FrcCurve:
    frequencies: np.ndarray
    correlation: np.ndarray
    threshold: np.ndarray
    ring_pixels: np.ndarray
    resolution: float | None
    crossing_ring: int | None


def half_bit_threshold(n_pixels):
    n = np.asarray(n_pixels, dtype=float)
    s = np.sqrt(n)
    return (0.2071 + 1.9102 / s) / (1.2071 + 0.9102 / s)


def fourier_ring_correlation(a, b, ring_width: float = 1.0, pitch: float = 1.0) -> FrcCurve:
    """Ring-wise normalised spectral correlation of two images on the same grid.

    Rings are ``ring_width`` frequency samples wide (measured on the smaller
    axis for rectangular images) and run out to the Nyquist radius. Empty
    rings are skipped. The resolution is the frequency of the first ring,
    beyond the DC ring, whose correlation drops below the half-bit threshold.
    """
    a = np.asarray(getattr(a, "values", a))
    b = np.asarray(getattr(b, "values", b))
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidArgumentError(f"FRC needs two images of the same 2D shape, got {a.shape} and {b.shape}")
    if ring_width < 1:
        raise InvalidArgumentError("ring width must be at least one pixel")
    A, B = dft2(a), dft2(b)
    ny, nx = a.shape
    n = min(ny, nx)
    ky = (np.arange(ny) - ny // 2) * (n / ny)
    kx = (np.arange(nx) - nx // 2) * (n / nx)
    r = np.hypot(ky[:, None], kx[None, :])
    idx = np.floor(r / ring_width).astype(int)
    n_rings = int(np.floor((n // 2) / ring_width))
    keep = idx < n_rings
    idx_k = idx[keep]
    cross = np.bincount(idx_k, (A * np.conj(B))[keep].real, n_rings)
    pa = np.bincount(idx_k, (np.abs(A) ** 2)[keep], n_rings)
    pb = np.bincount(idx_k, (np.abs(B) ** 2)[keep], n_rings)
    count = np.bincount(idx_k, minlength=n_rings)
    valid = count > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.where(pa * pb > 0, cross / np.sqrt(pa * pb), 0.0)
    rings = np.nonzero(valid)[0]
    freqs = (rings + 0.5) * ring_width / (n * pitch)
    corr = np.clip(corr[rings], -1.0, 1.0)
    thr = half_bit_threshold(count[rings])
    crossing = None
    for i in range(1, rings.size):
        if corr[i] < thr[i]:
            crossing = i
            break
    res = float(freqs[crossing]) if crossing is not None else None
    return FrcCurve(freqs, corr, thr, count[rings], res, crossing)


# ---------------------------------------------------------------------------
# refocusing


@dataclass(frozen=True)
class RefocusCurve:
    dz: np.ndarray
    strength: np.ndarray
    envelope: np.ndarray
    window: int


def talbot_distance(pitch: float, wavelength: float) -> float:
    return 2 * pitch**2 / wavelength


def refocus_sweep(obj, grid: Grid, wavelength: float, dz_range: float = 25e-6, step: float = 200e-9,
                  probe_freq: float = 5e6, roi=None, line_axis: int = 0, smoothing: float | None = None):
    """Scan the defocus ``dz`` and return ``(best_dz, RefocusCurve)``.

    For every plane in ``[-dz_range, dz_range]`` the object is propagated by
    the angular spectrum method, its intensity summed along the grating lines
    (``line_axis``) inside ``roi = (row_slice, col_slice)``, and the magnitude
    of the profile's Fourier component at ``probe_freq`` recorded. The curve
    is smoothed by a moving average spanning ``smoothing`` metres (default:
    the Talbot distance of the pitch ``1/probe_freq``); the envelope maximum
    gives ``best_dz``.
    """
    obj = np.asarray(getattr(obj, "values", obj))
    if obj.shape != grid.shape:
        raise InvalidArgumentError("object does not match its grid")
    if step <= 0 or dz_range < 0:
        raise InvalidArgumentError("step must be positive and range non-negative")
    n_steps = dz_range / step
    if abs(n_steps - round(n_steps)) > 1e-6:
        raise InvalidArgumentError("the step must divide the sweep range")
    n_steps = int(round(n_steps))
    pitch_along = grid.px if line_axis == 0 else grid.py
    if not 0 < probe_freq <= 0.5 / pitch_along:
        raise InvalidArgumentError(
            f"probe frequency {probe_freq:g} 1/m lies outside the profile Nyquist band {0.5 / pitch_along:g} 1/m")
    dz = np.arange(-n_steps, n_steps + 1) * step
    rows, cols = roi if roi is not None else (slice(None), slice(None))
    coord = (grid.x if line_axis == 0 else grid.y)[cols if line_axis == 0 else rows]
    kernel = np.exp(-2j * np.pi * probe_freq * coord)
    spec = dft2(obj)
    strength = np.empty(dz.size)
    for i, d in enumerate(dz):
        field = idft2(spec * angular_spectrum_transfer(grid, wavelength, d))
        inten = np.abs(field[rows, cols]) ** 2
        profile = inten.sum(axis=line_axis)
        strength[i] = np.abs(np.sum(profile * kernel))
    span = talbot_distance(1.0 / probe_freq, wavelength) if smoothing is None else smoothing
    win = max(1, int(round(span / step)))
    win += 1 - win % 2
    env = uniform_filter1d(strength, win, mode="nearest")
    best = float(dz[int(np.argmax(env))])
    return best, RefocusCurve(dz, strength, env, win)


# ---------------------------------------------------------------------------
# height estimation


@dataclass(frozen=True)
class HeightReport:
    structure_amplitude: float
    substrate_amplitude: float
    structure_phase: float
    substrate_phase: float
    threshold: float
    fresnel_phase_difference: float
    phase_difference: float
    height: float
    height_error: float
    counts: tuple


def split_amplitude_clusters(amp: np.ndarray, bins: int = 64, smooth: float = 1.0, valley_ratio: float = 0.5):
    """Valley threshold between the two dominant modes of the amplitude histogram.

    The valley must drop to ``valley_ratio`` of the smaller peak; shallower
    dips are treated as noise on a single mode.
    """
    amp = np.asarray(amp, dtype=float).ravel()
    if amp.size < 2 or np.ptp(amp) == 0:
        raise ClusteringError("amplitude histogram is degenerate")
    hist, edges = np.histogram(amp, bins=bins)
    h = gaussian_filter1d(hist.astype(float), smooth, mode="constant") if smooth else hist.astype(float)
    peaks = [i for i in range(bins) if h[i] > 0 and (i == 0 or h[i] >= h[i - 1]) and (i == bins - 1 or h[i] > h[i + 1])]
    if len(peaks) < 2:
        raise ClusteringError("amplitude histogram is unimodal; cannot separate structure from substrate")
    p1, p2 = sorted(sorted(peaks, key=lambda i: h[i])[-2:])
    valley = p1 + int(np.argmin(h[p1 : p2 + 1]))
    if h[valley] > valley_ratio * min(h[p1], h[p2]):
        raise ClusteringError("no clear valley between the two amplitude modes")
    return 0.5 * (edges[valley] + edges[valley + 1])


def circular_mean(phasors):
    """Mean direction and resultant length of unit phasors."""
    z = np.asarray(phasors)
    z = z / np.where(np.abs(z) > 0, np.abs(z), 1)
    m = np.mean(z)
    return float(np.angle(m)), float(np.abs(m))


def _wrap(phi):
    return (phi + np.pi) % (2 * np.pi) - np.pi


def estimate_height(obj, wavelength: float, theta: float, fresnel_phase_diff: float,
                    nominal_height: float = 0.0, mask=None, bins: int = 64) -> HeightReport:
    """Structure height from the phase step between the two amplitude clusters.

    The reflection phase difference ``4*pi*h*cos(theta)/wavelength`` is what
    remains after subtracting the Fresnel phase difference; the 2*pi
    ambiguity is resolved by taking the branch closest to ``nominal_height``.
    """
    obj = np.asarray(getattr(obj, "values", obj))
    sel = np.ones(obj.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    vals = obj[sel]
    amp = np.abs(vals)
    thr = split_amplitude_clusters(amp, bins)
    hi, lo = vals[amp > thr], vals[amp <= thr]
    if hi.size == 0 or lo.size == 0:
        raise ClusteringError("one amplitude cluster is empty")
    phi_s, r_s = circular_mean(hi)
    phi_b, r_b = circular_mean(lo)
    dphi = _wrap(phi_s - phi_b)
    c = 4 * np.pi * np.cos(theta) / wavelength
    h0 = _wrap(dphi - fresnel_phase_diff) / c
    period = 2 * np.pi / c
    h = h0 + np.round((nominal_height - h0) / period) * period

    def se(r, n):
        r = min(max(r, 1e-300), 1.0)
        return np.sqrt(max(-2 * np.log(r), 0.0)) / np.sqrt(n)

    err = np.hypot(se(r_s, hi.size), se(r_b, lo.size)) / c
    return HeightReport(float(np.mean(np.abs(hi))), float(np.mean(np.abs(lo))), phi_s, phi_b, float(thr),
                        float(fresnel_phase_diff), float(dphi), float(h), float(err), (hi.size, lo.size))


# ---------------------------------------------------------------------------
# probe analysis


def pupil_function(P: ComplexField, wavelength: float | None = None, focal_length: float | None = None) -> ComplexField:
    """Unitary inverse DFT of the probe.

    The output grid is in spatial-frequency units (1/m) unless both
    ``wavelength`` and ``focal_length`` are given, in which case it is scaled
    to physical pupil coordinates ``wavelength * focal_length * f``.
    """
    g = P.grid
    if wavelength is not None and focal_length is not None:
        grid = g.fourier_conjugate(wavelength, focal_length)
    else:
        grid = g.fourier_conjugate()
    return ComplexField(grid, idft2(P.values))


def _as_modes(P):
    if isinstance(P, ModalStack):
        return P.values, P
    a = np.asarray(P)
    if a.ndim == 3:
        return a[None], None
    if a.ndim == 4:
        return a, None
    raise InvalidArgumentError("modes must have shape (M, ny, nx) or (L, M, ny, nx)")


def orthogonalize_modes(P):
    """Orthogonal modes sorted by power, via the eigendecomposition of the mode Gram matrix.

    Accepts a :class:`ModalStack` or an array ``(M, ny, nx)`` / ``(L, M, ny, nx)``
    and returns the same kind together with the per-wavelength power
    fractions ``(L, M)`` (``(M,)`` for a 3D array). The pointwise incoherent
    sum over modes is unchanged.
    """
    vals, stack = _as_modes(P)
    L, M = vals.shape[:2]
    out = np.empty_like(vals, dtype=np.result_type(vals.dtype, np.complex64))
    fractions = np.zeros((L, M))
    for l in range(L):
        A = vals[l].reshape(M, -1)
        G = A @ A.conj().T
        w, V = np.linalg.eigh(G)
        order = np.argsort(w)[::-1]
        w, V = np.clip(w[order], 0, None), V[:, order]
        out[l] = (V.conj().T @ A).reshape(vals.shape[1:])
        tot = w.sum()
        fractions[l] = w / tot if tot > 0 else 0.0
    if stack is not None:
        return ModalStack(stack.grid, stack.wavelengths, out), fractions
    if np.asarray(P).ndim == 3:
        return out[0], fractions[0]
    return out, fractions


def mode_power_spectrum(P) -> np.ndarray:
    """Total power per wavelength and mode ``(L, M)``."""
    vals, _ = _as_modes(P)
    return np.sum(np.abs(vals) ** 2, axis=(-2, -1))


def mode_subspace_angle(rec, truth, max_shift: int | None = None) -> float:
    """Largest principal angle (radians) between the spans of two mode sets ``(M, ny, nx)``.

    The reconstruction is first translated by the integer shift that best
    aligns its incoherent intensity with the truth's.
    """
    rec = np.asarray(rec)
    truth = np.asarray(truth)
    if rec.shape[-2:] != truth.shape[-2:]:
        raise InvalidArgumentError("mode sets live on different grids")
    ir = np.sum(np.abs(rec) ** 2, axis=0)
    it = np.sum(np.abs(truth) ** 2, axis=0)
    if not np.any(ir) or not np.any(it):
        raise UndefinedMetricError("cannot compare an empty mode set")
    _, (dy, dx), _ = best_alignment(it, ir, max_shift=max_shift)
    rec = np.roll(rec, (dy, dx), axis=(-2, -1))
    A = rec.reshape(rec.shape[0], -1).T
    B = truth.reshape(truth.shape[0], -1).T
    return float(np.max(subspace_angles(A, B)))


# ---------------------------------------------------------------------------
# scan corrections


def remove_power_ramp(estimate, reference, positions) -> np.ndarray:
    """Strip the exponential power ramp that the data cannot observe.

    Scaling the object by ``exp(a . r)`` and the probe by ``exp(-a . r)``
    while multiplying each shot's amplitude factor by ``exp(a . s_k)`` leaves
    every pattern unchanged. The ramp ``a`` (and a global factor) that best
    fits ``log(estimate / reference)`` over the scan positions is removed from
    ``estimate``.
    """
    est = np.asarray(estimate, dtype=float)
    ref = np.asarray(reference, dtype=float)
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    if est.shape != ref.shape or est.shape != (pos.shape[0],):
        raise InvalidArgumentError("one estimate, reference and position per shot is required")
    if (est <= 0).any() or (ref <= 0).any():
        raise InvalidArgumentError("amplitude factors must be positive")
    A = np.column_stack([np.ones(pos.shape[0]), pos - pos.mean(axis=0)])
    coef, *_ = np.linalg.lstsq(A, np.log(est / ref), rcond=None)
    return est * np.exp(-(A[:, 1:] @ coef[1:]))
