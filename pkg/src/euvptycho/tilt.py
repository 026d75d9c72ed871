"""Reflection-geometry preprocessing: thresholds, centring and tilt resampling.

Geometry: the sample normal is +z and the plane of incidence is x-z. The
beam arrives along ``(sin t, 0, -cos t)`` and the camera faces the specular
direction ``k_s = (sin t, 0, cos t)`` at distance ``L``, with in-plane basis
``e1 = (cos t, 0, -sin t)`` and ``e2 = (0, 1, 0)``. A camera pixel at
``(x, y)`` sees the unit direction ``u`` of ``L*k_s + x*e1 + y*e2`` and hence
the sample frequency ``((u_x - sin t), u_y) / wavelength``.

The corrected patterns live on an "untilted-equivalent" grid: target pixel
``(X, Y)`` carries the frequency a camera facing the sample normal at the same
distance would see, ``(X, Y) / (wavelength * sqrt(X**2 + Y**2 + L**2))``. The
map is wavelength independent, equals the identity at ``t = 0`` and keeps
the transmission-geometry forward model valid afterwards.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import Dataset
from .errors import GeometryError, InvalidArgumentError, PreprocessingError
from .field import Grid, make_grid

__all__ = [
    "SATURATION_LEVEL",
    "NOISE_FLOOR",
    "TiltGeometry",
    "ResampleMap",
    "detector_directions",
    "detector_frequencies",
    "build_tilt_map",
    "resample_pattern",
    "resample_adjoint",
    "resample_mask",
    "threshold_mask",
    "zeroth_order_center",
    "shift_frames",
    "preprocess_frames",
]

SATURATION_LEVEL = 65535.0
NOISE_FLOOR = 4.0
_GRAZING_LIMIT = np.pi / 2 - 1e-3


@dataclass(frozen=True)
class TiltGeometry:
    """Incidence angle ``theta`` (rad), sample-camera distance (m) and camera grid.

    ``tilt_axis`` is the array axis lying in the plane of incidence (1 = x).
    ``out_pitch``/``out_shape`` optionally override the target grid.
    """

    theta: float
    distance: float
    detector: Grid
    tilt_axis: int = 1
    out_pitch: tuple | None = None
    out_shape: tuple | None = None

    def __post_init__(self):
        if not np.isfinite(self.theta) or self.theta < 0:
            raise GeometryError(f"incidence angle must be non-negative, got {self.theta}")
        if self.theta >= _GRAZING_LIMIT:
            raise GeometryError(f"incidence angle {np.degrees(self.theta):.4f} deg is (near) grazing")
        if not self.distance > 0:
            raise GeometryError("sample-camera distance must be positive")
        if self.tilt_axis not in (0, 1):
            raise GeometryError("tilt axis must be 0 (rows) or 1 (columns)")


@dataclass(frozen=True)
class ResampleMap:
    """Per target pixel: fractional source ``(row, col)``, intensity weight and in-bounds flag."""

    in_shape: tuple
    out_grid: Grid
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    inside: np.ndarray


def _frame(geom: TiltGeometry):
    """Camera grid and pitch expressed with the tilt along x."""
    g = geom.detector
    if geom.tilt_axis == 1:
        return g.ny, g.nx, g.py, g.px
    return g.nx, g.ny, g.px, g.py


def detector_directions(geom: TiltGeometry):
    """Outgoing unit-direction components ``(u_x, u_y)`` for every camera pixel, array-shaped."""
    ny, nx, py, px = _frame(geom)
    t, L = geom.theta, geom.distance
    yy, xx = np.meshgrid((np.arange(ny) - ny // 2) * py, (np.arange(nx) - nx // 2) * px, indexing="ij")
    px3 = L * np.sin(t) + xx * np.cos(t)
    pz3 = L * np.cos(t) - xx * np.sin(t)
    norm = np.sqrt(px3**2 + yy**2 + pz3**2)
    ux, uy = px3 / norm, yy / norm
    if geom.tilt_axis == 0:
        return uy.T, ux.T
    return ux, uy


def detector_frequencies(geom: TiltGeometry, wavelength: float):
    """Sample-plane frequencies ``(f_tilt, f_other)`` seen by each camera pixel (1/m)."""
    ux, uy = detector_directions(geom)
    return (ux - np.sin(geom.theta)) / wavelength, uy / wavelength


def _target_from_cosines(a, b, L):
    c = np.sqrt(np.maximum(1 - a**2 - b**2, 1e-300))
    return L * a / c, L * b / c


def _axis_count(lo, hi, pitch):
    tol = 1e-9
    left = int(np.floor(-lo / pitch + tol))
    right = int(np.floor(hi / pitch + tol))
    if left == right:
        return 2 * left + 1
    return 2 * max(left, right + 1)


def build_tilt_map(geom: TiltGeometry) -> ResampleMap:
    """Resampling map from the tilted camera onto the untilted-equivalent grid.

    The target pitch along the tilt direction is the camera pitch times
    ``cos(theta)``, so the central sampling density in frequency is kept.
    Target extent covers the image of the camera border. Weights are the
    Jacobian ``|d(row, col)/d(target row, target col)|`` in pixel units, which
    conserves counts.
    """
    ny, nx, py, px = _frame(geom)
    t, L = geom.theta, geom.distance
    if geom.out_pitch is not None:
        op = tuple(geom.out_pitch)
        opy, opx = op if geom.tilt_axis == 1 else op[::-1]
    else:
        opy, opx = py, px * np.cos(t)
    # image of the camera border on the target plane
    ux, uy = detector_directions(TiltGeometry(t, L, make_grid(nx, ny, px, py)))
    a, b = ux - np.sin(t), uy
    X, Y = _target_from_cosines(a, b, L)
    border = np.concatenate([X[0], X[-1], X[:, 0], X[:, -1]]), np.concatenate([Y[0], Y[-1], Y[:, 0], Y[:, -1]])
    if geom.out_shape is not None:
        sh = tuple(geom.out_shape)
        mny, mnx = sh if geom.tilt_axis == 1 else sh[::-1]
    else:
        mnx = _axis_count(border[0].min(), border[0].max(), opx)
        mny = _axis_count(border[1].min(), border[1].max(), opy)
    Yt, Xt = np.meshgrid((np.arange(mny) - mny // 2) * opy, (np.arange(mnx) - mnx // 2) * opx, indexing="ij")
    R = np.sqrt(Xt**2 + Yt**2 + L**2)
    ux = Xt / R + np.sin(t)
    uy = Yt / R
    uz2 = 1 - ux**2 - uy**2
    ok = uz2 > 0
    uz = np.sqrt(np.where(ok, uz2, 0.0))
    u1 = ux * np.cos(t) - uz * np.sin(t)
    u3 = ux * np.sin(t) + uz * np.cos(t)
    ok &= u3 > 0
    u3s = np.where(ok, u3, 1.0)
    xd = L * u1 / u3s
    yd = L * uy / u3s
    cols = xd / px + nx // 2
    rows = yd / py + ny // 2
    eps = 1e-9
    inside = ok & (cols >= -eps) & (cols <= nx - 1 + eps) & (rows >= -eps) & (rows <= ny - 1 + eps)
    if t == 0.0 and geom.out_pitch is None and geom.out_shape is None:
        # exact identity: avoid round-off in the trigonometric chain
        rows = np.broadcast_to(np.arange(mny, dtype=float)[:, None], (mny, mnx)).copy()
        cols = np.broadcast_to(np.arange(mnx, dtype=float)[None, :], (mny, mnx)).copy()
        weights = np.ones((mny, mnx))
        inside = np.ones((mny, mnx), dtype=bool)
    else:
        drr = np.gradient(rows, axis=0) if mny > 1 else np.ones_like(rows)
        drc = np.gradient(rows, axis=1) if mnx > 1 else np.zeros_like(rows)
        dcr = np.gradient(cols, axis=0) if mny > 1 else np.zeros_like(cols)
        dcc = np.gradient(cols, axis=1) if mnx > 1 else np.ones_like(cols)
        weights = np.abs(drr * dcc - drc * dcr)
        inside &= weights > 0
    if geom.tilt_axis == 0:
        return ResampleMap((geom.detector.ny, geom.detector.nx), make_grid(mny, mnx, opy, opx),
                           cols.T.copy(), rows.T.copy(), weights.T.copy(), inside.T.copy())
    return ResampleMap((geom.detector.ny, geom.detector.nx), make_grid(mnx, mny, opx, opy),
                       rows, cols, weights, inside)


def _stencil(m: ResampleMap):
    ny, nx = m.in_shape
    r = np.where(m.inside, m.rows, 0.0)
    c = np.where(m.inside, m.cols, 0.0)
    r0 = np.clip(np.floor(r).astype(int), 0, max(ny - 2, 0))
    c0 = np.clip(np.floor(c).astype(int), 0, max(nx - 2, 0))
    fr = np.clip(r - r0, 0.0, 1.0) if ny > 1 else np.zeros_like(r)
    fc = np.clip(c - c0, 0.0, 1.0) if nx > 1 else np.zeros_like(c)
    r1 = np.minimum(r0 + 1, ny - 1)
    c1 = np.minimum(c0 + 1, nx - 1)
    w = m.weights * m.inside
    taps = [(r0, c0, (1 - fr) * (1 - fc)), (r0, c1, (1 - fr) * fc), (r1, c0, fr * (1 - fc)), (r1, c1, fr * fc)]
    return taps, w


def resample_pattern(I, m: ResampleMap):
    """Bilinear resampling times the Jacobian weight; returns ``(pattern, in-bounds mask)``.

    ``I`` may be a single frame or a stack ``(K, ny, nx)``.
    """
    I = np.asarray(I, dtype=float)
    if I.shape[-2:] != tuple(m.in_shape):
        raise InvalidArgumentError(f"pattern shape {I.shape[-2:]} does not match the map input {m.in_shape}")
    taps, w = _stencil(m)
    out = np.zeros(I.shape[:-2] + m.out_grid.shape)
    for r, c, a in taps:
        out += I[..., r, c] * a
    return out * w, m.inside.copy()


def resample_adjoint(J, m: ResampleMap):
    """Adjoint of :func:`resample_pattern` (scatter-add back onto the camera grid)."""
    J = np.asarray(J, dtype=float)
    if J.shape[-2:] != m.out_grid.shape:
        raise InvalidArgumentError("array does not match the map output grid")
    taps, w = _stencil(m)
    lead = J.shape[:-2]
    out = np.zeros(lead + tuple(m.in_shape))
    flat_out = out.reshape((-1,) + tuple(m.in_shape))
    Jw = (J * w).reshape((-1,) + m.out_grid.shape)
    for r, c, a in taps:
        for i in range(flat_out.shape[0]):
            np.add.at(flat_out[i], (r, c), Jw[i] * a)
    return out


def resample_mask(mask, m: ResampleMap) -> np.ndarray:
    """Target validity: in bounds and every contributing camera pixel valid."""
    mask = np.asarray(mask, dtype=bool)
    taps, w = _stencil(m)
    ok = np.broadcast_to(m.inside, mask.shape[:-2] + m.out_grid.shape).copy()
    for r, c, a in taps:
        ok &= mask[..., r, c] | (a <= 0)
    return ok


def threshold_mask(raw, corrected, lo: float = NOISE_FLOOR, hi: float = SATURATION_LEVEL) -> np.ndarray:
    """Valid pixels: raw value below ``hi`` and dark-corrected value above ``lo``."""
    return (np.asarray(raw) < hi) & (np.asarray(corrected) > lo)


def zeroth_order_center(frames, lo: float = NOISE_FLOOR):
    """Intensity centroid ``(row, col)`` of the brightest connected region of the summed frames."""
    S = np.sum(np.asarray(frames, dtype=float).reshape((-1,) + np.shape(frames)[-2:]), axis=0)
    if not np.any(S > lo):
        raise PreprocessingError("zeroth order not found: no pixel of the summed frames exceeds the noise floor")
    peak = np.unravel_index(int(np.argmax(S)), S.shape)
    labels, _ = ndimage.label(S > 0.5 * S[peak])
    region = labels == labels[peak]
    return tuple(float(c) for c in ndimage.center_of_mass(np.where(region, S, 0.0)))


def shift_frames(frames, shift, fill=0):
    """Integer translation of the last two axes with ``fill`` in the uncovered pixels."""
    frames = np.asarray(frames)
    dy, dx = (int(s) for s in shift)
    out = np.full(frames.shape, fill, dtype=frames.dtype)
    ny, nx = frames.shape[-2:]
    src_r = slice(max(0, -dy), min(ny, ny - dy))
    dst_r = slice(max(0, dy), min(ny, ny + dy))
    src_c = slice(max(0, -dx), min(nx, nx - dx))
    dst_c = slice(max(0, dx), min(nx, nx + dx))
    out[..., dst_r, dst_c] = frames[..., src_r, src_c]
    return out


def preprocess_frames(raw, dark, geom: TiltGeometry, wavelengths, positions,
                      thresholds=(NOISE_FLOOR, SATURATION_LEVEL), center: bool = True) -> Dataset:
    """Dark subtraction, threshold masks, zeroth-order centring and tilt resampling.

    The saturation test uses the raw frames, the noise-floor test the
    dark-subtracted (clamped) frames. The centring shift is the integer
    offset moving the zeroth-order centroid of the frame sum to the array
    centre; it is stored in ``metadata["centering_shift"]``.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim == 2:
        raw = raw[None]
    dark = np.asarray(dark, dtype=float)
    if dark.shape != raw.shape[-2:] or raw.shape[-2:] != geom.detector.shape:
        raise InvalidArgumentError("raw frames, dark frame and camera grid must share one shape")
    lo, hi = thresholds
    corrected = np.maximum(raw - dark, 0.0)
    valid = threshold_mask(raw, corrected, lo, hi)
    shift = (0, 0)
    if center and raw.shape[0]:
        cy, cx = zeroth_order_center(np.where(valid, corrected, 0.0), lo)
        ny, nx = raw.shape[-2:]
        shift = (int(round(ny // 2 - cy)), int(round(nx // 2 - cx)))
        corrected = shift_frames(corrected, shift, 0.0)
        valid = shift_frames(valid, shift, False)
    m = build_tilt_map(geom)
    patterns, _ = resample_pattern(np.where(valid, corrected, 0.0), m)
    masks = resample_mask(valid, m)
    patterns = np.where(masks, patterns, 0.0)
    return Dataset(patterns, masks, m.out_grid, wavelengths, geom.distance, positions, theta=geom.theta,
                   metadata={"centering_shift": list(shift), "thresholds": [float(lo), float(hi)]})
