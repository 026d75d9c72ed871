"""Physical grids, complex fields and modal stacks.

Conventions used everywhere in the package:

* arrays are row-major with shape ``(ny, nx)``; 2-vectors are ``(y, x)``;
* the coordinate origin sits at index ``n // 2`` on each axis;
* the discrete Fourier transform is unitary (scaled by ``1/sqrt(nx*ny)``) and
  centred, so the zero frequency also lands at index ``n // 2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .errors import InvalidArgumentError, UndefinedMetricError

__all__ = [
    "Grid",
    "ComplexField",
    "ModalStack",
    "ScanTable",
    "make_grid",
    "centered_axis",
    "dft2",
    "idft2",
    "total_power",
    "compare_ambiguity_free",
    "best_alignment",
]


def centered_axis(n: int, pitch: float) -> np.ndarray:
    """Sample coordinates of an ``n``-point axis with the origin at ``n // 2``."""
    return (np.arange(n) - n // 2) * pitch


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    px: float
    py: float

    def __post_init__(self):
        if int(self.nx) < 1 or int(self.ny) < 1:
            raise InvalidArgumentError(f"grid size must be positive, got {self.ny}x{self.nx}")
        if not (self.px > 0 and self.py > 0) or not np.isfinite([self.px, self.py]).all():
            raise InvalidArgumentError(f"grid pitch must be positive, got ({self.py}, {self.px})")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def pitch(self) -> tuple[float, float]:
        return (self.py, self.px)

    @property
    def x(self) -> np.ndarray:
        return centered_axis(self.nx, self.px)

    @property
    def y(self) -> np.ndarray:
        return centered_axis(self.ny, self.py)

    @property
    def fx(self) -> np.ndarray:
        return centered_axis(self.nx, 1.0 / (self.nx * self.px))

    @property
    def fy(self) -> np.ndarray:
        return centered_axis(self.ny, 1.0 / (self.ny * self.py))

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``(Y, X)`` of shape ``(ny, nx)``."""
        return np.meshgrid(self.y, self.x, indexing="ij")

    def freq_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.fy, self.fx, indexing="ij")

    def fourier_conjugate(self, wavelength: float = 1.0, distance: float = 1.0) -> "Grid":
        """Grid reached by a unitary DFT, scaled to a plane at ``distance``.

        With unit wavelength and distance the pitch is the frequency pitch
        ``1/(n*pitch)``; otherwise it is the far-field pitch ``lambda*z/(n*pitch)``.
        """
        s = wavelength * distance
        return Grid(self.nx, self.ny, s / (self.nx * self.px), s / (self.ny * self.py))


def make_grid(nx: int, ny: int, px: float, py: float) -> Grid:
    for name, v in (("nx", nx), ("ny", ny), ("px", px), ("py", py)):
        if not np.isfinite(v) or v <= 0:
            raise InvalidArgumentError(f"{name} must be positive, got {v}")
    if int(nx) != nx or int(ny) != ny:
        raise InvalidArgumentError("pixel counts must be integers")
    return Grid(int(nx), int(ny), float(px), float(py))


@dataclass(frozen=True)
class ComplexField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.shape:
            raise InvalidArgumentError(f"values shape {v.shape} does not match grid {self.grid.shape}")
        if not np.isfinite(v).all():
            raise InvalidArgumentError("field contains non-finite values")
        v = v.astype(np.result_type(v.dtype, np.complex64), copy=True)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def with_values(self, values: np.ndarray, grid: Grid | None = None) -> "ComplexField":
        return ComplexField(grid or self.grid, values)


@dataclass(frozen=True)
class ModalStack:
    """Fields indexed by ``(wavelength, mode)``: ``values.shape == (L, M, ny, nx)``."""

    grid: Grid
    wavelengths: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.atleast_1d(np.asarray(self.wavelengths, dtype=float))
        v = np.asarray(self.values)
        if v.ndim != 4 or v.shape[2:] != self.grid.shape:
            raise InvalidArgumentError(f"modal stack must be (L, M, ny, nx) on {self.grid.shape}, got {v.shape}")
        if v.shape[0] != wl.size:
            raise InvalidArgumentError(f"{v.shape[0]} field groups for {wl.size} wavelengths")
        if (wl <= 0).any() or np.unique(wl).size != wl.size:
            raise InvalidArgumentError("wavelengths must be positive and distinct")
        object.__setattr__(self, "wavelengths", wl)
        object.__setattr__(self, "values", v.astype(np.result_type(v.dtype, np.complex64)))

    @property
    def n_wavelengths(self) -> int:
        return self.values.shape[0]

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    def field(self, l: int, mode: int) -> ComplexField:
        return ComplexField(self.grid, self.values[l, mode])


@dataclass
class ScanTable:
    """Scan positions ``(K, 2)`` in metres, ``(y, x)`` order, and per-shot amplitude factors."""

    positions: np.ndarray
    powers: np.ndarray = field(default=None)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if pos.shape[0] < 1:
            raise InvalidArgumentError("scan table needs at least one position")
        pw = np.ones(pos.shape[0]) if self.powers is None else np.asarray(self.powers, dtype=float)
        if pw.shape != (pos.shape[0],):
            raise InvalidArgumentError("one power coefficient per position is required")
        if (pw <= 0).any():
            raise InvalidArgumentError("power coefficients must be positive")
        self.positions = pos
        self.powers = pw

    def __len__(self):
        return self.positions.shape[0]


def dft2(a: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    """Centred unitary 2D DFT over ``axes``."""
    return sfft.fftshift(sfft.fft2(sfft.ifftshift(a, axes=axes), axes=axes, norm="ortho"), axes=axes)


def idft2(a: np.ndarray, axes=(-2, -1)) -> np.ndarray:
    return sfft.fftshift(sfft.ifft2(sfft.ifftshift(a, axes=axes), axes=axes, norm="ortho"), axes=axes)


def total_power(f: ComplexField) -> float:
    return float(np.sum(np.abs(f.values) ** 2) * f.grid.px * f.grid.py)


def _circular_xcorr(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # c[d] = sum_r a[r] conj(b[r - d]), circular
    return sfft.ifft2(sfft.fft2(a) * np.conj(sfft.fft2(b)))


def best_alignment(a, b, mask=None, max_shift=None):
    """Best global-phase/integer-shift match of ``b`` onto ``a``.

    Returns ``(metric, (dy, dx), phase)`` such that ``a ~ exp(1j*phase) *
    roll(b, (dy, dx))`` on the masked region.
    """
    a = np.asarray(getattr(a, "values", a))
    b = np.asarray(getattr(b, "values", b))
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {a.shape} vs {b.shape}")
    r = np.ones(a.shape) if mask is None else np.asarray(mask, dtype=float)
    na2 = float(np.sum(r * np.abs(a) ** 2))
    if na2 == 0 or not np.any(b):
        raise UndefinedMetricError("comparison of a zero-norm field is undefined")
    num = _circular_xcorr(r * a, b)
    den = _circular_xcorr(r, np.abs(b) ** 2).real
    den = np.maximum(den, 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        metric = np.where(den > 1e-300 * na2, np.abs(num) / np.sqrt(na2 * den), 0.0)
    ny, nx = a.shape
    if max_shift is not None:
        dy = np.fft.fftfreq(ny, 1.0 / ny)
        dx = np.fft.fftfreq(nx, 1.0 / nx)
        allowed = (np.abs(dy)[:, None] <= max_shift) & (np.abs(dx)[None, :] <= max_shift)
        metric = np.where(allowed, metric, 0.0)
    i, j = np.unravel_index(int(np.argmax(metric)), metric.shape)
    shift = (int(i if i <= ny // 2 else i - ny), int(j if j <= nx // 2 else j - nx))
    return float(min(metric[i, j], 1.0)), shift, float(np.angle(num[i, j]))


def compare_ambiguity_free(a, b, mask=None, max_shift=None) -> float:
    """Normalised overlap of two fields, maximised over global phase and integer shift.

    ``mask`` optionally restricts the comparison to a region in the frame of
    ``a``. Shifts are circular. The result is 1 exactly when ``b`` equals
    ``a`` up to a constant complex factor and a translation.
    """
    return best_alignment(a, b, mask=mask, max_shift=max_shift)[0]
