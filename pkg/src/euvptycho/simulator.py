"""Ground-truth phantoms and synthetic datasets for closed-loop checks.

Phantoms are reflective wafers: structure pixels carry the structure
reflection coefficient times the height phase ``exp(i*4*pi*h*cos(theta)/lambda)``
and substrate pixels the substrate coefficient. Amplitudes are square roots of
reflectivities, so they never exceed one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TruthBundle
from .errors import InvalidArgumentError, SamplingError
from .field import Grid, ModalStack, dft2, make_grid
from .model import ModelState, object_shape_for_scan, predict_pattern

__all__ = [
    "GOLD_REFLECTIVITY",
    "SILICON_REFLECTIVITY",
    "DEFAULT_GRATING_SEGMENTS",
    "PhantomSpec",
    "NoiseSpec",
    "phantom_siemens",
    "phantom_chirped_grating",
    "grating_layout",
    "make_scan_grid",
    "apodized_ellipse",
    "synthetic_probe",
    "synthesize_dataset",
    "nudft_oracle",
    "illumination_map",
    "illumination_region",
    "benchmark_instance",
    "SimulationConfig",
    "simulate",
    "probe_diameter",
    "truth_region",
]

GOLD_REFLECTIVITY = 0.37
SILICON_REFLECTIVITY = 0.0077

# (linewidth, pitches) in metres, left to right
DEFAULT_GRATING_SEGMENTS = (
    (400e-9, [800e-9] * 4),
    (200e-9, list(np.linspace(800e-9, 600e-9, 5))),
    (100e-9, list(np.linspace(600e-9, 350e-9, 6))),
    (50e-9, list(np.linspace(350e-9, 150e-9, 9))),
)


@dataclass(frozen=True)
class PhantomSpec:
    """Material and geometry description of a reflective phantom.

    ``structure`` and ``substrate`` are complex amplitude reflection
    coefficients, one per wavelength (a scalar is broadcast). Their phase
    difference is the Fresnel phase; the height adds ``4*pi*h*cos(theta)/lambda``
    on structure pixels.
    """

    grid: Grid
    wavelengths: tuple = (13.5e-9,)
    structure: object = np.sqrt(GOLD_REFLECTIVITY)
    substrate: object = np.sqrt(SILICON_REFLECTIVITY)
    height: float = 0.0
    theta: float = 0.0
    kind: str = "siemens"

    def coefficients(self):
        L = len(self.wavelengths)
        rs = np.broadcast_to(np.asarray(self.structure, dtype=complex), (L,))
        rb = np.broadcast_to(np.asarray(self.substrate, dtype=complex), (L,))
        if np.any(np.abs(rs) > 1) or np.any(np.abs(rb) > 1):
            raise InvalidArgumentError("reflection coefficients must not exceed unit magnitude")
        return rs, rb

    def fresnel_phase_difference(self) -> np.ndarray:
        rs, rb = self.coefficients()
        return np.angle(rs * np.conj(rb))

    def render(self, coverage: np.ndarray) -> ModalStack:
        """Mix the two materials by the structure area fraction of each pixel."""
        rs, rb = self.coefficients()
        wl = np.asarray(self.wavelengths, dtype=float)
        frac = np.asarray(coverage, dtype=float)
        values = np.empty((wl.size, 1) + self.grid.shape, dtype=complex)
        for l, lam in enumerate(wl):
            top = rs[l] * np.exp(1j * 4 * np.pi * self.height * np.cos(self.theta) / lam)
            values[l, 0] = frac * top + (1 - frac) * rb[l]
        return ModalStack(self.grid, wl, values)


@dataclass(frozen=True)
class NoiseSpec:
    """Detector and source noise. ``None``/zero entries switch a term off."""

    photons_per_shot: float | None = None
    read_noise_sigma: float = 0.0
    power_jitter_sigma: float = 0.0
    seed: int = 0
    saturation: float | None = 65535.0

    def __post_init__(self):
        for name in ("read_noise_sigma", "power_jitter_sigma"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative")
        if self.photons_per_shot is not None and self.photons_per_shot <= 0:
            raise InvalidArgumentError("photons_per_shot must be positive")

    @property
    def enabled(self) -> bool:
        return self.photons_per_shot is not None or self.read_noise_sigma > 0


# ---------------------------------------------------------------------------
# phantoms


def _supersampled(grid: Grid, inside, oversample: int):
    """Area fraction of each pixel for which ``inside(y, x)`` holds (``oversample**2`` subsamples)."""
    o = max(int(oversample), 1)
    off = (np.arange(o) + 0.5) / o - 0.5
    yy, xx = grid.mesh()
    acc = np.zeros(grid.shape)
    for dy in off:
        for dx in off:
            acc += inside(yy + dy * grid.py, xx + dx * grid.px)
    return acc / o**2


def phantom_siemens(spokes: int, radius: float, spec: PhantomSpec, oversample: int = 1) -> ModalStack:
    """Siemens star: ``spokes`` structure wedges alternating with substrate, inside ``radius``.

    With ``oversample > 1`` edge pixels hold the area-weighted mix of both materials.
    """
    if spokes < 2 or spokes % 2:
        raise InvalidArgumentError("spoke count must be even and at least 2")
    g = spec.grid
    if radius <= 0 or radius > min(g.nx * g.px, g.ny * g.py) / 2:
        raise InvalidArgumentError(f"radius {radius:g} m does not fit the {g.ny}x{g.nx} grid")
    period = 2 * np.pi / spokes

    def inside(yy, xx):
        phi = np.mod(np.arctan2(yy, xx), 2 * np.pi)
        return (np.mod(phi, period) < period / 2) & (np.hypot(yy, xx) <= radius)

    return spec.render(_supersampled(g, inside, oversample))


def grating_layout(segments=DEFAULT_GRATING_SEGMENTS, gap: float | None = None):
    """Line edges ``[(start, width), ...]`` in metres from the left edge, plus the total length.

    Line ``j > 0`` of a segment starts ``pitches[j]`` after line ``j - 1``, so
    the first pitch of a segment only serves the linewidth check. Segments
    are separated by ``gap`` (default: the largest pitch in the design)
    measured from the end of the previous segment's last line.
    """
    if gap is None:
        gap = max(max(p) for _, p in segments)
    lines, x = [], 0.0
    for i, (width, pitches) in enumerate(segments):
        for j, p in enumerate(pitches):
            if width >= p:
                raise InvalidArgumentError(f"linewidth {width:g} m does not fit pitch {p:g} m")
            if j:
                x += p
            elif i:
                x = lines[-1][0] + lines[-1][1] + gap
            lines.append((x, width))
    return lines, (x + segments[-1][0] if lines else 0.0)


def phantom_chirped_grating(spec: PhantomSpec, segments=DEFAULT_GRATING_SEGMENTS,
                            line_length: float | None = None, gap: float | None = None,
                            min_samples: float = 2.0) -> ModalStack:
    """Lines parallel to y with the designed linewidth/pitch segments, centred on the grid.

    Pixels are structure when their centre falls inside a line.
    """
    g = spec.grid
    finest = min(w for w, _ in segments)
    if finest / g.px < min_samples:
        raise SamplingError(f"finest line {finest:g} m is resolved by {finest / g.px:.2f} < {min_samples} samples")
    lines, length = grating_layout(segments, gap)
    if length > g.nx * g.px:
        raise SamplingError(f"grating length {length:g} m exceeds the grid width {g.nx * g.px:g} m")
    x = g.x + length / 2
    col = np.zeros(g.nx, dtype=bool)
    for start, width in lines:
        col |= (x >= start) & (x < start + width)
    row = np.ones(g.ny, dtype=bool)
    if line_length is not None:
        row = np.abs(g.y) <= line_length / 2
    return spec.render(row[:, None] & col[None, :])


# ---------------------------------------------------------------------------
# scan and probe


def make_scan_grid(nx: int, ny: int, dx: float, dy: float, jitter: float = 0.0, seed: int = 0) -> np.ndarray:
    """Raster positions ``(ny*nx, 2)`` as ``(y, x)`` in metres, centred on zero, with uniform jitter."""
    if nx < 1 or ny < 1:
        raise InvalidArgumentError("scan grid needs at least one position per axis")
    if jitter < 0 or (jitter > 0 and jitter >= min(dx, dy) / 2):
        raise InvalidArgumentError("jitter must be non-negative and below half the step")
    yy, xx = np.meshgrid((np.arange(ny) - (ny - 1) / 2) * dy, (np.arange(nx) - (nx - 1) / 2) * dx, indexing="ij")
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1)
    if jitter:
        pos = pos + np.random.default_rng(seed).uniform(-jitter, jitter, pos.shape)
    return pos


def apodized_ellipse(grid_shape, semi_axes, edge: float = 1.5, rotation: float = 0.0) -> np.ndarray:
    """Elliptical aperture in pixel units with a smooth (error-function-like) edge ``edge`` pixels wide."""
    ny, nx = grid_shape
    yy, xx = np.meshgrid(np.arange(ny) - ny // 2, np.arange(nx) - nx // 2, indexing="ij")
    c, s = np.cos(rotation), np.sin(rotation)
    u, w = c * xx + s * yy, -s * xx + c * yy
    rho = np.sqrt((u / semi_axes[1]) ** 2 + (w / semi_axes[0]) ** 2)
    d = (1 - rho) * min(semi_axes)
    return 0.5 * (1 + np.tanh(d / edge)) if edge > 0 else (rho <= 1).astype(float)


def _zernike_like(grid_shape, semi_axes):
    ny, nx = grid_shape
    yy, xx = np.meshgrid((np.arange(ny) - ny // 2) / semi_axes[0], (np.arange(nx) - nx // 2) / semi_axes[1], indexing="ij")
    r2 = xx**2 + yy**2
    return [2 * r2 - 1, xx**2 - yy**2, 2 * xx * yy, (3 * r2 - 2) * xx, (3 * r2 - 2) * yy]


def synthetic_probe(grid: Grid, wavelengths, n_modes: int = 1, semi_fraction=(0.2, 0.25),
                    edge: float = 2.0, defocus: float = 1.0, aberration: float = 0.3, mode_weights=None,
                    seed: int = 0) -> np.ndarray:
    """Probe modes ``(L, M, ny, nx)``: an apodised elliptical spot with a mild aberration phase.

    The spot semi-axes are ``semi_fraction`` of the window (rows, cols); the
    phase is a curvature term of ``defocus`` radians at the rim plus random
    low-order terms of standard deviation ``aberration`` radians, scaled by
    ``wavelengths[0] / wavelength`` so the harmonics differ. Extra modes are
    differently aberrated copies, orthogonalised and weighted by the power
    fractions ``mode_weights`` (default geometric 1, 0.4, 0.16, ...). Each
    wavelength carries unit total power; scale afterwards.
    """
    from .analysis import orthogonalize_modes

    rng = np.random.default_rng(seed)
    wl = np.atleast_1d(np.asarray(wavelengths, dtype=float))
    semi = (semi_fraction[0] * grid.ny, semi_fraction[1] * grid.nx)
    spot = apodized_ellipse(grid.shape, semi, edge)
    basis = _zernike_like(grid.shape, semi)
    base = rng.normal(0, aberration, len(basis))
    if mode_weights is None:
        mode_weights = 0.4 ** np.arange(n_modes)
    w = np.asarray(mode_weights, dtype=float)[:n_modes]
    w = w / w.sum()
    extra = [rng.normal(0, 3 * aberration, len(basis)) for _ in range(n_modes)]
    out = np.empty((wl.size, n_modes) + grid.shape, dtype=complex)
    for l, lam in enumerate(wl):
        scale = wl[0] / lam
        modes = []
        for m in range(n_modes):
            coef = base + (extra[m] if m else 0)
            phase = scale * (0.5 * defocus * (basis[0] + 1) + sum(c * b for c, b in zip(coef[1:], basis[1:])))
            modes.append(spot * np.exp(1j * phase))
        modes = np.array(modes)
        if n_modes > 1:
            modes, _ = orthogonalize_modes(modes)
        for m in range(n_modes):
            modes[m] *= np.sqrt(w[m] / np.sum(np.abs(modes[m]) ** 2))
        out[l] = modes
    return out


# ---------------------------------------------------------------------------
# dataset synthesis


def synthesize_dataset(probe, obj, positions, wavelengths, distance: float, probe_grid: Grid,
                       detector_grid: Grid, noise: NoiseSpec = NoiseSpec(), background=None,
                       theta: float = 0.0, guard: int = 2, propagator: str = "czt",
                       metadata: dict | None = None):
    """Run the forward model as a generator; returns ``(Dataset, TruthBundle)``.

    Per shot the amplitude coefficient is drawn from a lognormal with median
    one. With ``photons_per_shot`` set, the probe is rescaled so the mean
    noiseless shot carries that many counts (the rescaled probe is the
    truth), then Poisson counts, Gaussian read noise and saturation clipping
    are applied. With noise disabled the patterns equal the model prediction
    bit for bit.
    """
    rng = np.random.default_rng(noise.seed)
    probe = np.array(probe, dtype=complex)
    obj = np.array(obj, dtype=complex)
    if obj.ndim == 3:
        obj = obj[:, None]
    positions = np.asarray(positions, dtype=float).reshape(-1, 2)
    K = positions.shape[0]
    sigma = np.exp(rng.normal(0.0, noise.power_jitter_sigma, K)) if noise.power_jitter_sigma else np.ones(K)
    bg = np.zeros(detector_grid.shape) if background is None else np.broadcast_to(
        np.asarray(background, dtype=float), detector_grid.shape).copy()
    state = ModelState.create(probe, obj, positions, sigma, wavelengths, distance, bg,
                              probe_grid, detector_grid, guard=guard, propagator=propagator)

    def predict_all():
        out = np.empty((K,) + detector_grid.shape)
        for k in range(K):
            out[k], tape = predict_pattern(k, state)
            tape.release()
        return out

    patterns = predict_all()
    if noise.photons_per_shot is not None and K:
        signal = patterns - bg**2
        scale = noise.photons_per_shot / float(np.mean(signal.sum(axis=(1, 2))))
        state.probe.value *= np.sqrt(scale)
        patterns = predict_all()
        patterns = rng.poisson(patterns).astype(float)
    if noise.read_noise_sigma > 0:
        patterns = patterns + rng.normal(0.0, noise.read_noise_sigma, patterns.shape)
    if noise.enabled:
        patterns = np.maximum(patterns, 0.0)
        if noise.saturation is not None:
            patterns = np.minimum(patterns, noise.saturation)
    masks = np.ones(patterns.shape, dtype=bool)
    meta = dict(metadata or {})
    meta.setdefault("source", "simulator")
    ds = Dataset(patterns, masks, detector_grid, state.wavelengths.value.copy(), distance, positions,
                 theta=theta, metadata=meta)
    truth = TruthBundle(state.probe.value.copy(), state.object.value.copy(), positions.copy(), sigma,
                        state.wavelengths.value.copy(), float(distance), bg, probe_grid, dict(meta))
    return ds, truth


# ---------------------------------------------------------------------------
# oracles and helpers


def nudft_oracle(values: np.ndarray, grid: Grid, freqs: np.ndarray) -> np.ndarray:
    """Direct evaluation of ``sum_r f(r) exp(-2j*pi*(fy*y + fx*x)) / sqrt(ny*nx)``.

    ``freqs`` has shape ``(..., 2)`` holding ``(fy, fx)`` in 1/m; cost is
    O(pixels * points), so keep instances small.
    """
    values = np.asarray(values)
    freqs = np.asarray(freqs, dtype=float)
    y, x = grid.y, grid.x
    f = freqs.reshape(-1, 2)
    ey = np.exp(-2j * np.pi * np.outer(f[:, 0], y))
    ex = np.exp(-2j * np.pi * np.outer(f[:, 1], x))
    out = np.einsum("py,yx,px->p", ey, values, ex) / np.sqrt(grid.nx * grid.ny)
    return out.reshape(freqs.shape[:-1])


def illumination_map(probe, positions, probe_grid: Grid, obj_shape, guard: int = 2) -> np.ndarray:
    """Cumulative illumination ``sum_k sum_lm |P(r - s_k)|^2`` on the object grid (nearest-pixel shifts)."""
    from .model import ShiftExtract

    probe = np.asarray(probe)
    inten = np.sum(np.abs(probe.reshape((-1,) + probe.shape[-2:])) ** 2, axis=0)
    total = np.zeros(obj_shape)
    op = ShiftExtract(probe_grid.shape, probe_grid.pitch, guard)
    for k, s in enumerate(np.asarray(positions).reshape(-1, 2)):
        (r0, _, c0, _), frac = op.window(obj_shape, s)
        r, c = r0 + guard + int(round(frac[0])), c0 + guard + int(round(frac[1]))
        total[r : r + probe_grid.ny, c : c + probe_grid.nx] += inten
    return total


def illumination_region(illum: np.ndarray, fraction: float = 0.75) -> np.ndarray:
    """Smallest pixel set holding ``fraction`` of the cumulative illumination."""
    if not 0 < fraction <= 1:
        raise InvalidArgumentError("fraction must lie in (0, 1]")
    flat = illum.ravel()
    order = np.argsort(flat, kind="stable")[::-1]
    csum = np.cumsum(flat[order])
    n = int(np.searchsorted(csum, fraction * csum[-1])) + 1
    mask = np.zeros(flat.size, dtype=bool)
    mask[order[:n]] = True
    return mask.reshape(illum.shape)


def benchmark_instance(L: int, M: int, N: int, n: int = 64, n_shots: int = 4, seed: int = 0,
                       detector: int | None = None):
    """Small synthetic problem and a matching model state for timing runs."""
    rng = np.random.default_rng(seed)
    D = detector or n
    wl = 13.5e-9 * (1 + 0.1 * np.arange(L))
    z = 0.05
    det = make_grid(D, D, 15e-6, 15e-6)
    px = 0.9 * wl.min() * z / (D * det.px)
    pg = make_grid(n, n, px, px)
    probe = synthetic_probe(pg, wl, M, seed=seed)
    step = n * px / 4
    side = int(np.ceil(np.sqrt(n_shots)))
    pos = make_scan_grid(side, side, step, step, 0.0)[:n_shots]
    shape = object_shape_for_scan(pos, pg)
    obj = np.exp(1j * rng.uniform(-0.5, 0.5, (L, N) + shape)) * (0.5 + 0.5 * rng.random((L, N) + shape))
    ds, _ = synthesize_dataset(probe * 100, obj, pos, wl, z, pg, det)
    state = ModelState.create(probe, np.ones_like(obj), pos, np.ones(n_shots), wl, z,
                              np.ones(det.shape), pg, det)
    return ds, state


# ---------------------------------------------------------------------------
# configured closed-loop problems


def probe_diameter(probe, fraction: float = 0.9) -> float:
    """Diameter (pixels) of the disc whose area equals the pixel set holding ``fraction`` of the probe power."""
    inten = np.sum(np.abs(np.asarray(probe).reshape((-1,) + np.shape(probe)[-2:])) ** 2, axis=0)
    vals = np.sort(inten.ravel())[::-1]
    n = int(np.searchsorted(np.cumsum(vals), fraction * vals.sum())) + 1
    return float(2 * np.sqrt(n / np.pi))


def _coefficient(v):
    if v is None or np.isscalar(v):
        return v
    v = list(v)
    if len(v) != 2:
        raise InvalidArgumentError("complex coefficients are given as [real, imag]")
    return complex(v[0], v[1])


@dataclass
class SimulationConfig:
    """Everything needed to generate a synthetic reflection dataset.

    The sample pitch puts the shortest wavelength at the detector Nyquist
    limit (times ``band_margin``). The raster step is ``step_fraction`` of the
    probe diameter holding 90% of its power, jittered uniformly by
    ``jitter_fraction`` of the step. The nominal positions stored in the
    dataset differ from the true ones by uniform errors of
    ``position_error_px`` pixels. Without Poisson noise the probe is simply
    scaled so each wavelength carries ``photons`` counts per shot.
    """

    n: int = 64
    detector: int = 64
    detector_pitch: float = 15e-6
    wavelengths: tuple = (13.5e-9,)
    distance: float = 0.05
    band_margin: float = 1.0
    n_modes: int = 1
    scan: tuple = (5, 5)
    step_fraction: float = 0.35
    jitter_fraction: float = 0.3
    position_error_px: float = 0.0
    phantom: str = "siemens"
    spokes: int = 16
    oversample: int = 4
    height: float = 5e-9
    theta: float = 0.0
    structure: object = None
    substrate: object = None
    photons: float = 1e6
    poisson: bool = False
    read_noise: float = 0.0
    power_jitter: float = 0.0
    seed: int = 0
    object_margin: int = 4

    def __post_init__(self):
        self.wavelengths = tuple(float(w) for w in np.atleast_1d(self.wavelengths))
        self.scan = tuple(int(v) for v in np.broadcast_to(self.scan, (2,)))
        self.structure = _coefficient(self.structure)
        self.substrate = _coefficient(self.substrate)
        if self.phantom not in ("siemens", "grating"):
            raise InvalidArgumentError(f"unknown phantom {self.phantom!r}")
        if self.n < 4 or self.detector < 4 or min(self.scan) < 1:
            raise InvalidArgumentError("grid and scan sizes are too small")

    def phantom_spec(self, grid: Grid) -> PhantomSpec:
        kw = {}
        if self.structure is not None:
            kw["structure"] = self.structure
        if self.substrate is not None:
            kw["substrate"] = self.substrate
        return PhantomSpec(grid, self.wavelengths, height=self.height, theta=self.theta,
                           kind=self.phantom, **kw)


def simulate(cfg: SimulationConfig):
    """Generate ``(Dataset, TruthBundle)`` for ``cfg``; the dataset holds nominal positions."""
    wl = np.asarray(cfg.wavelengths)
    det = make_grid(cfg.detector, cfg.detector, cfg.detector_pitch, cfg.detector_pitch)
    px = cfg.band_margin * wl.min() * cfg.distance / (cfg.detector * cfg.detector_pitch)
    pg = make_grid(cfg.n, cfg.n, px, px)
    probe = synthetic_probe(pg, wl, cfg.n_modes, seed=cfg.seed + 1)
    step = cfg.step_fraction * probe_diameter(probe[0]) * px
    ny, nx = cfg.scan
    nominal = make_scan_grid(nx, ny, step, step, cfg.jitter_fraction * step, seed=cfg.seed + 2)
    rng = np.random.default_rng(cfg.seed + 3)
    true_pos = nominal + rng.uniform(-cfg.position_error_px, cfg.position_error_px, nominal.shape) * px
    shape = object_shape_for_scan(np.concatenate([nominal, true_pos]), pg, margin=cfg.object_margin)
    og = make_grid(shape[1], shape[0], px, px)
    spec = cfg.phantom_spec(og)
    if cfg.phantom == "siemens":
        obj = phantom_siemens(cfg.spokes, min(shape) * px / 2 * 0.95, spec, oversample=cfg.oversample)
    else:
        obj = phantom_chirped_grating(spec)
    noise = NoiseSpec(photons_per_shot=cfg.photons if cfg.poisson else None, read_noise_sigma=cfg.read_noise,
                      power_jitter_sigma=cfg.power_jitter, seed=cfg.seed + 4)
    if not cfg.poisson:
        probe = probe * np.sqrt(cfg.photons)
    ds, truth = synthesize_dataset(probe, obj.values, true_pos, wl, cfg.distance, pg, det, noise=noise,
                                   theta=cfg.theta, metadata={"seed": cfg.seed})
    ds.positions = nominal.copy()
    truth.metadata["fresnel_phase_difference"] = [float(v) for v in spec.fresnel_phase_difference()]
    return ds, truth


def truth_region(truth: TruthBundle, fraction: float = 0.75, wavelength: int = 0) -> np.ndarray:
    """Object pixels receiving ``fraction`` of the cumulative illumination of one wavelength."""
    illum = illumination_map(truth.probe[wavelength], truth.positions, truth.probe_grid, truth.object.shape[-2:])
    return illumination_region(illum, fraction)
