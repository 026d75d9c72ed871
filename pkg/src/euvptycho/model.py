"""The diffraction forward model as a chain of differentiable nodes.

For shot ``k`` the predicted pattern is::

    I_k = sum_{l,m,n} |D_{l,z}[ sigma_k * P_{l,m} * O_{l,n}(r - s_k) ]|**2 + b**2

built from five stages: power scaling, object shift/extraction, probe-object
product, propagation to the detector, and detection (incoherent sum plus
background). The detector validity mask is not applied here; it is handed
to the loss so excluded pixels simply do not contribute.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .autodiff import Op, Tape, Variable, WindowGrad
from .errors import GraphConstructionError, InvalidArgumentError, ScanRangeError
from .field import Grid, dft2, idft2
from .propagators import CZTPropagate

__all__ = [
    "DetectorModel",
    "ModelState",
    "Select",
    "ScaleProbe",
    "ShiftExtract",
    "Interact",
    "Fraunhofer",
    "Abs2",
    "ModalSum",
    "AddBackground",
    "scale_probe",
    "shift_extract",
    "interact",
    "detect",
    "object_shape_for_scan",
    "predict_pattern",
    "build_shot_graph",
]


@dataclass
class DetectorModel:
    """Per-shot validity masks ``(K, Dy, Dx)`` (or one shared ``(Dy, Dx)``) and background root."""

    valid_mask: np.ndarray
    background_root: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.valid_mask)
        if not np.isin(m, (0, 1)).all():
            raise InvalidArgumentError("mask entries must be 0 or 1")
        self.valid_mask = m.astype(bool)
        self.background_root = np.asarray(self.background_root, dtype=float)

    @property
    def background(self) -> np.ndarray:
        return self.background_root**2

    def mask_for(self, k: int) -> np.ndarray:
        return self.valid_mask if self.valid_mask.ndim == 2 else self.valid_mask[k]


# ---------------------------------------------------------------------------
# nodes


class Select(Op):
    """Row ``k`` of a per-shot table."""

    name = "select"
    linear = True

    def __init__(self, k: int):
        self.k = k

    def forward(self, table):
        return np.array(table[self.k]), None

    def backward(self, saved, g, needs):
        return (WindowGrad((self.k,), np.real(g) if np.isrealobj(g) else g),)


class ScaleProbe(Op):
    """Multiply every probe mode by the amplitude factor ``sigma`` (power scales as sigma**2)."""

    name = "scale_probe"

    def forward(self, probe, sigma):
        return probe * sigma, (probe, sigma)

    def backward(self, saved, g, needs):
        probe, sigma = saved
        gp = g * sigma if needs[0] else None
        gs = np.asarray(np.real(np.vdot(probe, g))) if needs[1] else None
        return gp, gs


def _fourier_shift_phase(shape, frac):
    fy = sfft.fftfreq(shape[0])[:, None]
    fx = sfft.fftfreq(shape[1])[None, :]
    return np.exp(2j * np.pi * (fy * frac[0] + fx * frac[1])), fy, fx


class ShiftExtract(Op):
    """Object patch seen by the probe at scan position ``s`` (metres, ``(y, x)``).

    The integer part of the shift selects a window with ``guard`` extra pixels
    on every side; the fractional remainder is applied as a Fourier-domain
    linear phase on that window, which is then cropped to the probe size.
    """

    name = "shift_extract"

    def __init__(self, probe_shape, pitch, guard: int = 2, shot: int | None = None):
        self.h, self.w = probe_shape
        self.pitch = np.asarray(pitch, dtype=float)
        self.guard = int(guard)
        self.shot = shot

    def window(self, obj_shape, s):
        H, W = obj_shape
        t = np.array([H // 2 - self.h // 2, W // 2 - self.w // 2]) - np.asarray(s, dtype=float) / self.pitch
        i0 = np.floor(t).astype(int)
        frac = t - i0
        g = self.guard
        r0, c0 = i0 - g
        r1, c1 = r0 + self.h + 2 * g, c0 + self.w + 2 * g
        if r0 < 0 or c0 < 0 or r1 > H or c1 > W:
            raise ScanRangeError(
                f"shot {self.shot}: probe window rows {r0}:{r1}, cols {c0}:{c1} leaves the "
                f"{H}x{W} object", shot=self.shot)
        return (int(r0), int(r1), int(c0), int(c1)), frac

    def forward(self, obj, s):
        (r0, r1, c0, c1), frac = self.window(obj.shape[-2:], s)
        win = obj[..., r0:r1, c0:c1]
        e, _, _ = _fourier_shift_phase(win.shape[-2:], frac)
        spec = sfft.fft2(win) * e
        g = self.guard
        patch = sfft.ifft2(spec)[..., g : g + self.h, g : g + self.w]
        return patch, (spec, e, (r0, r1, c0, c1))

    def backward(self, saved, g, needs):
        spec, e, (r0, r1, c0, c1) = saved
        gd = self.guard
        padded = np.zeros(spec.shape, dtype=np.result_type(spec.dtype, g.dtype))
        padded[..., gd : gd + self.h, gd : gd + self.w] = g
        gf = sfft.fft2(padded)
        g_obj = g_s = None
        if needs[0]:
            g_obj = WindowGrad((Ellipsis, slice(r0, r1), slice(c0, c1)), sfft.ifft2(gf * np.conj(e)))
        if needs[1]:
            fy = sfft.fftfreq(spec.shape[-2])[:, None]
            fx = sfft.fftfreq(spec.shape[-1])[None, :]
            cross = np.conj(gf) * spec / (spec.shape[-2] * spec.shape[-1])
            d_frac = np.array([np.real(np.sum(cross * (2j * np.pi * fy))),
                               np.real(np.sum(cross * (2j * np.pi * fx)))])
            g_s = -d_frac / self.pitch
        return g_obj, g_s


class Interact(Op):
    """Exit waves ``(L, M, N, h, w)`` from probe modes ``(L, M, ...)`` and object modes ``(L, N, ...)``."""

    name = "interact"

    def forward(self, probe, patch):
        if probe.shape[0] != patch.shape[0]:
            raise ValueError(f"probe has {probe.shape[0]} wavelengths, object has {patch.shape[0]}")
        if probe.shape[-2:] != patch.shape[-2:]:
            raise ValueError(f"probe {probe.shape[-2:]} and object patch {patch.shape[-2:]} differ")
        return probe[:, :, None] * patch[:, None], (probe, patch)

    def backward(self, saved, g, needs):
        probe, patch = saved
        gp = np.sum(g * np.conj(patch)[:, None], axis=2) if needs[0] else None
        go = np.sum(g * np.conj(probe)[:, :, None], axis=1) if needs[1] else None
        return gp, go


class Fraunhofer(Op):
    """Centred unitary DFT of the last two axes; no dependence on wavelength or distance."""

    name = "fraunhofer"
    linear = True

    def forward(self, fields):
        from .instrument import counters

        counters.add_propagations(int(np.prod(fields.shape[:-2])))
        return dft2(fields), None

    def backward(self, saved, g, needs):
        return (idft2(g),)


class Abs2(Op):
    name = "abs2"

    def forward(self, f):
        return f.real**2 + f.imag**2, f

    def backward(self, f, g, needs):
        return (2.0 * g * f,)


class ModalSum(Op):
    """Sum over every axis but the last two."""

    name = "modal_sum"
    linear = True

    def forward(self, x):
        return x.reshape((-1,) + x.shape[-2:]).sum(axis=0), x.shape

    def backward(self, shape, g, needs):
        return (np.broadcast_to(g, shape).copy(),)


class AddBackground(Op):
    """``I + b**2``: the background stays non-negative for any real ``b``."""

    name = "add_background"

    def forward(self, intensity, b):
        if np.shape(b) != intensity.shape:
            raise ValueError(f"background {np.shape(b)} does not match detector {intensity.shape}")
        return intensity + b * b, b

    def backward(self, b, g, needs):
        return (g if needs[0] else None), (2.0 * b * g if needs[1] else None)


# ---------------------------------------------------------------------------
# plain-array versions of the stages


def scale_probe(probe: np.ndarray, sigma: float) -> np.ndarray:
    if not sigma > 0:
        raise InvalidArgumentError("power coefficient must be positive")
    return ScaleProbe().forward(np.asarray(probe), sigma)[0]


def shift_extract(obj: np.ndarray, s, probe_grid: Grid, guard: int = 2, shot=None) -> np.ndarray:
    op = ShiftExtract(probe_grid.shape, probe_grid.pitch, guard, shot)
    return op.forward(np.asarray(obj), np.asarray(s, dtype=float))[0]


def interact(probe: np.ndarray, patch: np.ndarray) -> np.ndarray:
    try:
        return Interact().forward(np.asarray(probe), np.asarray(patch))[0]
    except ValueError as exc:
        raise GraphConstructionError(str(exc)) from exc


def detect(fields: np.ndarray, background_root=0.0) -> np.ndarray:
    """Incoherent sum of ``|fields|**2`` over all leading axes plus ``b**2``."""
    fields = np.asarray(fields)
    inten = ModalSum().forward(Abs2().forward(fields)[0])[0]
    return inten + np.broadcast_to(np.asarray(background_root, dtype=float) ** 2, inten.shape)


def object_shape_for_scan(positions, probe_grid: Grid, guard: int = 2, margin: int = 2):
    """Smallest object array (odd-safe, centred) that contains every scan window."""
    pos = np.asarray(positions, dtype=float).reshape(-1, 2)
    reach = np.ceil(np.max(np.abs(pos), axis=0) / np.array(probe_grid.pitch)).astype(int) if len(pos) else (0, 0)
    return tuple(int(n + 2 * (r + guard + margin + 1)) for n, r in zip(probe_grid.shape, reach))


# ---------------------------------------------------------------------------
# the full per-shot graph


@dataclass
class ModelState:
    """All optimisable variables plus the fixed geometry of the model."""

    probe: Variable
    object: Variable
    positions: Variable
    powers: Variable
    wavelengths: Variable
    distance: Variable
    background: Variable
    probe_grid: Grid
    detector_grid: Grid
    guard: int = 2
    propagator: str = "czt"
    check_finite: bool = False
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, probe, obj, positions, powers, wavelengths, distance, background,
               probe_grid: Grid, detector_grid: Grid, **kw) -> "ModelState":
        probe = np.asarray(probe)
        obj = np.asarray(obj)
        ctype = np.result_type(probe.dtype, obj.dtype, np.complex64)
        rtype = np.float32 if ctype == np.complex64 else np.float64
        return cls(
            probe=Variable(probe.astype(ctype), "probe"),
            object=Variable(obj.astype(ctype), "object"),
            positions=Variable(np.asarray(positions, dtype=rtype).reshape(-1, 2), "position"),
            powers=Variable(np.asarray(powers, dtype=rtype), "power"),
            wavelengths=Variable(np.atleast_1d(np.asarray(wavelengths, dtype=rtype)), "wavelength"),
            distance=Variable(np.asarray(distance, dtype=rtype).reshape(()), "distance"),
            background=Variable(np.asarray(background, dtype=rtype), "background"),
            probe_grid=probe_grid,
            detector_grid=detector_grid,
            **kw,
        )

    @property
    def variables(self) -> list[Variable]:
        return [self.probe, self.object, self.positions, self.powers,
                self.wavelengths, self.distance, self.background]

    def by_role(self, role: str) -> Variable:
        for v in self.variables:
            if v.role == role:
                return v
        raise KeyError(role)

    @property
    def n_shots(self) -> int:
        return self.positions.value.shape[0]

    def validate(self):
        L, M = self.probe.value.shape[:2]
        if self.object.value.shape[0] != L:
            raise GraphConstructionError("probe and object wavelength counts differ")
        if self.wavelengths.value.shape != (L,):
            raise GraphConstructionError("one wavelength per probe group is required")
        if self.powers.value.shape != (self.n_shots,):
            raise GraphConstructionError("one power coefficient per scan position is required")
        if self.background.value.shape != self.detector_grid.shape:
            raise GraphConstructionError("background must live on the detector grid")
        if self.probe.value.shape[-2:] != self.probe_grid.shape:
            raise GraphConstructionError("probe array does not match the probe grid")


def build_shot_graph(k: int, state: ModelState, tape: Tape):
    """Record the composite model for shot ``k`` on ``tape``; returns the prediction tensor."""
    P = tape.watch(state.probe)
    O = tape.watch(state.object)
    S = tape.watch(state.positions)
    SIG = tape.watch(state.powers)
    WL = tape.watch(state.wavelengths)
    Z = tape.watch(state.distance)
    B = tape.watch(state.background)
    s_k = tape.apply(Select(k), S)
    sig_k = tape.apply(Select(k), SIG)
    probe_k = tape.apply(ScaleProbe(), P, sig_k)
    patch = tape.apply(ShiftExtract(state.probe_grid.shape, state.probe_grid.pitch, state.guard, k), O, s_k)
    exit_waves = tape.apply(Interact(), probe_k, patch)
    if state.propagator == "czt":
        far = tape.apply(CZTPropagate(state.probe_grid, state.detector_grid), exit_waves, WL, Z)
    elif state.propagator == "fraunhofer":
        far = tape.apply(Fraunhofer(), exit_waves)
    else:
        raise GraphConstructionError(f"unknown propagator {state.propagator!r}")
    inten = tape.apply(ModalSum(), tape.apply(Abs2(), far))
    return tape.apply(AddBackground(), inten, B)


def predict_pattern(k: int, state: ModelState, check_finite: bool | None = None):
    """Predicted pattern of shot ``k`` and the tape that produced it."""
    state.validate()
    if not 0 <= k < state.n_shots:
        raise InvalidArgumentError(f"shot index {k} outside 0..{state.n_shots - 1}")
    tape = Tape(check_finite=state.check_finite if check_finite is None else check_finite)
    out = build_shot_graph(k, state, tape)
    return out.value, tape
