"""Joint Adam optimisation of every model variable.

Each mini-batch runs one forward/backward pass per shot (independent tapes,
optionally on a thread pool), sums the gradient sets in a fixed shot order
and applies a single Adam update to all enabled roles. There is no secondary
loop for positions, distance or wavelength: they come out of the same
backward pass as the probe and object.
"""

from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ROLES, GradcheckReport, GradientSet, Variable, backpropagate, gradcheck
from .data import Dataset
from .errors import DivergenceError, InvalidArgumentError, NumericalFailureError
from .field import Grid, ModalStack, ScanTable, make_grid
from .instrument import counters
from .model import ModelState, object_shape_for_scan, predict_pattern
from .objectives import LossConfig, tv_l1_regularize

log = logging.getLogger(__name__)

__all__ = [
    "AdamState",
    "RoleSchedule",
    "Schedule",
    "EllipseSpec",
    "InitConfig",
    "RegularizerConfig",
    "ReconResult",
    "adam_step",
    "elliptical_aperture",
    "initial_state",
    "batch_loss_and_grad",
    "reconstruct",
    "benchmark_run",
    "gradcheck_instance",
    "model_gradcheck",
]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.m.values()) + sum(a.nbytes for a in self.v.values())


def _as_real(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    return a.view(a.real.dtype) if np.iscomplexobj(a) else a


def adam_step(state: AdamState, variables, grads: GradientSet, lr, iteration: int | None = None):
    """Bias-corrected Adam update, in place, for every variable with a gradient.

    ``lr`` is a scalar or a mapping ``role -> learning rate`` (array-valued
    rates broadcast against the variable). Complex variables are updated as
    interleaved real/imaginary pairs. A zero gradient leaves values unchanged.
    """
    state.t += 1
    for var in variables:
        g = grads.get(var.id)
        if g is None:
            continue
        rate = lr.get(var.role) if isinstance(lr, dict) else lr
        if rate is None:
            continue
        g = np.asarray(g)
        if not np.all(np.isfinite(g)):
            raise NumericalFailureError(
                f"non-finite gradient for role {var.role!r} at iteration {iteration if iteration is not None else state.t}")
        if np.iscomplexobj(var.value):
            g = g.astype(var.value.dtype, copy=False)
        else:
            g = np.real(g).astype(var.value.dtype, copy=False)
        gr = _as_real(g)
        if var.id not in state.m:
            state.m[var.id] = np.zeros_like(gr)
            state.v[var.id] = np.zeros_like(gr)
            state.steps[var.id] = 0
            counters.allocate(2 * gr.nbytes)
        m, v = state.m[var.id], state.v[var.id]
        state.steps[var.id] += 1
        t = state.steps[var.id]
        m *= state.beta1
        m += (1 - state.beta1) * gr
        v *= state.beta2
        v += (1 - state.beta2) * gr * gr
        mhat = m / (1 - state.beta1**t)
        vhat = v / (1 - state.beta2**t)
        step = mhat / (np.sqrt(vhat) + state.eps)
        rate = np.asarray(rate, dtype=float)
        if np.iscomplexobj(var.value):
            step = step.view(var.value.dtype)
        var.value -= rate * step.reshape(var.value.shape)
    return state


# ---------------------------------------------------------------------------
# schedule and initialisation


@dataclass(frozen=True)
class RoleSchedule:
    """When a role starts moving (1-based epoch, ``None`` = frozen) and how fast."""

    start_epoch: int | None = 1
    lr: float = 1e-2
    decay: float = 1.0
    relative: bool = True


def _default_roles():
    return {
        "probe": RoleSchedule(1, 1e-2),
        "object": RoleSchedule(1, 1e-2),
        "power": RoleSchedule(11, 1e-2),
        "background": RoleSchedule(11, 1e-3),
        "position": RoleSchedule(21, 0.05),
        "distance": RoleSchedule(31, 1e-4),
        "wavelength": RoleSchedule(31, 1e-4),
    }


@dataclass
class Schedule:
    roles: dict = field(default_factory=_default_roles)
    batch_size: int | None = None
    epochs: int = 50
    seed: int = 0
    max_iterations: int | None = None
    workers: int = 1
    shuffle: bool = True

    def __post_init__(self):
        roles = _default_roles()
        for k, v in dict(self.roles).items():
            if k not in ROLES:
                raise InvalidArgumentError(f"unknown role {k!r} in schedule")
            roles[k] = v if isinstance(v, RoleSchedule) else RoleSchedule(**v)
            if roles[k].lr < 0:
                raise InvalidArgumentError(f"learning rate of {k} must be non-negative")
        self.roles = roles
        if self.epochs < 0:
            raise InvalidArgumentError("epoch count must be non-negative")

    def enabled(self, role: str, epoch: int) -> bool:
        r = self.roles[role]
        return r.start_epoch is not None and epoch >= r.start_epoch and r.lr > 0

    def only(self, *roles, **overrides) -> "Schedule":
        """Copy with every role not listed frozen; listed roles start at epoch 1."""
        new = {}
        for k, r in self.roles.items():
            new[k] = replace(r, start_epoch=1) if k in roles else replace(r, start_epoch=None)
        return replace(self, roles=new, **overrides)


@dataclass(frozen=True)
class EllipseSpec:
    """Elliptical aperture on the probe grid: centre ``(y, x)`` and semi-axes in metres."""

    center: tuple = (0.0, 0.0)
    semi_axes: tuple | None = None
    rotation: float = 0.0


@dataclass
class InitConfig:
    probe_shape: tuple = (64, 64)
    sample_pitch: tuple | None = None
    band_margin: float = 1.0
    n_probe_modes: int = 1
    n_object_modes: int = 1
    apertures: list | None = None
    object_value: complex = 1.0
    power_value: float = 1.0
    background_value: float = 1.0
    match_power: bool = True
    higher_mode_weight: float = 0.3
    mode_noise: float = 0.05
    guard: int = 2
    propagator: str = "czt"
    precision: str = "f64"
    seed: int = 0
    probe: np.ndarray | None = None
    object: np.ndarray | None = None
    object_shape: tuple | None = None


@dataclass(frozen=True)
class RegularizerConfig:
    w_l1: float = 0.0
    w_tv: float = 0.0
    eps: float = 1e-6


def elliptical_aperture(grid: Grid, spec: EllipseSpec) -> np.ndarray:
    yy, xx = grid.mesh()
    ay, ax = spec.semi_axes if spec.semi_axes is not None else (grid.ny * grid.py / 4, grid.nx * grid.px / 4)
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    dy, dx = yy - spec.center[0], xx - spec.center[1]
    u = c * dx + s * dy
    w = -s * dx + c * dy
    return ((u / ax) ** 2 + (w / ay) ** 2 <= 1.0).astype(float)


def _mode_polynomials(grid: Grid, count: int):
    yy, xx = grid.mesh()
    yy = yy / (grid.ny * grid.py / 2)
    xx = xx / (grid.nx * grid.px / 2)
    polys = [xx, yy, xx * yy, xx**2 - yy**2, 2 * (xx**2 + yy**2) - 1]
    while len(polys) < count:
        polys.append(xx ** (len(polys) % 3 + 1) * yy ** (len(polys) % 2))
    return polys[:count]


def sample_grid_for(dataset: Dataset, shape, band_margin=1.0) -> Grid:
    """Sample pitch placing the shortest wavelength at the detector Nyquist limit."""
    dg = dataset.detector_grid
    lam = float(np.min(dataset.wavelengths)) * dataset.distance
    return make_grid(shape[1], shape[0], band_margin * lam / (dg.nx * dg.px), band_margin * lam / (dg.ny * dg.py))


def initial_state(dataset: Dataset, init: InitConfig) -> ModelState:
    """Initial guesses: elliptical probe apertures, a flat unit object, unit powers and background."""
    rng = np.random.default_rng(init.seed)
    L = dataset.wavelengths.size
    M, N = init.n_probe_modes, init.n_object_modes
    if init.sample_pitch is not None:
        pg = make_grid(init.probe_shape[1], init.probe_shape[0], init.sample_pitch[1], init.sample_pitch[0])
    else:
        pg = sample_grid_for(dataset, init.probe_shape, init.band_margin)
    ctype = np.complex64 if init.precision == "f32" else np.complex128
    if init.probe is not None:
        probe = np.array(init.probe, dtype=ctype).reshape((L, M) + pg.shape)
    else:
        specs = init.apertures or [EllipseSpec()] * L
        if len(specs) != L:
            raise InvalidArgumentError(f"{len(specs)} aperture specs for {L} wavelengths")
        probe = np.zeros((L, M) + pg.shape, dtype=ctype)
        for l, spec in enumerate(specs):
            ap = elliptical_aperture(pg, spec if isinstance(spec, EllipseSpec) else EllipseSpec(**spec))
            probe[l, 0] = ap
            for j, poly in enumerate(_mode_polynomials(pg, M - 1), start=1):
                noise = init.mode_noise * (rng.standard_normal(pg.shape) + 1j * rng.standard_normal(pg.shape))
                mode = ap * (poly + noise)
                peak = np.max(np.abs(mode)) or 1.0
                probe[l, j] = init.higher_mode_weight * mode / peak
    if init.object is not None:
        obj = np.array(init.object, dtype=ctype)
        if obj.ndim == 2:
            obj = np.broadcast_to(obj, (L, N) + obj.shape).copy()
    else:
        shape = init.object_shape or object_shape_for_scan(dataset.positions, pg, init.guard)
        obj = np.full((L, N) + tuple(shape), init.object_value, dtype=ctype)
        for n in range(1, N):
            obj[:, n] *= 0.1 * (1 + 0.1 * rng.standard_normal(obj.shape[-2:]))
    K = dataset.n_shots
    st = ModelState.create(
        probe, obj, dataset.positions, np.full(K, init.power_value), dataset.wavelengths,
        dataset.distance, np.full(dataset.detector_grid.shape, init.background_value),
        pg, dataset.detector_grid, guard=init.guard, propagator=init.propagator)
    if init.match_power and init.probe is None and K:
        b = st.background.value.copy()
        st.background.value[...] = 0
        pred, tape = predict_pattern(0, st)
        tape.release()
        st.background.value[...] = b
        m = dataset.masks
        target = float(np.sum(np.where(m, dataset.patterns, 0)) / max(np.sum(m), 1))
        have = float(np.sum(np.where(m[0], pred, 0)) / max(np.sum(m[0]), 1))
        if have > 0 and target > 0:
            st.probe.value *= np.sqrt(target / have)
    return st


# ---------------------------------------------------------------------------
# batch gradients


def _shot_loss_and_grad(k, state, dataset, loss, with_grad):
    pred, tape = predict_pattern(k, state)
    val, dl = loss(pred, dataset.patterns[k], dataset.masks[k])
    if with_grad:
        return val, backpropagate(tape, dl)
    tape.release()
    return val, None


def batch_loss_and_grad(state: ModelState, dataset: Dataset, shots, loss: LossConfig,
                        with_grad: bool = True, workers: int = 1):
    """Summed loss and gradient over ``shots``; reduction order is the order of ``shots``."""
    shots = list(shots)
    if workers > 1 and len(shots) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda k: _shot_loss_and_grad(k, state, dataset, loss, with_grad), shots))
    else:
        results = [_shot_loss_and_grad(k, state, dataset, loss, with_grad) for k in shots]
    total = 0.0
    grads = GradientSet()
    for val, g in results:
        total += val
        if g is not None:
            grads.accumulate(g)
    return total, grads


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconResult:
    probe: ModalStack
    object: ModalStack
    scan: ScanTable
    wavelengths: np.ndarray
    distance: float
    background: np.ndarray
    loss_history: list
    log: list
    state: ModelState

    def write_log(self, path):
        fields = ["iteration", "epoch", "loss", "time_ms", "live_bytes", "propagations"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.log)


def _lr_scales(state: ModelState) -> dict:
    return {
        "probe": float(np.max(np.abs(state.probe.value))) or 1.0,
        "object": float(np.max(np.abs(state.object.value))) or 1.0,
        "position": float(np.mean(state.probe_grid.pitch)),
        "power": 1.0,
        "wavelength": state.wavelengths.value.copy(),
        "distance": float(state.distance.value),
        "background": max(float(np.max(np.abs(state.background.value))), 1.0),
    }


def _result(state: ModelState, history, rows) -> ReconResult:
    wl = state.wavelengths.value.copy()
    return ReconResult(
        probe=ModalStack(state.probe_grid, wl, state.probe.value.copy()),
        object=ModalStack(make_grid(state.object.value.shape[-1], state.object.value.shape[-2],
                                    state.probe_grid.px, state.probe_grid.py), wl, state.object.value.copy()),
        scan=ScanTable(state.positions.value.copy(), np.abs(state.powers.value.copy())),
        wavelengths=wl,
        distance=float(state.distance.value),
        background=state.background.value**2,
        loss_history=history,
        log=rows,
        state=state,
    )


def reconstruct(dataset: Dataset, init: InitConfig | None = None, schedule: Schedule | None = None,
                loss: LossConfig | None = None, regularization: RegularizerConfig | None = None,
                state: ModelState | None = None, callback=None, divergence_factor: float = 1e3,
                divergence_patience: int = 100) -> ReconResult:
    """Run the staged Adam reconstruction.

    ``state`` may be supplied to continue from (or start at) explicit
    variable values; otherwise it is built by :func:`initial_state`.
    ``callback(iteration, state, loss)`` is invoked after every update.
    """
    init = init or InitConfig()
    schedule = schedule or Schedule()
    loss = loss or LossConfig()
    K = dataset.n_shots
    if K == 0:
        raise InvalidArgumentError("dataset has no shots")
    bs = schedule.batch_size or K
    if not 1 <= bs <= K:
        raise InvalidArgumentError(f"batch size must lie in [1, {K}]")
    if state is None:
        state = initial_state(dataset, init)
    state.validate()
    scales = _lr_scales(state)
    adam = AdamState()
    rng = np.random.default_rng(schedule.seed)
    var_bytes = sum(v.value.nbytes for v in state.variables)
    counters.allocate(var_bytes)
    history, rows = [], []
    first_loss = None
    bad = 0
    it = 0
    try:
        for epoch in range(1, schedule.epochs + 1):
            enabled = {r for r in ROLES if schedule.enabled(r, epoch)}
            for v in state.variables:
                v.requires_grad = v.role in enabled
            lr = {}
            for r in enabled:
                rs = schedule.roles[r]
                base = rs.lr * (scales[r] if rs.relative else 1.0)
                lr[r] = base * rs.decay ** (epoch - rs.start_epoch)
            order = rng.permutation(K) if schedule.shuffle else np.arange(K)
            for start in range(0, K, bs):
                if schedule.max_iterations is not None and it >= schedule.max_iterations:
                    break
                shots = order[start : start + bs]
                counters.reset_peak()
                p0 = counters.propagations
                t0 = time.perf_counter()
                val, grads = batch_loss_and_grad(state, dataset, shots, loss, with_grad=bool(enabled),
                                                 workers=schedule.workers)
                if regularization and "object" in enabled and (regularization.w_l1 or regularization.w_tv):
                    frac = len(shots) / K
                    rv, rg = tv_l1_regularize(state.object.value, frac * regularization.w_l1,
                                              frac * regularization.w_tv, regularization.eps)
                    val += rv
                    grads[state.object.id] = grads.get(state.object.id, 0) + rg
                with_live = counters.peak_bytes
                if enabled:
                    adam_step(adam, state.variables, grads, lr, iteration=it)
                elapsed = (time.perf_counter() - t0) * 1e3
                if first_loss is None:
                    first_loss = val
                if not np.isfinite(val):
                    raise NumericalFailureError(f"non-finite loss at iteration {it}")
                bad = bad + 1 if val > first_loss + (divergence_factor - 1) * abs(first_loss) else 0
                if bad >= divergence_patience:
                    raise DivergenceError(
                        f"loss {val:.4g} exceeded {divergence_factor:g}x the initial {first_loss:.4g} "
                        f"for {bad} iterations (epoch {epoch}, iteration {it})")
                history.append(val)
                rows.append({"iteration": it, "epoch": epoch, "loss": val, "time_ms": elapsed,
                             "live_bytes": max(with_live, counters.peak_bytes),
                             "propagations": counters.propagations - p0})
                if callback is not None:
                    callback(it, state, val)
                it += 1
            if schedule.max_iterations is not None and it >= schedule.max_iterations:
                break
    finally:
        counters.release(var_bytes + adam.nbytes())
        for v in state.variables:
            v.requires_grad = True
    if len(history) >= 100:
        a, b = np.mean(history[-100:-50]), np.mean(history[-50:])
        if b > a:
            log.warning("moving-average loss increased over the last 100 iterations (%.4g -> %.4g)", a, b)
    return _result(state, history, rows)


# ---------------------------------------------------------------------------
# scaling benchmark


def benchmark_run(sizes, iterations: int = 5, n: int = 64, n_shots: int = 4,
                  roles=("probe", "object"), seed: int = 0, warmup: int = 1):
    """Time per iteration and peak live bytes for each ``(L, M, N)`` in ``sizes``.

    Returns a list of dicts with keys ``L, M, N, propagations, time_ms,
    peak_bytes, roles``; ``propagations`` is counted per shot.
    """
    from .simulator import benchmark_instance

    report = []
    for L, M, N in sizes:
        dataset, state = benchmark_instance(L, M, N, n=n, n_shots=n_shots, seed=seed)
        lr = {r: 1e-3 * (s if np.ndim(s) == 0 else s) for r, s in _lr_scales(state).items() if r in roles}
        for v in state.variables:
            v.requires_grad = v.role in roles
        adam = AdamState()
        times, peaks, props = [], [], []
        loss = LossConfig()
        for i in range(warmup + iterations):
            counters.reset_peak()
            base = counters.live_bytes
            p0 = counters.propagations
            t0 = time.perf_counter()
            _, grads = batch_loss_and_grad(state, dataset, range(dataset.n_shots), loss)
            adam_step(adam, state.variables, grads, lr)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1e3)
                peaks.append(counters.peak_bytes - base + adam.nbytes() + sum(v.value.nbytes for v in state.variables))
                props.append((counters.propagations - p0) // dataset.n_shots)
        counters.release(adam.nbytes())
        report.append({"L": L, "M": M, "N": N, "propagations": props[-1], "time_ms": float(np.median(times)),
                       "peak_bytes": int(max(peaks)), "roles": tuple(roles)})
    return report


# finite-difference steps for roles whose natural scale is far from one
GRADCHECK_STEPS = {"position": 1e-12, "wavelength": 1e-14, "distance": 1e-8}


def gradcheck_instance(n: int = 32, L: int = 2, M: int = 2, N: int = 1, n_shots: int = 3, seed: int = 1):
    """Random model state with every role live and a perturbed dataset to fit.

    Probe and object are complex Gaussian noise, powers and background are
    away from one, and the measurements are the model prediction times
    uniform noise, so no gradient vanishes at the check point.
    """
    rng = np.random.default_rng(seed)
    pg = make_grid(n, n, 40e-9, 40e-9)
    wl = 17.3e-9 * (1 + 0.0364 * np.arange(L))
    z = 0.01
    dp = 0.9 * wl.min() * z / (n * pg.px)
    dg = make_grid(n, n, dp, dp)
    pos = rng.uniform(-3e-7, 3e-7, (n_shots, 2))
    H, W = object_shape_for_scan(pos, pg)
    P = rng.standard_normal((L, M, n, n)) + 1j * rng.standard_normal((L, M, n, n))
    O = np.exp(1j * rng.standard_normal((L, N, H, W))) * (0.5 + rng.random((L, N, H, W)))
    powers = 1.0 + 0.1 * rng.standard_normal(n_shots)
    state = ModelState.create(P, O, pos, powers, wl, z, rng.random((n, n)) + 0.5, pg, dg)
    meas = np.empty((n_shots, n, n))
    for k in range(n_shots):
        pred, tape = predict_pattern(k, state)
        tape.release()
        meas[k] = pred * rng.uniform(0.5, 1.5, (n, n))
    ds = Dataset(meas, np.ones(meas.shape, dtype=bool), dg, wl, z, pos)
    return ds, state


def model_gradcheck(dataset: Dataset, state: ModelState, loss: LossConfig | None = None,
                    roles=ROLES, seed: int = 0, **kw) -> GradcheckReport:
    """Finite-difference check of the summed loss gradient for each role in ``roles``."""
    loss = loss or LossConfig()
    for v in state.variables:
        v.requires_grad = v.role in roles
    shots = range(dataset.n_shots)

    def loss_and_grad(with_grad):
        return batch_loss_and_grad(state, dataset, shots, loss, with_grad)

    kw.setdefault("eps", GRADCHECK_STEPS)
    return gradcheck(loss_and_grad, state.variables, seed=seed, **kw)
