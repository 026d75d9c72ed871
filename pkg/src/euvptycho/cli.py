"""Command-line entry points.

Every subcommand accepts ``--config`` (YAML or JSON), ``--seed``, ``--out`` and
``--precision``. Command-line flags override config values. Exit codes: 0 on
success, 2 for argument/configuration problems, 3 for data problems and 4
for numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import InvalidArgumentError, PtychoError

EXIT_OK = 0
EXIT_ARGUMENT = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
_CATEGORY_EXIT = {"argument": EXIT_ARGUMENT, "data": EXIT_DATA, "numerical": EXIT_NUMERICAL}

log = logging.getLogger("euvptycho")


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> dict:
    return io.load_config(args.config) if args.config else {}


def _opt(args, cfg: dict, key: str, default=None):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.get(key, default)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    from .simulator import SimulationConfig, simulate

    cfg = _config(args)
    cfg = dict(cfg.get("simulation", cfg))
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        sim = SimulationConfig(**cfg)
    except TypeError as e:
        raise InvalidArgumentError(f"bad simulation config: {e}") from e
    ds, truth = simulate(sim)
    out = _out(args, "simulated")
    io.write_dataset(out / "dataset", ds)
    io.write_truth(out / "truth", truth)
    for l in range(truth.object.shape[0]):
        io.render_amplitude_hue(truth.object[l, 0], out / f"object_truth_l{l}.png")
    print(f"wrote {ds.n_shots} patterns to {out / 'dataset'}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    from .tilt import NOISE_FLOOR, SATURATION_LEVEL, TiltGeometry, preprocess_frames

    cfg = _config(args)
    frames = _opt(args, cfg, "frames")
    if frames is None:
        raise InvalidArgumentError("preprocess needs a frames container")
    raw, dark, pos, wl, theta, dist, grid, meta = io.read_frames(frames)
    lo, hi = _opt(args, cfg, "thresholds", (NOISE_FLOOR, SATURATION_LEVEL))
    geom = TiltGeometry(theta, dist, grid, tilt_axis=int(_opt(args, cfg, "tilt_axis", 1)))
    ds = preprocess_frames(raw, dark, geom, wl, pos, thresholds=(float(lo), float(hi)),
                           center=not _opt(args, cfg, "no_center", False))
    ds.metadata.update({k: v for k, v in meta.items() if k not in ds.metadata})
    out = _out(args, "preprocessed")
    io.write_dataset(out / "dataset", ds)
    print(f"wrote {ds.n_shots} corrected patterns on a {ds.detector_grid.ny}x{ds.detector_grid.nx} grid "
          f"to {out / 'dataset'}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    from .optimizer import reconstruct

    if not args.config:
        raise InvalidArgumentError("reconstruct needs --config")
    run = io.RunConfig.from_file(args.config)
    if args.dataset:
        run.dataset = str(Path(args.dataset).resolve())
    if args.seed is not None:
        run.seed = args.seed
        run.schedule = {**run.schedule, "seed": args.seed}
        run.init = {**run.init, "seed": args.seed}
    if args.precision:
        run.precision = args.precision
        run.init = {**run.init, "precision": args.precision}
    run.validate()
    ds = io.read_dataset(run.resolve(run.dataset))
    run.validate(ds)
    init, sched, loss, reg = run.build()
    res = reconstruct(ds, init, sched, loss, reg)
    out = _out(args, run.resolve(run.output))
    io.write_result(out / "result", res, {"seed": run.seed, "precision": run.precision, "loss": run.loss})
    res.write_log(out / "log.csv")
    for l in range(res.object.n_wavelengths):
        io.render_amplitude_hue(res.object.values[l, 0], out / f"object_l{l}.png")
        for m in range(res.probe.n_modes):
            io.render_amplitude_hue(res.probe.values[l, m], out / f"probe_l{l}_m{m}.png")
    io.write_json(out / "summary.json", {
        "iterations": len(res.loss_history),
        "final_loss": res.loss_history[-1] if res.loss_history else None,
        "distance": res.distance,
        "wavelengths": res.wavelengths,
    })
    print(f"finished {len(res.loss_history)} iterations, final loss {res.loss_history[-1]:.6g}; wrote {out}")
    return EXIT_OK


def _object_of(res, wavelength: int, mode: int = 0):
    if not 0 <= wavelength < res.object.n_wavelengths:
        raise InvalidArgumentError(f"wavelength index {wavelength} out of range")
    return res.object.values[wavelength, mode]


def cmd_analyze(args) -> int:
    from . import analysis

    cfg = _config(args)
    l = int(_opt(args, cfg, "wavelength", 0))
    res = io.read_result(args.result)
    other = io.read_result(args.other) if args.what == "frc" else None
    out = _out(args, "analysis")
    if args.what == "frc":
        a, b = _object_of(res, l), _object_of(other, l)
        curve = analysis.fourier_ring_correlation(a, b, float(_opt(args, cfg, "ring_width", 1.0)),
                                                  res.object.grid.px)
        io.write_csv(out / "frc.csv", {"frequency": curve.frequencies, "correlation": curve.correlation,
                                       "threshold": curve.threshold})
        report = {"resolution": curve.resolution, "crossing_ring": curve.crossing_ring}
    elif args.what == "refocus":
        obj = _object_of(res, l)
        roi = _opt(args, cfg, "roi")
        if roi is not None:
            r0, r1, c0, c1 = (int(v) for v in roi)
            roi = (slice(r0, r1), slice(c0, c1))
        best, curve = analysis.refocus_sweep(
            obj, res.object.grid, float(res.wavelengths[l]), float(_opt(args, cfg, "range", 25e-6)),
            float(_opt(args, cfg, "step", 200e-9)), float(_opt(args, cfg, "probe_freq", 5e6)), roi,
            int(_opt(args, cfg, "line_axis", 0)))
        io.write_csv(out / "refocus.csv", {"dz": curve.dz, "strength": curve.strength, "envelope": curve.envelope})
        report = {"best_dz": best, "window": curve.window}
    elif args.what == "height":
        obj = _object_of(res, l)
        fresnel = _opt(args, cfg, "fresnel")
        theta = _opt(args, cfg, "theta")
        if fresnel is None or theta is None:
            raise InvalidArgumentError("height analysis needs --theta and --fresnel")
        rep = analysis.estimate_height(obj, float(res.wavelengths[l]), np.radians(float(theta)), float(fresnel),
                                       float(_opt(args, cfg, "nominal", 0.0)))
        report = {k: getattr(rep, k) for k in rep.__dataclass_fields__}
    elif args.what == "pupil":
        from .field import ComplexField

        focal = _opt(args, cfg, "focal_length")
        report = {"pupils": []}
        for m in range(res.probe.n_modes):
            lam = float(res.wavelengths[l])
            pupil = analysis.pupil_function(ComplexField(res.probe.grid, res.probe.values[l, m]),
                                            lam if focal is not None else None,
                                            float(focal) if focal is not None else None)
            path = out / f"pupil_l{l}_m{m}.png"
            io.render_amplitude_hue(pupil.values, path)
            report["pupils"].append({"mode": m, "image": str(path), "pitch": pupil.grid.pitch})
    else:
        modes, fractions = analysis.orthogonalize_modes(res.probe)
        for ll in range(modes.n_wavelengths):
            for m in range(modes.n_modes):
                io.render_amplitude_hue(modes.values[ll, m], out / f"mode_l{ll}_m{m}.png")
        report = {"power_fractions": fractions, "wavelengths": res.wavelengths}
    io.write_json(out / f"{args.what}.json", report)
    print(json.dumps(report, default=io._jsonable))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .objectives import LossConfig
    from .optimizer import gradcheck_instance, model_gradcheck

    cfg = _config(args)
    if args.precision == "f32":
        log.warning("gradcheck always runs in double precision")
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 1))
    ds, state = gradcheck_instance(int(_opt(args, cfg, "size", 32)), int(_opt(args, cfg, "wavelengths", 2)),
                                   int(_opt(args, cfg, "modes", 2)), int(_opt(args, cfg, "object_modes", 1)),
                                   seed=seed)
    rep = model_gradcheck(ds, state, LossConfig(_opt(args, cfg, "loss", "amp_mse")), seed=seed)
    tol = float(_opt(args, cfg, "tol", 1e-5))
    out = _out(args, ".")
    io.write_json(out / "gradcheck.json", {"errors": rep.errors, "details": rep.details, "tolerance": tol,
                                           "passed": rep.passed(tol)})
    for role, err in rep.errors.items():
        print(f"{role:<11s} {err:.3e} {'ok' if err < tol else 'FAIL'}")
    return EXIT_OK if rep.passed(tol) else EXIT_NUMERICAL


def _parse_sizes(s):
    if isinstance(s, list):
        return [tuple(int(v) for v in t) for t in s]
    try:
        return [tuple(int(v) for v in t.split(",")) for t in s.split(";") if t.strip()]
    except ValueError as e:
        raise InvalidArgumentError(f"sizes must look like 'L,M,N;L,M,N', got {s!r}") from e


def cmd_bench(args) -> int:
    from .optimizer import benchmark_run

    cfg = _config(args)
    sizes = _parse_sizes(_opt(args, cfg, "sizes", "1,1,1;1,2,1;2,2,1;2,4,1;3,4,1"))
    roles = _opt(args, cfg, "roles", "probe,object")
    roles = tuple(roles.split(",")) if isinstance(roles, str) else tuple(roles)
    rows = benchmark_run(sizes, int(_opt(args, cfg, "iterations", 5)), int(_opt(args, cfg, "n", 64)),
                         int(_opt(args, cfg, "shots", 4)), roles,
                         seed=args.seed if args.seed is not None else int(cfg.get("seed", 0)))
    out = _out(args, ".")
    for r in rows:
        r["roles"] = "+".join(r["roles"])
    io.write_csv(out / "bench.csv", rows)
    for r in rows:
        print(f"L={r['L']} M={r['M']} N={r['N']} propagations={r['propagations']:3d} "
              f"time/iter={r['time_ms']:.2f} ms peak={r['peak_bytes'] / 2**20:.2f} MiB")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=("f32", "f64"), help="floating-point precision (default f64)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    p = argparse.ArgumentParser(prog="euvptycho", description="Reflection-mode EUV ptychography toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset and its ground truth")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("preprocess", parents=[common], help="dark-subtract, mask, centre and tilt-correct frames")
    s.add_argument("frames", nargs="?", help="raw frames container")
    s.add_argument("--thresholds", type=float, nargs=2, metavar=("LO", "HI"))
    s.add_argument("--tilt-axis", type=int, choices=(0, 1))
    s.add_argument("--no-center", action="store_true", default=None)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("reconstruct", parents=[common], help="run the joint Adam reconstruction")
    s.add_argument("--dataset", help="override the dataset container path")
    s.set_defaults(func=cmd_reconstruct)

    s = sub.add_parser("analyze", help="post-reconstruction analysis")
    an = s.add_subparsers(dest="what", required=True)
    a = an.add_parser("frc", parents=[common], help="Fourier ring correlation of two reconstructions")
    a.add_argument("result")
    a.add_argument("other")
    a.add_argument("--ring-width", dest="ring_width", type=float)
    a = an.add_parser("refocus", parents=[common], help="through-focus sweep of a grating region")
    a.add_argument("result")
    a.add_argument("--range", type=float)
    a.add_argument("--step", type=float)
    a.add_argument("--probe-freq", dest="probe_freq", type=float)
    a.add_argument("--roi", type=int, nargs=4, metavar=("R0", "R1", "C0", "C1"))
    a.add_argument("--line-axis", dest="line_axis", type=int, choices=(0, 1))
    a = an.add_parser("height", parents=[common], help="structure height from the two-material phase step")
    a.add_argument("result")
    a.add_argument("--theta", type=float, help="incidence angle in degrees")
    a.add_argument("--fresnel", type=float, help="Fresnel phase difference in radians")
    a.add_argument("--nominal", type=float, help="nominal height in metres (branch selection)")
    a = an.add_parser("pupil", parents=[common], help="pupil function of each probe mode")
    a.add_argument("result")
    a.add_argument("--focal-length", dest="focal_length", type=float)
    a = an.add_parser("modes", parents=[common], help="orthogonalised probe modes and their power fractions")
    a.add_argument("result")
    for name in ("frc", "refocus", "height", "pupil", "modes"):
        an.choices[name].add_argument("--wavelength", type=int, help="wavelength index")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every variable role")
    s.add_argument("--size", type=int)
    s.add_argument("--wavelengths", type=int)
    s.add_argument("--modes", type=int)
    s.add_argument("--object-modes", dest="object_modes", type=int)
    s.add_argument("--loss", choices=("amp_mse", "gaussian", "poisson", "mixed"))
    s.add_argument("--tol", type=float)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("bench", parents=[common], help="time per iteration and peak memory versus mode count")
    s.add_argument("--sizes", help="semicolon-separated L,M,N triples")
    s.add_argument("--iterations", type=int)
    s.add_argument("--n", type=int, help="probe grid size")
    s.add_argument("--shots", type=int)
    s.add_argument("--roles", help="comma-separated roles to optimise")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PtychoError as e:
        print(f"error ({e.category}): {e}", file=sys.stderr)
        return _CATEGORY_EXIT.get(e.category, EXIT_DATA)
    except (OSError, ValueError) as e:
        print(f"error (data): {e}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as e:
        print(f"error (numerical): {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
