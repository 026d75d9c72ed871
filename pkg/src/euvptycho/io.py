"""Self-describing containers, run configuration and image output.

A container is a directory holding ``manifest.json`` plus one raw
little-endian, row-major file per array. The manifest lists every array's
name, dtype, shape and file, together with geometry and free-form metadata,
so the data can be read without this package.
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, TruthBundle
from .errors import CorruptContainerError, InvalidArgumentError
from .field import Grid, ModalStack, ScanTable, make_grid

__all__ = [
    "SCHEMA_VERSION",
    "write_container",
    "read_container",
    "write_dataset",
    "read_dataset",
    "write_truth",
    "read_truth",
    "write_result",
    "read_result",
    "write_frames",
    "read_frames",
    "SavedResult",
    "render_amplitude_hue",
    "write_csv",
    "write_json",
    "load_config",
    "RunConfig",
]

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, complex):
        return [o.real, o.imag]
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"{type(o).__name__} is not JSON serialisable")


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
        fh.write("\n")


def write_csv(path, rows, fields=None):
    """Write a list of dicts (or a dict of equal-length columns) as CSV."""
    if isinstance(rows, dict):
        keys = list(rows)
        rows = [dict(zip(keys, vals)) for vals in zip(*(np.asarray(rows[k]).tolist() for k in keys))]
    rows = list(rows)
    fields = fields or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


# ---------------------------------------------------------------------------
# generic container


def write_container(path, arrays: dict, kind: str, geometry: dict | None = None, metadata: dict | None = None):
    """Write ``arrays`` (name -> ndarray) and descriptive fields to directory ``path``."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    table = []
    for name, a in arrays.items():
        a = np.asarray(a)
        dt = a.dtype if a.dtype.byteorder == "|" else a.dtype.newbyteorder("<")
        a = np.ascontiguousarray(a, dtype=dt)
        fname = f"{name}.bin"
        a.tofile(root / fname)
        table.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "file": fname, "nbytes": a.nbytes})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "arrays": table,
        "geometry": geometry or {},
        "metadata": metadata or {},
    }
    write_json(root / MANIFEST, manifest)
    return root


def read_container(path, kind: str | None = None):
    """Read a container; returns ``(arrays, geometry, metadata, kind)``.

    Every array file must exist and hold exactly ``prod(shape) * itemsize``
    bytes; otherwise :class:`CorruptContainerError` names the array.
    """
    root = Path(path)
    try:
        with open(root / MANIFEST) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as e:
        raise CorruptContainerError(f"{root} has no {MANIFEST}", field=MANIFEST) from e
    except json.JSONDecodeError as e:
        raise CorruptContainerError(f"unreadable manifest in {root}: {e}", field=MANIFEST) from e
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise CorruptContainerError(f"schema version {version!r} is not supported (expected {SCHEMA_VERSION})",
                                    field="schema_version")
    if kind is not None and manifest.get("kind") != kind:
        raise CorruptContainerError(f"container holds {manifest.get('kind')!r}, expected {kind!r}", field="kind")
    arrays = {}
    for entry in manifest.get("arrays", []):
        name = entry.get("name", "?")
        try:
            dt = np.dtype(entry["dtype"])
            shape = tuple(int(n) for n in entry["shape"])
            fpath = root / entry["file"]
        except (KeyError, TypeError) as e:
            raise CorruptContainerError(f"array {name!r} has a malformed manifest entry", field=name) from e
        expected = int(np.prod(shape)) * dt.itemsize
        if not fpath.is_file():
            raise CorruptContainerError(f"array {name!r}: file {fpath.name} is missing", field=name)
        size = fpath.stat().st_size
        if size != expected:
            raise CorruptContainerError(f"array {name!r}: file holds {size} bytes, shape {shape} needs {expected}",
                                        field=name)
        arrays[name] = np.fromfile(fpath, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    return arrays, manifest.get("geometry", {}), manifest.get("metadata", {}), manifest.get("kind")


def _need(arrays, name):
    if name not in arrays:
        raise CorruptContainerError(f"array {name!r} is missing from the container", field=name)
    return arrays[name]


def _grid_dict(g: Grid) -> dict:
    return {"nx": g.nx, "ny": g.ny, "px": g.px, "py": g.py}


def _grid_from(d, name) -> Grid:
    try:
        return make_grid(d["nx"], d["ny"], d["px"], d["py"])
    except (KeyError, TypeError) as e:
        raise CorruptContainerError(f"geometry entry {name!r} is malformed", field=name) from e


# ---------------------------------------------------------------------------
# typed containers


def write_dataset(path, ds: Dataset):
    arrays = {"patterns": ds.patterns, "masks": ds.masks, "wavelengths": ds.wavelengths, "positions": ds.positions}
    geometry = {"theta": ds.theta, "distance": ds.distance, "detector_grid": _grid_dict(ds.detector_grid)}
    return write_container(path, arrays, "dataset", geometry, ds.metadata)


def read_dataset(path) -> Dataset:
    arrays, geo, meta, _ = read_container(path, "dataset")
    try:
        theta, distance = float(geo["theta"]), float(geo["distance"])
    except (KeyError, TypeError) as e:
        raise CorruptContainerError("dataset geometry lacks theta or distance", field="geometry") from e
    grid = _grid_from(geo.get("detector_grid"), "detector_grid")
    try:
        return Dataset(_need(arrays, "patterns"), _need(arrays, "masks"), grid, _need(arrays, "wavelengths"),
                       distance, _need(arrays, "positions"), theta=theta, metadata=meta)
    except InvalidArgumentError as e:
        raise CorruptContainerError(f"inconsistent dataset container: {e}", field="patterns") from e


def write_truth(path, t: TruthBundle):
    arrays = {"probe": t.probe, "object": t.object, "positions": t.positions, "powers": t.powers,
              "wavelengths": t.wavelengths, "background_root": t.background_root}
    geometry = {"distance": t.distance, "probe_grid": _grid_dict(t.probe_grid)}
    return write_container(path, arrays, "truth", geometry, t.metadata)


def read_truth(path) -> TruthBundle:
    arrays, geo, meta, _ = read_container(path, "truth")
    names = ("probe", "object", "positions", "powers", "wavelengths")
    vals = [_need(arrays, n) for n in names]
    return TruthBundle(*vals, float(geo.get("distance", 0.0)), _need(arrays, "background_root"),
                       _grid_from(geo.get("probe_grid"), "probe_grid"), meta)


@dataclass
class SavedResult:
    """Reconstruction outputs as stored on disk."""

    probe: ModalStack
    object: ModalStack
    scan: ScanTable
    wavelengths: np.ndarray
    distance: float
    background: np.ndarray
    loss_history: np.ndarray
    metadata: dict = field(default_factory=dict)


def write_result(path, res, metadata: dict | None = None):
    """Store a :class:`~euvptycho.optimizer.ReconResult` (or :class:`SavedResult`)."""
    arrays = {"probe": res.probe.values, "object": res.object.values, "positions": res.scan.positions,
              "powers": res.scan.powers, "wavelengths": res.wavelengths, "background": res.background,
              "loss_history": np.asarray(res.loss_history, dtype=float)}
    geometry = {"distance": res.distance, "probe_grid": _grid_dict(res.probe.grid),
                "object_grid": _grid_dict(res.object.grid)}
    return write_container(path, arrays, "result", geometry, metadata or getattr(res, "metadata", {}))


def read_result(path) -> SavedResult:
    arrays, geo, meta, _ = read_container(path, "result")
    wl = _need(arrays, "wavelengths")
    return SavedResult(
        ModalStack(_grid_from(geo.get("probe_grid"), "probe_grid"), wl, _need(arrays, "probe")),
        ModalStack(_grid_from(geo.get("object_grid"), "object_grid"), wl, _need(arrays, "object")),
        ScanTable(_need(arrays, "positions"), _need(arrays, "powers")),
        wl, float(geo.get("distance", 0.0)), _need(arrays, "background"), _need(arrays, "loss_history"), meta)


def write_frames(path, raw, dark, positions, wavelengths, theta: float, distance: float, detector_grid: Grid,
                 metadata: dict | None = None):
    """Raw camera frames ``(K, ny, nx)`` and a dark frame, before tilt correction."""
    arrays = {"raw": raw, "dark": dark, "positions": positions, "wavelengths": np.atleast_1d(wavelengths)}
    geometry = {"theta": theta, "distance": distance, "detector_grid": _grid_dict(detector_grid)}
    return write_container(path, arrays, "frames", geometry, metadata)


def read_frames(path):
    """Returns ``(raw, dark, positions, wavelengths, theta, distance, detector_grid, metadata)``."""
    arrays, geo, meta, _ = read_container(path, "frames")
    return (_need(arrays, "raw"), _need(arrays, "dark"), _need(arrays, "positions"), _need(arrays, "wavelengths"),
            float(geo.get("theta", 0.0)), float(geo.get("distance", 0.0)),
            _grid_from(geo.get("detector_grid"), "detector_grid"), meta)


# ---------------------------------------------------------------------------
# images


def amplitude_hue_rgb(values, percentile: float = 99.5) -> np.ndarray:
    """HSV image with hue = phase / 2pi, value = amplitude / percentile (clipped), saturation = 1."""
    from matplotlib.colors import hsv_to_rgb

    v = np.asarray(getattr(values, "values", values))
    if v.ndim != 2:
        raise InvalidArgumentError("amplitude-hue rendering needs a 2-D field")
    if not np.isfinite(v).all():
        raise InvalidArgumentError("field contains non-finite values")
    amp = np.abs(v)
    ref = float(np.percentile(amp, percentile)) if amp.size else 0.0
    if ref <= 0:
        ref = float(amp.max()) if amp.size else 0.0
    val = np.clip(amp / ref, 0.0, 1.0) if ref > 0 else np.zeros_like(amp)
    hue = np.mod(np.angle(v), 2 * np.pi) / (2 * np.pi)
    hsv = np.stack([hue, np.ones_like(hue), val], axis=-1)
    return hsv_to_rgb(hsv)


def render_amplitude_hue(f, path, percentile: float = 99.5):
    """Write a field as an 8-bit PNG where brightness is amplitude and hue is phase."""
    from PIL import Image

    rgb = amplitude_hue_rgb(f, percentile)
    img = Image.fromarray(np.round(rgb * 255).astype(np.uint8), mode="RGB")
    try:
        img.save(path, format="PNG")
    except OSError as e:
        raise OSError(f"cannot write image {path}: {e}") from e
    return Path(path)


# ---------------------------------------------------------------------------
# run configuration


_YAML_FLOAT = re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$")


def _config_loader():
    import yaml

    class Loader(yaml.SafeLoader):
        pass

    # YAML 1.2 floats: plain PyYAML reads "1e6" and "1.0e6" as strings
    Loader.yaml_implicit_resolvers = {k: [r for r in v if r[0] != "tag:yaml.org,2002:float"]
                                      for k, v in yaml.SafeLoader.yaml_implicit_resolvers.items()}
    Loader.add_implicit_resolver("tag:yaml.org,2002:float", _YAML_FLOAT, list("-+0123456789."))
    return Loader


def load_config(path) -> dict:
    """Parse a YAML or JSON configuration file into a dict."""
    import yaml

    try:
        with open(path) as fh:
            cfg = yaml.load(fh, Loader=_config_loader())
    except FileNotFoundError as e:
        raise InvalidArgumentError(f"config file {path} does not exist") from e
    except yaml.YAMLError as e:
        raise InvalidArgumentError(f"config file {path} is not valid YAML/JSON: {e}") from e
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise InvalidArgumentError(f"config file {path} must hold a mapping")
    return cfg


_INIT_TUPLES = ("probe_shape", "sample_pitch", "object_shape")


@dataclass
class RunConfig:
    """Reconstruction run description.

    ``init`` holds :class:`~euvptycho.optimizer.InitConfig` fields; its
    ``apertures`` entry is a per-wavelength list of ``{center, semi_axes,
    rotation}`` mappings. ``schedule`` holds
    :class:`~euvptycho.optimizer.Schedule` fields with ``roles`` mapping a
    role to ``{start_epoch, lr, decay}``. Relative paths are resolved against
    ``base``.
    """

    dataset: str
    output: str = "recon"
    L: int | None = None
    M: int = 1
    N: int = 1
    loss: str = "amp_mse"
    read_noise_variance: float = 1.0
    init: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    regularization: dict = field(default_factory=dict)
    seed: int = 0
    precision: str = "f64"
    base: str = "."

    @classmethod
    def from_dict(cls, d: dict, base=".") -> "RunConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown run-config keys: {sorted(unknown)}")
        if "dataset" not in d:
            raise InvalidArgumentError("run config needs a dataset path")
        d.setdefault("base", str(base))
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_dict(load_config(path), base=Path(path).parent)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base) / p

    def validate(self, dataset: Dataset | None = None):
        path = self.resolve(self.dataset)
        if not os.path.isdir(path):
            raise InvalidArgumentError(f"dataset {path} does not exist")
        if self.precision not in ("f32", "f64"):
            raise InvalidArgumentError("precision must be f32 or f64")
        if min(self.M, self.N) < 1:
            raise InvalidArgumentError("mode counts must be positive")
        if dataset is not None and self.L is not None and self.L != dataset.wavelengths.size:
            raise InvalidArgumentError(f"config expects L={self.L} but the dataset has {dataset.wavelengths.size} "
                                       "wavelengths")

    def build(self):
        """Returns ``(InitConfig, Schedule, LossConfig, RegularizerConfig)``."""
        from .objectives import LossConfig
        from .optimizer import EllipseSpec, InitConfig, RegularizerConfig, Schedule

        init = dict(self.init)
        for k in _INIT_TUPLES:
            if init.get(k) is not None:
                init[k] = tuple(init[k])
        if init.get("apertures") is not None:
            init["apertures"] = [EllipseSpec(tuple(a.get("center", (0.0, 0.0))),
                                             None if a.get("semi_axes") is None else tuple(a["semi_axes"]),
                                             float(a.get("rotation", 0.0))) for a in init["apertures"]]
        init.setdefault("n_probe_modes", self.M)
        init.setdefault("n_object_modes", self.N)
        init.setdefault("precision", self.precision)
        init.setdefault("seed", self.seed)
        sched = dict(self.schedule)
        sched.setdefault("seed", self.seed)
        try:
            return (InitConfig(**init), Schedule(**sched),
                    LossConfig(self.loss, self.read_noise_variance), RegularizerConfig(**self.regularization))
        except TypeError as e:
            raise InvalidArgumentError(f"bad run-config field: {e}") from e
