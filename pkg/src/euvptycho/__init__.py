"""Reflection-mode EUV ptychography built on a small reverse-mode AD engine.

Modules
-------
field        grids, complex fields, modal stacks, comparison metric
autodiff     tape, variables, gradient sets, finite-difference checks
propagators  chirp z-transform, Fraunhofer and angular-spectrum propagation
model        composite forward model and its model state
objectives   data-fidelity losses and regularisers
optimizer    Adam, schedules, initialisation and the reconstruction loop
tilt         tilted-detector resampling and frame preprocessing
simulator    phantoms, synthetic probes and datasets
analysis     FRC, refocusing, height, pupil and mode analysis
io           containers, run configuration and image output
cli          command-line entry points
"""

from .data import Dataset, TruthBundle
from .errors import (
    BandLimitError,
    ClusteringError,
    CorruptContainerError,
    DivergenceError,
    GeometryError,
    GraphConstructionError,
    InvalidArgumentError,
    NumericalFailureError,
    PreprocessingError,
    PtychoError,
    SamplingError,
    ScanRangeError,
    TapeConsistencyError,
    UndefinedMetricError,
)
from .field import ComplexField, Grid, ModalStack, ScanTable, compare_ambiguity_free, make_grid
from .model import ModelState, predict_pattern
from .objectives import LossConfig
from .optimizer import EllipseSpec, InitConfig, RoleSchedule, Schedule, reconstruct
from .propagators import angular_spectrum, czt_propagate, fraunhofer

__version__ = "0.1.0"
