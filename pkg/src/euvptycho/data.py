"""Dataset and ground-truth containers exchanged between modules."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .field import Grid


@dataclass
class Dataset:
    """Preprocessed diffraction patterns with validity masks and geometry.

    ``patterns`` and ``masks`` have shape ``(K, Dy, Dx)`` on ``detector_grid``
    (already mapped to the sample-conjugate frame). ``positions`` are nominal
    scan positions in metres, ``(y, x)``.
    """

    patterns: np.ndarray
    masks: np.ndarray
    detector_grid: Grid
    wavelengths: np.ndarray
    distance: float
    positions: np.ndarray
    theta: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.patterns = np.asarray(self.patterns, dtype=float)
        if self.patterns.ndim == 2 and self.patterns.size == 0:
            self.patterns = self.patterns.reshape((0,) + self.detector_grid.shape)
        self.masks = np.asarray(self.masks, dtype=bool)
        if self.masks.shape != self.patterns.shape:
            raise InvalidArgumentError(f"masks {self.masks.shape} do not match patterns {self.patterns.shape}")
        if self.patterns.shape[1:] != self.detector_grid.shape:
            raise InvalidArgumentError("patterns are not on the detector grid")
        self.wavelengths = np.atleast_1d(np.asarray(self.wavelengths, dtype=float))
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 2)
        if self.positions.shape[0] != self.patterns.shape[0]:
            raise InvalidArgumentError("one scan position per pattern is required")
        self.distance = float(self.distance)

    @property
    def n_shots(self) -> int:
        return self.patterns.shape[0]


@dataclass
class TruthBundle:
    """Ground truth behind a synthetic dataset."""

    probe: np.ndarray
    object: np.ndarray
    positions: np.ndarray
    powers: np.ndarray
    wavelengths: np.ndarray
    distance: float
    background_root: np.ndarray
    probe_grid: Grid
    metadata: dict = field(default_factory=dict)
