"""Data-fidelity losses and amplitude regularisers.

Every loss takes the predicted pattern ``I``, the measurement ``meas`` and a
validity mask, and returns ``(value, dL/dI)``. Masked-out pixels contribute
neither value nor gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

__all__ = [
    "LossConfig",
    "apply_mask",
    "amplitude_mse",
    "gaussian_nll",
    "poisson_nll",
    "mixed_nll",
    "tv_l1_regularize",
    "DEFAULT_EPSILON",
]

DEFAULT_EPSILON = 1e-9


def apply_mask(x, mask):
    """Zero the excluded pixels (self-adjoint)."""
    if mask is None:
        return x
    return np.where(mask, x, 0)


def _mask(mask, shape):
    return np.ones(shape, dtype=bool) if mask is None else np.broadcast_to(np.asarray(mask, dtype=bool), shape)


def amplitude_mse(I, meas, mask=None, eps=DEFAULT_EPSILON):
    m = _mask(mask, np.shape(I))
    amp = np.sqrt(I + eps)
    root = np.sqrt(np.where(m, meas, 0.0))
    r = np.where(m, amp - root, 0.0)
    return float(np.sum(r * r)), np.where(m, 1.0 - root / amp, 0.0)


def poisson_nll(I, meas, mask=None, eps=DEFAULT_EPSILON):
    m = _mask(mask, np.shape(I))
    meas = np.where(m, meas, 0.0)
    val = np.where(m, I - meas * np.log(I + eps), 0.0)
    return float(np.sum(val)), np.where(m, 1.0 - meas / (I + eps), 0.0)


def gaussian_nll(I, meas, mask=None, var=1.0):
    if not var > 0:
        raise InvalidArgumentError("gaussian variance must be positive")
    m = _mask(mask, np.shape(I))
    r = np.where(m, I - meas, 0.0)
    return float(np.sum(r * r) / (2 * var)), r / var


def mixed_nll(I, meas, mask=None, read_var=0.0, eps=DEFAULT_EPSILON):
    """Gaussian likelihood with signal-dependent variance ``I + read_var``."""
    if read_var < 0:
        raise InvalidArgumentError("read-noise variance must be non-negative")
    m = _mask(mask, np.shape(I))
    v = I + read_var + eps
    r = np.where(m, I - meas, 0.0)
    val = np.where(m, r * r / (2 * v) + 0.5 * np.log(v), 0.0)
    grad = np.where(m, r / v - r * r / (2 * v * v) + 0.5 / v, 0.0)
    return float(np.sum(val)), grad


@dataclass(frozen=True)
class LossConfig:
    kind: str = "amp_mse"
    read_noise_variance: float = 1.0
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        if self.kind not in ("amp_mse", "gaussian", "poisson", "mixed"):
            raise InvalidArgumentError(f"unknown loss kind {self.kind!r}")
        if not self.epsilon > 0:
            raise InvalidArgumentError("epsilon must be positive")
        if self.read_noise_variance < 0:
            raise InvalidArgumentError("read-noise variance must be non-negative")

    def __call__(self, I, meas, mask=None):
        if self.kind == "amp_mse":
            return amplitude_mse(I, meas, mask, self.epsilon)
        if self.kind == "poisson":
            return poisson_nll(I, meas, mask, self.epsilon)
        if self.kind == "gaussian":
            return gaussian_nll(I, meas, mask, self.read_noise_variance)
        return mixed_nll(I, meas, mask, self.read_noise_variance, self.epsilon)


def tv_l1_regularize(obj, w_l1=0.0, w_tv=0.0, eps=1e-6):
    """L1 and smoothed total variation of the object amplitude.

    Acts on ``|O| = sqrt(Re**2 + Im**2 + eps**2)`` over the last two axes with
    forward differences (zero difference past the last row/column). Returns
    ``(value, grad)`` where ``grad`` follows the package's complex convention.
    """
    if w_l1 < 0 or w_tv < 0:
        raise InvalidArgumentError("regularisation weights must be non-negative")
    obj = np.asarray(obj)
    if w_l1 == 0 and w_tv == 0:
        return 0.0, np.zeros_like(obj)
    a = np.sqrt(obj.real**2 + obj.imag**2 + eps**2)
    value = w_l1 * float(np.sum(a))
    d_a = np.full(a.shape, w_l1)
    if w_tv:
        dx = np.zeros_like(a)
        dy = np.zeros_like(a)
        dx[..., :, :-1] = a[..., :, 1:] - a[..., :, :-1]
        dy[..., :-1, :] = a[..., 1:, :] - a[..., :-1, :]
        t = np.sqrt(dx**2 + dy**2 + eps**2)
        value += w_tv * float(np.sum(t))
        qx, qy = dx / t, dy / t
        g = -(qx + qy)
        g[..., :, 1:] += qx[..., :, :-1]
        g[..., 1:, :] += qy[..., :-1, :]
        d_a = d_a + w_tv * g
    return value, d_a * obj / a
