"""Teacher-feature variance as a dynamic distillation temperature.

A SigmaEstimator accumulates per-position Welford statistics over the
standardized teacher features of the whole training set. finalize() merges
the per-position variance over the configured dimensions, takes the square
root, floors it at 1e-3 and divides by the geometric mean so the resulting
temperature field multiplies out to 1.
"""

import json
from enum import Enum

import numpy as np

from .errors import ShapeError, UsageError
from .tensor import Tensor

SIGMA_FLOOR = 1e-3


class MergeMode(str, Enum):
    SCALAR = "scalar"    # merge batch + channel + spatial -> 1x1x1
    FULL = "full"        # merge batch only -> C x H x W
    CHANNEL = "channel"  # merge batch + spatial -> C x 1 x 1
    SPATIAL = "spatial"  # merge batch + channel -> 1 x H x W


# variance axes (within C x H x W) averaged away per mode
_MERGE_AXES = {
    MergeMode.SCALAR: (0, 1, 2),
    MergeMode.FULL: (),
    MergeMode.CHANNEL: (1, 2),
    MergeMode.SPATIAL: (0,),
}


class SigmaEstimator:
    """Streaming per-position mean/variance over samples (Welford)."""

    def __init__(self, feature_shape):
        self.feature_shape = tuple(feature_shape)  # C x H x W
        self.n = 0
        self.mean = np.zeros(self.feature_shape)
        self.m2 = np.zeros(self.feature_shape)
        self.finalized = False

    def update(self, feat):
        """Consume one FeatureBatch (B x C x H x W), one Welford step per sample."""
        if self.finalized:
            raise UsageError("estimator already finalized")
        data = feat.data if isinstance(feat, Tensor) else np.asarray(feat, dtype=np.float64)
        if data.ndim != 4 or data.shape[1:] != self.feature_shape:
            raise ShapeError(f"expected B x {self.feature_shape}, got {data.shape}")
        for sample in data:
            self.n += 1
            delta = sample - self.mean
            self.mean += delta / self.n
            self.m2 += delta * (sample - self.mean)
        return self

    def variance(self):
        if self.n < 2:
            raise UsageError("need at least 2 samples for a variance")
        return self.m2 / self.n  # population form

    def finalize(self, mode):
        if self.n < 2:
            raise UsageError("need at least 2 samples to finalize")
        self.finalized = True
        return sigma_from_variance(self.variance(), mode)


def sigma_from_variance(var, mode):
    """Merge -> sqrt -> floor -> geometric-mean normalization."""
    mode = MergeMode(mode)
    axes = _MERGE_AXES[mode]
    merged = var.mean(axis=axes, keepdims=True) if axes else var
    sigma = np.sqrt(merged)
    sigma = np.maximum(sigma, SIGMA_FLOOR)
    gm = np.exp(np.mean(np.log(sigma)))
    sigma = sigma / gm
    return SigmaTensor(sigma, mode)


class SigmaTensor:
    """Floored, geometric-mean-normalized temperature field.

    values has shape C x H x W with merged axes kept as 1, so it broadcasts
    against B x C x H x W features.
    """

    def __init__(self, values, mode, normalized=True):
        self.values = np.asarray(values, dtype=np.float64)
        self.mode = MergeMode(mode)
        self.normalized = normalized

    @classmethod
    def unit(cls, shape=(1, 1, 1)):
        return cls(np.ones(shape), MergeMode.SCALAR)

    @property
    def shape(self):
        return self.values.shape

    def broadcast_values(self):
        return self.values[None]  # 1 x C x H x W against B x C x H x W

    def to_json(self):
        return json.dumps({"mode": self.mode.value,
                           "shape": list(self.values.shape),
                           "values": self.values.reshape(-1).tolist()},
                          sort_keys=True)

    @classmethod
    def from_json(cls, text):
        doc = json.loads(text)
        vals = np.asarray(doc["values"], dtype=np.float64).reshape(doc["shape"])
        return cls(vals, doc["mode"])


def two_pass_variance(samples):
    """Independent population-variance oracle: mean first, then deviations.

    samples: iterable of per-sample arrays (all the same shape).
    """
    stack = np.stack([np.asarray(s, dtype=np.float64) for s in samples])
    mu = stack.mean(axis=0)
    return np.mean((stack - mu) ** 2, axis=0)


def local_uncertainty_objective(residual, var):
    """log(sigma^2) + residual^2 / sigma^2, the local term being minimized."""
    return np.log(var) + residual * residual / var


def analytic_min_check(residual, grid):
    """Grid-minimize the local objective; the minimizer should sit at r^2.

    Returns the grid point with the smallest objective value.
    """
    if residual == 0:
        raise UsageError("degenerate residual: the minimum at 0 leaves the positive domain")
    grid = np.asarray(grid, dtype=np.float64)
    if np.any(grid <= 0):
        raise UsageError("variance grid must be positive")
    vals = local_uncertainty_objective(residual, grid)
    return float(grid[np.argmin(vals)])
