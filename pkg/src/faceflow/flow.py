"""Rectified-flow primitives: straight paths, Euler sampling, endpoint estimate.

The generative model learns a velocity field v(x, t, c) along the straight
path x_t = x0 + t*(x1 - x0) between Gaussian noise x0 and a data window x1.
The target velocity is the constant u = x1 - x0, so a perfectly fitted field
is integrated exactly by a single Euler step and a handful of steps suffice
in practice (default 4).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError

DEFAULT_SAMPLING_STEPS = 4


def _check_pair(x0, x1):
    a = np.asarray(x0, dtype=np.float64)
    b = np.asarray(x1, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


@dataclass(frozen=True)
class FlowSample:
    """One training point on the straight noise-to-data path."""

    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray
    target_velocity: np.ndarray


def interpolate(x0, x1, t: float) -> FlowSample:
    """Build the straight-path sample x_t = x0 + t*(x1 - x0) at time t in [0, 1]."""
    a, b = _check_pair(x0, x1)
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    u = b - a
    return FlowSample(x0=a, x1=b, t=t, xt=a + t * u, target_velocity=u)


def euler_integrate(field, x0, c=None, steps: int = DEFAULT_SAMPLING_STEPS) -> np.ndarray:
    """Integrate dx/dt = field(x, t, c) from t=0 to t=1 with uniform Euler steps.

    Left-endpoint grid: x <- x + (1/steps) * field(x, k/steps, c) for
    k = 0..steps-1.  Exact for constant fields at any step count.

    Raises:
        NumericError: the field returned non-finite values; ``where`` holds
            the failing step index.
    """
    steps = int(steps)
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.asarray(x0, dtype=np.float64).copy()
    h = 1.0 / steps
    for k in range(steps):
        v = np.asarray(field(x, k * h, c), dtype=np.float64)
        if v.shape != x.shape:
            raise ValueError(f"field returned shape {v.shape}, expected {x.shape}")
        if not np.all(np.isfinite(v)):
            raise NumericError(f"velocity field returned non-finite values at step {k}", where=k)
        x = x + h * v
    return x


def one_step_endpoint(xt, t: float, velocity) -> np.ndarray:
    """Estimate the path endpoint: x1_hat = xt + (1 - t) * velocity.

    Exact when ``velocity`` is the sample's true target x1 - x0.  t = 1 is
    permitted and returns xt unchanged.

    Raises:
        NumericError: velocity contains non-finite values.
    """
    x = np.asarray(xt, dtype=np.float64)
    v = np.asarray(velocity, dtype=np.float64)
    if x.shape != v.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {v.shape}")
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if not np.all(np.isfinite(v)):
        raise NumericError("endpoint velocity contains non-finite values")
    return x + (1.0 - t) * v


def sample_noise(shape, rng: np.random.Generator) -> np.ndarray:
    """Standard-normal x0 draw from an explicit seeded generator."""
    return rng.standard_normal(size=shape)
