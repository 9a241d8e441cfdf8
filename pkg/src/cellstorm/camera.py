"""Cellphone sensor + ISP photon-to-ADU chain and its calibration.

The forward model converts expected photons to integer ADU through quantum
efficiency, Poisson shot noise, gain, offset, Gaussian read noise, integer
quantization, zero-clipping below a floor and an optional periodic signal
dip / slow decay. Calibration recovers (gain, offset, read noise) from the
mean-variance relation of repeated exposures; the fit is restricted to the
linear range below the knee.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .formats import STREAM_CAMERA, FrameStack, stream_rng


class CalibrationError(Exception):
    """Mean-variance calibration could not produce a usable fit."""


class DegenerateFitError(CalibrationError):
    """Input stacks carry no usable noise statistics."""


@dataclass(frozen=True)
class CameraModel:
    """Sensor/ISP chain parameters.

    Defaults are the ISO-3200 measurement of the phone sensor this model
    was built around: gain 0.69 e-/ADU, offset 4.1 ADU, read noise
    2.5 e- RMS, linear up to 220 ADU, small values clipped to zero.
    """

    gain: float = 0.69
    offset: float = 4.1
    read_noise: float = 2.5
    qe: float = 0.75
    knee: float = 220.0
    clip_floor: float = 3.0
    bit_depth: int = 12
    dip_period_s: float = 1.07
    dip_depth: float = 0.0
    drift_per_s: float = 0.0

    def __post_init__(self) -> None:
        if self.gain <= 0:
            raise ValueError(f"gain must be > 0, got {self.gain}")
        if self.read_noise < 0:
            raise ValueError(f"read_noise must be >= 0, got {self.read_noise}")
        if not 0 < self.qe <= 1:
            raise ValueError(f"qe must be in (0, 1], got {self.qe}")
        max_adu = (1 << self.bit_depth) - 1
        if not 0 <= self.clip_floor < self.knee <= max_adu:
            raise ValueError(
                f"need 0 <= clip_floor < knee <= {max_adu}, "
                f"got clip_floor={self.clip_floor}, knee={self.knee}"
            )

    @property
    def max_adu(self) -> int:
        return (1 << self.bit_depth) - 1


# The two published measurements of the same sensor disagree; both ship.
CAMERA_PRESETS = {
    "p9": CameraModel(),
    "p9-early": CameraModel(gain=0.34, offset=4.074, read_noise=1.23),
}


@dataclass(frozen=True)
class CalibrationResult:
    gain: float
    offset: float
    read_noise: float
    fit_points: int
    r_squared: float

    def __post_init__(self) -> None:
        if self.gain <= 0:
            raise ValueError(f"recovered gain must be > 0, got {self.gain}")
        if not 0 <= self.r_squared <= 1:
            raise ValueError(f"r_squared must be in [0, 1], got {self.r_squared}")


def dip_period_frames(model: CameraModel, fps: float) -> int:
    """Dip period in frames: round(dip_period_s * fps)."""
    return int(round(model.dip_period_s * fps))


def apply_camera(
    photon_map: np.ndarray,
    model: CameraModel,
    frame_index: int,
    seed: int,
    fps: float = 20.0,
) -> np.ndarray:
    """Convert a per-pixel expected-photon map into one integer ADU frame.

    The temporal factor (decay and periodic dip) scales only the signal
    term, not the offset or the read noise. Deterministic per
    (seed, frame_index).
    """
    photon_map = np.asarray(photon_map, dtype=np.float64)
    if photon_map.ndim != 2:
        raise ValueError(f"photon_map must be 2-D, got shape {photon_map.shape}")
    if photon_map.size and photon_map.min() < 0:
        raise ValueError("photon_map must be non-negative")

    factor = 1.0 - model.drift_per_s * (frame_index / fps)
    if model.dip_depth:
        period = dip_period_frames(model, fps)
        if period >= 1 and frame_index % period == 0:
            factor *= 1.0 - model.dip_depth
    factor = max(factor, 0.0)

    rng = stream_rng(seed, STREAM_CAMERA, frame_index)
    electrons = rng.poisson(model.qe * photon_map).astype(np.float64)
    noise = rng.normal(0.0, model.read_noise / model.gain, size=photon_map.shape)
    adu = factor * electrons / model.gain + model.offset + noise
    out = np.clip(np.rint(adu), 0, model.max_adu).astype(np.uint16)
    out[out < model.clip_floor] = 0
    return out


def mean_variance_points(stacks: Sequence[FrameStack]) -> np.ndarray:
    """One (mean, temporal variance) point per illumination level.

    Per-pixel statistics are taken over time and averaged over the frame,
    which suppresses any static scene structure.
    """
    points = []
    for stack in stacks:
        if stack.n_frames < 2:
            raise ValueError("each calibration stack needs at least 2 frames")
        data = stack.data.astype(np.float64)
        per_pixel_mean = data.mean(axis=0)
        per_pixel_var = data.var(axis=0, ddof=1)
        points.append((float(per_pixel_mean.mean()), float(per_pixel_var.mean())))
    return np.asarray(points, dtype=np.float64)


def calibrate_mean_variance(
    stacks: Sequence[FrameStack],
    dark_stack: FrameStack,
    knee: float = 220.0,
) -> CalibrationResult:
    """Recover (gain, offset, read noise) from static stacks at rising illumination.

    The line var = a*mean + b is fitted over levels below the knee;
    gain = 1/a and the read noise follows from the variance the line
    predicts at zero signal: var_adu(offset) = (read_noise/gain)^2.
    """
    offset = float(dark_stack.data.astype(np.float64).mean())
    points = mean_variance_points(stacks)
    usable = points[points[:, 0] < knee]
    if usable.shape[0] < 2:
        raise CalibrationError(
            f"only {usable.shape[0]} usable levels below knee={knee}; need >= 2"
        )
    means = usable[:, 0]
    variances = usable[:, 1]
    if np.all(variances == 0):
        raise DegenerateFitError("all calibration stacks have zero temporal variance")
    a, b = np.polyfit(means, variances, 1)
    if a <= 0:
        raise DegenerateFitError(f"mean-variance slope must be > 0, got {a:.3g}")
    gain = 1.0 / a
    read_noise = gain * float(np.sqrt(max(0.0, a * offset + b)))
    predicted = a * means + b
    ss_res = float(np.sum((variances - predicted) ** 2))
    ss_tot = float(np.sum((variances - variances.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    return CalibrationResult(
        gain=gain,
        offset=offset,
        read_noise=read_noise,
        fit_points=int(usable.shape[0]),
        r_squared=r_squared,
    )


@dataclass
class DriftProfile:
    """Per-frame mean series of a dark stack plus the detected dip period."""

    means: np.ndarray
    period_frames: Optional[int]


def dark_drift_profile(stack: FrameStack) -> DriftProfile:
    """Mean of every frame plus the lag of the strongest autocorrelation peak.

    The period is reported only when a local autocorrelation maximum exceeds
    3x the noise floor (median |r| over candidate lags); otherwise None.
    """
    if stack.n_frames < 64:
        raise ValueError(f"need >= 64 frames to detect a period, got {stack.n_frames}")
    means = stack.data.astype(np.float64).mean(axis=(1, 2))
    x = means - means.mean()
    denom = float(np.dot(x, x))
    if denom == 0:
        return DriftProfile(means=means, period_frames=None)
    n = x.shape[0]
    corr = np.correlate(x, x, mode="full")[n - 1 :] / denom
    max_lag = n // 2
    best_lag = None
    best_val = 0.0
    floor = float(np.median(np.abs(corr[1 : max_lag + 1])))
    for lag in range(1, max_lag):
        if corr[lag] > corr[lag - 1] and corr[lag] > corr[lag + 1]:
            if corr[lag] > 3.0 * floor and corr[lag] > best_val:
                best_val = float(corr[lag])
                best_lag = lag
    return DriftProfile(means=means, period_frames=best_lag)
