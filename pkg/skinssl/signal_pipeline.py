"""
Signal pipeline: raw flux streams -> calibrated, 100 Hz, windowed tensors.

    raw stream (80-100 Hz, counts)
        -> subtract_baseline   (x - baseline) / scale
        -> resample_100hz      per-entry linear interpolation on t0 + k * 0.01
        -> make_windows        10-frame windows paired with FK taxel positions

All transforms are pure; nothing here keeps state between calls.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import interp1d

from skinssl.config import FLUX_SCALE, RESAMPLE_DT, RESAMPLE_HZ, WINDOW_FRAMES, WINDOW_STRIDE
from skinssl.errors import InsufficientDataError, InvalidInputError
from skinssl.hand_model import taxel_geometry

logger = logging.getLogger(__name__)

FK_CHUNK = 2048


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class RawSample:
    timestamp: float
    flux: np.ndarray


@dataclass(frozen=True, eq=False)
class RawStream:
    """A stream of raw samples stored column-wise: timestamps (T,), flux (T, N, 3)."""

    timestamps: np.ndarray
    flux: np.ndarray

    def __post_init__(self):
        if len(self.timestamps) != len(self.flux):
            raise InvalidInputError("Stream timestamps and flux frames differ in length")

    def __len__(self):
        return len(self.timestamps)

    def __getitem__(self, i):
        return RawSample(float(self.timestamps[i]), self.flux[i])

    @classmethod
    def from_samples(cls, samples):
        samples = list(samples)
        if not samples:
            return cls(np.zeros(0), np.zeros((0, 0, 3), dtype=np.float32))
        return cls(np.array([s.timestamp for s in samples], dtype=np.float64),
                   np.stack([np.asarray(s.flux) for s in samples]))


@dataclass(frozen=True, eq=False)
class BaselineFrame:
    flux: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.flux)):
            raise InvalidInputError("Baseline frame must be finite")

    @classmethod
    def zeros(cls, taxels, channels=3):
        return cls(np.zeros((taxels, channels)))


@dataclass(frozen=True, eq=False)
class CalibratedStream:
    timestamps: np.ndarray
    flux: np.ndarray

    def __len__(self):
        return len(self.timestamps)

    def as_raw(self):
        return RawStream(self.timestamps.copy(), self.flux.copy())


@dataclass(frozen=True, eq=False)
class TactileWindow:
    """10 frames of calibrated flux ``x`` and taxel positions ``p``, both (10, N, 3)."""

    x: np.ndarray
    p: np.ndarray
    t_end: float


# =============================================================================
# OPERATIONS
# =============================================================================

def subtract_baseline(stream, baseline, scale=FLUX_SCALE):
    """(flux - baseline) / scale for every frame; one global baseline frame."""
    if not isinstance(stream, RawStream):
        stream = RawStream.from_samples(stream)
    base = np.asarray(baseline.flux, dtype=np.float64)
    if stream.flux.shape[1:] != base.shape:
        raise InvalidInputError(
            f"Baseline shape {base.shape} does not match stream frames {stream.flux.shape[1:]}"
        )
    flux = (np.asarray(stream.flux, dtype=np.float64) - base) / float(scale)
    return CalibratedStream(np.asarray(stream.timestamps, dtype=np.float64), flux)


def resample(stream, rate_hz):
    """Linear interpolation onto t0 + k / rate_hz covering [t0, t_last]."""
    timestamps = np.asarray(stream.timestamps, dtype=np.float64)
    if len(timestamps) < 2:
        raise InsufficientDataError(f"Resampling needs at least 2 frames, got {len(timestamps)}")
    if np.any(np.diff(timestamps) <= 0):
        raise InvalidInputError("Stream timestamps must be strictly increasing")

    dt = RESAMPLE_DT if rate_hz == RESAMPLE_HZ else 1.0 / rate_hz
    count = int(np.floor((timestamps[-1] - timestamps[0]) / dt + 1e-9)) + 1
    out_times = timestamps[0] + np.arange(count) * dt

    flux = np.asarray(stream.flux, dtype=np.float64)
    # endpoints held outside the source span
    interp = interp1d(timestamps, flux, kind="linear", axis=0, bounds_error=False,
                      fill_value=(flux[0], flux[-1]), assume_sorted=True)
    return CalibratedStream(out_times, interp(out_times))


def resample_100hz(stream):
    return resample(stream, RESAMPLE_HZ)


def calibrate(stream, baseline, scale=FLUX_SCALE):
    """Baseline subtraction followed by 100 Hz resampling."""
    return resample_100hz(subtract_baseline(stream, baseline, scale))


def stream_positions(stream, joints, layout):
    """FK positions (T, N, 3) at each stream frame's nearest joint sample."""
    timestamps = stream.timestamps
    tolerance = RESAMPLE_DT / 2
    if (joints.timestamps[0] > timestamps[0] + tolerance
            or joints.timestamps[-1] < timestamps[-1] - tolerance):
        raise InvalidInputError("Joint timestamps do not cover the stream span")
    angles = joints.angles[joints.nearest_indices(timestamps)]
    positions = np.empty((len(timestamps), layout.taxel_count, 3), dtype=np.float32)
    for start in range(0, len(timestamps), FK_CHUNK):
        chunk, _ = taxel_geometry(layout, angles[start:start + FK_CHUNK])
        positions[start:start + FK_CHUNK] = chunk
    return positions


def make_windows(stream, joints, layout, stride=WINDOW_STRIDE, start=0, frames=WINDOW_FRAMES):
    """Cut a 100 Hz stream into ``frames``-long windows advancing by ``stride``."""
    if len(stream) < frames:
        raise InsufficientDataError(
            f"Stream has {len(stream)} frames, a window needs {frames}"
        )
    if stride < 1:
        raise InvalidInputError("Window stride must be at least one frame")
    gaps = np.diff(stream.timestamps)
    if len(gaps) and np.max(np.abs(gaps - RESAMPLE_DT)) > 1e-6:
        raise InvalidInputError("make_windows expects a stream resampled to 100 Hz")

    positions = stream_positions(stream, joints, layout)
    flux = np.asarray(stream.flux, dtype=np.float32)
    return [
        TactileWindow(x=flux[s:s + frames], p=positions[s:s + frames],
                      t_end=float(stream.timestamps[s + frames - 1]))
        for s in range(start, len(stream) - frames + 1, stride)
    ]


def stack_windows(windows):
    """Stack windows into arrays x (W, 10, N, 3), p (W, 10, N, 3), t_end (W,)."""
    if not windows:
        raise InsufficientDataError("No windows to stack")
    x = np.stack([w.x for w in windows]).astype(np.float32)
    p = np.stack([w.p for w in windows]).astype(np.float32)
    return x, p, np.array([w.t_end for w in windows])
