import numpy as np
import pytest

from skinssl.errors import InsufficientDataError, InvalidInputError
from skinssl.hand_model import JointTrajectory
from skinssl.signal_pipeline import (
    BaselineFrame,
    CalibratedStream,
    RawSample,
    RawStream,
    calibrate,
    make_windows,
    resample,
    resample_100hz,
    stack_windows,
    subtract_baseline,
)

N = 368


def stream_at(timestamps, values):
    """Stream whose every flux entry follows ``values`` (one scalar per frame)."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    flux = np.broadcast_to(np.asarray(values, dtype=np.float64)[:, None, None],
                           (len(timestamps), N, 3)).copy()
    return RawStream(timestamps, flux)


def still_joints(t0, t1):
    times = np.arange(t0 - 0.05, t1 + 0.05, 0.01)
    return JointTrajectory(times, np.zeros((len(times), 16)))


class TestSubtractBaseline:
    def test_baseline_repeated_gives_zero(self, rng):
        baseline = BaselineFrame(rng.normal(size=(N, 3)) * 1000)
        samples = [RawSample(0.01 * i, baseline.flux.copy()) for i in range(5)]
        out = subtract_baseline(samples, baseline)
        assert np.all(out.flux == 0.0)
        assert len(out) == 5

    @pytest.mark.parametrize("scale, expected", [(1.0, 100.0), (50.0, 2.0)])
    def test_single_entry_offset(self, rng, scale, expected):
        baseline = BaselineFrame(rng.normal(size=(N, 3)))
        flux = baseline.flux.copy()
        flux[17, 2] += 100.0
        out = subtract_baseline([RawSample(0.0, flux)], baseline, scale=scale)
        assert out.flux[0, 17, 2] == pytest.approx(expected)
        rest = np.delete(out.flux[0].reshape(-1), 17 * 3 + 2)
        np.testing.assert_allclose(rest, 0.0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            subtract_baseline([RawSample(0.0, np.zeros((N, 3)))], BaselineFrame.zeros(N - 1))

    def test_idempotent_with_zero_baseline(self, rng):
        raw = RawStream(np.arange(6) * 0.011, rng.normal(size=(6, N, 3)))
        first = subtract_baseline(raw, BaselineFrame(rng.normal(size=(N, 3))), scale=100.0)
        second = subtract_baseline(first.as_raw(), BaselineFrame.zeros(N), scale=1.0)
        np.testing.assert_array_equal(second.flux, first.flux)
        np.testing.assert_array_equal(second.timestamps, first.timestamps)


class TestResample:
    def test_constant_stream(self):
        times = np.arange(88) / 87.0
        out = resample_100hz(stream_at(times, np.full(88, 0.37)))
        np.testing.assert_array_equal(out.flux, 0.37)
        assert out.timestamps[0] == times[0]
        assert out.timestamps[-1] <= times[-1]

    def test_ramp_is_exact(self, rng):
        gaps = rng.uniform(1 / 120, 1 / 60, size=120)
        times = 0.3 + np.concatenate([[0.0], np.cumsum(gaps)])
        out = resample_100hz(stream_at(times, 3.0 * times))
        np.testing.assert_allclose(out.flux[:, 0, 0], 3.0 * out.timestamps, rtol=1e-6)
        np.testing.assert_allclose(out.flux[:, -1, 2], 3.0 * out.timestamps, rtol=1e-6)

    def test_sinusoid_within_interpolation_bound(self):
        f, rate = 5.0, 90.0
        times = np.arange(91) / rate
        out = resample_100hz(stream_at(times, np.sin(2 * np.pi * f * times)))
        error = np.abs(out.flux[:, 0, 0] - np.sin(2 * np.pi * f * out.timestamps))
        assert error.max() <= (2 * np.pi * f / rate) ** 2 / 8

    def test_output_rate(self, rng):
        times = np.cumsum(rng.uniform(1 / 100, 1 / 80, size=900))
        out = resample_100hz(stream_at(times, np.zeros(900)))
        np.testing.assert_allclose(np.diff(out.timestamps), 0.01, atol=1e-9)
        assert out.timestamps[-1] <= times[-1] + 1e-12
        assert out.timestamps[-1] > times[-1] - 0.01

    def test_other_rate(self):
        out = resample(stream_at([0.0, 1.0], [0.0, 1.0]), 4.0)
        np.testing.assert_allclose(out.flux[:, 0, 0], [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_too_few_frames(self):
        with pytest.raises(InsufficientDataError):
            resample_100hz(stream_at([0.0], [1.0]))

    def test_non_monotone_timestamps(self):
        with pytest.raises(InvalidInputError):
            resample_100hz(stream_at([0.0, 0.02, 0.01, 0.03], np.zeros(4)))

    def test_calibrate_composes(self, rng):
        times = np.cumsum(rng.uniform(1 / 100, 1 / 80, size=50))
        raw = RawStream(times, rng.normal(size=(50, N, 3)) * 10 + 5)
        baseline = BaselineFrame(np.full((N, 3), 5.0))
        expected = resample_100hz(subtract_baseline(raw, baseline, 10.0))
        out = calibrate(raw, baseline, 10.0)
        np.testing.assert_array_equal(out.flux, expected.flux)


class TestMakeWindows:
    def calibrated(self, frames, rng):
        times = 1.0 + np.arange(frames) * 0.01
        return CalibratedStream(times, rng.normal(size=(frames, N, 3)))

    def test_hundred_frames_stride_ten(self, layout, rng):
        stream = self.calibrated(100, rng)
        windows = make_windows(stream, still_joints(1.0, 2.0), layout, stride=10)
        assert len(windows) == 10
        rebuilt = np.concatenate([w.x for w in windows])
        np.testing.assert_array_equal(rebuilt, stream.flux.astype(np.float32))

    def test_single_window_shape(self, layout, rng):
        stream = self.calibrated(10, rng)
        windows = make_windows(stream, still_joints(1.0, 1.1), layout, stride=1)
        assert len(windows) == 1
        assert windows[0].x.shape == (10, 368, 3)
        assert windows[0].p.shape == (10, 368, 3)
        assert windows[0].t_end == pytest.approx(stream.timestamps[9])

    def test_static_hand_positions_identical(self, layout, rng):
        windows = make_windows(self.calibrated(20, rng), still_joints(1.0, 1.2), layout, stride=5)
        for window in windows:
            for frame in window.p[1:]:
                np.testing.assert_array_equal(frame, window.p[0])

    def test_moving_hand_positions_follow_joints(self, layout, rng):
        stream = self.calibrated(10, rng)
        times = stream.timestamps
        angles = np.zeros((10, 16))
        angles[:, layout.joint_index["index_1"]] = np.linspace(0.0, 0.9, 10)
        window = make_windows(stream, JointTrajectory(times, angles), layout)[0]
        assert not np.allclose(window.p[0], window.p[-1])

    def test_short_stream(self, layout, rng):
        with pytest.raises(InsufficientDataError):
            make_windows(self.calibrated(9, rng), still_joints(1.0, 1.1), layout)

    def test_rejects_unresampled_stream(self, layout, rng):
        stream = CalibratedStream(np.arange(12) / 87.0, rng.normal(size=(12, N, 3)))
        with pytest.raises(InvalidInputError):
            make_windows(stream, still_joints(0.0, 0.2), layout)

    def test_joints_must_cover_stream(self, layout, rng):
        with pytest.raises(InvalidInputError):
            make_windows(self.calibrated(30, rng), still_joints(1.2, 1.3), layout)

    def test_stack(self, layout, rng):
        windows = make_windows(self.calibrated(30, rng), still_joints(1.0, 1.3), layout)
        x, p, t_end = stack_windows(windows)
        assert x.shape == p.shape == (3, 10, 368, 3)
        assert x.dtype == np.float32
        assert np.all(np.diff(t_end) > 0)
        with pytest.raises(InsufficientDataError):
            stack_windows([])
