import json

import numpy as np
import pytest

from skinssl.errors import (
    ChecksumMismatchError,
    InvalidInputError,
    MissingFileError,
    VersionMismatchError,
)
from skinssl.hand_model import PadType
from skinssl.signal_pipeline import calibrate
from skinssl.synth_data import (
    HEADER,
    ContactEvent,
    LinearTrajectory,
    SensorModel,
    SimulatorConfig,
    apply_sensor,
    constant_trajectory,
    episode_bytes,
    generate_force_dataset,
    generate_joystick_episode,
    generate_play_episode,
    generate_pose_episode,
    irregular_timestamps,
    make_object_profiles,
    make_sensor_model,
    read_dataset,
    read_episode,
    render_frame,
    taxel_response,
    write_dataset,
    write_episode,
)

SIGMA = 0.002


def contact_at(position, force=1.0, shear=(0.0, 0.0)):
    return ContactEvent(np.asarray(position, dtype=float), SIGMA, force, shear)


@pytest.fixture
def quiet_sim():
    return SimulatorConfig(noise_std=0.0, play_classes=2, play_episodes_per_class=1,
                           play_seconds=1.0)


class TestTaxelResponse:
    def test_far_contact_vanishes(self):
        flux = taxel_response(contact_at((10 * SIGMA, 0.0, 0.0), force=3.0), np.zeros(3),
                              np.array([0.0, 0.0, 1.0]))
        assert np.all(np.abs(flux) < 2e-22 * 3.0)

    def test_contact_atop_taxel(self):
        flux = taxel_response(contact_at((0.0, 0.0, 0.0), force=2.5), np.zeros(3),
                              np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(flux, [0.0, 0.0, 2.5], atol=1e-15)

    def test_one_sigma(self):
        flux = taxel_response(contact_at((0.0, SIGMA, 0.0), force=2.0), np.zeros(3),
                              np.array([0.0, 0.0, 1.0]))
        assert flux[2] == pytest.approx(2.0 * np.exp(-0.5))
        assert flux[2] == pytest.approx(1.2131, abs=1e-4)

    def test_shear_lands_on_tangential_channels(self):
        flux = taxel_response(contact_at((0.0, 0.0, 0.0), force=0.0, shear=(0.3, -0.2)),
                              np.zeros(3), np.array([0.0, 0.0, 1.0]))
        assert flux[2] == pytest.approx(0.0)
        assert np.hypot(flux[0], flux[1]) == pytest.approx(np.hypot(0.3, 0.2))

    def test_gain_and_bias(self):
        flux = taxel_response(contact_at((0.0, 0.0, 0.0), force=1.0), np.zeros(3),
                              np.array([0.0, 0.0, 1.0]), gain=2.0, bias=0.5)
        np.testing.assert_allclose(flux, [0.5, 0.5, 2.5])

    @pytest.mark.parametrize("kwargs", [{"normal_force": -1.0}, {"sigma": 0.0},
                                        {"surface_normal": (0.0, 0.0, 2.0)}])
    def test_contact_validation(self, kwargs):
        args = {"position": np.zeros(3), "sigma": SIGMA, "normal_force": 1.0, **kwargs}
        with pytest.raises(InvalidInputError):
            ContactEvent(**args)


class TestRenderFrame:
    def test_empty_contacts(self, layout):
        rest = layout.rest_geometry
        frame = render_frame([], rest.positions, rest.normals)
        assert frame.shape == (368, 3)
        assert np.all(frame == 0.0)

    def test_superposition(self, layout):
        rest = layout.rest_geometry
        contact = contact_at(rest.positions[300] + [0.001, 0.0, 0.0], force=1.5, shear=(0.1, 0.2))
        single = render_frame([contact], rest.positions, rest.normals)
        double = render_frame([contact, contact], rest.positions, rest.normals)
        np.testing.assert_allclose(double, 2.0 * single, rtol=1e-12, atol=0.0)

    def test_matches_taxel_response(self, layout):
        rest = layout.rest_geometry
        contact = contact_at(rest.positions[10], force=1.0, shear=(0.05, 0.0))
        frame = render_frame([contact], rest.positions, rest.normals)
        for i in (0, 10, 200):
            np.testing.assert_allclose(
                frame[i], taxel_response(contact, rest.positions[i], rest.normals[i]), atol=1e-12)

    def test_noise_averages_out(self, layout):
        rest = layout.rest_geometry
        contact = contact_at(rest.positions[320], force=1.0)
        clean = render_frame([contact], rest.positions, rest.normals)
        eta = 0.01
        sensor = SensorModel(np.ones((368, 3)), np.zeros((368, 3)), eta)
        renders = apply_sensor(np.broadcast_to(clean, (10_000, 368, 3)), sensor,
                               np.random.default_rng(3))
        error = np.abs(renders.mean(axis=0) - clean)
        assert np.mean(error <= 3 * eta / 100) >= 0.99
        assert error.max() <= 5 * eta / 100

    def test_sensor_model_fixed_per_seed(self):
        a, b = make_sensor_model(368), make_sensor_model(368)
        np.testing.assert_array_equal(a.gain, b.gain)
        assert np.all((a.gain >= 0.9) & (a.gain <= 1.1))
        assert np.all(np.abs(a.bias) <= 0.05)


class TestPlayEpisodes:
    def test_deterministic(self, layout, tiny_sim):
        profile = make_object_profiles(layout, 3, seed=4)[1]
        a = generate_play_episode(profile, layout, 1.5, seed=9, sim=tiny_sim)
        b = generate_play_episode(profile, layout, 1.5, seed=9, sim=tiny_sim)
        assert a.equals(b)
        assert a.object_class == 1
        c = generate_play_episode(profile, layout, 1.5, seed=10, sim=tiny_sim)
        assert not a.equals(c)

    def test_two_minute_frame_count(self, rng):
        times = irregular_timestamps(rng, 120.0, (80.0, 100.0))
        assert len(times) >= 9600
        gaps = np.diff(times)
        assert gaps.min() >= 1 / 100 - 1e-12 and gaps.max() <= 1 / 80 + 1e-12

    def test_zero_force_footprint_is_bias_only(self, layout, quiet_sim):
        profile = make_object_profiles(layout, 2, seed=0)[0].with_force_scale(0.0)
        record = generate_play_episode(profile, layout, 1.0, seed=2, sim=quiet_sim)
        np.testing.assert_array_equal(record.raw_stream.flux,
                                      np.broadcast_to(record.baseline, record.raw_stream.flux.shape))

    def test_zero_force_with_noise(self, layout):
        sim = SimulatorConfig(noise_std=0.01)
        profile = make_object_profiles(layout, 2, seed=0)[0].with_force_scale(0.0)
        record = generate_play_episode(profile, layout, 1.0, seed=2, sim=sim)
        residual = (record.raw_stream.flux - record.baseline) / sim.counts_per_unit
        assert residual.std() == pytest.approx(0.01, rel=0.05)

    def test_profiles_are_distinct(self, layout):
        profiles = make_object_profiles(layout, 8, seed=0)
        assert [p.class_id for p in profiles] == list(range(8))
        footprints = {tuple(np.round(np.concatenate([t.offset for t in p.footprint]), 6))
                      for p in profiles}
        assert len(footprints) == 8

    def test_too_short(self, layout):
        profile = make_object_profiles(layout, 2, seed=0)[0]
        with pytest.raises(InvalidInputError):
            generate_play_episode(profile, layout, 0.5, seed=0)


class TestForceDataset:
    def test_labels(self, force_dataset):
        assert len(force_dataset) == 10
        for record in force_dataset:
            normal = record.forces[:, 2]
            assert normal.min() >= 0.0 and normal.max() <= 5.0
            assert len(record.forces) == 100

    def test_label_alignment(self, force_dataset):
        record = force_dataset.episode(0)
        label_t = record.label_times("forces")
        flux_t = calibrate(record.raw_stream, record.baseline_frame).timestamps
        nearest = np.abs(label_t[:, None] - flux_t[None]).min(axis=1)
        assert nearest.max() <= 0.005 + 1e-12

    def test_total_frames_scale_with_presses(self, layout, tiny_sim):
        dataset = generate_force_dataset(layout, 3, seed=1, sim=tiny_sim)
        assert sum(len(r.forces) for r in dataset) == 3 * 100

    def test_midway_press_is_symmetric(self, layout):
        rest = layout.rest_geometry
        palm = next(p for p in layout.pads if p.pad_type is PadType.PALM)
        first = layout.pad_slices[palm.pad_id].start
        a, b = rest.positions[first], rest.positions[first + 1]
        frame = render_frame([contact_at((a + b) / 2, force=2.0)],
                             rest.positions, rest.normals)
        assert frame[first, 2] == pytest.approx(frame[first + 1, 2], rel=1e-12)
        assert frame[first, 2] > 0

    def test_requires_a_press(self, layout):
        with pytest.raises(InvalidInputError):
            generate_force_dataset(layout, 0, seed=0)


class TestPoseEpisodes:
    def test_stationary(self, layout, quiet_sim):
        record = generate_pose_episode(layout, constant_trajectory((0.01, -0.02, 0.3)), 1.0,
                                       seed=0, sim=quiet_sim)
        np.testing.assert_allclose(record.pose, np.tile([0.01, -0.02, 0.3], (11, 1)), atol=1e-7)

    def test_slide_ends_at_target(self, layout, quiet_sim):
        trajectory = LinearTrajectory(np.zeros(3), np.array([0.05, 0.0, 0.0]), 2.0)
        record = generate_pose_episode(layout, trajectory, 2.0, seed=0, sim=quiet_sim)
        np.testing.assert_allclose(record.pose[-1], [0.05, 0.0, 0.0], atol=1e-7)
        assert len(record.pose) == 21

    def test_labels_within_range(self, pose_dataset):
        for record in pose_dataset:
            assert np.all(np.abs(record.pose[:, :2]) <= 0.125 + 1e-6)
            assert np.all(np.abs(record.pose[:, 2]) <= np.deg2rad(50) + 1e-6)


class TestJoystickEpisodes:
    def test_neutral(self, layout, quiet_sim):
        record = generate_joystick_episode(layout, constant_trajectory(np.zeros(3)), 1.0, seed=0,
                                           sim=quiet_sim)
        assert np.all(record.joystick == 0.0)

    def test_full_roll(self, layout, quiet_sim):
        record = generate_joystick_episode(layout, constant_trajectory((1.0, 0.0, 0.0)), 1.0,
                                           seed=0, sim=quiet_sim)
        np.testing.assert_allclose(record.joystick, np.tile([1.0, 0.0, 0.0], (11, 1)))

    def test_deflection_changes_contact(self, layout, quiet_sim):
        neutral = generate_joystick_episode(layout, constant_trajectory(np.zeros(3)), 1.0,
                                            seed=0, sim=quiet_sim)
        rolled = generate_joystick_episode(layout, constant_trajectory((1.0, 0.0, 0.0)), 1.0,
                                           seed=0, sim=quiet_sim)
        assert not np.allclose(neutral.raw_stream.flux, rolled.raw_stream.flux)

    def test_labels_normalized(self, joystick_dataset):
        for record in joystick_dataset:
            assert np.all(np.abs(record.joystick) <= 1.0)


class TestEpisodeFiles:
    def test_round_trip(self, play_dataset, tmp_path):
        record = play_dataset.episode(0)
        loaded = read_episode(write_episode(record, tmp_path / "ep.bin"))
        assert loaded.equals(record)

    def test_round_trip_labels(self, force_dataset, tmp_path):
        record = force_dataset.episode(2)
        loaded = read_episode(write_episode(record, tmp_path / "ep.bin"))
        assert loaded.equals(record)
        assert loaded.pose is None

    def test_corrupt_byte(self, play_dataset, tmp_path):
        data = bytearray(episode_bytes(play_dataset.episode(0)))
        data[HEADER.size + 100] ^= 0xFF
        path = tmp_path / "ep.bin"
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumMismatchError):
            read_episode(path)

    def test_unknown_file_version(self, play_dataset, tmp_path):
        data = bytearray(episode_bytes(play_dataset.episode(0)))
        data[4:8] = (99).to_bytes(4, "little")
        path = tmp_path / "ep.bin"
        path.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            read_episode(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_episode(tmp_path / "nope.bin")


class TestDatasetFiles:
    def test_round_trip(self, pose_dataset, tmp_path):
        written = write_dataset(pose_dataset, tmp_path / "pose")
        loaded = read_dataset(tmp_path / "pose")
        assert loaded.manifest.content_hash() == pose_dataset.manifest.content_hash()
        for i in range(len(pose_dataset)):
            assert loaded.episode(i).equals(pose_dataset.episode(i))
        assert written.manifest.content_hash() == pose_dataset.manifest.content_hash()

    def test_generation_is_reproducible(self, layout, tiny_sim, tmp_path):
        generate_force_dataset(layout, 2, seed=5, sim=tiny_sim, out_dir=tmp_path / "a")
        generate_force_dataset(layout, 2, seed=5, sim=tiny_sim, out_dir=tmp_path / "b")
        for name in ("episode_00000.bin", "episode_00001.bin", "manifest.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_version_major_mismatch(self, pose_dataset, tmp_path):
        write_dataset(pose_dataset, tmp_path)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        manifest["generator_version"] = "7.0"
        (tmp_path / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(VersionMismatchError):
            read_dataset(tmp_path)

    def test_missing_episode(self, pose_dataset, tmp_path):
        write_dataset(pose_dataset, tmp_path)
        (tmp_path / "episode_00001.bin").unlink()
        with pytest.raises(MissingFileError):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(MissingFileError):
            read_dataset(tmp_path)

    def test_error_codes_distinct(self):
        codes = {MissingFileError.code, ChecksumMismatchError.code, VersionMismatchError.code}
        assert len(codes) == 3
