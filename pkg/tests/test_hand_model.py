import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from skinssl.errors import InvalidInputError, MissingFileError
from skinssl.hand_model import (
    BASE_LINK,
    JointState,
    PadType,
    forward_kinematics,
    layout_from_dict,
    layout_to_dict,
    load_layout,
    rest_baseline_config,
    save_layout,
    taxel_geometry,
)


def homogeneous(rotation, translation=(0.0, 0.0, 0.0)):
    t = np.eye(4)
    t[:3, :3] = rotation
    t[:3, 3] = translation
    return t


class TestDefaultLayout:
    def test_taxel_count(self, layout):
        assert layout.taxel_count == 4 * 30 + 11 * 16 + 3 * 24 == 368
        assert layout.joint_count == 16

    def test_pad_composition(self, layout):
        types = [pad.pad_type for pad in layout.pads]
        assert types.count(PadType.FINGERTIP) == 4
        assert types.count(PadType.PHALANGE) == 11
        assert types.count(PadType.PALM) == 3

    def test_palm_pads_on_base_link(self, layout):
        palms = [pad for pad in layout.pads if pad.pad_type is PadType.PALM]
        assert all(pad.mount_link == BASE_LINK for pad in palms)

    def test_taxel_ids_unique(self, layout):
        slices = sorted(layout.pad_slices.values(), key=lambda s: s.start)
        ids = np.concatenate([np.arange(s.start, s.stop) for s in slices])
        np.testing.assert_array_equal(ids, np.arange(368))

    def test_rest_positions_distinct(self, layout):
        positions = layout.rest_positions
        distances = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
        np.fill_diagonal(distances, np.inf)
        assert distances.min() > 1e-4


class TestForwardKinematics:
    def test_zero_joints_give_rest_positions(self, layout):
        fk = forward_kinematics(layout, JointState(np.zeros(16)))
        np.testing.assert_array_equal(fk.positions, layout.rest_positions)

    def test_finger_joint_leaves_palm_unchanged(self, layout):
        angles = np.zeros(16)
        angles[layout.joint_index["middle_1"]] = 0.7
        angles[layout.joint_index["thumb_0"]] = -0.4
        moved = forward_kinematics(layout, angles).positions
        palm = layout.taxel_pad_types == PadType.PALM
        np.testing.assert_array_equal(moved[palm], layout.rest_positions[palm])
        assert not np.allclose(moved[~palm], layout.rest_positions[~palm])

    def test_single_joint_matches_manual_chain(self, layout):
        angles = np.zeros(16)
        angles[layout.joint_index["index_1"]] = np.pi / 2
        positions = forward_kinematics(layout, angles).positions

        link0, link1 = layout.link_map["index_0"], layout.link_map["index_1"]
        rx = homogeneous(Rotation.from_rotvec(np.array(link1.joint_axis) * np.pi / 2).as_matrix())
        chain = link0.offset @ link1.offset @ rx
        for pad in layout.pads:
            if pad.mount_link != "index_1":
                continue
            frame = chain @ pad.mount_transform
            expected = pad.local_taxel_offsets @ frame[:3, :3].T + frame[:3, 3]
            np.testing.assert_allclose(positions[layout.pad_slices[pad.pad_id]], expected,
                                       atol=1e-9, rtol=0)

    def test_distal_taxels_move_proximal_do_not(self, layout):
        angles = np.zeros(16)
        angles[layout.joint_index["ring_2"]] = 0.5
        moved = forward_kinematics(layout, angles).positions
        distal = layout.taxels_distal_to("ring_2")
        assert distal.any()
        np.testing.assert_array_equal(moved[~distal], layout.rest_positions[~distal])

    def test_dimension_mismatch(self, layout):
        with pytest.raises(InvalidInputError):
            forward_kinematics(layout, np.zeros(15))

    def test_batched_matches_single(self, layout, rng):
        angles = rng.uniform(-0.5, 0.5, size=(3, 16))
        batch, _ = taxel_geometry(layout, angles)
        for b in range(3):
            np.testing.assert_allclose(batch[b], forward_kinematics(layout, angles[b]).positions,
                                       atol=1e-12)

    def test_normals_are_unit(self, layout, rng):
        _, normals = taxel_geometry(layout, rng.uniform(-1, 1, size=(2, 16)))
        np.testing.assert_allclose(np.linalg.norm(normals, axis=-1), 1.0, atol=1e-12)


class TestRestBaseline:
    def test_all_zero(self):
        assert np.array_equal(rest_baseline_config().angles, np.zeros(16))

    def test_deterministic(self):
        assert rest_baseline_config() == rest_baseline_config()

    def test_consistent_with_rest_pose(self, layout):
        fk = forward_kinematics(layout, rest_baseline_config())
        np.testing.assert_array_equal(fk.positions, layout.rest_positions)

    def test_non_finite_rejected(self):
        with pytest.raises(InvalidInputError):
            JointState([0.0, np.nan])


class TestLayoutFiles:
    def test_round_trip(self, layout, tmp_path):
        path = save_layout(layout, tmp_path / "hand.json")
        loaded = load_layout(path)
        assert loaded.taxel_count == 368
        np.testing.assert_allclose(loaded.rest_positions, layout.rest_positions, atol=1e-12)

    def test_grid_pads(self, small_layout, tmp_path):
        data = layout_to_dict(small_layout)
        for pad in data["pads"]:
            del pad["offsets"], pad["normals"]
            pad.update(rows=2, cols=2, pitch=0.005)
        path = tmp_path / "small.json"
        path.write_text(json.dumps(data))
        loaded = load_layout(path)
        np.testing.assert_allclose(loaded.rest_positions, small_layout.rest_positions, atol=1e-12)

    def test_missing_field(self, layout):
        data = layout_to_dict(layout)
        del data["pads"][0]["mount_link"]
        with pytest.raises(InvalidInputError):
            layout_from_dict(data)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingFileError):
            load_layout(tmp_path / "nope.json")


def test_small_joint_step_moves_taxels_little(layout, rng):
    base = rng.uniform(-0.5, 0.5, size=16)
    reference = forward_kinematics(layout, base).positions
    for j in range(16):
        nudged = base.copy()
        nudged[j] += 1e-6
        moved = forward_kinematics(layout, nudged).positions
        assert np.abs(moved - reference).max() < 1e-4
