"""
Sensorized hand layout and forward kinematics.

The hand is a tree of links rooted at the palm (base link). Each finger is a
chain of four revolute joints; sensing pads are rigidly mounted on links and
carry their taxels' offsets and outward normals in the pad frame. Forward
kinematics composes 4x4 homogeneous transforms down each chain and maps every
taxel into the hand base frame.

Taxel enumeration is pad order, then the pad's own taxel order. All 368 rows of
a TaxelPositions matrix follow that enumeration.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from skinssl.config import (
    FINGERTIP_RADIUS,
    FINGERTIP_TAXELS,
    JOINT_COUNT,
    PALM_TAXELS,
    PHALANGE_TAXELS,
    TAXEL_COUNT,
)
from skinssl.errors import InvalidInputError, MissingFileError

logger = logging.getLogger(__name__)

BASE_LINK = "palm"


class PadType(enum.IntEnum):
    FINGERTIP = 0
    PHALANGE = 1
    PALM = 2

    @classmethod
    def parse(cls, name):
        try:
            return cls[str(name).upper()]
        except KeyError:
            raise InvalidInputError(f"Unknown pad type: {name!r}") from None


class JointType(str, enum.Enum):
    REVOLUTE = "revolute"
    FIXED = "fixed"


EXPECTED_TAXELS = {
    PadType.FINGERTIP: FINGERTIP_TAXELS,
    PadType.PHALANGE: PHALANGE_TAXELS,
    PadType.PALM: PALM_TAXELS,
}


# =============================================================================
# TRANSFORMS
# =============================================================================

def make_transform(translation=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0)):
    """Homogeneous transform from a translation (m) and a w-first unit quaternion."""
    w, x, y, z = quaternion
    transform = np.eye(4)
    transform[:3, :3] = Rotation.from_quat([x, y, z, w]).as_matrix()
    transform[:3, 3] = np.asarray(translation, dtype=np.float64)
    return transform


def transform_to_dict(transform):
    x, y, z, w = Rotation.from_matrix(transform[:3, :3]).as_quat()
    return {
        "translation": [float(v) for v in transform[:3, 3]],
        "rotation": [float(w), float(x), float(y), float(z)],
    }


def transform_from_dict(data):
    return make_transform(data.get("translation", (0.0, 0.0, 0.0)),
                          data.get("rotation", (1.0, 0.0, 0.0, 0.0)))


def axis_rotations(axis, angles):
    """Batch of 4x4 rotations about a unit ``axis`` by ``angles`` (radians)."""
    angles = np.asarray(angles, dtype=np.float64)
    rotations = Rotation.from_rotvec(np.outer(angles, axis)).as_matrix()
    out = np.zeros((angles.shape[0], 4, 4))
    out[:, :3, :3] = rotations
    out[:, 3, 3] = 1.0
    return out


# =============================================================================
# DOMAIN TYPES
# =============================================================================

@dataclass(frozen=True, eq=False)
class LinkSpec:
    link_id: str
    parent: str | None
    joint_type: JointType = JointType.FIXED
    joint_axis: tuple = (0.0, 0.0, 1.0)
    offset: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        axis = np.asarray(self.joint_axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if self.joint_type is JointType.REVOLUTE and not np.isclose(norm, 1.0, atol=1e-9):
            raise InvalidInputError(f"Joint axis of link {self.link_id!r} is not a unit vector")


@dataclass(frozen=True, eq=False)
class PadSpec:
    pad_id: int
    pad_type: PadType
    local_taxel_offsets: np.ndarray
    mount_link: str
    mount_transform: np.ndarray
    local_taxel_normals: np.ndarray | None = None

    def __post_init__(self):
        offsets = np.asarray(self.local_taxel_offsets, dtype=np.float64)
        if offsets.ndim != 2 or offsets.shape[1] != 3 or len(offsets) == 0:
            raise InvalidInputError(f"Pad {self.pad_id}: offsets must be an (n, 3) array")
        distances = np.linalg.norm(offsets[:, None] - offsets[None], axis=-1)
        np.fill_diagonal(distances, np.inf)
        if distances.min() <= 0.0:
            raise InvalidInputError(f"Pad {self.pad_id}: taxel offsets are not pairwise distinct")
        if self.local_taxel_normals is None:
            normals = np.tile([0.0, 0.0, 1.0], (len(offsets), 1))
        else:
            normals = np.asarray(self.local_taxel_normals, dtype=np.float64)
            if normals.shape != offsets.shape:
                raise InvalidInputError(f"Pad {self.pad_id}: normals shape {normals.shape} "
                                        f"does not match offsets {offsets.shape}")
            normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
        object.__setattr__(self, "local_taxel_offsets", offsets)
        object.__setattr__(self, "local_taxel_normals", normals)

    @property
    def taxel_count(self):
        return len(self.local_taxel_offsets)


@dataclass(frozen=True)
class JointState:
    angles: np.ndarray

    def __post_init__(self):
        angles = np.asarray(self.angles, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(angles)):
            raise InvalidInputError("Joint angles must be finite")
        object.__setattr__(self, "angles", angles)

    def __eq__(self, other):
        return isinstance(other, JointState) and np.array_equal(self.angles, other.angles)


@dataclass(frozen=True, eq=False)
class TaxelPositions:
    """Per-taxel positions (m) and outward unit normals in the hand base frame."""

    positions: np.ndarray
    normals: np.ndarray


@dataclass(frozen=True, eq=False)
class JointTrajectory:
    """Timestamped joint states, one row of ``angles`` per timestamp."""

    timestamps: np.ndarray
    angles: np.ndarray

    def __post_init__(self):
        if len(self.timestamps) != len(self.angles):
            raise InvalidInputError("Joint trajectory timestamps and angles differ in length")

    def __len__(self):
        return len(self.timestamps)

    def nearest_indices(self, times):
        """Index of the nearest joint sample for each query time."""
        times = np.asarray(times, dtype=np.float64)
        right = np.clip(np.searchsorted(self.timestamps, times), 1, len(self.timestamps) - 1)
        left = right - 1
        pick_left = np.abs(times - self.timestamps[left]) <= np.abs(self.timestamps[right] - times)
        return np.where(pick_left, left, right)


@dataclass(frozen=True, eq=False)
class HandLayout:
    links: tuple
    pads: tuple
    name: str = "default"

    def __post_init__(self):
        seen = set()
        for link in self.links:
            if link.parent is None:
                if link.joint_type is not JointType.FIXED:
                    raise InvalidInputError(f"Root link {link.link_id!r} cannot carry a joint")
            elif link.parent not in seen:
                raise InvalidInputError(
                    f"Link {link.link_id!r} appears before its parent {link.parent!r}"
                )
            if link.link_id in seen:
                raise InvalidInputError(f"Duplicate link id {link.link_id!r}")
            seen.add(link.link_id)
        for pad in self.pads:
            if pad.mount_link not in seen:
                raise InvalidInputError(f"Pad {pad.pad_id} mounts on unknown link {pad.mount_link!r}")

    @cached_property
    def link_map(self):
        return {link.link_id: link for link in self.links}

    @cached_property
    def joint_links(self):
        return tuple(l.link_id for l in self.links if l.joint_type is JointType.REVOLUTE)

    @cached_property
    def joint_index(self):
        return {link_id: i for i, link_id in enumerate(self.joint_links)}

    @property
    def joint_count(self):
        return len(self.joint_links)

    @property
    def taxel_count(self):
        return sum(pad.taxel_count for pad in self.pads)

    @cached_property
    def taxel_pad_types(self):
        return np.concatenate([np.full(p.taxel_count, int(p.pad_type)) for p in self.pads])

    @cached_property
    def taxel_pad_ids(self):
        return np.concatenate([np.full(p.taxel_count, p.pad_id) for p in self.pads])

    @cached_property
    def taxel_links(self):
        return np.concatenate([np.array([p.mount_link] * p.taxel_count, dtype=object)
                               for p in self.pads])

    @cached_property
    def pad_slices(self):
        slices, start = {}, 0
        for pad in self.pads:
            slices[pad.pad_id] = slice(start, start + pad.taxel_count)
            start += pad.taxel_count
        return slices

    def ancestors(self, link_id):
        """The chain from ``link_id`` up to the root, ``link_id`` first."""
        chain = []
        while link_id is not None:
            chain.append(link_id)
            link_id = self.link_map[link_id].parent
        return chain

    def taxels_distal_to(self, joint_link):
        """Boolean mask of taxels whose mount link lies at or below ``joint_link``."""
        return np.array([joint_link in self.ancestors(link) for link in self.taxel_links])

    @cached_property
    def rest_geometry(self):
        return forward_kinematics(self, rest_baseline_config(self.joint_count))

    @property
    def rest_positions(self):
        return self.rest_geometry.positions


# =============================================================================
# FORWARD KINEMATICS
# =============================================================================

def link_transforms(layout, angles):
    """World transform of every link for a batch of joint vectors (B, J)."""
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    if angles.shape[1] != layout.joint_count:
        raise InvalidInputError(
            f"Expected {layout.joint_count} joint angles, got {angles.shape[1]}"
        )
    batch = angles.shape[0]
    transforms = {}
    for link in layout.links:
        if link.parent is None:
            transform = np.broadcast_to(link.offset, (batch, 4, 4)).copy()
        else:
            transform = transforms[link.parent] @ link.offset
        if link.joint_type is JointType.REVOLUTE:
            q = angles[:, layout.joint_index[link.link_id]]
            transform = transform @ axis_rotations(np.asarray(link.joint_axis), q)
        transforms[link.link_id] = transform
    return transforms


def taxel_geometry(layout, angles):
    """Batched FK: positions and normals of shape (B, N, 3) for angles (B, J)."""
    transforms = link_transforms(layout, angles)
    positions, normals = [], []
    for pad in layout.pads:
        pad_frame = transforms[pad.mount_link] @ pad.mount_transform
        rotation, translation = pad_frame[:, :3, :3], pad_frame[:, :3, 3]
        positions.append(np.einsum("bij,nj->bni", rotation, pad.local_taxel_offsets)
                         + translation[:, None, :])
        normals.append(np.einsum("bij,nj->bni", rotation, pad.local_taxel_normals))
    return np.concatenate(positions, axis=1), np.concatenate(normals, axis=1)


def forward_kinematics(layout, joints):
    """Taxel positions in the hand base frame for one joint state."""
    if not isinstance(joints, JointState):
        joints = JointState(joints)
    if joints.angles.shape[0] != layout.joint_count:
        raise InvalidInputError(
            f"Joint state has {joints.angles.shape[0]} angles, layout needs {layout.joint_count}"
        )
    positions, normals = taxel_geometry(layout, joints.angles[None, :])
    return TaxelPositions(positions=positions[0], normals=normals[0])


def rest_baseline_config(joint_count=JOINT_COUNT):
    """Canonical flat-open (palm up) joint state used for baseline capture."""
    return JointState(np.zeros(joint_count))


# =============================================================================
# DEFAULT LAYOUT
# =============================================================================

PAD_HEIGHT = 0.01                          # pad surface above the link axis
SEGMENT_LENGTHS = (0.02, 0.054, 0.038, 0.044)
FINGER_JOINT_AXES = ((0.0, 0.0, 1.0), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0), (1.0, 0.0, 0.0))
FINGER_BASES = (
    # name, knuckle position on the palm, yaw of the finger about the palm normal
    ("index", (0.045, 0.095, 0.0), 0.0),
    ("middle", (0.0, 0.1, 0.0), 0.0),
    ("ring", (-0.045, 0.095, 0.0), 0.0),
    ("thumb", (0.055, 0.02, 0.0), -np.pi / 2),
)
PALM_PAD_CENTERS = ((0.03, 0.045), (0.0, 0.045), (-0.03, 0.045))


def grid_offsets(rows, cols, pitch):
    """Planar taxel grid centred on the pad origin; rows run along y, cols along x."""
    return np.array([
        ((c - (cols - 1) / 2) * pitch, (r - (rows - 1) / 2) * pitch, 0.0)
        for r in range(rows) for c in range(cols)
    ])


def curved_fingertip_offsets(rows=5, arcs=6, radius=FINGERTIP_RADIUS,
                             row_pitch=0.0035, arc_span_deg=125.0):
    """Taxels on a cylindrical section around the pad's y axis, with radial normals."""
    phis = np.deg2rad(np.linspace(-arc_span_deg / 2, arc_span_deg / 2, arcs))
    offsets, normals = [], []
    for r in range(rows):
        y = (r - (rows - 1) / 2) * row_pitch
        for phi in phis:
            normal = np.array([np.sin(phi), 0.0, np.cos(phi)])
            offsets.append(radius * normal + np.array([0.0, y, 0.0]))
            normals.append(normal)
    return np.array(offsets), np.array(normals)


def build_default_layout():
    """The fixed 18-pad, 368-taxel, 16-joint hand used throughout the project."""
    links = [LinkSpec(BASE_LINK, None)]
    for name, knuckle, yaw in FINGER_BASES:
        base = make_transform(knuckle, (np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)))
        parent = BASE_LINK
        for j, axis in enumerate(FINGER_JOINT_AXES):
            offset = base if j == 0 else make_transform((0.0, SEGMENT_LENGTHS[j - 1], 0.0))
            link_id = f"{name}_{j}"
            links.append(LinkSpec(link_id, parent, JointType.REVOLUTE, axis, offset))
            parent = link_id

    pads = []
    phalange_grid = grid_offsets(4, 4, 0.004)
    tip_offsets, tip_normals = curved_fingertip_offsets()

    def add_pad(pad_type, offsets, link, translation, normals=None):
        pads.append(PadSpec(len(pads), pad_type, offsets, link,
                            make_transform(translation), normals))

    for name, _, _ in FINGER_BASES:
        phalange_links = (2, 3) if name == "thumb" else (1, 2, 3)
        for j in phalange_links:
            y = 0.012 if j == 3 else SEGMENT_LENGTHS[j] / 2
            add_pad(PadType.PHALANGE, phalange_grid, f"{name}_{j}", (0.0, y, PAD_HEIGHT))
        add_pad(PadType.FINGERTIP, tip_offsets, f"{name}_3", (0.0, 0.034, 0.0), tip_normals)
    palm_grid = grid_offsets(6, 4, 0.005)
    for x, y in PALM_PAD_CENTERS:
        add_pad(PadType.PALM, palm_grid, BASE_LINK, (x, y, PAD_HEIGHT))

    layout = HandLayout(tuple(links), tuple(pads))
    _check_default_counts(layout)
    return layout


def _check_default_counts(layout):
    for pad in layout.pads:
        if pad.taxel_count != EXPECTED_TAXELS[pad.pad_type]:
            raise InvalidInputError(f"Pad {pad.pad_id} has {pad.taxel_count} taxels, "
                                    f"expected {EXPECTED_TAXELS[pad.pad_type]}")
    if layout.taxel_count != TAXEL_COUNT or layout.joint_count != JOINT_COUNT:
        raise InvalidInputError("Default layout must have 368 taxels and 16 joints")


# =============================================================================
# LAYOUT FILES (JSON)
# =============================================================================

def layout_to_dict(layout):
    return {
        "name": layout.name,
        "links": [
            {
                "id": link.link_id,
                "parent": link.parent,
                "joint_type": link.joint_type.value,
                "joint_axis": [float(v) for v in link.joint_axis],
                "offset": transform_to_dict(link.offset),
            }
            for link in layout.links
        ],
        "pads": [
            {
                "pad_id": pad.pad_id,
                "type": pad.pad_type.name.lower(),
                "offsets": pad.local_taxel_offsets.tolist(),
                "normals": pad.local_taxel_normals.tolist(),
                "mount_link": pad.mount_link,
                "mount_transform": transform_to_dict(pad.mount_transform),
            }
            for pad in layout.pads
        ],
    }


def layout_from_dict(data):
    try:
        links = tuple(
            LinkSpec(
                link_id=entry["id"],
                parent=entry.get("parent"),
                joint_type=JointType(entry.get("joint_type", "fixed")),
                joint_axis=tuple(entry.get("joint_axis", (0.0, 0.0, 1.0))),
                offset=transform_from_dict(entry.get("offset", {})),
            )
            for entry in data["links"]
        )
        pads = []
        for entry in data["pads"]:
            if "offsets" in entry:
                offsets = np.asarray(entry["offsets"], dtype=np.float64)
            else:
                offsets = grid_offsets(entry["rows"], entry["cols"], entry.get("pitch", 0.004))
            pads.append(PadSpec(
                pad_id=int(entry["pad_id"]),
                pad_type=PadType.parse(entry["type"]),
                local_taxel_offsets=offsets,
                mount_link=entry["mount_link"],
                mount_transform=transform_from_dict(entry.get("mount_transform", {})),
                local_taxel_normals=entry.get("normals"),
            ))
    except KeyError as e:
        raise InvalidInputError(f"Hand layout is missing field {e}") from None
    return HandLayout(links, tuple(pads), name=data.get("name", "custom"))


def save_layout(layout, path):
    path = Path(path)
    with open(path, "w") as f:
        json.dump(layout_to_dict(layout), f, indent=2)
    return path


def load_layout(path):
    """Load a hand layout file; pads may be given as rows/cols grids or explicit offsets."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Hand layout file not found: {path}")
    with open(path, "r") as f:
        layout = layout_from_dict(json.load(f))
    logger.info(f"Loaded hand layout '{layout.name}': {len(layout.pads)} pads, "
                f"{layout.taxel_count} taxels, {layout.joint_count} joints")
    return layout
