"""
Deterministic tactile-skin simulator and dataset files.

The simulator stands in for the robot: contacts are Gaussian pressure
footprints whose 3-axis force is read out in each taxel's local frame
(two tangential channels, one normal channel), then passed through a fixed
per-taxel gain/bias and additive Gaussian noise, and finally scaled to raw
sensor counts.

Four corpora are produced:

    play      object classes interacting with a moving hand (pretraining/probes)
    force     hemispherical / flat indenter presses on the palm pads
    pose      a rigid multi-contact object sliding under the flat hand (SE(2) labels)
    joystick  a spring-loaded stick pivoting under the fingertips (roll, pitch, yaw)

Every generator is a pure function of (parameters, seed). Episode seeds are
derived from (dataset kind, global seed, episode index), so episodes can be
regenerated independently and in any order.

Episode file layout (little-endian):

    header   magic b"SKIN", version u32, frame_count u32, taxel_count u32
    frames   frame_count x (timestamp f64, flux taxel_count x 3 f32)
    blocks   (tag u32, count u32, width u32, count x width f32) ...
    trailer  CRC32 u32 over everything before it
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from tqdm import tqdm

from skinssl.config import (
    BIAS_RANGE,
    FLAT_INDENTER_RADIUS,
    FLAT_SUBKERNEL_SIGMA,
    FORCE_PRESS_SECONDS,
    FORCE_PRESSES,
    FORCE_RANGE,
    GAIN_RANGE,
    GENERATOR_VERSION,
    HEMISPHERE_SIGMA,
    JOYSTICK_EPISODE_SECONDS,
    JOYSTICK_TRAJECTORIES,
    LABEL_HZ,
    MANIFEST_FILE_NAME,
    NOISE_STD,
    PLAY_CLASSES,
    PLAY_EPISODE_SECONDS,
    PLAY_EPISODES_PER_CLASS,
    POSE_EPISODE_SECONDS,
    POSE_ROTATION_LIMIT_DEG,
    POSE_TRAJECTORIES,
    POSE_TRANSLATION_LIMIT,
    RAW_COUNTS_PER_UNIT,
    RAW_RATE_RANGE,
    RESAMPLE_HZ,
    sub_seed,
)
from skinssl.errors import (
    ChecksumMismatchError,
    InvalidInputError,
    MissingFileError,
    SchemaError,
    VersionMismatchError,
)
from skinssl.hand_model import JointTrajectory, PadType, rest_baseline_config, taxel_geometry
from skinssl.signal_pipeline import BaselineFrame, RawStream

logger = logging.getLogger(__name__)

RENDER_CHUNK = 1024
POSE_ORIGIN = np.array([0.0, 0.06])        # palm-centre reference for SE(2) labels
CONTACT_HEIGHT = 0.01                      # pad surface height above the palm frame

EPISODE_MAGIC = b"SKIN"
EPISODE_VERSION = 1
HEADER = struct.Struct("<4sIII")
BLOCK = struct.Struct("<III")
CRC = struct.Struct("<I")

TAG_JOINTS = 1
TAG_BASELINE = 2
TAG_CLASS = 3
TAG_FORCES = 4
TAG_POSE = 5
TAG_JOYSTICK = 6
LABEL_TAGS = {"forces": TAG_FORCES, "pose": TAG_POSE, "joystick": TAG_JOYSTICK}
LABEL_RATES = {"forces": RESAMPLE_HZ, "pose": LABEL_HZ, "joystick": LABEL_HZ}


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass
class SimulatorConfig:
    noise_std: float = NOISE_STD
    bias_range: tuple = BIAS_RANGE
    gain_range: tuple = GAIN_RANGE
    sensor_seed: int = 0
    rate_range: tuple = RAW_RATE_RANGE
    counts_per_unit: float = RAW_COUNTS_PER_UNIT
    play_classes: int = PLAY_CLASSES
    play_episodes_per_class: int = PLAY_EPISODES_PER_CLASS
    play_seconds: float = PLAY_EPISODE_SECONDS
    force_presses: int = FORCE_PRESSES
    force_press_seconds: float = FORCE_PRESS_SECONDS
    pose_trajectories: int = POSE_TRAJECTORIES
    pose_seconds: float = POSE_EPISODE_SECONDS
    joystick_trajectories: int = JOYSTICK_TRAJECTORIES
    joystick_seconds: float = JOYSTICK_EPISODE_SECONDS

    def __post_init__(self):
        self.bias_range = tuple(self.bias_range)
        self.gain_range = tuple(self.gain_range)
        self.rate_range = tuple(self.rate_range)
        if self.noise_std < 0:
            raise InvalidInputError("noise_std must be non-negative")
        low, high = self.rate_range
        if not (60.0 <= low <= high <= 120.0):
            raise InvalidInputError("rate_range must lie within [60, 120] Hz")
        if self.play_classes < 2:
            raise InvalidInputError("play_classes must be at least 2")
        for name in ("play_episodes_per_class", "force_presses",
                     "pose_trajectories", "joystick_trajectories"):
            if getattr(self, name) < 1:
                raise InvalidInputError(f"{name} must be at least 1")
        if self.play_seconds < 1.0:
            raise InvalidInputError("play episodes must last at least 1 s")


def episode_seed(global_seed, index, kind=""):
    """Independent per-episode seed derived from (kind, global seed, index)."""
    return sub_seed(global_seed, f"{kind}:{index}")


# =============================================================================
# CONTACT PHYSICS
# =============================================================================

@dataclass(frozen=True, eq=False)
class ContactEvent:
    position: np.ndarray
    sigma: float
    normal_force: float
    shear: np.ndarray = field(default_factory=lambda: np.zeros(2))
    surface_normal: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "shear", np.asarray(self.shear, dtype=np.float64))
        normal = np.asarray(self.surface_normal, dtype=np.float64)
        object.__setattr__(self, "surface_normal", normal)
        if self.normal_force < 0:
            raise InvalidInputError("Contact normal force must be non-negative")
        if self.sigma <= 0:
            raise InvalidInputError("Contact radius sigma must be positive")
        if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
            raise InvalidInputError("Contact surface normal must be a unit vector")

    def force_vector(self):
        """Applied force in the hand frame: normal along the surface normal, shear in its tangents."""
        t1, t2 = tangent_basis(self.surface_normal)
        return self.normal_force * self.surface_normal + self.shear[0] * t1 + self.shear[1] * t2


@dataclass(frozen=True, eq=False)
class SensorModel:
    """Fixed per-taxel gain/bias (taxel frame) plus additive noise std, in unit scale."""

    gain: np.ndarray
    bias: np.ndarray
    noise_std: float = 0.0

    @classmethod
    def ideal(cls, taxels):
        return cls(np.ones((taxels, 3)), np.zeros((taxels, 3)), 0.0)


def make_sensor_model(taxels, sim=None):
    sim = sim or SimulatorConfig()
    rng = np.random.default_rng(episode_seed(sim.sensor_seed, 0, "sensor"))
    gain = rng.uniform(*sim.gain_range, size=(taxels, 3))
    bias = rng.uniform(*sim.bias_range, size=(taxels, 3))
    return SensorModel(gain, bias, sim.noise_std)


def tangent_basis(normals):
    """Two unit tangents (t1, t2) completing a right-handed frame with each normal."""
    n = np.asarray(normals, dtype=np.float64)
    use_y = np.abs(n[..., 1:2]) < 0.9
    helper = np.where(use_y, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    t1 = np.cross(helper, n)
    t1 = t1 / np.linalg.norm(t1, axis=-1, keepdims=True)
    t2 = np.cross(n, t1)
    return t1, t2


def taxel_response(contact, taxel_pos, taxel_normal, *, gain=1.0, bias=0.0,
                   noise_std=0.0, rng=None):
    """Flux (tangential, tangential, normal) at one taxel from one contact."""
    d2 = float(np.sum((contact.position - np.asarray(taxel_pos, dtype=np.float64)) ** 2))
    weight = np.exp(-d2 / (2.0 * contact.sigma ** 2))
    force = weight * contact.force_vector()
    normal = np.asarray(taxel_normal, dtype=np.float64)
    t1, t2 = tangent_basis(normal)
    local = np.array([force @ t1, force @ t2, force @ normal])
    out = gain * local + bias
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        out = out + rng.normal(0.0, noise_std, size=3)
    return out


def contact_arrays(contacts):
    """Stack contacts into centres (K, 3), sigmas (K,), force vectors (K, 3)."""
    if not contacts:
        return np.zeros((0, 3)), np.ones(0), np.zeros((0, 3))
    return (np.stack([c.position for c in contacts]),
            np.array([c.sigma for c in contacts], dtype=np.float64),
            np.stack([c.force_vector() for c in contacts]))


def render_clean(centers, sigmas, forces, positions, normals):
    """Noise-free superposition for a batch: centres (B, K, 3) -> flux (B, N, 3)."""
    d2 = np.sum((positions[:, None, :, :] - centers[:, :, None, :]) ** 2, axis=-1)
    weights = np.exp(-d2 / (2.0 * sigmas[:, :, None] ** 2))
    world = np.einsum("bkn,bkc->bnc", weights, forces)
    t1, t2 = tangent_basis(normals)
    return np.stack([np.sum(world * t1, axis=-1),
                     np.sum(world * t2, axis=-1),
                     np.sum(world * normals, axis=-1)], axis=-1)


def apply_sensor(clean, sensor, rng=None):
    out = sensor.gain * clean + sensor.bias
    if sensor.noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        out = out + rng.normal(0.0, sensor.noise_std, size=out.shape)
    return out


def render_frame(contacts, positions, normals, rng=None, sensor=None):
    """One 368x3 flux frame (unit scale) from a list of contacts."""
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    sensor = sensor or SensorModel.ideal(len(positions))
    centers, sigmas, forces = contact_arrays(contacts)
    clean = render_clean(centers[None], sigmas[None], forces[None], positions[None], normals[None])[0]
    return apply_sensor(clean, sensor, rng)


def press_contacts(indenter, center, normal, normal_force, shear=(0.0, 0.0)):
    """Contacts for an indenter: one small Gaussian, or nine sub-kernels over a 6 mm disc."""
    center = np.asarray(center, dtype=np.float64)
    shear = np.asarray(shear, dtype=np.float64)
    if indenter == "hemispherical":
        return [ContactEvent(center, HEMISPHERE_SIGMA, normal_force, shear, normal)]
    if indenter != "flat":
        raise InvalidInputError(f"Unknown indenter {indenter!r}")
    t1, t2 = tangent_basis(np.asarray(normal, dtype=np.float64))
    ring = FLAT_INDENTER_RADIUS * 2.0 / 3.0
    offsets = [np.zeros(3)] + [ring * (np.cos(a) * t1 + np.sin(a) * t2)
                               for a in np.arange(8) * np.pi / 4]
    return [ContactEvent(center + o, FLAT_SUBKERNEL_SIGMA, normal_force / 9.0, shear / 9.0, normal)
            for o in offsets]


# =============================================================================
# EPISODE RECORDS
# =============================================================================

@dataclass(eq=False)
class EpisodeRecord:
    raw_stream: RawStream
    joint_angles: np.ndarray
    baseline: np.ndarray
    object_class: int = -1
    forces: np.ndarray | None = None
    pose: np.ndarray | None = None
    joystick: np.ndarray | None = None

    @property
    def joint_stream(self):
        return JointTrajectory(self.raw_stream.timestamps, self.joint_angles.astype(np.float64))

    @property
    def baseline_frame(self):
        return BaselineFrame(self.baseline)

    @property
    def duration_s(self):
        ts = self.raw_stream.timestamps
        return float(ts[-1] - ts[0])

    @property
    def labels_present(self):
        present = ["object_class"] if self.object_class >= 0 else []
        return present + [name for name in LABEL_TAGS if getattr(self, name) is not None]

    def label_times(self, name):
        """Label timestamps: on the ``LABEL_RATES[name]`` grid from the first raw timestamp."""
        values = getattr(self, name)
        if values is None:
            raise InvalidInputError(f"Episode has no {name} labels")
        return self.raw_stream.timestamps[0] + np.arange(len(values)) / LABEL_RATES[name]

    def equals(self, other):
        """Bit-exact equality of every stream and label."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
        return (same(self.raw_stream.timestamps, other.raw_stream.timestamps)
                and same(self.raw_stream.flux, other.raw_stream.flux)
                and same(self.joint_angles, other.joint_angles)
                and same(self.baseline, other.baseline)
                and self.object_class == other.object_class
                and all(same(getattr(self, n), getattr(other, n)) for n in LABEL_TAGS))


def irregular_timestamps(rng, duration_s, rate_range):
    """Timestamps from 0 with gaps 1/U(rate_range), ending at the first sample >= duration."""
    low, high = rate_range
    n_max = int(np.ceil(duration_s * high)) + 2
    gaps = 1.0 / rng.uniform(low, high, size=n_max)
    times = np.concatenate([[0.0], np.cumsum(gaps)])
    end = int(np.searchsorted(times, duration_s - 1e-12)) + 1
    return times[:end]


def _render_stream(layout, angles, contact_fn, sensor, rng, counts_per_unit):
    """Render raw counts (T, N, 3) float32; contact_fn(sl, positions, normals) -> centres, sigmas, forces."""
    frames = np.empty((len(angles), layout.taxel_count, 3), dtype=np.float32)
    for start in range(0, len(angles), RENDER_CHUNK):
        sl = slice(start, start + RENDER_CHUNK)
        positions, normals = taxel_geometry(layout, angles[sl])
        centers, sigmas, forces = contact_fn(sl, positions, normals)
        clean = render_clean(centers, sigmas, forces, positions, normals)
        frames[sl] = apply_sensor(clean, sensor, rng) * counts_per_unit
    return frames


def _baseline(layout, sensor, counts_per_unit):
    """Noise-free no-contact reading at the rest configuration."""
    clean = np.zeros((layout.taxel_count, 3))
    return ((sensor.gain * clean + sensor.bias) * counts_per_unit).astype(np.float32)


def _rotate2(vectors, angles):
    """Rotate 2-vectors (..., K, 2) by per-frame angles (B,)."""
    c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
    x, y = vectors[..., 0], vectors[..., 1]
    return np.stack([c * x - s * y, s * x + c * y], axis=-1)


# =============================================================================
# PLAY EPISODES
# =============================================================================

@dataclass(frozen=True, eq=False)
class ContactTemplate:
    """One footprint contact, rigid to the object frame (offset in the contact plane, m)."""

    offset: np.ndarray
    sigma: float
    force_weight: float
    shear_angle: float


@dataclass(frozen=True)
class PlayMotion:
    """Ranges the per-episode play motion is drawn from."""

    anchor_pads: tuple
    force_range: tuple = (0.5, 2.0)
    force_modulation: tuple = (0.2, 0.6)
    force_frequency: tuple = (0.2, 1.0)
    slide_amplitude: tuple = (0.001, 0.006)
    slide_frequency: tuple = (0.1, 0.6)
    spin_amplitude: tuple = (0.0, 0.6)
    shear_gain: tuple = (0.0, 0.3)
    joint_amplitude: float = 0.3
    joint_frequency: tuple = (0.05, 0.4)


@dataclass(frozen=True, eq=False)
class ObjectProfile:
    class_id: int
    footprint: tuple
    trajectory_params: PlayMotion

    def with_force_scale(self, scale):
        motion = self.trajectory_params
        scaled = PlayMotion(**{**asdict(motion), "anchor_pads": motion.anchor_pads,
                               "force_range": (motion.force_range[0] * scale,
                                               motion.force_range[1] * scale)})
        return ObjectProfile(self.class_id, self.footprint, scaled)


def footprint_distance(a, b):
    """Symmetric Hausdorff distance between two footprints' contact offsets."""
    pa = np.stack([t.offset for t in a])
    pb = np.stack([t.offset for t in b])
    d = np.linalg.norm(pa[:, None] - pb[None], axis=-1)
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def make_object_profiles(layout, n_classes=PLAY_CLASSES, seed=0, max_tries=1000):
    """Object classes with pairwise-distinct footprints and class-specific anchor pads."""
    rng = np.random.default_rng(episode_seed(seed, 0, "profiles"))
    n_pads = len(layout.pads)
    profiles = []
    for class_id in range(n_classes):
        for _ in range(max_tries):
            n_points = int(rng.integers(1, 5))
            sigma = float(rng.uniform(0.0025, 0.004))
            offsets = rng.uniform(-0.008, 0.008, size=(n_points, 2))
            footprint = tuple(
                ContactTemplate(offsets[i], sigma, float(rng.uniform(0.5, 1.0)),
                                float(rng.uniform(-np.pi, np.pi)))
                for i in range(n_points)
            )
            spread = np.linalg.norm(offsets[:, None] - offsets[None], axis=-1)
            np.fill_diagonal(spread, np.inf)
            if n_points > 1 and spread.min() <= 2 * sigma:
                continue
            if all(footprint_distance(footprint, p.footprint)
                   > 2 * max(sigma, p.footprint[0].sigma) for p in profiles):
                break
        else:
            raise InvalidInputError(f"Could not draw a distinct footprint for class {class_id}")
        anchors = tuple(sorted({class_id % n_pads, (class_id + n_classes) % n_pads}))
        profiles.append(ObjectProfile(class_id, footprint, PlayMotion(anchor_pads=anchors)))
    return profiles


def _smooth_joint_angles(rng, times, joint_count, amplitude, frequency):
    base = rng.uniform(0.0, amplitude, size=joint_count)
    amps = rng.uniform(0.0, amplitude, size=joint_count)
    freqs = rng.uniform(*frequency, size=joint_count)
    phases = rng.uniform(0.0, 2 * np.pi, size=joint_count)
    return base + amps * np.sin(2 * np.pi * freqs * times[:, None] + phases)


def generate_play_episode(profile, layout, duration_s, seed, sensor=None, sim=None):
    """A labelled play episode: moving hand, object footprint wandering over an anchor pad."""
    if duration_s < 1.0:
        raise InvalidInputError("Play episodes must last at least 1 s")
    sim = sim or SimulatorConfig()
    sensor = sensor or make_sensor_model(layout.taxel_count, sim)
    motion = profile.trajectory_params
    rng = np.random.default_rng(seed)

    times = irregular_timestamps(rng, duration_s, sim.rate_range)
    angles = _smooth_joint_angles(rng, times, layout.joint_count,
                                  motion.joint_amplitude, motion.joint_frequency)
    angles = angles.astype(np.float32)

    anchor = layout.pad_slices[int(rng.choice(motion.anchor_pads))]
    force = rng.uniform(*motion.force_range)
    modulation = rng.uniform(*motion.force_modulation)
    force_freq = rng.uniform(*motion.force_frequency)
    slide_amp = rng.uniform(*motion.slide_amplitude, size=2)
    slide_freq = rng.uniform(*motion.slide_frequency, size=2)
    spin_amp = rng.uniform(*motion.spin_amplitude)
    shear_gain = rng.uniform(*motion.shear_gain)
    phases = rng.uniform(0.0, 2 * np.pi, size=4)

    offsets = np.stack([t.offset for t in profile.footprint])
    sigmas = np.array([t.sigma for t in profile.footprint])
    weights = np.array([t.force_weight for t in profile.footprint])
    shear_angles = np.array([t.shear_angle for t in profile.footprint])

    def contacts(sl, positions, normals):
        t = times[sl]
        centre = positions[:, anchor].mean(axis=1)
        normal = normals[:, anchor].mean(axis=1)
        normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
        t1, t2 = tangent_basis(normal)
        slide = slide_amp * np.sin(2 * np.pi * slide_freq * t[:, None] + phases[:2])
        spin = spin_amp * np.sin(2 * np.pi * slide_freq[0] * t + phases[2])
        magnitude = np.maximum(force * (1 + modulation * np.sin(2 * np.pi * force_freq * t
                                                                + phases[3])), 0.0)
        planar = _rotate2(offsets[None], spin) + slide[:, None, :]            # (B, K, 2)
        centers = (centre[:, None] + planar[..., :1] * t1[:, None]
                   + planar[..., 1:] * t2[:, None])
        f_n = magnitude[:, None] * weights                                    # (B, K)
        psi = spin[:, None] + shear_angles
        f_t1 = shear_gain * f_n * np.cos(psi)
        f_t2 = shear_gain * f_n * np.sin(psi)
        forces = (f_n[..., None] * normal[:, None] + f_t1[..., None] * t1[:, None]
                  + f_t2[..., None] * t2[:, None])
        return centers, np.broadcast_to(sigmas, f_n.shape), forces

    flux = _render_stream(layout, angles.astype(np.float64), contacts, sensor, rng,
                          sim.counts_per_unit)
    return EpisodeRecord(RawStream(times, flux), angles,
                         _baseline(layout, sensor, sim.counts_per_unit),
                         object_class=profile.class_id)


# =============================================================================
# TRAJECTORIES (pose / joystick)
# =============================================================================

@dataclass(frozen=True, eq=False)
class LinearTrajectory:
    """Straight move from ``start`` to ``end`` over ``duration`` seconds, then hold."""

    start: np.ndarray
    end: np.ndarray
    duration: float

    def __call__(self, t):
        frac = np.clip(np.asarray(t, dtype=np.float64) / self.duration, 0.0, 1.0)[:, None]
        start, end = np.asarray(self.start, float), np.asarray(self.end, float)
        return start + (end - start) * frac


@dataclass(frozen=True, eq=False)
class SinusoidTrajectory:
    """Sum of sinusoids per dimension, clipped to per-dimension limits."""

    amplitudes: np.ndarray     # (D, M)
    frequencies: np.ndarray    # (D, M)
    phases: np.ndarray         # (D, M)
    limits: np.ndarray         # (D,)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        waves = self.amplitudes * np.sin(2 * np.pi * self.frequencies * t[:, None, None]
                                         + self.phases)
        return np.clip(waves.sum(axis=-1), -self.limits, self.limits)


def constant_trajectory(value):
    value = np.asarray(value, dtype=np.float64)
    return LinearTrajectory(value, value, 1.0)


def random_pose_trajectory(rng, terms=3):
    limits = np.array([POSE_TRANSLATION_LIMIT, POSE_TRANSLATION_LIMIT,
                       np.deg2rad(POSE_ROTATION_LIMIT_DEG)])
    amplitudes = rng.uniform(0.0, 1.0, size=(3, terms)) * (limits[:, None] / terms)
    return SinusoidTrajectory(amplitudes, rng.uniform(0.02, 0.2, size=(3, terms)),
                              rng.uniform(0.0, 2 * np.pi, size=(3, terms)), limits)


def random_joystick_trajectory(rng, terms=2):
    limits = np.ones(3)
    amplitudes = rng.uniform(0.0, 1.0, size=(3, terms)) / terms * 1.5
    return SinusoidTrajectory(amplitudes, rng.uniform(0.2, 1.0, size=(3, terms)),
                              rng.uniform(0.0, 2 * np.pi, size=(3, terms)), limits)


def _label_grid(duration_s, rate):
    return np.arange(int(np.floor(duration_s * rate + 1e-9)) + 1) / rate


# =============================================================================
# TASK EPISODES
# =============================================================================

def generate_press_episode(layout, seed, sensor=None, sim=None, indenter=None):
    """One palm press: force ramped up and down over ``force_press_seconds``."""
    sim = sim or SimulatorConfig()
    sensor = sensor or make_sensor_model(layout.taxel_count, sim)
    rng = np.random.default_rng(seed)
    duration = sim.force_press_seconds

    rest = rest_baseline_config(layout.joint_count).angles
    positions, normals = layout.rest_geometry.positions, layout.rest_geometry.normals
    palm_pads = [p for p in layout.pads if p.pad_type is PadType.PALM]
    pad = palm_pads[int(rng.integers(len(palm_pads)))]
    taxels = positions[layout.pad_slices[pad.pad_id]]
    # anywhere over the pad: on top of or between magnetometers
    centre = rng.uniform(taxels.min(axis=0), taxels.max(axis=0))
    normal = normals[layout.pad_slices[pad.pad_id]].mean(axis=0)
    normal /= np.linalg.norm(normal)
    indenter = indenter or ("hemispherical" if rng.random() < 0.5 else "flat")
    peak = rng.uniform(*FORCE_RANGE)
    shear_peak = rng.uniform(-0.1, 0.1, size=2) * peak

    def ramp(t):
        return np.clip(1.0 - np.abs(2.0 * np.asarray(t) / duration - 1.0), 0.0, 1.0)

    # raw stream must reach the last label on the 100 Hz grid
    label_t = np.arange(int(round(duration * RESAMPLE_HZ))) / RESAMPLE_HZ
    times = irregular_timestamps(rng, label_t[-1], sim.rate_range)
    angles = np.tile(rest, (len(times), 1)).astype(np.float32)
    templates = press_contacts(indenter, centre, normal, 1.0, shear_peak / peak)
    centers, sigmas, unit_forces = contact_arrays(templates)

    def contacts(sl, _positions, _normals):
        scale = peak * ramp(times[sl])
        batch = len(scale)
        return (np.broadcast_to(centers, (batch,) + centers.shape),
                np.broadcast_to(sigmas, (batch,) + sigmas.shape),
                scale[:, None, None] * unit_forces[None])

    flux = _render_stream(layout, angles.astype(np.float64), contacts, sensor, rng,
                          sim.counts_per_unit)
    # palm tangents are the hand x/y axes, so labels are (shear x, shear y, normal)
    applied = ramp(label_t)[:, None] * np.array([shear_peak[0], shear_peak[1], peak])
    return EpisodeRecord(RawStream(times, flux), angles,
                         _baseline(layout, sensor, sim.counts_per_unit),
                         forces=applied.astype(np.float32))


def default_pose_footprint():
    """Asymmetric four-contact footprint so rotation is observable."""
    offsets = np.array([[0.03, 0.0], [-0.015, 0.025], [-0.015, -0.025], [0.0, 0.0]])
    return tuple(ContactTemplate(o, 0.004, w, 0.0) for o, w in zip(offsets, (1.0, 0.8, 0.8, 0.6)))


def generate_pose_episode(layout, trajectory, duration_s, seed, sensor=None, sim=None,
                          footprint=None):
    """A rigid footprint sliding under the flat static hand; SE(2) labels at 10 Hz."""
    sim = sim or SimulatorConfig()
    sensor = sensor or make_sensor_model(layout.taxel_count, sim)
    footprint = footprint or default_pose_footprint()
    rng = np.random.default_rng(seed)

    times = irregular_timestamps(rng, duration_s, sim.rate_range)
    angles = np.tile(rest_baseline_config(layout.joint_count).angles,
                     (len(times), 1)).astype(np.float32)
    offsets = np.stack([t.offset for t in footprint])
    sigmas = np.array([t.sigma for t in footprint])
    weights = np.array([t.force_weight for t in footprint])
    load = rng.uniform(0.6, 1.2)

    def contacts(sl, _positions, _normals):
        pose = trajectory(times[sl])                                          # (B, 3)
        planar = _rotate2(offsets[None], pose[:, 2]) + (POSE_ORIGIN + pose[:, :2])[:, None]
        batch = len(pose)
        centers = np.concatenate([planar, np.full((batch, len(offsets), 1), CONTACT_HEIGHT)], -1)
        forces = np.zeros((batch, len(offsets), 3))
        forces[..., 2] = load * weights
        return centers, np.broadcast_to(sigmas, (batch, len(offsets))), forces

    flux = _render_stream(layout, angles.astype(np.float64), contacts, sensor, rng,
                          sim.counts_per_unit)
    labels = trajectory(_label_grid(duration_s, LABEL_HZ)).astype(np.float32)
    return EpisodeRecord(RawStream(times, flux), angles,
                         _baseline(layout, sensor, sim.counts_per_unit), pose=labels)


def generate_joystick_episode(layout, trajectory, duration_s, seed, sensor=None, sim=None):
    """A spring-loaded stick under the fingertips; normalized (roll, pitch, yaw) at 10 Hz."""
    sim = sim or SimulatorConfig()
    sensor = sensor or make_sensor_model(layout.taxel_count, sim)
    rng = np.random.default_rng(seed)

    times = irregular_timestamps(rng, duration_s, sim.rate_range)
    angles = np.tile(rest_baseline_config(layout.joint_count).angles,
                     (len(times), 1)).astype(np.float32)
    rest = layout.rest_geometry
    tips = [layout.pad_slices[p.pad_id] for p in layout.pads if p.pad_type is PadType.FINGERTIP]
    anchors = np.stack([rest.positions[s].mean(axis=0) for s in tips])        # (K, 3)
    normals = np.stack([rest.normals[s].mean(axis=0) for s in tips])
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    t1, t2 = tangent_basis(normals)
    twist = np.cross([0.0, 0.0, 1.0], anchors - anchors.mean(axis=0))
    twist /= np.linalg.norm(twist, axis=-1, keepdims=True)
    grip = rng.uniform(0.6, 1.0)

    def contacts(sl, _positions, _normals):
        rpy = trajectory(times[sl])                                           # (B, 3)
        batch = len(rpy)
        shift = 0.003 * (rpy[:, None, 0:1] * t1[None] + rpy[:, None, 1:2] * t2[None])
        centers = anchors[None] + shift
        f_n = grip * (1.0 + 0.6 * np.linalg.norm(rpy, axis=-1))[:, None] * np.ones(len(tips))
        forces = (f_n[..., None] * normals[None]
                  + 0.4 * f_n[..., None] * (rpy[:, None, 0:1] * t1[None]
                                            + rpy[:, None, 1:2] * t2[None]
                                            + rpy[:, None, 2:3] * twist[None]))
        return centers, np.full((batch, len(tips)), 0.003), forces

    flux = _render_stream(layout, angles.astype(np.float64), contacts, sensor, rng,
                          sim.counts_per_unit)
    labels = np.clip(trajectory(_label_grid(duration_s, LABEL_HZ)), -1.0, 1.0).astype(np.float32)
    return EpisodeRecord(RawStream(times, flux), angles,
                         _baseline(layout, sensor, sim.counts_per_unit), joystick=labels)


# =============================================================================
# DATASETS AND MANIFESTS
# =============================================================================

@dataclass
class EpisodeEntry:
    file: str
    duration_s: float
    labels_present: list
    seed: int
    frame_count: int = 0


@dataclass
class DatasetManifest:
    kind: str
    generator_version: str
    global_seed: int
    episodes: list
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        try:
            episodes = [EpisodeEntry(**entry) for entry in data["episodes"]]
            return cls(data["kind"], data["generator_version"], int(data["global_seed"]),
                       episodes, data.get("params", {}))
        except (KeyError, TypeError) as e:
            raise SchemaError(f"Malformed dataset manifest: {e}") from None

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Dataset:
    """A manifest plus its episodes, held in memory or read lazily from ``root``."""

    def __init__(self, manifest, records=None, root=None):
        self.manifest = manifest
        self.records = records
        self.root = Path(root) if root is not None else None

    def __len__(self):
        return len(self.manifest.episodes)

    def episode(self, i):
        if self.records is not None:
            return self.records[i]
        return read_episode(self.root / self.manifest.episodes[i].file)

    def __iter__(self):
        for i in range(len(self)):
            yield self.episode(i)

    def subset(self, indices):
        indices = list(indices)
        manifest = DatasetManifest(self.manifest.kind, self.manifest.generator_version,
                                   self.manifest.global_seed,
                                   [self.manifest.episodes[i] for i in indices],
                                   dict(self.manifest.params))
        records = [self.records[i] for i in indices] if self.records is not None else None
        return Dataset(manifest, records, self.root)


def _episode_entry(record, index, seed):
    return EpisodeEntry(file=f"episode_{index:05d}.bin", duration_s=record.duration_s,
                        labels_present=record.labels_present, seed=int(seed),
                        frame_count=len(record.raw_stream))


def _build_dataset(kind, seed, params, count, make_record, out_dir=None, desc=None):
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    entries, records = [], []
    for i in tqdm(range(count), desc=desc or f"Generating {kind}", leave=False):
        ep_seed = episode_seed(seed, i, kind)
        record = make_record(i, ep_seed)
        entry = _episode_entry(record, i, ep_seed)
        entries.append(entry)
        if out_dir is not None:
            write_episode(record, out_dir / entry.file)
        else:
            records.append(record)
    manifest = DatasetManifest(kind, GENERATOR_VERSION, int(seed), entries, params)
    if out_dir is not None:
        write_manifest(manifest, out_dir)
        return Dataset(manifest, root=out_dir)
    return Dataset(manifest, records)


def generate_play_dataset(layout, seed, sim=None, out_dir=None, profiles=None):
    sim = sim or SimulatorConfig()
    sensor = make_sensor_model(layout.taxel_count, sim)
    profiles = profiles or make_object_profiles(layout, sim.play_classes, seed)
    per_class = sim.play_episodes_per_class

    def make_record(i, ep_seed):
        return generate_play_episode(profiles[i // per_class], layout, sim.play_seconds,
                                     ep_seed, sensor, sim)

    params = {"classes": len(profiles), "episodes_per_class": per_class,
              "seconds": sim.play_seconds, "simulator": asdict(sim)}
    return _build_dataset("play", seed, params, len(profiles) * per_class, make_record, out_dir)


def generate_force_dataset(layout, n_presses, seed, sim=None, out_dir=None):
    """One episode per press; 3-axis applied-force labels on the 100 Hz grid."""
    if n_presses < 1:
        raise InvalidInputError("n_presses must be at least 1")
    sim = sim or SimulatorConfig()
    sensor = make_sensor_model(layout.taxel_count, sim)
    params = {"presses": n_presses, "press_seconds": sim.force_press_seconds,
              "simulator": asdict(sim)}
    return _build_dataset("force", seed, params, n_presses,
                          lambda i, s: generate_press_episode(layout, s, sensor, sim), out_dir)


def generate_pose_dataset(layout, n_traj, seed, sim=None, out_dir=None, duration_s=None):
    if n_traj < 1:
        raise InvalidInputError("n_traj must be at least 1")
    sim = sim or SimulatorConfig()
    sensor = make_sensor_model(layout.taxel_count, sim)
    duration = duration_s or sim.pose_seconds

    def make_record(i, ep_seed):
        trajectory = random_pose_trajectory(np.random.default_rng([ep_seed, 1]))
        return generate_pose_episode(layout, trajectory, duration, ep_seed, sensor, sim)

    params = {"trajectories": n_traj, "seconds": duration, "simulator": asdict(sim)}
    return _build_dataset("pose", seed, params, n_traj, make_record, out_dir)


def generate_joystick_dataset(layout, n_traj, seed, sim=None, out_dir=None, duration_s=None):
    if n_traj < 1:
        raise InvalidInputError("n_traj must be at least 1")
    sim = sim or SimulatorConfig()
    sensor = make_sensor_model(layout.taxel_count, sim)
    duration = duration_s or sim.joystick_seconds

    def make_record(i, ep_seed):
        trajectory = random_joystick_trajectory(np.random.default_rng([ep_seed, 1]))
        return generate_joystick_episode(layout, trajectory, duration, ep_seed, sensor, sim)

    params = {"trajectories": n_traj, "seconds": duration, "simulator": asdict(sim)}
    return _build_dataset("joystick", seed, params, n_traj, make_record, out_dir)


# =============================================================================
# FILE I/O
# =============================================================================

def _frame_dtype(taxels):
    return np.dtype([("t", "<f8"), ("flux", "<f4", (taxels, 3))])


def _block(tag, values):
    values = np.ascontiguousarray(np.atleast_2d(values), dtype="<f4")
    return BLOCK.pack(tag, values.shape[0], values.shape[1]) + values.tobytes()


def episode_bytes(record):
    stream = record.raw_stream
    taxels = stream.flux.shape[1]
    frames = np.empty(len(stream), dtype=_frame_dtype(taxels))
    frames["t"] = stream.timestamps
    frames["flux"] = stream.flux
    parts = [HEADER.pack(EPISODE_MAGIC, EPISODE_VERSION, len(stream), taxels), frames.tobytes(),
             _block(TAG_JOINTS, record.joint_angles), _block(TAG_BASELINE, record.baseline),
             _block(TAG_CLASS, np.array([[record.object_class]]))]
    for name, tag in LABEL_TAGS.items():
        values = getattr(record, name)
        if values is not None:
            parts.append(_block(tag, values))
    body = b"".join(parts)
    return body + CRC.pack(zlib.crc32(body))


def write_episode(record, path):
    path = Path(path)
    path.write_bytes(episode_bytes(record))
    return path


def read_episode(path):
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"Episode file not found: {path}")
    data = path.read_bytes()
    if len(data) < HEADER.size + CRC.size:
        raise ChecksumMismatchError(f"Episode file truncated: {path}")
    magic, version, frame_count, taxels = HEADER.unpack_from(data, 0)
    if magic != EPISODE_MAGIC:
        raise SchemaError(f"Not an episode file (bad magic): {path}")
    if version != EPISODE_VERSION:
        raise VersionMismatchError(f"Episode file version {version} is not supported: {path}")
    body, (stored_crc,) = data[:-CRC.size], CRC.unpack_from(data, len(data) - CRC.size)
    if zlib.crc32(body) != stored_crc:
        raise ChecksumMismatchError(f"Checksum mismatch in episode file: {path}")

    dtype = _frame_dtype(taxels)
    offset = HEADER.size
    frames = np.frombuffer(body, dtype=dtype, count=frame_count, offset=offset)
    offset += frame_count * dtype.itemsize
    blocks = {}
    while offset < len(body):
        tag, count, width = BLOCK.unpack_from(body, offset)
        offset += BLOCK.size
        blocks[tag] = np.frombuffer(body, dtype="<f4", count=count * width,
                                    offset=offset).reshape(count, width).copy()
        offset += count * width * 4
    if TAG_JOINTS not in blocks or TAG_BASELINE not in blocks:
        raise SchemaError(f"Episode file lacks joint or baseline blocks: {path}")

    labels = {name: blocks.get(tag) for name, tag in LABEL_TAGS.items()}
    return EpisodeRecord(
        RawStream(frames["t"].astype(np.float64), frames["flux"].astype(np.float32)),
        blocks[TAG_JOINTS], blocks[TAG_BASELINE],
        object_class=int(blocks[TAG_CLASS][0, 0]) if TAG_CLASS in blocks else -1,
        **labels,
    )


def write_manifest(manifest, path):
    path = Path(path)
    with open(path / MANIFEST_FILE_NAME, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)


def write_dataset(dataset, path):
    """Write every episode file plus manifest.json under ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(dataset.manifest.episodes):
        write_episode(dataset.episode(i), path / entry.file)
    write_manifest(dataset.manifest, path)
    return Dataset(dataset.manifest, root=path)


def read_dataset(path, verify=True):
    """Load a manifest and check its version; with ``verify`` every episode is parsed too."""
    path = Path(path)
    manifest_file = path / MANIFEST_FILE_NAME
    if not manifest_file.exists():
        raise MissingFileError(f"Dataset manifest not found: {manifest_file}\n"
                               "Run `python -m skinssl gen-data` first.")
    with open(manifest_file, "r") as f:
        manifest = DatasetManifest.from_dict(json.load(f))
    major = str(manifest.generator_version).split(".")[0]
    if major != GENERATOR_VERSION.split(".")[0]:
        raise VersionMismatchError(
            f"Dataset generator version {manifest.generator_version} is incompatible "
            f"with {GENERATOR_VERSION}: {path}"
        )
    for entry in manifest.episodes:
        file = path / entry.file
        if not file.exists():
            raise MissingFileError(f"Episode file listed in manifest is missing: {file}")
        if verify:
            read_episode(file)
    return Dataset(manifest, root=path)
