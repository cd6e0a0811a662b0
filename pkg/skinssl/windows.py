"""
Window datasets for training.

Episodes are calibrated and resampled once, cut into 10-frame windows and kept
in memory as flux plus the joint angles at every window frame. Taxel positions
are recomputed by forward kinematics when an item is fetched, so a window
costs about as much memory as its flux alone.

Labels are read at the window's end time: object class for play data,
the 3-axis force (100 Hz grid) or the pose / joystick state (10 Hz grid) for
the task datasets. Windows whose end time does not land on a label sample
(within 5 ms) carry no label and are dropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.utils.data import Dataset

from skinssl.config import FLUX_SCALE, WINDOW_FRAMES, WINDOW_STRIDE
from skinssl.errors import InsufficientDataError, InvalidInputError
from skinssl.hand_model import taxel_geometry
from skinssl.signal_pipeline import calibrate
from skinssl.synth_data import LABEL_RATES

logger = logging.getLogger(__name__)

LABEL_TOLERANCE = 0.005     # s
TASK_LABELS = {"force": "forces", "pose": "pose", "joystick": "joystick"}


@dataclass
class EpisodeWindows:
    x: np.ndarray               # (W, T, N, 3) calibrated flux
    angles: np.ndarray          # (W, T, J) joint angles at each frame
    t_end: np.ndarray           # (W,)
    episode: int
    labels: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t_end)

    def select(self, keep):
        return EpisodeWindows(self.x[keep], self.angles[keep], self.t_end[keep], self.episode,
                              {name: values[keep] for name, values in self.labels.items()})


def episode_windows(record, episode=0, flux_scale=FLUX_SCALE, stride=WINDOW_STRIDE, start=0,
                    frames=WINDOW_FRAMES, label=None):
    """Calibrate one episode and cut it into windows with end-time labels."""
    stream = calibrate(record.raw_stream, record.baseline_frame, flux_scale)
    starts = np.arange(start, len(stream) - frames + 1, stride)
    if len(starts) == 0:
        raise InsufficientDataError(
            f"Episode {episode} has {len(stream)} frames at 100 Hz, a window needs {frames + start}"
        )
    frame_ids = starts[:, None] + np.arange(frames)
    joint_ids = record.joint_stream.nearest_indices(stream.timestamps)
    windows = EpisodeWindows(
        x=stream.flux[frame_ids].astype(np.float32),
        angles=record.joint_angles[joint_ids][frame_ids].astype(np.float32),
        t_end=stream.timestamps[frame_ids[:, -1]],
        episode=episode,
    )
    if label is None:
        return windows
    if label == "object_class":
        if record.object_class < 0:
            raise InvalidInputError(f"Episode {episode} has no object class label")
        windows.labels[label] = np.full(len(windows), record.object_class, dtype=np.int64)
        return windows

    values = getattr(record, label)
    if values is None:
        raise InvalidInputError(f"Episode {episode} has no {label} labels")
    rate = LABEL_RATES[label]
    position = (windows.t_end - stream.timestamps[0]) * rate
    index = np.rint(position).astype(np.int64)
    aligned = (np.abs(position - index) / rate <= LABEL_TOLERANCE) & (index < len(values))
    windows = windows.select(aligned)
    windows.labels[label] = values[index[aligned]].astype(np.float32)
    return windows


class WindowDataset(Dataset):
    """Windows of many episodes; items are dicts of x, p (T, N, 3), label, episode, t_end."""

    def __init__(self, parts, layout, label=None):
        if not parts:
            raise InsufficientDataError("WindowDataset needs at least one episode")
        self.layout = layout
        self.label = label
        self.parts = parts
        self.x = np.concatenate([part.x for part in parts])
        self.angles = np.concatenate([part.angles for part in parts])
        self.t_end = np.concatenate([part.t_end for part in parts])
        self.episodes = np.concatenate([np.full(len(part), part.episode) for part in parts])
        self.labels = np.concatenate([part.labels[label] for part in parts]) if label else None
        if len(self.x) == 0:
            raise InsufficientDataError("No labelled windows in the selected episodes")

    @classmethod
    def from_dataset(cls, dataset, layout, flux_scale=FLUX_SCALE, stride=WINDOW_STRIDE, start=0,
                     episodes=None, label=None, frames=WINDOW_FRAMES):
        episodes = range(len(dataset)) if episodes is None else episodes
        parts = [episode_windows(dataset.episode(i), i, flux_scale, stride, start, frames, label)
                 for i in episodes]
        logger.info(f"Windowed {len(parts)} episodes into {sum(len(p) for p in parts)} windows "
                    f"(stride {stride}, label {label or 'none'})")
        return cls(parts, layout, label)

    def __len__(self):
        return len(self.x)

    @property
    def episode_ids(self):
        return np.unique(self.episodes)

    def positions(self, index):
        positions, _ = taxel_geometry(self.layout, self.angles[index].astype(np.float64))
        return positions.astype(np.float32)

    def __getitem__(self, index):
        item = {
            "x": torch.from_numpy(self.x[index]),
            "p": torch.from_numpy(self.positions(index)),
            "episode": int(self.episodes[index]),
            "t_end": float(self.t_end[index]),
        }
        if self.labels is not None:
            item["label"] = torch.as_tensor(self.labels[index])
        return item

    def flattened(self, indices=None):
        """Raw flattened flux windows (W, T * N * 3) for linear baselines."""
        x = self.x if indices is None else self.x[indices]
        return x.reshape(len(x), -1)

