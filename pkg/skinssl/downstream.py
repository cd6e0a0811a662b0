"""
Downstream tasks on top of a pretrained (or fresh) encoder.

Tasks:
    force     - 3-axis press force from one window: encoder -> attentive pool -> 2-layer MLP
    pose      - SE(2) object pose from 1 s of tactile history: per-window pooling over
                10 consecutive windows -> one full-attention block -> per-step head
    joystick  - normalized roll/pitch/yaw, same sequence decoder as pose

Training modes:
    frozen       distillation-pretrained encoder, only the decoder trains
    finetuned    distillation-pretrained encoder, everything trains
    end_to_end   random encoder, everything trains (never reads a checkpoint)
    frozen_mae   MAE-pretrained encoder, only the decoder trains

Training data is subsampled by whole episodes: a seeded permutation of the
training episodes is cut at floor(budget * n), so the episodes of a smaller
budget are always a subset of those of a larger one.
"""

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from skinssl.checkpoint import (
    load_checkpoint,
    prefixed,
    restore_module,
    save_checkpoint,
    tensor_hash,
)
from skinssl.config import (
    BUDGETS,
    DOWNSTREAM_BATCH_SIZE,
    DOWNSTREAM_EPOCHS,
    DOWNSTREAM_LR,
    DOWNSTREAM_WEIGHT_DECAY,
    EVAL_FRACTION,
    FLUX_SCALE,
    FORCE_WINDOW_STRIDE,
    POSE_ROTATION_THRESHOLD_DEG,
    POSE_TRANSLATION_THRESHOLD,
    PROJECT_VERSION,
    RESAMPLE_DT,
    SEQUENCE_STEP,
    SEQUENCE_WINDOWS,
    WINDOW_FRAMES,
    sub_seed,
)
from skinssl.encoder import (
    AttentivePooler,
    EncoderConfig,
    TransformerBlock,
    build_encoder,
    init_weights,
)
from skinssl.errors import InsufficientDataError, InvalidInputError
from skinssl.hand_model import PadType
from skinssl.ssl_trainer import load_pretrained_encoder
from skinssl.windows import TASK_LABELS, WindowDataset, episode_windows

logger = logging.getLogger(__name__)

TASKS = ("force", "pose", "joystick")
AXES = {
    "force": ("x", "y", "z"),
    "pose": ("x", "y", "theta"),
    "joystick": ("roll", "pitch", "yaw"),
}
SWEEP_COLUMNS = ["task", "mode", "budget", "seed", "metric", "dim", "value"]
SEQUENCE_GAP_TOLERANCE = 1e-6     # s


class TrainMode(str, enum.Enum):
    FROZEN = "frozen"
    FINETUNED = "finetuned"
    END_TO_END = "end_to_end"
    FROZEN_MAE = "frozen_mae"

    @property
    def frozen(self):
        return self in (TrainMode.FROZEN, TrainMode.FROZEN_MAE)

    @property
    def needs_checkpoint(self):
        return self is not TrainMode.END_TO_END

    @property
    def objective(self):
        """Pretraining objective the checkpoint must come from (None for end-to-end)."""
        if self is TrainMode.END_TO_END:
            return None
        return "mae" if self is TrainMode.FROZEN_MAE else "distill"


@dataclass
class DownstreamConfig:
    lr: float = DOWNSTREAM_LR
    epochs: int = DOWNSTREAM_EPOCHS
    batch_size: int = DOWNSTREAM_BATCH_SIZE
    sequence_batch_size: int = 8
    weight_decay: float = DOWNSTREAM_WEIGHT_DECAY
    budgets: tuple = BUDGETS
    seeds: tuple = (0, 1, 2)
    modes: tuple = tuple(m.value for m in TrainMode)
    eval_fraction: float = EVAL_FRACTION
    translation_threshold: float = POSE_TRANSLATION_THRESHOLD
    rotation_threshold_deg: float = POSE_ROTATION_THRESHOLD_DEG

    def __post_init__(self):
        self.budgets = tuple(float(b) for b in self.budgets)
        self.seeds = tuple(int(s) for s in self.seeds)
        self.modes = tuple(TrainMode(m).value for m in self.modes)
        for budget in self.budgets:
            check_budget(budget)
        if not 0.0 < self.eval_fraction < 1.0:
            raise InvalidInputError("eval_fraction must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.sequence_batch_size < 1:
            raise InvalidInputError("epochs and batch sizes must be at least 1")


def check_budget(budget):
    if not 0.0 < budget <= 1.0:
        raise InvalidInputError(f"Budget fraction {budget} must lie in (0, 1]")


# =============================================================================
# DECODERS
# =============================================================================

class LabelNormalizer(nn.Module):
    """Per-dimension affine label normalization, fit on the training split only."""

    def __init__(self, dims):
        super().__init__()
        self.register_buffer("mean", torch.zeros(dims))
        self.register_buffer("std", torch.ones(dims))

    def fit(self, labels):
        labels = torch.as_tensor(np.asarray(labels), dtype=self.mean.dtype)
        labels = labels.reshape(-1, labels.shape[-1])
        self.mean.copy_(labels.mean(dim=0))
        self.std.copy_(labels.std(dim=0, unbiased=False).clamp_min(1e-6))
        return self

    def normalize(self, labels):
        return (labels - self.mean) / self.std

    def denormalize(self, outputs):
        return outputs * self.std + self.mean


class ForceDecoder(nn.Module):
    def __init__(self, encoder, hidden=None, outputs=3):
        super().__init__()
        d = encoder.config.d
        self.encoder = encoder
        self.pooler = AttentivePooler(d)
        self.mlp = nn.Sequential(nn.Linear(d, hidden or d), nn.GELU(), nn.Linear(hidden or d, outputs))
        self.normalizer = LabelNormalizer(outputs)
        self.freeze_encoder = False
        self.mlp.apply(init_weights)

    def head_parameters(self):
        return list(self.pooler.parameters()) + list(self.mlp.parameters())

    def forward(self, x, p, kept_ids=None, valid=None):
        """Normalized (B, 3) outputs."""
        with torch.set_grad_enabled(torch.is_grad_enabled() and not self.freeze_encoder):
            out = self.encoder(x, p, kept_ids, valid)
        return self.mlp(self.pooler(out.features, out.valid))

    def predict(self, x, p, kept_ids=None, valid=None):
        return self.normalizer.denormalize(self(x, p, kept_ids, valid))


def check_contiguous(t_end, spacing, tolerance=SEQUENCE_GAP_TOLERANCE):
    """Raise InvalidInputError when consecutive window end times are not ``spacing`` apart."""
    steps = np.diff(np.asarray(t_end, dtype=np.float64), axis=-1)
    if np.any(np.abs(steps - spacing) > tolerance):
        raise InvalidInputError(
            f"Sequence windows are not contiguous: end-time steps {np.unique(np.round(steps, 6))}"
            f" s, expected {spacing} s"
        )


class SequenceDecoder(nn.Module):
    """Backbone applied per window, pooled, then one full-attention block and a per-step head."""

    def __init__(self, encoder, outputs=3, heads=None):
        super().__init__()
        config = encoder.config
        self.encoder = encoder
        self.pooler = AttentivePooler(config.d)
        self.block = TransformerBlock(config.d, heads or config.heads, config.mlp_ratio)
        self.head = nn.Linear(config.d, outputs)
        self.normalizer = LabelNormalizer(outputs)
        self.freeze_encoder = False
        self.block.apply(init_weights)
        self.head.apply(init_weights)

    def head_parameters(self):
        return (list(self.pooler.parameters()) + list(self.block.parameters())
                + list(self.head.parameters()))

    def forward(self, x, p):
        """x, p (B, S, T, N, 3) -> normalized (B, S, outputs)."""
        batch, steps = x.shape[:2]
        with torch.set_grad_enabled(torch.is_grad_enabled() and not self.freeze_encoder):
            out = self.encoder(x.flatten(0, 1), p.flatten(0, 1))
        tokens = self.pooler(out.features, out.valid).reshape(batch, steps, -1)
        return self.head(self.block(tokens))

    def predict(self, x, p):
        return self.normalizer.denormalize(self(x, p))


def force_forward(x, p, decoder):
    """De-normalized 3-axis force (B, 3) in Newtons for windows x, p (B, T, N, 3)."""
    return decoder.predict(x, p)


def sequence_forward(x, p, t_end, decoder, window_spacing=None):
    """Per-step predictions (B, S, D) for S consecutive windows ending at ``t_end`` (B, S)."""
    spacing = window_spacing or WINDOW_FRAMES * RESAMPLE_DT
    check_contiguous(t_end, spacing)
    return decoder.predict(x, p)


def build_decoder(task, encoder):
    if task not in TASKS:
        raise InvalidInputError(f"Unknown task {task!r} (choose from {', '.join(TASKS)})")
    if task == "force":
        return ForceDecoder(encoder)
    return SequenceDecoder(encoder)


# =============================================================================
# DATA
# =============================================================================

@dataclass
class TaskWindows:
    """Windowed task data: all episodes' windows plus the episode split."""

    task: str
    parts: list
    layout: object
    sequence_windows: int = SEQUENCE_WINDOWS
    sequence_step: int = SEQUENCE_STEP

    @property
    def label(self):
        return TASK_LABELS[self.task]

    @property
    def episodes(self):
        return [part.episode for part in self.parts]

    def dataset(self, episodes):
        chosen = set(int(e) for e in episodes)
        parts = [part for part in self.parts if part.episode in chosen]
        if self.task == "force":
            return WindowDataset(parts, self.layout, self.label)
        return SequenceDataset(parts, self.layout, self.label, self.sequence_windows,
                               self.sequence_step)


def task_windows(task, dataset, layout, flux_scale=FLUX_SCALE, force_stride=FORCE_WINDOW_STRIDE,
                 sequence_windows=SEQUENCE_WINDOWS, sequence_step=SEQUENCE_STEP):
    """Window every episode of a task dataset with labels at the window end times.

    Force windows use ``force_stride``; sequence tasks use stride 10 from frame 1
    so every window end lands on a 10 Hz label.
    """
    if task not in TASKS:
        raise InvalidInputError(f"Unknown task {task!r}")
    label = TASK_LABELS[task]
    stride, start = (force_stride, 0) if task == "force" else (WINDOW_FRAMES, 1)
    parts = [episode_windows(dataset.episode(i), i, flux_scale, stride, start, WINDOW_FRAMES, label)
             for i in tqdm(range(len(dataset)), desc=f"Windowing {task}", leave=False)]
    logger.info(f"Windowed {len(parts)} {task} episodes into {sum(len(p) for p in parts)} windows")
    return TaskWindows(task, parts, layout, sequence_windows, sequence_step)


class SequenceDataset(Dataset):
    """Runs of S contiguous windows inside one episode, sliding by ``step`` windows."""

    def __init__(self, parts, layout, label, length=SEQUENCE_WINDOWS, step=SEQUENCE_STEP):
        self.windows = WindowDataset(parts, layout, label)
        self.length = length
        spacing = WINDOW_FRAMES * RESAMPLE_DT
        starts, offset = [], 0
        for part in parts:
            gaps = np.abs(np.diff(part.t_end) - spacing) > SEQUENCE_GAP_TOLERANCE
            for s in range(0, len(part) - length + 1, step):
                if not gaps[s:s + length - 1].any():
                    starts.append(offset + s)
            offset += len(part)
        if not starts:
            raise InsufficientDataError(
                f"No episode holds {length} contiguous labelled windows "
                f"({length * spacing:.1f} s of history)"
            )
        self.starts = np.array(starts)

    def __len__(self):
        return len(self.starts)

    @property
    def episodes(self):
        return self.windows.episodes[self.starts]

    @property
    def labels(self):
        index = self.starts[:, None] + np.arange(self.length)
        return self.windows.labels[index]

    def __getitem__(self, index):
        items = [self.windows[int(self.starts[index]) + k] for k in range(self.length)]
        return {
            "x": torch.stack([it["x"] for it in items]),
            "p": torch.stack([it["p"] for it in items]),
            "label": torch.stack([it["label"] for it in items]),
            "t_end": torch.tensor([it["t_end"] for it in items], dtype=torch.float64),
            "episode": items[0]["episode"],
        }


def split_episodes(episodes, eval_fraction, seed):
    """(train, eval) episode ids; the eval share is drawn with the ``split`` stream."""
    episodes = np.array(sorted(episodes))
    if len(episodes) < 2:
        raise InsufficientDataError("Need at least two episodes to hold one out for evaluation")
    order = np.random.default_rng(sub_seed(seed, "split")).permutation(episodes)
    n_eval = min(len(episodes) - 1, max(1, int(round(eval_fraction * len(episodes)))))
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def subsample_episodes(episodes, budget, seed, total=None):
    """First floor(budget * total) episodes of a seeded permutation; nested across budgets.

    ``total`` defaults to ``len(episodes)``. Pass the full episode count when ``episodes``
    is the train pool left after the eval hold-out; the count is capped at the pool size.
    """
    check_budget(budget)
    episodes = np.array(sorted(episodes))
    total = len(episodes) if total is None else total
    count = min(len(episodes), int(math.floor(budget * total + 1e-9)))
    if count == 0:
        raise InsufficientDataError(
            f"Budget {budget} of {total} episodes leaves no training episodes"
        )
    order = np.random.default_rng(sub_seed(seed, "subsample")).permutation(episodes)
    return np.sort(order[:count])


def select_episodes(episodes, budget, seed, eval_fraction=EVAL_FRACTION):
    """(train, eval) episode ids: budgeted share of all episodes, drawn from the non-eval pool."""
    episodes = np.unique(np.asarray(episodes))
    train_pool, eval_eps = split_episodes(episodes, eval_fraction, seed)
    return subsample_episodes(train_pool, budget, seed, total=len(episodes)), eval_eps


# =============================================================================
# METRICS
# =============================================================================

@dataclass
class TaskMetrics:
    task: str
    rmse: list
    correlation: list
    n_eval: int
    pose_accuracy: float | None = None

    def rows(self):
        """(metric, dim, value) rows for the sweep table."""
        axes = AXES[self.task]
        rows = [("rmse", axis, value) for axis, value in zip(axes, self.rmse)]
        rows.append(("rmse", "all", float(np.mean(self.rmse))))
        rows += [("correlation", axis, value) for axis, value in zip(axes, self.correlation)]
        if self.pose_accuracy is not None:
            rows.append(("pose_accuracy", "all", self.pose_accuracy))
        return rows

    def to_dict(self):
        return asdict(self)


def wrap_angle(angle):
    """Wrap to (-pi, pi]."""
    wrapped = np.mod(np.asarray(angle, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    return np.where(wrapped == -np.pi, np.pi, wrapped)


def rmse(predictions, labels):
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, np.shape(labels)[-1])
    labels = np.asarray(labels, dtype=np.float64).reshape(predictions.shape)
    if len(labels) == 0:
        raise InsufficientDataError("Cannot compute RMSE over an empty evaluation set")
    return np.sqrt(np.mean((predictions - labels) ** 2, axis=0))


def correlation(predictions, labels):
    """Per-dimension Pearson correlation (NaN where either side is constant)."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, np.shape(labels)[-1])
    labels = np.asarray(labels, dtype=np.float64).reshape(predictions.shape)
    a = predictions - predictions.mean(axis=0)
    b = labels - labels.mean(axis=0)
    denom = np.sqrt((a ** 2).sum(axis=0) * (b ** 2).sum(axis=0))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, (a * b).sum(axis=0) / denom, np.nan)


def pose_errors(predictions, labels):
    """(translation error m, |wrapped angle error| rad) per prediction."""
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, 3)
    labels = np.asarray(labels, dtype=np.float64).reshape(-1, 3)
    translation = np.linalg.norm(predictions[:, :2] - labels[:, :2], axis=-1)
    rotation = np.abs(wrap_angle(predictions[:, 2] - labels[:, 2]))
    return translation, rotation


def pose_accuracy(predictions, labels, translation_threshold=POSE_TRANSLATION_THRESHOLD,
                  rotation_threshold_deg=POSE_ROTATION_THRESHOLD_DEG):
    translation, rotation = pose_errors(predictions, labels)
    if len(translation) == 0:
        raise InsufficientDataError("Cannot compute pose accuracy over an empty evaluation set")
    accurate = ((translation <= translation_threshold)
                & (rotation <= np.deg2rad(rotation_threshold_deg)))
    return float(accurate.mean())


def task_metrics(task, predictions, labels, thresholds=None):
    accuracy = None
    if task == "pose":
        accuracy = pose_accuracy(predictions, labels, *(thresholds or ()))
    return TaskMetrics(task, rmse(predictions, labels).tolist(),
                       correlation(predictions, labels).tolist(),
                       int(np.prod(np.shape(labels)[:-1])), accuracy)


def predict(decoder, data, batch_size=64):
    """(predictions, labels) as float64 arrays over a task dataset."""
    if len(data) == 0:
        raise InsufficientDataError("Evaluation set is empty")
    dtype = next(decoder.parameters()).dtype
    was_training = decoder.training
    decoder.eval()
    outputs, labels = [], []
    with torch.no_grad():
        for batch in DataLoader(data, batch_size=batch_size, shuffle=False):
            outputs.append(decoder.predict(batch["x"].to(dtype), batch["p"].to(dtype)).double())
            labels.append(batch["label"].double())
    decoder.train(was_training)
    return torch.cat(outputs).numpy(), torch.cat(labels).numpy()


def eval_rmse(decoder, data, task, batch_size=64):
    predictions, labels = predict(decoder, data, batch_size)
    return task_metrics(task, predictions, labels)


def eval_pose_accuracy(decoder, data, thresholds=(POSE_TRANSLATION_THRESHOLD,
                                                  POSE_ROTATION_THRESHOLD_DEG), batch_size=64):
    predictions, labels = predict(decoder, data, batch_size)
    return task_metrics("pose", predictions, labels, thresholds)


class PadSumForceBaseline:
    """Least-squares map from the palm pads' summed calibrated flux to the applied force."""

    def __init__(self, layout):
        self.taxels = np.flatnonzero(layout.taxel_pad_types == PadType.PALM)
        self.coef = None

    def features(self, windows):
        summed = windows.x[:, -1][:, self.taxels].sum(axis=1).astype(np.float64)   # (W, 3)
        return np.concatenate([summed, np.ones((len(summed), 1))], axis=1)

    def fit(self, windows):
        self.coef, *_ = np.linalg.lstsq(self.features(windows),
                                        windows.labels.astype(np.float64), rcond=None)
        return self

    def predict(self, windows):
        if self.coef is None:
            raise InvalidInputError("Fit the pad-sum baseline before predicting")
        return self.features(windows) @ self.coef


def pad_sum_force_baseline(data, budget=1.0, seed=0, eval_fraction=EVAL_FRACTION):
    """Fit the pad-sum estimator on the budgeted training episodes; metrics on held-out ones."""
    train_eps, eval_eps = select_episodes(data.episodes, budget, seed, eval_fraction)
    train = data.dataset(train_eps)
    held_out = data.dataset(eval_eps)
    baseline = PadSumForceBaseline(data.layout).fit(train)
    return task_metrics("force", baseline.predict(held_out), held_out.labels)


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class TaskResult:
    task: str
    mode: str
    budget: float
    seed: int
    decoder: nn.Module
    metrics: TaskMetrics
    train_episodes: list
    eval_episodes: list
    encoder_hash_before: str
    encoder_hash_after: str
    history: list = field(default_factory=list)

    def summary(self):
        return {
            "task": self.task, "mode": self.mode, "budget": self.budget, "seed": self.seed,
            "metrics": self.metrics.to_dict(), "train_episodes": len(self.train_episodes),
            "eval_episodes": len(self.eval_episodes),
            "encoder_hash_before": self.encoder_hash_before,
            "encoder_hash_after": self.encoder_hash_after,
        }


def make_task_encoder(mode, layout, seed, encoder_config=None, checkpoint=None):
    """Encoder for a training mode; end-to-end ignores any checkpoint."""
    mode = TrainMode(mode)
    if not mode.needs_checkpoint:
        if checkpoint is not None:
            logger.warning("end_to_end mode ignores the pretraining checkpoint")
        torch.manual_seed(sub_seed(seed, "init"))
        return build_encoder(encoder_config or EncoderConfig.desk(), layout)
    if checkpoint is None:
        raise InvalidInputError(f"Mode {mode.value} needs a pretraining checkpoint")
    encoder, meta = load_pretrained_encoder(checkpoint, layout)
    if meta.get("objective") != mode.objective:
        raise InvalidInputError(
            f"Mode {mode.value} needs a {mode.objective} checkpoint, "
            f"{checkpoint} holds {meta.get('objective')}"
        )
    return encoder


def train_task(task, mode, data, budget, seed, config=None, encoder_config=None, checkpoint=None):
    """Train a task decoder on a budgeted episode subset and evaluate on held-out episodes.

    ``data`` is the TaskWindows of the task dataset.
    """
    config = config or DownstreamConfig()
    mode = TrainMode(mode)
    check_budget(budget)
    train_eps, eval_eps = select_episodes(data.episodes, budget, seed, config.eval_fraction)
    train_set, eval_set = data.dataset(train_eps), data.dataset(eval_eps)

    encoder = make_task_encoder(mode, data.layout, seed, encoder_config, checkpoint)
    torch.manual_seed(sub_seed(seed, f"decoder:{task}"))
    decoder = build_decoder(task, encoder)
    decoder.normalizer.fit(train_set.labels)
    decoder.freeze_encoder = mode.frozen
    if mode.frozen:
        encoder.requires_grad_(False)
    hash_before = tensor_hash(encoder)

    params = decoder.head_parameters() if mode.frozen else list(decoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    batch_size = config.batch_size if task == "force" else config.sequence_batch_size
    generator = torch.Generator().manual_seed(sub_seed(seed, "loader"))
    loader = DataLoader(train_set, batch_size=batch_size, shuffle=True, generator=generator)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer,
                                                           T_max=config.epochs * len(loader))

    logger.info(f"Training {task} decoder ({mode.value}, budget {budget}, seed {seed}): "
                f"{len(train_eps)} train / {len(eval_eps)} eval episodes, {len(train_set)} samples")
    history = []
    for epoch in tqdm(range(config.epochs), desc=f"{task}/{mode.value}/{budget}", leave=False):
        decoder.train()
        if mode.frozen:
            encoder.eval()
        total, count = 0.0, 0
        for batch in loader:
            target = decoder.normalizer.normalize(batch["label"].float())
            loss = F.mse_loss(decoder(batch["x"], batch["p"]), target)
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += float(loss) * len(target)
            count += len(target)
        history.append({"epoch": epoch + 1, "loss": total / count})

    hash_after = tensor_hash(encoder)
    predictions, labels = predict(decoder, eval_set)
    metrics = task_metrics(task, predictions, labels,
                           (config.translation_threshold, config.rotation_threshold_deg))
    logger.info(f"  ✓ {task}/{mode.value}/{budget}/seed {seed}: RMSE "
                + ", ".join(f"{a} {v:.4f}" for a, v in zip(AXES[task], metrics.rmse))
                + (f", pose accuracy {metrics.pose_accuracy:.3f}"
                   if metrics.pose_accuracy is not None else ""))
    return TaskResult(task, mode.value, float(budget), int(seed), decoder, metrics,
                      train_eps.tolist(), eval_eps.tolist(), hash_before, hash_after, history)


def save_decoder(path, result, run_meta=None):
    decoder = result.decoder
    meta = {"kind": "decoder", "version": PROJECT_VERSION, "task": result.task,
            "mode": result.mode, "budget": result.budget, "seed": result.seed,
            "encoder": decoder.encoder.config.to_dict(), "eval_episodes": result.eval_episodes,
            **(run_meta or {})}
    return save_checkpoint(path, prefixed("decoder", decoder.state_dict()), meta)


def load_decoder(path, layout):
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "decoder":
        raise InvalidInputError(f"{path} is not a task decoder checkpoint")
    encoder = build_encoder(EncoderConfig(**meta["encoder"]), layout)
    decoder = build_decoder(meta["task"], encoder)
    restore_module(decoder, "decoder", tensors)
    return decoder, meta


# =============================================================================
# SWEEP
# =============================================================================

def sweep_rows(result):
    return [{"task": result.task, "mode": result.mode, "budget": result.budget,
             "seed": result.seed, "metric": metric, "dim": dim, "value": value}
            for metric, dim, value in result.metrics.rows()]


def sample_efficiency_sweep(task, data, modes=None, budgets=BUDGETS, seeds=(0, 1, 2),
                            config=None, encoder_config=None, checkpoints=None, out_csv=None):
    """Train every (mode, budget, seed) cell; long-format table with SWEEP_COLUMNS.

    ``checkpoints`` maps pretraining objective ("distill" / "mae") to a checkpoint path.
    """
    config = config or DownstreamConfig()
    modes = [TrainMode(m) for m in (modes or config.modes)]
    checkpoints = checkpoints or {}
    rows = []
    for mode in modes:
        checkpoint = checkpoints.get(mode.objective) if mode.needs_checkpoint else None
        if mode.needs_checkpoint and checkpoint is None:
            raise InvalidInputError(f"Sweep mode {mode.value} needs a {mode.objective} checkpoint")
        for budget in budgets:
            for seed in seeds:
                result = train_task(task, mode, data, budget, seed, config, encoder_config,
                                    checkpoint)
                rows.extend(sweep_rows(result))
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    if out_csv is not None:
        out_csv = Path(out_csv)
        out_csv.parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(out_csv, index=False)
        summarize_sweep(table).to_csv(out_csv.with_name(out_csv.stem + "_summary.csv"), index=False)
        logger.info(f"Wrote {len(table)} rows to {out_csv}")
    return table


def summarize_sweep(table):
    """Mean and std over seeds for every (task, mode, budget, metric, dim)."""
    grouped = table.groupby(["task", "mode", "budget", "metric", "dim"], sort=True)["value"]
    summary = grouped.agg(["mean", "std", "count"]).reset_index()
    summary["std"] = summary["std"].fillna(0.0)
    return summary


def write_task_outputs(out_dir, result, run_meta=None):
    """metrics CSV (sweep columns) + JSON summary for one trained cell."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{result.task}_{result.mode}_{result.budget:g}_seed{result.seed}"
    csv_path = out_dir / f"{stem}.csv"
    pd.DataFrame(sweep_rows(result), columns=SWEEP_COLUMNS).to_csv(csv_path, index=False)
    json_path = out_dir / f"{stem}.json"
    with open(json_path, "w") as f:
        json.dump({**result.summary(), **(run_meta or {})}, f, indent=2, sort_keys=True)
    return csv_path, json_path
