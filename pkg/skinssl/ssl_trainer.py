"""
Self-distillation pretraining of the tactile encoder.

Per step:
    1. draw 2 global + 8 local block masks per window (seeded by step)
    2. student encodes every view; the EMA teacher encodes the global views
    3. teacher logits are centered and sharpened into targets (no gradient)
    4. class-token and co-visible patch cross-entropy between teacher globals
       and every other student view
    5. AdamW step on the student, EMA step on the teacher, center update

The MAE objective replaces 2-4 with reconstruction of masked taxels' flux
from one block-masked view. Two online probes ride along on detached
features: a per-taxel flux reconstruction MLP and a linear object classifier.

Resume is exact at epoch boundaries: masks are seeded by (masking seed, step)
and the data order by (loader seed, epoch), so nothing but the model,
optimizer, center and torch RNG state needs restoring.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange
from scipy.spatial import cKDTree
from torch.utils.data import DataLoader
from tqdm import tqdm

from skinssl.checkpoint import (
    load_checkpoint,
    load_optimizer_state,
    optimizer_state,
    prefixed,
    restore_module,
    save_checkpoint,
)
from skinssl.config import (
    ADAM_BETAS,
    ADAM_EPS,
    CENTER_MOMENTUM,
    CLIP_GRAD,
    EMA_RANGE,
    GLOBAL_RETENTION,
    LOCAL_RETENTION,
    METRICS_LOG_NAME,
    N_GLOBAL_VIEWS,
    N_LOCAL_VIEWS,
    PATCH_LOSS_WEIGHT,
    PEAK_LR,
    PRETRAIN_BATCH_SIZE,
    PRETRAIN_EPOCHS,
    PROJECT_VERSION,
    STUDENT_TEMPERATURE,
    TEACHER_TEMPERATURE,
    WARMUP_EPOCHS,
    WEIGHT_DECAY_RANGE,
    WINDOW_STRIDE,
    sub_seed,
)
from skinssl.encoder import (
    EncoderConfig,
    ProjectionHead,
    TransformerBlock,
    build_encoder,
    init_weights,
    masked_mean,
    window_features,
)
from skinssl.errors import (
    DegenerateLabelsError,
    InsufficientDataError,
    InvalidInputError,
    NumericError,
    ResumeError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "pretrain.ckpt"
NO_DECAY_NAMES = ("cls_token", "pad_embeddings", "query", "mask_token")


# =============================================================================
# CONFIGURATION
# =============================================================================

@dataclass(frozen=True)
class ViewSpec:
    n_global: int = N_GLOBAL_VIEWS
    n_local: int = N_LOCAL_VIEWS
    global_retention: tuple = GLOBAL_RETENTION
    local_retention: tuple = LOCAL_RETENTION

    def __post_init__(self):
        for name in ("global_retention", "local_retention"):
            low, high = getattr(self, name)
            if not (0.0 < low <= high <= 1.0):
                raise InvalidInputError(f"{name} {low, high} must satisfy 0 < low <= high <= 1")
        if self.local_retention[1] > self.global_retention[0]:
            raise InvalidInputError("Local retention max must not exceed global retention min")
        if self.n_global < 1 or self.n_local < 0:
            raise InvalidInputError("Need at least one global view and a non-negative local count")

    @property
    def n_views(self):
        return self.n_global + self.n_local


@dataclass
class SSLConfig:
    objective: str = "distill"
    n_global: int = N_GLOBAL_VIEWS
    n_local: int = N_LOCAL_VIEWS
    global_retention: tuple = GLOBAL_RETENTION
    local_retention: tuple = LOCAL_RETENTION
    student_temperature: float = STUDENT_TEMPERATURE
    teacher_temperature: float = TEACHER_TEMPERATURE
    center_momentum: float = CENTER_MOMENTUM
    patch_weight: float = PATCH_LOSS_WEIGHT
    peak_lr: float = PEAK_LR
    warmup_epochs: float = WARMUP_EPOCHS
    weight_decay: tuple = WEIGHT_DECAY_RANGE
    ema: tuple = EMA_RANGE
    betas: tuple = ADAM_BETAS
    eps: float = ADAM_EPS
    clip_grad: float = CLIP_GRAD
    epochs: int = PRETRAIN_EPOCHS
    batch_size: int = PRETRAIN_BATCH_SIZE
    window_stride: int = WINDOW_STRIDE
    mae_retention: tuple = (0.25, 0.5)
    mae_decoder_layers: int = 2
    probe_lr: float = 1e-3
    probe_eval_fraction: float = 0.2
    checkpoint_every: int = 10
    num_workers: int = 0
    float64: bool = False

    def __post_init__(self):
        for name in ("global_retention", "local_retention", "weight_decay", "ema", "betas",
                     "mae_retention"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.objective not in ("distill", "mae"):
            raise InvalidInputError(f"Unknown objective {self.objective!r} (distill or mae)")
        if self.student_temperature <= 0 or self.teacher_temperature <= 0:
            raise InvalidInputError("Temperatures must be positive")
        if not 0.0 <= self.center_momentum < 1.0:
            raise InvalidInputError("center_momentum must lie in [0, 1)")
        if not 0.0 <= self.ema[0] <= self.ema[1] <= 1.0:
            raise InvalidInputError("EMA range must lie in [0, 1]")
        if self.mae_retention[1] >= 1.0 or self.mae_retention[0] <= 0.0:
            raise InvalidInputError("MAE retention must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be at least 1")
        self.view_spec   # validates the view ranges

    @property
    def view_spec(self):
        return ViewSpec(self.n_global, self.n_local, self.global_retention, self.local_retention)

    def to_dict(self):
        return asdict(self)


# =============================================================================
# BLOCK MASKING
# =============================================================================

@dataclass(frozen=True, eq=False)
class ViewMask:
    kept_ids: np.ndarray
    retention: float
    mask_order: np.ndarray      # masked taxels in the order they were added
    seed_ids: np.ndarray        # taxels that started a block


@dataclass(frozen=True, eq=False)
class NeighbourGraph:
    """radius[t]: distance to t's 6th nearest neighbour; reachable[m]: t with |t - m| <= radius[t]."""

    radius: np.ndarray
    reachable: tuple


def kept_count(retention, taxels):
    """round(r * n), halves rounded up."""
    return int(math.floor(retention * taxels + 0.5))


def neighbour_graph(positions, k=6):
    positions = np.asarray(positions, dtype=np.float64)
    tree = cKDTree(positions)
    dist, _ = tree.query(positions, k=k + 1)
    radius = dist[:, k]
    within = tree.query_ball_point(positions, radius * (1 + 1e-9), return_sorted=True)
    reachable = [[] for _ in range(len(positions))]
    for t, members in enumerate(within):
        for m in members:
            if m != t:
                reachable[m].append(t)
    return NeighbourGraph(radius, tuple(np.array(sorted(r), dtype=np.int64) for r in reachable))


def make_block_mask(positions, retention_range, rng, graph=None):
    """Grow contiguous masked blocks across all taxels until round(r * n) remain."""
    taxels = len(positions)
    low, high = retention_range
    retention = float(low) if low == high else float(rng.uniform(low, high))
    n_mask = taxels - kept_count(retention, taxels)
    graph = graph or neighbour_graph(positions)
    block_range = (max(1, taxels // 46), max(1, taxels // 8))

    masked = np.zeros(taxels, dtype=bool)
    order, seeds = [], []
    while len(order) < n_mask:
        target = min(n_mask - len(order), int(rng.integers(block_range[0], block_range[1] + 1)))
        seed = int(rng.choice(np.flatnonzero(~masked)))
        seeds.append(seed)
        masked[seed] = True
        order.append(seed)
        frontier, queued = [], set()

        def push(m):
            for t in graph.reachable[m]:
                if not masked[t] and t not in queued:
                    queued.add(t)
                    frontier.append(int(t))

        push(seed)
        size = 1
        while size < target and frontier:
            j = int(rng.integers(len(frontier)))
            t = frontier[j]
            frontier[j] = frontier[-1]
            frontier.pop()
            masked[t] = True
            order.append(t)
            size += 1
            push(t)

    return ViewMask(np.flatnonzero(~masked), retention, np.array(order, dtype=np.int64),
                    np.array(seeds, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class Views:
    global_views: list
    local_views: list

    @property
    def all(self):
        return self.global_views + self.local_views


def build_views(positions, spec, rng, graph=None):
    """Independent masks for one window: spec.n_global global then spec.n_local local."""
    graph = graph or neighbour_graph(positions)
    return Views(
        [make_block_mask(positions, spec.global_retention, rng, graph) for _ in range(spec.n_global)],
        [make_block_mask(positions, spec.local_retention, rng, graph) for _ in range(spec.n_local)],
    )


def pad_ids(id_lists, device=None):
    """Right-pad id arrays into (B, n_max) long ids and a bool validity mask."""
    width = max(1, max(len(ids) for ids in id_lists))
    ids = torch.zeros(len(id_lists), width, dtype=torch.long, device=device)
    valid = torch.zeros(len(id_lists), width, dtype=torch.bool, device=device)
    for b, row in enumerate(id_lists):
        ids[b, :len(row)] = torch.as_tensor(row, dtype=torch.long)
        valid[b, :len(row)] = True
    return ids, valid


def masked_ids(mask, taxels):
    keep = np.zeros(taxels, dtype=bool)
    keep[mask.kept_ids] = True
    return np.flatnonzero(~keep)


# =============================================================================
# DISTILLATION
# =============================================================================

@dataclass
class ViewOutput:
    cls_logits: torch.Tensor        # (B, k)
    patch_logits: torch.Tensor      # (B, n, k)
    kept_ids: torch.Tensor
    valid: torch.Tensor
    class_feature: torch.Tensor | None = None
    features: torch.Tensor | None = None


@dataclass
class TeacherTargets:
    cls_probs: torch.Tensor
    patch_probs: torch.Tensor
    kept_ids: torch.Tensor
    valid: torch.Tensor


@dataclass
class LossReport:
    total: torch.Tensor
    class_ce: torch.Tensor | None = None
    patch_ce: torch.Tensor | None = None
    mae_mse: torch.Tensor | None = None
    per_view: dict | None = None

    def as_floats(self):
        def value(t):
            return None if t is None else float(t.detach())
        return {"loss_total": value(self.total), "loss_class": value(self.class_ce),
                "loss_patch": value(self.patch_ce), "mae_mse": value(self.mae_mse)}


class DistillationModel(nn.Module):
    """Encoder plus prototype head; the same module type serves as student and teacher."""

    def __init__(self, encoder, head):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x, p, kept_ids=None, valid=None):
        out = self.encoder(x, p, kept_ids, valid)
        return ViewOutput(self.head(out.class_feature), self.head(out.features),
                          out.kept_ids, out.valid, out.class_feature, out.features)


def teacher_probs(logits, center, temperature):
    return torch.softmax((logits - center) / temperature, dim=-1)


def teacher_targets(teacher_outputs, center, temperature=TEACHER_TEMPERATURE):
    """Centered, sharpened teacher distributions for each global view (no gradient)."""
    with torch.no_grad():
        return [TeacherTargets(teacher_probs(out.cls_logits, center, temperature),
                               teacher_probs(out.patch_logits, center, temperature),
                               out.kept_ids, out.valid)
                for out in teacher_outputs]


def teacher_logit_rows(teacher_outputs):
    """All class-token rows plus every valid patch row, stacked (R, k)."""
    rows = []
    for out in teacher_outputs:
        rows.append(out.cls_logits)
        rows.append(out.patch_logits[out.valid])
    return torch.cat(rows)


def update_center(center, batch_logits, momentum=CENTER_MOMENTUM):
    """c' = m * c + (1 - m) * mean of the teacher logit rows."""
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError("Center momentum must lie in [0, 1)")
    with torch.no_grad():
        rows = batch_logits.reshape(-1, batch_logits.shape[-1])
        return momentum * center + (1.0 - momentum) * rows.mean(dim=0)


def teacher_entropy(targets):
    probs = torch.cat([t.cls_probs for t in targets])
    return float(-(probs * torch.log(probs.clamp_min(1e-30))).sum(dim=-1).mean())


def _patch_cross_entropy(target, student, temperature):
    """Per-sample mean CE over taxels kept in both views; also returns which samples had any."""
    taxels = int(max(target.kept_ids.max(), student.kept_ids.max())) + 1
    batch, width = target.kept_ids.shape
    slots = torch.full((batch, taxels + 1), -1, dtype=torch.long, device=target.kept_ids.device)
    ids = torch.where(target.valid, target.kept_ids, torch.full_like(target.kept_ids, taxels))
    slots.scatter_(1, ids, torch.arange(width, device=ids.device).expand(batch, -1))
    slots[:, taxels] = -1

    student_ids = torch.where(student.valid, student.kept_ids,
                              torch.full_like(student.kept_ids, taxels))
    matched = torch.gather(slots, 1, student_ids)                       # (B, n_s)
    covisible = (matched >= 0) & student.valid
    k = target.patch_probs.shape[-1]
    probs = torch.gather(target.patch_probs, 1, matched.clamp_min(0)[..., None].expand(-1, -1, k))
    log_q = F.log_softmax(student.patch_logits / temperature, dim=-1)
    ce = -(probs * log_q).sum(dim=-1)
    counts = covisible.sum(dim=1)
    per_sample = (ce * covisible).sum(dim=1) / counts.clamp_min(1)
    return per_sample, counts > 0


def distillation_loss(student_outputs, targets, student_temperature=STUDENT_TEMPERATURE,
                      patch_weight=PATCH_LOSS_WEIGHT):
    """Class + patch CE over ordered (teacher global g, student view v != g) pairs.

    ``student_outputs`` lists every view with the global views first, in the
    same order as ``targets``.
    """
    class_terms, patch_values, per_view = [], [], defaultdict(list)
    for g, target in enumerate(targets):
        for v, student in enumerate(student_outputs):
            if v == g:
                continue
            log_q = F.log_softmax(student.cls_logits / student_temperature, dim=-1)
            term = -(target.cls_probs * log_q).sum(dim=-1).mean()
            class_terms.append(term)
            per_view[v].append(term.detach())
            per_sample, has_pairs = _patch_cross_entropy(target, student, student_temperature)
            patch_values.append(per_sample[has_pairs])

    class_ce = torch.stack(class_terms).mean()
    patch_all = torch.cat(patch_values)
    patch_ce = patch_all.mean() if patch_all.numel() else class_ce.new_zeros(())
    return LossReport(total=class_ce + patch_weight * patch_ce, class_ce=class_ce,
                      patch_ce=patch_ce,
                      per_view={v: float(torch.stack(t).mean()) for v, t in per_view.items()})


def ema_update(student, teacher, momentum):
    """teacher <- m * teacher + (1 - m) * student, tensor by tensor, in place."""
    if not 0.0 <= momentum <= 1.0:
        raise InvalidInputError(f"EMA momentum {momentum} must lie in [0, 1]")
    if isinstance(student, nn.Module):
        student, teacher = list(student.parameters()), list(teacher.parameters())
    if len(student) != len(teacher):
        raise InvalidInputError("Student and teacher have different parameter counts")
    with torch.no_grad():
        for s, t in zip(student, teacher):
            if s.shape != t.shape:
                raise InvalidInputError(f"EMA shape mismatch: {tuple(s.shape)} vs {tuple(t.shape)}")
            t.mul_(momentum).add_(s.detach(), alpha=1.0 - momentum)
    return teacher


# =============================================================================
# SCHEDULES
# =============================================================================

@dataclass(frozen=True)
class Schedules:
    peak_lr: float = PEAK_LR
    warmup_epochs: float = WARMUP_EPOCHS
    total_epochs: float = PRETRAIN_EPOCHS
    weight_decay_range: tuple = WEIGHT_DECAY_RANGE
    ema_range: tuple = EMA_RANGE

    def _progress(self, epoch):
        return min(max(epoch / self.total_epochs, 0.0), 1.0)

    def lr(self, epoch):
        """Linear warmup to the peak, then cosine to zero at the last epoch."""
        if self.warmup_epochs > 0 and epoch < self.warmup_epochs:
            return self.peak_lr * epoch / self.warmup_epochs
        span = self.total_epochs - self.warmup_epochs
        if span <= 0:
            return self.peak_lr
        progress = min(max((epoch - self.warmup_epochs) / span, 0.0), 1.0)
        return 0.5 * self.peak_lr * (1.0 + math.cos(math.pi * progress))

    def weight_decay(self, epoch):
        low, high = self.weight_decay_range
        return low + (high - low) * 0.5 * (1.0 - math.cos(math.pi * self._progress(epoch)))

    def ema(self, epoch):
        low, high = self.ema_range
        return high - (high - low) * 0.5 * (1.0 + math.cos(math.pi * self._progress(epoch)))


# =============================================================================
# MAE OBJECTIVE
# =============================================================================

class MaskedDecoder(nn.Module):
    """Reconstructs 60-value taxel tokens at masked ids from the kept-token features.

    Mask tokens carry the masked taxel's positions and pad type, since tokens
    have no other positional signal.
    """

    def __init__(self, config, layers=2):
        super().__init__()
        d = config.d
        self.embed = nn.Linear(d, d)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, d))
        self.mask_position = nn.Linear(config.window_frames * 3, d)
        self.mask_pad_embeddings = nn.Parameter(torch.zeros(config.pad_types, d))
        self.blocks = nn.ModuleList([TransformerBlock(d, config.heads, config.mlp_ratio)
                                     for _ in range(layers)])
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.token_inputs)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.mask_token, std=0.02)

    def forward(self, encoded, p, masked, masked_valid, taxel_pad_types):
        positions = rearrange(p, "b t n c -> b n (t c)")
        positions = torch.gather(positions, 1, masked[..., None].expand(-1, -1, positions.shape[-1]))
        mask_tokens = (self.mask_token + self.mask_position(positions)
                       + self.mask_pad_embeddings[taxel_pad_types[masked]])
        h = torch.cat([self.embed(encoded.class_feature)[:, None], self.embed(encoded.features),
                       mask_tokens], dim=1)
        padding = torch.cat([torch.zeros_like(encoded.valid[:, :1]), ~encoded.valid,
                             ~masked_valid], dim=1)
        for block in self.blocks:
            h = block(h, padding)
        return self.head(self.norm(h))[:, -masked.shape[1]:]


class MAEModel(nn.Module):
    def __init__(self, encoder, decoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder


def flux_channels(window_frames):
    """Bool mask over the 60 token values selecting the flux (not position) entries."""
    return torch.arange(window_frames * 6) % 6 < 3


def mae_forward(model, x, p, kept, kept_valid, masked, masked_valid):
    """(loss, encoder output); loss = MSE over flux channels at masked taxels only."""
    if not bool(masked_valid.any()):
        raise InvalidInputError("MAE needs at least one masked taxel (retention < 1)")
    encoded = model.encoder(x, p, kept, kept_valid)
    prediction = model.decoder(encoded, p, masked, masked_valid,
                               model.encoder.tokenizer.taxel_pad_types)
    target = window_features(x, p)
    target = torch.gather(target, 1, masked[..., None].expand(-1, -1, target.shape[-1]))
    channels = flux_channels(x.shape[1]).to(x.device)
    error = ((prediction - target)[..., channels] ** 2).mean(dim=-1)
    loss = (error * masked_valid).sum() / masked_valid.sum()
    return loss, encoded


def mae_loss(model, x, p, masks):
    """MAE loss for windows x, p (B, T, N, 3) under one ViewMask per window."""
    taxels = x.shape[2]
    kept, kept_valid = pad_ids([m.kept_ids for m in masks], x.device)
    masked, masked_valid = pad_ids([masked_ids(m, taxels) for m in masks], x.device)
    return mae_forward(model, x, p, kept, kept_valid, masked, masked_valid)[0]


# =============================================================================
# PROBES
# =============================================================================

class ReconstructionProbe(nn.Module):
    def __init__(self, d, outputs):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, outputs))

    def forward(self, features):
        return self.layers(features)


def probe_reconstruction(probe, features, kept_ids, valid, x):
    """Per-taxel flux history from detached features; returns (reconstruction, window MSE)."""
    reconstruction = probe(features.detach())
    target = rearrange(x, "b t n c -> b n (t c)")
    target = torch.gather(target, 1, kept_ids[..., None].expand(-1, -1, target.shape[-1]))
    error = ((reconstruction - target) ** 2).mean(dim=-1)
    return reconstruction, (error * valid).sum() / valid.sum().clamp_min(1)


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    n_train: int
    n_eval: int
    classes: int


def split_indices(n, eval_fraction, seed):
    order = np.random.default_rng(seed).permutation(n)
    n_eval = max(1, int(round(eval_fraction * n))) if n > 1 else 0
    return np.sort(order[n_eval:]), np.sort(order[:n_eval])


def probe_classification(features, labels, train_index=None, eval_index=None,
                         eval_fraction=0.2, seed=0, epochs=300, lr=1e-2):
    """Linear softmax classifier on frozen features; returns held-out accuracy."""
    features = torch.as_tensor(np.asarray(features), dtype=torch.float64)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    classes = torch.unique(labels)
    if len(classes) < 2:
        raise DegenerateLabelsError("Classification probe needs at least two classes")
    if train_index is None:
        train_index, eval_index = split_indices(len(labels), eval_fraction, seed)
    train_index = torch.as_tensor(np.asarray(train_index), dtype=torch.long)
    eval_index = torch.as_tensor(np.asarray(eval_index), dtype=torch.long)

    mean = features[train_index].mean(dim=0)
    std = features[train_index].std(dim=0).clamp_min(1e-8) if len(train_index) > 1 else 1.0
    z = (features - mean) / std
    generator = torch.Generator().manual_seed(seed)
    n_classes = int(labels.max()) + 1
    weight = (torch.randn(z.shape[1], n_classes, generator=generator, dtype=torch.float64)
              * 0.01).requires_grad_()
    bias = torch.zeros(n_classes, dtype=torch.float64, requires_grad=True)
    optimizer = torch.optim.Adam([weight, bias], lr=lr)
    for _ in range(epochs):
        optimizer.zero_grad()
        loss = F.cross_entropy(z[train_index] @ weight + bias, labels[train_index])
        loss.backward()
        optimizer.step()

    with torch.no_grad():
        predicted = (z @ weight + bias).argmax(dim=-1)
        train_acc = float((predicted[train_index] == labels[train_index]).double().mean())
        eval_acc = (float((predicted[eval_index] == labels[eval_index]).double().mean())
                    if len(eval_index) else float("nan"))
    return ProbeResult(eval_acc, train_acc, len(train_index), len(eval_index), len(classes))


def raw_separability_certificate(windows, max_windows=4000, seed=0, epochs=300):
    """Linear classifier on raw flattened flux windows; train accuracy certifies the classes."""
    if windows.labels is None:
        raise InvalidInputError("Certificate needs object-class labelled windows")
    index = np.arange(len(windows))
    if len(index) > max_windows:
        index = np.sort(np.random.default_rng(seed).choice(index, max_windows, replace=False))
    return probe_classification(windows.flattened(index), windows.labels[index],
                                eval_fraction=0.2, seed=seed, epochs=epochs)


def encode_windows(encoder, windows, batch_size=64, indices=None):
    """(class features, mean-pooled token features), each (W, d), from unmasked windows."""
    indices = np.arange(len(windows)) if indices is None else np.asarray(indices)
    if len(indices) == 0:
        d = encoder.config.d
        return np.zeros((0, d)), np.zeros((0, d))
    dtype = next(encoder.parameters()).dtype
    was_training = encoder.training
    encoder.eval()
    cls, pooled = [], []
    batches = np.array_split(indices, max(1, math.ceil(len(indices) / batch_size)))
    loader = DataLoader(windows, batch_sampler=[b.tolist() for b in batches])
    with torch.no_grad():
        for batch in loader:
            out = encoder(batch["x"].to(dtype), batch["p"].to(dtype))
            cls.append(out.class_feature.double())
            pooled.append(masked_mean(out.features, out.valid).double())
    encoder.train(was_training)
    return torch.cat(cls).numpy(), torch.cat(pooled).numpy()


# =============================================================================
# PRETRAINING
# =============================================================================

def param_groups(module, weight_decay):
    decay, no_decay = [], []
    for name, param in module.named_parameters():
        if not param.requires_grad:
            continue
        if param.ndim < 2 or name.split(".")[-1] in NO_DECAY_NAMES:
            no_decay.append(param)
        else:
            decay.append(param)
    return [{"params": decay, "weight_decay": weight_decay, "name": "decay"},
            {"params": no_decay, "weight_decay": 0.0, "name": "no_decay"}]


def heldout_episodes(windows, eval_fraction, seed):
    """Episodes held out from the classification probe, stratified by class."""
    if windows.labels is None:
        return np.array([], dtype=np.int64)
    rng = np.random.default_rng(seed)
    episode_class = {int(e): int(c) for e, c in zip(windows.episodes, windows.labels)}
    held = []
    for label in sorted(set(episode_class.values())):
        members = sorted(e for e, c in episode_class.items() if c == label)
        if len(members) < 2:
            continue
        count = max(1, int(round(eval_fraction * len(members))))
        held.extend(rng.choice(members, count, replace=False).tolist())
    return np.array(sorted(held), dtype=np.int64)


@dataclass
class PretrainResult:
    checkpoint: Path
    metrics_log: Path
    history: list


class Pretrainer:
    """Owns the student, teacher, center, probes and optimizer of one pretraining run."""

    def __init__(self, ssl_config, encoder_config, layout, windows, seed=0, run_meta=None):
        self.config = ssl_config
        self.encoder_config = encoder_config
        self.layout = layout
        self.windows = windows
        self.seed = seed
        self.run_meta = dict(run_meta or {})
        self.dtype = torch.float64 if ssl_config.float64 else torch.float32
        self.masking_seed = sub_seed(seed, "masking")
        self.loader_seed = sub_seed(seed, "loader")
        self.spec = ssl_config.view_spec
        self.distill = ssl_config.objective == "distill"

        torch.manual_seed(sub_seed(seed, "init"))
        encoder = build_encoder(encoder_config, layout)
        if self.distill:
            self.student = DistillationModel(encoder, ProjectionHead(encoder_config.d, encoder_config.k))
            self.teacher = copy.deepcopy(self.student).requires_grad_(False).eval()
            self.center = torch.zeros(encoder_config.k, dtype=self.dtype)
        else:
            self.student = MAEModel(encoder, MaskedDecoder(encoder_config, ssl_config.mae_decoder_layers))
            self.teacher = None
            self.center = None
        self.recon_probe = ReconstructionProbe(encoder_config.d, encoder_config.window_frames * 3)
        self.classes = int(windows.labels.max()) + 1 if windows.labels is not None else 0
        self.cls_probe = nn.Linear(encoder_config.d, self.classes) if self.classes >= 2 else None
        self.heldout = heldout_episodes(windows, ssl_config.probe_eval_fraction, sub_seed(seed, "split"))
        for module in self._modules():
            module.to(self.dtype)

        self.schedules = Schedules(ssl_config.peak_lr, ssl_config.warmup_epochs, ssl_config.epochs,
                                   ssl_config.weight_decay, ssl_config.ema)
        groups = param_groups(self.student, ssl_config.weight_decay[0])
        probes = list(self.recon_probe.parameters())
        if self.cls_probe is not None:
            probes += list(self.cls_probe.parameters())
        groups.append({"params": probes, "weight_decay": 0.0, "lr": ssl_config.probe_lr,
                       "name": "probes"})
        self.optimizer = torch.optim.AdamW(groups, lr=ssl_config.peak_lr, betas=ssl_config.betas,
                                           eps=ssl_config.eps)
        self.steps_per_epoch = max(1, math.ceil(len(windows) / ssl_config.batch_size))
        self.step = 0
        self.epoch = 0
        self.history = []

    def _modules(self):
        modules = [self.student, self.recon_probe]
        if self.teacher is not None:
            modules.append(self.teacher)
        if self.cls_probe is not None:
            modules.append(self.cls_probe)
        return modules

    # -------------------------------------------------------------------------
    # one step
    # -------------------------------------------------------------------------

    def _set_schedules(self, epoch):
        lr, wd = self.schedules.lr(epoch), self.schedules.weight_decay(epoch)
        for group in self.optimizer.param_groups:
            if group["name"] == "probes":
                continue
            group["lr"] = lr
            if group["name"] == "decay":
                group["weight_decay"] = wd
        return lr, wd, self.schedules.ema(epoch)

    def _diagnostics(self, masks, grad_norm=None):
        retention = np.array([m.retention for m in masks])
        return (f"step {self.step} (epoch {self.epoch}); view retention min {retention.min():.3f} "
                f"mean {retention.mean():.3f} max {retention.max():.3f}; grad norm {grad_norm}")

    def train_step(self, batch):
        cfg = self.config
        x, p = batch["x"].to(self.dtype), batch["p"].to(self.dtype)
        rng = np.random.default_rng([self.masking_seed, self.step])
        lr, wd, momentum = self._set_schedules(self.step / self.steps_per_epoch)
        last = p[:, -1].double().numpy()
        graphs = [neighbour_graph(last[b]) for b in range(len(x))]
        stats = {}

        if self.distill:
            views = [build_views(last[b], self.spec, rng, graphs[b]) for b in range(len(x))]
            all_masks = [m for v in views for m in v.all]
            batched = [pad_ids([views[b].all[v].kept_ids for b in range(len(x))])
                       for v in range(self.spec.n_views)]
            student_out = [self.student(x, p, ids, valid) for ids, valid in batched]
            with torch.no_grad():
                teacher_out = [self.teacher(x, p, *batched[g]) for g in range(self.spec.n_global)]
            targets = teacher_targets(teacher_out, self.center, cfg.teacher_temperature)
            report = distillation_loss(student_out, targets, cfg.student_temperature, cfg.patch_weight)
            probe_in = student_out[0]
            stats["teacher_entropy"] = teacher_entropy(targets)
        else:
            all_masks = [make_block_mask(last[b], cfg.mae_retention, rng, graphs[b])
                         for b in range(len(x))]
            kept, kept_valid = pad_ids([m.kept_ids for m in all_masks])
            masked, masked_valid = pad_ids([masked_ids(m, x.shape[2]) for m in all_masks])
            mse, probe_in = mae_forward(self.student, x, p, kept, kept_valid, masked, masked_valid)
            report = LossReport(total=mse, mae_mse=mse)

        if not torch.isfinite(report.total):
            raise NumericError(f"Non-finite pretraining loss at {self._diagnostics(all_masks)}")

        _, recon_mse = probe_reconstruction(self.recon_probe, probe_in.features,
                                            probe_in.kept_ids, probe_in.valid, x)
        loss = report.total + recon_mse
        if self.cls_probe is not None and "label" in batch:
            train_rows = ~torch.isin(batch["episode"], torch.as_tensor(self.heldout))
            if train_rows.any():
                logits = self.cls_probe(probe_in.class_feature.detach()[train_rows])
                labels = batch["label"][train_rows]
                loss = loss + F.cross_entropy(logits, labels)
                stats["probe_cls_train_acc"] = float((logits.argmax(-1) == labels).double().mean())

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        clip = cfg.clip_grad if cfg.clip_grad > 0 else float("inf")
        grad_norm = float(nn.utils.clip_grad_norm_(self.student.parameters(), clip))
        if not math.isfinite(grad_norm):
            raise NumericError(f"Non-finite gradients at {self._diagnostics(all_masks, grad_norm)}")
        self.optimizer.step()

        if self.distill:
            ema_update(self.student, self.teacher, momentum)
            self.center = update_center(self.center, teacher_logit_rows(teacher_out),
                                        cfg.center_momentum)
        self.step += 1
        stats.update(report.as_floats())
        stats.update({"lr": lr, "wd": wd, "ema_m": momentum, "probe_recon_mse": float(recon_mse),
                      "grad_norm": grad_norm})
        return stats

    # -------------------------------------------------------------------------
    # epochs
    # -------------------------------------------------------------------------

    def _loader(self):
        generator = torch.Generator().manual_seed(sub_seed(self.loader_seed, self.epoch))
        order = torch.randperm(len(self.windows), generator=generator)
        batches = [chunk.tolist() for chunk in order.split(self.config.batch_size)]
        return DataLoader(self.windows, batch_sampler=batches, num_workers=self.config.num_workers)

    def probe_accuracy(self):
        """Online linear probe accuracy on held-out episodes' unmasked windows."""
        if self.cls_probe is None or len(self.heldout) == 0:
            return None
        index = np.flatnonzero(np.isin(self.windows.episodes, self.heldout))
        cls, _ = encode_windows(self.student.encoder, self.windows, indices=index)
        with torch.no_grad():
            logits = self.cls_probe(torch.as_tensor(cls, dtype=self.dtype))
        return float((logits.argmax(-1).numpy() == self.windows.labels[index]).mean())

    def train_epoch(self):
        sums, count = defaultdict(float), 0
        last = {}
        for batch in tqdm(self._loader(), desc=f"Epoch {self.epoch + 1}", leave=False):
            stats = self.train_step(batch)
            size = len(batch["x"])
            for key, value in stats.items():
                if value is not None:
                    sums[key] += value * size
            count += size
            last = stats
        self.epoch += 1

        def mean(key):
            return sums[key] / count if key in sums else None

        row = {
            "step": self.step,
            "epoch": self.epoch,
            "lr": last.get("lr"),
            "wd": last.get("wd"),
            "ema_m": last.get("ema_m") if self.distill else None,
            "loss_total": mean("loss_total"),
            "loss_class": mean("loss_class"),
            "loss_patch": mean("loss_patch"),
            "teacher_entropy": mean("teacher_entropy"),
            "probe_recon_mse": mean("probe_recon_mse"),
            "probe_cls_acc": self.probe_accuracy(),
        }
        if not self.distill:
            row["mae_mse"] = mean("mae_mse")
        self.history.append(row)
        return row

    # -------------------------------------------------------------------------
    # checkpoints
    # -------------------------------------------------------------------------

    def state(self):
        tensors = prefixed("student", self.student.state_dict())
        tensors.update(prefixed("probe_recon", self.recon_probe.state_dict()))
        if self.teacher is not None:
            tensors.update(prefixed("teacher", self.teacher.state_dict()))
            tensors["center"] = self.center
        if self.cls_probe is not None:
            tensors.update(prefixed("probe_cls", self.cls_probe.state_dict()))
        optim_meta, optim_tensors = optimizer_state(self.optimizer)
        tensors.update(optim_tensors)
        tensors["rng.torch"] = torch.get_rng_state()
        meta = {
            "kind": "pretrain",
            "version": PROJECT_VERSION,
            "objective": self.config.objective,
            "encoder": self.encoder_config.to_dict(),
            "ssl": self.config.to_dict(),
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
            "classes": self.classes,
            "optimizer": optim_meta,
            "history": self.history,
            **self.run_meta,
        }
        return tensors, meta

    def save(self, path):
        tensors, meta = self.state()
        return save_checkpoint(path, tensors, meta)

    def load(self, path):
        meta, tensors = load_checkpoint(path)
        if meta.get("kind") != "pretrain":
            raise ResumeError(f"{path} is not a pretraining checkpoint")
        for key, expected in (("objective", self.config.objective), ("seed", self.seed),
                              ("encoder", self.encoder_config.to_dict())):
            if meta.get(key) != expected:
                raise ResumeError(f"Checkpoint {key} {meta.get(key)!r} does not match this run "
                                  f"({expected!r})")
        restore_module(self.student, "student", tensors)
        restore_module(self.recon_probe, "probe_recon", tensors)
        if self.teacher is not None:
            restore_module(self.teacher, "teacher", tensors)
            self.teacher.eval()
            if "center" not in tensors:
                raise ResumeError("Checkpoint lacks the teacher center", tensor="center")
            self.center = tensors["center"].to(self.dtype)
        if self.cls_probe is not None:
            restore_module(self.cls_probe, "probe_cls", tensors)
        load_optimizer_state(self.optimizer, meta["optimizer"], tensors)
        if "rng.torch" not in tensors:
            raise ResumeError("Checkpoint lacks the torch RNG state", tensor="rng.torch")
        torch.set_rng_state(tensors["rng.torch"])
        self.epoch, self.step = int(meta["epoch"]), int(meta["step"])
        self.history = list(meta.get("history", []))
        logger.info(f"Resumed from {path} at epoch {self.epoch}, step {self.step}")


def _truncate_metrics(path, epoch):
    """Keep only metric lines up to ``epoch`` (inclusive) so a resumed run appends cleanly."""
    if not path.exists():
        return
    lines = [line for line in path.read_text().splitlines()
             if line.strip() and json.loads(line)["epoch"] <= epoch]
    path.write_text("".join(line + "\n" for line in lines))


def pretrain(ssl_config, encoder_config, layout, windows, seed, out_dir, resume=None,
             run_meta=None, epochs=None):
    """Run (or resume) pretraining; writes the checkpoint and a JSON-lines metrics log."""
    if len(windows) == 0:
        raise InsufficientDataError("Pretraining needs a non-empty window dataset")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = out_dir / CHECKPOINT_NAME
    metrics_log = out_dir / METRICS_LOG_NAME

    trainer = Pretrainer(ssl_config, encoder_config, layout, windows, seed, run_meta)
    if resume is not None:
        trainer.load(resume)
        _truncate_metrics(metrics_log, trainer.epoch)
    elif metrics_log.exists():
        metrics_log.unlink()

    target = min(epochs or ssl_config.epochs, ssl_config.epochs)
    logger.info(f"Pretraining ({ssl_config.objective}) epochs {trainer.epoch + 1}-{target}, "
                f"{len(windows)} windows, {trainer.steps_per_epoch} steps/epoch")
    while trainer.epoch < target:
        row = trainer.train_epoch()
        with open(metrics_log, "a") as f:
            f.write(json.dumps(row) + "\n")
        entropy = row["teacher_entropy"]
        logger.info(f"  ✓ epoch {row['epoch']}: loss {row['loss_total']:.4f}"
                    + (f", teacher entropy {entropy:.3f}" if entropy is not None else "")
                    + (f", probe acc {row['probe_cls_acc']:.3f}"
                       if row["probe_cls_acc"] is not None else ""))
        if trainer.epoch % ssl_config.checkpoint_every == 0 or trainer.epoch == target:
            trainer.save(checkpoint)
    return PretrainResult(checkpoint, metrics_log, trainer.history)


def load_pretrained_encoder(path, layout, prefer_teacher=True):
    """Rebuild the encoder from a pretraining checkpoint (teacher weights when present)."""
    meta, tensors = load_checkpoint(path)
    if meta.get("kind") != "pretrain":
        raise ResumeError(f"{path} is not a pretraining checkpoint")
    config = EncoderConfig(**meta["encoder"])
    encoder = build_encoder(config, layout)
    prefix = "teacher.encoder" if prefer_teacher and "center" in tensors else "student.encoder"
    restore_module(encoder, prefix, tensors)
    return encoder, meta
