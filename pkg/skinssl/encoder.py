"""
Per-taxel transformer encoder.

Every taxel becomes one token: its 10-frame history of 3-axis flux and 3D
position (60 values) goes through one shared linear map, plus a learned
embedding of the taxel's pad type. There is no positional embedding; where a
taxel is only enters through its position channels, so the encoder is
equivariant to taxel order and the class feature is invariant to it.

Masked views are handled by *removing* tokens. Views of different sizes are
batched by padding ``kept_ids`` and carrying a ``valid`` mask that hides the
padding from attention and pooling.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from skinssl.config import (
    EMBED_DIM,
    ENCODER_HEADS,
    ENCODER_LAYERS,
    MLP_RATIO,
    PAD_TYPES,
    PROTOTYPES_DESK,
    PROTOTYPES_FULL,
    TAXEL_COUNT,
    WINDOW_FRAMES,
)
from skinssl.errors import InvalidInputError, NumericError

logger = logging.getLogger(__name__)

CHANNELS = 6        # 3 flux + 3 position per frame


@dataclass
class EncoderConfig:
    d: int = EMBED_DIM
    layers: int = ENCODER_LAYERS
    heads: int = ENCODER_HEADS
    mlp_ratio: int = MLP_RATIO
    k: int = PROTOTYPES_DESK
    taxels: int = TAXEL_COUNT
    pad_types: int = PAD_TYPES
    window_frames: int = WINDOW_FRAMES
    dropout: float = 0.0
    drop_path: float = 0.0

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise InvalidInputError(f"Token dim {self.d} is not divisible by {self.heads} heads")
        if self.k < 2:
            raise InvalidInputError("Prototype count k must be at least 2")
        if self.layers < 1:
            raise InvalidInputError("Encoder needs at least one layer")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.drop_path < 1.0):
            raise InvalidInputError("dropout and drop_path must lie in [0, 1)")

    @property
    def token_inputs(self):
        return self.window_frames * CHANNELS

    @classmethod
    def tiny(cls, **overrides):
        """Oracle/test size: d=16, 2 layers, 2 heads, k=8."""
        return cls(**{"d": 16, "layers": 2, "heads": 2, "k": 8, **overrides})

    @classmethod
    def desk(cls, **overrides):
        """CPU size: d=64, 4 layers, 2 heads, k=PROTOTYPES_DESK.

        configs/desk.json narrows k to 256 and the lr warmup to 5 of its 50 epochs.
        """
        return cls(**{"d": 64, "layers": 4, "heads": 2, "k": PROTOTYPES_DESK, **overrides})

    @classmethod
    def full(cls, **overrides):
        return cls(**{"k": PROTOTYPES_FULL, **overrides})

    def to_dict(self):
        return asdict(self)


@dataclass
class TokenSequence:
    """Batched tokens (B, n, d) for ``kept_ids`` (B, n); ``valid`` flags real tokens."""

    tokens: torch.Tensor
    class_token: torch.Tensor
    kept_ids: torch.Tensor
    valid: torch.Tensor


@dataclass
class EncoderOutput:
    features: torch.Tensor        # (B, n, d)
    class_feature: torch.Tensor   # (B, d)
    kept_ids: torch.Tensor
    valid: torch.Tensor


def window_features(x, p):
    """Interleave flux and positions per frame: (B, T, N, 3) x2 -> (B, N, T * 6)."""
    if x.shape != p.shape or x.ndim != 4 or x.shape[-1] != 3:
        raise InvalidInputError(f"Window flux {tuple(x.shape)} and positions {tuple(p.shape)} "
                                "must both be (B, T, N, 3)")
    return rearrange(torch.cat([x, p], dim=-1), "b t n c -> b n (t c)")


def full_ids(batch, taxels, device=None):
    ids = torch.arange(taxels, device=device).expand(batch, taxels)
    return ids, torch.ones(batch, taxels, dtype=torch.bool, device=device)


def init_weights(module):
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


# =============================================================================
# BUILDING BLOCKS
# =============================================================================

class DropPath(nn.Module):
    def __init__(self, p=0.0):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = x.new_empty((x.shape[0],) + (1,) * (x.ndim - 1)).bernoulli_(1.0 - self.p)
        return x * keep / (1.0 - self.p)


class Attention(nn.Module):
    def __init__(self, d, heads, dropout=0.0):
        super().__init__()
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, key_padding=None):
        q, k, v = rearrange(self.qkv(x), "b n (three h e) -> three b h n e",
                            three=3, h=self.heads)
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if key_padding is not None:
            scores = scores.masked_fill(key_padding[:, None, None, :], float("-inf"))
        attn = self.drop(scores.softmax(dim=-1))
        return self.proj(rearrange(attn @ v, "b h n e -> b n (h e)"))


class Mlp(nn.Module):
    def __init__(self, d, hidden, dropout=0.0):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(F.gelu(self.fc1(x)))))


class TransformerBlock(nn.Module):
    """Pre-norm block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, d, heads, mlp_ratio=MLP_RATIO, dropout=0.0, drop_path=0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads, dropout)
        self.norm2 = nn.LayerNorm(d)
        self.mlp = Mlp(d, d * mlp_ratio, dropout)
        self.drop_path = DropPath(drop_path)

    def forward(self, x, key_padding=None):
        x = x + self.drop_path(self.attn(self.norm1(x), key_padding))
        return x + self.drop_path(self.mlp(self.norm2(x)))


# =============================================================================
# ENCODER
# =============================================================================

class TaxelTokenizer(nn.Module):
    def __init__(self, config, taxel_pad_types):
        super().__init__()
        self.config = config
        self.f_linear = nn.Linear(config.token_inputs, config.d)
        self.pad_embeddings = nn.Parameter(torch.zeros(config.pad_types, config.d))
        self.register_buffer("taxel_pad_types",
                             torch.as_tensor(taxel_pad_types, dtype=torch.long), persistent=False)

    def forward(self, x, p, kept_ids=None):
        """Tokens for the kept taxels of windows x, p (B, T, N, 3)."""
        feats = window_features(x, p)
        batch, taxels, width = feats.shape
        if taxels != len(self.taxel_pad_types) or width != self.config.token_inputs:
            raise InvalidInputError(
                f"Window has {taxels} taxels x {width} values, encoder expects "
                f"{len(self.taxel_pad_types)} x {self.config.token_inputs}"
            )
        if kept_ids is None:
            kept_ids, _ = full_ids(batch, taxels, feats.device)
        gathered = torch.gather(feats, 1, kept_ids[..., None].expand(-1, -1, width))
        return self.f_linear(gathered) + self.pad_embeddings[self.taxel_pad_types[kept_ids]]


class TactileEncoder(nn.Module):
    def __init__(self, config, taxel_pad_types):
        super().__init__()
        self.config = config
        self.tokenizer = TaxelTokenizer(config, taxel_pad_types)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.d))
        rates = torch.linspace(0, config.drop_path, config.layers).tolist()
        self.blocks = nn.ModuleList([
            TransformerBlock(config.d, config.heads, config.mlp_ratio, config.dropout, rate)
            for rate in rates
        ])
        self.norm = nn.LayerNorm(config.d)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        nn.init.trunc_normal_(self.tokenizer.pad_embeddings, std=0.02)

    @property
    def taxel_count(self):
        return len(self.tokenizer.taxel_pad_types)

    def tokenize(self, x, p, kept_ids=None, valid=None):
        if kept_ids is None:
            kept_ids, valid = full_ids(x.shape[0], self.taxel_count, x.device)
        elif valid is None:
            valid = torch.ones_like(kept_ids, dtype=torch.bool)
        tokens = self.tokenizer(x, p, kept_ids)
        return TokenSequence(tokens, self.cls_token.expand(x.shape[0], -1, -1), kept_ids, valid)

    def encode(self, seq):
        if seq.tokens.shape[1] < 1:
            raise InvalidInputError("encode needs at least one kept token")
        if not torch.isfinite(seq.tokens).all():
            raise NumericError("Non-finite values in encoder input tokens")
        h = torch.cat([seq.class_token, seq.tokens], dim=1)
        cls_slot = torch.zeros_like(seq.valid[:, :1])
        key_padding = torch.cat([cls_slot, ~seq.valid], dim=1)
        for block in self.blocks:
            h = block(h, key_padding)
        h = self.norm(h)
        return EncoderOutput(h[:, 1:], h[:, 0], seq.kept_ids, seq.valid)

    def forward(self, x, p, kept_ids=None, valid=None):
        return self.encode(self.tokenize(x, p, kept_ids, valid))


# =============================================================================
# HEADS
# =============================================================================

class ProjectionHead(nn.Module):
    """d -> d -> d -> k prototype logits, GELU between layers."""

    def __init__(self, d, k):
        super().__init__()
        self.layers = nn.Sequential(nn.Linear(d, d), nn.GELU(), nn.Linear(d, d), nn.GELU(),
                                    nn.Linear(d, k))
        self.apply(init_weights)

    def forward(self, x):
        return self.layers(x)


class AttentivePooler(nn.Module):
    """One learned query cross-attending over feature tokens -> one full-hand vector."""

    def __init__(self, d, heads=1):
        super().__init__()
        if d % heads != 0:
            raise InvalidInputError(f"Pooler dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.scale = (d // heads) ** -0.5
        self.query = nn.Parameter(torch.zeros(1, 1, d))
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.apply(init_weights)
        nn.init.trunc_normal_(self.query, std=0.02)

    def forward(self, features, valid=None):
        if features.shape[1] < 1:
            raise InvalidInputError("Attentive pooling needs at least one feature token")
        q = rearrange(self.q(self.query), "b n (h e) -> b h n e", h=self.heads)
        k = rearrange(self.k(features), "b n (h e) -> b h n e", h=self.heads)
        v = rearrange(self.v(features), "b n (h e) -> b h n e", h=self.heads)
        scores = (q @ k.transpose(-2, -1)) * self.scale              # (B, h, 1, n)
        if valid is not None:
            scores = scores.masked_fill(~valid[:, None, None, :], float("-inf"))
        pooled = rearrange(scores.softmax(dim=-1) @ v, "b h n e -> b (n h e)")
        return self.out(pooled)


def masked_mean(features, valid):
    weights = valid.to(features.dtype)[..., None]
    return (features * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)


def build_encoder(config, layout):
    return TactileEncoder(config, layout.taxel_pad_types)


# =============================================================================
# GRADIENT CHECK
# =============================================================================

@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    n_coords: int
    worst: list

    @property
    def passed(self):
        return self.max_rel_error <= self.tolerance

    def summary(self):
        status = "✓ passed" if self.passed else "✗ FAILED"
        lines = [f"{status}: max relative error {self.max_rel_error:.3e} over "
                 f"{self.n_coords} coordinates (tolerance {self.tolerance:.1e})"]
        for w in self.worst:
            lines.append(f"  param {w['param']} [{w['index']}]: analytic {w['analytic']:.6e}, "
                         f"numeric {w['numeric']:.6e}, rel {w['rel']:.3e}")
        return "\n".join(lines)


def grad_check(loss_fn, params, tolerance=1e-4, n_coords=200, h=1e-5, seed=0,
               floor=1e-5, n_worst=10):
    """Reverse-mode gradients vs central differences on a random coordinate subset.

    ``loss_fn`` takes no arguments and reads ``params`` in place. Relative error
    is |a - n| / max(|a|, |n|, floor).
    """
    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NumericError(f"grad_check: loss is not finite ({loss.item()})")
    analytic = torch.autograd.grad(loss, params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]

    sizes = torch.tensor([p.numel() for p in params])
    total = int(sizes.sum())
    generator = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=generator)[:min(n_coords, total)]
    offsets = torch.cumsum(sizes, 0) - sizes

    results = []
    with torch.no_grad():
        for flat in picks.tolist():
            which = int(torch.searchsorted(offsets, torch.tensor(flat), right=True)) - 1
            index = flat - int(offsets[which])
            view = params[which].view(-1)
            original = view[index].item()
            view[index] = original + h
            plus = loss_fn()
            view[index] = original - h
            minus = loss_fn()
            view[index] = original
            if not (torch.isfinite(plus) and torch.isfinite(minus)):
                raise NumericError(f"grad_check: non-finite loss at param {which}[{index}]")
            numeric = (plus - minus).item() / (2 * h)
            a = analytic[which].view(-1)[index].item()
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            results.append({"param": which, "index": index, "analytic": a,
                            "numeric": numeric, "rel": rel})

    results.sort(key=lambda r: r["rel"], reverse=True)
    report = GradCheckReport(results[0]["rel"] if results else 0.0, tolerance,
                             len(results), results[:n_worst])
    logger.debug(report.summary())
    return report
