"""Portrait conditioning: a multi-scale convolutional encoder, patch partition
and cross-attention injection, plus whole-sample condition dropout."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F


@dataclass
class MultiScaleFeatures:
    """Feature pyramid, channel-first: y1 [B, C, H/2, W/2], y2 [B, 2C, H/4, W/4], y3 [B, 4C, H/8, W/8]."""

    y1: torch.Tensor
    y2: torch.Tensor
    y3: torch.Tensor

    def scales(self) -> list:
        return [self.y1, self.y2, self.y3]

    def __getitem__(self, i: int) -> torch.Tensor:
        return self.scales()[i]

    @property
    def batch(self) -> int:
        return self.y1.shape[0]

    def shapes_hwc(self) -> list:
        return [(y.shape[2], y.shape[3], y.shape[1]) for y in self.scales()]


class ConditionEncoder(nn.Module):
    """Three stride-2 convolution stages; each stage's output is one pyramid level."""

    def __init__(self, feature_channels: int = 8, in_channels: int = 3):
        super().__init__()
        c = feature_channels
        self.feature_channels = c
        self.stages = nn.ModuleList([
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
        ])
        self.null = nn.ParameterList([nn.Parameter(torch.zeros(c * 2 ** i)) for i in range(3)])
        self.calls = 0

    def forward(self, image: torch.Tensor) -> MultiScaleFeatures:
        return self.encode(image)

    def encode(self, image) -> MultiScaleFeatures:
        """``image`` is [B, 3, H, W] (or a single [H, W, 3] array) with H, W divisible by 8."""
        self.calls += 1
        x = as_image_batch(image, dtype=self.stages[0].weight.dtype)
        if x.shape[2] % 8 or x.shape[3] % 8:
            raise ValueError(f"portrait size {tuple(x.shape[2:])} must be divisible by 8")
        outs = []
        h = x
        for i, conv in enumerate(self.stages):
            y = conv(h)
            outs.append(y)
            h = F.silu(y)
        return MultiScaleFeatures(*outs)

    def null_features(self, batch: int, size: tuple) -> MultiScaleFeatures:
        """Learned null tokens broadcast to the pyramid geometry of a ``size`` portrait."""
        h, w = size
        maps = [self.null[i].view(1, -1, 1, 1).expand(batch, -1, h >> (i + 1), w >> (i + 1))
                for i in range(3)]
        return MultiScaleFeatures(*maps)


def as_image_batch(image, dtype=torch.float32) -> torch.Tensor:
    if isinstance(image, torch.Tensor):
        x = image
    else:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[None]
        x = torch.from_numpy(arr[..., :3]).permute(0, 3, 1, 2)
    if x.ndim == 3:
        x = x[None]
    return x.to(dtype)


def patch_partition(y, patch: int = 4):
    """Split [B, C, H, W] into row-major P x P patches: returns [B, K, P*P*C] and (rows, cols).

    Each patch flattens as (row-in-patch, col-in-patch, channel).
    """
    b, c, h, w = y.shape
    if h % patch or w % patch:
        raise ValueError(f"map {h}x{w} is not divisible by patch size {patch}")
    r, q = h // patch, w // patch
    t = y.reshape(b, c, r, patch, q, patch).permute(0, 2, 4, 3, 5, 1)
    return t.reshape(b, r * q, patch * patch * c), (r, q)


def patch_merge(tokens, grid: tuple, patch: int, channels: int):
    """Inverse of :func:`patch_partition`."""
    b = tokens.shape[0]
    r, q = grid
    t = tokens.reshape(b, r, q, patch, patch, channels).permute(0, 5, 1, 3, 2, 4)
    return t.reshape(b, channels, r * patch, q * patch)


class CrossAttention(nn.Module):
    """Residual single-head attention from feature-map tokens to patch tokens.

    Patch tokens receive a learned embedding of their patch index, which can
    be switched off (``mask_positions``) to make the layer order-agnostic.
    """

    def __init__(self, query_channels: int, context_channels: int, n_patches: int, patch: int = 4,
                 width: int = 64, query_norm: bool = True):
        super().__init__()
        self.patch = patch
        self.query_channels = query_channels
        self.context_channels = context_channels
        token_dim = patch * patch * context_channels
        self.token_dim = token_dim
        self.norm = nn.GroupNorm(1, query_channels) if query_norm else nn.Identity()
        self.to_q = nn.Linear(query_channels, width, bias=False)
        self.to_k = nn.Linear(token_dim, width, bias=False)
        self.to_v = nn.Linear(token_dim, width, bias=False)
        self.to_out = nn.Linear(width, query_channels)
        self.pos = nn.Parameter(torch.randn(n_patches, token_dim) * 0.02)
        self.mask_positions = False
        self.last_weights = None

    def attend(self, queries: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
        """``queries`` [B, N, Cq], ``tokens`` [B, K, D] -> attention output [B, N, Cq]."""
        if queries.shape[-1] != self.query_channels or tokens.shape[-1] != self.token_dim:
            raise ValueError("attention input widths do not match the layer")
        if not self.mask_positions:
            if tokens.shape[1] != self.pos.shape[0]:
                raise ValueError(f"expected {self.pos.shape[0]} patches, got {tokens.shape[1]}")
            tokens = tokens + self.pos
        q = self.to_q(queries)
        k = self.to_k(tokens)
        v = self.to_v(tokens)
        logits = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])
        weights = torch.softmax(logits, dim=-1)
        self.last_weights = weights.detach()
        return self.to_out(weights @ v)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        """``x`` [B, Cq, H, W] feature map, ``context`` [B, Cc, h, w] condition map."""
        b, c, h, w = x.shape
        if c != self.query_channels:
            raise ValueError(f"query has {c} channels, layer expects {self.query_channels}")
        tokens, _ = patch_partition(context, self.patch)
        q = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        out = self.attend(q, tokens)
        return x + out.transpose(1, 2).reshape(b, c, h, w)


def dropout_mask(batch: int, rate: float, rng) -> np.ndarray:
    """Boolean mask of samples whose condition is replaced by the null embedding."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("dropout rate must lie in [0, 1]")
    return np.random.default_rng(rng).random(batch) < rate


def condition_dropout(features: MultiScaleFeatures, null: MultiScaleFeatures, rate: float = 0.2,
                      rng=None):
    """Replace the whole condition of each dropped sample (all scales) with the null tokens.

    Returns ``(features, mask)``.
    """
    mask = dropout_mask(features.batch, rate, rng)
    if not mask.any():
        return features, mask
    m = torch.from_numpy(mask).view(-1, 1, 1, 1)
    mixed = [torch.where(m, n.to(y.dtype), y) for y, n in zip(features.scales(), null.scales())]
    return MultiScaleFeatures(*mixed), mask
