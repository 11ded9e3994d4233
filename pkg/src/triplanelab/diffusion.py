"""Cascaded conditional diffusion on rolled-out triplanes.

A low-resolution base model predicts noise; an upsampler predicts the clean
high-resolution triplane from its noised version plus the (augmented)
low-resolution sample, with an extra image-space term computed through the
volumetric renderer.  Both are conditioned on a portrait through patch
cross-attention and sampled with ancestral DDPM and classifier-free guidance.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import decoder as dec
from . import renderer as rd
from .conditioning import (ConditionEncoder, CrossAttention, MultiScaleFeatures, as_image_batch,
                           condition_dropout)
from .schedules import NoiseSchedule
from .triplane import Triplane


# ---------------------------------------------------------------------------
# triplane <-> rolled tensor

def roll(planes) -> torch.Tensor:
    """[3, H, W, C] (or batched [B, 3, H, W, C]) -> channel-first rolled [B, C, H, 3W]."""
    t = torch.as_tensor(planes)
    if t.ndim == 4:
        t = t[None]
    b, _, h, w, c = t.shape
    return t.permute(0, 4, 2, 1, 3).reshape(b, c, h, 3 * w)


def unroll(x: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`roll`: [B, C, H, 3W] -> [B, 3, H, W, C]."""
    b, c, h, w3 = x.shape
    w = w3 // 3
    return x.reshape(b, c, h, 3, w).permute(0, 3, 2, 4, 1)


def _split_planes(x: torch.Tensor) -> torch.Tensor:
    b, c, h, w3 = x.shape
    w = w3 // 3
    return x.reshape(b, c, h, 3, w).permute(0, 3, 1, 2, 4).reshape(b * 3, c, h, w)


def _join_planes(x: torch.Tensor, b: int) -> torch.Tensor:
    _, c, h, w = x.shape
    return x.reshape(b, 3, c, h, w).permute(0, 2, 3, 1, 4).reshape(b, c, h, 3 * w)


def resize_rolled(x: torch.Tensor, size: int) -> torch.Tensor:
    """Per-plane bilinear (upsampling) or area (downsampling) resize of a rolled map."""
    b, _, h, _ = x.shape
    planes = _split_planes(x)
    if size > h:
        planes = F.interpolate(planes, size=(size, size), mode="bilinear", align_corners=True)
    elif size < h:
        planes = F.adaptive_avg_pool2d(planes, (size, size))
    return _join_planes(planes, b)


# ---------------------------------------------------------------------------
# network

@dataclass
class DenoiserConfig:
    resolution: int = 16            # plane side length
    channels: int = 8               # triplane channels
    lr_channels: int = 0            # channels of the concatenated low-resolution condition
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 4)
    res_blocks: int = 2
    self_attention: bool = True     # at the bottleneck
    cross_sites: tuple = (0, 1, 2)  # pyramid level attended by each stage, -1 for none
    mid_cross_level: int = -1       # pyramid level attended at the bottleneck, -1 for none
    time_dim: int = 128
    level_embedding: bool = False
    learned_variance: bool = False
    feature_channels: int = 8       # encoder base width
    portrait_size: int = 64
    patch: int = 4
    attn_width: int = 64
    exchange: bool = True

    def __post_init__(self):
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.cross_sites = tuple(int(s) for s in self.cross_sites)
        if len(self.cross_sites) != len(self.channel_mult):
            raise ValueError("one cross-attention entry per stage is required")
        if self.resolution % (2 ** (len(self.channel_mult) - 1)):
            raise ValueError(f"resolution {self.resolution} does not support "
                             f"{len(self.channel_mult)} stages")
        for level in self.cross_sites + (self.mid_cross_level,):
            if level >= 0 and (self.portrait_size >> (level + 1)) % self.patch:
                raise ValueError(f"pyramid level {level} is not divisible by patch {self.patch}")

    @property
    def out_channels(self) -> int:
        return self.channels * (2 if self.learned_variance else 1)

    def stage_channels(self, s: int) -> int:
        return self.base_channels * self.channel_mult[s]

    def level_channels(self, level: int) -> int:
        return self.feature_channels * 2 ** level

    def level_patches(self, level: int) -> int:
        side = self.portrait_size >> (level + 1)
        return (side // self.patch) ** 2

    def to_kv(self, prefix: str) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f"{prefix}{f.name}"] = ",".join(str(i) for i in v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_kv(cls, kv: dict, prefix: str) -> "DenoiserConfig":
        from .config import coerce
        base = cls()
        vals = {}
        for f in fields(cls):
            key = prefix + f.name
            if key in kv:
                vals[f.name] = coerce(kv[key], getattr(base, f.name))
        return cls(**vals)

    @classmethod
    def base(cls, **kw) -> "DenoiserConfig":
        return cls(**{"resolution": 16, "learned_variance": True, **kw})

    @classmethod
    def upsampler(cls, **kw) -> "DenoiserConfig":
        defaults = {"resolution": 64, "lr_channels": 8, "self_attention": False,
                    "cross_sites": (-1, -1, -1), "mid_cross_level": 0, "level_embedding": True}
        return cls(**{**defaults, **kw})


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of continuous ``t in [0, 1]`` scaled to 1000 steps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = 1000.0 * t[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        a = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        o = (v @ a.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.out(o)


class AxisExchange(nn.Module):
    """Cross-plane communication: pool each plane along its two axes and feed the
    pooled profiles of the shared world axes back into the other planes.

    Plane order is (xy, zx, yz) as (column axis, row axis).  Starts as identity.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv1d(2 * channels, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        b = x.shape[0]
        p = _split_planes(x)
        c, h, w = p.shape[1:]
        p = p.reshape(b, 3, c, h, w)
        over_rows = p.mean(dim=3)  # [B, 3, C, W]: profile along the column axis
        over_cols = p.mean(dim=4)  # [B, 3, C, H]: profile along the row axis
        # world axis profiles, each from the two planes that contain the axis
        ax = torch.cat([over_rows[:, 0], over_cols[:, 1]], dim=1)
        ay = torch.cat([over_cols[:, 0], over_rows[:, 2]], dim=1)
        az = torch.cat([over_rows[:, 1], over_cols[:, 2]], dim=1)
        fx, fy, fz = (self.proj(a) for a in (ax, ay, az))
        add = torch.stack([
            fx[..., None, :] + fy[..., :, None],
            fz[..., None, :] + fx[..., :, None],
            fy[..., None, :] + fz[..., :, None],
        ], dim=1)
        return x + _join_planes((add).reshape(b * 3, c, h, w), b)


class Denoiser(nn.Module):
    """U-Net over a rolled triplane with optional portrait cross-attention."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        td = cfg.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.level_mlp = (nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
                          if cfg.level_embedding else None)
        n = len(cfg.channel_mult)
        self.conv_in = nn.Conv2d(cfg.channels + cfg.lr_channels, cfg.stage_channels(0), 3, padding=1)

        def cross(ch, level):
            if level < 0:
                return None
            return CrossAttention(ch, cfg.level_channels(level), cfg.level_patches(level), cfg.patch,
                                  cfg.attn_width)

        self.down_blocks = nn.ModuleList()
        self.down_cross = nn.ModuleList()
        self.down_exchange = nn.ModuleList()
        self.downsample = nn.ModuleList()
        ch = cfg.stage_channels(0)
        skips = []
        for s in range(n):
            out = cfg.stage_channels(s)
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(ch, out, td))
                ch = out
            self.down_blocks.append(blocks)
            self.down_cross.append(cross(ch, cfg.cross_sites[s]) or nn.Identity())
            self.down_exchange.append(AxisExchange(ch) if cfg.exchange else nn.Identity())
            skips.append(ch)
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1) if s < n - 1 else nn.Identity())
        self.mid1 = ResBlock(ch, ch, td)
        self.mid_attn = SelfAttention(ch) if cfg.self_attention else None
        self.mid_cross = cross(ch, cfg.mid_cross_level)
        self.mid2 = ResBlock(ch, ch, td)
        self.up_blocks = nn.ModuleList()
        self.up_cross = nn.ModuleList()
        self.up_exchange = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for s in reversed(range(n)):
            out = cfg.stage_channels(s)
            blocks = nn.ModuleList()
            cin = ch + skips[s]
            for _ in range(cfg.res_blocks):
                blocks.append(ResBlock(cin, out, td))
                cin = out
            ch = out
            self.up_blocks.append(blocks)
            self.up_cross.append(cross(ch, cfg.cross_sites[s]) or nn.Identity())
            self.up_exchange.append(AxisExchange(ch) if cfg.exchange else nn.Identity())
            self.upsample.append(nn.Conv2d(ch, cfg.stage_channels(s - 1), 3, padding=1) if s > 0 else nn.Identity())
            if s > 0:
                ch = cfg.stage_channels(s - 1)
        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, cfg.out_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _cross(self, layer, h, cond):
        if isinstance(layer, CrossAttention):
            if cond is None:
                raise ValueError("this denoiser needs portrait features (or null features)")
            level = self._level_of(layer)
            return layer(h, cond[level])
        return h

    def _level_of(self, layer) -> int:
        cfg = self.cfg
        if layer is self.mid_cross:
            return cfg.mid_cross_level
        for s, l in enumerate(self.down_cross):
            if l is layer:
                return cfg.cross_sites[s]
        n = len(cfg.channel_mult)
        for i, l in enumerate(self.up_cross):
            if l is layer:
                return cfg.cross_sites[n - 1 - i]
        raise KeyError("unknown cross-attention layer")

    def forward(self, x, t, cond: MultiScaleFeatures | None = None, lr=None, level=None):
        cfg = self.cfg
        b, c, h, w = x.shape
        if c != cfg.channels or h != cfg.resolution or w != 3 * cfg.resolution:
            raise ValueError(f"input {tuple(x.shape[1:])} does not match denoiser resolution "
                             f"{cfg.resolution} with {cfg.channels} channels")
        t = torch.as_tensor(t, dtype=x.dtype).reshape(-1).expand(b)
        emb = self.time_mlp(timestep_embedding(t, cfg.time_dim))
        if self.level_mlp is not None:
            lv = torch.zeros(b, dtype=x.dtype) if level is None else \
                torch.as_tensor(level, dtype=x.dtype).reshape(-1).expand(b)
            emb = emb + self.level_mlp(timestep_embedding(lv, cfg.time_dim))
        if cfg.lr_channels:
            if lr is None:
                raise ValueError("upsampler needs a low-resolution condition")
            x = torch.cat([x, resize_rolled(lr.to(x.dtype), cfg.resolution)], dim=1)
        hcur = self.conv_in(x)
        skips = []
        for s in range(len(cfg.channel_mult)):
            for blk in self.down_blocks[s]:
                hcur = blk(hcur, emb)
            hcur = self._cross(self.down_cross[s], hcur, cond)
            hcur = self.down_exchange[s](hcur)
            skips.append(hcur)
            hcur = self.downsample[s](hcur)
        hcur = self.mid1(hcur, emb)
        if self.mid_attn is not None:
            hcur = self.mid_attn(hcur)
        if self.mid_cross is not None:
            hcur = self._cross(self.mid_cross, hcur, cond)
        hcur = self.mid2(hcur, emb)
        for i, s in enumerate(reversed(range(len(cfg.channel_mult)))):
            hcur = torch.cat([hcur, skips[s]], dim=1)
            for blk in self.up_blocks[i]:
                hcur = blk(hcur, emb)
            hcur = self._cross(self.up_cross[i], hcur, cond)
            hcur = self.up_exchange[i](hcur)
            if s > 0:
                hcur = F.interpolate(hcur, scale_factor=2, mode="nearest")
                hcur = self.upsample[i](hcur)
        return self.conv_out(F.silu(self.norm_out(hcur)))


# ---------------------------------------------------------------------------
# schedule helpers

def _coeffs(schedule: NoiseSchedule, t, dtype=torch.float64, ndim: int = 4):
    a, s = schedule.alpha_sigma(np.asarray(t, dtype=np.float64).reshape(-1))
    shape = (-1,) + (1,) * (ndim - 1)
    return torch.as_tensor(a, dtype=dtype).reshape(shape), torch.as_tensor(s, dtype=dtype).reshape(shape)


def _step_terms(schedule: NoiseSchedule, t, s):
    """alpha_t, sigma_t^2, alpha_s, sigma_s^2, alpha_{t|s}, sigma^2_{t|s} as float64 arrays."""
    gt = np.asarray(schedule.gamma(np.asarray(t, dtype=np.float64)))
    gs = np.asarray(schedule.gamma(np.asarray(s, dtype=np.float64)))
    a_t, a_s = np.sqrt(gt), np.sqrt(gs)
    var_t, var_s = 1.0 - gt, 1.0 - gs
    a_ts = a_t / a_s
    var_ts = var_t - a_ts ** 2 * var_s
    return a_t, var_t, a_s, var_s, a_ts, var_ts


def posterior(schedule: NoiseSchedule, t, s, x_t, x0_hat):
    """Mean and variance of q(x_s | x_t, x0) at ``x0 = x0_hat``."""
    a_t, var_t, a_s, var_s, a_ts, var_ts = _step_terms(schedule, t, s)
    mean = (a_ts * var_s / var_t) * x_t + (a_s * var_ts / var_t) * x0_hat
    return mean, var_ts * var_s / var_t


def posterior_from_eps(schedule: NoiseSchedule, t, s, x_t, eps_hat):
    """Same mean written in terms of the noise estimate (stable when alpha_t is tiny)."""
    a_t, var_t, a_s, var_s, a_ts, var_ts = _step_terms(schedule, t, s)
    mean = (x_t - (var_ts / np.sqrt(var_t)) * eps_hat) / a_ts
    return mean, var_ts * var_s / var_t


# ---------------------------------------------------------------------------
# losses

def _noise(shape, rng, dtype):
    if isinstance(rng, torch.Tensor):
        return rng.to(dtype)
    return torch.as_tensor(np.random.default_rng(rng).standard_normal(shape), dtype=dtype)


def gaussian_kl(mean1, logvar1, mean2, logvar2):
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2)
                  + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def base_loss(denoiser, x0, cond, t, rng, schedule: NoiseSchedule | None = None,
              vlb_weight: float = 1e-3, train_steps: int = 1000, resolution: int | None = None):
    """Noise-prediction loss plus an optional learned-variance bound term.

    ``denoiser(x_t, t, cond)`` returns the noise estimate, or the noise
    estimate stacked with a variance interpolation map along channels.
    ``rng`` is a seed/Generator or an explicit noise tensor.  Returns
    ``(loss, parts)``.
    """
    schedule = schedule or NoiseSchedule.base_default()
    x0 = torch.as_tensor(x0)
    if resolution is not None and x0.shape[2] != resolution:
        raise ValueError(f"base input resolution {x0.shape[2]} differs from {resolution}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1:
        t = np.full(x0.shape[0], t[0])
    eps = _noise(x0.shape, rng, x0.dtype)
    a, s = _coeffs(schedule, t, x0.dtype)
    x_t = a * x0 + s * eps
    out = denoiser(x_t, torch.as_tensor(t, dtype=x0.dtype), cond)
    c = x0.shape[1]
    eps_hat = out[:, :c]
    l_simple = torch.mean((eps_hat - eps) ** 2)
    parts = {"simple": l_simple}
    loss = l_simple
    if out.shape[1] == 2 * c and vlb_weight > 0:
        v = out[:, c:]
        prev = np.maximum(t - 1.0 / train_steps, 0.0)
        a_t, var_t, a_s, var_s, a_ts, var_ts = _step_terms(schedule, t, prev)
        shape = (-1, 1, 1, 1)
        to = lambda arr: torch.as_tensor(np.asarray(arr), dtype=x0.dtype).reshape(shape)
        mean_q = to(a_ts * var_s / var_t) * x_t + to(a_s * var_ts / var_t) * x0
        logvar_q = to(np.log(var_ts * var_s / var_t))
        mean_p = (x_t - to(var_ts / np.sqrt(var_t)) * eps_hat.detach()) / to(a_ts)
        frac = (v + 1.0) / 2.0
        logvar_p = frac * to(np.log(var_ts)) + (1.0 - frac) * logvar_q
        l_vlb = torch.mean(gaussian_kl(mean_q, logvar_q, mean_p, logvar_p)) / math.log(2.0)
        parts["vlb"] = l_vlb
        loss = loss + vlb_weight * l_vlb
    return loss, parts


class _RenderFn(torch.autograd.Function):
    """Volumetric render of a triplane tensor through a frozen numpy decoder."""

    @staticmethod
    def forward(ctx, planes, params, rays, extent, n_samples):
        tp = Triplane(planes.detach().cpu().numpy().astype(np.float64), extent)
        rgba, cache = rd.render_rays(tp, params, rays, None, n_samples)
        ctx.cache = cache
        ctx.dtype = planes.dtype
        return torch.as_tensor(rgba, dtype=planes.dtype)

    @staticmethod
    def backward(ctx, grad):
        g_planes, _ = rd.render_backward(ctx.cache, grad.detach().cpu().numpy().astype(np.float64))
        return torch.as_tensor(g_planes, dtype=ctx.dtype), None, None, None, None


def render_planes(planes: torch.Tensor, params: dec.DecoderParams, rays: rd.RayBatch,
                  extent: float = 1.0, n_samples: int = 48) -> torch.Tensor:
    """Differentiable render of ``planes`` [3, H, W, C]; returns RGBA [R, 4]."""
    return _RenderFn.apply(planes, params, rays, extent, n_samples)


class PerceptualProxy(nn.Module):
    """Three frozen stride-2 convolutions with orthogonal random filters."""

    def __init__(self, widths=(8, 16, 32), seed: int = 1234):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        cin = 3
        for w in widths:
            conv = nn.Conv2d(cin, w, 3, stride=2, padding=1, bias=False)
            flat = torch.randn(max(w, cin * 9), max(w, cin * 9), generator=gen, dtype=torch.float64)
            q, _ = torch.linalg.qr(flat)
            conv.weight.data.copy_(q[:w, :cin * 9].reshape(w, cin, 3, 3).to(torch.float32))
            conv.weight.requires_grad_(False)
            self.convs.append(conv)
            cin = w

    def forward(self, img):
        feats = []
        h = img
        for conv in self.convs:
            h = F.silu(F.conv2d(h, conv.weight.to(h.dtype), stride=2, padding=1))
            feats.append(h)
        return feats


@dataclass
class RenderTarget:
    """Supervision for the image term: rays of one patch, its RGB target and the frozen decoder."""

    params: dec.DecoderParams
    rays: rd.RayBatch
    patch_shape: tuple      # (rows, cols) of the patch
    scale: float = 1.0      # triplane = scale * normalized tensor
    extent: float = 1.0
    n_samples: int = 48


def image_loss(x0_hat_rolled: torch.Tensor, target: RenderTarget, proxy: PerceptualProxy):
    """Pixel MSE and perceptual-proxy distance of a rendered patch against its target."""
    planes = unroll(x0_hat_rolled)[0] * target.scale
    rgba = render_planes(planes, target.params, target.rays, target.extent, target.n_samples)
    ph, pw = target.patch_shape
    pred = rgba[:, :3].T.reshape(1, 3, ph, pw)
    gt = torch.as_tensor(np.asarray(target.rays.target)[:, :3].T.reshape(1, 3, ph, pw), dtype=pred.dtype)
    l_pix = torch.mean((pred - gt) ** 2)
    l_perc = sum(torch.mean((a - b) ** 2) for a, b in zip(proxy(pred), proxy(gt)))
    return l_pix, l_perc


def upsample_loss(denoiser, x0_hr, x0_lr, cond, t, rng, schedule: NoiseSchedule | None = None,
                  render: RenderTarget | None = None, w_img: float = 0.1, proxy=None, level=None):
    """Clean-triplane regression for the upsampler plus the rendered-patch term.

    ``denoiser(x_t, t, cond, lr, level)`` returns the clean estimate.  The
    image term uses the first sample of the batch.  Returns ``(loss, parts)``.
    """
    schedule = schedule or NoiseSchedule.upsample_default()
    if w_img > 0 and render is None:
        raise ValueError("image-space supervision needs a renderer target")
    x0_hr = torch.as_tensor(x0_hr)
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if t.size == 1:
        t = np.full(x0_hr.shape[0], t[0])
    eps = _noise(x0_hr.shape, rng, x0_hr.dtype)
    a, s = _coeffs(schedule, t, x0_hr.dtype)
    x_t = a * x0_hr + s * eps
    x_hat = denoiser(x_t, torch.as_tensor(t, dtype=x0_hr.dtype), cond, x0_lr, level)
    l_x0 = torch.mean((x_hat - x0_hr) ** 2)
    parts = {"x0": l_x0}
    loss = l_x0
    if w_img > 0:
        proxy = proxy or PerceptualProxy()
        l_pix, l_perc = image_loss(x_hat[:1], render, proxy)
        parts.update(pixel=l_pix, perceptual=l_perc)
        loss = loss + w_img * (l_pix + l_perc)
    return loss, parts


def cond_augment(x_lr, level, rng, schedule: NoiseSchedule | None = None):
    """Noise the low-resolution condition at ``level`` (a base-schedule time).

    Zero level leaves a sample untouched.  Returns ``(augmented, level)``.
    """
    schedule = schedule or NoiseSchedule.base_default()
    x_lr = torch.as_tensor(x_lr)
    level = np.asarray(level, dtype=np.float64).reshape(-1)
    if level.size == 1:
        level = np.full(x_lr.shape[0], level[0])
    if np.any(level < 0) or np.any(level > 1):
        raise ValueError("augmentation level must lie in [0, 1]")
    eps = _noise(x_lr.shape, rng, x_lr.dtype)
    a, s = _coeffs(schedule, level, x_lr.dtype)
    noised = a * x_lr + s * eps
    keep = torch.as_tensor(level == 0).reshape(-1, 1, 1, 1)
    return torch.where(keep, x_lr, noised), level


# ---------------------------------------------------------------------------
# sampling

def ddpm_sample(model_fn, shape, schedule: NoiseSchedule, steps: int, rng, parameterization: str = "eps",
                guidance: float = 0.0, dtype=np.float64, x_init=None, clip: float | None = None):
    """Ancestral sampling over ``steps`` uniformly spaced times; the last step returns the clean estimate.

    ``model_fn(x_t, t, conditional)`` returns the prediction (numpy) for the
    conditional (True) or null (False) branch; with ``guidance = w`` the two
    are combined as ``(1 + w) * cond - w * uncond``.

    With ``clip`` the clean estimate is clamped to ``[-clip, clip]`` before
    the posterior step.  At negative logSNR a noise-estimate error reaches the
    clean estimate multiplied by sigma/alpha, so a learned model otherwise
    drifts outside the data range.
    """
    if steps < 1:
        raise ValueError("at least one sampling step is required")
    if parameterization not in ("eps", "x0"):
        raise ValueError(f"unknown parameterization {parameterization!r}")
    rng = np.random.default_rng(rng)
    x = rng.standard_normal(shape).astype(dtype) if x_init is None else np.array(x_init, dtype=dtype)
    for i in range(steps, 0, -1):
        t, s = i / steps, (i - 1) / steps
        pred = np.asarray(model_fn(x, t, True), dtype=dtype)
        if guidance != 0.0:
            pred_u = np.asarray(model_fn(x, t, False), dtype=dtype)
            pred = (1.0 + guidance) * pred - guidance * pred_u
        if parameterization == "eps" and clip is None:
            a_t, s_t = schedule.alpha_sigma(t)
            if i == 1:
                x = (x - s_t * pred) / a_t
                break
            mean, var = posterior_from_eps(schedule, t, s, x, pred)
        else:
            if parameterization == "eps":
                a_t, s_t = schedule.alpha_sigma(t)
                pred = (x - s_t * pred) / a_t
            if clip is not None:
                pred = np.clip(pred, -clip, clip)
            if i == 1:
                x = pred
                break
            mean, var = posterior(schedule, t, s, x, pred)
        x = mean + np.sqrt(var) * rng.standard_normal(shape)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite sample at t={t}")
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite final sample")
    return x


# ---------------------------------------------------------------------------
# cascade

@dataclass
class Cascade:
    encoder: ConditionEncoder | None
    base: Denoiser | None
    upsampler: Denoiser | None
    base_schedule: NoiseSchedule = field(default_factory=NoiseSchedule.base_default)
    upsample_schedule: NoiseSchedule = field(default_factory=NoiseSchedule.upsample_default)
    scale: float = 1.0              # triplane values = scale * network space
    extent: float = 1.0
    decoder: dec.DecoderParams | None = None
    # largest |value| of each stage's training data in network space, used to clip samples
    base_bound: float | None = None
    upsample_bound: float | None = None

    def __post_init__(self):
        if self.base_schedule.kind != "cosine_adjusted" or self.upsample_schedule.kind != "sigmoid":
            raise ValueError("the base stage uses a cosine_adjusted schedule and the upsampler a sigmoid one")

    @classmethod
    def create(cls, base_cfg: DenoiserConfig, up_cfg: DenoiserConfig, seed: int = 0, **kw) -> "Cascade":
        torch.manual_seed(seed)
        enc = ConditionEncoder(base_cfg.feature_channels)
        return cls(enc, Denoiser(base_cfg), Denoiser(up_cfg), **kw)

    def check(self):
        missing = [n for n in ("encoder", "base", "upsampler", "decoder") if getattr(self, n) is None]
        if missing:
            raise ValueError(f"cascade is missing: {', '.join(missing)}")


def encode_portrait(cascade: Cascade, portrait, batch: int = 1):
    """Features for a portrait, or ``None`` for the unconditional path."""
    if portrait is None:
        return None
    with torch.no_grad():
        feats = cascade.encoder.encode(as_image_batch(portrait))
    if feats.batch != batch:
        feats = MultiScaleFeatures(*(y.expand(batch, -1, -1, -1) for y in feats.scales()))
    return feats


def _null(cascade: Cascade, batch: int) -> MultiScaleFeatures:
    size = cascade.base.cfg.portrait_size
    return cascade.encoder.null_features(batch, (size, size))


def _denoise_fn(net: Denoiser, cond, null, lr=None, level=None):
    dtype = next(net.parameters()).dtype

    def fn(x, t, conditional):
        with torch.no_grad():
            xt = torch.as_tensor(x, dtype=dtype)
            c = cond if (conditional and cond is not None) else null
            out = net(xt, torch.full((xt.shape[0],), t, dtype=dtype), c, lr, level)
        return out[:, :net.cfg.channels].double().numpy()
    return fn


@dataclass
class Generation:
    triplane: Triplane
    lowres: Triplane
    renders: list = field(default_factory=list)
    cameras: list = field(default_factory=list)


def generate(cascade: Cascade, portrait, rng, guidance: float = 1.0, base_steps: int = 1000,
             upsample_steps: int = 100, s_infer: float = 0.1, n_views: int = 8,
             render_resolution: int = 64, n_samples: int = 64) -> Generation:
    """Base sample, augmented, upsampled, then rendered on a turntable."""
    from .scenegen import turntable_cameras

    cascade.check()
    rng = np.random.default_rng(rng)
    seeds = rng.integers(0, 2 ** 63, size=3)
    cond = encode_portrait(cascade, portrait)
    null = _null(cascade, 1)
    bc, uc = cascade.base.cfg, cascade.upsampler.cfg
    lr = ddpm_sample(_denoise_fn(cascade.base, cond, null), (1, bc.channels, bc.resolution, 3 * bc.resolution),
                     cascade.base_schedule, base_steps, seeds[0], "eps", guidance, clip=cascade.base_bound)
    lr_t, lvl = cond_augment(torch.as_tensor(lr, dtype=torch.float32), s_infer, seeds[1],
                             cascade.base_schedule)
    hr = ddpm_sample(_denoise_fn(cascade.upsampler, cond, null, lr_t, torch.as_tensor(lvl, dtype=torch.float32)),
                     (1, uc.channels, uc.resolution, 3 * uc.resolution), cascade.upsample_schedule,
                     upsample_steps, seeds[2], "x0", guidance, clip=cascade.upsample_bound)
    tp_hr = Triplane(unroll(torch.as_tensor(hr))[0].numpy() * cascade.scale, cascade.extent)
    tp_lr = Triplane(unroll(torch.as_tensor(lr))[0].numpy() * cascade.scale, cascade.extent)
    out = Generation(tp_hr, tp_lr)
    grid = rd.warm_grid(tp_hr, cascade.decoder, passes=16)
    for cam in turntable_cameras(n_views, render_resolution):
        out.renders.append(rd.render_image(tp_hr, cascade.decoder, cam, grid, n_samples))
        out.cameras.append(cam)
    return out


# ---------------------------------------------------------------------------
# training

def normalize_triplanes(triplanes) -> float:
    """Single global scale mapping fitted triplanes to unit standard deviation."""
    vals = np.concatenate([np.asarray(tp.planes, dtype=np.float64).ravel() for tp in triplanes])
    return float(vals.std())


def _rolled_batch(triplanes, scale: float, dtype=torch.float32) -> torch.Tensor:
    return torch.cat([roll(np.asarray(tp.planes, dtype=np.float64) / scale) for tp in triplanes]).to(dtype)


def lowres_of(hr: torch.Tensor, resolution: int) -> torch.Tensor:
    return resize_rolled(hr, resolution)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.2
    vlb_weight: float = 1e-3
    w_img: float = 0.1
    s_max: float = 0.5
    patch: int = 16           # rendered patch side for the image term
    render_samples: int = 32


def train_base(cascade: Cascade, hr_triplanes, portraits, cfg: TrainConfig, seed: int = 0,
               callback=None) -> list:
    """Train the base model and the portrait encoder jointly; returns the loss trace."""
    from .config import stream

    torch.manual_seed(seed)
    rng = stream(seed, "noise")
    drop_rng = stream(seed, "dropout")
    data_rng = stream(seed, "data")
    net, enc = cascade.base, cascade.encoder
    x_hr = _rolled_batch(hr_triplanes, cascade.scale)
    x0_all = lowres_of(x_hr, net.cfg.resolution)
    cascade.base_bound = float(x0_all.abs().max())
    imgs = torch.cat([as_image_batch(p) for p in portraits])
    opt = torch.optim.AdamW(list(net.parameters()) + list(enc.parameters()), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    trace = []
    size = imgs.shape[2]
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(x0_all), size=cfg.batch)
        x0 = x0_all[idx]
        feats = enc.encode(imgs[idx])
        feats, _ = condition_dropout(feats, enc.null_features(cfg.batch, (size, size)), cfg.dropout, drop_rng)
        t = rng.random(cfg.batch)
        loss, _ = base_loss(lambda x, tt, c: net(x, tt, c), x0, feats, t, rng, cascade.base_schedule,
                            cfg.vlb_weight)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if callback is not None:
            callback(step, trace[-1])
    return trace


def train_upsampler(cascade: Cascade, hr_triplanes, portraits, cfg: TrainConfig, datasets=None,
                    seed: int = 0, callback=None) -> list:
    """Train the upsampler with a frozen encoder; ``datasets`` supply image-term patches."""
    from .config import stream

    torch.manual_seed(seed)
    rng = stream(seed, "noise")
    drop_rng = stream(seed, "dropout")
    data_rng = stream(seed, "data")
    net, enc = cascade.upsampler, cascade.encoder
    x_hr = _rolled_batch(hr_triplanes, cascade.scale)
    x_lr = lowres_of(x_hr, cascade.base.cfg.resolution)
    cascade.upsample_bound = float(x_hr.abs().max())
    imgs = torch.cat([as_image_batch(p) for p in portraits])
    size = imgs.shape[2]
    with torch.no_grad():
        feats_all = enc.encode(imgs)
    proxy = PerceptualProxy()
    use_img = cfg.w_img > 0
    if use_img and (datasets is None or cascade.decoder is None):
        raise ValueError("image-space supervision needs datasets and the frozen decoder")
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    trace = []
    for step in range(cfg.steps):
        idx = data_rng.integers(0, len(x_hr), size=cfg.batch)
        feats = MultiScaleFeatures(*(y[idx] for y in feats_all.scales()))
        feats, _ = condition_dropout(feats, enc.null_features(cfg.batch, (size, size)), cfg.dropout, drop_rng)
        level = rng.random(cfg.batch) * cfg.s_max
        lr_aug, level = cond_augment(x_lr[idx], level, rng, cascade.base_schedule)
        target = None
        if use_img:
            target = _patch_target(datasets[idx[0]], cascade, cfg, data_rng)
        t = rng.random(cfg.batch)
        lv = torch.as_tensor(level, dtype=torch.float32)
        loss, _ = upsample_loss(lambda x, tt, c, lr, l: net(x, tt, c, lr, l), x_hr[idx], lr_aug, feats, t, rng,
                                cascade.upsample_schedule, target, cfg.w_img, proxy, lv)
        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append(loss.item())
        if callback is not None:
            callback(step, trace[-1])
    return trace


def _patch_target(dataset, cascade: Cascade, cfg: TrainConfig, rng) -> RenderTarget:
    views = dataset.train_views
    v = int(views[rng.integers(0, len(views))])
    cam = dataset.cameras[v]
    p = cfg.patch
    r0 = int(rng.integers(0, cam.height - p + 1))
    c0 = int(rng.integers(0, cam.width - p + 1))
    rows, cols = np.meshgrid(np.arange(r0, r0 + p), np.arange(c0, c0 + p), indexing="ij")
    pixels = np.stack([rows.ravel(), cols.ravel()], axis=1)
    rays = rd.generate_rays(cam, pixels)
    img = dataset.images[v]
    rays.target = img[pixels[:, 0], pixels[:, 1]]
    return RenderTarget(cascade.decoder, rays, (p, p), cascade.scale, cascade.extent, cfg.render_samples)


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"CASC"
_VERSION = 1


def _state_bytes(module: nn.Module) -> bytes:
    buf = io.BytesIO()
    state = module.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        kind = b"f8" if arr.dtype == np.float64 else b"f4"
        arr = arr.astype("<" + kind.decode())
        key = name.encode()
        buf.write(struct.pack("<I", len(key)) + key + kind)
        buf.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _load_state(module: nn.Module, data: bytes) -> None:
    pos = 0
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(n):
        (klen,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + klen].decode()
        pos += klen
        kind = data[pos:pos + 2].decode()
        pos += 2
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<" + kind, count=count, offset=pos).reshape(shape)
        pos += arr.nbytes
        state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(state)


def save_cascade(cascade: Cascade, path) -> None:
    """Section-tagged container, written to a temporary file then renamed."""
    from .config import format_kv

    meta = {"base_schedule": cascade.base_schedule.describe(),
            "upsample_schedule": cascade.upsample_schedule.describe(),
            "scale": cascade.scale, "extent": cascade.extent,
            "encoder_channels": cascade.encoder.feature_channels if cascade.encoder else 0}
    for name in ("base_bound", "upsample_bound"):
        if getattr(cascade, name) is not None:
            meta[name] = getattr(cascade, name)
    if cascade.base is not None:
        meta.update(cascade.base.cfg.to_kv("base."))
    if cascade.upsampler is not None:
        meta.update(cascade.upsampler.cfg.to_kv("up."))
    sections = [(b"META", format_kv(meta).encode())]
    for tag, mod in ((b"ENCD", cascade.encoder), (b"BASE", cascade.base), (b"UPSM", cascade.upsampler)):
        if mod is not None:
            sections.append((tag, _state_bytes(mod)))
    if cascade.decoder is not None:
        sections.append((b"DECO", dec.decoder_to_bytes(cascade.decoder)))
    body = b"".join(tag + struct.pack("<Q", len(p)) + p for tag, p in sections)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_MAGIC + struct.pack("<I", _VERSION) + body)
    tmp.replace(path)


def load_cascade(path) -> Cascade:
    from .config import parse_kv

    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a cascade checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, sections = 8, {}
    while pos < len(data):
        tag = data[pos:pos + 4]
        (n,) = struct.unpack_from("<Q", data, pos + 4)
        sections[tag] = data[pos + 12:pos + 12 + n]
        pos += 12 + n
    if b"META" not in sections:
        raise ValueError(f"{path}: checkpoint has no metadata section")
    meta = parse_kv(sections[b"META"].decode())
    cascade = Cascade(None, None, None, NoiseSchedule.parse(meta["base_schedule"]),
                      NoiseSchedule.parse(meta["upsample_schedule"]), float(meta["scale"]),
                      float(meta["extent"]))
    for name in ("base_bound", "upsample_bound"):
        if name in meta:
            setattr(cascade, name, float(meta[name]))
    if b"ENCD" in sections:
        cascade.encoder = ConditionEncoder(int(meta["encoder_channels"]))
        _load_state(cascade.encoder, sections[b"ENCD"])
    if b"BASE" in sections:
        cascade.base = Denoiser(DenoiserConfig.from_kv(meta, "base."))
        _load_state(cascade.base, sections[b"BASE"])
    if b"UPSM" in sections:
        cascade.upsampler = Denoiser(DenoiserConfig.from_kv(meta, "up."))
        _load_state(cascade.upsampler, sections[b"UPSM"])
    if b"DECO" in sections:
        cascade.decoder = dec.decoder_from_bytes(sections[b"DECO"])
    return cascade
