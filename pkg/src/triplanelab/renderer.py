"""Differentiable volume rendering of triplane fields with an occupancy grid.

Compositing follows the usual emission-absorption model::

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    rgb     = sum_i T_i alpha_i c_i + T_N * background
    alpha   = 1 - T_N

Everything outside ``[-extent, extent]^3`` has zero density.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import decoder as dec
from .triplane import Triplane, bilinear_lookup, gather, scatter

NEAR_FACTOR = 0.1
FAR_FACTOR = 4.0
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


class StaleCacheError(RuntimeError):
    """Raised when a render cache no longer matches the tensors it was built from."""


@dataclass
class CameraConfig:
    position: tuple
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    fov_y: float = np.deg2rad(45.0)
    width: int = 64
    height: int = 64

    def __post_init__(self):
        self.position = tuple(float(v) for v in self.position)
        self.look_at = tuple(float(v) for v in self.look_at)
        self.up = tuple(float(v) for v in self.up)
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError(f"fov_y must lie in (0, pi), got {self.fov_y}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        fwd = np.subtract(self.look_at, self.position)
        if np.linalg.norm(np.cross(self.up, fwd)) <= 1e-12:
            raise ValueError("degenerate camera: up is parallel to the view axis")

    def basis(self):
        """Unit (right, up, forward) vectors of the camera frame in world space."""
        fwd = np.subtract(self.look_at, self.position)
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        right = right / np.linalg.norm(right)
        up = np.cross(right, fwd)
        return right, up, fwd


@dataclass
class RayBatch:
    origins: np.ndarray     # [R, 3]
    directions: np.ndarray  # [R, 3], unit norm
    pixels: np.ndarray      # [R, 2] (row, col), or [R, 3] (view, row, col)
    target: np.ndarray | None = None  # [R, 4]

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> "RayBatch":
        return RayBatch(self.origins[idx], self.directions[idx], self.pixels[idx],
                        None if self.target is None else self.target[idx])


def all_pixels(cam: CameraConfig) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    return np.stack([rows.ravel(), cols.ravel()], axis=1)


def generate_rays(cam: CameraConfig, pixels=None) -> RayBatch:
    """Pinhole rays through pixel centers; ``pixels`` is an [P, 2] array of (row, col)."""
    px = all_pixels(cam) if pixels is None else np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    if px.size and (px.min() < 0 or np.any(px[:, 0] >= cam.height) or np.any(px[:, 1] >= cam.width)):
        raise ValueError("pixel index outside the image")
    right, up, fwd = cam.basis()
    tan_half = np.tan(cam.fov_y / 2.0)
    aspect = cam.width / cam.height
    x = ((px[:, 1] + 0.5) / cam.width * 2.0 - 1.0) * tan_half * aspect
    y = (1.0 - (px[:, 0] + 0.5) / cam.height * 2.0) * tan_half
    d = fwd[None] + x[:, None] * right[None] + y[:, None] * up[None]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(np.asarray(cam.position), d.shape).copy()
    return RayBatch(o, d, px)


@dataclass
class OccupancyGrid:
    resolution: int = 32
    extent: float = 1.0
    threshold: float = 1e-3
    decay: float = 0.95
    density: np.ndarray = None
    updates: int = 0

    def __post_init__(self):
        if self.density is None:
            self.density = np.zeros((self.resolution,) * 3)

    @property
    def occupied(self) -> np.ndarray:
        return self.density > self.threshold

    @classmethod
    def full(cls, resolution: int = 32, extent: float = 1.0, **kw) -> "OccupancyGrid":
        grid = cls(resolution, extent, **kw)
        grid.density[:] = np.inf
        return grid

    def cell_index(self, points) -> np.ndarray:
        g = self.resolution
        idx = np.floor((np.asarray(points) + self.extent) / (2.0 * self.extent) * g).astype(np.int64)
        return np.clip(idx, 0, g - 1)

    def query(self, points) -> np.ndarray:
        idx = self.cell_index(points)
        return self.occupied[idx[..., 0], idx[..., 1], idx[..., 2]]

    def cell_centers(self, rng=None) -> np.ndarray:
        g = self.resolution
        ii = np.stack(np.meshgrid(*(np.arange(g),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        offset = 0.5 if rng is None else rng.random(ii.shape)
        return (ii + offset) / g * 2.0 * self.extent - self.extent


def in_box(points, extent: float) -> np.ndarray:
    return np.all(np.abs(points) <= extent, axis=-1)


def stratified_samples(n_rays: int, n_samples: int, near: float, far: float, rng=None):
    """Sample depths [R, S] and interval lengths [R, S].

    Without ``rng`` the samples sit at bin midpoints, which makes rendering
    deterministic for evaluation and gradient checks.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if not near < far:
        raise ValueError(f"near ({near}) must be smaller than far ({far})")
    edges = np.linspace(near, far, n_samples + 1)
    width = edges[1] - edges[0]
    u = np.full((n_rays, n_samples), 0.5) if rng is None else rng.random((n_rays, n_samples))
    t = edges[None, :-1] + u * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    return t, delta


def composite(sigma, rgb, delta, background):
    """Alpha compositing; returns (rgba [R,4], T_excl [R,S], weights [R,S], T_final [R])."""
    s = sigma * delta
    cum = np.cumsum(s, axis=1)
    excl = np.zeros_like(cum)
    excl[:, 1:] = cum[:, :-1]
    t_excl = np.exp(-excl)
    t_final = np.exp(-cum[:, -1])
    weights = t_excl * -np.expm1(-s)
    bg = np.asarray(background, dtype=np.float64)
    color = np.einsum("rs,rsc->rc", weights, rgb) + t_final[:, None] * bg[None]
    rgba = np.concatenate([color, (1.0 - t_final)[:, None]], axis=1)
    return rgba, t_excl, weights, t_final


def composite_backward(d_rgba, sigma, rgb, delta, background, t_excl, weights, t_final):
    """Gradients of compositing w.r.t. per-sample density and color."""
    d_rgb_out = d_rgba[:, :3]
    d_alpha = d_rgba[:, 3]
    s = sigma * delta
    bg = np.asarray(background, dtype=np.float64)
    d_c = weights[..., None] * d_rgb_out[:, None, :]
    wc = weights[..., None] * rgb  # [R, S, 3]
    # sum_{i>k} w_i c_i
    suffix = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1] - wc
    t_next = t_excl * np.exp(-s)
    dC_ds = t_next[..., None] * rgb - suffix - (t_final[:, None, None] * bg[None, None])
    d_s = np.einsum("rsc,rc->rs", dC_ds, d_rgb_out) + d_alpha[:, None] * t_final[:, None]
    return d_s * delta, d_c


def _fingerprint(arr: np.ndarray) -> int:
    return zlib.crc32(np.ascontiguousarray(arr).view(np.uint8))


@dataclass
class RenderCache:
    tp: Triplane
    params: dec.DecoderParams
    tp_crc: int
    params_crc: int
    keep: np.ndarray            # flat indices of evaluated samples
    lookup: object
    dec_cache: object
    logits: np.ndarray
    out: object
    sigma: np.ndarray           # [R, S]
    rgb: np.ndarray             # [R, S, 3]
    delta: np.ndarray
    t_excl: np.ndarray
    weights: np.ndarray
    t_final: np.ndarray
    background: tuple


def _sample_points(rays: RayBatch, extent: float, n_samples: int, rng, near, far):
    near = NEAR_FACTOR * extent if near is None else near
    far = FAR_FACTOR * extent if far is None else far
    t, delta = stratified_samples(len(rays), n_samples, near, far, rng)
    pts = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    return pts, delta


def _keep_mask(pts, extent, grid: OccupancyGrid | None):
    mask = in_box(pts, extent)
    if grid is not None:
        mask &= grid.query(pts)
    return mask


def render_rays(tp: Triplane, params: dec.DecoderParams, rays: RayBatch,
                grid: OccupancyGrid | None = None, n_samples: int = 64, rng=None,
                near: float | None = None, far: float | None = None,
                background=DEFAULT_BACKGROUND):
    """Render RGBA for each ray; returns ``(rgba [R, 4], RenderCache)``."""
    pts, delta = _sample_points(rays, tp.extent, n_samples, rng, near, far)
    r, s = delta.shape
    keep = np.flatnonzero(_keep_mask(pts, tp.extent, grid))
    lookup = bilinear_lookup(tp, pts.reshape(-1, 3)[keep])
    feats = gather(tp, lookup)
    logits, dcache = dec.forward_raw(params, feats)
    out = dec.heads(logits)
    sigma = np.zeros(r * s)
    rgb = np.zeros((r * s, 3))
    sigma[keep] = out.sigma
    rgb[keep] = out.rgb
    sigma = sigma.reshape(r, s)
    rgb = rgb.reshape(r, s, 3)
    rgba, t_excl, weights, t_final = composite(sigma, rgb, delta, background)
    cache = RenderCache(tp, params, _fingerprint(tp.planes), _fingerprint(params.flatten()),
                        keep, lookup, dcache, logits, out, sigma, rgb, delta,
                        t_excl, weights, t_final, tuple(background))
    return rgba, cache


def render_backward(cache: RenderCache, d_rgba):
    """Reverse pass of :func:`render_rays`: ``(grad_planes, grad_params_flat)``."""
    if (_fingerprint(cache.tp.planes) != cache.tp_crc
            or _fingerprint(cache.params.flatten()) != cache.params_crc):
        raise StaleCacheError("triplane or decoder changed since the forward pass")
    d_rgba = np.asarray(d_rgba, dtype=np.float64)
    d_sigma, d_c = composite_backward(d_rgba, cache.sigma, cache.rgb, cache.delta,
                                      cache.background, cache.t_excl, cache.weights,
                                      cache.t_final)
    d_sigma = d_sigma.reshape(-1)[cache.keep]
    d_c = d_c.reshape(-1, 3)[cache.keep]
    g_logits = dec.heads_backward(cache.logits, cache.out, d_sigma, d_c)
    g_params, g_feat = dec.backward_raw(cache.params, cache.dec_cache, g_logits)
    g_planes = scatter(cache.tp, cache.lookup, g_feat)
    return g_planes, g_params


FieldFn = Callable[[np.ndarray], tuple]


def triplane_field(tp: Triplane, params: dec.DecoderParams) -> FieldFn:
    def fn(points):
        out = dec.decode(params, gather(tp, bilinear_lookup(tp, points)))
        return out.sigma, out.rgb
    return fn


def render_field(field_fn: FieldFn, rays: RayBatch, extent: float = 1.0,
                 grid: OccupancyGrid | None = None, n_samples: int = 64, rng=None,
                 near: float | None = None, far: float | None = None,
                 background=DEFAULT_BACKGROUND) -> np.ndarray:
    """Forward-only render of an arbitrary ``points -> (sigma, rgb)`` field."""
    pts, delta = _sample_points(rays, extent, n_samples, rng, near, far)
    r, s = delta.shape
    keep = np.flatnonzero(_keep_mask(pts, extent, grid))
    sigma = np.zeros(r * s)
    rgb = np.zeros((r * s, 3))
    if keep.size:
        sig, col = field_fn(pts.reshape(-1, 3)[keep])
        sigma[keep] = sig
        rgb[keep] = col
    rgba, *_ = composite(sigma.reshape(r, s), rgb.reshape(r, s, 3), delta, background)
    return rgba


def update_occupancy_field(field_fn: FieldFn, grid: OccupancyGrid, rng=None) -> OccupancyGrid:
    """One occupancy pass: ``density <- max(decay * density, sigma(jittered centers))``."""
    pts = grid.cell_centers(rng)
    sigma, _ = field_fn(pts)
    fresh = np.asarray(sigma, dtype=np.float64).reshape((grid.resolution,) * 3)
    grid.density = np.maximum(grid.density * grid.decay, fresh)
    grid.updates += 1
    return grid


def update_occupancy(tp: Triplane, params: dec.DecoderParams, grid: OccupancyGrid,
                     rng=None) -> OccupancyGrid:
    return update_occupancy_field(triplane_field(tp, params), grid, rng)


def warm_grid(tp: Triplane, params: dec.DecoderParams, resolution: int = 32, passes: int = 16,
              rng=None, **kw) -> OccupancyGrid:
    """Build a grid for a triplane with no history by repeated updates from zero."""
    grid = OccupancyGrid(resolution, tp.extent, **kw)
    rng = np.random.default_rng(rng)
    for _ in range(passes):
        update_occupancy(tp, params, grid, rng)
    return grid


def render_loss(pred, target):
    """Mean squared error over RGBA and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


def render_image(tp: Triplane, params: dec.DecoderParams, cam: CameraConfig,
                 grid: OccupancyGrid | None = None, n_samples: int = 64,
                 chunk: int = 4096, background=DEFAULT_BACKGROUND) -> np.ndarray:
    rays = generate_rays(cam)
    fn = triplane_field(tp, params)
    out = np.empty((len(rays), 4))
    for start in range(0, len(rays), chunk):
        sl = slice(start, start + chunk)
        out[sl] = render_field(fn, rays.subset(sl), tp.extent, grid, n_samples,
                               background=background)
    return out.reshape(cam.height, cam.width, 4)


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(img, path) -> None:
    from PIL import Image

    arr = to_uint8(img)
    if arr.ndim != 3 or arr.shape[-1] not in (3, 4):
        raise ValueError(f"expected an RGB or RGBA image, got shape {arr.shape}")
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0


def save_ppm(img, path) -> None:
    arr = to_uint8(np.asarray(img)[..., :3])
    h, w, _ = arr.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + arr.tobytes())


def write_render_manifest(cams, path) -> None:
    vec = lambda v: " ".join(repr(float(x)) for x in v)
    lines = []
    for i, c in enumerate(cams):
        lines.append(f"view{i:03d}.position = {vec(c.position)}")
        lines.append(f"view{i:03d}.look_at = {vec(c.look_at)}")
        lines.append(f"view{i:03d}.up = {vec(c.up)}")
        lines.append(f"view{i:03d}.fov_y = {float(c.fov_y)!r}")
        lines.append(f"view{i:03d}.size = {c.width} {c.height}")
    Path(path).write_text("\n".join(lines) + "\n")
