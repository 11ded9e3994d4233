"""Triplane feature fields: storage, bilinear lookup, roll-out and spectra.

Plane axis order is ``uv, wu, vw`` with ``(u, v, w) = (x, y, z)``.  A plane
indexed by the coordinate pair ``(a, b)`` stores texel ``planes[k, row, col]``
with ``col`` following ``a`` and ``row`` following ``b``.  Grid nodes sit on
the plane corners, so node ``0`` is at ``-extent`` and node ``H-1`` at
``+extent``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PLANE_NAMES = ("uv", "wu", "vw")
# (column axis, row axis) of each plane in xyz order
PLANE_AXES = ((0, 1), (2, 0), (1, 2))

_TPLN_MAGIC = b"TPLN"
_TPLN_VERSION = 1
_TPLN_HEADER = struct.Struct("<4sIIIId")


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class Triplane:
    planes: np.ndarray  # [3, H, W, C]
    extent: float = 1.0

    def __post_init__(self):
        self.planes = np.asarray(self.planes)
        if self.planes.ndim != 4 or self.planes.shape[0] != 3:
            raise ValueError(f"planes must have shape [3, H, W, C], got {self.planes.shape}")
        _, h, w, _ = self.planes.shape
        if h != w:
            raise ValueError(f"triplane planes must be square, got {h}x{w}")
        if not _is_pow2(h) or h < 2:
            raise ValueError(f"triplane resolution must be a power of two >= 2, got {h}")
        if not np.all(np.isfinite(self.planes)):
            raise ValueError("triplane contains non-finite entries")
        if not self.extent > 0:
            raise ValueError("extent must be positive")

    @property
    def resolution(self) -> int:
        return self.planes.shape[1]

    @property
    def channels(self) -> int:
        return self.planes.shape[3]

    @property
    def feature_dim(self) -> int:
        return 3 * self.channels

    def copy(self) -> "Triplane":
        return Triplane(self.planes.copy(), self.extent)

    @classmethod
    def random(cls, resolution: int = 64, channels: int = 8, rng=None, std: float = 0.1,
               extent: float = 1.0, dtype=np.float64) -> "Triplane":
        rng = np.random.default_rng(rng)
        planes = rng.normal(0.0, std, size=(3, resolution, resolution, channels)).astype(dtype)
        return cls(planes, extent)

    @classmethod
    def constant(cls, value: float, resolution: int = 8, channels: int = 1,
                 extent: float = 1.0) -> "Triplane":
        return cls(np.full((3, resolution, resolution, channels), float(value)), extent)


@dataclass
class BilinearLookup:
    """Flattened texel indices and weights for a batch of points.

    ``index[k, n, j]`` addresses ``planes.reshape(3*H*W, C)`` for plane ``k``,
    point ``n`` and corner ``j``; ``weight`` has the same shape.
    ``dweight`` holds the derivative of each weight w.r.t. the two plane
    coordinates (zero where the coordinate was clamped).
    """

    index: np.ndarray
    weight: np.ndarray
    dweight: np.ndarray = field(repr=False)


def _check_points(points) -> np.ndarray:
    p = np.asarray(points, dtype=np.float64)
    if p.shape[-1] != 3:
        raise ValueError(f"points must have a trailing dimension of 3, got {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite point passed to triplane lookup")
    return p.reshape(-1, 3)


def bilinear_lookup(tp: Triplane, points) -> BilinearLookup:
    p = _check_points(points)
    n = p.shape[0]
    res = tp.resolution
    scale = (res - 1) / (2.0 * tp.extent)
    index = np.empty((3, n, 4), dtype=np.int64)
    weight = np.empty((3, n, 4))
    dweight = np.empty((3, n, 4, 3))
    for k, (ax_col, ax_row) in enumerate(PLANE_AXES):
        fc = (p[:, ax_col] + tp.extent) * scale
        fr = (p[:, ax_row] + tp.extent) * scale
        # derivative of the continuous index is zero where clamping is active
        dc = np.where((fc > 0) & (fc < res - 1), scale, 0.0)
        dr = np.where((fr > 0) & (fr < res - 1), scale, 0.0)
        fc = np.clip(fc, 0.0, res - 1)
        fr = np.clip(fr, 0.0, res - 1)
        c0 = np.minimum(np.floor(fc).astype(np.int64), res - 2)
        r0 = np.minimum(np.floor(fr).astype(np.int64), res - 2)
        tc = fc - c0
        tr = fr - r0
        base = k * res * res
        index[k, :, 0] = base + r0 * res + c0
        index[k, :, 1] = base + r0 * res + c0 + 1
        index[k, :, 2] = base + (r0 + 1) * res + c0
        index[k, :, 3] = base + (r0 + 1) * res + c0 + 1
        weight[k, :, 0] = (1 - tr) * (1 - tc)
        weight[k, :, 1] = (1 - tr) * tc
        weight[k, :, 2] = tr * (1 - tc)
        weight[k, :, 3] = tr * tc
        dweight[k] = 0.0
        # d weight / d col-coordinate
        dweight[k, :, 0, ax_col] = -(1 - tr) * dc
        dweight[k, :, 1, ax_col] = (1 - tr) * dc
        dweight[k, :, 2, ax_col] = -tr * dc
        dweight[k, :, 3, ax_col] = tr * dc
        # d weight / d row-coordinate
        dweight[k, :, 0, ax_row] = -(1 - tc) * dr
        dweight[k, :, 1, ax_row] = -tc * dr
        dweight[k, :, 2, ax_row] = (1 - tc) * dr
        dweight[k, :, 3, ax_row] = tc * dr
    return BilinearLookup(index, weight, dweight)


def gather(tp: Triplane, lookup: BilinearLookup) -> np.ndarray:
    """Concatenated per-plane features, shape [N, 3C]."""
    flat = tp.planes.reshape(-1, tp.channels)
    w = lookup.weight.astype(flat.dtype, copy=False)
    feats = np.einsum("knj,knjc->nkc", w, flat[lookup.index])
    return feats.reshape(feats.shape[0], -1)


def scatter(tp: Triplane, lookup: BilinearLookup, upstream: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`gather`: accumulate ``upstream`` [N, 3C] into a dense plane gradient.

    Reduction order is fixed by ``np.bincount`` so repeated calls are bit-identical.
    """
    c = tp.channels
    n = lookup.index.shape[1]
    g = np.asarray(upstream, dtype=np.float64).reshape(n, 3, c)
    size = tp.planes.size // c
    idx = lookup.index.reshape(-1)
    # contributions[k, n, j, c] = weight[k, n, j] * g[n, k, c]
    contrib = lookup.weight[..., None] * g.transpose(1, 0, 2)[:, :, None, :]
    contrib = contrib.reshape(-1, c)
    out = np.empty((size, c))
    for ch in range(c):
        out[:, ch] = np.bincount(idx, weights=contrib[:, ch], minlength=size)
    return out.reshape(tp.planes.shape).astype(tp.planes.dtype, copy=False)


def sample(tp: Triplane, points) -> np.ndarray:
    """Bilinear triplane lookup.  Returns ``[3C]`` for one point or ``[N, 3C]``."""
    single = np.ndim(points) == 1
    feats = gather(tp, bilinear_lookup(tp, points))
    return feats[0] if single else feats


def sample_backward(tp: Triplane, points, upstream_grad):
    """Gradient of ``sum(upstream_grad * sample(tp, points))``.

    Returns ``(grad_planes, grad_points)`` where ``grad_planes`` matches
    ``tp.planes`` and ``grad_points`` matches ``points``.
    """
    points_arr = np.asarray(points, dtype=np.float64)
    lk = bilinear_lookup(tp, points_arr)
    n = lk.index.shape[1]
    g = np.asarray(upstream_grad, dtype=np.float64).reshape(n, 3, tp.channels)
    grad_planes = scatter(tp, lk, g.reshape(n, -1))
    flat = tp.planes.reshape(-1, tp.channels)
    # d feat[k,c] / d p = sum_j texel[k,j,c] * dweight[k,j,:]
    texels = flat[lk.index]  # [3, N, 4, C]
    grad_points = np.einsum("nkc,knjc,knjd->nd", g, texels, lk.dweight)
    return grad_planes, grad_points.reshape(points_arr.shape)


def rollout(tp: Triplane) -> np.ndarray:
    """``hstack`` of the planes in ``uv, wu, vw`` order: [H, 3W, C]."""
    return np.concatenate(list(tp.planes), axis=1)


def unrollout(rolled: np.ndarray, extent: float = 1.0) -> Triplane:
    rolled = np.asarray(rolled)
    if rolled.ndim != 3 or rolled.shape[1] % 3 != 0:
        raise ValueError(f"rolled triplane width must be divisible by 3, got shape {rolled.shape}")
    w = rolled.shape[1] // 3
    return Triplane(np.stack([rolled[:, i * w:(i + 1) * w] for i in range(3)]), extent)


@dataclass
class SpectrumReport:
    radial_bins: list  # [(cycles per texel, mean log10 power)]
    high_freq_energy_ratio: float
    total_power: float


def radial_frequency(n: int) -> np.ndarray:
    f = np.fft.fftfreq(n)
    return np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)


def power_spectrum(tp: Triplane) -> np.ndarray:
    """Per-plane, per-channel DFT power normalized so it sums to the signal energy."""
    h, w = tp.planes.shape[1:3]
    spec = np.fft.fft2(tp.planes, axes=(1, 2))
    return (spec.real ** 2 + spec.imag ** 2) / (h * w)


def spectrum(tp: Triplane, eps: float = 1e-30) -> SpectrumReport:
    power = power_spectrum(tp)  # [3, H, W, C]
    res = tp.resolution
    radius = radial_frequency(res)
    total = float(power.sum())
    high = float(power[:, radius > 0.25].sum())
    ratio = high / total if total > 0 else 0.0

    bin_id = np.rint(radius * res).astype(np.int64)
    bins = []
    for b in np.unique(bin_id):
        mask = bin_id == b
        mean_power = power[:, mask].mean(axis=1)  # [3, C]
        bins.append((b / res, float(np.log10(mean_power + eps).mean())))
    return SpectrumReport(bins, min(max(ratio, 0.0), 1.0), total)


def save_triplane(tp: Triplane, path) -> None:
    path = Path(path)
    _, h, w, c = tp.planes.shape
    header = _TPLN_HEADER.pack(_TPLN_MAGIC, _TPLN_VERSION, h, w, c, float(tp.extent))
    body = np.ascontiguousarray(tp.planes, dtype="<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + body)
    tmp.replace(path)


def load_triplane(path) -> Triplane:
    data = Path(path).read_bytes()
    if len(data) < _TPLN_HEADER.size:
        raise ValueError("truncated triplane file")
    magic, version, h, w, c, extent = _TPLN_HEADER.unpack_from(data)
    if magic != _TPLN_MAGIC:
        raise ValueError(f"bad triplane magic {magic!r}")
    if version != _TPLN_VERSION:
        raise ValueError(f"unsupported triplane version {version}")
    count = 3 * h * w * c
    values = np.frombuffer(data, dtype="<f4", count=count, offset=_TPLN_HEADER.size)
    return Triplane(values.astype(np.float64).reshape(3, h, w, c), extent)
