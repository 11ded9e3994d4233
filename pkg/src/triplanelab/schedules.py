"""Variance-preserving noise schedules, logSNR analysis and forward diffusion.

Every schedule maps ``t in [0, 1]`` to ``gamma(t) = alpha_t**2`` and is affinely
renormalized so that ``gamma(0) = 1 - EPS`` and ``gamma(1) = EPS``.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .triplane import Triplane

EPS = 1e-9
KINDS = ("linear", "cosine_adjusted", "sigmoid")
LINEAR_STEPS = 1000
LINEAR_BETA = (1e-4, 0.02)


def _linear_table():
    betas = np.linspace(LINEAR_BETA[0], LINEAR_BETA[1], LINEAR_STEPS)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


_LINEAR_RAW = _linear_table()
_LINEAR_T = np.linspace(0.0, 1.0, LINEAR_STEPS + 1)


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str = "cosine_adjusted"
    start: float = 0.0
    end: float = 1.0
    tau: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind != "linear":
            if not self.tau > 0:
                raise ValueError("tau must be positive")
            if not self.end > self.start:
                raise ValueError("schedule end must exceed start")
        if self.kind == "cosine_adjusted" and not (0 <= self.start and self.end <= 1):
            raise ValueError("cosine schedule needs 0 <= start < end <= 1")

    @classmethod
    def base_default(cls) -> "NoiseSchedule":
        return cls("cosine_adjusted", 0.2, 1.0, 3.0)

    @classmethod
    def upsample_default(cls) -> "NoiseSchedule":
        return cls("sigmoid", 0.0, 3.0, 0.1)

    @classmethod
    def linear(cls) -> "NoiseSchedule":
        return cls("linear", 0.0, 1.0, 1.0)

    def describe(self) -> str:
        return f"{self.kind}:{self.start!r}:{self.end!r}:{self.tau!r}"

    @classmethod
    def parse(cls, text: str) -> "NoiseSchedule":
        kind, start, end, tau = text.strip().split(":")
        return cls(kind, float(start), float(end), float(tau))

    def raw(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear":
            return np.interp(t, _LINEAR_T, _LINEAR_RAW)
        u = t * (self.end - self.start) + self.start
        if self.kind == "cosine_adjusted":
            return np.cos(u * (math.pi / 2)) ** (2 * self.tau)
        return expit(-u / self.tau)

    def gamma(self, t):
        return gamma(self, t)

    def log_snr(self, t):
        return log_snr(self, t)

    def alpha_sigma(self, t):
        g = gamma(self, t)
        return np.sqrt(g), np.sqrt(1.0 - g)


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    return t


def gamma(schedule: NoiseSchedule, t):
    t = _check_t(t)
    r0, r1 = schedule.raw(0.0), schedule.raw(1.0)
    frac = (schedule.raw(t) - r1) / (r0 - r1)
    out = (1.0 - EPS) * frac + EPS * (1.0 - frac)
    return float(out) if out.ndim == 0 else out


def log_snr(schedule: NoiseSchedule, t):
    g = np.asarray(gamma(schedule, t))
    out = np.log(g) - np.log1p(-g)
    return float(out) if out.ndim == 0 else out


def t_for_log_snr(schedule: NoiseSchedule, level: float, tol: float = 1e-14) -> float:
    """Bisection for the time at which ``log_snr`` equals ``level``."""
    lo, hi = 0.0, 1.0
    if not log_snr(schedule, hi) <= level <= log_snr(schedule, lo):
        raise ValueError(f"logSNR {level} outside the schedule range")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if log_snr(schedule, mid) > level:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def forward_diffuse(x0, t, schedule: NoiseSchedule, rng):
    """``x_t = alpha_t x0 + sigma_t eps`` with fresh standard-normal ``eps``.

    ``x0`` may be a Triplane or an array; ``t`` a scalar or one value per
    leading-axis entry.  Returns ``(x_t, eps)`` of the same kind as ``x0``.
    """
    is_tp = isinstance(x0, Triplane)
    arr = x0.planes.astype(np.float64) if is_tp else np.asarray(x0, dtype=np.float64)
    t = _check_t(t)
    a, s = schedule.alpha_sigma(t)
    if np.ndim(a):
        shape = (-1,) + (1,) * (arr.ndim - 1)
        a, s = np.reshape(a, shape), np.reshape(s, shape)
    eps = np.random.default_rng(rng).standard_normal(arr.shape)
    xt = a * arr + s * eps
    if is_tp:
        return Triplane(xt, x0.extent), Triplane(eps, x0.extent)
    return xt, eps


def schedule_csv(schedule: NoiseSchedule, n: int = 1001) -> str:
    t = np.linspace(0.0, 1.0, n)
    g = gamma(schedule, t)
    ls = log_snr(schedule, t)
    buf = io.StringIO(newline="")
    buf.write("t,gamma,logSNR\n")
    for row in zip(t, g, ls):
        buf.write(",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def compare_to_linear(schedule: NoiseSchedule, n: int = 1001) -> dict:
    """Gap to the linear schedule on the open interval, on an ``n``-point grid."""
    t = np.linspace(0.0, 1.0, n)[1:-1]
    diff = log_snr(schedule, t) - log_snr(NoiseSchedule.linear(), t)
    return {"max_gap": float(diff.max()), "min_gap": float(diff.min()),
            "strictly_below": bool(np.all(diff < 0))}


@dataclass
class DestructionResult:
    channels: int
    clean_psnr: float       # clean render vs ground truth
    destruction_psnr: float  # noised render vs clean render


def destruction_experiment(fits: dict, rays, level: float, rng, schedule: NoiseSchedule | None = None,
                           n_samples: int = 64, tolerance: float = 0.5, trials: int = 1) -> list:
    """Noise each fitted triplane at a common logSNR and measure how much its render degrades.

    ``fits`` maps channel count to ``(triplane, decoder)`` fitted on one scene;
    ``rays`` is a RayBatch with ground-truth targets for one fixed view.
    """
    from . import renderer as rd
    from .metrics import psnr

    schedule = schedule or NoiseSchedule.base_default()
    rng = np.random.default_rng(rng)
    if math.isinf(level):
        t = 0.0 if level > 0 else 1.0
    else:
        t = t_for_log_snr(schedule, level)
    clean = {}
    for c, (tp, params) in sorted(fits.items()):
        img = rd.render_field(rd.triplane_field(tp, params), rays, tp.extent, None, n_samples)
        clean[c] = (img, psnr(img[:, :3], rays.target[:, :3]))
    spread = max(v[1] for v in clean.values()) - min(v[1] for v in clean.values())
    if spread > tolerance:
        raise ValueError(f"clean PSNRs differ by {spread:.2f} dB; fits are not comparable")
    out = []
    for c, (tp, params) in sorted(fits.items()):
        scores = []
        for _ in range(trials):
            noisy, _ = forward_diffuse(tp, t, schedule, rng)
            img = rd.render_field(rd.triplane_field(noisy, params), rays, tp.extent, None, n_samples)
            scores.append(psnr(img[:, :3], clean[c][0][:, :3]))
        out.append(DestructionResult(c, clean[c][1], float(np.mean(scores))))
    return out
