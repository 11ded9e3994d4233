"""Two-stage triplane fitting.

Stage 1 trains a shared decoder jointly with per-scene triplanes, visiting
scenes in short bursts (task replay) and anchoring decoder weights with a
Fisher-weighted quadratic penalty.  Stage 2 freezes the decoder and
finetunes each triplane independently.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from . import decoder as dec
from . import renderer as rd
from .metrics import psnr
from .scenegen import ViewDataset
from .triplane import Triplane

log = logging.getLogger(__name__)


class FittingDivergence(FloatingPointError):
    """The fitting loss became non-finite."""


@dataclass
class FittingConfig:
    inner_loop_iterations: int = 200
    outer_loop_iterations: int = 10
    lambda_iwc: float = 0.1
    lambda_tv: float = 1e-2
    lambda_l2: float = 1e-4
    weight_decay: float = 0.0
    lr_triplane: float = 2e-3
    lr_decoder: float = 2e-4
    ray_batch: int = 1024
    samples_per_ray: int = 64
    fisher_batches: int = 8
    triplane_resolution: int = 64
    triplane_channels: int = 8
    decoder_hidden: int = 64
    decoder_depth: int = 3
    grid_resolution: int = 32
    grid_every: int = 16
    eval_samples: int = 64
    stage2_iterations: int = 2000
    dtype: str = "float32"

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("lambda") or f.name == "weight_decay":
                if v < 0:
                    raise ValueError(f"{f.name} must be non-negative")
            elif f.name == "dtype":
                if v not in ("float32", "float64"):
                    raise ValueError("dtype must be float32 or float64")
            elif f.name != "stage2_iterations" and v <= 0:
                raise ValueError(f"{f.name} must be positive")

    @classmethod
    def from_kv(cls, kv: dict) -> "FittingConfig":
        from .config import coerce
        base = cls()
        vals = {f.name: coerce(kv[f.name], getattr(base, f.name)) for f in fields(cls) if f.name in kv}
        return cls(**vals)

    def to_kv(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class Adam:
    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        param -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return param


@dataclass
class FisherState:
    omega_diag: np.ndarray
    consolidated_params: np.ndarray

    def __post_init__(self):
        if self.omega_diag.shape != self.consolidated_params.shape:
            raise ValueError("Fisher diagonal and consolidated parameters differ in length")
        if np.any(self.omega_diag < 0):
            raise ValueError("Fisher diagonal must be non-negative")

    @classmethod
    def zeros(cls, params_flat) -> "FisherState":
        p = np.asarray(params_flat, dtype=np.float64)
        return cls(np.zeros_like(p), p.copy())


def iwc_penalty(params_flat, state: FisherState, lam: float):
    """``lam/2 * sum(Omega * (w - w*)^2)`` and its gradient."""
    w = np.asarray(params_flat, dtype=np.float64)
    if w.shape != state.omega_diag.shape:
        raise ValueError("parameter vector and Fisher state differ in length")
    if np.any(state.omega_diag < 0):
        raise ValueError("Fisher diagonal must be non-negative")
    d = w - state.consolidated_params
    return 0.5 * lam * float(np.sum(state.omega_diag * d * d)), lam * state.omega_diag * d


def fisher_update(data_grads, params_flat) -> FisherState:
    """Square of the mean data-loss gradient over the given batches, anchored at ``params_flat``.

    A single gradient reproduces the plain squared-gradient update.
    """
    g = np.atleast_2d(np.asarray(data_grads, dtype=np.float64))
    return FisherState(g.mean(axis=0) ** 2, np.array(params_flat, dtype=np.float64))


def tv_loss(tp: Triplane):
    """Mean squared forward difference along both plane axes, with gradient."""
    x = tp.planes
    dr = x[:, 1:] - x[:, :-1]
    dc = x[:, :, 1:] - x[:, :, :-1]
    n = dr.size + dc.size
    value = float((np.sum(dr * dr) + np.sum(dc * dc)) / n)
    grad = np.zeros_like(x, dtype=np.float64)
    grad[:, 1:] += 2 * dr / n
    grad[:, :-1] -= 2 * dr / n
    grad[:, :, 1:] += 2 * dc / n
    grad[:, :, :-1] -= 2 * dc / n
    return value, grad


def l2_loss(tp: Triplane):
    x = tp.planes
    return float(np.mean(x * x)), 2 * x / x.size


@dataclass
class AvatarTask:
    scene_id: str
    triplane: Triplane
    dataset: ViewDataset
    fisher: FisherState | None = None
    grid: rd.OccupancyGrid | None = None
    triplane_opt: Adam | None = None
    visits: int = 0

    def __post_init__(self):
        if len(self.dataset.images) == 0:
            raise ValueError(f"task {self.scene_id}: empty dataset")


@dataclass
class StepResult:
    data_loss: float
    total_loss: float
    grad_planes: np.ndarray
    grad_decoder: np.ndarray
    data_grad_decoder: np.ndarray


def compute_step(task: AvatarTask, params: dec.DecoderParams, cfg: FittingConfig, rays: rd.RayBatch,
                 rng=None, lambda_iwc: float | None = None) -> StepResult:
    """Loss and gradients of one inner iteration, without updating anything."""
    lam = cfg.lambda_iwc if lambda_iwc is None else lambda_iwc
    pred, cache = rd.render_rays(task.triplane, params, rays, task.grid, cfg.samples_per_ray, rng)
    data_loss, d_pred = rd.render_loss(pred, rays.target)
    g_planes, g_data = rd.render_backward(cache, d_pred)
    total = data_loss
    g_dec = g_data.copy()
    flat = params.flatten()
    if lam > 0 and task.fisher is not None:
        pen, g_pen = iwc_penalty(flat, task.fisher, lam)
        total += pen
        g_dec += g_pen
    if cfg.weight_decay > 0:
        total += 0.5 * cfg.weight_decay * float(flat @ flat)
        g_dec += cfg.weight_decay * flat
    if cfg.lambda_tv > 0:
        tv, g_tv = tv_loss(task.triplane)
        total += cfg.lambda_tv * tv
        g_planes += cfg.lambda_tv * g_tv
    if cfg.lambda_l2 > 0:
        l2, g_l2 = l2_loss(task.triplane)
        total += cfg.lambda_l2 * l2
        g_planes += cfg.lambda_l2 * g_l2
    if not np.isfinite(total):
        raise FittingDivergence(f"non-finite loss on task {task.scene_id}")
    return StepResult(data_loss, total, g_planes, g_dec, g_data)


def heldout_psnr(task: AvatarTask, params: dec.DecoderParams, cfg: FittingConfig, views=None,
                 grid: rd.OccupancyGrid | None = None) -> float:
    """Mean RGB PSNR over held-out views, rendered with midpoint samples."""
    views = task.dataset.heldout_views if views is None else views
    scores = []
    for v in views:
        rays = task.dataset.view_rays(v)
        pred = rd.render_field(rd.triplane_field(task.triplane, params), rays, task.triplane.extent,
                               grid, cfg.eval_samples)
        scores.append(psnr(pred[:, :3], rays.target[:, :3]))
    return float(np.mean(scores))


def _refresh_grid(task: AvatarTask, params, cfg: FittingConfig, rng, reset: bool = False):
    """One occupancy pass; ``reset`` rebuilds the grid from zero with two passes.

    A reset is needed whenever the decoder changed since the grid was last
    touched: the stored maxima only decay by ``decay`` per pass.
    """
    if task.grid is None or reset:
        task.grid = rd.OccupancyGrid(cfg.grid_resolution, task.triplane.extent)
        rd.update_occupancy(task.triplane, params, task.grid, rng)
    rd.update_occupancy(task.triplane, params, task.grid, rng)


def make_task(scene_id: str, dataset: ViewDataset, cfg: FittingConfig, rng) -> AvatarTask:
    tp = Triplane.random(cfg.triplane_resolution, cfg.triplane_channels, rng, dtype=cfg.dtype)
    return AvatarTask(scene_id, tp, dataset)


def replay_order(n_tasks: int, outer_per_task: int, schedule="round-robin") -> list:
    if isinstance(schedule, str):
        if schedule == "round-robin":
            return [i % n_tasks for i in range(n_tasks * outer_per_task)]
        if schedule == "sequential":
            return [i for i in range(n_tasks) for _ in range(outer_per_task)]
        raise ValueError(f"unknown replay schedule {schedule!r}")
    order = [int(i) for i in schedule]
    if any(i < 0 or i >= n_tasks for i in order):
        raise ValueError("replay order references a missing task")
    return order


@dataclass
class Stage1Result:
    params: dec.DecoderParams
    triplanes: dict
    history: list = field(default_factory=list)     # (outer_iter, scene_id, psnr)
    loss_trace: list = field(default_factory=list)  # data loss per inner step


def fit_stage1(tasks, cfg: FittingConfig, schedule="round-robin", params=None, seed: int = 0,
               record_history: bool = True, eval_views=None, callback=None) -> Stage1Result:
    """Alternate between scenes, running ``inner_loop_iterations`` joint updates per visit.

    After every visit the visited scene's Fisher state becomes the squared mean
    data-loss gradient of the last ``fisher_batches`` inner steps, anchored at
    the current decoder weights.  Held-out PSNR of every scene is recorded
    after every outer iteration.
    """
    from .config import stream

    tasks = list(tasks)
    if len(tasks) < 1:
        raise ValueError("fit_stage1 needs at least one task")
    ray_rng = stream(seed, "data")
    jitter_rng = stream(seed, "noise")
    if params is None:
        params = dec.init_decoder(tasks[0].triplane.feature_dim, cfg.decoder_hidden,
                                  cfg.decoder_depth, stream(seed, "init"))
    flat = params.flatten()
    dec_opt = Adam(flat.shape, cfg.lr_decoder)
    result = Stage1Result(params, {})
    order = replay_order(len(tasks), cfg.outer_loop_iterations, schedule)

    for outer, ti in enumerate(order):
        task = tasks[ti]
        if task.triplane_opt is None:
            task.triplane_opt = Adam(task.triplane.planes.shape, cfg.lr_triplane)
        recent = []
        for it in range(cfg.inner_loop_iterations):
            if it % cfg.grid_every == 0:
                _refresh_grid(task, params, cfg, jitter_rng, reset=it == 0)
            rays = task.dataset.sample_rays(ray_rng, cfg.ray_batch)
            step = compute_step(task, params, cfg, rays, jitter_rng)
            result.loss_trace.append(step.data_loss)
            recent.append(step.data_grad_decoder)
            if len(recent) > cfg.fisher_batches:
                recent.pop(0)
            task.triplane_opt.step(task.triplane.planes, step.grad_planes)
            dec_opt.step(flat, step.grad_decoder)
            params = params.with_flat(flat)
        task.fisher = fisher_update(recent, flat)
        task.visits += 1
        if record_history:
            for t in tasks:
                if t.visits == 0:
                    continue
                value = heldout_psnr(t, params, cfg, eval_views)
                result.history.append((outer, t.scene_id, value))
        if callback is not None:
            callback(outer, task, params)
        log.debug("outer %d scene %s loss %.5f", outer, task.scene_id, result.loss_trace[-1])

    result.params = params
    result.triplanes = {t.scene_id: t.triplane for t in tasks}
    return result


def fit_stage2(params: dec.DecoderParams, task: AvatarTask, cfg: FittingConfig,
               iterations: int | None = None, seed: int = 0) -> Triplane:
    """Finetune only the task's triplane against a frozen decoder."""
    from .config import stream

    iterations = cfg.stage2_iterations if iterations is None else iterations
    ray_rng = stream(seed, "data")
    jitter_rng = stream(seed, "noise")
    opt = Adam(task.triplane.planes.shape, cfg.lr_triplane)
    no_iwc = FittingConfig(**{**cfg.to_kv(), "lambda_iwc": 0.0, "weight_decay": 0.0})
    for it in range(iterations):
        if it % cfg.grid_every == 0:
            _refresh_grid(task, params, cfg, jitter_rng, reset=it == 0)
        rays = task.dataset.sample_rays(ray_rng, cfg.ray_batch)
        step = compute_step(task, params, no_iwc, rays, jitter_rng)
        opt.step(task.triplane.planes, step.grad_planes)
    if iterations > 0:
        _refresh_grid(task, params, cfg, jitter_rng, reset=True)
    return task.triplane


def _stage2_worker(args):
    params, task, cfg, iterations, seed = args
    return fit_stage2(params, task, cfg, iterations, seed)


def fit_stage2_many(params, tasks, cfg: FittingConfig, iterations=None, seed: int = 0,
                    workers: int = 1) -> list:
    """Stage 2 over many scenes; each scene gets its own seed stream."""
    jobs = [(params, t, cfg, iterations, seed * 1000 + i) for i, t in enumerate(tasks)]
    if workers <= 1:
        return [_stage2_worker(j) for j in jobs]
    with ProcessPoolExecutor(workers) as ex:
        results = list(ex.map(_stage2_worker, jobs))
    for t, tp in zip(tasks, results):
        t.triplane = tp
    return results
