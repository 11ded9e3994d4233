"""Command-line entry point.

Every command writes into its output directory a ``config.kv`` snapshot of the
effective configuration and a ``manifest.kv`` with the command, seed and
library versions, so a run can be repeated from those two files alone.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, coerce, load_kv, write_kv

log = logging.getLogger("triplanelab")

EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 2, 3, 4

DATA_DEFAULTS = {
    "n_scenes": 8, "family": "avatar", "scene_offset": 0, "n_train": 60, "n_heldout": 6,
    "image_resolution": 64, "gt_samples": 192, "portrait_resolution": 64,
}
DIFFUSION_DEFAULTS = {
    "train_steps": 2000, "train_batch": 4, "train_lr": 1e-3, "dropout": 0.2, "vlb_weight": 1e-3,
    "w_img": 0.1, "s_max": 0.5, "s_infer": 0.1, "guidance": 1.0, "base_steps": 1000,
    "upsample_steps": 100, "base_resolution": 16, "base_channels": 32, "channel_mult": (1, 2, 4),
    "res_blocks": 2, "feature_channels": 8, "patch": 4, "render_patch": 16, "n_views": 8,
}
EXPERIMENT_DEFAULTS = {
    "replay": "round-robin", "channel_grid": (4, 8, 16, 32), "log_snr": 0.57, "destruction_scene": 0,
    "clean_tolerance": 0.5, "destruction_trials": 4, "schedule_points": 1001,
}


def _fitting_defaults() -> dict:
    from .fitting import FittingConfig
    base = FittingConfig()
    return {f.name: getattr(base, f.name) for f in fields(FittingConfig)}


def _all_defaults() -> dict:
    return {**DATA_DEFAULTS, **_fitting_defaults(), **DIFFUSION_DEFAULTS, **EXPERIMENT_DEFAULTS}


def load_config(path) -> dict:
    """Defaults overlaid with the file's values; unknown keys are rejected."""
    defaults = _all_defaults()
    values = dict(defaults)
    if path is not None:
        try:
            raw = load_kv(path)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        unknown = sorted(set(raw) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for k, v in raw.items():
            values[k] = coerce(v, defaults[k])
    return values


def fitting_config(cfg: dict):
    from .fitting import FittingConfig
    try:
        return FittingConfig(**{k: cfg[k] for k in _fitting_defaults()})
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _versions() -> dict:
    import scipy
    out = {"version.package": __version__, "version.python": platform.python_version(),
           "version.numpy": np.__version__, "version.scipy": scipy.__version__}
    try:
        import torch
        out["version.torch"] = torch.__version__
    except ImportError:
        pass
    return out


def _start_run(out: Path, args, cfg: dict) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    write_kv(cfg, out / "config.kv")
    manifest = {"command": args.command, "seed": args.seed, "threads": args.threads,
                "argv": " ".join(sys.argv[1:]) if sys.argv else "", **_versions()}
    write_kv(manifest, out / "manifest.kv")
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _scene_dirs(data: Path) -> list:
    dirs = sorted(p for p in (data / "scenes").iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no scenes under {data / 'scenes'}")
    return dirs


def _load_tasks(data: Path, cfg, seed: int):
    from .config import stream
    from .fitting import make_task
    from .scenegen import load_scene

    rng = stream(seed, "init")
    tasks, portraits = [], []
    for d in _scene_dirs(data):
        _, ds, portrait = load_scene(d)
        tasks.append(make_task(d.name, ds, cfg, rng))
        portraits.append(portrait)
    return tasks, portraits


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg):
    from .scenegen import make_dataset, make_scene, render_portrait, save_scene

    out = _start_run(Path(args.out), args, cfg)
    for i in range(cfg["n_scenes"]):
        seed = args.seed * 1000 + cfg["scene_offset"] + i
        spec = make_scene(seed, cfg["family"])
        ds = make_dataset(spec, cfg["n_train"], cfg["n_heldout"], cfg["image_resolution"], cfg["gt_samples"])
        portrait = render_portrait(spec, cfg["portrait_resolution"], cfg["gt_samples"])
        save_scene(out, f"scene{cfg['scene_offset'] + i:03d}", spec, ds, portrait)
    return out


def cmd_fit(args, cfg):
    from .decoder import save_decoder
    from .fitting import fit_stage1
    from .triplane import save_triplane

    fcfg = fitting_config(cfg)
    tasks, _ = _load_tasks(Path(args.data), fcfg, args.seed)
    out = _start_run(Path(args.out), args, cfg)
    res = fit_stage1(tasks, fcfg, cfg["replay"], seed=args.seed)
    save_decoder(res.params, out / "decoder.bin")
    (out / "triplanes").mkdir(exist_ok=True)
    for sid, tp in res.triplanes.items():
        save_triplane(tp, out / "triplanes" / f"{sid}.tpln")
    _write_csv(out / "history.csv", ["outer_iter", "scene_id", "heldout_psnr"], res.history)
    return out


def cmd_finetune(args, cfg):
    from .decoder import load_decoder
    from .fitting import fit_stage2_many, heldout_psnr
    from .triplane import save_triplane

    fcfg = fitting_config(cfg)
    params = load_decoder(Path(args.run) / "decoder.bin")
    tasks, _ = _load_tasks(Path(args.data), fcfg, args.seed)
    out = _start_run(Path(args.out), args, cfg)
    fit_stage2_many(params, tasks, fcfg, seed=args.seed, workers=args.threads)
    (out / "triplanes").mkdir(exist_ok=True)
    rows = []
    for t in tasks:
        save_triplane(t.triplane, out / "triplanes" / f"{t.scene_id}.tpln")
        rows.append((t.scene_id, heldout_psnr(t, params, fcfg)))
    _write_csv(out / "heldout.csv", ["scene_id", "heldout_psnr"], rows)
    return out


def _denoiser_configs(cfg, hr_resolution: int, channels: int):
    from .diffusion import DenoiserConfig

    common = dict(channels=channels, base_channels=cfg["base_channels"], channel_mult=cfg["channel_mult"],
                  res_blocks=cfg["res_blocks"], feature_channels=cfg["feature_channels"],
                  portrait_size=cfg["portrait_resolution"], patch=cfg["patch"])
    # stage s attends pyramid level s; the pyramid has three levels
    stages = len(cfg["channel_mult"])
    try:
        return (DenoiserConfig.base(resolution=cfg["base_resolution"],
                                    cross_sites=tuple(min(s, 2) for s in range(stages)), **common),
                DenoiserConfig.upsampler(resolution=hr_resolution, lr_channels=channels,
                                         cross_sites=(-1,) * stages, **common))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _train_config(cfg):
    from .diffusion import TrainConfig
    return TrainConfig(cfg["train_steps"], cfg["train_batch"], cfg["train_lr"], 0.0, cfg["dropout"],
                       cfg["vlb_weight"], cfg["w_img"], cfg["s_max"], cfg["render_patch"])


def _fitted_triplanes(fit_dir: Path) -> list:
    from .triplane import load_triplane
    paths = sorted((fit_dir / "triplanes").glob("*.tpln"))
    if not paths:
        raise FileNotFoundError(f"no triplanes under {fit_dir / 'triplanes'}")
    return [load_triplane(p) for p in paths]


def _portraits(data: Path) -> list:
    from .renderer import load_png
    return [load_png(d / "portrait.png")[..., :3] for d in _scene_dirs(data)]


def cmd_train_base(args, cfg):
    from .decoder import load_decoder
    from .diffusion import Cascade, normalize_triplanes, save_cascade, train_base

    tps = _fitted_triplanes(Path(args.fit))
    base_cfg, up_cfg = _denoiser_configs(cfg, tps[0].resolution, tps[0].channels)
    cascade = Cascade.create(base_cfg, up_cfg, args.seed, scale=normalize_triplanes(tps),
                             extent=tps[0].extent)
    if args.decoder:
        cascade.decoder = load_decoder(args.decoder)
    out = _start_run(Path(args.out), args, cfg)
    trace = train_base(cascade, tps, _portraits(Path(args.data)), _train_config(cfg), args.seed)
    _write_csv(out / "loss.csv", ["step", "loss"], enumerate(trace))
    save_cascade(cascade, out / "cascade.casc")
    return out


def cmd_train_upsample(args, cfg):
    from .decoder import load_decoder
    from .diffusion import load_cascade, save_cascade, train_upsampler
    from .scenegen import load_scene

    cascade = load_cascade(args.cascade)
    if cascade.upsampler is None:
        raise ConfigError("checkpoint has no upsampler section")
    if args.decoder:
        cascade.decoder = load_decoder(args.decoder)
    tps = _fitted_triplanes(Path(args.fit))
    data = Path(args.data)
    datasets = [load_scene(d)[1] for d in _scene_dirs(data)] if cfg["w_img"] > 0 else None
    out = _start_run(Path(args.out), args, cfg)
    trace = train_upsampler(cascade, tps, _portraits(data), _train_config(cfg), datasets, args.seed)
    _write_csv(out / "loss.csv", ["step", "loss"], enumerate(trace))
    save_cascade(cascade, out / "cascade.casc")
    return out


def cmd_sample(args, cfg):
    from .diffusion import generate, load_cascade
    from .renderer import load_png, save_png, write_render_manifest
    from .triplane import save_triplane

    cascade = load_cascade(args.cascade)
    portrait = None if args.portrait == "none" else load_png(args.portrait)[..., :3]
    guidance = cfg["guidance"] if args.guidance is None else args.guidance
    steps = cfg["base_steps"] if args.steps is None else args.steps
    out = _start_run(Path(args.out), args, cfg)
    gen = generate(cascade, portrait, args.seed, guidance, steps, cfg["upsample_steps"], cfg["s_infer"],
                   cfg["n_views"], cfg["image_resolution"])
    save_triplane(gen.triplane, out / "triplane.tpln")
    save_triplane(gen.lowres, out / "lowres.tpln")
    (out / "views").mkdir(exist_ok=True)
    for i, img in enumerate(gen.renders):
        save_png(img, out / "views" / f"{i:03d}.png")
    write_render_manifest(gen.cameras, out / "cameras.kv")
    return out


def cmd_analyze_schedule(args, cfg):
    from .schedules import NoiseSchedule, compare_to_linear, schedule_csv

    out = _start_run(Path(args.out), args, cfg)
    if args.kind is None:
        schedules = {"linear": NoiseSchedule.linear(), "cosine_adjusted": NoiseSchedule.base_default(),
                     "sigmoid": NoiseSchedule.upsample_default()}
    else:
        kind = "cosine_adjusted" if args.kind == "cosine" else args.kind
        try:
            schedules = {kind: NoiseSchedule(kind, args.start, args.end, args.tau)}
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    summary = {}
    for name, sch in schedules.items():
        (out / f"{name}.csv").write_text(schedule_csv(sch, cfg["schedule_points"]))
        if sch.kind != "linear":
            for k, v in compare_to_linear(sch, cfg["schedule_points"]).items():
                summary[f"{name}.{k}"] = v
    write_kv(summary, out / "summary.kv")
    return out


def cmd_freq_analysis(args, cfg):
    from .triplane import spectrum

    out = _start_run(Path(args.out), args, cfg)
    rows, bins = [], []
    for run in args.runs:
        run = Path(run)
        from .triplane import load_triplane
        for p in sorted((run / "triplanes").glob("*.tpln")):
            rep = spectrum(load_triplane(p))
            rows.append((run.name, p.stem, rep.high_freq_energy_ratio, rep.total_power))
            bins.extend((run.name, p.stem, i, v) for i, v in enumerate(rep.radial_bins))
    _write_csv(out / "spectrum.csv", ["run", "scene_id", "high_freq_energy_ratio", "total_power"], rows)
    _write_csv(out / "radial.csv", ["run", "scene_id", "bin", "mean_log10_power"], bins)
    return out


def cmd_destruction_exp(args, cfg):
    from .experiments import fit_channel_grid
    from .schedules import destruction_experiment
    from .scenegen import load_scene

    fcfg = fitting_config(cfg)
    dirs = _scene_dirs(Path(args.data))
    _, ds, _ = load_scene(dirs[cfg["destruction_scene"]])
    out = _start_run(Path(args.out), args, cfg)
    fits = fit_channel_grid(ds, fcfg, cfg["channel_grid"], args.seed)
    rays = ds.view_rays(int(ds.heldout_views[0]))
    res = destruction_experiment(fits, rays, cfg["log_snr"], args.seed, n_samples=fcfg.eval_samples,
                                 tolerance=cfg["clean_tolerance"], trials=cfg["destruction_trials"])
    _write_csv(out / "destruction.csv", ["channels", "clean_psnr", "destruction_psnr"],
               [(r.channels, r.clean_psnr, r.destruction_psnr) for r in res])
    return out


def cmd_eval(args, cfg):
    from .decoder import load_decoder
    from .metrics import SSIM_WIN, psnr, ssim
    from .renderer import render_field, triplane_field
    from .scenegen import load_scene
    from .triplane import load_triplane

    run = Path(args.run)
    params = load_decoder(Path(args.decoder) if args.decoder else run / "decoder.bin")
    out = _start_run(Path(args.out), args, cfg)
    rows = []
    for d in _scene_dirs(Path(args.data)):
        tp_path = run / "triplanes" / f"{d.name}.tpln"
        if not tp_path.exists():
            continue
        tp = load_triplane(tp_path)
        _, ds, _ = load_scene(d)
        for v in ds.heldout_views:
            rays = ds.view_rays(int(v))
            pred = render_field(triplane_field(tp, params), rays, tp.extent, None, cfg["eval_samples"])
            cam = ds.cameras[int(v)]
            img = pred[:, :3].reshape(cam.height, cam.width, 3)
            gt = ds.images[int(v)][..., :3]
            rows.append((d.name, int(v), "psnr", psnr(img, gt)))
            if min(img.shape[:2]) >= SSIM_WIN:
                rows.append((d.name, int(v), "ssim", ssim(img, gt)))
    _write_csv(out / "metrics.csv", ["scene_id", "view", "metric", "value"], rows)
    return out


COMMANDS = {
    "gen-data": cmd_gen_data, "fit": cmd_fit, "finetune": cmd_finetune, "train-base": cmd_train_base,
    "train-upsample": cmd_train_upsample, "sample": cmd_sample, "analyze-schedule": cmd_analyze_schedule,
    "freq-analysis": cmd_freq_analysis, "destruction-exp": cmd_destruction_exp, "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="triplanelab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--threads", type=int, default=1, help="cap on worker threads/processes")
        sp.add_argument("--out", required=True, help="output run directory")
        return sp

    add("gen-data", "render the synthetic scene corpus")
    sp = add("fit", "stage-1 joint fitting with replay and consolidation")
    sp.add_argument("--data", required=True)
    sp = add("finetune", "stage-2 per-scene triplane fitting with a frozen decoder")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True, help="stage-1 run directory")
    sp = add("train-base", "train the portrait encoder and the low-resolution model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit", required=True, help="directory holding triplanes/*.tpln")
    sp.add_argument("--decoder")
    sp = add("train-upsample", "train the upsampler of an existing checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--fit", required=True)
    sp.add_argument("--cascade", required=True)
    sp.add_argument("--decoder")
    sp = add("sample", "generate a triplane and turntable renders")
    sp.add_argument("--cascade", required=True)
    sp.add_argument("--portrait", default="none", help="PNG path or 'none'")
    sp.add_argument("--guidance", type=float)
    sp.add_argument("--steps", type=int, help="base-model sampling steps")
    sp = add("analyze-schedule", "tabulate gamma and logSNR")
    sp.add_argument("--kind", choices=["linear", "cosine", "cosine_adjusted", "sigmoid"])
    sp.add_argument("--start", type=float, default=0.0)
    sp.add_argument("--end", type=float, default=1.0)
    sp.add_argument("--tau", type=float, default=1.0)
    sp = add("freq-analysis", "radial power spectra of fitted triplanes")
    sp.add_argument("--runs", nargs="+", required=True)
    sp = add("destruction-exp", "noise robustness across channel counts")
    sp.add_argument("--data", required=True)
    sp = add("eval", "PSNR/SSIM of fitted triplanes on held-out views")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--decoder")
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    from .fitting import FittingDivergence

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        import torch
        torch.set_num_threads(max(1, args.threads))
    except ImportError:
        pass
    try:
        cfg = load_config(args.config)
        out = COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (FittingDivergence, FloatingPointError) as exc:
        return _fail(EXIT_DIVERGED, "divergence", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    log.info("wrote %s", out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
