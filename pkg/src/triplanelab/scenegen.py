"""Procedural soft-edged scenes and multi-view ground-truth datasets.

Ground truth is rendered by a dedicated marcher that evaluates the analytic
primitive fields directly; it shares no code with the neural renderer so it
can serve as an oracle for it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .renderer import CameraConfig, RayBatch, generate_rays, load_png, save_png

FAMILIES = ("two-sphere", "mixed", "avatar")
CAMERA_RADIUS = 2.8
CAMERA_FOV = float(np.deg2rad(45.0))


@dataclass
class Primitive:
    kind: str               # sphere | ellipsoid | box
    center: np.ndarray
    radii: np.ndarray
    albedo: np.ndarray
    softness: float = 0.08

    def sdf(self, p):
        q = p - self.center
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.radii[0]
        if self.kind == "ellipsoid":
            k = np.linalg.norm(q / self.radii, axis=-1)
            return (k - 1.0) * self.radii.min()
        if self.kind == "box":
            d = np.abs(q) - self.radii
            outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
            return outside + np.minimum(d.max(axis=-1), 0.0)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def occupancy(self, p):
        x = np.clip(0.5 - self.sdf(p) / self.softness, 0.0, 1.0)
        return x * x * (3.0 - 2.0 * x)

    def bound(self) -> float:
        return float(np.max(np.abs(self.center) + self.radii + 0.5 * self.softness))


@dataclass
class SceneSpec:
    seed: int
    family: str
    primitives: list
    sigma_max: float = 30.0
    extent: float = 1.0

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("a scene needs at least one primitive")
        for prim in self.primitives:
            if prim.bound() > self.extent:
                raise ValueError(f"primitive {prim.kind} at {prim.center} leaves the scene extent")

    def field(self, points):
        """Analytic density and color at ``points`` [M, 3]."""
        p = np.asarray(points, dtype=np.float64)
        empty = np.ones(p.shape[:-1])
        color = np.zeros(p.shape[:-1] + (3,))
        for prim in self.primitives:
            o = prim.occupancy(p)
            empty *= 1.0 - o
            # later primitives paint over earlier ones
            color = color * (1.0 - o[..., None]) + prim.albedo * o[..., None]
        occ = 1.0 - empty
        # painting over black leaves colour scaled by coverage, which equals occ
        np.divide(color, occ[..., None], out=color, where=occ[..., None] > 0)
        return self.sigma_max * occ, color


def _prim(kind, center, radii, albedo, softness=0.08):
    return Primitive(kind, np.asarray(center, float), np.asarray(radii, float),
                     np.clip(np.asarray(albedo, float), 0.0, 1.0), softness)


def _two_sphere(rng):
    prims = []
    for sign in (-1.0, 1.0):
        r = rng.uniform(0.2, 0.35)
        c = [sign * rng.uniform(0.3, 0.5), rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3)]
        prims.append(_prim("sphere", c, [r, r, r], rng.uniform(0.05, 0.95, 3)))
    return prims


def _mixed(rng):
    prims = []
    for _ in range(rng.integers(2, 6)):
        kind = ("sphere", "ellipsoid", "box")[rng.integers(3)]
        radii = rng.uniform(0.12, 0.3, 3)
        if kind == "sphere":
            radii[:] = radii[0]
        lim = 0.85 - radii.max()
        c = rng.uniform(-lim, lim, 3)
        prims.append(_prim(kind, c, radii, rng.uniform(0.05, 0.95, 3)))
    return prims


def _avatar(rng):
    skin = np.array([0.95, 0.75, 0.6]) * rng.uniform(0.55, 1.0) + rng.normal(0, 0.04, 3)
    hair = rng.uniform(0.05, 0.9, 3)
    shirt = rng.uniform(0.05, 0.95, 3)
    eyes = rng.uniform(0.0, 0.6, 3)
    hr = np.array([rng.uniform(0.3, 0.4), rng.uniform(0.36, 0.46), rng.uniform(0.3, 0.38)])
    head_c = np.array([0.0, rng.uniform(0.12, 0.22), 0.0])
    prims = [
        _prim("box", [0.0, -0.62, 0.0],
              [rng.uniform(0.4, 0.6), 0.25, rng.uniform(0.22, 0.32)], shirt),
        _prim("ellipsoid", head_c, hr, skin),
        _prim("ellipsoid", head_c + [0.0, hr[1] * rng.uniform(0.35, 0.6), -0.05],
              hr * [1.08, 0.6, 1.05], hair),
    ]
    eye_r = rng.uniform(0.05, 0.08)
    spread = rng.uniform(0.1, 0.16)
    for sx in (-1.0, 1.0):
        prims.append(_prim("sphere", head_c + [sx * spread, 0.05, hr[2] * 0.85],
                           [eye_r] * 3, eyes, softness=0.05))
    return prims


def make_scene(seed: int, family: str = "avatar", sigma_max: float = 30.0) -> SceneSpec:
    if family not in FAMILIES:
        raise ValueError(f"unknown scene family {family!r}")
    rng = np.random.default_rng([int(seed), FAMILIES.index(family)])
    builder = {"two-sphere": _two_sphere, "mixed": _mixed, "avatar": _avatar}[family]
    return SceneSpec(int(seed), family, builder(rng), sigma_max)


def spec_to_kv(spec: SceneSpec) -> str:
    lines = [f"seed = {spec.seed}", f"family = {spec.family}", f"sigma_max = {spec.sigma_max!r}",
             f"extent = {spec.extent!r}", f"primitives = {len(spec.primitives)}"]
    for i, p in enumerate(spec.primitives):
        lines += [f"prim{i}.kind = {p.kind}",
                  f"prim{i}.center = " + " ".join(repr(float(v)) for v in p.center),
                  f"prim{i}.radii = " + " ".join(repr(float(v)) for v in p.radii),
                  f"prim{i}.albedo = " + " ".join(repr(float(v)) for v in p.albedo),
                  f"prim{i}.softness = {p.softness!r}"]
    return "\n".join(lines) + "\n"


def spec_from_kv(text: str) -> SceneSpec:
    from .config import parse_kv

    kv = parse_kv(text)
    prims = []
    for i in range(int(kv["primitives"])):
        vec = lambda key: np.array([float(v) for v in kv[f"prim{i}.{key}"].split()])
        prims.append(Primitive(kv[f"prim{i}.kind"], vec("center"), vec("radii"), vec("albedo"),
                               float(kv[f"prim{i}.softness"])))
    return SceneSpec(int(kv["seed"]), kv["family"], prims, float(kv["sigma_max"]),
                     float(kv["extent"]))


def make_cameras(n_views: int, resolution: int = 64, radius: float = CAMERA_RADIUS,
                 fov_y: float = CAMERA_FOV, max_elevation_deg: float = 30.0) -> list:
    """Cameras on a sphere: golden-angle azimuths, low-discrepancy elevations in the band."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    frac = (np.sqrt(5.0) - 1.0) / 2.0
    cams = []
    for i in range(n_views):
        az = i * golden
        el = np.deg2rad(max_elevation_deg) * (2.0 * ((i * frac + 0.5) % 1.0) - 1.0)
        pos = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(CameraConfig(tuple(float(v) for v in pos), fov_y=float(fov_y),
                                width=resolution, height=resolution))
    return cams


def turntable_cameras(n_views: int = 8, resolution: int = 64, elevation_deg: float = 10.0,
                      radius: float = CAMERA_RADIUS) -> list:
    el = np.deg2rad(elevation_deg)
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        pos = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        cams.append(CameraConfig(tuple(float(v) for v in pos), fov_y=CAMERA_FOV,
                                width=resolution, height=resolution))
    return cams


def frontal_camera(resolution: int = 64, radius: float = CAMERA_RADIUS) -> CameraConfig:
    return CameraConfig((0.0, 0.0, radius), fov_y=CAMERA_FOV, width=resolution, height=resolution)


def march_rays(spec: SceneSpec, origins, directions, n_samples: int = 192,
               near: float | None = None, far: float | None = None, background=(1.0, 1.0, 1.0)):
    """Reference midpoint ray march of the analytic field; returns RGBA [R, 4]."""
    near = 0.1 * spec.extent if near is None else near
    far = 4.0 * spec.extent if far is None else far
    dt = (far - near) / n_samples
    t = near + (np.arange(n_samples) + 0.5) * dt
    n = origins.shape[0]
    transmittance = np.ones(n)
    color = np.zeros((n, 3))
    bg = np.asarray(background, dtype=np.float64)
    for i, ti in enumerate(t):
        step = far - ti if i == n_samples - 1 else dt
        p = origins + ti * directions
        inside = np.all(np.abs(p) <= spec.extent, axis=-1)
        if not inside.any():
            continue
        sig, col = spec.field(p[inside])
        a = 1.0 - np.exp(-sig * step)
        color[inside] += (transmittance[inside] * a)[:, None] * col
        transmittance[inside] *= 1.0 - a
    return np.concatenate([color + transmittance[:, None] * bg, (1.0 - transmittance)[:, None]], 1)


@dataclass
class ViewDataset:
    images: np.ndarray          # [N, H, W, 4]
    cameras: list
    split: np.ndarray           # [N] of "train" / "heldout"
    _rays: tuple = field(default=None, repr=False)

    @property
    def train_views(self) -> np.ndarray:
        return np.flatnonzero(self.split == "train")

    @property
    def heldout_views(self) -> np.ndarray:
        return np.flatnonzero(self.split == "heldout")

    def _all_rays(self):
        if self._rays is None:
            rays = [generate_rays(c) for c in self.cameras]
            self._rays = (np.stack([r.origins for r in rays]), np.stack([r.directions for r in rays]))
        return self._rays

    def view_rays(self, view: int) -> RayBatch:
        o, d = self._all_rays()
        h, w = self.images.shape[1:3]
        rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        px = np.stack([np.full(h * w, view), rr.ravel(), cc.ravel()], axis=1)
        return RayBatch(o[view], d[view], px, self.images[view].reshape(-1, 4))

    def sample_rays(self, rng, batch: int, views=None) -> RayBatch:
        """Uniform random pixels from the given (default: training) views."""
        views = self.train_views if views is None else np.asarray(views)
        h, w = self.images.shape[1:3]
        v = views[rng.integers(0, len(views), batch)]
        flat = rng.integers(0, h * w, batch)
        o, d = self._all_rays()
        px = np.stack([v, flat // w, flat % w], axis=1)
        return RayBatch(o[v, flat], d[v, flat], px, self.images[v, flat // w, flat % w])


def split_tags(n_train: int, n_heldout: int) -> np.ndarray:
    n = n_train + n_heldout
    tags = np.full(n, "train", dtype=object)
    if n_heldout:
        held = np.round(np.linspace(0, n - 1, n_heldout + 2)[1:-1]).astype(int)
        tags[held] = "heldout"
    return tags


def render_ground_truth(spec: SceneSpec, cameras, n_samples: int = 192,
                        split=None, chunk: int = 8192) -> ViewDataset:
    images = []
    for cam in cameras:
        rays = generate_rays(cam)
        out = np.empty((len(rays), 4))
        for s in range(0, len(rays), chunk):
            sl = slice(s, s + chunk)
            out[sl] = march_rays(spec, rays.origins[sl], rays.directions[sl], n_samples)
        images.append(out.reshape(cam.height, cam.width, 4))
    if split is None:
        split = np.full(len(cameras), "train", dtype=object)
    return ViewDataset(np.stack(images), list(cameras), np.asarray(split, dtype=object))


def make_dataset(spec: SceneSpec, n_train: int = 60, n_heldout: int = 6, resolution: int = 64,
                 n_samples: int = 192) -> ViewDataset:
    cams = make_cameras(n_train + n_heldout, resolution)
    return render_ground_truth(spec, cams, n_samples, split_tags(n_train, n_heldout))


def render_portrait(spec: SceneSpec, resolution: int = 64, n_samples: int = 192) -> np.ndarray:
    """Frontal RGB render composited over white, [H, W, 3]."""
    ds = render_ground_truth(spec, [frontal_camera(resolution)], n_samples)
    return ds.images[0, ..., :3]


def save_scene(root, scene_id: str, spec: SceneSpec, ds: ViewDataset, portrait) -> Path:
    out = Path(root) / "scenes" / scene_id
    (out / "views").mkdir(parents=True, exist_ok=True)
    (out / "spec.kv").write_text(spec_to_kv(spec))
    for i, img in enumerate(ds.images):
        save_png(img, out / "views" / f"{i:03d}.png")
    with open(out / "cameras.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["view", "split", "px", "py", "pz", "lx", "ly", "lz", "ux", "uy", "uz",
                     "fov_y", "width", "height"])
        for i, (c, tag) in enumerate(zip(ds.cameras, ds.split)):
            floats = [*c.position, *c.look_at, *c.up, c.fov_y]
            wr.writerow([i, tag, *(repr(float(v)) for v in floats), c.width, c.height])
    save_png(portrait, out / "portrait.png")
    return out


def load_scene(path):
    """Returns ``(spec, dataset, portrait)`` from a scene directory."""
    path = Path(path)
    spec = spec_from_kv((path / "spec.kv").read_text())
    cams, tags = [], []
    with open(path / "cameras.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            cams.append(CameraConfig((float(row["px"]), float(row["py"]), float(row["pz"])),
                                     (float(row["lx"]), float(row["ly"]), float(row["lz"])),
                                     (float(row["ux"]), float(row["uy"]), float(row["uz"])),
                                     float(row["fov_y"]), int(row["width"]), int(row["height"])))
            tags.append(row["split"])
    images = np.stack([load_png(path / "views" / f"{i:03d}.png") for i in range(len(cams))])
    portrait = load_png(path / "portrait.png")[..., :3]
    return spec, ViewDataset(images, cams, np.asarray(tags, dtype=object)), portrait
