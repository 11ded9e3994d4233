import math

import numpy as np
import pytest

from triplanelab import renderer as rd
from triplanelab import scenegen as sg


def _spec_eq(a, b):
    if (a.seed, a.family, a.sigma_max, a.extent, len(a.primitives)) != \
            (b.seed, b.family, b.sigma_max, b.extent, len(b.primitives)):
        return False
    return all(p.kind == q.kind and p.softness == q.softness and np.array_equal(p.center, q.center)
               and np.array_equal(p.radii, q.radii) and np.array_equal(p.albedo, q.albedo)
               for p, q in zip(a.primitives, b.primitives))


@pytest.mark.parametrize("family", sg.FAMILIES)
def test_scene_is_deterministic_in_seed(family):
    assert _spec_eq(sg.make_scene(5, family), sg.make_scene(5, family))
    assert not _spec_eq(sg.make_scene(5, family), sg.make_scene(6, family))


def test_two_sphere_family_has_two_primitives():
    spec = sg.make_scene(0, "two-sphere")
    assert len(spec.primitives) == 2 and all(p.kind == "sphere" for p in spec.primitives)


@pytest.mark.parametrize("family", sg.FAMILIES)
def test_primitives_stay_inside_extent(family):
    for seed in range(40):
        spec = sg.make_scene(seed, family)
        assert spec.primitives and all(p.bound() <= spec.extent for p in spec.primitives)


def test_invalid_scenes_rejected():
    with pytest.raises(ValueError):
        sg.SceneSpec(0, "mixed", [])
    with pytest.raises(ValueError):
        sg.SceneSpec(0, "mixed", [sg._prim("sphere", [0.9, 0, 0], [0.3] * 3, [1, 1, 1])])
    with pytest.raises(ValueError):
        sg.make_scene(0, "cathedral")


def test_spec_kv_roundtrip():
    spec = sg.make_scene(11, "mixed")
    assert _spec_eq(sg.spec_from_kv(sg.spec_to_kv(spec)), spec)


def test_empty_background_pixel_is_transparent():
    spec = sg.make_scene(0, "two-sphere")
    # a ray that never enters the unit box
    rgba = sg.march_rays(spec, np.array([[0.0, 3.0, 2.8]]), np.array([[0.0, 0.0, -1.0]]))
    assert rgba[0, 3] == 0.0
    np.testing.assert_array_equal(rgba[0, :3], [1.0, 1.0, 1.0])


def test_opaque_red_sphere_pixel():
    spec = sg.SceneSpec(0, "two-sphere", [sg._prim("sphere", [0, 0, 0], [0.5] * 3, [1.0, 0.0, 0.0])])
    rgba = sg.march_rays(spec, np.array([[0.0, 0.0, 2.8]]), np.array([[0.0, 0.0, -1.0]]))
    np.testing.assert_allclose(rgba[0], [1.0, 0.0, 0.0, 1.0], atol=1e-9)


def test_silhouette_matches_projected_disc():
    r, res = 0.5, 128
    spec = sg.SceneSpec(0, "two-sphere", [sg._prim("sphere", [0, 0, 0], [r] * 3, [0.5] * 3, 0.002)],
                        sigma_max=2000.0)
    cam = sg.frontal_camera(res)
    rays = rd.generate_rays(cam)
    alpha = sg.march_rays(spec, rays.origins, rays.directions, n_samples=3000)[:, 3]
    # the tangent cone of half-angle asin(r/d) meets the image plane in a disc
    d = sg.CAMERA_RADIUS
    focal = (res / 2) / math.tan(cam.fov_y / 2)
    radius_px = focal * r / math.sqrt(d * d - r * r)
    assert alpha.sum() == pytest.approx(math.pi * radius_px ** 2, rel=0.02)


def test_ground_truth_agrees_with_neural_renderer_path():
    spec = sg.make_scene(3, "avatar")
    rays = rd.generate_rays(sg.make_cameras(3, 24)[1])
    neural = rd.render_field(spec.field, rays, spec.extent, None, 128)
    reference = sg.march_rays(spec, rays.origins, rays.directions, 128)
    assert np.abs(neural - reference).max() < 1e-3


def test_field_colour_is_albedo_inside_single_primitive():
    prim = sg._prim("box", [0.1, 0, 0], [0.3, 0.2, 0.2], [0.2, 0.4, 0.6])
    spec = sg.SceneSpec(0, "mixed", [prim])
    pts = np.array([[0.1, 0.0, 0.0], [0.38, 0.0, 0.0], [0.1, 0.2, 0.0]])
    sigma, rgb = spec.field(pts)
    assert sigma[0] == spec.sigma_max and 0 < sigma[2] < spec.sigma_max
    np.testing.assert_allclose(rgb, np.tile([0.2, 0.4, 0.6], (3, 1)), rtol=1e-12)


def test_cameras_on_sphere_within_band():
    cams = sg.make_cameras(66, 16)
    pos = np.array([c.position for c in cams])
    np.testing.assert_allclose(np.linalg.norm(pos, axis=1), sg.CAMERA_RADIUS, rtol=1e-12)
    elev = np.degrees(np.arcsin(pos[:, 1] / sg.CAMERA_RADIUS))
    assert np.all(np.abs(elev) <= 30.0 + 1e-9)
    assert len({tuple(np.round(p, 9)) for p in pos}) == 66


def test_heldout_fraction():
    tags = sg.split_tags(60, 6)
    assert (tags == "heldout").sum() == 6 and (tags == "train").sum() == 60
    assert (tags == "heldout").mean() == pytest.approx(6 / 66)


def test_dataset_is_byte_identical():
    a = sg.make_dataset(sg.make_scene(2), 4, 1, 12, 48)
    b = sg.make_dataset(sg.make_scene(2), 4, 1, 12, 48)
    assert a.images.tobytes() == b.images.tobytes()
    assert list(a.split) == list(b.split)


def test_sample_rays_targets_match_pixels():
    ds = sg.make_dataset(sg.make_scene(1), 4, 1, 10, 32)
    batch = ds.sample_rays(np.random.default_rng(0), 64)
    assert set(batch.pixels[:, 0]) <= set(ds.train_views)
    for (v, r, c), tgt in zip(batch.pixels, batch.target):
        np.testing.assert_array_equal(ds.images[v, r, c], tgt)
    full = ds.view_rays(2)
    np.testing.assert_array_equal(full.target, ds.images[2].reshape(-1, 4))


def test_save_and_load_scene(tmp_path):
    spec = sg.make_scene(4, "avatar")
    ds = sg.make_dataset(spec, 3, 1, 8, 32)
    portrait = sg.render_portrait(spec, 16, 32)
    out = sg.save_scene(tmp_path, "s004", spec, ds, portrait)
    assert (out / "views" / "003.png").exists() and (out / "portrait.png").exists()
    spec2, ds2, portrait2 = sg.load_scene(out)
    assert _spec_eq(spec, spec2)
    assert list(ds2.split) == list(ds.split)
    assert ds2.cameras == ds.cameras
    # PNG storage quantizes to 8 bits
    assert np.abs(ds2.images - ds.images).max() <= 0.5 / 255 + 1e-12
    assert portrait2.shape == (16, 16, 3)
