import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from triplanelab import decoder as dec
from triplanelab import renderer as rd
from triplanelab.metrics import psnr
from triplanelab.triplane import Triplane, sample


def camera_matrix_ray(cam, row, col):
    """Direction through a pixel center from an explicit intrinsic matrix and a look-at rotation."""
    f = (cam.height / 2.0) / math.tan(cam.fov_y / 2.0)
    k = np.array([[f, 0.0, cam.width / 2.0], [0.0, f, cam.height / 2.0], [0.0, 0.0, 1.0]])
    u, v = col + 0.5, row + 0.5
    xc = np.linalg.solve(k, np.array([u, v, 1.0]))
    # camera frame: x right, y down, z forward
    z = np.array(cam.look_at) - np.array(cam.position)
    z /= np.linalg.norm(z)
    x = np.cross(z, cam.up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    d = rot @ xc
    return d / np.linalg.norm(d)


def test_center_ray_is_view_axis():
    cam = rd.CameraConfig((1.0, 2.0, 3.0), (0.2, -0.1, 0.0), width=5, height=5)
    rays = rd.generate_rays(cam, [[2, 2]])
    axis = np.subtract(cam.look_at, cam.position)
    np.testing.assert_allclose(rays.directions[0], axis / np.linalg.norm(axis), atol=1e-15)


def test_corner_ray_matches_intrinsic_oracle():
    cam = rd.CameraConfig((0.0, 0.0, 3.0), fov_y=math.pi / 2, width=2, height=2)
    rays = rd.generate_rays(cam)
    for (r, c), d in zip(rays.pixels, rays.directions):
        np.testing.assert_allclose(d, camera_matrix_ray(cam, r, c), atol=1e-14)
    np.testing.assert_allclose(rays.directions[0], np.array([-0.5, 0.5, -1.0]) / math.sqrt(1.5), atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.floats(1.5, 4), st.floats(0.2, 2.5))
def test_rays_unit_norm_and_match_oracle(px, py, pz, fov):
    cam = rd.CameraConfig((px, py, pz), fov_y=fov, width=7, height=5)
    rays = rd.generate_rays(cam)
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
    for i in (0, 17, 34):
        r, c = rays.pixels[i]
        np.testing.assert_allclose(rays.directions[i], camera_matrix_ray(cam, r, c), atol=1e-12)


def test_degenerate_camera_and_bad_pixels():
    with pytest.raises(ValueError):
        rd.CameraConfig((0.0, 3.0, 0.0), up=(0.0, 1.0, 0.0))
    with pytest.raises(ValueError):
        rd.CameraConfig((0.0, 0.0, 3.0), fov_y=math.pi)
    cam = rd.CameraConfig((0.0, 0.0, 3.0), width=4, height=4)
    with pytest.raises(ValueError):
        rd.generate_rays(cam, [[4, 0]])


def _axis_rays(n=1):
    o = np.tile([0.0, 0.0, -2.0], (n, 1))
    d = np.tile([0.0, 0.0, 1.0], (n, 1))
    return rd.RayBatch(o, d, np.zeros((n, 2), dtype=int))


def test_empty_field_gives_background():
    field = lambda p: (np.zeros(len(p)), np.full((len(p), 3), 0.3))
    out = rd.render_field(field, _axis_rays(3), background=(0.2, 0.4, 0.9))
    assert np.array_equal(out[:, :3], np.tile([0.2, 0.4, 0.9], (3, 1)))
    assert np.all(out[:, 3] == 0.0)


def test_opaque_front_sample():
    c = np.array([0.1, 0.6, 0.3])
    field = lambda p: (np.full(len(p), 1e6), np.tile(c, (len(p), 1)))
    out = rd.render_field(field, _axis_rays())
    np.testing.assert_allclose(out[0, :3], c, atol=1e-12)
    assert out[0, 3] == pytest.approx(1.0)


def test_two_sample_closed_form():
    sig = np.array([[0.7, 2.3]])
    col = np.array([[[0.9, 0.1, 0.2], [0.3, 0.8, 0.5]]])
    delta = np.array([[0.4, 0.9]])
    bg = np.array([1.0, 1.0, 1.0])
    rgba, t_excl, _, _ = rd.composite(sig, col, delta, bg)
    a1 = 1 - math.exp(-0.7 * 0.4)
    a2 = 1 - math.exp(-2.3 * 0.9)
    expect = a1 * col[0, 0] + (1 - a1) * a2 * col[0, 1] + (1 - a1) * (1 - a2) * bg
    np.testing.assert_allclose(rgba[0, :3], expect, rtol=1e-14)
    assert rgba[0, 3] == pytest.approx(1 - (1 - a1) * (1 - a2), rel=1e-14)
    np.testing.assert_allclose(t_excl[0], [1.0, 1 - a1], rtol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_transmittance_monotone_and_alpha_bounded(seed):
    rng = np.random.default_rng(seed)
    sig = rng.exponential(3.0, size=(4, 16)) * (rng.random((4, 16)) < 0.6)
    rgb = rng.random((4, 16, 3))
    delta = rng.uniform(0.01, 0.3, size=(4, 16))
    rgba, t_excl, w, t_final = rd.composite(sig, rgb, delta, (1.0, 1.0, 1.0))
    assert np.all((t_excl >= 0) & (t_excl <= 1))
    assert np.all(np.diff(t_excl, axis=1) <= 0)
    assert np.all((rgba[:, 3] >= 0) & (rgba[:, 3] <= 1))
    assert np.all((rgba[:, :3] >= -1e-12) & (rgba[:, :3] <= 1 + 1e-12))


def test_stratified_errors_and_midpoints():
    with pytest.raises(ValueError):
        rd.stratified_samples(1, 1, 0.1, 4.0)
    with pytest.raises(ValueError):
        rd.stratified_samples(1, 8, 2.0, 2.0)
    t, delta = rd.stratified_samples(2, 4, 0.0, 4.0)
    np.testing.assert_allclose(t[0], [0.5, 1.5, 2.5, 3.5])
    np.testing.assert_allclose(delta[0], [1.0, 1.0, 1.0, 0.5])


def test_render_rays_rejects_near_after_far():
    tp = Triplane.random(8, 2, rng=0)
    p = dec.init_decoder(6, 8, 2, rng=0)
    with pytest.raises(ValueError):
        rd.render_rays(tp, p, _axis_rays(), n_samples=8, near=3.0, far=1.0)


def _scene(seed=0):
    rng = np.random.default_rng(seed)
    tp = Triplane.random(8, 2, rng=rng, std=1.0)
    p = dec.init_decoder(6, 16, 2, rng=rng)
    cam = rd.CameraConfig((0.3, 0.4, 2.5), width=2, height=2)
    rays = rd.generate_rays(cam)
    rays.target = rng.random((4, 4))
    return tp, p, rays


def test_backward_zero_upstream():
    tp, p, rays = _scene()
    _, cache = rd.render_rays(tp, p, rays, n_samples=8)
    gp, gw = rd.render_backward(cache, np.zeros((4, 4)))
    assert not gp.any() and not gw.any()


def test_single_sample_chain_rule():
    # One sample inside the box (z=0.25), the second outside (z=1.75)
    rng = np.random.default_rng(3)
    tp = Triplane.random(8, 2, rng=rng)
    w = rng.normal(0, 0.5, size=(4, 6))
    p = dec.DecoderParams([(w, rng.normal(0, 0.5, 4))], "identity")
    rays = _axis_rays()
    rgba, cache = rd.render_rays(tp, p, rays, n_samples=2, near=1.5, far=4.5)
    feat = sample(tp, np.array([0.0, 0.0, 0.25]))
    z = w @ feat + p.layers[0][1]
    sigma = math.log1p(math.exp(z[0]))
    c = 1 / (1 + np.exp(-z[1:]))
    a = 1 - math.exp(-sigma * 1.5)
    np.testing.assert_allclose(rgba[0], np.r_[a * c + (1 - a), a], rtol=1e-13)
    # d alpha / d W[0, :] = exp(-sigma * delta) * delta * softplus'(z0) * feat
    _, g = rd.render_backward(cache, np.array([[0.0, 0.0, 0.0, 1.0]]))
    expect = math.exp(-sigma * 1.5) * 1.5 / (1 + math.exp(-z[0])) * feat
    np.testing.assert_allclose(g[:6], expect, rtol=1e-12)
    # d R / d W[1, :] = a * sigmoid'(z1) * feat
    _, g = rd.render_backward(cache, np.array([[1.0, 0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(g[6:12], a * c[0] * (1 - c[0]) * feat, rtol=1e-12)


def test_end_to_end_finite_differences():
    tp, p, rays = _scene(5)
    rng = np.random.default_rng(11)

    def loss(tp_, p_):
        rgba, _ = rd.render_rays(tp_, p_, rays, n_samples=8)
        return rd.render_loss(rgba, rays.target)[0]

    rgba, cache = rd.render_rays(tp, p, rays, n_samples=8)
    _, d = rd.render_loss(rgba, rays.target)
    gp, gw = rd.render_backward(cache, d)
    h = 1e-6
    flat_tp = tp.planes.reshape(-1)
    touched = np.flatnonzero(gp.reshape(-1))
    for idx in rng.choice(touched, 10, replace=False):
        old = flat_tp[idx]
        flat_tp[idx] = old + h
        fp = loss(tp, p)
        flat_tp[idx] = old - h
        fm = loss(tp, p)
        flat_tp[idx] = old
        fd = (fp - fm) / (2 * h)
        assert abs(fd - gp.reshape(-1)[idx]) <= 1e-4 * abs(fd) + 1e-10
    flat = p.flatten()
    for idx in rng.choice(flat.size, 10, replace=False):
        e = np.zeros_like(flat)
        e[idx] = h
        fd = (loss(tp, p.with_flat(flat + e)) - loss(tp, p.with_flat(flat - e))) / (2 * h)
        assert abs(fd - gw[idx]) <= 1e-4 * abs(fd) + 1e-10


def test_stale_cache_rejected():
    tp, p, rays = _scene()
    _, cache = rd.render_rays(tp, p, rays, n_samples=8)
    tp.planes[0, 0, 0, 0] += 1.0
    with pytest.raises(rd.StaleCacheError):
        rd.render_backward(cache, np.ones((4, 4)))


def test_render_loss_values_and_gradient():
    rng = np.random.default_rng(0)
    t = rng.random((6, 4))
    assert rd.render_loss(t, t)[0] == 0.0
    assert rd.render_loss(t + 0.1, t)[0] == pytest.approx(0.01, rel=1e-12)
    pred = rng.random((6, 4))
    _, g = rd.render_loss(pred, t)
    h = 1e-6
    for i, j in [(0, 0), (3, 2), (5, 3)]:
        q = pred.copy()
        q[i, j] += h
        fp = rd.render_loss(q, t)[0]
        q[i, j] -= 2 * h
        fm = rd.render_loss(q, t)[0]
        assert (fp - fm) / (2 * h) == pytest.approx(g[i, j], rel=1e-6)
    with pytest.raises(ValueError):
        rd.render_loss(pred, t[:5])


def test_zero_field_grid_is_empty():
    grid = rd.OccupancyGrid(16)
    rd.update_occupancy_field(lambda p: (np.zeros(len(p)), np.zeros((len(p), 3))), grid)
    assert not grid.occupied.any()


def test_ball_occupancy_matches_volume():
    g, r = 32, 0.5
    ball = lambda p: (np.where(np.linalg.norm(p, axis=1) < r, 100.0, 0.0), np.zeros((len(p), 3)))
    grid = rd.OccupancyGrid(g)
    rd.update_occupancy_field(ball, grid)
    expected = 4.0 / 3.0 * math.pi * (r * g / 2) ** 3
    assert abs(grid.occupied.sum() - expected) / expected < 0.15


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_occupancy_update_is_decayed_max(seed):
    g = rd.OccupancyGrid(8)
    rng = np.random.default_rng(seed)
    field = lambda p: (np.exp(-8 * np.sum(p ** 2, axis=1)), np.zeros((len(p), 3)))
    rd.update_occupancy_field(field, g, rng)
    before = g.density.copy()
    rd.update_occupancy_field(field, g, rng)
    assert np.all(g.density >= g.decay * before)
    # a static field probed at fixed centers keeps the same flags
    h = rd.OccupancyGrid(8)
    rd.update_occupancy_field(field, h)
    flags = h.occupied.copy()
    rd.update_occupancy_field(field, h)
    assert np.array_equal(h.occupied, flags)


def test_grid_render_matches_reference():
    # smooth blob: density falls below the threshold well inside the box corners
    field = lambda p: (60.0 * np.exp(-np.sum(p ** 2, axis=1) / 0.08),
                       0.5 + 0.4 * np.tanh(p))
    grid = rd.OccupancyGrid(32)
    rng = np.random.default_rng(0)
    for _ in range(16):
        rd.update_occupancy_field(field, grid, rng)
    assert 0 < grid.occupied.mean() < 0.5
    rays = rd.generate_rays(rd.CameraConfig((0.4, 0.6, 2.6), width=24, height=24))
    ref = rd.render_field(field, rays, grid=None, n_samples=96)
    acc = rd.render_field(field, rays, grid=grid, n_samples=96)
    assert np.max(np.abs(ref - acc)) < 1e-3


def test_png_roundtrip_and_ppm(tmp_path):
    img = np.random.default_rng(0).random((5, 7, 4))
    rd.save_png(img, tmp_path / "a.png")
    back = rd.load_png(tmp_path / "a.png")
    np.testing.assert_array_equal(rd.to_uint8(back), rd.to_uint8(img))
    rd.save_ppm(img, tmp_path / "a.ppm")
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")
    with pytest.raises(ValueError):
        rd.save_png(np.zeros((4, 4)), tmp_path / "b.png")


def test_render_manifest(tmp_path):
    from triplanelab.config import parse_kv

    cams = [rd.CameraConfig((0.0, 0.0, 3.0)), rd.CameraConfig((3.0, 0.0, 0.0), width=32, height=16)]
    rd.write_render_manifest(cams, tmp_path / "m.kv")
    kv = parse_kv((tmp_path / "m.kv").read_text())
    assert kv["view001.size"] == [32, 16] or kv["view001.size"] == "32 16"


def test_trained_quality_metric_is_finite():
    tp, p, rays = _scene()
    img = rd.render_image(tp, p, rd.CameraConfig((0.0, 0.0, 3.0), width=8, height=8), n_samples=16)
    assert img.shape == (8, 8, 4)
    assert math.isfinite(psnr(img, img * 0.9))
