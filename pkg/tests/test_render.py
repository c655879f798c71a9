import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blurman import autodiff as ad
from blurman.body import CapsuleBody, Pose, default_skeleton
from blurman.field import CanonicalField, init_field
from blurman.render import (Camera, composite, generate_ray, look_at, pixel_rays, render_image, render_pixel,
                            render_rays, sample_depths)
from blurman.velocity import VelocityConfig


def test_single_opaque_sample():
    C, A, w, T = composite(np.array([[0.2, 0.4, 0.6]]), np.array([1e4]), np.array([1.0]))
    assert np.allclose(C, [0.2, 0.4, 0.6])
    assert np.isclose(A, 1.0)


def test_uniform_medium_matches_beer_lambert():
    n, L, sigma = 200, 0.7, 2.3
    deltas = np.full(n, L / n)
    c = np.array([0.3, 0.5, 0.9])
    C, A, w, T = composite(np.tile(c, (n, 1)), np.full(n, sigma), deltas)
    assert np.isclose(A, 1 - np.exp(-sigma * L), atol=1e-12)
    assert np.allclose(C, c * A, atol=1e-12)


def test_two_slab_oracle():
    # front slab absorbs a fraction, the back one sees the remainder
    cols = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    C, A, w, T = composite(cols, np.array([0.5, 3.0]), np.array([1.0, 1.0]))
    a1, a2 = 1 - np.exp(-0.5), 1 - np.exp(-3.0)
    assert np.allclose(w, [a1, (1 - a1) * a2], atol=1e-12)
    assert np.allclose(T, [1.0, np.exp(-0.5)], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 16, elements=st.floats(0, 50)), arrays(np.float64, 16, elements=st.floats(1e-3, 0.5)))
def test_composite_invariants(sig, dl):
    cols = np.random.default_rng(0).uniform(size=(16, 3))
    C, A, w, T = composite(cols, sig, dl)
    assert 0 <= A <= 1 + 1e-12
    assert np.all(w >= 0)
    assert np.isclose(w.sum(), A, atol=1e-12)
    assert np.all(np.diff(T) <= 1e-15)
    assert np.all(C <= A + 1e-12)


def test_negative_density_rejected():
    with pytest.raises(ValueError):
        composite(np.zeros((2, 3)), np.array([1.0, -0.1]), np.ones(2))


def test_stratified_samples_stay_in_strata():
    rng = np.random.default_rng(1)
    t, d = sample_depths(np.array([1.0]), np.array([3.0]), 8, rng)
    edges = 1 + np.arange(9) * 0.25
    assert np.all((t[0] >= edges[:-1]) & (t[0] <= edges[1:]))
    assert np.all(d > 0)
    with pytest.raises(ValueError):
        sample_depths(0.0, 1.0, 1)


def test_center_pixel_ray_points_forward():
    cam = look_at((0, 0, 3), (0, 0, 0), fx=50, width=32, height=32)
    ray = generate_ray(cam, (16, 16), jitter=(0.0, 0.0))
    assert np.allclose(ray.direction, [0, 0, -1], atol=1e-12)
    assert np.allclose(ray.origin, [0, 0, 3])
    with pytest.raises(IndexError):
        generate_ray(cam, (32, 0))


def test_projection_inverts_pixel_rays():
    cam = look_at((0.3, 0.2, 3), (0, 0.1, 0), fx=80, width=40, height=30)
    pix = np.array([[3, 4], [20, 15], [39, 29]])
    o, d = pixel_rays(cam, pix)
    assert np.allclose(cam.project(o + 2.0 * d), pix + 0.5, atol=1e-9)


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        Camera(0.0, 1.0, 0, 0, np.eye(3), np.zeros(3), 4, 4)


@pytest.fixture(scope="module")
def scene():
    body = CapsuleBody(default_skeleton())
    fld = init_field((24, 24, 12), body=body)
    grid = fld.grid.copy()
    grid[..., 3] = 40.0
    grid[..., :3] = [0.4, -0.2, 1.0]
    cam = look_at((0, 0.1, 3.2), (0, 0.1, 0), fx=60, width=32, height=32)
    return body, fld.with_grid(grid), cam


def test_missed_ray_is_empty(scene):
    body, fld, cam = scene
    out = render_pixel(fld, body, lambda t: Pose.identity(body.skeleton), cam, (0, 0), 0.0, VelocityConfig())
    assert np.array_equal(out.color, np.zeros(3))
    assert out.alpha == 0.0
    assert out.velocity == 0.0


def test_static_pose_velocity_floor(scene):
    body, fld, cam = scene
    cfg = VelocityConfig()
    out = render_pixel(fld, body, lambda t: Pose.identity(body.skeleton), cam, (16, 13), 0.0, cfg, n_samples=64)
    assert out.alpha > 0.999
    assert abs(out.velocity - out.alpha * (cfg.v0 + np.log(2))) < 1e-9


def test_background_fills_transparent_mass(scene):
    body, fld, cam = scene
    pose = Pose.identity(body.skeleton).vector()
    rgb0, a, _ = render_image(fld, body, pose, cam, 16)
    rgb1, _, _ = render_image(fld, body, pose, cam, 16, background=0.25)
    assert np.allclose(rgb1, rgb0 + (1 - a)[..., None] * 0.25, atol=1e-12)
    assert np.all(rgb1[0, 0] == 0.25)


def test_render_image_matches_batched_rays(scene):
    body, fld, cam = scene
    pose = Pose.identity(body.skeleton).vector()
    rgb, alpha, _ = render_image(fld, body, pose, cam, 16, chunk=37)
    pix = np.array([[16, 13], [10, 20], [22, 8]])
    o, d = pixel_rays(cam, pix)
    out = render_rays(fld, body, pose[None], o[None], d[None], 16)
    assert np.allclose(out.color[0], rgb[pix[:, 1], pix[:, 0]], atol=1e-12)
    assert np.allclose(out.alpha[0], alpha[pix[:, 1], pix[:, 0]], atol=1e-12)


def test_render_gradient_wrt_grid_and_pose(scene):
    body, fld, cam = scene
    rng = np.random.default_rng(3)
    grid = fld.grid + rng.normal(scale=0.5, size=fld.grid.shape)
    grid[..., 3] = rng.normal(size=grid.shape[:3])
    pose = rng.normal(scale=0.1, size=body.skeleton.pose_dim)
    o, d = pixel_rays(cam, np.array([[16, 12], [15, 18], [19, 10]]))
    wts = rng.normal(size=(1, 3, 3))

    def f_grid(g):
        out = render_rays(CanonicalField(fld.resolution, fld.box_min, fld.box_max, g), body, pose[None],
                          o[None], d[None], 12)
        return ad.sum(out.color * wts) + ad.sum(out.alpha)

    # hold the sample interval fixed so finite differences see the same quadrature
    box = (np.array([-1.5, -1.5, -1.0]), np.array([1.5, 1.5, 1.0]))

    def f_pose(p):
        out = render_rays(CanonicalField(fld.resolution, fld.box_min, fld.box_max, grid), body, ad.reshape(p, (1, -1)),
                          o[None], d[None], 24, bounds=box)
        return ad.sum(out.color * wts) + ad.sum(out.alpha)

    leaf = ad.Variable(grid.copy(), requires_grad=True)
    with ad.Tape() as tape:
        out = f_grid(leaf)
    g = ad.backward(tape, out)[leaf]
    probe = np.argsort(-np.abs(g).ravel())[:30]
    assert ad.finite_diff_check(f_grid, grid, step=1e-6, indices=probe) < 1e-4
    assert ad.finite_diff_check(f_pose, pose, step=1e-6) < 1e-4
