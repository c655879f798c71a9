import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from blurman import autodiff as ad
from blurman.body import CapsuleBody, Pose, default_skeleton, make_skeleton
from blurman.velocity import (VelocityConfig, VelocityMap, point_scores, point_velocity, project_tangential,
                              read_velocity_map, velocity_score, write_velocity_map)


def spinning_bone(omega):
    body = CapsuleBody(make_skeleton([("b", -1, (0, 0, 0), (1, 0, 0), 0.1)]))
    return body, lambda t: Pose([0, 0, omega * t], [0, 0, 0], np.zeros((0, 3)))


def test_constant_pose_has_zero_velocity():
    body = CapsuleBody(default_skeleton())
    x = np.random.default_rng(0).normal(size=(5, 3))
    v = point_velocity(x, 0.3, lambda t: Pose.identity(body.skeleton), body, VelocityConfig())
    assert np.array_equal(v, np.zeros((5, 3)))


@pytest.mark.parametrize("omega", [0.5, 1.0, 2.0])
def test_rigid_rotation_speed(omega):
    body, pose_fn = spinning_bone(omega)
    r = 0.6
    x = np.array([[r, 0.1, 0.0]])  # on the bone surface, y offset = radius
    v = point_velocity(x, 0.0, pose_fn, body, VelocityConfig(dt=1 / 240))
    speed = np.linalg.norm(v)
    assert abs(speed - omega * np.hypot(r, 0.1)) / (omega * np.hypot(r, 0.1)) < 0.01


def test_root_translation_is_exact():
    body = CapsuleBody(default_skeleton())
    s = np.array([0.3, -0.4, 1.2])
    fn = lambda t: Pose([0, 0, 0], s * t, np.zeros((body.skeleton.n_joints - 1, 3)))  # noqa: E731
    v = point_velocity(np.array([[0.1, 0.2, 0.3]]), 0.5, fn, body, VelocityConfig(dt=0.01))
    assert np.allclose(np.linalg.norm(v), np.linalg.norm(s), atol=1e-9)


def test_projection_examples():
    n = np.array([0.0, 0.0, 1.0])
    assert np.array_equal(project_tangential(np.array([1.0, 2.0, 3.0]), n), [1.0, 2.0, 0.0])
    assert np.allclose(project_tangential(np.array([0, 0, 5.0]), n), 0)
    assert np.array_equal(project_tangential(np.array([1.0, -1.0, 0.0]), n), [1.0, -1.0, 0.0])
    with pytest.raises(ValueError):
        project_tangential(np.ones(3), np.array([0, 0, 2.0]))


def test_projection_invariants_bulk():
    rng = np.random.default_rng(11)
    v = rng.normal(size=(10_000, 3)) * rng.uniform(0.01, 10, size=(10_000, 1))
    n = rng.normal(size=(10_000, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    p = project_tangential(v, n)
    assert np.abs(np.sum(p * n, -1)).max() <= 1e-12 * max(1.0, np.abs(v).max())
    assert np.abs(project_tangential(p, n) - p).max() <= 1e-12 * max(1.0, np.abs(v).max())
    assert np.all(np.linalg.norm(p, axis=-1) <= np.linalg.norm(v, axis=-1) + 1e-12)


def test_score_examples():
    cfg = VelocityConfig(v0=0.1)
    assert np.isclose(velocity_score(np.zeros(3), cfg), 0.1 + np.log(2), atol=1e-15)
    assert np.isclose(velocity_score(np.array([10.0, 0, 0]), cfg), 0.1 + 10.0000454, atol=1e-7)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 50), st.floats(0, 50))
def test_score_monotone(a, b):
    cfg = VelocityConfig()
    sa = velocity_score(np.array([a, 0, 0]), cfg)
    sb = velocity_score(np.array([0, b, 0]), cfg)
    if a < b:
        assert sa < sb or np.isclose(sa, sb, rtol=1e-15)
    assert sa >= cfg.v0


def test_config_validation():
    with pytest.raises(ValueError):
        VelocityConfig(dt=0)
    with pytest.raises(ValueError):
        VelocityConfig(v0=-1)
    assert np.isclose(VelocityConfig().dt, 0.1 / 8)


def test_score_gradient_wrt_pose():
    body = CapsuleBody(default_skeleton())
    rng = np.random.default_rng(5)
    p0 = rng.normal(scale=0.2, size=body.skeleton.pose_dim)
    p1 = p0 + rng.normal(scale=0.02, size=p0.shape)
    x = np.array([[0.45, 0.5, 0.08], [0.0, 0.2, 0.12], [-0.3, 0.55, 0.0]])
    cfg = VelocityConfig()
    f = lambda p: ad.sum(point_scores(x, p, p1, body, cfg))  # noqa: E731
    assert ad.finite_diff_check(f, p0, step=1e-6) < 1e-4


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 3), elements=st.floats(-1, 1)), st.integers(0, 1000))
def test_scores_bounded_below(x, seed):
    body = CapsuleBody(default_skeleton())
    rng = np.random.default_rng(seed)
    p0 = rng.normal(scale=0.3, size=body.skeleton.pose_dim)
    s = point_scores(x, p0, p0 + rng.normal(scale=0.05, size=p0.shape), body, VelocityConfig())
    assert np.all(np.isfinite(s)) and np.all(s >= 0.1 + np.log(2) - 1e-12)


def test_velocity_map_round_trip(tmp_path):
    vals = np.random.default_rng(1).uniform(0, 4, size=(6, 9)).astype(np.float32).astype(float)
    write_velocity_map(VelocityMap(vals, 0.25), tmp_path / "v.bin", scale=2.0)
    back = read_velocity_map(tmp_path / "v.bin")
    assert back.timestamp == 0.25
    assert np.allclose(back.values, vals, rtol=1e-6)
