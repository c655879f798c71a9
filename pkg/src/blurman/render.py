"""Pinhole rays, stratified sampling and compositing through the deformed field."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .body import CapsuleBody, Pose, bone_transforms, deform_to_canonical, posed_capsules
from .field import CanonicalField, query
from .velocity import VelocityConfig, point_scores


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() > 1e-9:
            raise ValueError("camera rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def project(self, pts: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> pixel coordinates (N, 2)."""
        pc = pts @ self.rotation.T + self.translation
        return np.stack([self.fx * pc[:, 0] / pc[:, 2] + self.cx,
                         self.fy * pc[:, 1] / pc[:, 2] + self.cy], axis=-1)


def look_at(eye, target, up=(0.0, 1.0, 0.0), *, fx: float, fy: float | None = None,
            width: int, height: int) -> Camera:
    """Camera at ``eye`` looking at ``target``; image x right, y down."""
    eye = np.asarray(eye, dtype=float)
    fwd = np.asarray(target, dtype=float) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Camera(fx, fx if fy is None else fy, width / 2.0, height / 2.0, R, -R @ eye, width, height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float = 1e-3
    far: float = 10.0


def _pixel_directions(camera: Camera, u, v):
    d_cam = np.stack([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, np.ones_like(u)], axis=-1)
    d = d_cam @ camera.rotation
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_ray(camera: Camera, pixel, jitter=(0.5, 0.5)) -> Ray:
    """Ray through ``pixel + jitter``; ``jitter=(0.5, 0.5)`` is the pixel center."""
    u, v = pixel
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise IndexError(f"pixel {pixel} outside {camera.width}x{camera.height} image")
    d = _pixel_directions(camera, np.array(u + jitter[0], dtype=float), np.array(v + jitter[1], dtype=float))
    return Ray(camera.center.copy(), d)


def pixel_rays(camera: Camera, pixels: np.ndarray):
    """Origins and unit directions (M, 3) through the centers of integer pixels (M, 2)."""
    pixels = np.asarray(pixels)
    d = _pixel_directions(camera, pixels[:, 0] + 0.5, pixels[:, 1] + 0.5)
    return np.broadcast_to(camera.center, d.shape).copy(), d


def sample_depths(near, far, n_samples: int, rng: np.random.Generator | None = None):
    """Stratified depths (..., P) and intervals; midpoints of each stratum without ``rng``."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=float)[..., None]
    far = np.asarray(far, dtype=float)[..., None]
    offs = 0.5 if rng is None else rng.uniform(size=near.shape[:-1] + (n_samples,))
    t = near + (np.arange(n_samples) + offs) * (far - near) / n_samples
    delta = np.concatenate([t[..., 1:] - t[..., :-1], far - t[..., -1:]], axis=-1)
    return t, delta


def sample_points(ray: Ray, n_samples: int, rng: np.random.Generator | None = None):
    t, delta = sample_depths(ray.near, ray.far, n_samples, rng)
    return ray.origin + t[:, None] * ray.direction, delta


def _exclusive_cumsum_matrix(n: int) -> np.ndarray:
    return np.triu(np.ones((n, n)), k=1)


def composite(colors, sigmas, deltas):
    """Alpha compositing along the last sample axis.

    colors (..., P, 3), sigmas (..., P), deltas (..., P) ->
    (C (..., 3), A (...), weights (..., P), transmittance (..., P)).
    """
    sv = np.asarray(ad.value(sigmas))
    if np.shape(ad.value(colors))[:-1] != sv.shape or np.shape(deltas) != sv.shape:
        raise ValueError("colors, sigmas and deltas must have matching sample counts")
    if np.any(sv < 0):
        raise ValueError("densities must be non-negative")
    tau = sigmas * deltas
    alpha = 1.0 - ad.exp(-tau)
    trans = ad.exp(-ad.matmul(tau, _exclusive_cumsum_matrix(sv.shape[-1])))
    w = trans * alpha
    color = ad.sum(ad.expand_dims(w, -1) * colors, axis=-2)
    return color, ad.sum(w, axis=-1), w, trans


@dataclass
class RenderOutput:
    color: object  # (..., 3)
    alpha: object  # (...)
    velocity: np.ndarray | None  # (...), detached
    weights: object  # (..., P)
    transmittance: object


def posed_bounds(body: CapsuleBody, pose_vec, margin: float = 0.05):
    """Observation-space box (lo, hi) around the posed capsules, per leading batch entry."""
    R, t = bone_transforms(body.skeleton, np.asarray(ad.value(pose_vec)))
    a, b = posed_capsules(body, R, t)
    r = body.radii[:, None]
    lo = np.minimum(a - r, b - r).min(axis=-2) - margin
    hi = np.maximum(a + r, b + r).max(axis=-2) + margin
    return lo, hi


def ray_box(origins, dirs, lo, hi, eps: float = 1e-4):
    """Slab test; returns near, far, hit (all shaped like the ray batch)."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (lo[..., None, :] - origins) * inv
    t1 = (hi[..., None, :] - origins) * inv
    near = np.maximum(np.minimum(t0, t1).max(axis=-1), eps)
    far = np.maximum(t0, t1).min(axis=-1)
    hit = far > near
    return np.where(hit, near, eps), np.where(hit, far, 2 * eps), hit


def render_rays(field: CanonicalField, body: CapsuleBody, pose, origins, dirs, n_samples: int = 64, *,
                rng: np.random.Generator | None = None, pose_next=None,
                vcfg: VelocityConfig | None = None, background: float = 0.0, bounds=None) -> RenderOutput:
    """Render B batches of M rays, batch b under pose[b].

    ``pose`` is (B, D) (array or Variable) and ``origins``/``dirs`` are (B, M, 3).
    With ``pose_next`` and ``vcfg`` given, the velocity channel is composited
    with detached sample weights.  Sample intervals come from the posed body
    box unless ``bounds=(lo, hi)`` fixes them; the box is not differentiated.
    """
    pv = np.asarray(ad.value(pose))
    B, M = origins.shape[0], origins.shape[1]
    lo, hi = posed_bounds(body, pv) if bounds is None else (np.broadcast_to(bounds[0], (B, 3)),
                                                             np.broadcast_to(bounds[1], (B, 3)))
    near, far, hit = ray_box(origins, dirs, lo, hi)
    t, delta = sample_depths(near, far, n_samples, rng)
    pts = origins[:, :, None, :] + t[..., None] * dirs[:, :, None, :]  # (B, M, P, 3)
    flat = pts.reshape(B, M * n_samples, 3)
    xc = deform_to_canonical(flat, pose, body)
    color, sigma = query(field, ad.reshape(xc, (B * M * n_samples, 3)))
    color = ad.reshape(color, (B, M, n_samples, 3))
    sigma = ad.reshape(sigma, (B, M, n_samples)) * hit[..., None].astype(float)
    C, A, w, T = composite(color, sigma, delta)
    if background:
        C = C + ad.expand_dims(1.0 - A, -1) * background
    V = None
    if pose_next is not None and vcfg is not None:
        score = point_scores(flat, pv, np.asarray(ad.value(pose_next)), body, vcfg)
        score = np.asarray(score).reshape(B, M, n_samples)
        V = np.sum(np.asarray(ad.value(w)) * score, axis=-1)
    return RenderOutput(C, A, V, w, T)


def render_pixel(field, body, pose_fn: Callable, camera: Camera, pixel, t: float,
                 vcfg: VelocityConfig | None = None, n_samples: int = 64) -> RenderOutput:
    """Color, alpha and velocity of a single pixel at time t."""
    ray = generate_ray(camera, pixel)
    p_now = _vec(pose_fn(t))
    p_next = _vec(pose_fn(t + vcfg.dt)) if vcfg is not None else None
    out = render_rays(field, body, p_now[None], ray.origin[None, None], ray.direction[None, None],
                      n_samples, pose_next=None if p_next is None else p_next[None], vcfg=vcfg)
    return RenderOutput(np.asarray(ad.value(out.color))[0, 0], float(ad.value(out.alpha)[0, 0]),
                        None if out.velocity is None else float(out.velocity[0, 0]),
                        np.asarray(ad.value(out.weights))[0, 0], np.asarray(ad.value(out.transmittance))[0, 0])


def _vec(p):
    return p.vector() if isinstance(p, Pose) else np.asarray(p, dtype=float)


def render_image(field, body, pose_vec, camera: Camera, n_samples: int = 64, *, pose_next=None,
                 vcfg: VelocityConfig | None = None, chunk: int = 1024, background: float = 0.0):
    """Forward-only full-frame render -> (rgb (H, W, 3), alpha (H, W), velocity (H, W) or None).

    Only rays that hit the posed body box are traced; the rest show the background.
    """
    H, W = camera.height, camera.width
    pose_vec = _vec(pose_vec)
    vv, uu = np.mgrid[0:H, 0:W]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    origins, dirs = pixel_rays(camera, pixels)
    lo, hi = posed_bounds(body, pose_vec[None])
    _, _, hit = ray_box(origins[None], dirs[None], lo, hi)
    idx = np.flatnonzero(hit[0])
    rgb = np.full((H * W, 3), float(background))
    alpha = np.zeros(H * W)
    vel = np.zeros(H * W) if vcfg is not None else None
    grid = np.asarray(ad.value(field.grid))
    fld = field.with_grid(grid)
    for s in range(0, len(idx), chunk):
        sel = idx[s:s + chunk]
        out = render_rays(fld, body, pose_vec[None], origins[sel][None], dirs[sel][None], n_samples,
                          pose_next=None if pose_next is None else _vec(pose_next)[None], vcfg=vcfg,
                          background=background)
        rgb[sel] = out.color[0]
        alpha[sel] = out.alpha[0]
        if vel is not None:
            vel[sel] = out.velocity[0]
    return rgb.reshape(H, W, 3), alpha.reshape(H, W), None if vel is None else vel.reshape(H, W)
