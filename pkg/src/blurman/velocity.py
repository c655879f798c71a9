"""Canonical-space velocity of observation points and the per-point blur score.

A fixed observation point x maps to canonical points T(x, p(t)) and
T(x, p(t + dt)); their finite difference over dt is the velocity.  Only the
component tangential to the nearest body surface is kept, and its magnitude
goes through ``v0 + softplus(|v|)`` so static regions keep a floor variance.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .body import CapsuleBody, Pose, deform_to_canonical, nearest_surface_normal


@dataclass(frozen=True)
class VelocityConfig:
    dt: float = 0.1 / 8
    v0: float = 0.1

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("velocity dt must be positive")
        if not self.v0 > 0:
            raise ValueError("velocity floor v0 must be positive")

    @property
    def static_score(self) -> float:
        """Score of a point that does not move: v0 + log 2."""
        return self.v0 + float(np.log(2.0))


def _as_vector(p):
    return p.vector() if isinstance(p, Pose) else p


def canonical_velocity(x, pose_now, pose_next, body: CapsuleBody, dt: float):
    """Finite-difference canonical velocity; returns ``(v, x_canonical_now)``."""
    now = deform_to_canonical(x, _as_vector(pose_now), body)
    nxt = deform_to_canonical(x, _as_vector(pose_next), body)
    return (nxt - now) / dt, now


def point_velocity(x, t: float, pose_fn: Callable, body: CapsuleBody, cfg: VelocityConfig):
    """Velocity (N, 3) of observation points x (N, 3) at time t."""
    v, _ = canonical_velocity(x, pose_fn(t), pose_fn(t + cfg.dt), body, cfg.dt)
    return v


def project_tangential(v, n, check: bool = True):
    """Remove the component of v along the unit normal n."""
    if check:
        nn = np.linalg.norm(np.asarray(ad.value(n)), axis=-1)
        if np.any(np.abs(nn - 1.0) > 1e-6):
            raise ValueError("project_tangential needs unit normals")
    return v - ad.sum(v * n, axis=-1, keepdims=True) * n


def velocity_score(v_hat, cfg: VelocityConfig):
    """``v0 + softplus(|v_hat|)`` along the last axis."""
    return cfg.v0 + ad.softplus(ad.norm(v_hat, axis=-1))


def point_scores(x, pose_now, pose_next, body: CapsuleBody, cfg: VelocityConfig):
    """Blur score per observation point (..., N) with tangential projection.

    Points whose canonical image lies on a capsule axis have no defined
    normal; they keep the unprojected velocity.
    """
    v, xc = canonical_velocity(x, pose_now, pose_next, body, cfg.dt)
    n, on_axis = nearest_surface_normal(xc, body)
    v_hat = project_tangential(v, n, check=False)
    if np.any(on_axis):
        v_hat = ad.where(np.asarray(on_axis)[..., None], v, v_hat)
    return velocity_score(v_hat, cfg)


@dataclass
class VelocityMap:
    values: np.ndarray  # (H, W), >= 0
    timestamp: float


_VMAP_MAGIC = "VMAP"


def write_velocity_map(vmap: VelocityMap, path, scale: float = 1.0) -> None:
    """Single-channel float image: one text header line, then float32 LE rows.

    Stored values are ``V / scale``; the header records the scale.
    """
    h, w = vmap.values.shape
    header = f"{_VMAP_MAGIC} {w} {h} {scale!r} {vmap.timestamp!r}\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(vmap.values / scale, dtype="<f4").tobytes())


def read_velocity_map(path) -> VelocityMap:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    magic, w, h, scale, ts = data[:nl].decode().split()
    if magic != _VMAP_MAGIC:
        raise ValueError(f"{path}: not a velocity map")
    vals = np.frombuffer(data, dtype="<f4", offset=nl + 1).astype(float).reshape(int(h), int(w))
    return VelocityMap(vals * float(scale), float(ts))


__all__ = [
    "VelocityConfig", "VelocityMap", "canonical_velocity", "point_velocity", "project_tangential",
    "velocity_score", "point_scores", "write_velocity_map", "read_velocity_map",
]
