"""Training objectives: velocity-weighted color and alpha terms, event term, pose prior.

Per-pixel terms are averaged over the batch.  All velocity arguments are
treated as constants; passing a Variable simply uses its value.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .events import predicted_events

LOSS_KEYS = ("rgb", "event", "pose", "alpha", "total")


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class LossWeights:
    event: float = 0.2
    pose: float = 0.01
    alpha: float = 0.01
    patch: float = 0.1  # weight of the per-patch color term

    def __post_init__(self):
        for name in ("event", "pose", "alpha", "patch"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")


def _variance(V, like_shape) -> np.ndarray:
    v = np.asarray(ad.value(V), dtype=float)
    if np.any(~np.isfinite(v)) or np.any(v <= 0):
        raise ValueError("velocity variance must be finite and positive")
    return np.broadcast_to(v, like_shape)


def photometric_loss(C, V, C_gt, patch_weight: float = 0.1):
    """Velocity-weighted squared color error plus a per-patch term (batch means).

    ``C`` and ``C_gt`` are (..., M, 3): leading axes index patches, M the
    pixels of a patch.  ``V`` is (..., M).  The patch term divides each
    patch's squared error by the patch-mean of V.
    """
    shape = np.shape(ad.value(C))
    V = _variance(V, shape[:-1])
    sq = ad.sum((C - C_gt) ** 2, axis=-1)  # (..., M)
    pixel = ad.mean(sq / (2.0 * V))
    if patch_weight == 0:
        return pixel
    vbar = V.mean(axis=-1)
    patch = ad.mean(ad.mean(sq, axis=-1) / (2.0 * vbar))
    return pixel + patch_weight * patch


def alpha_loss(A, V, A_gt):
    """Squared alpha error, each pixel divided by 2V."""
    A_gt = np.asarray(A_gt, dtype=float)
    if np.any(A_gt < 0) or np.any(A_gt > 1):
        raise ValueError("mask values must lie in [0, 1]")
    V = _variance(V, np.shape(ad.value(A)))
    return ad.mean((A - A_gt) ** 2 / (2.0 * V))


def event_loss(C_ti, C_tj, V_ti, V_tj, E_obs, threshold: float):
    """Event-count loss that trains only the faster-moving of the two renders.

    With ``beta = V_ti / V_tj``: where beta > 1 the residual is weighted by
    beta and only ``C_ti`` receives gradient (the sharper ``C_tj`` is frozen);
    elsewhere it is weighted by 1/beta and only ``C_tj`` receives gradient.
    """
    vi = _variance(V_ti, np.shape(ad.value(C_ti))[:-1])
    vj = _variance(V_tj, vi.shape)
    beta = vi / vj
    first = beta > 1.0
    r_i = predicted_events(C_ti, ad.stop_gradient(C_tj), threshold) - E_obs
    r_j = predicted_events(ad.stop_gradient(C_ti), C_tj, threshold) - E_obs
    return ad.mean(ad.where(first, beta * r_i * r_i, r_j * r_j / beta))


def vanilla_event_loss(C_ti, C_tj, E_obs, threshold: float):
    """Unweighted event-count loss with gradient to both renders."""
    r = predicted_events(C_ti, C_tj, threshold) - E_obs
    return ad.mean(r * r)


def pose_regularization(poses, gt_poses):
    """Mean Euclidean distance between predicted (N, D) and supervision poses."""
    gt = np.asarray(gt_poses, dtype=float)
    if gt.ndim != 2 or len(gt) < 1:
        raise ValueError("need at least one supervision pose")
    if np.shape(ad.value(poses)) != gt.shape:
        raise ValueError("predicted and supervision poses differ in shape")
    return ad.mean(ad.norm(poses - gt, axis=-1))


def total_loss(components: dict, weights: LossWeights = LossWeights()):
    """Weighted sum; returns ``(total, breakdown)`` with plain-float breakdown."""
    missing = set(LOSS_KEYS[:-1]) - set(components)
    if missing:
        raise KeyError(f"missing loss components: {sorted(missing)}")
    vals = {k: float(np.asarray(ad.value(components[k]))) for k in LOSS_KEYS[:-1]}
    bad = [k for k, v in vals.items() if not np.isfinite(v)]
    if bad:
        raise NonFiniteLoss(f"non-finite loss component(s): {', '.join(f'{k}={vals[k]}' for k in bad)}")
    total = (components["rgb"] + weights.event * components["event"] + weights.pose * components["pose"]
             + weights.alpha * components["alpha"])
    vals["total"] = float(np.asarray(ad.value(total)))
    return total, vals
