"""Articulated capsule body: skeleton, forward kinematics, skinning, deformation.

The body is a small tree of joints.  Joint ``k`` owns one capsule running from
its rest position ``head`` to ``head + tail`` with radius ``r``.  A pose holds
an axis-angle root rotation, a root translation and one axis-angle rotation per
non-root joint; rest rotations are identity, so the canonical (T-)pose is the
zero vector.

Array layout for a pose vector (length ``6 + 3*(J-1)``)::

    [root_rotation(3), root_translation(3), joint_rotations(3*(J-1))]

All geometry functions accept numpy arrays or :class:`~blurman.autodiff.Variable`
inputs with arbitrary leading batch dimensions.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .config import Config, ConfigError

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class Skeleton:
    names: tuple[str, ...]
    parents: tuple[int, ...]
    offsets: np.ndarray  # (J, 3) rest offset from parent joint; absolute for the root
    tails: np.ndarray  # (J, 3) capsule axis vector from the joint
    radii: np.ndarray  # (J,)

    def __post_init__(self):
        J = len(self.parents)
        if J == 0:
            raise ConfigError("skeleton needs at least one joint")
        if self.parents[0] != -1:
            raise ConfigError("joint 0 must be the root (parent -1)")
        for k in range(1, J):
            if not 0 <= self.parents[k] < k:
                raise ConfigError(f"joint {k}: parent index must be in [0, {k})")
        if np.shape(self.offsets) != (J, 3) or np.shape(self.tails) != (J, 3) or np.shape(self.radii) != (J,):
            raise ConfigError("skeleton arrays do not match joint count")
        if np.any(np.asarray(self.radii) <= 0):
            raise ConfigError("capsule radii must be positive")

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def pose_dim(self) -> int:
        return 6 + 3 * (self.n_joints - 1)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.n_joints, 3))
        for k, p in enumerate(self.parents):
            pos[k] = self.offsets[k] if p < 0 else pos[p] + self.offsets[k]
        return pos

    def index(self, name: str) -> int:
        return self.names.index(name)


def make_skeleton(joints) -> Skeleton:
    """Build from ``(name, parent, offset, tail, radius)`` tuples."""
    names, parents, offsets, tails, radii = zip(*joints)
    return Skeleton(tuple(names), tuple(int(p) for p in parents),
                    np.array(offsets, dtype=float), np.array(tails, dtype=float),
                    np.array(radii, dtype=float))


def default_skeleton() -> Skeleton:
    """Five capsules: torso, two arms held out in a T, two legs."""
    return make_skeleton([
        ("torso", -1, (0.0, 0.0, 0.0), (0.0, 0.55, 0.0), 0.17),
        ("l_arm", 0, (0.22, 0.5, 0.0), (0.48, 0.0, 0.0), 0.075),
        ("r_arm", 0, (-0.22, 0.5, 0.0), (-0.48, 0.0, 0.0), 0.075),
        ("l_leg", 0, (0.1, -0.08, 0.0), (0.0, -0.6, 0.0), 0.085),
        ("r_leg", 0, (-0.1, -0.08, 0.0), (0.0, -0.6, 0.0), 0.085),
    ])


def skeleton_from_config(cfg: Config, prefix: str = "body") -> Skeleton:
    """Read ``<prefix>.joint.<k> = name parent ox oy oz tx ty tz radius`` lines."""
    entries = cfg.section(prefix + ".joint")
    if not entries:
        return default_skeleton()
    joints = []
    try:
        keys = sorted(entries, key=int)
    except ValueError:
        raise ConfigError(f"{prefix}.joint.<k> keys must be integers") from None
    if [int(k) for k in keys] != list(range(len(keys))):
        raise ConfigError(f"{prefix}.joint indices must be 0..J-1 without gaps")
    for k in keys:
        parts = entries[k].split()
        if len(parts) != 9:
            raise ConfigError(f"{prefix}.joint.{k}: expected 'name parent ox oy oz tx ty tz radius'")
        name, parent, *nums = parts
        try:
            v = [float(x) for x in nums]
            joints.append((name, int(parent), v[0:3], v[3:6], v[6]))
        except ValueError:
            raise ConfigError(f"{prefix}.joint.{k}: non-numeric field") from None
    return make_skeleton(joints)


def skeleton_to_config(skel: Skeleton, cfg: Config, prefix: str = "body") -> None:
    for k in range(skel.n_joints):
        o, t = skel.offsets[k], skel.tails[k]
        cfg.set(f"{prefix}.joint.{k}",
                f"{skel.names[k]} {skel.parents[k]} {o[0]:.17g} {o[1]:.17g} {o[2]:.17g} "
                f"{t[0]:.17g} {t[1]:.17g} {t[2]:.17g} {skel.radii[k]:.17g}")


def canonicalize_axis_angle(w: np.ndarray) -> np.ndarray:
    """Wrap axis-angle vectors so their magnitude is below 2*pi."""
    w = np.array(w, dtype=float)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    wrapped = np.mod(theta, TWO_PI)
    scale = np.where(theta >= TWO_PI, wrapped / np.where(theta > 0, theta, 1.0), 1.0)
    return w * scale


@dataclass
class Pose:
    root_rotation: np.ndarray
    root_translation: np.ndarray
    joint_rotations: np.ndarray  # (J-1, 3)

    def __post_init__(self):
        self.root_rotation = canonicalize_axis_angle(np.asarray(self.root_rotation, dtype=float).reshape(3))
        self.root_translation = np.asarray(self.root_translation, dtype=float).reshape(3)
        self.joint_rotations = canonicalize_axis_angle(np.asarray(self.joint_rotations, dtype=float).reshape(-1, 3))
        parts = (self.root_rotation, self.root_translation, self.joint_rotations)
        if not all(np.all(np.isfinite(p)) for p in parts):
            raise ValueError("pose components must be finite")

    @classmethod
    def identity(cls, skel: Skeleton) -> "Pose":
        return cls(np.zeros(3), np.zeros(3), np.zeros((skel.n_joints - 1, 3)))

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=float)
        return cls(vec[0:3], vec[3:6], vec[6:].reshape(-1, 3))

    def vector(self) -> np.ndarray:
        return np.concatenate([self.root_rotation, self.root_translation, self.joint_rotations.ravel()])

    @property
    def n_joints(self) -> int:
        return len(self.joint_rotations) + 1


@dataclass
class BoneTransforms:
    """Canonical -> observation rigid transform per bone: ``x_obs = R @ x + t``."""
    rotations: np.ndarray  # (..., J, 3, 3)
    translations: np.ndarray  # (..., J, 3)


@dataclass(frozen=True)
class CapsuleBody:
    skeleton: Skeleton
    heads: np.ndarray = field(init=False)  # (J, 3) canonical capsule endpoints
    ends: np.ndarray = field(init=False)
    tau: float = field(init=False)  # skinning temperature

    def __post_init__(self):
        heads = self.skeleton.rest_positions()
        object.__setattr__(self, "heads", heads)
        object.__setattr__(self, "ends", heads + self.skeleton.tails)
        object.__setattr__(self, "tau", float(np.mean(self.skeleton.radii)) ** 2)

    @property
    def radii(self) -> np.ndarray:
        return self.skeleton.radii

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box around the canonical capsules, grown by ``margin``."""
        r = self.radii[:, None]
        lo = np.minimum(self.heads - r, self.ends - r).min(axis=0)
        hi = np.maximum(self.heads + r, self.ends + r).max(axis=0)
        return lo - margin, hi + margin


# --------------------------------------------------------------------------
# kinematics

def rodrigues(w):
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3); smooth through zero."""
    wv = ad.value(w)
    theta2 = ad.sum(w * w, axis=-1, keepdims=True)
    small = ad.value(theta2) < 1e-8
    theta2_safe = ad.where(small, 1.0, theta2)
    theta = ad.sqrt(theta2_safe)
    a = ad.where(small, 1.0 - theta2 / 6.0, ad.sin(theta) / theta)
    b = ad.where(small, 0.5 - theta2 / 24.0, (1.0 - ad.cos(theta)) / theta2_safe)
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    zero = np.zeros(wv.shape[:-1])
    K = ad.reshape(ad.stack([zero, -wz, wy, wz, zero, -wx, -wy, wx, zero], axis=-1),
                   wv.shape[:-1] + (3, 3))
    a = ad.expand_dims(a, -1)
    b = ad.expand_dims(b, -1)
    return np.eye(3) + a * K + b * ad.matmul(K, K)


def _matvec(R, v):
    return ad.sum(R * ad.expand_dims(v, -2), axis=-1)


def bone_transforms(skel: Skeleton, pose_vec):
    """Global canonical->observation transforms for a (batched) pose vector.

    Returns ``(R, t)`` with shapes ``(..., J, 3, 3)`` and ``(..., J, 3)``.
    """
    pv = ad.value(pose_vec)
    if pv.shape[-1] != skel.pose_dim:
        raise ConfigError(f"pose vector length {pv.shape[-1]} does not match skeleton ({skel.pose_dim})")
    lead = pv.shape[:-1]
    J = skel.n_joints
    rest = skel.rest_positions()
    if J > 1:
        local_w = ad.reshape(pose_vec[..., 6:], lead + (J - 1, 3))
        local_R = rodrigues(local_w)
    root_R = rodrigues(pose_vec[..., 0:3])
    trans = pose_vec[..., 3:6]
    Rs = [root_R]
    ts = [rest[0] + trans - ad.matmul(root_R, rest[0])]
    for k in range(1, J):
        p = skel.parents[k]
        Rk = local_R[..., k - 1, :, :]
        Rs.append(ad.matmul(Rs[p], Rk))
        ts.append(_matvec(Rs[p], rest[k] - ad.matmul(Rk, rest[k])) + ts[p])
    return ad.stack(Rs, axis=-3), ad.stack(ts, axis=-2)


def forward_kinematics(skel: Skeleton, pose: Pose) -> BoneTransforms:
    if pose.n_joints != skel.n_joints:
        raise ConfigError(f"pose has {pose.n_joints} joints, skeleton has {skel.n_joints}")
    R, t = bone_transforms(skel, pose.vector())
    return BoneTransforms(np.asarray(ad.value(R)), np.asarray(ad.value(t)))


def _apply(R, t, pts):
    # pts (..., J, 3) per bone
    return ad.sum(ad.expand_dims(pts, -2) * R, axis=-1) + t


def posed_capsules(body: CapsuleBody, R, t):
    """Observation-space capsule endpoints ``(heads, ends)``, each (..., J, 3)."""
    return _apply(R, t, body.heads), _apply(R, t, body.ends)


def _segment_offset(x, a, b):
    """Vector from the closest point on segment ab to x.

    x (..., N, 3); a, b (..., J, 3) -> (..., N, J, 3)
    """
    ab = b - a
    ab2 = ad.sum(ab * ab, axis=-1)  # (..., J)
    xa = ad.expand_dims(x, -2) - ad.expand_dims(a, -3)  # (..., N, J, 3)
    s = ad.sum(xa * ad.expand_dims(ab, -3), axis=-1) / ad.expand_dims(ab2, -2)
    s = ad.clip(s, 0.0, 1.0)
    return xa - ad.expand_dims(s, -1) * ad.expand_dims(ab, -3)


def capsule_distances(x, a, b, radii):
    """Signed distance from x (..., N, 3) to each capsule -> (..., N, J).

    Works on dot products only, so no (N, J, 3) intermediate is formed.
    """
    ab = b - a
    ab2 = ad.sum(ab * ab, axis=-1)  # (..., J)
    a_ab = ad.sum(a * ab, axis=-1)
    x_ab = ad.matmul(x, ad.swapaxes(ab, -1, -2)) - ad.expand_dims(a_ab, -2)
    s = ad.clip(x_ab / ad.expand_dims(ab2, -2), 0.0, 1.0)
    xa2 = (ad.expand_dims(ad.sum(x * x, axis=-1), -1) - 2.0 * ad.matmul(x, ad.swapaxes(a, -1, -2))
           + ad.expand_dims(ad.sum(a * a, axis=-1), -2))
    d2 = xa2 - 2.0 * s * x_ab + s * s * ad.expand_dims(ab2, -2)
    return ad.sqrt(ad.clip(d2, 1e-18, None)) - radii


def skinning_weights(x, R, t, body: CapsuleBody):
    """Softmax of ``-d_k^2 / tau`` over distances to the posed capsules.

    ``d_k`` is the distance to capsule k's surface, zero inside.  Returns
    (..., N, J) weights summing to one.
    """
    a, b = posed_capsules(body, R, t)
    d = ad.clip(capsule_distances(x, a, b, body.radii), 0.0, None)
    logits = -(d * d) / body.tau
    shift = np.max(ad.value(logits), axis=-1, keepdims=True)
    e = ad.exp(logits - shift)
    return e / ad.sum(e, axis=-1, keepdims=True)


def deform_to_canonical(x, pose_vec, body: CapsuleBody):
    """Map observation points x (..., N, 3) to canonical space under a pose (..., D)."""
    R, t = bone_transforms(body.skeleton, pose_vec)
    w = skinning_weights(x, R, t, body)  # (..., N, J)
    # sum_j w_j R_j^T (x - t_j), via the blended per-point matrix
    lead = np.shape(ad.value(R))[:-3]
    J = body.skeleton.n_joints
    blend = ad.matmul(w, ad.reshape(R, lead + (J, 9)))
    blend = ad.reshape(blend, np.shape(ad.value(blend))[:-1] + (3, 3))
    rt = ad.sum(R * ad.expand_dims(t, -1), axis=-2)  # R_j^T t_j
    return ad.sum(ad.expand_dims(x, -1) * blend, axis=-2) - ad.matmul(w, rt)


def deform(x, pose: Pose, body: CapsuleBody) -> np.ndarray:
    """Convenience wrapper over :func:`deform_to_canonical` for a single Pose."""
    if pose.n_joints != body.skeleton.n_joints:
        raise ConfigError("pose does not match body skeleton")
    return np.asarray(deform_to_canonical(np.asarray(x, dtype=float), pose.vector(), body))


FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


def nearest_surface_normal(xc, body: CapsuleBody):
    """Outward normal of the nearest canonical capsule at points xc (..., 3).

    Returns ``(n, on_axis)``; points lying on a capsule axis get +z and
    ``on_axis=True``.
    """
    xv = np.asarray(ad.value(xc))
    single = xv.ndim == 1
    pts = ad.reshape(xc, (1, 3)) if single else xc
    off = _segment_offset(pts, body.heads, body.ends)  # (..., J, 3)
    ov = ad.value(off)
    dist = np.linalg.norm(ov, axis=-1) - body.radii
    nearest = np.argmin(dist, axis=-1)
    onehot = (np.arange(body.skeleton.n_joints) == nearest[..., None]).astype(float)
    v = ad.sum(off * onehot[..., None], axis=-2)
    length = np.linalg.norm(ad.value(v), axis=-1, keepdims=True)
    on_axis = length[..., 0] < 1e-12
    safe_len = ad.where(on_axis[..., None], 1.0, ad.norm(v, axis=-1, keepdims=True))
    n = ad.where(on_axis[..., None], FALLBACK_NORMAL, v / safe_len)
    if single:
        return ad.reshape(n, (3,)), bool(on_axis[0])
    return n, on_axis
