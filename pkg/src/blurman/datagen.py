"""Synthetic blurry-frame + event datasets from an animated capsule avatar.

The ground-truth avatar is a textured :class:`CanonicalField` driven by a
sinusoidal motion script.  Frames are rendered at a high rate; each output
frame averages the high-rate frames inside its exposure, supervision poses and
masks are averaged the same way, and events come from the whole high-rate
log-luminance sequence.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .body import CapsuleBody, Pose, Skeleton, default_skeleton, skeleton_from_config, skeleton_to_config
from .config import Config, ConfigError
from .events import EventStream, log_luminance, read_events_csv, simulate_events, write_events_csv
from .field import CanonicalField, init_field
from .render import Camera, look_at, render_image
from .threads import worker_count

log = logging.getLogger(__name__)

POSE_FIELDS = "root_rx root_ry root_rz root_tx root_ty root_tz then rx ry rz per non-root joint"


@dataclass(frozen=True)
class Swing:
    """``angle(t) = amplitude * sin(2*pi*freq*t + phase)`` about ``axis``."""
    joint: int
    axis: tuple[float, float, float]
    amplitude: float
    freq: float
    phase: float = 0.0

    def angle(self, t):
        return self.amplitude * np.sin(2 * np.pi * self.freq * np.asarray(t) + self.phase)


@dataclass
class SceneConfig:
    skeleton: Skeleton = field(default_factory=default_skeleton)
    swings: tuple[Swing, ...] = ()
    frames: int = 30
    fps: float = 10.0
    fps_high: float = 80.0
    exposure: float = 0.1  # seconds
    threshold: float = 0.2
    seed: int = 0
    width: int = 64
    height: int = 64
    focal: float = 100.0
    eye: tuple[float, float, float] = (0.0, 0.1, 3.2)
    target: tuple[float, float, float] = (0.0, 0.1, 0.0)
    field_resolution: tuple[int, int, int] = (64, 64, 16)
    texture_period: float = 0.12
    n_samples: int = 32
    pose_noise: float = 0.0
    event_noise_rate: float = 0.0
    event_threshold_sigma: float = 0.0
    background: float = 0.0  # gray level behind the body
    event_oversample: int = 1  # odd; events come from renders at fps_high * this

    def __post_init__(self):
        if self.frames < 1:
            raise ConfigError("scene needs at least one frame")
        if self.fps_high < 8 * self.fps - 1e-9:
            raise ConfigError("fps_high must be at least 8x the output fps")
        if not 0 < self.exposure <= 1.0 / self.fps + 1e-12:
            raise ConfigError("exposure must be positive and no longer than the frame interval")
        if self.event_oversample < 1 or self.event_oversample % 2 == 0:
            raise ConfigError("event_oversample must be a positive odd integer")
        if self.subframes_per_exposure < 1:
            raise ConfigError("exposure shorter than one high-rate frame")
        for s in self.swings:
            if not 0 <= s.joint < self.skeleton.n_joints:
                raise ConfigError(f"swing joint {s.joint} not in skeleton")
            if abs(s.amplitude) >= np.pi / 2:
                raise ConfigError("swing amplitude must stay below pi/2 (pose averaging is component-wise)")

    @property
    def subframes_per_exposure(self) -> int:
        return int(round(self.exposure * self.fps_high))

    @property
    def duration(self) -> float:
        return self.frames / self.fps

    def body(self) -> CapsuleBody:
        return CapsuleBody(self.skeleton)

    def camera(self) -> Camera:
        return look_at(self.eye, self.target, fx=self.focal, width=self.width, height=self.height)

    def pose_at(self, t) -> np.ndarray:
        """Ground-truth pose vector(s) at time(s) t."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (self.skeleton.pose_dim,))
        for s in self.swings:
            axis = np.asarray(s.axis, dtype=float)
            axis = axis / np.linalg.norm(axis)
            sl = slice(0, 3) if s.joint == 0 else slice(6 + 3 * (s.joint - 1), 9 + 3 * (s.joint - 1))
            out[..., sl] += s.angle(t)[..., None] * axis
        return out

    def exposure_intervals(self) -> np.ndarray:
        start = np.arange(self.frames) / self.fps
        return np.stack([start, start + self.exposure], axis=-1)

    def high_rate_times(self) -> np.ndarray:
        n = int(round(self.duration * self.fps_high))
        return (np.arange(n) + 0.5) / self.fps_high

    def event_times(self) -> np.ndarray:
        """Render times for the event simulator; every ``event_oversample``-th one
        (offset by half) is a high-rate blur subframe."""
        m = self.event_oversample
        n = int(round(self.duration * self.fps_high)) * m
        return (np.arange(n) + 0.5) / (self.fps_high * m)

    def subframe_times(self, n: int) -> np.ndarray:
        k = self.subframes_per_exposure
        return n / self.fps + (np.arange(k) + 0.5) / self.fps_high


def one_arm_swing(skeleton: Skeleton | None = None, amplitude: float = 0.7, freq: float = 1.0,
                  joint: str = "l_arm") -> tuple[Swing, ...]:
    skel = skeleton or default_skeleton()
    return (Swing(skel.index(joint), (0.0, 0.0, 1.0), amplitude, freq),)


def scene_from_config(cfg: Config, prefix: str = "scene") -> SceneConfig:
    skel = skeleton_from_config(cfg)
    swings = []
    for key, val in sorted(cfg.section(prefix + ".swing").items()):
        parts = val.split()
        if len(parts) not in (6, 7):
            raise ConfigError(f"{prefix}.swing.{key}: expected 'joint ax ay az amplitude freq [phase]'")
        joint = skel.index(parts[0]) if not parts[0].lstrip("-").isdigit() else int(parts[0])
        nums = [float(x) for x in parts[1:]]
        swings.append(Swing(joint, tuple(nums[0:3]), nums[3], nums[4], nums[5] if len(nums) > 5 else 0.0))
    g = lambda k, d: cfg.get_float(f"{prefix}.{k}", d)  # noqa: E731
    return SceneConfig(
        skeleton=skel, swings=tuple(swings),
        frames=cfg.get_int(f"{prefix}.frames", 30), fps=g("fps", 10.0), fps_high=g("fps_high", 80.0),
        exposure=g("exposure_ms", 100.0) / 1000.0, threshold=g("threshold", 0.2),
        seed=cfg.get_int("seed", cfg.get_int(f"{prefix}.seed", 0)), width=cfg.get_int(f"{prefix}.width", 64),
        height=cfg.get_int(f"{prefix}.height", 64), focal=g("focal", 100.0),
        eye=tuple(cfg.get_floats(f"{prefix}.eye", [0.0, 0.1, 3.2])),
        target=tuple(cfg.get_floats(f"{prefix}.target", [0.0, 0.1, 0.0])),
        field_resolution=tuple(int(v) for v in cfg.get_floats(f"{prefix}.field_resolution", [64, 64, 16])),
        texture_period=g("texture_period", 0.12), n_samples=cfg.get_int(f"{prefix}.samples", 32),
        pose_noise=g("pose_noise", 0.0), event_noise_rate=g("event_noise_rate", 0.0),
        event_threshold_sigma=g("event_threshold_sigma", 0.0), background=g("background", 0.0),
        event_oversample=cfg.get_int(f"{prefix}.event_oversample", 1),
    )


# --------------------------------------------------------------------------
# ground-truth appearance

_PALETTE = np.array([
    [0.90, 0.55, 0.20],
    [0.20, 0.75, 0.85],
    [0.85, 0.30, 0.65],
    [0.35, 0.45, 0.90],
    [0.40, 0.80, 0.35],
])


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _softplus_inv(y):
    return y + np.log(-np.expm1(-y))


def ground_truth_field(body: CapsuleBody, resolution=(64, 64, 16), period: float = 0.12,
                       density: float = 80.0, edge: float = 0.01, bones=None) -> CanonicalField:
    """Checker-textured capsules: each bone gets a palette color, modulated by a 3D checker.

    ``bones`` (joint indices) keeps density only where one of those bones is
    the nearest capsule, which renders per-part masks.
    """
    fld = init_field(resolution, body=body)
    x = fld.node_positions()
    pts = x.reshape(-1, 3)
    from .body import capsule_distances
    d = capsule_distances(pts, body.heads, body.ends, body.radii)
    nearest = np.argmin(d, axis=-1)
    sd = d[np.arange(len(pts)), nearest]
    phase = np.sin(2 * np.pi * pts / period)
    checker = np.tanh(4.0 * phase[:, 0] * phase[:, 1] * np.sign(phase[:, 2] + 1e-9) + 4.0 * phase[:, 2] * 0.0)
    base = _PALETTE[nearest % len(_PALETTE)]
    color = base * (0.6 + 0.4 * checker[:, None])
    color = np.clip(color, 0.03, 0.97)
    sigma = density / (1.0 + np.exp(np.clip(sd / edge, -50, 50)))
    sigma = np.maximum(sigma, 1e-6)
    if bones is not None:
        sigma = np.where(np.isin(nearest, list(bones)), sigma, 1e-6)
    grid = np.concatenate([_logit(color), _softplus_inv(sigma)[:, None]], axis=-1)
    return fld.with_grid(grid.reshape(fld.resolution + (4,)))


# --------------------------------------------------------------------------

@dataclass
class Dataset:
    blurry: np.ndarray  # (N, H, W, 3)
    sharp: np.ndarray  # (N, H, W, 3) exposure-midpoint renders, evaluation only
    sharp_alpha: np.ndarray  # (N, H, W) evaluation only
    masks: np.ndarray  # (N, H, W) exposure-averaged alpha
    poses: np.ndarray  # (N, D) exposure-averaged supervision poses
    exposures: np.ndarray  # (N, 2)
    events: EventStream
    camera: Camera
    skeleton: Skeleton
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.blurry)
        if not (len(self.sharp) == len(self.masks) == len(self.poses) == len(self.exposures) == n):
            raise ValueError("frame, pose and mask counts differ")

    @property
    def n_frames(self) -> int:
        return len(self.blurry)

    @property
    def midpoints(self) -> np.ndarray:
        return self.exposures.mean(axis=1)

    @property
    def background(self) -> float:
        return float(self.meta.get("background", 0.0))

    @property
    def window(self) -> tuple[float, float]:
        return float(self.meta.get("window_start", 0.0)), float(self.meta.get("window_end", self.exposures[-1, 1]))


def blur_frames(sharp, window: int | None = None) -> np.ndarray:
    """Pixel-wise mean of the first ``window`` frames (all by default).

    Pixels that are identical across the window come out bit-identical.
    """
    frames = np.asarray(sharp, dtype=float)
    if window is None:
        window = len(frames)
    if window < 1:
        raise ValueError("blur window must be at least 1")
    if window > len(frames):
        raise ValueError(f"blur window {window} exceeds {len(frames)} frames")
    frames = frames[:window]
    first = frames[0]
    return first + (frames - first).mean(axis=0)


def average_poses(poses) -> Pose:
    """Component-wise mean of axis-angle poses (valid for small, same-axis rotations)."""
    poses = list(poses)
    if not poses:
        raise ValueError("need at least one pose")
    n = poses[0].n_joints
    if any(p.n_joints != n for p in poses):
        raise ValueError("poses come from different skeletons")
    return Pose.from_vector(np.mean([p.vector() for p in poses], axis=0))


def _render_all(gt: CanonicalField, body: CapsuleBody, camera: Camera, poses: np.ndarray, n_samples: int,
                background: float = 0.0):
    def one(p):
        rgb, a, _ = render_image(gt, body, p, camera, n_samples, background=background)
        return rgb, a

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            res = list(ex.map(one, poses))
    else:
        res = [one(p) for p in poses]
    return np.stack([r[0] for r in res]), np.stack([r[1] for r in res])


def synthesize(scene: SceneConfig, gt_field: CanonicalField | None = None) -> Dataset:
    body = scene.body()
    camera = scene.camera()
    gt = gt_field or ground_truth_field(body, scene.field_resolution, scene.texture_period)
    m = scene.event_oversample
    t_ev = scene.event_times()
    k = scene.subframes_per_exposure
    rng = np.random.default_rng(scene.seed)

    log.info("rendering %d high-rate frames", len(t_ev))
    poses_ev = scene.pose_at(t_ev)
    rgb_ev, alpha_ev = _render_all(gt, body, camera, poses_ev, scene.n_samples, scene.background)
    sub = slice(m // 2, None, m)
    poses_high, rgb_high, alpha_high = poses_ev[sub], rgb_ev[sub], alpha_ev[sub]

    step = int(round(scene.fps_high / scene.fps))
    blurry, masks, poses = [], [], []
    for n in range(scene.frames):
        sl = slice(n * step, n * step + k)
        blurry.append(blur_frames(rgb_high[sl]))
        masks.append(blur_frames(alpha_high[sl]))
        poses.append(average_poses([Pose.from_vector(p) for p in poses_high[sl]]).vector())
    exposures = scene.exposure_intervals()
    mids = exposures.mean(axis=1)
    sharp, sharp_alpha = _render_all(gt, body, camera, scene.pose_at(mids), scene.n_samples, scene.background)

    logL = log_luminance(rgb_ev)
    events = simulate_events(logL, t_ev, scene.threshold, noise_rate=scene.event_noise_rate,
                             threshold_sigma=scene.event_threshold_sigma, seed=scene.seed)
    poses = np.array(poses)
    if scene.pose_noise > 0:
        poses = poses + rng.normal(scale=scene.pose_noise, size=poses.shape)
    meta = {
        "frames": scene.frames, "fps": scene.fps, "fps_high": scene.fps_high, "exposure_s": scene.exposure,
        "subframes": k, "theta": scene.threshold, "seed": scene.seed, "blur_space": "linear",
        "window_start": float(t_ev[0]), "window_end": float(t_ev[-1]), "event_oversample": m,
        "pose_noise": scene.pose_noise, "event_count": len(events), "background": scene.background,
    }
    return Dataset(np.array(blurry), sharp, sharp_alpha, np.array(masks), poses, exposures, events,
                   camera, scene.skeleton, meta)


def with_exposure_window(scene: SceneConfig, subframes: int) -> SceneConfig:
    """Same scene with the exposure stretched to ``subframes`` high-rate frames (frame rate follows)."""
    exposure = subframes / scene.fps_high
    return replace(scene, exposure=exposure, fps=min(scene.fps, 1.0 / exposure))


# --------------------------------------------------------------------------
# directory layout

def _to_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_camera(camera: Camera, path) -> None:
    cfg = Config()
    cfg.set("fx", repr(camera.fx))
    cfg.set("fy", repr(camera.fy))
    cfg.set("cx", repr(camera.cx))
    cfg.set("cy", repr(camera.cy))
    cfg.set("width", camera.width)
    cfg.set("height", camera.height)
    cfg.set("rotation", [repr(float(v)) for v in camera.rotation.ravel()])
    cfg.set("translation", [repr(float(v)) for v in camera.translation])
    Path(path).write_text("# world->camera extrinsics, pinhole intrinsics in pixels\n" + cfg.dumps())


def read_camera(path) -> Camera:
    cfg = Config.load(path)
    return Camera(cfg.get_float("fx"), cfg.get_float("fy"), cfg.get_float("cx"), cfg.get_float("cy"),
                  np.array(cfg.get_floats("rotation")).reshape(3, 3), np.array(cfg.get_floats("translation")),
                  cfg.get_int("width"), cfg.get_int("height"))


def write_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for n in range(ds.n_frames):
        _to_png(ds.blurry[n], out / "frames" / f"blur_{n:04d}.png")
        _to_png(ds.sharp[n], out / "frames" / f"sharp_{n:04d}.png")
        _to_png(ds.masks[n], out / "masks" / f"{n:04d}.png")
        _to_png(ds.sharp_alpha[n], out / "masks" / f"sharp_{n:04d}.png")
    np.savez(out / "raw.npz", blurry=ds.blurry.astype("<f4"), sharp=ds.sharp.astype("<f4"),
             masks=ds.masks.astype("<f4"), sharp_alpha=ds.sharp_alpha.astype("<f4"))
    write_events_csv(ds.events, out / "events.csv")
    with open(out / "poses.txt", "w") as fh:
        fh.write(f"# one exposure-averaged pose per frame: {POSE_FIELDS}\n")
        for p in ds.poses:
            fh.write(" ".join(repr(float(v)) for v in p) + "\n")
    write_camera(ds.camera, out / "camera.txt")
    meta = Config()
    for key, val in ds.meta.items():
        meta.set(key, repr(val) if isinstance(val, float) else val)
    meta.set("exposures", [repr(float(v)) for v in ds.exposures.ravel()])
    skeleton_to_config(ds.skeleton, meta)
    (out / "meta.txt").write_text(meta.dumps())
    return out


def load_dataset(data_dir) -> Dataset:
    d = Path(data_dir)
    if not (d / "meta.txt").is_file():
        raise ConfigError(f"{d} is not a dataset directory (meta.txt missing)")
    meta_cfg = Config.load(d / "meta.txt")
    skel = skeleton_from_config(meta_cfg)
    exposures = np.array(meta_cfg.get_floats("exposures")).reshape(-1, 2)
    n = len(exposures)
    raw_path = d / "raw.npz"
    if raw_path.is_file():
        with np.load(raw_path) as raw:
            blurry, sharp = raw["blurry"].astype(float), raw["sharp"].astype(float)
            masks, sharp_alpha = raw["masks"].astype(float), raw["sharp_alpha"].astype(float)
    else:
        rd = lambda p: np.asarray(Image.open(p), dtype=float) / 255.0  # noqa: E731
        blurry = np.stack([rd(d / "frames" / f"blur_{i:04d}.png") for i in range(n)])
        sharp = np.stack([rd(d / "frames" / f"sharp_{i:04d}.png") for i in range(n)])
        masks = np.stack([rd(d / "masks" / f"{i:04d}.png") for i in range(n)])
        sharp_alpha = np.stack([rd(d / "masks" / f"sharp_{i:04d}.png") for i in range(n)])
    poses = np.loadtxt(d / "poses.txt", ndmin=2)
    meta = {k: v for k, v in meta_cfg.values.items() if not k.startswith("body.") and k != "exposures"}
    for key in ("window_start", "window_end", "theta", "exposure_s", "fps", "fps_high", "background"):
        if key in meta:
            meta[key] = float(meta[key])
    return Dataset(blurry, sharp, sharp_alpha, masks, poses, exposures, read_events_csv(d / "events.csv"),
                   read_camera(d / "camera.txt"), skel, meta)
