"""Joint optimisation of the voxel field and the time-to-pose network."""
from __future__ import annotations

import copy
import csv
import logging
import struct
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .body import CapsuleBody
from .config import Config, ConfigError
from .datagen import Dataset
from .field import CanonicalField, init_field, load_field, save_field
from .losses import (LOSS_KEYS, LossWeights, NonFiniteLoss, alpha_loss, event_loss, photometric_loss,
                     pose_regularization, total_loss, vanilla_event_loss)
from .render import pixel_rays, render_image, render_rays
from .velocity import VelocityConfig

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# pose network

class PoseNetwork:
    """Piecewise-linear interpolation of supervision poses plus a learned MLP delta.

    The MLP sees a sinusoidal encoding of normalised time and has a
    zero-initialised output layer, so a fresh network reproduces the
    interpolation exactly.
    """

    def __init__(self, knot_times, knot_poses, window, hidden: int = 64, n_freq: int = 6,
                 seed: int = 0, params: dict | None = None):
        self.knot_times = np.asarray(knot_times, dtype=float)
        self.knot_poses = np.asarray(knot_poses, dtype=float)
        if self.knot_poses.ndim != 2 or len(self.knot_times) != len(self.knot_poses):
            raise ValueError("need one supervision pose per knot time")
        if np.any(np.diff(self.knot_times) <= 0):
            raise ValueError("knot times must be strictly increasing")
        self.window = (float(window[0]), float(window[1]))
        if not self.window[1] > self.window[0]:
            raise ValueError("empty time window")
        self.hidden = hidden
        self.n_freq = n_freq
        if params is None:
            rng = np.random.default_rng(seed)
            d_in, d_out = 1 + 2 * n_freq, self.pose_dim
            params = {
                "w1": rng.normal(scale=np.sqrt(1.0 / d_in), size=(d_in, hidden)),
                "b1": np.zeros(hidden),
                "w2": rng.normal(scale=np.sqrt(1.0 / hidden), size=(hidden, hidden)),
                "b2": np.zeros(hidden),
                "w3": np.zeros((hidden, d_out)),
                "b3": np.zeros(d_out),
            }
        self.params = {k: np.asarray(v, dtype=float) for k, v in params.items()}

    PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

    @property
    def pose_dim(self) -> int:
        return self.knot_poses.shape[1]

    def copy(self) -> "PoseNetwork":
        return PoseNetwork(self.knot_times, self.knot_poses, self.window, self.hidden, self.n_freq,
                           params={k: v.copy() for k, v in self.params.items()})

    def clamp(self, t) -> np.ndarray:
        return np.clip(np.asarray(t, dtype=float), *self.window)

    def interpolate(self, t) -> np.ndarray:
        """Supervision poses linearly interpolated (and extrapolated past the end knots)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = self.knot_times
        if len(k) == 1:
            return np.repeat(self.knot_poses, len(t), axis=0)
        i = np.clip(np.searchsorted(k, t, side="right") - 1, 0, len(k) - 2)
        w = ((t - k[i]) / (k[i + 1] - k[i]))[:, None]
        return (1.0 - w) * self.knot_poses[i] + w * self.knot_poses[i + 1]

    def encode(self, t) -> np.ndarray:
        tau = (np.atleast_1d(np.asarray(t, dtype=float)) - self.window[0]) / (self.window[1] - self.window[0])
        ang = np.pi * tau[:, None] * (2.0 ** np.arange(self.n_freq))
        return np.concatenate([tau[:, None], np.sin(ang), np.cos(ang)], axis=-1)

    def forward(self, t, params: dict | None = None):
        """Poses (K, D) at times t (K,); ``params`` may hold Variables."""
        p = self.params if params is None else params
        t = self.clamp(t)
        h = ad.softplus(ad.matmul(self.encode(t), p["w1"]) + p["b1"])
        h = ad.softplus(ad.matmul(h, p["w2"]) + p["b2"])
        return self.interpolate(t) + (ad.matmul(h, p["w3"]) + p["b3"])


def pose_at(net: PoseNetwork, t: float) -> np.ndarray:
    """Pose vector at time t; times outside the window are clamped with a warning."""
    lo, hi = net.window
    if not lo <= t <= hi:
        log.warning("pose_at: t=%g outside [%g, %g], clamped", t, lo, hi)
    return np.asarray(ad.value(net.forward([t])))[0]


_NET_MAGIC = b"BLURMAN-POSENET 1\n"


def save_pose_net(net: PoseNetwork, path) -> None:
    """Text header with shapes, then little-endian float64 arrays in header order."""
    arrays = [("knot_times", net.knot_times), ("knot_poses", net.knot_poses)]
    arrays += [(k, net.params[k]) for k in PoseNetwork.PARAM_NAMES]
    lines = [f"window {net.window[0]!r} {net.window[1]!r}", f"hidden {net.hidden}", f"n_freq {net.n_freq}"]
    lines += [f"array {name} {' '.join(str(s) for s in a.shape)}" for name, a in arrays]
    header = ("\n".join(lines) + "\nend\n").encode()
    with open(path, "wb") as fh:
        fh.write(_NET_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_pose_net(path) -> PoseNetwork:
    data = Path(path).read_bytes()
    if not data.startswith(_NET_MAGIC):
        raise ConfigError(f"{path}: not a pose-network checkpoint")
    off = len(_NET_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    meta, arrays = {}, {}
    for line in data[off:off + hlen].decode().splitlines():
        parts = line.split()
        if not parts or parts[0] == "end":
            continue
        if parts[0] == "array":
            shape = tuple(int(s) for s in parts[2:])
            n = int(np.prod(shape)) if shape else 1
            arrays[parts[1]] = (shape, n)
        else:
            meta[parts[0]] = parts[1:]
    off += hlen
    vals = {}
    for name, (shape, n) in arrays.items():
        vals[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    window = tuple(float(v) for v in meta["window"])
    return PoseNetwork(vals["knot_times"], vals["knot_poses"], window, int(meta["hidden"][0]),
                       int(meta["n_freq"][0]), params={k: vals[k] for k in PoseNetwork.PARAM_NAMES})


# --------------------------------------------------------------------------
# optimiser

class Adam:
    def __init__(self, lrs: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                out[k] = p
                continue
            m = self.m[k] = b1 * self.m.get(k, 0.0) + (1 - b1) * g
            v = self.v[k] = b2 * self.v.get(k, 0.0) + (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            out[k] = p - self.lrs[k] * mhat / (np.sqrt(vhat) + self.eps)
        return out


# --------------------------------------------------------------------------
# configuration

@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    patches: int = 12
    patch_size: int = 20
    lr_field: float = 5e-2
    lr_pose: float = 5e-4
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    velocity: VelocityConfig = field(default_factory=VelocityConfig)
    n_samples: int = 32
    field_resolution: tuple[int, int, int] = (64, 64, 16)
    density_scale: float = 1.0
    mask_bias: float = 0.8
    checkpoint_every: int = 0
    log_every: int = 100
    va_pl: bool = True  # velocity-weighted photometric loss
    vr_el: bool = True  # velocity-relative event loss (else the plain two-sided one)
    velocity_alpha: bool = True  # velocity-weighted alpha loss (else unit weights)
    cross_frame_events: bool = False
    ema_decay: float = 0.0  # returned/saved model is this running average; 0 keeps the last iterate

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.patches < 1 or self.patch_size < 1:
            raise ConfigError("need at least one patch of side >= 1")
        if not 0 <= self.mask_bias <= 1:
            raise ConfigError("mask_bias must lie in [0, 1]")
        if self.lr_field < 0 or self.lr_pose < 0:
            raise ConfigError("learning rates must be >= 0")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")

    @property
    def needs_velocity(self) -> bool:
        return self.va_pl or self.vr_el or self.velocity_alpha

    @classmethod
    def from_config(cls, cfg: Config, prefix: str = "train") -> "TrainConfig":
        d = cls()
        g = lambda k, default: cfg.get_float(f"{prefix}.{k}", default)  # noqa: E731
        gi = lambda k, default: cfg.get_int(f"{prefix}.{k}", default)  # noqa: E731
        gb = lambda k, default: cfg.get_bool(f"{prefix}.{k}", default)  # noqa: E731
        w = LossWeights(event=g("alpha_e", d.weights.event), pose=g("alpha_p", d.weights.pose),
                        alpha=g("alpha_a", d.weights.alpha), patch=g("lambda_patch", d.weights.patch))
        v = VelocityConfig(dt=g("velocity_dt", d.velocity.dt), v0=g("velocity_v0", d.velocity.v0))
        res = cfg.get_floats("field.resolution", list(d.field_resolution))
        if len(res) == 1:
            res = res * 3
        return cls(iterations=gi("iterations", d.iterations), patches=gi("patches", d.patches),
                   patch_size=gi("patch_size", d.patch_size), lr_field=g("lr_field", d.lr_field),
                   lr_pose=g("lr_pose", d.lr_pose), seed=cfg.get_int("seed", gi("seed", d.seed)),
                   weights=w, velocity=v, n_samples=gi("samples", d.n_samples),
                   field_resolution=tuple(int(r) for r in res),
                   density_scale=cfg.get_float("field.density_scale", d.density_scale), mask_bias=g("mask_bias", d.mask_bias),
                   checkpoint_every=gi("checkpoint_every", d.checkpoint_every),
                   log_every=gi("log_every", d.log_every), va_pl=gb("va_pl", d.va_pl),
                   vr_el=gb("vr_el", d.vr_el), velocity_alpha=gb("velocity_alpha", d.velocity_alpha),
                   cross_frame_events=gb("cross_frame_events", d.cross_frame_events),
                   ema_decay=g("ema_decay", d.ema_decay))


ABLATION_ROWS = {
    "baseline": dict(va_pl=False, vr_el=False),
    "va_pl": dict(va_pl=True, vr_el=False),
    "vr_el": dict(va_pl=False, vr_el=True),
    "full": dict(va_pl=True, vr_el=True),
}


# --------------------------------------------------------------------------
# training

@dataclass
class PatchBatch:
    frames: np.ndarray  # (P,)
    corners: np.ndarray  # (P, 2) top-left (u, v)
    size: int
    colors: np.ndarray  # (P, M, 3)
    masks: np.ndarray  # (P, M)
    t_mid: np.ndarray  # (P,)
    t_i: np.ndarray
    t_j: np.ndarray
    events: np.ndarray  # (P, M) signed counts over (t_i, t_j]
    jitter_seed: int = 0  # sample-depth jitter, so replaying a batch replays the loss

    @property
    def pixels(self) -> np.ndarray:
        """(P, M, 2) integer pixel coordinates, row-major within each patch."""
        s = self.size
        vv, uu = np.mgrid[0:s, 0:s]
        off = np.stack([uu.ravel(), vv.ravel()], axis=-1)
        return self.corners[:, None, :] + off[None]


@dataclass
class TrainState:
    field: CanonicalField
    net: PoseNetwork
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    ema: dict | None = None


class Trainer:
    def __init__(self, dataset: Dataset, config: TrainConfig):
        self.ds = dataset
        self.cfg = config
        cam = dataset.camera
        if config.patch_size > min(cam.width, cam.height):
            raise ConfigError("patch does not fit the image")
        self.body = CapsuleBody(dataset.skeleton)
        self.window = (float(dataset.exposures[0, 0]), float(dataset.exposures[-1, 1]))
        self._centers = self._mask_centers()
        # keep the initial density below 0.1 whatever the scale
        self._density_init = float(min(-3.0, np.log(np.expm1(0.05 / config.density_scale))))
        probe = init_field(config.field_resolution, body=self.body)
        self._box = (probe.box_min, probe.box_max)

    def _mask_centers(self) -> list[np.ndarray]:
        from scipy.ndimage import binary_dilation
        out = []
        for m in self.ds.masks:
            fg = binary_dilation(m > 0.05, iterations=2)
            vv, uu = np.nonzero(fg)
            out.append(np.stack([uu, vv], axis=-1))
        return out

    def init_state(self) -> TrainState:
        c = self.cfg
        fld = init_field(c.field_resolution, body=self.body, density_init=self._density_init,
                         density_scale=c.density_scale)
        net = PoseNetwork(self.ds.midpoints, self.ds.poses, self.window, seed=c.seed)
        lrs = {"grid": c.lr_field}
        lrs.update({k: c.lr_pose for k in PoseNetwork.PARAM_NAMES})
        ema = None
        if c.ema_decay > 0:
            ema = {"grid": np.array(fld.grid), **{k: v.copy() for k, v in net.params.items()}}
        return TrainState(fld, net, Adam(lrs), np.random.default_rng(c.seed), ema=ema)

    def sample_batch(self, rng: np.random.Generator) -> PatchBatch:
        c, ds = self.cfg, self.ds
        W, H, S = ds.camera.width, ds.camera.height, c.patch_size
        frames = rng.integers(0, ds.n_frames, c.patches)
        corners = np.empty((c.patches, 2), dtype=np.int64)
        for k, n in enumerate(frames):
            cand = self._centers[n]
            if len(cand) and rng.uniform() < c.mask_bias:
                center = cand[rng.integers(len(cand))]
            else:
                center = np.array([rng.integers(W), rng.integers(H)])
            corners[k] = np.clip(center - S // 2, 0, [W - S, H - S])
        lo = ds.exposures[frames, 0]
        hi = ds.exposures[frames, 1]
        if c.cross_frame_events:
            # t_i inside this exposure, t_j inside the next one (last frame: both inside its own)
            nxt = np.minimum(frames + 1, ds.n_frames - 1)
            t_i = rng.uniform(lo, hi)
            t_j = rng.uniform(ds.exposures[nxt, 0], ds.exposures[nxt, 1])
            t_i, t_j = np.minimum(t_i, t_j), np.maximum(t_i, t_j)
        else:
            tt = np.sort(rng.uniform(lo[:, None], hi[:, None], (c.patches, 2)), axis=-1)
            t_i, t_j = tt[:, 0], tt[:, 1]
        t_j = np.maximum(t_j, t_i + 1e-6)
        batch = PatchBatch(frames, corners, S, None, None, ds.midpoints[frames], t_i, t_j, None,
                           int(rng.integers(2**62)))
        pix = batch.pixels
        batch.colors = ds.blurry[frames[:, None], pix[..., 1], pix[..., 0]]
        batch.masks = np.clip(ds.masks[frames[:, None], pix[..., 1], pix[..., 0]], 0.0, 1.0)
        batch.events = ds.events.integrals(pix[..., 0], pix[..., 1], t_i[:, None], t_j[:, None]).astype(float)
        return batch

    def _variance(self, out, active: bool):
        """Loss variance: rendered V, with empty-ray mass counted as static."""
        if not active:
            return 1.0
        A = np.asarray(ad.value(out.alpha))
        return out.velocity + np.clip(1.0 - A, 0.0, 1.0) * self.cfg.velocity.static_score

    def losses(self, grid, params, net: PoseNetwork, batch: PatchBatch, rng=None):
        """Loss components for one batch; ``grid``/``params`` may be Variables."""
        c = self.cfg
        P, M = batch.colors.shape[:2]
        fld = CanonicalField(self.cfg.field_resolution, self._box[0], self._box[1], grid, c.density_scale)
        bg = self.ds.background
        origins, dirs = pixel_rays(self.ds.camera, batch.pixels.reshape(-1, 2))
        origins, dirs = origins.reshape(P, M, 3), dirs.reshape(P, M, 3)
        use_event = c.weights.event > 0
        times = np.concatenate([batch.t_mid, batch.t_i, batch.t_j]) if use_event else batch.t_mid
        poses = net.forward(times, params)
        vel = c.needs_velocity
        vcfg = c.velocity
        next_poses = None
        if vel:
            pv = [np.asarray(ad.value(net.forward(times[:P] + vcfg.dt)))]
            if use_event and c.vr_el:
                pv.append(np.asarray(ad.value(net.forward(times[P:] + vcfg.dt))))
            next_poses = pv
        mid = render_rays(fld, self.body, poses[:P], origins, dirs, c.n_samples, rng=rng,
                          pose_next=None if next_poses is None else next_poses[0], vcfg=vcfg if vel else None,
                          background=bg)
        V_rgb = self._variance(mid, c.va_pl)
        V_a = self._variance(mid, c.velocity_alpha)
        comps = {
            "rgb": photometric_loss(mid.color, V_rgb, batch.colors, c.weights.patch),
            "alpha": alpha_loss(mid.alpha, V_a, batch.masks),
            "pose": pose_regularization(net.forward(self.ds.midpoints, params), self.ds.poses),
            "event": 0.0,
        }
        if use_event:
            pair = render_rays(fld, self.body, poses[P:], np.concatenate([origins, origins]),
                               np.concatenate([dirs, dirs]), c.n_samples, rng=rng,
                               pose_next=next_poses[1] if vel and c.vr_el else None,
                               vcfg=vcfg if vel and c.vr_el else None, background=bg)
            C_i, C_j = pair.color[:P], pair.color[P:]
            if c.vr_el:
                V = self._variance(pair, True)
                comps["event"] = event_loss(C_i, C_j, V[:P], V[P:], batch.events, self.ds.events.threshold)
            else:
                comps["event"] = vanilla_event_loss(C_i, C_j, batch.events, self.ds.events.threshold)
        return comps

    def train_step(self, state: TrainState, batch: PatchBatch | None = None) -> dict:
        if batch is None:
            batch = self.sample_batch(state.rng)
        grid = ad.Variable(np.asarray(ad.value(state.field.grid)), requires_grad=True, name="grid")
        params = {k: ad.Variable(v, requires_grad=True, name=k) for k, v in state.net.params.items()}
        with ad.Tape() as tape:
            comps = self.losses(grid, params, state.net, batch, rng=np.random.default_rng(batch.jitter_seed))
            try:
                total, breakdown = total_loss(comps, self.cfg.weights)
            except NonFiniteLoss as exc:
                raise NonFiniteLoss(f"step {state.step}: {exc}") from None
        grads = ad.backward(tape, total) if isinstance(total, ad.Variable) else {}
        flat = {"grid": grid.value, **{k: v.value for k, v in params.items()}}
        g = {"grid": grads.get(grid)}
        g.update({k: grads.get(v) for k, v in params.items()})
        new = state.optimizer.step(flat, g)
        state.field = state.field.with_grid(new["grid"])
        state.net.params = {k: new[k] for k in PoseNetwork.PARAM_NAMES}
        if state.ema is not None:
            d = self.cfg.ema_decay
            for k, v in new.items():
                state.ema[k] = d * state.ema[k] + (1.0 - d) * v
        state.step += 1
        return breakdown

    @staticmethod
    def model(state: TrainState) -> tuple[CanonicalField, PoseNetwork]:
        """The model to save and evaluate: the weight average if one is kept."""
        if state.ema is None:
            return state.field, state.net
        net = copy.copy(state.net)
        net.params = {k: state.ema[k].copy() for k in PoseNetwork.PARAM_NAMES}
        return state.field.with_grid(state.ema["grid"].copy()), net


@dataclass
class TrainResult:
    field: CanonicalField
    net: PoseNetwork
    log: list[dict]
    state: TrainState | None = None


LOG_COLUMNS = ("step",) + LOSS_KEYS


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["step"]] + [repr(float(r[k])) for k in LOSS_KEYS])


def save_checkpoint(result_field: CanonicalField, net: PoseNetwork, out_dir, tag: str = "final") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_field(result_field, out / f"field_{tag}.bin")
    save_pose_net(net, out / f"posenet_{tag}.bin")
    return out


def load_checkpoint(ckpt_dir, tag: str = "final") -> tuple[CanonicalField, PoseNetwork]:
    d = Path(ckpt_dir)
    f, p = d / f"field_{tag}.bin", d / f"posenet_{tag}.bin"
    if not f.is_file() or not p.is_file():
        raise ConfigError(f"no checkpoint '{tag}' in {d}")
    return load_field(f), load_pose_net(p)


def train(dataset: Dataset, config: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    trainer = Trainer(dataset, config)
    state = trainer.init_state()
    rows = []
    t0 = time.perf_counter()
    for it in range(config.iterations):
        try:
            br = trainer.train_step(state)
        except NonFiniteLoss:
            if out_dir is not None:
                save_checkpoint(state.field, state.net, out_dir, "abort")
                write_log(rows, Path(out_dir) / "train_log.csv")
            raise
        rows.append({"step": state.step, **br})
        if config.log_every and state.step % config.log_every == 0:
            log.info("step %d total %.4g (%.1fs)", state.step, br["total"], time.perf_counter() - t0)
            if progress is not None:
                progress(state.step, br)
        if out_dir is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
            save_checkpoint(*trainer.model(state), out_dir, f"{state.step:06d}")
    fld, net = trainer.model(state)
    if out_dir is not None:
        save_checkpoint(fld, net, out_dir)
        write_log(rows, Path(out_dir) / "train_log.csv")
    return TrainResult(fld, net, rows, state)


def render_midpoints(fld: CanonicalField, net: PoseNetwork, dataset: Dataset, n_samples: int = 32):
    """Forward renders at every exposure midpoint -> (rgb (N,H,W,3), alpha (N,H,W))."""
    body = CapsuleBody(dataset.skeleton)
    rgbs, alphas = [], []
    for t in dataset.midpoints:
        rgb, a, _ = render_image(fld, body, pose_at(net, t), dataset.camera, n_samples,
                                 background=dataset.background)
        rgbs.append(rgb)
        alphas.append(a)
    return np.stack(rgbs), np.stack(alphas)


def with_flags(config: TrainConfig, **flags) -> TrainConfig:
    return replace(config, **flags)
