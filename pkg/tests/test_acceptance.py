"""End-to-end acceptance checks.  Each test records one PASS/FAIL line that
is repeated in the terminal summary; the training-based ones share runs."""
import filecmp
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from blurman import autodiff as ad
from blurman.body import CapsuleBody, Pose, make_skeleton
from blurman.cli import run as cli_run
from blurman.config import Config
from blurman.datagen import SceneConfig, ground_truth_field, one_arm_swing, scene_from_config, synthesize
from blurman.events import event_integral, log_luminance, predicted_events, simulate_events
from blurman.field import CanonicalField
from blurman.losses import alpha_loss, event_loss, photometric_loss, pose_regularization, vanilla_event_loss
from blurman.metrics import boundary_energy, evaluate
from blurman.render import pixel_rays, posed_bounds, render_image, render_rays
from blurman.trainer import ABLATION_ROWS, PoseNetwork, TrainConfig, render_midpoints, train, with_flags
from blurman.velocity import VelocityConfig, point_velocity, project_tangential

from conftest import report_criterion

pytestmark = pytest.mark.acceptance

TOY_CFG = Path(__file__).resolve().parents[1] / "configs" / "toy.cfg"


# --------------------------------------------------------------------------
# 1. gradient integrity

def _fd_setup():
    scene = scene_from_config(Config.load(TOY_CFG))
    body, cam = scene.body(), scene.camera()
    fld = ground_truth_field(body, (20, 20, 8), scene.texture_period, density=25.0)
    mids = scene.exposure_intervals().mean(axis=1)[:6]
    net = PoseNetwork(mids, scene.pose_at(mids), (0.0, mids[-1] + 0.05), hidden=16, n_freq=3)
    rng = np.random.default_rng(0)
    net.params["w3"] = rng.normal(scale=0.02, size=net.params["w3"].shape)
    net.params["b3"] = rng.normal(scale=0.02, size=net.params["b3"].shape)
    times = np.array([0.25, 0.21, 0.29])  # midpoint, t_i, t_j
    # 8x8 patch on the swinging arm
    arm = ground_truth_field(body, (20, 20, 8), scene.texture_period, bones=[1])
    _, a_arm, _ = render_image(arm, body, scene.pose_at(times[0]), cam, 16)
    vv, uu = np.nonzero(a_arm > 0.5)
    c = np.array([uu[len(uu) // 2], vv[len(vv) // 2]])
    corner = np.clip(c - 4, 0, [cam.width - 8, cam.height - 8])
    gy, gx = np.mgrid[0:8, 0:8]
    pix = np.stack([corner[0] + gx.ravel(), corner[1] + gy.ravel()], axis=-1)
    o, d = pixel_rays(cam, pix)
    poses = np.asarray(net.forward(times))
    lo, hi = posed_bounds(body, poses)
    box = (lo.min(0) - 0.2, hi.max(0) + 0.2)
    return scene, body, fld, net, times, o[None], d[None], box, rng


def _max_rel_err(f_fd, x, analytic, n_top=10, step=1e-5):
    """Central differences of ``f_fd`` against ``analytic`` on its largest components."""
    x = np.asarray(x, dtype=float)
    g = analytic.reshape(-1)
    worst = 0.0
    for i in np.argsort(np.abs(g))[::-1][:n_top]:
        xp, xm = x.copy().reshape(-1), x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        num = (float(ad.value(f_fd(xp.reshape(x.shape)))) - float(ad.value(f_fd(xm.reshape(x.shape))))) / (2 * step)
        worst = max(worst, abs(num - g[i]) / max(abs(num), abs(g[i]), 1e-8))
    return worst


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    scene, body, fld, net, times, o, d, box, rng = _fd_setup()
    vcfg = VelocityConfig()
    bg = scene.background

    def render(grid, params, k):
        f = CanonicalField(fld.resolution, fld.box_min, fld.box_max, grid, fld.density_scale)
        return render_rays(f, body, net.forward(times[k:k + 1], params), o, d, 16, bounds=box, background=bg)

    vel = [render_rays(fld, body, net.forward(times[k:k + 1]), o, d, 16, bounds=box, background=bg,
                       pose_next=net.forward(times[k:k + 1] + vcfg.dt), vcfg=vcfg).velocity for k in range(3)]
    target = rng.uniform(0.1, 0.9, (1, 64, 3))
    mask = (rng.uniform(size=(1, 64)) > 0.5).astype(float)
    events = rng.integers(-2, 3, (1, 64)).astype(float)
    sup = net.knot_poses + rng.normal(scale=0.05, size=net.knot_poses.shape)
    theta = scene.threshold
    grid0 = np.asarray(fld.grid)

    # the stop-gradient side of the relative event loss is a constant for the difference quotient
    c_i0, c_j0 = render(grid0, net.params, 1).color, render(grid0, net.params, 2).color
    i_trained = (vel[1] > vel[2])[..., None]

    def event_fd(g, p):
        ci = ad.where(i_trained, render(g, p, 1).color, c_i0)
        cj = ad.where(i_trained, c_j0, render(g, p, 2).color)
        return event_loss(ci, cj, vel[1], vel[2], events, theta)

    losses = {
        "L_RGB": (lambda g, p: photometric_loss(render(g, p, 0).color, vel[0], target, 0.1), None),
        "L_Alpha": (lambda g, p: alpha_loss(render(g, p, 0).alpha[0], vel[0][0], mask[0]), None),
        "L_Event": (lambda g, p: event_loss(render(g, p, 1).color, render(g, p, 2).color, vel[1], vel[2],
                                            events, theta), event_fd),
        "L_Event(vanilla)": (lambda g, p: vanilla_event_loss(render(g, p, 1).color, render(g, p, 2).color,
                                                             events, theta), None),
        "L_Pose": (lambda g, p: pose_regularization(net.forward(net.knot_times, p), sup), None),
    }
    worst = {}
    for name, (L, L_fd) in losses.items():
        L_fd = L_fd or L
        gvar = ad.Variable(grid0.copy(), requires_grad=True)
        pvars = {k: ad.Variable(v.copy(), requires_grad=True) for k, v in net.params.items()}
        with ad.Tape() as tape:
            out = L(gvar, pvars)
        grads = ad.backward(tape, out)
        errs = []
        if name != "L_Pose":  # no voxel dependence
            errs.append(_max_rel_err(lambda x: L_fd(x, net.params), grid0, grads[gvar]))
        for pname in ("w1", "b2", "w3", "b3"):
            # smaller step: pose shifts move every sample, and trilinear cells have kinks at their faces
            errs.append(_max_rel_err(lambda x: L_fd(grid0, {**net.params, pname: x}), net.params[pname],
                                     grads[pvars[pname]], n_top=4, step=1e-6))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report_criterion(1, ok, f"max rel. err {detail} (need < 1e-4); {elapsed:.0f} s (need < 60 s)")
    assert ok


# --------------------------------------------------------------------------
# 2. velocity correctness

def test_criterion_2_velocity_and_projection():
    body = CapsuleBody(make_skeleton([("b", -1, (0, 0, 0), (1, 0, 0), 0.1)]))
    rng = np.random.default_rng(1)
    worst_speed = 0.0
    for omega in (0.5, 1.0, 2.0):
        fn = lambda t, w=omega: Pose([0, 0, w * t], [0, 0, 0], np.zeros((0, 3)))  # noqa: E731
        ang = rng.uniform(0, 2 * np.pi, 50)
        r = rng.uniform(0.05, 1.0, 50)
        # surface points of the capsule around the x axis
        x = np.stack([r, 0.1 * np.cos(ang), 0.1 * np.sin(ang)], axis=-1)
        v = point_velocity(x, rng.uniform(0, 1), fn, body, VelocityConfig(dt=1 / 240))
        expect = omega * np.hypot(x[:, 0], x[:, 1])  # distance to the rotation (z) axis
        worst_speed = max(worst_speed, float(np.max(np.abs(np.linalg.norm(v, axis=-1) - expect) / expect)))
    v = rng.normal(size=(10_000, 3))
    n = rng.normal(size=(10_000, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    p = project_tangential(v, n)
    ortho = float(np.abs(np.sum(p * n, -1)).max())
    idem = float(np.abs(project_tangential(p, n) - p).max())
    expand = float((np.linalg.norm(p, axis=-1) - np.linalg.norm(v, axis=-1)).max())
    ok = worst_speed < 0.01 and ortho <= 1e-12 and idem <= 1e-12 and expand <= 1e-12
    report_criterion(2, ok, f"speed rel. err {worst_speed:.1e} (need < 1e-2); |v.n| {ortho:.1e}, "
                            f"idempotence {idem:.1e}, growth {expand:.1e} (need <= 1e-12)")
    assert ok


# --------------------------------------------------------------------------
# 3. blur localization

def test_criterion_3_moving_arm_has_higher_velocity():
    t0 = time.perf_counter()
    # a brisk swing: the score is v0 + softplus(speed), so the contrast grows with limb speed
    scene = SceneConfig(swings=one_arm_swing(amplitude=1.0, freq=2.0), texture_period=0.2, background=0.25)
    body, cam = scene.body(), scene.camera()
    gt = ground_truth_field(body, scene.field_resolution, scene.texture_period)
    arm_f = ground_truth_field(body, scene.field_resolution, scene.texture_period, bones=[1])
    torso_f = ground_truth_field(body, scene.field_resolution, scene.texture_period, bones=[0])
    vcfg = VelocityConfig()
    arm_v, torso_v = [], []
    for t in scene.exposure_intervals().mean(axis=1)[::6]:
        p, pn = scene.pose_at(t), scene.pose_at(t + vcfg.dt)
        _, _, v = render_image(gt, body, p, cam, 32, pose_next=pn, vcfg=vcfg)
        _, a_arm, _ = render_image(arm_f, body, p, cam, 32)
        _, a_torso, _ = render_image(torso_f, body, p, cam, 32)
        arm_v.append(v[a_arm > 0.5])
        torso_v.append(v[(a_torso > 0.5) & (a_arm < 0.01)])
    ratio = np.concatenate(arm_v).mean() / np.concatenate(torso_v).mean()
    elapsed = time.perf_counter() - t0
    ok = ratio >= 2.0 and elapsed < 120
    report_criterion(3, ok, f"arm/torso mean V ratio {ratio:.2f} (need >= 2); {elapsed:.0f} s (need < 120 s)")
    assert ok


# --------------------------------------------------------------------------
# 4. event round trip

def test_criterion_4_event_round_trip():
    scene = SceneConfig(swings=one_arm_swing(amplitude=0.75, freq=0.75), frames=2, width=32, height=32,
                        focal=50.0, field_resolution=(24, 24, 10), texture_period=0.2, background=0.25,
                        fps_high=240.0)
    body, cam = scene.body(), scene.camera()
    gt = ground_truth_field(body, scene.field_resolution, scene.texture_period)
    ts = scene.high_rate_times()
    L = np.stack([log_luminance(render_image(gt, body, scene.pose_at(t), cam, 16, background=0.25)[0])
                  for t in ts])
    stream = simulate_events(L, ts, scene.threshold)
    H, W = L.shape[1:]
    rng = np.random.default_rng(2)
    worst, n = 0.0, 0
    for _ in range(3000):
        u, v = rng.integers(W), rng.integers(H)
        own = stream.t[(stream.u == u) & (stream.v == v)]
        # the reference level equals the signal at the trace start and at each of the pixel's events
        t_i = ts[0] if (rng.uniform() < 0.3 or not len(own)) else rng.choice(own)
        t_j = rng.uniform(t_i, ts[-1])
        if not t_j > t_i:
            continue
        pred = (np.interp(t_j, ts, L[:, v, u]) - np.interp(t_i, ts, L[:, v, u])) / scene.threshold
        worst = max(worst, abs(pred - event_integral(stream, (u, v), t_i, t_j)))
        n += 1
    additive = True
    for _ in range(500):
        u, v = rng.integers(W), rng.integers(H)
        a, b, c = np.sort(rng.uniform(ts[0], ts[-1], 3))
        if a < b < c:
            additive &= (event_integral(stream, (u, v), a, b) + event_integral(stream, (u, v), b, c)
                         == event_integral(stream, (u, v), a, c))
    ok = worst <= 1.0 + 1e-9 and additive and len(stream) > 0
    report_criterion(4, ok, f"max |pred - integral| {worst:.3f} over {n} intervals, {len(stream)} events "
                            f"(need <= 1); additivity {'exact' if additive else 'broken'}")
    assert ok


# --------------------------------------------------------------------------
# training-based criteria share one toy dataset and memoised runs

@pytest.fixture(scope="module")
def toy():
    cfg = Config.load(TOY_CFG)
    scene = scene_from_config(cfg)
    ds = synthesize(scene)
    gt_mid = scene.pose_at(ds.midpoints)
    return ds, TrainConfig.from_config(cfg), cfg.get_int("render.samples", 32), gt_mid


_RUNS = {}


def _run(toy, name, **flags):
    ds, base, n_samples, gt_mid = toy
    cfg = with_flags(base, **flags)
    key = repr(cfg)
    if key not in _RUNS:
        t0 = time.perf_counter()
        res = train(ds, cfg)
        rgb, alpha = render_midpoints(res.field, res.net, ds, n_samples)
        rep = evaluate(rgb, ds.sharp, ds.sharp_alpha, alpha)
        pose_err = np.linalg.norm(res.net.forward(ds.midpoints) - gt_mid, axis=1).mean()
        _RUNS[key] = dict(psnr=rep.mean_psnr, energy=boundary_energy(alpha), seconds=time.perf_counter() - t0,
                          pose_err=float(pose_err))
    return _RUNS[key]


def test_criterion_5_ablation_ordering(toy):
    r = {name: _run(toy, name, **flags) for name, flags in ABLATION_ROWS.items()}
    total = sum(v["seconds"] for v in r.values())
    p = {k: v["psnr"] for k, v in r.items()}
    margin = p["full"] - p["baseline"]
    ok = margin >= 0.5 and p["va_pl"] >= p["baseline"] and p["vr_el"] >= p["baseline"] and total < 3600
    report_criterion(5, ok, "PSNR " + ", ".join(f"{k} {v:.2f}" for k, v in p.items())
                     + f" dB; full - baseline {margin:+.2f} dB (need >= +0.5), singles >= baseline; "
                       f"{total / 60:.1f} min (need < 60)")
    assert ok


def test_criterion_6_velocity_alpha_sharpens_boundary(toy):
    vel = _run(toy, "full", **ABLATION_ROWS["full"])
    van = _run(toy, "full", **ABLATION_ROWS["full"], velocity_alpha=False)
    ok = vel["energy"] > van["energy"]
    report_criterion(6, ok, f"boundary energy velocity alpha {vel['energy']:.5f} vs vanilla {van['energy']:.5f}")
    assert ok


def test_criterion_7_events_help(toy):
    base = toy[1]
    full, none = [], []
    no_events = replace(base.weights, event=0.0)
    for seed in (base.seed, base.seed + 1, base.seed + 2):
        full.append(_run(toy, "full", **ABLATION_ROWS["full"], seed=seed)["psnr"])
        none.append(_run(toy, "full", **ABLATION_ROWS["full"], seed=seed, weights=no_events)["psnr"])
    gain = float(np.mean(full) - np.mean(none))
    ok = gain > 0
    report_criterion(7, ok, f"mean PSNR over 3 seeds: with events {np.mean(full):.2f}, alpha_e = 0 "
                            f"{np.mean(none):.2f} dB (gain {gain:+.2f}, need > 0)")
    assert ok


def test_pose_net_stays_near_ground_truth(toy):
    # the net starts on the supervision poses, so its initial error is theirs
    ds, gt_mid = toy[0], toy[3]
    init = np.linalg.norm(ds.poses - gt_mid, axis=1).mean()
    runs = list(_RUNS.values()) or [_run(toy, "full", **ABLATION_ROWS["full"])]
    worst = max(r["pose_err"] for r in runs)
    assert worst <= init + 1e-3, (worst, init)


# --------------------------------------------------------------------------
# 8. determinism through the CLI

DET_CFG = """\
seed = 3
scene.frames = 3
scene.width = 32
scene.height = 32
scene.focal = 50
scene.field_resolution = 24 24 10
scene.samples = 12
scene.texture_period = 0.2
scene.background = 0.25
scene.event_noise_rate = 0.5
scene.pose_noise = 0.01
scene.swing.arm = l_arm 0 0 1 0.75 0.75
train.iterations = 15
train.patches = 2
train.patch_size = 6
train.samples = 10
train.log_every = 0
train.checkpoint_every = 5
field.resolution = 12 12 8
field.density_scale = 20
"""


def _pipeline(root: Path, cfg: Path):
    assert cli_run(["synth", "--config", str(cfg), "--out", str(root / "data")]) == 0
    assert cli_run(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "ckpt")]) == 0
    assert cli_run(["eval", "--config", str(cfg), "--data", str(root / "data"), "--checkpoint",
                    str(root / "ckpt"), "--out", str(root / "eval")]) == 0


def test_criterion_8_pipeline_is_byte_identical(tmp_path):
    cfg = tmp_path / "det.cfg"
    cfg.write_text(DET_CFG)
    _pipeline(tmp_path / "a", cfg)
    _pipeline(tmp_path / "b", cfg)
    files = []
    for sub in ("data", "ckpt", "eval"):
        files += [p.relative_to(tmp_path / "a") for p in sorted((tmp_path / "a" / sub).rglob("*")) if p.is_file()]
    same = [f for f in files if filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f, shallow=False)]
    ok = len(same) == len(files) and any(f.name == "eval.csv" for f in files) and any(
        f.name == "field_final.bin" for f in files)
    report_criterion(8, ok, f"{len(same)}/{len(files)} checkpoint, data and eval files byte-identical")
    assert ok
