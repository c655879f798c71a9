"""Event streams, event integrals, predicted event counts and an ideal simulator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

LUMA = np.array([0.2126, 0.7152, 0.0722])
LOG_EPS = 1e-3


@dataclass(frozen=True)
class Event:
    t: float
    u: int
    v: int
    p: int


@dataclass
class EventStream:
    """Time-sorted events; arrays share one index."""
    t: np.ndarray
    u: np.ndarray
    v: np.ndarray
    p: np.ndarray
    width: int
    height: int
    threshold: float
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=np.int64)
        self.v = np.asarray(self.v, dtype=np.int64)
        self.p = np.asarray(self.p, dtype=np.int64)
        if not self.threshold > 0:
            raise ValueError("event threshold must be positive")
        if len(self.t) and np.any(np.diff(self.t) < 0):
            raise ValueError("event timestamps must be non-decreasing")
        if len(self.t) and (self.u.min() < 0 or self.u.max() >= self.width
                            or self.v.min() < 0 or self.v.max() >= self.height):
            raise ValueError("event pixel outside the sensor")
        if np.any(np.abs(self.p) != 1):
            raise ValueError("event polarity must be +1 or -1")

    @classmethod
    def empty(cls, width: int, height: int, threshold: float) -> "EventStream":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0), np.zeros(0), width, height, threshold)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for i in range(len(self.t)):
            yield Event(float(self.t[i]), int(self.u[i]), int(self.v[i]), int(self.p[i]))

    def _pixel_index(self):
        if self._index is None:
            pix = self.v * self.width + self.u
            order = np.lexsort((self.t, pix))
            spix = pix[order]
            starts = np.searchsorted(spix, np.arange(self.width * self.height + 1))
            self._index = {"t": self.t[order], "cum": np.concatenate([[0], np.cumsum(self.p[order])]),
                           "starts": starts}
        return self._index

    def integrals(self, u, v, t_i, t_j) -> np.ndarray:
        """Vectorised :func:`event_integral` over pixel arrays and interval arrays."""
        u, v, t_i, t_j = np.broadcast_arrays(np.asarray(u), np.asarray(v),
                                             np.asarray(t_i, float), np.asarray(t_j, float))
        if np.any(t_i >= t_j):
            raise ValueError("event integral needs t_i < t_j")
        idx = self._pixel_index()
        ts, cum, starts = idx["t"], idx["cum"], idx["starts"]
        pix = (v * self.width + u).ravel()
        out = np.empty(pix.shape, dtype=np.int64)
        for k, (q, a, b) in enumerate(zip(pix, t_i.ravel(), t_j.ravel())):
            s, e = starts[q], starts[q + 1]
            seg = ts[s:e]
            lo = s + np.searchsorted(seg, a, side="right")
            hi = s + np.searchsorted(seg, b, side="right")
            out[k] = cum[hi] - cum[lo]
        return out.reshape(u.shape)


def event_integral(stream: EventStream, pixel, t_i: float, t_j: float) -> int:
    """Sum of polarities at ``pixel`` for events with ``t_i < t <= t_j``."""
    if not t_i < t_j:
        raise ValueError("event integral needs t_i < t_j")
    return int(stream.integrals(pixel[0], pixel[1], t_i, t_j))


def luminance(rgb):
    return ad.sum(rgb * LUMA, axis=-1)


def log_luminance(rgb, eps: float = LOG_EPS):
    """log of Rec.709 luminance, floored at ``eps``."""
    return ad.log(ad.clip(luminance(rgb), eps, None))


def predicted_events(c_ti, c_tj, threshold: float, eps: float = LOG_EPS):
    """Events expected between two renders: positive when the pixel brightens."""
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return (log_luminance(c_tj, eps) - log_luminance(c_ti, eps)) / threshold


def simulate_events(log_frames: np.ndarray, timestamps: np.ndarray, threshold: float, *,
                    noise_rate: float = 0.0, threshold_sigma: float = 0.0,
                    seed: int | None = None) -> EventStream:
    """Ideal threshold-crossing simulator over a log-intensity sequence.

    ``log_frames`` is (T, H, W).  Each pixel keeps a reference level; the
    signal is linearly interpolated between frames and every crossing of
    ``ref +/- threshold`` emits one event at the interpolated crossing time and
    moves the reference by one threshold.  Optional noise: per-pixel threshold
    mismatch (``threshold_sigma``, relative) and uniformly timed spurious
    events (``noise_rate`` per pixel per second).
    """
    L = np.asarray(log_frames, dtype=float)
    ts = np.asarray(timestamps, dtype=float)
    if L.ndim != 3 or L.shape[0] < 2:
        raise ValueError("need at least two (H, W) frames")
    if len(ts) != L.shape[0] or np.any(np.diff(ts) <= 0):
        raise ValueError("timestamps must be strictly increasing, one per frame")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if not np.all(np.isfinite(L)):
        raise ValueError("log intensity must be finite")
    T, H, W = L.shape
    rng = np.random.default_rng(seed)
    flat = L.reshape(T, H * W)
    theta = np.full(H * W, float(threshold))
    if threshold_sigma > 0:
        theta = np.clip(theta * (1.0 + threshold_sigma * rng.standard_normal(H * W)), 0.1 * threshold, None)
    ref = flat[0].copy()
    t_out, pix_out, pol_out = [], [], []
    for k in range(T - 1):
        L0, L1 = flat[k], flat[k + 1]
        t0, t1 = ts[k], ts[k + 1]
        n_up = np.maximum(np.floor((L1 - ref) / theta), 0).astype(np.int64)
        n_dn = np.maximum(np.floor((ref - L1) / theta), 0).astype(np.int64)
        for n, sign in ((n_up, 1), (n_dn, -1)):
            pix = np.flatnonzero(n)
            if len(pix) == 0:
                continue
            reps = n[pix]
            rp = np.repeat(pix, reps)
            step = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps) + 1
            level = ref[rp] + sign * step * theta[rp]
            frac = (level - L0[rp]) / (L1[rp] - L0[rp])
            t_out.append(t0 + np.clip(frac, 0.0, 1.0) * (t1 - t0))
            pix_out.append(rp)
            pol_out.append(np.full(len(rp), sign))
        ref = ref + (n_up - n_dn) * theta
    if noise_rate > 0:
        n_noise = rng.poisson(noise_rate * (ts[-1] - ts[0]) * H * W)
        t_out.append(rng.uniform(ts[0], ts[-1], n_noise))
        pix_out.append(rng.integers(0, H * W, n_noise))
        pol_out.append(rng.choice([-1, 1], n_noise))
    if not t_out:
        return EventStream.empty(W, H, threshold)
    t_all = np.concatenate(t_out)
    pix_all = np.concatenate(pix_out)
    pol_all = np.concatenate(pol_out)
    order = np.lexsort((pix_all, t_all))
    pix_all = pix_all[order]
    return EventStream(t_all[order], pix_all % W, pix_all // W, pol_all[order], W, H, threshold)


# --------------------------------------------------------------------------
# CSV: one comment header line with sensor size and threshold, then t_us,u,v,p

def write_events_csv(stream: EventStream, path) -> None:
    t_us = np.rint(stream.t * 1e6).astype(np.int64)
    with open(path, "w") as fh:
        fh.write(f"# width={stream.width} height={stream.height} theta={stream.threshold!r}\n")
        fh.write("t_us,u,v,p\n")
        for row in zip(t_us, stream.u, stream.v, stream.p):
            fh.write("%d,%d,%d,%d\n" % row)


def read_events_csv(path) -> EventStream:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing event header line")
    meta = dict(item.split("=", 1) for item in lines[0][1:].split())
    body = lines[2:]
    if body:
        arr = np.loadtxt(body, delimiter=",", dtype=np.int64, ndmin=2)
        return EventStream(arr[:, 0] * 1e-6, arr[:, 1], arr[:, 2], arr[:, 3],
                           int(meta["width"]), int(meta["height"]), float(meta["theta"]))
    return EventStream.empty(int(meta["width"]), int(meta["height"]), float(meta["theta"]))
