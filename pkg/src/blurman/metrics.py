"""Masked PSNR / SSIM and the per-frame evaluation report."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation, gaussian_filter

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def _pixel_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape[:2], dtype=bool)
    m = np.asarray(mask, dtype=bool)
    if m.shape != tuple(shape[:2]):
        raise ValueError(f"mask shape {m.shape} does not match image {shape[:2]}")
    return m


def psnr(a, b, mask=None) -> float:
    """10 log10(1 / MSE) over masked pixels of [0, 1] images, capped at 99 dB."""
    a, b = _check_pair(a, b)
    m = _pixel_mask(mask, a.shape)
    if not m.any():
        raise ValueError("empty evaluation mask")
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _ssim_map(a, b):
    """SSIM map over valid window centers for a single-channel pair."""
    trunc = (SSIM_WINDOW // 2) / SSIM_SIGMA
    blur = lambda x: gaussian_filter(x, SSIM_SIGMA, truncate=trunc, mode="constant")  # noqa: E731
    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    r = SSIM_WINDOW // 2
    return (num / den)[r:-r, r:-r]


def ssim(a, b, mask=None) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, averaged over masked centers and channels."""
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    m = _pixel_mask(mask, a.shape)
    r = SSIM_WINDOW // 2
    centers = m[r:-r, r:-r]
    if not centers.any():
        raise ValueError("mask has no valid SSIM window centers")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    vals = [_ssim_map(a[..., c], b[..., c])[centers].mean() for c in range(a.shape[-1])]
    return float(np.mean(vals))


def evaluation_mask(gt_alpha, pred_alpha=None, radius: int = 2) -> np.ndarray:
    """Union of GT and predicted alpha > 0.5, dilated by ``radius`` pixels."""
    m = np.asarray(gt_alpha) > 0.5
    if pred_alpha is not None:
        m = m | (np.asarray(pred_alpha) > 0.5)
    if radius > 0 and m.any():
        yy, xx = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        m = binary_dilation(m, structure=(yy ** 2 + xx ** 2) <= radius ** 2)
    return m


@dataclass
class FrameScore:
    frame: int
    psnr: float
    ssim: float
    coverage: float


@dataclass
class EvalReport:
    frames: list[FrameScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([f.psnr for f in self.frames]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([f.ssim for f in self.frames]))

    @property
    def mean_coverage(self) -> float:
        return float(np.mean([f.coverage for f in self.frames]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "psnr_db", "ssim", "mask_coverage"])
            for f in self.frames:
                w.writerow([f.frame, f"{f.psnr:.6f}", f"{f.ssim:.6f}", f"{f.coverage:.6f}"])
            w.writerow(["mean", f"{self.mean_psnr:.6f}", f"{self.mean_ssim:.6f}", f"{self.mean_coverage:.6f}"])

    def summary(self) -> str:
        if not self.frames:
            return "no frames evaluated"
        worst = min(self.frames, key=lambda f: f.psnr)
        return (f"{len(self.frames)} frames: PSNR {self.mean_psnr:.2f} dB, SSIM {self.mean_ssim:.4f}, "
                f"mask coverage {100 * self.mean_coverage:.1f}% (worst frame {worst.frame}: {worst.psnr:.2f} dB)")


def read_report_csv(path) -> EvalReport:
    rep = EvalReport()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["frame"] == "mean":
                continue
            rep.frames.append(FrameScore(int(row["frame"]), float(row["psnr_db"]), float(row["ssim"]),
                                         float(row["mask_coverage"])))
    return rep


def evaluate(pred_rgb, gt_rgb, gt_alpha, pred_alpha=None) -> EvalReport:
    """Score stacks of frames (N, H, W, 3) against held-out sharp references."""
    rep = EvalReport()
    for n in range(len(gt_rgb)):
        m = evaluation_mask(gt_alpha[n], None if pred_alpha is None else pred_alpha[n])
        if not m.any():
            continue
        rep.frames.append(FrameScore(n, psnr(pred_rgb[n], gt_rgb[n], m), ssim(pred_rgb[n], gt_rgb[n], m),
                                     float(m.mean())))
    return rep


def boundary_energy(alpha) -> float:
    """Mean squared finite-difference gradient of an alpha map."""
    a = np.asarray(alpha, dtype=float)
    gy, gx = np.gradient(a, axis=(-2, -1))
    return float(np.mean(gx ** 2 + gy ** 2))


def write_report(report: EvalReport, out_dir, stem: str = "eval") -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, txt_path = out / f"{stem}.csv", out / f"{stem}_summary.txt"
    report.write_csv(csv_path)
    txt_path.write_text(report.summary() + "\n")
    return csv_path, txt_path
