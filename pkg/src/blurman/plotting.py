"""Report figures written straight to image files (Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)


def loss_curves(rows: list[dict], path, keys=("rgb", "event", "pose", "alpha", "total"), smooth: int = 50):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.array([r["step"] for r in rows])
    for k in keys:
        y = np.array([r[k] for r in rows], dtype=float)
        if smooth > 1 and len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = steps[smooth - 1:]
        else:
            x = steps
        if np.all(y > 0):
            ax.semilogy(x, y, label=k)
    ax.set_xlabel("step")
    ax.set_ylabel("loss (moving average)")
    ax.legend(fontsize=8)
    _save(fig, path)


def frame_comparison(columns: dict, path, frames=None):
    """Grid of image stacks: one column per named (N, H, W, 3) stack."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    frames = list(range(0, n, max(1, n // 4)))[:4] if frames is None else list(frames)
    fig, axes = plt.subplots(len(frames), len(names), figsize=(2.2 * len(names), 2.2 * len(frames)),
                             squeeze=False)
    for r, f in enumerate(frames):
        for c, name in enumerate(names):
            ax = axes[r, c]
            ax.imshow(np.clip(columns[name][f], 0, 1), interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(name, fontsize=9)
            if c == 0:
                ax.set_ylabel(f"frame {f}", fontsize=8)
    _save(fig, path)


def velocity_map(values, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    im = ax.imshow(values, cmap="magma", interpolation="nearest")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_xticks([])
    ax.set_yticks([])
    if title:
        ax.set_title(title, fontsize=9)
    _save(fig, path)


def ablation_bars(rows: list[dict], path):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    names = [r["variant"] for r in rows]
    vals = [float(r["psnr_db"]) for r in rows]
    ax.bar(names, vals, color="#4c72b0")
    lo = min(vals)
    ax.set_ylim(lo - 1.0, max(vals) + 0.5)
    ax.set_ylabel("masked PSNR (dB)")
    for i, v in enumerate(vals):
        ax.text(i, v + 0.05, f"{v:.2f}", ha="center", fontsize=8)
    _save(fig, path)
