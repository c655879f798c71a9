"""Canonical appearance field: a dense voxel grid of color and density.

Grid nodes sit on a regular lattice spanning the bounding box (node 0 on the
min corner, node ``res-1`` on the max corner).  Channels 0-2 hold color
pre-activations (sigmoid), channel 3 holds density pre-activation (softplus).
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .body import CapsuleBody
from .config import Config, ConfigError

DEFAULT_DENSITY_INIT = -3.0
_MAGIC = b"BLURMAN-FIELD 1\n"


@dataclass
class CanonicalField:
    resolution: tuple[int, int, int]
    box_min: np.ndarray
    box_max: np.ndarray
    grid: object  # (X, Y, Z, 4) ndarray or Variable
    density_scale: float = 1.0  # sigma = density_scale * softplus(raw)

    @property
    def voxel_size(self) -> np.ndarray:
        return (self.box_max - self.box_min) / (np.array(self.resolution) - 1)

    def with_grid(self, grid) -> "CanonicalField":
        return CanonicalField(self.resolution, self.box_min, self.box_max, grid, self.density_scale)

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.box_min[i], self.box_max[i], self.resolution[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(ad.value(pts))
        return np.all((p >= self.box_min) & (p <= self.box_max), axis=-1)


def query(field: CanonicalField, pts):
    """Color (N, 3) in [0, 1] and density (N,) >= 0 at canonical points (N, 3).

    Points outside the box return zero color and zero density.
    """
    inside = field.contains(pts)
    coords = (pts - field.box_min) / field.voxel_size
    coords = ad.clip(coords, 0.0, np.array(field.resolution, dtype=float) - 1.0)
    raw = ad.trilinear_gather(field.grid, coords)
    mask = inside.astype(float)
    color = ad.sigmoid(raw[:, 0:3]) * mask[:, None]
    sigma = ad.softplus(raw[:, 3]) * (mask * field.density_scale)
    return color, sigma


def init_field(resolution=(64, 64, 64), box_min=None, box_max=None, body: CapsuleBody | None = None,
               density_init: float = DEFAULT_DENSITY_INIT, density_scale: float = 1.0) -> CanonicalField:
    """Mid-gray, near-transparent field.

    With a body given, the box defaults to the body's bounds grown by 15% of
    its extent, and an explicit box must hold the body with a 10% margin.
    """
    res = tuple(int(r) for r in resolution)
    if len(res) != 3 or min(res) < 8:
        raise ConfigError(f"field resolution must be >= 8 per axis, got {res}")
    if body is not None:
        lo, hi = body.bounds()
        ext = hi - lo
        if box_min is None:
            box_min, box_max = lo - 0.15 * ext, hi + 0.15 * ext
        elif np.any(np.asarray(box_min) > lo - 0.1 * ext + 1e-12) or np.any(np.asarray(box_max) < hi + 0.1 * ext - 1e-12):
            raise ConfigError("field box must contain the canonical body with a 10% margin")
    if not density_scale > 0:
        raise ConfigError("density scale must be positive")
    if box_min is None or box_max is None:
        raise ConfigError("field box is required when no body is given")
    box_min = np.asarray(box_min, dtype=float)
    box_max = np.asarray(box_max, dtype=float)
    if np.any(box_max <= box_min):
        raise ConfigError("field box max must exceed min")
    grid = np.zeros(res + (4,))
    grid[..., 3] = density_init
    return CanonicalField(res, box_min, box_max, grid, float(density_scale))


def field_from_config(cfg: Config, body: CapsuleBody, prefix: str = "field") -> CanonicalField:
    res = cfg.get_floats(f"{prefix}.resolution", [64, 64, 64])
    if len(res) == 1:
        res = res * 3
    box = None
    if f"{prefix}.box" in cfg:
        box = cfg.get_floats(f"{prefix}.box")
        if len(box) != 6:
            raise ConfigError(f"{prefix}.box expects 6 numbers (min xyz, max xyz)")
    return init_field(tuple(int(r) for r in res),
                      None if box is None else box[:3], None if box is None else box[3:], body=body,
                      density_init=cfg.get_float(f"{prefix}.density_init", DEFAULT_DENSITY_INIT),
                      density_scale=cfg.get_float(f"{prefix}.density_scale", 1.0))


# --------------------------------------------------------------------------
# checkpoint: text header then little-endian float32, row-major (x, y, z, channel)

def save_field(field: CanonicalField, path) -> None:
    grid = np.asarray(ad.value(field.grid))
    header = (
        f"resolution {field.resolution[0]} {field.resolution[1]} {field.resolution[2]}\n"
        f"box {' '.join(repr(float(v)) for v in field.box_min)} {' '.join(repr(float(v)) for v in field.box_max)}\n"
        f"channels {grid.shape[3]}\n"
        f"density_scale {field.density_scale!r}\n"
        "end\n"
    ).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())


def load_field(path) -> CanonicalField:
    data = Path(path).read_bytes()
    if not data.startswith(_MAGIC):
        raise ConfigError(f"{path}: not a field checkpoint")
    off = len(_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    header = data[off:off + hlen].decode().splitlines()
    off += hlen
    meta = {line.split()[0]: line.split()[1:] for line in header if line.strip() and line != "end"}
    res = tuple(int(v) for v in meta["resolution"])
    box = [float(v) for v in meta["box"]]
    ch = int(meta["channels"][0])
    grid = np.frombuffer(data, dtype="<f4", offset=off).astype(np.float64).reshape(res + (ch,))
    scale = float(meta.get("density_scale", ["1.0"])[0])
    return CanonicalField(res, np.array(box[:3]), np.array(box[3:]), grid, scale)
