"""Heatmap decoding and the losses that train through it.

Pixel convention: the heatmap is an (H, W) grid whose pixel (r, c) has
center ((c + 0.5) / W, (r + 0.5) / H), so the first coordinate of a decoded
point is x (column direction) and the second is y (row direction), both
normalized to [0, 1].

Both losses return their exact gradient with respect to every heatmap value,
differentiated through the normalization quotient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import LandmarkSet
from .regulation import PseudoLabel

_GAMMA_EPS = 1e-30

OFFSET_MEAN = 0.01
OFFSET_STD = 0.005


@dataclass(frozen=True)
class Heatmap:
    """One sigmoid-activated probability surface; values strictly in (0, 1)."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError("heatmap values must be a 2-D grid")
        if not (np.all(v > 0) and np.all(v < 1)):
            raise ValueError("heatmap values must lie strictly in (0, 1)")
        object.__setattr__(self, "values", v)


def _grid_values(h) -> np.ndarray:
    if isinstance(h, Heatmap):
        return h.values
    return np.asarray(h, dtype=np.float64)


_CENTER_CACHE: dict = {}


def pixel_centers(shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """(xs, ys) 1-D center coordinates for a (H, W) grid."""
    key = tuple(shape)
    cached = _CENTER_CACHE.get(key)
    if cached is None:
        hh, ww = key
        xs = (np.arange(ww) + 0.5) / ww
        ys = (np.arange(hh) + 0.5) / hh
        xs.setflags(write=False)
        ys.setflags(write=False)
        cached = _CENTER_CACHE[key] = (xs, ys)
    return cached


def _gamma(values: np.ndarray) -> float:
    # extended-precision accumulation; epsilon is defensive only
    return float(np.sum(values, dtype=np.longdouble)) + _GAMMA_EPS


def decode(h) -> np.ndarray:
    """Integral (soft-argmax) decoding: normalized expectation of the grid."""
    values = _grid_values(h)
    xs, ys = pixel_centers(values.shape)
    gamma = _gamma(values)
    x = float(values.sum(axis=0) @ xs) / gamma
    y = float(values.sum(axis=1) @ ys) / gamma
    return np.array([x, y])


def decode_batch(heatmaps: np.ndarray) -> np.ndarray:
    """Vectorized decode over (..., H, W) grids -> (..., 2) coordinates."""
    values = np.asarray(heatmaps, dtype=np.float64)
    xs, ys = pixel_centers(values.shape[-2:])
    gamma = values.sum(axis=(-2, -1)) + _GAMMA_EPS
    x = (values.sum(axis=-2) @ xs) / gamma
    y = (values.sum(axis=-1) @ ys) / gamma
    return np.stack([x, y], axis=-1)


def sample_offsets(n: int, rng, mean: float = OFFSET_MEAN,
                   std: float = OFFSET_STD) -> np.ndarray:
    """n positive offset magnitudes ~ N(mean, std^2) truncated at zero.

    Non-positive draws are rejected and resampled.  `rng` is an integer seed
    or a numpy Generator; the result is deterministic given either.
    """
    if n < 1:
        raise ValueError("need at least one offset")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    out = gen.normal(mean, std, size=n)
    bad = out <= 0
    while bad.any():
        out[bad] = gen.normal(mean, std, size=int(bad.sum()))
        bad = out <= 0
    return out


def _distance_grid(shape: tuple[int, int], point: np.ndarray) -> np.ndarray:
    xs, ys = pixel_centers(shape)
    dx = xs[None, :] - point[0]
    dy = ys[:, None] - point[1]
    return np.hypot(dx, dy)


def region_attention_loss(heatmaps: np.ndarray, pseudo: PseudoLabel,
                          offsets: np.ndarray) -> tuple[float, np.ndarray]:
    """Soft region loss: per landmark, | |delta_i| - E[dist to pseudo label] |.

    heatmaps: (n, H, W); offsets: (n,) positive magnitudes.  Landmarks with a
    False validity flag contribute zero loss and zero gradient.

    Returns (loss, grad) with grad shaped like heatmaps, the exact derivative
    of the loss through the per-landmark normalization quotient.
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    offsets = np.asarray(offsets, dtype=np.float64)
    n = heatmaps.shape[0]
    if pseudo.coords.shape[0] != n or offsets.shape != (n,):
        raise ValueError("heatmap, pseudo-label and offset counts must agree")

    loss = 0.0
    grad = np.zeros_like(heatmaps)
    for i in range(n):
        if not pseudo.valid[i]:
            continue
        values = heatmaps[i]
        dist = _distance_grid(values.shape, pseudo.coords[i])
        gamma = _gamma(values)
        expected = float(np.sum(values * dist, dtype=np.longdouble)) / gamma
        diff = offsets[i] - expected
        loss += abs(diff)
        grad[i] = -np.sign(diff) * (dist - expected) / gamma
    return loss, grad


def l1_coordinate_loss(heatmaps: np.ndarray,
                       target: LandmarkSet) -> tuple[float, np.ndarray]:
    """L1 distance between decoded coordinates and target landmarks.

    Landmarks with a False validity flag are skipped.  Returns (loss, grad)
    with the exact gradient through the decode quotient.
    """
    heatmaps = np.asarray(heatmaps, dtype=np.float64)
    n = heatmaps.shape[0]
    if target.n_landmarks != n:
        raise ValueError("heatmap and target landmark counts must agree")

    loss = 0.0
    grad = np.zeros_like(heatmaps)
    for i in range(n):
        if not target.valid[i]:
            continue
        values = heatmaps[i]
        xs, ys = pixel_centers(values.shape)
        gamma = _gamma(values)
        px = float(values.sum(axis=0) @ xs) / gamma
        py = float(values.sum(axis=1) @ ys) / gamma
        gx, gy = target.coords[i]
        loss += abs(px - gx) + abs(py - gy)
        gx_grid = (xs[None, :] - px) / gamma
        gy_grid = (ys[:, None] - py) / gamma
        grad[i] = np.sign(px - gx) * gx_grid + np.sign(py - gy) * gy_grid
    return loss, grad


def write_grid(path, grid: np.ndarray) -> None:
    """Debug dump: 8-byte header (H, W as little-endian uint32) + row-major
    float64 values."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError("grid dumps are 2-D only")
    with open(path, "wb") as fh:
        fh.write(np.array(grid.shape, dtype="<u4").tobytes())
        fh.write(grid.astype("<f8").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = np.frombuffer(fh.read(8), dtype="<u4")
        hh, ww = int(header[0]), int(header[1])
        data = np.frombuffer(fh.read(hh * ww * 8), dtype="<f8")
    if data.size != hh * ww:
        raise ValueError("truncated grid file")
    return data.reshape(hh, ww).copy()
