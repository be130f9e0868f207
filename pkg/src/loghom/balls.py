"""Periodic Euclidean balls: site sets, averages, dyadic scales, Lipschitz envelopes.

Balls are Euclidean site sets under the periodic (minimal image) distance;
ball averages are unweighted site means.  Averages over every center at once
go through FFT correlation with the ball indicator.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy import ndimage

from .errors import BallTooLarge
from .field import LatticeGrid


def max_radius(grid: LatticeGrid) -> float:
    """Largest admissible ball radius on the torus (side_length / 4)."""
    return grid.side_length / 4.0


def dyadic_radii(grid: LatticeGrid, r_min: float = 1.0) -> list[float]:
    """Dyadic scales {r_min * 2^k} up to side_length / 4."""
    out = []
    r = float(r_min)
    while r <= max_radius(grid) * (1 + 1e-12):
        out.append(r)
        r *= 2.0
    return out


@lru_cache(maxsize=128)
def _offsets_cached(dim: int, n: int, spacing: float, radius: float) -> tuple[np.ndarray, int]:
    m = int(np.floor(radius / spacing + 1e-12))
    m = min(m, n // 2)
    rng_1d = np.arange(-m, m + 1)
    grids = np.meshgrid(*([rng_1d] * dim), indexing="ij")
    dist2 = sum((g * spacing) ** 2 for g in grids)
    keep = dist2 <= radius**2 + 1e-12
    offsets = np.stack([g[keep] for g in grids], axis=1)
    return offsets, int(keep.sum())


def ball_offsets(grid: LatticeGrid, radius: float) -> np.ndarray:
    """Integer lattice offsets delta with |delta * h| <= radius (includes 0)."""
    if radius > max_radius(grid) * 2 + 1e-12:
        raise BallTooLarge(f"radius {radius} too large for side {grid.side_length}")
    offsets, _ = _offsets_cached(grid.dim, grid.n_per_side, grid.spacing, float(radius))
    return offsets


@lru_cache(maxsize=128)
def _mask_fft_cached(dim: int, n: int, spacing: float, radius: float):
    grid = LatticeGrid(dim, n, n * spacing)
    offsets, count = _offsets_cached(dim, n, spacing, radius)
    mask = np.zeros(grid.shape)
    mask[tuple((offsets % n).T)] = 1.0
    return np.fft.rfftn(mask), count


def ball_count(grid: LatticeGrid, radius: float) -> int:
    _, count = _offsets_cached(grid.dim, grid.n_per_side, grid.spacing, float(radius))
    return count


def ball_mean_all(values: np.ndarray, grid: LatticeGrid, radius: float) -> np.ndarray:
    """Ball average centered at every site simultaneously (FFT correlation).

    The ball indicator is symmetric, so correlation equals convolution.
    """
    mask_hat, count = _mask_fft_cached(grid.dim, grid.n_per_side, grid.spacing, float(radius))
    axes = tuple(range(grid.dim))
    conv = np.fft.irfftn(np.fft.rfftn(values) * mask_hat, s=grid.shape, axes=axes)
    return conv / count


def ball_mean_at(values: np.ndarray, grid: LatticeGrid, radius: float,
                 center=None) -> float:
    """Single-center ball average by direct gather (cheap for a few centers)."""
    offsets = ball_offsets(grid, radius)
    if center is None:
        center = (0,) * grid.dim
    sites = (offsets + np.asarray(center)) % grid.n_per_side
    return float(values[tuple(sites.T)].mean())


def ball_max_at(values: np.ndarray, grid: LatticeGrid, radius: float,
                center=None) -> float:
    offsets = ball_offsets(grid, radius)
    if center is None:
        center = (0,) * grid.dim
    sites = (offsets + np.asarray(center)) % grid.n_per_side
    return float(values[tuple(sites.T)].max())


def periodic_distance_to_set(mask: np.ndarray, grid: LatticeGrid) -> np.ndarray:
    """Euclidean distance (length units) from every site to the nearest True site.

    Computed on a 3x tiling so the metric wraps around the torus.
    """
    if not mask.any():
        return np.full(grid.shape, np.inf)
    tiled = np.tile(mask, (3,) * grid.dim)
    dist = ndimage.distance_transform_edt(~tiled, sampling=grid.spacing)
    n = grid.n_per_side
    center = tuple(slice(n, 2 * n) for _ in range(grid.dim))
    return dist[center]


def lipschitz_envelope(r_tilde: np.ndarray, grid: LatticeGrid, slope: float = 0.125) -> np.ndarray:
    """Smallest slope-Lipschitz field dominating r_tilde.

    env(x) = max_y (r_tilde(y) - slope * dist(x, y)); evaluated level by
    level with periodic distance transforms, which is exact because r_tilde
    takes few distinct values (dyadic scales plus the saturation level).
    """
    levels = np.unique(r_tilde)
    out = np.full(grid.shape, levels[0], dtype=float)
    for v in levels[1:]:
        dist = periodic_distance_to_set(r_tilde >= v, grid)
        np.maximum(out, v - slope * dist, out=out)
    return out


def lipschitz_envelope_bruteforce(r_tilde: np.ndarray, grid: LatticeGrid,
                                  slope: float = 0.125) -> np.ndarray:
    """O(N^2) reference implementation (small grids only, used by tests)."""
    n = grid.n_per_side
    coords = np.indices(grid.shape).reshape(grid.dim, -1).T
    flat = r_tilde.ravel()
    out = np.empty(flat.shape)
    for a, xa in enumerate(coords):
        delta = np.abs(coords - xa)
        delta = np.minimum(delta, n - delta) * grid.spacing
        dist = np.sqrt((delta**2).sum(axis=1))
        out[a] = np.max(flat - slope * dist)
    return out.reshape(grid.shape)
