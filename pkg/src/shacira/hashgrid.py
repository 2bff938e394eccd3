"""Multi-resolution grid geometry: level sizes, corner indexing and d-linear lookup.

Each level ``l`` is a lattice of ``R_l`` vertices per axis laid over the unit
cube. A normalized coordinate ``x`` is scaled by ``R_l - 1`` and blended from
the ``2**d`` surrounding vertices. Coarse levels whose ``R_l**d`` vertices fit
in the table cap ``T`` index their rows directly (row-major, axis 0 fastest);
finer levels share ``T`` rows through a spatial hash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

__all__ = [
    "HASH_PRIMES",
    "GridConfig",
    "LevelLayout",
    "concat_features",
    "corner_index",
    "corner_lookup",
    "gather_levels",
    "interpolate",
    "interpolate_backward",
    "level_layout",
    "pixel_coordinates",
    "scatter_levels",
]

HASH_PRIMES = (1, 2654435761, 805459861)


class GridConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GridConfig:
    d: int = 2
    levels: int = 16
    r_min: int = 16
    r_max: int = 512
    table_size: int = 2**14
    feature_dim: int = 1
    latent_dim: int = 1

    def __post_init__(self):
        if self.d not in (2, 3):
            raise GridConfigError(f"d must be 2 or 3, got {self.d}")
        if self.levels < 1:
            raise GridConfigError("levels must be >= 1")
        if not 1 <= self.r_min <= self.r_max:
            raise GridConfigError(f"need 1 <= r_min <= r_max, got {self.r_min}, {self.r_max}")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise GridConfigError(f"table_size must be a power of two, got {t}")
        if self.feature_dim < 1 or self.latent_dim < 1:
            raise GridConfigError("feature_dim and latent_dim must be >= 1")


@dataclass(frozen=True)
class LevelLayout:
    resolution: int
    rows: int
    hashed: bool
    d: int = 2

    @property
    def mode(self) -> str:
        return "hashed" if self.hashed else "direct"


def level_layout(config: GridConfig) -> list[LevelLayout]:
    """Per-level resolutions with geometric growth from ``r_min`` to ``r_max``."""
    L = config.levels
    if L == 1:
        growth = 1.0
    else:
        growth = math.exp((math.log(config.r_max) - math.log(config.r_min)) / (L - 1))
    out = []
    for lvl in range(L):
        # the small slack keeps r_max itself from flooring down to r_max - 1
        res = int(math.floor(config.r_min * growth**lvl + 1e-9))
        res = min(max(res, config.r_min), config.r_max)
        full = res**config.d
        out.append(LevelLayout(res, min(full, config.table_size), full > config.table_size, config.d))
    return out


def corner_index(cell, layout: LevelLayout) -> np.ndarray:
    """Row index of integer vertex coordinates ``cell`` (shape ``(..., d)``)."""
    cell = np.asarray(cell, dtype=np.int64)
    if cell.shape[-1] != layout.d:
        raise ValueError(f"expected {layout.d} coordinates per cell, got {cell.shape[-1]}")
    if np.any(cell < 0) or np.any(cell >= layout.resolution):
        raise IndexError(f"cell outside [0, {layout.resolution - 1}] on some axis")
    if not layout.hashed:
        idx = np.zeros(cell.shape[:-1], dtype=np.int64)
        stride = 1
        for axis in range(layout.d):
            idx += cell[..., axis] * stride
            stride *= layout.resolution
        return idx
    c = cell.astype(np.uint64)
    h = np.zeros(cell.shape[:-1], dtype=np.uint64)
    for axis in range(layout.d):
        h ^= c[..., axis] * np.uint64(HASH_PRIMES[axis])
    return (h & np.uint64(layout.rows - 1)).astype(np.int64)


def corner_lookup(x: np.ndarray, layout: LevelLayout) -> tuple[np.ndarray, np.ndarray]:
    """Rows and blend weights of the ``2**d`` vertices around each coordinate.

    Returns ``(rows, weights)`` of shape ``(N, 2**d)``. Corner ``k`` takes the
    upper vertex on axis ``i`` when bit ``i`` of ``k`` is set.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    d = layout.d
    top = layout.resolution - 1
    pos = np.clip(x * top, 0.0, top)
    lo = np.minimum(np.floor(pos), top).astype(np.int64)
    hi = np.minimum(lo + 1, top)
    frac = pos - lo
    n = x.shape[0]
    rows = np.empty((n, 2**d), dtype=np.int64)
    weights = np.empty((n, 2**d), dtype=np.float64)
    cell = np.empty((n, d), dtype=np.int64)
    for k in range(2**d):
        w = np.ones(n)
        for axis in range(d):
            if (k >> axis) & 1:
                cell[:, axis] = hi[:, axis]
                w = w * frac[:, axis]
            else:
                cell[:, axis] = lo[:, axis]
                w = w * (1.0 - frac[:, axis])
        rows[:, k] = corner_index(cell, layout)
        weights[:, k] = w
    return rows, weights


def interpolate(x: np.ndarray, level_features: np.ndarray, layout: LevelLayout) -> np.ndarray:
    """d-linear blend of ``level_features`` rows at coordinates ``x`` -> ``(N, F)``."""
    rows, weights = corner_lookup(x, layout)
    feats = np.asarray(level_features)
    return np.einsum("nk,nkf->nf", weights.astype(feats.dtype), feats[rows])


def interpolate_backward(
    upstream: np.ndarray,
    x: np.ndarray,
    layout: LevelLayout,
    grad_out: np.ndarray,
) -> np.ndarray:
    """Scatter ``upstream`` (``(N, F)``) into ``grad_out`` (``(T_l, F)``) with ``+=``.

    Contributions are summed in coordinate order, so rows shared by several
    coordinates (hash collisions included) accumulate deterministically.
    """
    rows, weights = corner_lookup(x, layout)
    scatter_rows(rows, weights, np.asarray(upstream), grad_out)
    return grad_out


def scatter_rows(rows: np.ndarray, weights: np.ndarray, upstream: np.ndarray, grad_out: np.ndarray) -> None:
    n_rows = grad_out.shape[0]
    flat_rows = rows.reshape(-1)
    for f in range(grad_out.shape[1]):
        contrib = (weights * upstream[:, None, f]).reshape(-1)
        grad_out[:, f] += np.bincount(flat_rows, weights=contrib, minlength=n_rows)[:n_rows]


@njit(cache=True)
def gather_levels(rows, weights, table, active):
    """Blend rows of ``table`` for every (coordinate, level) pair -> ``(N, L, F)``.

    ``rows``/``weights`` have shape ``(N, L, K)`` with rows indexing ``table``.
    Levels ``>= active`` are left at zero. Corners are summed in index order.
    """
    n, n_levels, n_corners = rows.shape
    n_feat = table.shape[1]
    out = np.zeros((n, n_levels, n_feat), dtype=table.dtype)
    for i in range(n):
        for lvl in range(active):
            for k in range(n_corners):
                w = weights[i, lvl, k]
                r = rows[i, lvl, k]
                for f in range(n_feat):
                    out[i, lvl, f] += w * table[r, f]
    return out


@njit(cache=True)
def scatter_levels(rows, weights, upstream, active, n_rows):
    """Adjoint of :func:`gather_levels`: ``(N, L, F)`` upstream -> ``(n_rows, F)``.

    Accumulates in float64 in coordinate order, so shared rows (hash
    collisions included) always sum the same way.
    """
    n, n_levels, n_corners = rows.shape
    n_feat = upstream.shape[2]
    out = np.zeros((n_rows, n_feat), dtype=np.float64)
    for i in range(n):
        for lvl in range(active):
            for k in range(n_corners):
                w = weights[i, lvl, k]
                r = rows[i, lvl, k]
                for f in range(n_feat):
                    out[r, f] += w * upstream[i, lvl, f]
    return out


def concat_features(per_level: list[np.ndarray], active_levels: int | None = None) -> np.ndarray:
    """Concatenate level features coarsest first; levels past ``active_levels`` are zero."""
    if active_levels is None or active_levels >= len(per_level):
        return np.concatenate(per_level, axis=-1)
    parts = [f if i < active_levels else np.zeros_like(f) for i, f in enumerate(per_level)]
    return np.concatenate(parts, axis=-1)


def pixel_coordinates(height: int, width: int, dtype=np.float64) -> np.ndarray:
    """Texel-centred coordinates of an ``H x W`` image, row-major, as ``(x, y)`` pairs."""
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    xs = (jj.reshape(-1) + 0.5) / width
    ys = (ii.reshape(-1) + 0.5) / height
    return np.stack([xs, ys], axis=1).astype(dtype)
