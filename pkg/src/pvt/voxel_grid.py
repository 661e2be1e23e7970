"""Sparse voxel grid over the unit cube [-1, 1]^3.

Only non-empty voxels are stored. A voxel at integer coordinate (i, j, k)
on an R^3 grid is addressed by the linear key i*R^2 + j*R + k; the grid
keeps its keys sorted so membership tests are a binary search.

Voxelization is mean pooling. To make the result independent of the order
points arrive in, points are first brought into a canonical order (sorted
by voxel key, then coordinates, then feature values) before per-voxel
summation, so equal inputs produce bitwise equal grids no matter how the
input rows were permuted.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from itertools import product

import numpy as np

from .errors import ConfigError, EmptyInputError, NumericError, ShapeError
from .pointcloud import PointCloud


@dataclass(frozen=True)
class SparseVoxelGrid:
    resolution: int
    keys: np.ndarray        # (M,) int64, strictly increasing
    coords: np.ndarray      # (M, 3) int64 voxel indices
    features: np.ndarray    # (M, D)
    counts: np.ndarray      # (M,) points pooled into each voxel
    point_voxel: np.ndarray | None = None  # (N,) row into the arrays above

    def __post_init__(self):
        if self.resolution < 1:
            raise ConfigError(f"resolution must be >= 1, got {self.resolution}")
        keys = np.asarray(self.keys, dtype=np.int64)
        if keys.ndim != 1 or keys.size == 0:
            raise EmptyInputError("a grid needs at least one non-empty voxel")
        if np.any(np.diff(keys) <= 0):
            raise ShapeError("grid keys must be strictly increasing")
        if keys[0] < 0 or keys[-1] >= self.resolution ** 3:
            raise ShapeError("grid keys out of range for this resolution")
        if self.coords.shape != (keys.size, 3):
            raise ShapeError(f"coords shape {self.coords.shape} does not match {keys.size} keys")
        if self.features.ndim != 2 or self.features.shape[0] != keys.size:
            raise ShapeError(f"features shape {self.features.shape} does not match {keys.size} keys")
        if self.counts.shape != (keys.size,):
            raise ShapeError("counts must be one value per voxel")
        object.__setattr__(self, "keys", keys)

    @property
    def n_voxels(self) -> int:
        return self.keys.size

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def with_features(self, features: np.ndarray) -> "SparseVoxelGrid":
        if features.shape != self.features.shape:
            raise ShapeError(
                f"replacement features {features.shape} != {self.features.shape}"
            )
        return replace(self, features=features)


def coords_to_keys(coords, resolution: int) -> np.ndarray:
    c = np.asarray(coords, dtype=np.int64)
    return (c[..., 0] * resolution + c[..., 1]) * resolution + c[..., 2]


def keys_to_coords(keys, resolution: int) -> np.ndarray:
    k = np.asarray(keys, dtype=np.int64)
    return np.stack([k // (resolution * resolution),
                     (k // resolution) % resolution,
                     k % resolution], axis=-1)


def points_to_voxel_coords(points, resolution: int) -> np.ndarray:
    """Map normalized coordinates to voxel indices.

    floor((p + 1)/2 * R), clamped into [0, R-1] so the p = 1.0 boundary
    falls into the last voxel instead of off the grid.
    """
    if resolution < 1:
        raise ConfigError(f"resolution must be >= 1, got {resolution}")
    pts = np.asarray(points, dtype=np.float64)
    if not np.isfinite(pts).all():
        raise NumericError("voxelization requires finite coordinates")
    raw = np.floor((pts + 1.0) * 0.5 * resolution)
    return np.clip(raw, 0, resolution - 1).astype(np.int64)


def point_to_voxel_coord(p, resolution: int) -> tuple[int, int, int]:
    """Single-point convenience wrapper around points_to_voxel_coords."""
    c = points_to_voxel_coords(np.asarray(p, dtype=np.float64).reshape(1, 3), resolution)
    return tuple(int(v) for v in c[0])


def voxel_centers(coords, resolution: int) -> np.ndarray:
    """Center of voxel (i, j, k) in normalized space: (i + 0.5)/R * 2 - 1."""
    c = np.asarray(coords, dtype=np.float64)
    return (c + 0.5) / resolution * 2.0 - 1.0


def _canonical_point_order(keys, points, features) -> np.ndarray:
    # lexsort uses the *last* column as the primary key. Ordering: voxel key,
    # then x, y, z, then feature columns, so ties are broken by values only
    # and never by input position.
    cols = [features[:, d] for d in range(features.shape[1] - 1, -1, -1)]
    cols += [points[:, 2], points[:, 1], points[:, 0], keys]
    return np.lexsort(tuple(cols))


def voxelize(cloud: PointCloud, features, resolution: int) -> SparseVoxelGrid:
    """Mean-pool point features into their voxels.

    Point order does not affect the result, bit for bit: summation happens
    in the canonical order described in the module docstring.
    """
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] != cloud.n:
        raise ShapeError(f"features must be ({cloud.n}, D), got {feats.shape}")
    coords = points_to_voxel_coords(cloud.points, resolution)
    keys = coords_to_keys(coords, resolution)

    order = _canonical_point_order(keys, cloud.points, feats)
    sorted_keys = keys[order]
    sorted_feats = feats[order]

    unique_keys, starts = np.unique(sorted_keys, return_index=True)
    sums = np.add.reduceat(sorted_feats, starts, axis=0)
    counts = np.diff(np.append(starts, sorted_keys.size)).astype(np.int64)
    means = sums / counts[:, None]

    point_voxel = np.searchsorted(unique_keys, keys)
    return SparseVoxelGrid(
        resolution=resolution,
        keys=unique_keys,
        coords=keys_to_coords(unique_keys, resolution),
        features=means,
        counts=counts,
        point_voxel=point_voxel,
    )


def lookup_rows(grid: SparseVoxelGrid, keys) -> np.ndarray:
    """Row index per key, or -1 where the voxel is empty."""
    k = np.asarray(keys, dtype=np.int64)
    pos = np.searchsorted(grid.keys, k)
    pos_clipped = np.minimum(pos, grid.n_voxels - 1)
    hit = grid.keys[pos_clipped] == k
    return np.where(hit, pos_clipped, -1)


def devoxelize(grid: SparseVoxelGrid, cloud: PointCloud, mode: str = "trilinear") -> np.ndarray:
    """Interpolate voxel features back onto points.

    Trilinear mode blends the 8 voxel centers surrounding each point with
    the standard trilinear weights. Corners that fall outside the grid or
    on an empty voxel contribute a zero value; the weights are fixed by
    geometry and are deliberately not renormalized, so a point with
    missing neighbors receives a correspondingly smaller feature.

    The blend is evaluated as a nested lerp u + t*(v - u) per axis, which
    is algebraically the weighted corner sum but keeps the partition of
    unity exact in floating point: when all 8 corners hold the same value
    the result is that value bit for bit, at any position.

    Nearest mode returns the feature of the point's own voxel (zeros if
    that voxel is empty, which cannot happen for the grid built from the
    same cloud).
    """
    r = grid.resolution
    if mode == "nearest":
        coords = points_to_voxel_coords(cloud.points, r)
        rows = lookup_rows(grid, coords_to_keys(coords, r))
        out = np.zeros((cloud.n, grid.feature_dim), dtype=grid.features.dtype)
        hit = rows >= 0
        out[hit] = grid.features[rows[hit]]
        return out
    if mode != "trilinear":
        raise ConfigError(f"unknown devoxelize mode {mode!r}")

    # Continuous voxel-space position whose integer points are voxel centers.
    g = (cloud.points + 1.0) * 0.5 * r - 0.5
    base = np.floor(g)
    frac = g - base
    base = base.astype(np.int64)

    corners = np.zeros((cloud.n, 2, 2, 2, grid.feature_dim),
                       dtype=grid.features.dtype)
    for dx, dy, dz in product((0, 1), repeat=3):
        corner = base + np.array([dx, dy, dz], dtype=np.int64)
        inside = np.all((corner >= 0) & (corner < r), axis=1)
        if not inside.any():
            continue
        rows = np.full(cloud.n, -1, dtype=np.int64)
        rows[inside] = lookup_rows(grid, coords_to_keys(corner[inside], r))
        hit = rows >= 0
        corners[hit, dx, dy, dz] = grid.features[rows[hit]]

    def lerp(u, v, t):
        return u + t * (v - u)

    tz = frac[:, 2][:, None, None, None]
    ty = frac[:, 1][:, None, None]
    tx = frac[:, 0][:, None]
    along_z = lerp(corners[:, :, :, 0, :], corners[:, :, :, 1, :], tz)
    along_y = lerp(along_z[:, :, 0, :], along_z[:, :, 1, :], ty)
    out = lerp(along_y[:, 0, :], along_y[:, 1, :], tx)
    return out.astype(grid.features.dtype, copy=False)


@dataclass(frozen=True)
class OccupancyStats:
    resolution: int
    window: int
    n_voxels: int
    global_fraction: float
    window_fractions: np.ndarray  # per window, including empty windows


def occupancy_stats(grid: SparseVoxelGrid, window: int) -> OccupancyStats:
    r = grid.resolution
    if window < 1 or r % window != 0:
        raise ConfigError(f"window={window} must divide resolution={r}")
    per_side = r // window
    wc = grid.coords // window
    wids = (wc[:, 0] * per_side + wc[:, 1]) * per_side + wc[:, 2]
    counts = np.bincount(wids, minlength=per_side ** 3)
    return OccupancyStats(
        resolution=r,
        window=window,
        n_voxels=grid.n_voxels,
        global_fraction=grid.n_voxels / r ** 3,
        window_fractions=counts / window ** 3,
    )


def grid_to_json(grid: SparseVoxelGrid) -> dict:
    """JSON-friendly dump for debugging small grids."""
    return {
        "schema_version": 1,
        "resolution": grid.resolution,
        "n_voxels": int(grid.n_voxels),
        "feature_dim": int(grid.feature_dim),
        "voxels": [
            {
                "key": int(k),
                "coord": [int(c) for c in grid.coords[i]],
                "count": int(grid.counts[i]),
                "feature": [float(v) for v in grid.features[i]],
            }
            for i, k in enumerate(grid.keys)
        ],
    }
