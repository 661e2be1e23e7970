"""Sparse window attention over a voxel grid.

The grid is partitioned into non-overlapping W x W x W windows (W must
divide the resolution). Attention runs independently inside each window
and only over the voxels that exist, so empty space costs nothing. The
rule book is the gather map from each non-empty window to its member
voxels; member lists are kept sorted by voxel key so the computation
order depends on geometry, not on input order.

Shifted windows come from cyclically rotating voxel coordinates by
floor(W/2) along each axis before partitioning, and rotating back after.
Voxels wrapped across the boundary attend within their shifted window;
no extra masking is applied (the variant that masks wrapped pairs is
reserved in the config but not implemented).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ResourceError, ShapeError
from .numerics import (LayerNormParams, MlpParams, init_layer_norm,
                       init_linear, init_mlp, layer_norm, mlp_forward,
                       softmax_rows)
from .timing import StageTimer, stage
from .voxel_grid import (OccupancyStats, SparseVoxelGrid, coords_to_keys,
                         devoxelize, voxelize)

ORACLE_MAX_RESOLUTION = 16


@dataclass(frozen=True)
class WindowConfig:
    window: int
    shift: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError(f"window must be >= 1, got {self.window}")
        if len(self.shift) != 3:
            raise ConfigError(f"shift must have three components, got {self.shift}")
        if any(s < 0 or s >= self.window for s in self.shift):
            raise ConfigError(
                f"shift components must lie in [0, window), got {self.shift} "
                f"for window={self.window}"
            )

    def validate_resolution(self, resolution: int) -> None:
        if resolution % self.window != 0:
            raise ConfigError(
                f"window={self.window} must divide resolution={resolution}"
            )

    def shifted(self) -> "WindowConfig":
        half = self.window // 2
        return WindowConfig(self.window, (half, half, half))


@dataclass(frozen=True)
class SwaParams:
    """Weights for one voxel-branch block: shared attention projections,
    plus the norms and MLPs for the two window-attention sublayers."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int
    norm1: LayerNormParams
    norm2: LayerNormParams
    norm3: LayerNormParams
    norm4: LayerNormParams
    mlp1: MlpParams
    mlp2: MlpParams

    def __post_init__(self):
        d = self.wq.shape[0]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {w.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigError(f"heads={self.heads} must divide dim={d}")
        for name, norm in (("norm1", self.norm1), ("norm2", self.norm2),
                           ("norm3", self.norm3), ("norm4", self.norm4)):
            if norm.dim != d:
                raise ShapeError(f"{name} has dim {norm.dim}, expected {d}")
        for name, mlp in (("mlp1", self.mlp1), ("mlp2", self.mlp2)):
            if mlp.dim_in != d or mlp.dim_out != d:
                raise ShapeError(f"{name} must map {d} -> {d}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def init_swa_params(rng: np.random.Generator, dim: int, heads: int = 1,
                    hidden: int | None = None, dtype=np.float64) -> SwaParams:
    def norm():
        base = init_layer_norm(dim, dtype)
        gamma = base.gamma + rng.uniform(-0.1, 0.1, size=dim).astype(dtype)
        beta = base.beta + rng.uniform(-0.1, 0.1, size=dim).astype(dtype)
        return LayerNormParams(gamma, beta)

    wq, _ = init_linear(rng, dim, dim, dtype)
    wk, _ = init_linear(rng, dim, dim, dtype)
    wv, _ = init_linear(rng, dim, dim, dtype)
    return SwaParams(wq, wk, wv, heads, norm(), norm(), norm(), norm(),
                     init_mlp(rng, dim, hidden, dtype),
                     init_mlp(rng, dim, hidden, dtype))


def cyclic_shift(grid: SparseVoxelGrid, shift: tuple[int, int, int]) -> SparseVoxelGrid:
    """Rotate voxel coordinates by ``shift`` modulo the resolution.

    The result is re-sorted by the new keys so grid invariants hold;
    point_voxel is remapped accordingly. Shifting by s then by R - s is an
    exact round trip.
    """
    r = grid.resolution
    if len(shift) != 3:
        raise ConfigError(f"shift must have three components, got {shift}")
    offset = np.asarray([s % r for s in shift], dtype=np.int64)
    coords = (grid.coords + offset) % r
    keys = coords_to_keys(coords, r)
    order = np.argsort(keys)
    point_voxel = None
    if grid.point_voxel is not None:
        inverse = np.empty_like(order)
        inverse[order] = np.arange(order.size)
        point_voxel = inverse[grid.point_voxel]
    return SparseVoxelGrid(
        resolution=r,
        keys=keys[order],
        coords=coords[order],
        features=grid.features[order],
        counts=grid.counts[order],
        point_voxel=point_voxel,
    )


def reverse_cyclic_shift(grid: SparseVoxelGrid, shift: tuple[int, int, int]) -> SparseVoxelGrid:
    r = grid.resolution
    return cyclic_shift(grid, tuple((r - s) % r for s in shift))


@dataclass(frozen=True)
class RuleBook:
    """Gather map from non-empty windows to their member voxel rows.

    window_of and hashed_keys are per grid row (the inverse view of
    members); member lists are disjoint and together cover every row.
    """

    resolution: int
    window: int
    window_ids: np.ndarray          # (K,) int64, strictly increasing
    members: tuple[np.ndarray, ...]  # row indices into the grid, key-sorted
    window_of: np.ndarray           # (M,) window id per grid row
    hashed_keys: np.ndarray         # (M,) linear voxel key per grid row

    @property
    def n_windows(self) -> int:
        return self.window_ids.size

    def sizes(self) -> np.ndarray:
        return np.array([m.size for m in self.members], dtype=np.int64)


def build_rule_book(grid: SparseVoxelGrid, cfg: WindowConfig) -> RuleBook:
    """Group grid rows by the window that contains them.

    The window id of voxel (i, j, k) is the raster index of
    (i // W, j // W, k // W); only non-empty windows appear. Members are
    listed in increasing hashed-key order, so the computation order inside
    a window is a function of geometry alone.
    """
    cfg.validate_resolution(grid.resolution)
    per_side = grid.resolution // cfg.window
    wc = grid.coords // cfg.window
    wids = (wc[:, 0] * per_side + wc[:, 1]) * per_side + wc[:, 2]

    order = np.lexsort((grid.keys, wids))
    sorted_wids = wids[order]
    unique_wids, starts = np.unique(sorted_wids, return_index=True)
    bounds = np.append(starts, sorted_wids.size)
    members = tuple(order[bounds[i]:bounds[i + 1]] for i in range(unique_wids.size))
    return RuleBook(grid.resolution, cfg.window, unique_wids, members,
                    window_of=wids, hashed_keys=grid.keys.copy())


def _head_attention(x, params: SwaParams) -> np.ndarray:
    """Multi-head softmax attention over one window's rows."""
    v = x @ params.wv
    if x.shape[0] == 1:
        # A single voxel attends only to itself; softmax over one logit is 1.
        return v
    q = x @ params.wq
    k = x @ params.wk
    d_head = params.dim // params.heads
    scale = 1.0 / math.sqrt(d_head)
    out = np.empty_like(v)
    for h in range(params.heads):
        cols = slice(h * d_head, (h + 1) * d_head)
        logits = (q[:, cols] @ k[:, cols].T) * scale
        out[:, cols] = softmax_rows(logits) @ v[:, cols]
    return out


def swa_forward(grid: SparseVoxelGrid, rule_book: RuleBook, params: SwaParams,
                threads: int = 1) -> SparseVoxelGrid:
    """Window attention over the grid features, window by window.

    Windows are independent work items with disjoint output rows, so the
    result is bitwise identical for any thread count.
    """
    if rule_book.resolution != grid.resolution:
        raise ConfigError(
            f"rule book was built for resolution {rule_book.resolution}, "
            f"grid has {grid.resolution}"
        )
    feats = grid.features
    if feats.shape[1] != params.dim:
        raise ShapeError(f"features of width {feats.shape[1]} vs params dim {params.dim}")
    covered = sum(m.size for m in rule_book.members)
    if covered != grid.n_voxels:
        raise ShapeError(
            f"rule book covers {covered} voxels, grid has {grid.n_voxels}"
        )

    out = np.empty_like(feats)

    def run(rows):
        out[rows] = _head_attention(feats[rows], params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, rule_book.members))
    else:
        for rows in rule_book.members:
            run(rows)
    return grid.with_features(out)


def dense_window_attention_oracle(grid: SparseVoxelGrid, cfg: WindowConfig,
                                  params: SwaParams) -> SparseVoxelGrid:
    """Brute-force reference: materialize the full dense grid, attend inside
    every window with empty cells masked to -inf, then gather the occupied
    cells back. Quadratic in window volume and cubic in resolution, so it
    refuses to run above ORACLE_MAX_RESOLUTION.
    """
    r = grid.resolution
    if r > ORACLE_MAX_RESOLUTION:
        raise ResourceError(
            f"dense oracle is capped at resolution {ORACLE_MAX_RESOLUTION}, got {r}"
        )
    cfg.validate_resolution(r)
    d = grid.feature_dim
    if d != params.dim:
        raise ShapeError(f"features of width {d} vs params dim {params.dim}")

    dense = np.zeros((r, r, r, d), dtype=grid.features.dtype)
    occupied = np.zeros((r, r, r), dtype=bool)
    i, j, k = grid.coords.T
    dense[i, j, k] = grid.features
    occupied[i, j, k] = True

    w = cfg.window
    d_head = d // params.heads
    scale = 1.0 / math.sqrt(d_head)
    result = np.zeros_like(dense)
    for wx in range(r // w):
        for wy in range(r // w):
            for wz in range(r // w):
                sl = (slice(wx * w, (wx + 1) * w),
                      slice(wy * w, (wy + 1) * w),
                      slice(wz * w, (wz + 1) * w))
                mask = occupied[sl].reshape(-1)
                if not mask.any():
                    continue
                x = dense[sl].reshape(-1, d)
                q = x @ params.wq
                kk = x @ params.wk
                v = x @ params.wv
                res = np.empty_like(v)
                for h in range(params.heads):
                    cols = slice(h * d_head, (h + 1) * d_head)
                    logits = (q[:, cols] @ kk[:, cols].T) * scale
                    logits[:, ~mask] = -np.inf
                    shifted = logits - logits.max(axis=1, keepdims=True)
                    weights = np.exp(shifted)
                    weights /= weights.sum(axis=1, keepdims=True)
                    res[:, cols] = weights @ v[:, cols]
                result[sl] = res.reshape(w, w, w, d)
    return grid.with_features(result[i, j, k])


def _mlp_sublayer(grid, norm, mlp):
    out = mlp_forward(layer_norm(grid.features, norm), mlp)
    return grid.with_features(out + grid.features)


def voxel_branch_forward(cloud, features, cfg: WindowConfig, params: SwaParams,
                         resolution: int, threads: int = 1,
                         devox_mode: str = "trilinear",
                         timer: StageTimer | None = None) -> np.ndarray:
    """The local branch: voxelize, run a shifted-window attention block then
    a regular one, devoxelize back onto the points.

    Stage order: voxelize; cyclic shift by cfg.shift; [norm -> window
    attention -> add, norm -> MLP -> add]; reverse shift; the same pair of
    sublayers on the unshifted partition; devoxelize.
    """
    cfg.validate_resolution(resolution)
    unshifted = WindowConfig(cfg.window)

    with stage(timer, "voxelize"):
        grid = voxelize(cloud, features, resolution)
    with stage(timer, "shift"):
        grid = cyclic_shift(grid, cfg.shift)
    with stage(timer, "rulebook"):
        rb = build_rule_book(grid, unshifted)
    with stage(timer, "attention"):
        normed = grid.with_features(layer_norm(grid.features, params.norm1))
        grid = grid.with_features(
            swa_forward(normed, rb, params, threads).features + grid.features)
        grid = _mlp_sublayer(grid, params.norm2, params.mlp1)
    with stage(timer, "shift"):
        grid = reverse_cyclic_shift(grid, cfg.shift)
    with stage(timer, "rulebook"):
        rb = build_rule_book(grid, unshifted)
    with stage(timer, "attention"):
        normed = grid.with_features(layer_norm(grid.features, params.norm3))
        grid = grid.with_features(
            swa_forward(normed, rb, params, threads).features + grid.features)
        grid = _mlp_sublayer(grid, params.norm4, params.mlp2)
    with stage(timer, "devoxelize"):
        return devoxelize(grid, cloud, mode=devox_mode)


def cost_global_attention(resolution: int, dim: int) -> int:
    """Full self-attention over every cell of a dense R^3 grid:
    4*R^3*D^2 projection work plus 2*(R^3)^2*D attention work."""
    cells = resolution ** 3
    return 4 * cells * dim * dim + 2 * cells * cells * dim


def cost_window_attention(resolution: int, window: int, dim: int) -> int:
    """Dense window attention: same projections, attention span limited to
    the W^3 cells of each window: 4*R^3*D^2 + 2*W^3*R^3*D."""
    cells = resolution ** 3
    return 4 * cells * dim * dim + 2 * window ** 3 * cells * dim


@dataclass(frozen=True)
class SwaCost:
    sparse: int
    dense_window: int


def swa_cost(stats: OccupancyStats, dim: int) -> SwaCost:
    """Exact operation counts for sparse window attention on this grid:
    4*M*D^2 projections over the M non-empty voxels plus sum over windows
    of 2*n_w^2*D attention work, versus the dense window formula."""
    wvol = stats.window ** 3
    counts = np.rint(stats.window_fractions * wvol).astype(np.int64)
    m = int(counts.sum())
    if m != stats.n_voxels:
        raise ShapeError(
            f"window fractions total {m} voxels, stats say {stats.n_voxels}"
        )
    attention = sum(2 * int(c) * int(c) * dim for c in counts)
    sparse = 4 * m * dim * dim + attention
    return SwaCost(
        sparse=sparse,
        dense_window=cost_window_attention(stats.resolution, stats.window, dim),
    )


def rule_book_to_json(rule_book: RuleBook, grid: SparseVoxelGrid) -> dict:
    per_side = rule_book.resolution // rule_book.window
    windows = []
    for wid, rows in zip(rule_book.window_ids, rule_book.members):
        wid = int(wid)
        coord = [wid // (per_side * per_side), (wid // per_side) % per_side,
                 wid % per_side]
        windows.append({
            "id": wid,
            "coord": coord,
            "size": int(rows.size),
            "voxel_keys": [int(grid.keys[r]) for r in rows],
        })
    return {
        "schema_version": 1,
        "resolution": rule_book.resolution,
        "window": rule_book.window,
        "n_windows": rule_book.n_windows,
        "windows": windows,
    }
