"""Global point branch: attention over all points at once.

Three interchangeable attention cores:

* ``self_attention``: plain softmax(Q K^T / sqrt(D)) V.
* ``relative_attention``: the same, plus a positional bias looked up from
  per-axis tables indexed by the quantized coordinate difference. O(N^2)
  memory, so it is capped; with all-zero tables it reduces exactly to
  self attention.
* ``external_attention``: attention against two small learned memories,
  normalized column-wise by softmax and then row-wise by L1. O(N).

Every core is bitwise permutation-equivariant: rows are brought into a
canonical value-based order, the computation runs there, and the result
is scattered back. Two rows that tie in the canonical order are fully
identical, and identical rows produce identical outputs, so the input
order cannot leak into the result.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import (CapacityError, ConfigError, NumericError, ShapeError)
from .numerics import MlpParams, init_linear, init_mlp, mlp_forward, softmax_rows
from .pointcloud import PointCloud

RA_CAP_DEFAULT = 4096


@dataclass(frozen=True)
class RprTables:
    """Per-axis relative-position bias tables, each with one scalar per bin.

    A coordinate delta in [-s_max, s_max] maps to one of ``bins`` equal
    quantization steps of width 2*s_max/bins; deltas outside the range
    clamp to the edge bins.
    """

    t_x: np.ndarray
    t_y: np.ndarray
    t_z: np.ndarray
    s_max: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.t_x).shape
        for name, t in (("t_x", self.t_x), ("t_y", self.t_y), ("t_z", self.t_z)):
            t = np.asarray(t)
            if t.ndim != 1 or t.shape != n:
                raise ShapeError(f"{name} must be a vector matching t_x, got {t.shape}")
        if np.asarray(self.t_x).size < 1:
            raise ConfigError("tables need at least one bin")
        if not self.s_max > 0:
            raise ConfigError(f"s_max must be positive, got {self.s_max}")

    @property
    def bins(self) -> int:
        return np.asarray(self.t_x).shape[0]

    @property
    def step(self) -> float:
        return 2.0 * self.s_max / self.bins


@dataclass(frozen=True)
class EaMemories:
    """Shared external-attention key/value memories, S slots of width D."""

    m_k: np.ndarray
    m_v: np.ndarray

    def __post_init__(self):
        if self.m_k.ndim != 2 or self.m_k.shape != self.m_v.shape:
            raise ShapeError(
                f"memories must be two equal (S, D) arrays, got "
                f"{self.m_k.shape} and {self.m_v.shape}"
            )

    @property
    def slots(self) -> int:
        return self.m_k.shape[0]

    @property
    def dim(self) -> int:
        return self.m_k.shape[1]


@dataclass(frozen=True)
class PointBranchParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    mlp: MlpParams
    rpr: RprTables
    ea: EaMemories
    mode: str = "relative"
    ra_cap: int = RA_CAP_DEFAULT

    def __post_init__(self):
        d = self.wq.shape[0]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv)):
            if w.shape != (d, d):
                raise ShapeError(f"{name} must be ({d}, {d}), got {w.shape}")
        if self.mlp.dim_in != d or self.mlp.dim_out != d:
            raise ShapeError(f"point MLP must map {d} -> {d}")
        if self.ea.dim != d:
            raise ShapeError(f"memories of width {self.ea.dim} vs dim {d}")
        if self.mode not in ("relative", "external"):
            raise ConfigError(f"mode must be 'relative' or 'external', got {self.mode!r}")
        if self.ra_cap < 1:
            raise ConfigError(f"ra_cap must be >= 1, got {self.ra_cap}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def init_rpr_tables(bins: int = 16, s_max: float = 1.0,
                    dtype=np.float64) -> RprTables:
    """Untrained tables are all zero, so relative attention starts out
    exactly equal to plain self attention."""
    zero = np.zeros(bins, dtype=dtype)
    return RprTables(zero, zero.copy(), zero.copy(), s_max)


def random_rpr_tables(rng: np.random.Generator, bins: int = 16,
                      s_max: float = 1.0, dtype=np.float64) -> RprTables:
    """Nonzero tables for tests that need the bias path to actually bite."""
    def table():
        return rng.uniform(-0.5, 0.5, size=bins).astype(dtype)

    return RprTables(table(), table(), table(), s_max)


def init_ea_memories(rng: np.random.Generator, slots: int, dim: int,
                     dtype=np.float64) -> EaMemories:
    bound = 1.0 / math.sqrt(dim)
    shape = (slots, dim)
    return EaMemories(rng.uniform(-bound, bound, shape).astype(dtype),
                      rng.uniform(-bound, bound, shape).astype(dtype))


def init_point_branch_params(rng: np.random.Generator, dim: int, bins: int = 16,
                             s_max: float = 1.0, slots: int = 64,
                             hidden: int | None = None, mode: str = "relative",
                             ra_cap: int = RA_CAP_DEFAULT,
                             dtype=np.float64) -> PointBranchParams:
    wq, _ = init_linear(rng, dim, dim, dtype)
    wk, _ = init_linear(rng, dim, dim, dtype)
    wv, _ = init_linear(rng, dim, dim, dtype)
    return PointBranchParams(
        wq, wk, wv,
        mlp=init_mlp(rng, dim, hidden, dtype),
        rpr=init_rpr_tables(bins, s_max, dtype),
        ea=init_ea_memories(rng, slots, dim, dtype),
        mode=mode,
        ra_cap=ra_cap,
    )


def _canonical_order(features, points=None) -> np.ndarray:
    """Value-based row order: feature columns left to right, then the
    coordinates when given. lexsort takes the primary key last."""
    f = np.asarray(features)
    cols = [f[:, d] for d in range(f.shape[1] - 1, -1, -1)]
    if points is not None:
        cols = [points[:, 2], points[:, 1], points[:, 0]] + cols
    return np.lexsort(tuple(cols))


def _check_features(features, dim: int) -> np.ndarray:
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[1] != dim:
        raise ShapeError(f"features must be (N, {dim}), got {f.shape}")
    if f.shape[0] == 0:
        raise ShapeError("attention needs at least one row")
    return f


def self_attention(features, params: PointBranchParams) -> np.ndarray:
    f = _check_features(features, params.dim)
    order = _canonical_order(f)
    fs = f[order]
    q = fs @ params.wq
    k = fs @ params.wk
    v = fs @ params.wv
    logits = (q @ k.T) / math.sqrt(params.dim)
    res = softmax_rows(logits) @ v
    out = np.empty_like(res)
    out[order] = res
    return out


def relative_deltas(cloud: PointCloud) -> np.ndarray:
    """All pairwise coordinate differences, shape (3, N, N); entry [a, i, j]
    is point_i[a] - point_j[a]."""
    p = cloud.points
    return p.T[:, :, None] - p.T[:, None, :]


def quantize_index(delta, tables: RprTables):
    """Bin index for a coordinate delta: floor((delta + s_max) / step),
    clamped into [0, bins-1]. Total over all finite deltas; scalars map to
    int, arrays to an int64 array."""
    d = np.asarray(delta, dtype=np.float64)
    if not np.isfinite(d).all():
        raise NumericError("quantize_index requires finite deltas")
    idx = np.clip(np.floor((d + tables.s_max) / tables.step), 0, tables.bins - 1)
    idx = idx.astype(np.int64)
    if idx.ndim == 0:
        return int(idx)
    return idx


def relative_bias(cloud: PointCloud, tables: RprTables) -> np.ndarray:
    """(N, N) additive attention bias: per-axis table values at the
    quantized deltas, summed over the three axes."""
    return _bias_from_points(cloud.points, tables)


def _bias_from_points(points, tables: RprTables) -> np.ndarray:
    deltas = points.T[:, :, None] - points.T[:, None, :]
    idx = quantize_index(deltas, tables)
    return (np.asarray(tables.t_x)[idx[0]]
            + np.asarray(tables.t_y)[idx[1]]
            + np.asarray(tables.t_z)[idx[2]])


def relative_attention(features, cloud: PointCloud, params: PointBranchParams) -> np.ndarray:
    f = _check_features(features, params.dim)
    n = f.shape[0]
    if cloud.n != n:
        raise ShapeError(f"{n} feature rows vs {cloud.n} points")
    if n > params.ra_cap:
        raise CapacityError(
            f"relative attention is quadratic and capped at {params.ra_cap} "
            f"points, got {n}; use external mode"
        )
    order = _canonical_order(f, cloud.points)
    fs = f[order]
    q = fs @ params.wq
    k = fs @ params.wk
    v = fs @ params.wv
    bias = _bias_from_points(cloud.points[order], params.rpr)
    logits = (q @ k.T) / math.sqrt(params.dim) + bias
    res = softmax_rows(logits) @ v
    out = np.empty_like(res)
    out[order] = res
    return out


def _ea_maps(fs, memories: EaMemories):
    a0 = fs @ memories.m_k.T
    shifted = a0 - a0.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    a1 = e / e.sum(axis=0, keepdims=True)
    a2 = a1 / a1.sum(axis=1, keepdims=True)
    return a1, a2


def external_attention_maps(features, memories: EaMemories):
    """The two normalized attention maps (A1, A2) in input row order, for
    inspection and tests. A1 columns each sum to 1, A2 rows each sum to 1."""
    f = _check_features(features, memories.dim)
    if not np.isfinite(f).all():
        raise NumericError("external_attention requires finite input")
    order = _canonical_order(f)
    a1, a2 = _ea_maps(f[order], memories)
    a1_out = np.empty_like(a1)
    a2_out = np.empty_like(a2)
    a1_out[order] = a1
    a2_out[order] = a2
    return a1_out, a2_out


def external_attention(features, memories: EaMemories) -> np.ndarray:
    """Double-normalized attention against the shared memories.

    A0 = F M_k^T; A1 = softmax over the point axis (each memory slot's
    column sums to 1); A2 = L1 row normalization (each point's row sums
    to 1); output = A2 M_v.
    """
    f = _check_features(features, memories.dim)
    if not np.isfinite(f).all():
        raise NumericError("external_attention requires finite input")
    order = _canonical_order(f)
    _, a2 = _ea_maps(f[order], memories)
    res = a2 @ memories.m_v
    out = np.empty_like(res)
    out[order] = res
    return out


def ea_op_count(n: int, slots: int, dim: int) -> int:
    """Exact operation count for one external-attention pass: 2*N*S*D for
    each of the two matrix products, 4*N*S for the column softmax (shift,
    exp, sum, divide) and 2*N*S for the L1 row normalization (sum, divide).
    Linear in N with no constant term, so doubling N exactly doubles it.
    """
    products = 2 * (2 * n * slots * dim)
    softmax = 4 * n * slots
    l1 = 2 * n * slots
    return products + softmax + l1


def point_branch_forward(features, cloud: PointCloud,
                         params: PointBranchParams) -> np.ndarray:
    """Attention (relative or external per params.mode), then a two-layer
    MLP, with a residual connection from the input.

    Relative mode silently degrades to external above the capacity cap,
    with a warning; call relative_attention directly to get a hard error
    instead.
    """
    f = _check_features(features, params.dim)
    mode = params.mode
    if mode == "relative" and f.shape[0] > params.ra_cap:
        warnings.warn(
            f"{f.shape[0]} points exceed the relative-attention cap of "
            f"{params.ra_cap}; falling back to external attention",
            RuntimeWarning,
            stacklevel=2,
        )
        mode = "external"
    if mode == "relative":
        attended = relative_attention(f, cloud, params)
    else:
        attended = external_attention(f, params.ea)
    return mlp_forward(attended, params.mlp) + f
