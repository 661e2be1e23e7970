"""The fused point/voxel block, the encoder stack around it, and the
analytic cost model.

One block runs the voxel branch (window attention on the voxelized cloud,
devoxelized back to points) and the point branch (global attention over
all points) on the same input features and sums the two outputs
elementwise. The encoder embeds raw coordinates, runs a few blocks,
concatenates their per-point outputs with a lifted copy of the last one,
and max-pools for the global descriptor.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import init_linear, relu
from .point_branch import (PointBranchParams, ea_op_count,
                           init_point_branch_params, point_branch_forward)
from .pointcloud import PointCloud
from .timing import StageTimer, stage
from .voxel_grid import OccupancyStats
from .window_attention import (SwaParams, WindowConfig, cost_global_attention,
                               cost_window_attention, init_swa_params,
                               swa_cost, voxel_branch_forward)

_MODES = ("relative", "external")
_PRECISIONS = ("f32", "f64")
_DEVOX_MODES = ("trilinear", "nearest")


@dataclass(frozen=True)
class PvtConfig:
    n_points: int = 1024
    in_features: int = 0
    block_dims: tuple[int, ...] = (64, 64, 128)
    lift_dim: int = 1024
    resolution: int = 32
    window: int = 4
    shift: tuple[int, int, int] | None = None  # None means half the window
    heads: int = 1
    mlp_ratio: float = 2.0
    rpr_bins: int = 16
    s_max: float = 1.0
    ea_slots: int = 64
    point_mode: str = "relative"
    ra_cap: int = 4096
    precision: str = "f64"
    devox_mode: str = "trilinear"
    # Reserved: masking of wrapped pairs after a cyclic shift. Only "none"
    # is implemented; shifted windows attend across the wrapseam.
    shift_masking: str = "none"
    conv_kernel: int = 3  # kernel size used by the convolution cost rows

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigError(f"n_points must be >= 1, got {self.n_points}")
        if self.in_features < 0:
            raise ConfigError(f"in_features must be >= 0, got {self.in_features}")
        if not self.block_dims:
            raise ConfigError("block_dims must name at least one block")
        if self.resolution < 1:
            raise ConfigError(f"resolution must be >= 1, got {self.resolution}")
        if self.window < 1 or self.resolution % self.window != 0:
            raise ConfigError(
                f"window={self.window} must divide resolution={self.resolution}"
            )
        if self.shift is not None:
            if len(self.shift) != 3 or any(
                    s < 0 or s >= self.window for s in self.shift):
                raise ConfigError(
                    f"shift={self.shift} must be three values in [0, window)"
                )
        for d in self.block_dims:
            if d < 1 or d % self.heads != 0:
                raise ConfigError(
                    f"heads={self.heads} must divide every block dim, got {d}"
                )
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.rpr_bins < 1:
            raise ConfigError(f"rpr_bins must be >= 1, got {self.rpr_bins}")
        if self.s_max <= 0:
            raise ConfigError(f"s_max must be positive, got {self.s_max}")
        if self.ea_slots < 1:
            raise ConfigError(f"ea_slots must be >= 1, got {self.ea_slots}")
        if self.point_mode not in _MODES:
            raise ConfigError(f"point_mode must be one of {_MODES}, got {self.point_mode!r}")
        if self.ra_cap < 1:
            raise ConfigError(f"ra_cap must be >= 1, got {self.ra_cap}")
        if self.precision not in _PRECISIONS:
            raise ConfigError(f"precision must be one of {_PRECISIONS}, got {self.precision!r}")
        if self.devox_mode not in _DEVOX_MODES:
            raise ConfigError(f"devox_mode must be one of {_DEVOX_MODES}, got {self.devox_mode!r}")
        if self.shift_masking != "none":
            raise ConfigError(
                f"shift_masking={self.shift_masking!r} is reserved; only 'none' is implemented"
            )
        if self.lift_dim < 1:
            raise ConfigError(f"lift_dim must be >= 1, got {self.lift_dim}")
        if self.conv_kernel < 1:
            raise ConfigError(f"conv_kernel must be >= 1, got {self.conv_kernel}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @property
    def resolved_shift(self) -> tuple[int, int, int]:
        if self.shift is not None:
            return tuple(self.shift)
        half = self.window // 2
        return (half, half, half)

    def window_config(self) -> WindowConfig:
        return WindowConfig(self.window, self.resolved_shift)

    def mlp_hidden(self, dim: int) -> int:
        return max(1, int(round(self.mlp_ratio * dim)))

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["block_dims"] = list(self.block_dims)
        out["shift"] = None if self.shift is None else list(self.shift)
        return out

    @classmethod
    def from_mapping(cls, mapping: dict) -> "PvtConfig":
        """Build a config from string-or-typed values (file or CLI overrides).
        Unknown keys are an error rather than a silent no-op."""
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            name = key.replace("-", "_")
            if name not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = _coerce(name, value)
        return cls(**kwargs)


def _coerce(name: str, value):
    if not isinstance(value, str):
        # JSON round trips hand back lists where the config wants tuples.
        if name in ("block_dims", "shift") and isinstance(value, (list, tuple)):
            return tuple(value)
        return value
    text = value.strip()
    try:
        if name == "block_dims":
            return tuple(int(p) for p in text.split(","))
        if name == "shift":
            if text.lower() in ("none", "half"):
                return None
            return tuple(int(p) for p in text.split(","))
        if name in ("mlp_ratio", "s_max"):
            return float(text)
        if name in ("point_mode", "precision", "devox_mode", "shift_masking"):
            return text
        return int(text)
    except ValueError:
        raise ConfigError(f"cannot parse config value {value!r} for {name!r}") from None


@dataclass(frozen=True)
class BlockParams:
    swa: SwaParams
    point: PointBranchParams
    # Linear transition applied before the block when the previous width
    # differs; None when widths already match.
    in_w: np.ndarray | None = None
    in_b: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.swa.dim


@dataclass(frozen=True)
class PvtParams:
    embed_w: np.ndarray
    embed_b: np.ndarray
    blocks: tuple[BlockParams, ...]
    lift_w: np.ndarray
    lift_b: np.ndarray
    head_w: np.ndarray
    head_b: np.ndarray


def init_params(cfg: PvtConfig, rng: np.random.Generator) -> PvtParams:
    dtype = cfg.dtype
    dims = cfg.block_dims
    embed_w, embed_b = init_linear(rng, 3 + cfg.in_features, dims[0], dtype)

    blocks = []
    prev = dims[0]
    for dim in dims:
        in_w = in_b = None
        if dim != prev:
            in_w, in_b = init_linear(rng, prev, dim, dtype)
        swa = init_swa_params(rng, dim, cfg.heads, cfg.mlp_hidden(dim), dtype)
        point = init_point_branch_params(
            rng, dim, bins=cfg.rpr_bins, s_max=cfg.s_max, slots=cfg.ea_slots,
            hidden=cfg.mlp_hidden(dim), mode=cfg.point_mode, ra_cap=cfg.ra_cap,
            dtype=dtype)
        blocks.append(BlockParams(swa, point, in_w, in_b))
        prev = dim

    lift_w, lift_b = init_linear(rng, prev, cfg.lift_dim, dtype)
    cat = sum(dims) + cfg.lift_dim
    head_w, head_b = init_linear(rng, cat, cat, dtype)
    return PvtParams(embed_w, embed_b, tuple(blocks), lift_w, lift_b,
                     head_w, head_b)


def count_parameters(obj) -> int:
    """Total scalar count over every array in a parameter container."""
    if isinstance(obj, np.ndarray):
        return int(obj.size)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return sum(count_parameters(getattr(obj, f.name))
                   for f in dataclasses.fields(obj))
    if isinstance(obj, (tuple, list)):
        return sum(count_parameters(v) for v in obj)
    return 0


def pvt_block_forward(cloud: PointCloud, features, cfg: PvtConfig,
                      block: BlockParams, threads: int = 1,
                      timer: StageTimer | None = None) -> np.ndarray:
    """One fused block: local voxel-branch features plus global point-branch
    features, added elementwise."""
    f = np.asarray(features)
    if f.ndim != 2 or f.shape[0] != cloud.n:
        raise ShapeError(f"features must be ({cloud.n}, D), got {f.shape}")
    local = voxel_branch_forward(
        cloud, f, cfg.window_config(), block.swa, cfg.resolution,
        threads=threads, devox_mode=cfg.devox_mode, timer=timer)
    with stage(timer, "point_branch"):
        global_ = point_branch_forward(f, cloud, block.point)
    return local + global_


def encoder_forward(cloud: PointCloud, cfg: PvtConfig, params: PvtParams,
                    threads: int = 1, timer: StageTimer | None = None):
    """Embed, run the blocks, concatenate the per-block skip outputs with a
    lifted copy of the last one, and max-pool.

    Returns (per_point, pooled): per-point features of the concatenated
    width and their column-wise maximum.
    """
    if cloud.feature_dim != cfg.in_features:
        raise ConfigError(
            f"config expects {cfg.in_features} input features, cloud has "
            f"{cloud.feature_dim}"
        )
    with stage(timer, "embed"):
        base = cloud.points if cloud.features is None else np.hstack(
            [cloud.points, cloud.features])
        x = base.astype(cfg.dtype, copy=False) @ params.embed_w + params.embed_b

    skips = []
    for block in params.blocks:
        if block.in_w is not None:
            with stage(timer, "transition"):
                x = x @ block.in_w + block.in_b
        x = pvt_block_forward(cloud, x, cfg, block, threads=threads, timer=timer)
        skips.append(x)

    with stage(timer, "head"):
        lifted = relu(x @ params.lift_w + params.lift_b)
        cat = np.hstack(skips + [lifted])
        per_point = relu(cat @ params.head_w + params.head_b)
        pooled = per_point.max(axis=0)
    return per_point, pooled


@dataclass(frozen=True)
class CostReport:
    """Analytic per-layer operation counts for the configured sizes.

    The ``order_*`` rows evaluate the leading-order forms with constant 1;
    the ``exact_*`` rows are full closed-form counts. ``occupancy`` rows
    appear when grid statistics were supplied, timing rows when a stage
    timer was.
    """

    resolution: int
    window: int
    dim: int
    n_points: int
    conv_kernel: int
    order_voxel_conv: int
    order_window_sa: int
    order_sparse_window_sa: float
    order_point_conv: int
    order_relative_sa: int
    order_external_sa: int
    exact_global_sa: int
    exact_window_sa: int
    exact_external_ops: int
    occupancy: float | None = None
    exact_sparse_window_sa: int | None = None
    param_count: int | None = None
    timings: dict = field(default_factory=dict)
    structuring_fraction: float | None = None

    def rows(self) -> list:
        """Flat (metric, value) pairs, CSV-friendly."""
        out = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if value is None:
                continue
            if f.name == "timings":
                out.extend((f"time_{k}", v) for k, v in sorted(value.items()))
            else:
                out.append((f.name, value))
        return out

    def to_dict(self) -> dict:
        return {k: v for k, v in dataclasses.asdict(self).items() if v is not None}


def complexity_report(cfg: PvtConfig, dim: int | None = None,
                      n_points: int | None = None,
                      stats: OccupancyStats | None = None,
                      params: PvtParams | None = None,
                      timer: StageTimer | None = None) -> CostReport:
    """Evaluate every cost row at the configured sizes.

    dim defaults to the first block width; the sparse window attention row
    uses the measured occupancy when stats are given, else the ratio
    n_points / R^3 capped at 1.
    """
    d = cfg.block_dims[0] if dim is None else dim
    n = cfg.n_points if n_points is None else n_points
    r3 = cfg.resolution ** 3
    wvol = cfg.window ** 3
    if stats is not None:
        occ = stats.global_fraction
    else:
        occ = min(1.0, n / r3)

    report = CostReport(
        resolution=cfg.resolution,
        window=cfg.window,
        dim=d,
        n_points=n,
        conv_kernel=cfg.conv_kernel,
        order_voxel_conv=cfg.conv_kernel * r3 * d * d,
        order_window_sa=wvol * r3 * d,
        order_sparse_window_sa=occ ** 2 * wvol * r3 * d,
        order_point_conv=cfg.conv_kernel * n * d * d,
        order_relative_sa=n * n * d,
        order_external_sa=n * d,
        exact_global_sa=cost_global_attention(cfg.resolution, d),
        exact_window_sa=cost_window_attention(cfg.resolution, cfg.window, d),
        exact_external_ops=ea_op_count(n, cfg.ea_slots, d),
        occupancy=occ if stats is not None else None,
        exact_sparse_window_sa=(swa_cost(stats, d).sparse if stats is not None else None),
        param_count=count_parameters(params) if params is not None else None,
        timings=dict(timer.seconds) if timer is not None else {},
        structuring_fraction=(timer.structuring_fraction() if timer is not None else None),
    )
    return report
