"""Self-checking property suites, runnable from the CLI.

Each suite draws randomized instances from a seeded generator, checks one
family of properties against an independent reference (brute-force dense
attention, naive pair loops, algebraic identities), and reports the worst
error observed together with the tolerance it had to meet.
"""

from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass
from itertools import product

import numpy as np

from .errors import ConfigError
from .point_branch import (RprTables, ea_op_count, external_attention,
                           external_attention_maps, init_ea_memories,
                           init_point_branch_params, point_branch_forward,
                           quantize_index, random_rpr_tables,
                           relative_attention, relative_bias, self_attention)
from .pointcloud import (PointCloud, load_point_cloud, normalize_unit_sphere,
                         random_cloud, save_point_cloud)
from .voxel_grid import (SparseVoxelGrid, coords_to_keys, devoxelize,
                         keys_to_coords, voxelize)
from .window_attention import (WindowConfig, build_rule_book, cyclic_shift,
                               dense_window_attention_oracle, init_swa_params,
                               reverse_cyclic_shift, swa_forward)


@dataclass(frozen=True)
class PropertyResult:
    name: str
    passed: bool
    max_err: float
    tol: float
    trials: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({self.detail})" if self.detail else ""
        return (f"{status} {self.name}: max_err={self.max_err:.3e} "
                f"tol={self.tol:.3e} trials={self.trials}{extra}")


def _result(name, err, tol, trials, detail="") -> PropertyResult:
    err = float(err)
    return PropertyResult(name, err <= tol, err, tol, trials, detail)


def random_sparse_grid(rng: np.random.Generator, resolution: int,
                       occupancy: float, dim: int,
                       dtype=np.float64) -> SparseVoxelGrid:
    """Grid with round(occupancy * R^3) voxels at distinct random sites and
    standard-normal features."""
    total = resolution ** 3
    m = min(total, max(1, int(round(occupancy * total))))
    keys = np.sort(rng.choice(total, size=m, replace=False)).astype(np.int64)
    return SparseVoxelGrid(
        resolution=resolution,
        keys=keys,
        coords=keys_to_coords(keys, resolution),
        features=rng.standard_normal((m, dim)).astype(dtype),
        counts=np.ones(m, dtype=np.int64),
    )


def _grids_equal(a: SparseVoxelGrid, b: SparseVoxelGrid) -> bool:
    if a.resolution != b.resolution or a.n_voxels != b.n_voxels:
        return False
    same = (np.array_equal(a.keys, b.keys)
            and np.array_equal(a.coords, b.coords)
            and np.array_equal(a.features, b.features)
            and np.array_equal(a.counts, b.counts))
    if a.point_voxel is None or b.point_voxel is None:
        return same and a.point_voxel is b.point_voxel
    return same and np.array_equal(a.point_voxel, b.point_voxel)


def run_swa_oracle(trials: int, rng: np.random.Generator,
                   corrupt: bool = False) -> list[PropertyResult]:
    """Sparse window attention versus the dense masked oracle, plus window
    locality and the singleton-window identity."""
    combos = [c for c in product((4, 8), (2, 4), (8, 16), (1, 2))
              if c[0] % c[1] == 0]
    worst = 0.0
    for t in range(trials):
        resolution, window, dim, heads = combos[t % len(combos)]
        occupancy = rng.uniform(0.05, 0.5)
        grid = random_sparse_grid(rng, resolution, occupancy, dim)
        if t % 2 == 1:
            half = window // 2
            grid = cyclic_shift(grid, (half, half, half))
        params = init_swa_params(rng, dim, heads)
        # The corrupt flag perturbs one route so the suite's own sensitivity
        # can be tested: a suite that cannot fail verifies nothing.
        sparse_params = (dataclasses.replace(params, wv=params.wv + 1e-3)
                         if corrupt else params)
        cfg = WindowConfig(window)
        sparse = swa_forward(grid, build_rule_book(grid, cfg), sparse_params)
        dense = dense_window_attention_oracle(grid, cfg, params)
        worst = max(worst, float(np.abs(sparse.features - dense.features).max()))
    results = [_result("swa_sparse_vs_dense_oracle", worst, 1e-9, trials)]

    loc_trials = max(1, trials // 2)
    loc_err = 0.0
    changed = True
    for _ in range(loc_trials):
        grid = random_sparse_grid(rng, 8, rng.uniform(0.1, 0.4), 8)
        params = init_swa_params(rng, 8, 1)
        cfg = WindowConfig(2)
        rb = build_rule_book(grid, cfg)
        inside = rb.members[rng.integers(rb.n_windows)]
        outside = np.setdiff1d(np.arange(grid.n_voxels), inside)
        out_a = swa_forward(grid, rb, params)
        feats = grid.features.copy()
        if outside.size:
            feats[outside] = rng.standard_normal((outside.size, 8))
        out_b = swa_forward(grid.with_features(feats), rb, params)
        loc_err = max(loc_err, float(np.abs(
            out_a.features[inside] - out_b.features[inside]).max()))
        if outside.size:
            changed = changed and not np.array_equal(
                out_a.features[outside], out_b.features[outside])
    results.append(_result("swa_window_locality", loc_err, 0.0, loc_trials,
                           "outside rows did change" if changed else
                           "outside rows never changed"))

    single_trials = max(1, trials // 10)
    single_err = 0.0
    for _ in range(single_trials):
        # One voxel per window: every window is a singleton.
        resolution, window, dim = 8, 2, 8
        per_side = resolution // window
        wcoords = np.stack(np.meshgrid(*[np.arange(per_side)] * 3,
                                       indexing="ij"), axis=-1).reshape(-1, 3)
        offsets = rng.integers(0, window, size=wcoords.shape)
        coords = wcoords * window + offsets
        keys = np.sort(coords_to_keys(coords, resolution))
        grid = SparseVoxelGrid(resolution, keys,
                               keys_to_coords(keys, resolution),
                               rng.standard_normal((keys.size, dim)),
                               np.ones(keys.size, dtype=np.int64))
        params = init_swa_params(rng, dim, 1)
        out = swa_forward(grid, build_rule_book(grid, WindowConfig(window)), params)
        # Reference rows computed at the same 1 x D shape the window sees,
        # so bitwise comparison is meaningful.
        expected = np.vstack([grid.features[i:i + 1] @ params.wv
                              for i in range(keys.size)])
        single_err = max(single_err, float(np.abs(out.features - expected).max()))
    results.append(_result("swa_singleton_window_is_value_projection",
                           single_err, 0.0, single_trials))
    return results


def run_permutation(trials: int, rng: np.random.Generator) -> list[PropertyResult]:
    """Bitwise permutation equivariance of every point-branch core, the
    fused forward, the pooled descriptor, and voxelization."""
    errs = {"relative": 0.0, "external": 0.0, "forward": 0.0, "pooled": 0.0,
            "voxelize": 0.0}
    for _ in range(trials):
        n = int(rng.integers(16, 513))
        dim = int(rng.choice((8, 16)))
        cloud = random_cloud(n, rng)
        feats = rng.standard_normal((n, dim))
        perm = rng.permutation(n)
        cloud_p = PointCloud(cloud.points[perm])
        feats_p = feats[perm]

        # Nonzero tables, otherwise the relative check degenerates to plain
        # self attention and the bias path goes untested.
        params = dataclasses.replace(
            init_point_branch_params(rng, dim),
            rpr=random_rpr_tables(rng))
        a = relative_attention(feats, cloud, params)
        b = relative_attention(feats_p, cloud_p, params)
        errs["relative"] = max(errs["relative"], float(np.abs(b - a[perm]).max()))

        a = external_attention(feats, params.ea)
        b = external_attention(feats_p, params.ea)
        errs["external"] = max(errs["external"], float(np.abs(b - a[perm]).max()))

        for mode in ("relative", "external"):
            p = dataclasses.replace(
                init_point_branch_params(rng, dim, mode=mode),
                rpr=random_rpr_tables(rng))
            a = point_branch_forward(feats, cloud, p)
            b = point_branch_forward(feats_p, cloud_p, p)
            errs["forward"] = max(errs["forward"], float(np.abs(b - a[perm]).max()))
            errs["pooled"] = max(errs["pooled"], float(np.abs(
                b.max(axis=0) - a.max(axis=0)).max()))

        g = voxelize(cloud, feats, 8)
        gp = voxelize(cloud_p, feats_p, 8)
        vox_same = (np.array_equal(g.keys, gp.keys)
                    and np.array_equal(g.features, gp.features)
                    and np.array_equal(g.counts, gp.counts)
                    and np.array_equal(gp.point_voxel, g.point_voxel[perm]))
        errs["voxelize"] = max(errs["voxelize"], 0.0 if vox_same else 1.0)

    return [
        _result("relative_attention_permutation_equivariance",
                errs["relative"], 0.0, trials),
        _result("external_attention_permutation_equivariance",
                errs["external"], 0.0, trials),
        _result("point_branch_forward_permutation_equivariance",
                errs["forward"], 0.0, trials),
        _result("pooled_descriptor_permutation_invariance",
                errs["pooled"], 0.0, trials),
        _result("voxelize_permutation_invariance",
                errs["voxelize"], 0.0, trials),
    ]


def run_roundtrip(trials: int, rng: np.random.Generator) -> list[PropertyResult]:
    """Exact round trips: cyclic shift and its reverse, binary file IO, and
    devoxelization identities on fully occupied neighborhoods."""
    import tempfile
    from pathlib import Path

    shift_err = 0.0
    for _ in range(trials):
        resolution = int(rng.choice((4, 8, 16)))
        grid = random_sparse_grid(rng, resolution, rng.uniform(0.05, 0.5), 8)
        shift = tuple(int(s) for s in rng.integers(0, resolution, size=3))
        back = reverse_cyclic_shift(cyclic_shift(grid, shift), shift)
        shift_err = max(shift_err, 0.0 if _grids_equal(grid, back) else 1.0)
    results = [_result("cyclic_shift_round_trip_bitwise", shift_err, 0.0, trials)]

    io_trials = max(1, trials // 10)
    io_err = 0.0
    with tempfile.TemporaryDirectory() as td:
        for i in range(io_trials):
            n = int(rng.integers(1, 200))
            d = int(rng.integers(0, 5))
            cloud = random_cloud(n, rng, feature_dim=d)
            path = Path(td) / f"cloud_{i}.pvtc"
            save_point_cloud(cloud, path)
            back = load_point_cloud(path)
            same = np.array_equal(cloud.points, back.points)
            if d:
                same = same and np.array_equal(cloud.features, back.features)
            io_err = max(io_err, 0.0 if same else 1.0)
    results.append(_result("binary_io_round_trip_bitwise", io_err, 0.0, io_trials))

    norm_trials = max(1, trials // 5)
    norm_err = 0.0
    for _ in range(norm_trials):
        cloud = PointCloud(rng.uniform(-50.0, 50.0, size=(int(rng.integers(2, 100)), 3)))
        once = normalize_unit_sphere(cloud)
        twice = normalize_unit_sphere(once)
        radius = np.sqrt((once.points ** 2).sum(axis=1)).max()
        norm_err = max(norm_err, abs(radius - 1.0),
                       float(np.abs(twice.points - once.points).max()))
    results.append(_result("normalize_unit_sphere_idempotent", norm_err, 1e-9,
                           norm_trials))

    devox_trials = max(1, trials // 10)
    devox_err = 0.0
    for _ in range(devox_trials):
        # Fully occupied constant grid: anywhere all 8 corners exist, the
        # interpolation must return the constant bit for bit.
        resolution = 4
        total = resolution ** 3
        keys = np.arange(total, dtype=np.int64)
        const = float(rng.standard_normal())
        grid = SparseVoxelGrid(
            resolution, keys, keys_to_coords(keys, resolution),
            np.full((total, 2), const), np.ones(total, dtype=np.int64))
        inner = 1.0 / resolution
        pts = rng.uniform(inner - 1.0, 1.0 - inner, size=(64, 3))
        out = devoxelize(grid, PointCloud(pts))
        devox_err = max(devox_err, float(np.abs(out - const).max()))
    results.append(_result("devoxelize_constant_exact_inside", devox_err, 0.0,
                           devox_trials))
    return results


def run_rpr(trials: int, rng: np.random.Generator) -> list[PropertyResult]:
    """Quantizer totality and center bin, bias against a naive pair loop,
    and the exact collapse to plain self attention with zero tables."""
    tables = RprTables(np.zeros(16), np.zeros(16), np.zeros(16), s_max=1.0)

    n_deltas = max(trials, 1) * 1000
    deltas = rng.uniform(-4.0, 4.0, size=n_deltas)
    edge = np.array([1.0, -1.0])
    specials = np.concatenate([
        edge, np.nextafter(edge, 10), np.nextafter(edge, -10),
        [0.0, 1e300, -1e300, 1e-300, -1e-300],
    ])
    idx = quantize_index(np.concatenate([deltas, specials]), tables)
    total_ok = idx.min() >= 0 and idx.max() <= 15 and np.issubdtype(idx.dtype, np.integer)
    results = [_result("quantize_index_total_in_range",
                       0.0 if total_ok else 1.0, 0.0, n_deltas + specials.size)]

    center = quantize_index(0.0, tables)
    results.append(_result("quantize_index_zero_delta_center_bin",
                           abs(center - 8), 0.0, 1, f"bin={center}"))

    bias_trials = max(1, trials // 10)
    bias_err = 0.0
    for _ in range(bias_trials):
        n = int(rng.integers(2, 40))
        cloud = random_cloud(n, rng)
        tbl = RprTables(rng.standard_normal(16), rng.standard_normal(16),
                        rng.standard_normal(16), s_max=1.0)
        bias = relative_bias(cloud, tbl)
        naive = np.zeros((n, n))
        for i in range(n):
            for j in range(n):
                value = 0.0
                for axis, table in ((0, tbl.t_x), (1, tbl.t_y), (2, tbl.t_z)):
                    delta = cloud.points[i, axis] - cloud.points[j, axis]
                    value += table[quantize_index(delta, tbl)]
                naive[i, j] = value
        bias_err = max(bias_err, float(np.abs(bias - naive).max()))
    results.append(_result("relative_bias_matches_pair_loop", bias_err, 0.0,
                           bias_trials))

    red_trials = max(1, trials // 5)
    red_err = 0.0
    nonzero_diverges = True
    for _ in range(red_trials):
        n = int(rng.integers(4, 128))
        dim = int(rng.choice((8, 16)))
        cloud = random_cloud(n, rng)
        feats = rng.standard_normal((n, dim))
        params = _with_zero_tables(init_point_branch_params(rng, dim))
        sa = self_attention(feats, params)
        red_err = max(red_err, float(np.abs(
            relative_attention(feats, cloud, params) - sa).max()))
        biased = dataclasses.replace(params, rpr=random_rpr_tables(rng))
        nonzero_diverges = nonzero_diverges and bool(np.abs(
            relative_attention(feats, cloud, biased) - sa).max() > 0)
    results.append(_result(
        "relative_attention_zero_tables_is_self_attention", red_err, 1e-12,
        red_trials,
        "nonzero tables diverge" if nonzero_diverges else
        "nonzero tables never diverged"))
    return results


def _with_zero_tables(params):
    bins = params.rpr.bins
    zero = RprTables(np.zeros(bins), np.zeros(bins), np.zeros(bins),
                     params.rpr.s_max)
    return dataclasses.replace(params, rpr=zero)


def run_ea(trials: int, rng: np.random.Generator) -> list[PropertyResult]:
    """External attention normalization identities, degenerate memories, and
    exact linearity of the analytic operation count."""
    col_err = row_err = 0.0
    for _ in range(trials):
        n = int(rng.integers(2, 256))
        dim = int(rng.choice((8, 16)))
        slots = int(rng.choice((1, 4, 64)))
        feats = rng.standard_normal((n, dim))
        memories = init_ea_memories(rng, slots, dim)
        a1, a2 = external_attention_maps(feats, memories)
        col_err = max(col_err, float(np.abs(a1.sum(axis=0) - 1.0).max()))
        row_err = max(row_err, float(np.abs(a2.sum(axis=1) - 1.0).max()))
    results = [
        _result("ea_columns_softmax_normalized", col_err, 1e-12, trials),
        _result("ea_rows_l1_normalized", row_err, 1e-12, trials),
    ]

    single_trials = max(1, trials // 5)
    single_err = 0.0
    for _ in range(single_trials):
        n = int(rng.integers(1, 64))
        dim = 8
        memories = init_ea_memories(rng, 1, dim)
        out = external_attention(rng.standard_normal((n, dim)), memories)
        single_err = max(single_err, float(np.abs(out - memories.m_v[0]).max()))
    results.append(_result("ea_single_slot_returns_value_row", single_err, 0.0,
                           single_trials))

    count_ok = all(
        ea_op_count(2 * n, s, d) == 2 * ea_op_count(n, s, d)
        for n, s, d in zip(rng.integers(1, 10000, 20),
                           rng.integers(1, 256, 20),
                           rng.integers(1, 256, 20)))
    results.append(_result("ea_op_count_doubles_with_n",
                           0.0 if count_ok else 1.0, 0.0, 20))
    return results


SUITES = {
    "swa-oracle": run_swa_oracle,
    "permutation": run_permutation,
    "roundtrip": run_roundtrip,
    "rpr": run_rpr,
    "ea": run_ea,
}


def run_suites(names, trials: int, seed: int, corrupt: bool = False):
    """Run the named suites (or all of them), each with its own seeded
    generator so suite order does not change the draws."""
    if "all" in names:
        names = list(SUITES)
    results = []
    for name in names:
        if name not in SUITES:
            raise ConfigError(f"unknown verify suite {name!r}; "
                              f"choose from {sorted(SUITES)} or 'all'")
        # crc32 rather than hash(): stable across processes.
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, zlib.crc32(name.encode())]))
        fn = SUITES[name]
        if name == "swa-oracle":
            results.extend(fn(trials, rng, corrupt=corrupt))
        else:
            results.extend(fn(trials, rng))
    return results
