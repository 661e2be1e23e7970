"""Timing sweeps with analytic counts alongside.

Measurements use the monotonic high-resolution clock, discard a warmup
pass, and report the median of the remaining repetitions. BLAS thread
pools are pinned to one thread while the clock runs so scaling exponents
reflect the algorithm rather than the library's thread scheduler; the
``threads`` argument below controls our own window-level parallelism.
"""

from __future__ import annotations

import csv
import statistics
import time

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigError
from .point_branch import ea_op_count, external_attention, init_ea_memories
from .timing import STRUCTURING_STAGES, StageTimer
from .verify import random_sparse_grid
from .voxel_grid import occupancy_stats, voxel_centers
from .window_attention import (WindowConfig, build_rule_book,
                               cost_global_attention, init_swa_params,
                               swa_cost, swa_forward, voxel_branch_forward)
from .pointcloud import PointCloud


def measure(fn, repeats: int = 5, warmup: int = 1) -> float:
    """Median wall time of ``fn()`` over ``repeats`` runs after ``warmup``
    discarded ones."""
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    times = []
    with threadpool_limits(limits=1):
        for _ in range(warmup):
            fn()
        for _ in range(repeats):
            start = time.perf_counter()
            fn()
            times.append(time.perf_counter() - start)
    return statistics.median(times)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    x = np.log(np.asarray(xs, dtype=np.float64))
    y = np.log(np.maximum(np.asarray(ys, dtype=np.float64), 1e-12))
    if x.size < 2:
        raise ConfigError("a slope needs at least two sweep values")
    return float(np.polyfit(x, y, 1)[0])


def cloud_from_grid(grid, rng: np.random.Generator) -> PointCloud:
    """One point per occupied voxel, jittered inside its cell, so that
    voxelizing the cloud reproduces the grid's occupancy pattern."""
    centers = voxel_centers(grid.coords, grid.resolution)
    half_cell = 1.0 / grid.resolution
    jitter = rng.uniform(-0.9, 0.9, size=centers.shape) * half_cell
    return PointCloud(centers + jitter)


def _median_stage_times(run, repeats: int) -> dict:
    """Per-stage medians over instrumented repetitions of ``run(timer)``."""
    run(StageTimer())  # warmup
    samples = []
    with threadpool_limits(limits=1):
        for _ in range(repeats):
            timer = StageTimer()
            run(timer)
            samples.append(timer.seconds)
    stages = sorted({k for s in samples for k in s})
    return {k: statistics.median(s.get(k, 0.0) for s in samples) for k in stages}


def _structuring_fraction(stage_medians: dict) -> float:
    total = sum(stage_medians.values())
    if total == 0.0:
        return 0.0
    return sum(stage_medians.get(s, 0.0) for s in STRUCTURING_STAGES) / total


def bench_resolution(resolutions, dim: int, window: int, occupancy: float,
                     seed: int, repeats: int = 5, threads: int = 1):
    """Sweep the grid resolution at fixed occupancy: isolated window
    attention time (for the scaling exponent) plus a full voxel-branch
    stage breakdown and the analytic counts."""
    rows = []
    swa_times = []
    for resolution in resolutions:
        if resolution % window != 0:
            raise ConfigError(f"window={window} must divide resolution={resolution}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, resolution]))
        grid = random_sparse_grid(rng, resolution, occupancy, dim)
        params = init_swa_params(rng, dim)
        cfg = WindowConfig(window, (window // 2,) * 3)
        rule_book = build_rule_book(grid, WindowConfig(window))
        t_swa = measure(lambda: swa_forward(grid, rule_book, params, threads),
                        repeats)
        swa_times.append(t_swa)

        cloud = cloud_from_grid(grid, rng)
        feats = rng.standard_normal((cloud.n, dim))
        stage_medians = _median_stage_times(
            lambda timer: voxel_branch_forward(
                cloud, feats, cfg, params, resolution, threads=threads,
                timer=timer),
            repeats)

        stats = occupancy_stats(grid, window)
        cost = swa_cost(stats, dim)
        row = {
            "sweep": "resolution",
            "value": resolution,
            "cells": resolution ** 3,
            "n_voxels": grid.n_voxels,
            "occupancy": stats.global_fraction,
            "t_swa": t_swa,
            "t_total": sum(stage_medians.values()),
            "structuring_fraction": _structuring_fraction(stage_medians),
            "ops_swa_sparse": cost.sparse,
            "ops_window_dense": cost.dense_window,
            "ops_global_dense": cost_global_attention(resolution, dim),
        }
        row.update({f"t_{k}": v for k, v in stage_medians.items()})
        rows.append(row)
    slope = loglog_slope([r ** 3 for r in resolutions], swa_times)
    return rows, {"slope_t_swa_vs_cells": slope}


def bench_points(counts, dim: int, slots: int, seed: int, repeats: int = 5):
    """Sweep the point count in external-attention mode; the analytic count
    is exactly linear in N, the measured time should scale accordingly."""
    rows = []
    times = []
    for n in counts:
        rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
        feats = rng.standard_normal((n, dim))
        memories = init_ea_memories(rng, slots, dim)
        t = measure(lambda: external_attention(feats, memories), repeats)
        times.append(t)
        ops = ea_op_count(n, slots, dim)
        rows.append({
            "sweep": "points",
            "value": n,
            "t_external_attention": t,
            "ops_external": ops,
            "ops_per_second": ops / t if t > 0 else float("inf"),
        })
    slope = loglog_slope(counts, times)
    return rows, {"slope_t_ea_vs_points": slope}


def bench_occupancy(fractions, resolution: int, window: int, dim: int,
                    seed: int, repeats: int = 5, threads: int = 1):
    """Sweep grid occupancy at fixed resolution; sparse cost should track
    the occupied-voxel count, dense cost stays put."""
    rows = []
    for occ in fractions:
        rng = np.random.default_rng(
            np.random.SeedSequence([seed, int(round(occ * 10 ** 6))]))
        grid = random_sparse_grid(rng, resolution, occ, dim)
        params = init_swa_params(rng, dim)
        rule_book = build_rule_book(grid, WindowConfig(window))
        t_swa = measure(lambda: swa_forward(grid, rule_book, params, threads),
                        repeats)
        stats = occupancy_stats(grid, window)
        cost = swa_cost(stats, dim)
        rows.append({
            "sweep": "occupancy",
            "value": occ,
            "n_voxels": grid.n_voxels,
            "n_windows": rule_book.n_windows,
            "t_swa": t_swa,
            "ops_swa_sparse": cost.sparse,
            "ops_window_dense": cost.dense_window,
        })
    return rows, {}


def write_csv(path, rows) -> None:
    """Write sweep rows as CSV; the column set is the union over rows so a
    missing stage shows as an empty cell rather than a crash."""
    if not rows:
        raise ConfigError("no rows to write")
    fields = []
    for row in rows:
        for key in row:
            if key not in fields:
                fields.append(key)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
