"""Command-line entry point.

Subcommands: ``forward`` (run the encoder and write feature files),
``verify`` (randomized property suites), ``bench`` (timing sweeps to CSV),
``dump-rulebook`` (window membership as JSON for debugging).

Exit codes: 0 success, 1 verification failure, 2 usage or configuration
error, 3 I/O or parse error.

Config files are ``key = value`` lines with ``#`` comments; keys mirror
the PvtConfig fields. Flags override file values. Every run that writes
output also writes a manifest.json describing exactly what ran; all JSON
documents carry a schema_version field.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import (bench_occupancy, bench_points, bench_resolution,
                    write_csv)
from .block import (PvtConfig, complexity_report, count_parameters,
                    encoder_forward, init_params)
from .errors import (CapacityError, ConfigError, EmptyInputError, ParseError,
                     PvtError)
from .pointcloud import (PointCloud, load_point_cloud, normalize_unit_sphere,
                         random_cloud, save_point_cloud)
from .timing import StageTimer
from .verify import SUITES, run_suites
from .voxel_grid import grid_to_json, occupancy_stats, voxelize
from .window_attention import WindowConfig, build_rule_book, rule_book_to_json

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def parse_config_text(text: str) -> dict:
    """key = value lines; '#' starts a comment; blank lines ignored."""
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ParseError("empty config key", lineno)
        mapping[key] = value.strip()
    return mapping


def load_config(path, overrides: dict | None = None) -> PvtConfig:
    mapping = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            mapping = parse_config_text(fh.read())
    for key, value in (overrides or {}).items():
        if value is not None:
            mapping[key] = value
    return PvtConfig.from_mapping(mapping)


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(command: str, args, cfg: PvtConfig, outputs, timings=None,
              extra=None) -> dict:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "version": __version__,
        "command": command,
        "seed": args.seed,
        "threads": getattr(args, "threads", 1),
        "precision": cfg.precision,
        "config": cfg.to_dict(),
        "input": getattr(args, "input", None),
        "outputs": [str(o) for o in outputs],
    }
    if timings is not None:
        payload["timings"] = timings.seconds
        payload["structuring_fraction"] = timings.structuring_fraction()
    if extra:
        payload.update(extra)
    return payload


def _resolve_cloud(args, cfg: PvtConfig, rng: np.random.Generator) -> PointCloud:
    """Load and normalize the input cloud, or draw a seeded random one."""
    if args.input is not None:
        cloud = normalize_unit_sphere(load_point_cloud(args.input))
        if cloud.feature_dim != cfg.in_features:
            raise ConfigError(
                f"config expects in_features={cfg.in_features}, "
                f"{args.input!r} has {cloud.feature_dim}"
            )
        return cloud
    return random_cloud(cfg.n_points, rng, cfg.in_features)


def cmd_forward(args) -> int:
    cfg = load_config(args.config, {"precision": args.precision})
    root = np.random.default_rng(args.seed)
    cloud_rng, param_rng = root.spawn(2)
    cloud = _resolve_cloud(args, cfg, cloud_rng)
    params = init_params(cfg, param_rng)

    timer = StageTimer()
    per_point, pooled = encoder_forward(cloud, cfg, params,
                                        threads=args.threads, timer=timer)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features_path = out / "features.pvtc"
    global_path = out / "global.json"
    manifest_path = out / "manifest.json"

    save_point_cloud(
        PointCloud(cloud.points, per_point.astype(np.float64)), features_path)
    _write_json(global_path, {
        "schema_version": SCHEMA_VERSION,
        "dim": int(pooled.size),
        "global": [float(v) for v in pooled],
    })
    report = complexity_report(cfg, n_points=cloud.n, params=params, timer=timer)
    _write_json(manifest_path, _manifest(
        "forward", args, cfg, [features_path, global_path],
        timings=timer,
        extra={
            "n_points": cloud.n,
            "feature_dim": int(per_point.shape[1]),
            "param_count": count_parameters(params),
            "cost_report": report.to_dict(),
        }))
    print(f"forward: {cloud.n} points -> {per_point.shape[1]} features per "
          f"point, structuring_fraction={timer.structuring_fraction():.3f}")
    print(f"wrote {features_path}, {global_path}, {manifest_path}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suites([args.suite], trials=args.trials, seed=args.seed,
                         corrupt=args.corrupt)
    for result in results:
        print(result.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    return EXIT_VERIFY_FAILED if failed else EXIT_OK


def _parse_range(text: str, as_float: bool):
    try:
        parts = [p for p in text.split(",") if p.strip()]
        values = [float(p) if as_float else int(p) for p in parts]
    except ValueError:
        raise ConfigError(f"cannot parse sweep range {text!r}") from None
    if not values:
        raise ConfigError("sweep range is empty")
    return values


def cmd_bench(args) -> int:
    cfg = load_config(args.config)
    dim = cfg.block_dims[0]
    if args.sweep == "resolution":
        values = _parse_range(args.range or "8,16,32", as_float=False)
        rows, summary = bench_resolution(
            values, dim=dim, window=cfg.window, occupancy=args.occupancy,
            seed=args.seed, repeats=args.repeats, threads=args.threads)
    elif args.sweep == "points":
        values = _parse_range(args.range or "1024,2048,4096", as_float=False)
        rows, summary = bench_points(values, dim=dim, slots=cfg.ea_slots,
                                     seed=args.seed, repeats=args.repeats)
    else:
        values = _parse_range(args.range or "0.05,0.1,0.2,0.4", as_float=True)
        rows, summary = bench_occupancy(
            values, resolution=cfg.resolution, window=cfg.window, dim=dim,
            seed=args.seed, repeats=args.repeats, threads=args.threads)

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, rows)
    manifest_path = out.with_suffix(".manifest.json")
    _write_json(manifest_path, _manifest(
        "bench", args, cfg, [out],
        extra={"sweep": args.sweep, "values": values, "repeats": args.repeats,
               "summary": summary}))
    for key, value in summary.items():
        print(f"{key}={value:.3f}")
    print(f"wrote {out} ({len(rows)} rows), {manifest_path}")
    return EXIT_OK


def cmd_dump_rulebook(args) -> int:
    cfg = load_config(args.config)
    rng = np.random.default_rng(args.seed)
    cloud = _resolve_cloud(args, cfg, rng)
    feats = cloud.features
    if feats is None:
        feats = np.ones((cloud.n, 1))
    grid = voxelize(cloud, feats, cfg.resolution)
    rule_book = build_rule_book(grid, WindowConfig(cfg.window))
    payload = rule_book_to_json(rule_book, grid)
    stats = occupancy_stats(grid, cfg.window)
    payload["occupancy"] = {
        "global_fraction": stats.global_fraction,
        "n_voxels": int(stats.n_voxels),
    }
    if args.out:
        _write_json(args.out, payload)
        print(f"wrote {args.out} ({rule_book.n_windows} windows)")
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    if args.grid_out:
        _write_json(args.grid_out, grid_to_json(grid))
        print(f"wrote {args.grid_out} ({grid.n_voxels} voxels)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pvt",
        description="Point/voxel attention block: forward runs, property "
                    "verification, benchmarks, and rule-book dumps.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, threads=True):
        p.add_argument("--config", default=None,
                       help="key = value config file")
        p.add_argument("--seed", type=int, default=0)
        if threads:
            p.add_argument("--threads", type=int,
                           default=max(1, os.cpu_count() or 1),
                           help="window-level worker threads")

    p = sub.add_parser("forward", help="run the encoder, write features")
    common(p)
    p.add_argument("--input", default=None,
                   help="point cloud file (.xyz/.xyzd/.pvtc); omitted means "
                        "a seeded random cloud")
    p.add_argument("--precision", choices=("f32", "f64"), default=None,
                   help="override the config precision")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_forward)

    p = sub.add_parser("verify", help="run randomized property suites")
    p.add_argument("--suite", default="all",
                   choices=sorted(SUITES) + ["all"])
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="timing sweeps, CSV output")
    common(p)
    p.add_argument("--sweep", required=True,
                   choices=("resolution", "points", "occupancy"))
    p.add_argument("--range", default=None,
                   help="comma-separated sweep values")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--occupancy", type=float, default=0.125,
                   help="grid occupancy for the resolution sweep")
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("dump-rulebook",
                       help="window membership of the voxelized input")
    common(p, threads=False)
    p.add_argument("--input", default=None)
    p.add_argument("--out", default=None, help="JSON path (default stdout)")
    p.add_argument("--grid-out", default=None,
                   help="also dump the voxel grid as JSON")
    p.set_defaults(func=cmd_dump_rulebook)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, EmptyInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CapacityError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PvtError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
