"""Point cloud container, file IO, and unit-sphere normalization.

Three on-disk formats:

* ``xyz-text``: one point per line, three whitespace-separated floats.
* ``xyzd-text``: one point per line, ``x y z`` followed by D feature values;
  D is inferred from the first data line and must be consistent.
* ``binary``: little-endian; magic ``PVTC``, then uint32 N, uint32 D, then
  N*(3+D) float64 values laid out row by row (coordinates first).

Text files may contain blank lines and ``#`` comments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import EmptyInputError, NumericError, ParseError, ShapeError

MAGIC = b"PVTC"
_HEADER = struct.Struct("<4sII")


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] == 0:
            raise EmptyInputError("a point cloud needs at least one point")
        if not np.isfinite(pts).all():
            raise NumericError("point coordinates must be finite")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            f = np.asarray(self.features, dtype=np.float64)
            if f.ndim != 2 or f.shape[0] != pts.shape[0]:
                raise ShapeError(
                    f"features must have shape ({pts.shape[0]}, D), got {f.shape}"
                )
            if not np.isfinite(f).all():
                raise NumericError("point features must be finite")
            object.__setattr__(self, "features", f)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]


def _parse_text(lines, want_features: bool, path: str) -> PointCloud:
    rows = []
    width = None
    for lineno, raw in enumerate(lines, start=1):
        text = raw.split("#", 1)[0].strip()
        if not text:
            continue
        parts = text.split()
        if width is None:
            width = len(parts)
            minimum = 4 if want_features else 3
            if want_features and width < minimum:
                raise ParseError(f"expected at least {minimum} columns, got {width}", lineno)
            if not want_features and width != 3:
                raise ParseError(f"expected 3 columns, got {width}", lineno)
        elif len(parts) != width:
            raise ParseError(f"expected {width} columns, got {len(parts)}", lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise ParseError(f"bad number in {path!r}: {exc}", lineno) from None
    if not rows:
        raise EmptyInputError(f"no points in {path!r}")
    data = np.array(rows, dtype=np.float64)
    if want_features:
        return PointCloud(data[:, :3], data[:, 3:])
    return PointCloud(data)


def _parse_binary(blob: bytes, path: str) -> PointCloud:
    if len(blob) < _HEADER.size:
        raise ParseError(f"{path!r} is too short to hold a header")
    magic, n, d = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise ParseError(f"{path!r} does not start with the {MAGIC!r} magic")
    if n == 0:
        raise EmptyInputError(f"{path!r} declares zero points")
    expected = _HEADER.size + n * (3 + d) * 8
    if len(blob) != expected:
        raise ParseError(
            f"{path!r} declares {n} points with {d} features "
            f"({expected} bytes) but holds {len(blob)} bytes"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size).reshape(n, 3 + d)
    pts = data[:, :3].copy()
    feats = data[:, 3:].copy() if d else None
    return PointCloud(pts, feats)


def detect_format(path: str) -> str:
    name = str(path).lower()
    if name.endswith(".pvtc") or name.endswith(".bin"):
        return "binary"
    if name.endswith(".xyzd"):
        return "xyzd-text"
    return "xyz-text"


def load_point_cloud(path, fmt: str = "auto") -> PointCloud:
    """Read a cloud from disk. ``fmt`` is one of xyz-text, xyzd-text, binary,
    or auto (pick by file extension)."""
    if fmt == "auto":
        fmt = detect_format(path)
    if fmt == "binary":
        with open(path, "rb") as fh:
            return _parse_binary(fh.read(), str(path))
    if fmt in ("xyz-text", "xyzd-text"):
        with open(path, "r", encoding="utf-8") as fh:
            return _parse_text(fh, fmt == "xyzd-text", str(path))
    raise ParseError(f"unknown point cloud format {fmt!r}")


def save_point_cloud(cloud: PointCloud, path, fmt: str = "binary") -> None:
    if fmt == "binary":
        d = cloud.feature_dim
        body = cloud.points if d == 0 else np.hstack([cloud.points, cloud.features])
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, cloud.n, d))
            fh.write(np.ascontiguousarray(body, dtype="<f8").tobytes())
        return
    if fmt in ("xyz-text", "xyzd-text"):
        cols = cloud.points
        if fmt == "xyzd-text":
            if cloud.features is None:
                raise ShapeError("xyzd-text needs a cloud with features")
            cols = np.hstack([cloud.points, cloud.features])
        np.savetxt(path, cols, fmt="%.17g")
        return
    raise ParseError(f"unknown point cloud format {fmt!r}")


def normalize_unit_sphere(cloud: PointCloud) -> PointCloud:
    """Center on the centroid and scale so the farthest point sits on the
    unit sphere. A degenerate cloud (all points coincident) maps to the
    origin rather than dividing by zero. Features pass through untouched.
    """
    centered = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius == 0.0:
        scaled = np.zeros_like(centered)
    else:
        scaled = centered / radius
    return PointCloud(scaled, cloud.features)


def random_cloud(n: int, rng: np.random.Generator, feature_dim: int = 0) -> PointCloud:
    """Uniform cloud in the cube, rescaled to the unit sphere; features are
    standard normal draws."""
    pts = rng.uniform(-1.0, 1.0, size=(n, 3))
    feats = rng.standard_normal((n, feature_dim)) if feature_dim else None
    return normalize_unit_sphere(PointCloud(pts, feats))
