"""Point clouds, the two training augmentations, voxelization and 3DVI."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

# (theta, alpha, phi) half-ranges about x, y, z
ROTATION_RANGES = (math.pi / 18, math.pi / 18, math.pi / 12)


class PointCloudParseError(ValueError):
    def __init__(self, path, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line


class VoxelizationError(ValueError):
    pass


@dataclass
class PointCloud:
    """``points`` is n x (3 + f): xyz in meters followed by feature channels."""

    points: np.ndarray
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 3 + len(self.feature_names))
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError(f"points must be n x (3+f), got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        self.points = pts
        if self.feature_names and len(self.feature_names) != pts.shape[1] - 3:
            raise ValueError("feature_names does not match feature channel count")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def f(self) -> int:
        return self.points.shape[1] - 3

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def features(self) -> np.ndarray:
        return self.points[:, 3:]

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        pts = self.points.copy()
        pts[:, :3] = xyz
        return PointCloud(pts, self.feature_names)


@dataclass
class SparseVoxelGrid:
    """Active voxels of a regular grid.

    ``coords`` holds integer cell indices (k x 3, sorted lexicographically),
    ``features`` the matching k x c values (numpy array or torch tensor).
    ``batch`` optionally tags each active site with a sample index so several
    grids can be pushed through the backbone at once.
    """

    dims: tuple[int, int, int]
    coords: np.ndarray
    features: object
    extent: Optional[tuple[float, float, float]] = None
    resolution: Optional[tuple[float, float, float]] = None
    batch: Optional[np.ndarray] = None
    dropped: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        if self.batch is None:
            self.batch = np.zeros(len(self.coords), dtype=np.int64)

    @property
    def n_active(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def batch_size(self) -> int:
        return int(self.batch.max()) + 1 if len(self.batch) else 0


def grid_dims(extent: Sequence[float], resolution: Sequence[float]) -> tuple[int, int, int]:
    # round before ceil so 16 / 0.08 does not become 201 through float error
    return tuple(int(math.ceil(round(e / r, 9))) for e, r in zip(extent, resolution))


def voxelize(
    pc: PointCloud,
    extent: Sequence[float],
    resolution: Sequence[float],
    origin: Sequence[float] = (0.0, 0.0, 0.0),
) -> SparseVoxelGrid:
    """Average the full (xyz + feature) rows of the points falling in each cell.

    Cells are half-open ``[lo, lo + res)``. Points outside the extent are
    dropped and counted in ``grid.dropped``.
    """
    res = np.asarray(resolution, dtype=np.float64)
    if np.any(res <= 0):
        raise VoxelizationError("resolution must be positive")
    if pc.n == 0:
        raise VoxelizationError("cannot voxelize an empty point cloud")
    dims = grid_dims(extent, resolution)
    idx = np.floor((pc.xyz - np.asarray(origin, dtype=np.float64)) / res).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
    dropped = int((~inside).sum())
    if not inside.any():
        raise VoxelizationError(f"all {pc.n} points fall outside the grid extent")
    if dropped:
        log.debug("voxelize dropped %d of %d points outside extent", dropped, pc.n)
    idx = idx[inside]
    rows = pc.points[inside]
    L, W, H = dims
    keys = (idx[:, 0] * W + idx[:, 1]) * H + idx[:, 2]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((len(uniq), rows.shape[1]))
    np.add.at(sums, inverse, rows)
    feats = sums / counts[:, None]
    coords = np.stack([uniq // (W * H), (uniq // H) % W, uniq % H], axis=1)
    return SparseVoxelGrid(dims, coords, feats, tuple(extent), tuple(resolution), dropped=dropped)


def compute_3dvi(grid: SparseVoxelGrid) -> float:
    """Fraction of grid cells that hold at least one point."""
    total = grid.dims[0] * grid.dims[1] * grid.dims[2]
    if total <= 0:
        raise VoxelizationError("grid has zero volume")
    return grid.n_active / total


def rotation_matrix(theta: float, alpha: float, phi: float) -> np.ndarray:
    """Rotation about x by theta, then y by alpha, then z by phi."""
    cx, sx = math.cos(theta), math.sin(theta)
    cy, sy = math.cos(alpha), math.sin(alpha)
    cz, sz = math.cos(phi), math.sin(phi)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment_rotate(
    pc: PointCloud,
    rng: Rng,
    ranges: Sequence[float] = ROTATION_RANGES,
    center: Optional[Sequence[float]] = None,
) -> PointCloud:
    angles = [rng.uniform(-r, r) if r > 0 else 0.0 for r in ranges]
    if not any(angles):
        return PointCloud(pc.points.copy(), pc.feature_names)
    rot = rotation_matrix(*angles)
    c = pc.xyz.mean(axis=0) if center is None else np.asarray(center, dtype=np.float64)
    return pc.with_xyz((pc.xyz - c) @ rot.T + c)


def augment_motion(pc: PointCloud, rng: Rng, sigma: float = 1.0) -> PointCloud:
    offset = rng.standard_normal(3) * sigma if sigma > 0 else np.zeros(3)
    return pc.with_xyz(pc.xyz + offset)


def augment_flip(pc: PointCloud, rng: Rng, center=(0.5, 0.5)) -> PointCloud:
    """Random element of the square's symmetry group acting on x, y about ``center``."""
    xy = pc.xyz[:, :2] - np.asarray(center, dtype=np.float64)
    if rng.uniform() < 0.5:
        xy = xy[:, ::-1]
    xy = xy * np.where(rng.uniform(size=2) < 0.5, -1.0, 1.0)
    xyz = pc.xyz.copy()
    xyz[:, :2] = xy + np.asarray(center, dtype=np.float64)
    return pc.with_xyz(xyz)


# -- file input --------------------------------------------------------------

_COLOR_PROPS = ("red", "green", "blue")


def _parse_row(tokens, path, lineno, ncols):
    if len(tokens) != ncols:
        raise PointCloudParseError(path, lineno, f"expected {ncols} columns, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise PointCloudParseError(path, lineno, f"not a number ({exc})") from None
    if not all(math.isfinite(v) for v in vals):
        raise PointCloudParseError(path, lineno, "non-finite value")
    return vals


def _load_ply(path: Path, lines: list[str]) -> PointCloud:
    if lines[1].split()[:2] != ["format", "ascii"]:
        raise PointCloudParseError(path, 2, "only ASCII PLY is supported")
    props: list[str] = []
    n_vertex = None
    in_vertex = False
    body = None
    for i, line in enumerate(lines[2:], start=3):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
            elif n_vertex is not None and int(tok[2]) > 0:
                raise PointCloudParseError(path, i, "only a single vertex element is supported")
        elif tok[0] == "property" and in_vertex:
            if tok[1] == "list":
                raise PointCloudParseError(path, i, "list properties are not supported")
            props.append(tok[-1])
        elif tok[0] == "end_header":
            body = i
            break
    if body is None or n_vertex is None:
        raise PointCloudParseError(path, len(lines), "missing end_header or vertex element")
    if props[:3] != ["x", "y", "z"]:
        raise PointCloudParseError(path, body, "vertex properties must start with x y z")
    rows = []
    for lineno in range(body + 1, body + 1 + n_vertex):
        if lineno > len(lines):
            raise PointCloudParseError(path, lineno, f"expected {n_vertex} vertices, file ended")
        rows.append(_parse_row(lines[lineno - 1].split(), path, lineno, len(props)))
    pts = np.asarray(rows, dtype=np.float64).reshape(n_vertex, len(props))
    names = tuple(props[3:])
    # 8-bit colors are rescaled to [0, 1]
    for j, name in enumerate(names):
        if name in _COLOR_PROPS and pts.shape[0] and pts[:, 3 + j].max() > 1.0:
            pts[:, 3 + j] /= 255.0
    return PointCloud(pts, names)


def load_point_cloud(path) -> PointCloud:
    """Read an ASCII PLY or whitespace-separated XYZ[+features] text file."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if lines and lines[0].strip() == "ply":
        return _load_ply(path, lines)
    rows = []
    ncols = None
    for lineno, line in enumerate(lines, start=1):
        tok = line.replace(",", " ").split()
        if not tok or tok[0].startswith("#"):
            continue
        if ncols is None:
            ncols = len(tok)
            if ncols < 3:
                raise PointCloudParseError(path, lineno, f"need at least 3 columns, got {ncols}")
        rows.append(_parse_row(tok, path, lineno, ncols))
    if ncols is None:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.asarray(rows, dtype=np.float64))
