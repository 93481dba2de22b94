"""Analytic ground-truth scenes.

Every quantity the neural field is trained on (images, feature maps, sparse
surface points) and every biomass label is generated here from closed-form
geometry, so training outcomes can be scored against exact answers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .numerics import Rng, make_rng
from .pointdata import PointCloud


class SceneError(ValueError):
    pass


@dataclass
class Primitive:
    """``size`` is the radius for spheres, the three semi-axes for ellipsoids
    and the (x, y) half-extent of the sampled patch for ground planes (whose
    height is ``center[2]``)."""

    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    feature: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("sphere", "ellipsoid", "plane"):
            raise SceneError(f"unknown primitive kind {self.kind!r}")
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in np.atleast_1d(self.size))

    @property
    def volume(self) -> float:
        if self.kind == "sphere":
            return 4.0 / 3.0 * math.pi * self.size[0] ** 3
        if self.kind == "ellipsoid":
            a, b, c = self.size
            return 4.0 / 3.0 * math.pi * a * b * c
        return 0.0

    @property
    def area(self) -> float:
        if self.kind == "sphere":
            return 4.0 * math.pi * self.size[0] ** 2
        if self.kind == "ellipsoid":
            # Knud Thomsen's approximation, relative error below 1.1%
            p = 1.6075
            a, b, c = self.size
            return 4.0 * math.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)
        return 4.0 * self.size[0] * self.size[1]

    def sdf(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size[0]
        if self.kind == "plane":
            return d[..., 2]
        # Scaled-space approximation |p/r| (|p/r| - 1) / |p/r^2|: exact on the
        # surface and on the axes, not a strict distance bound elsewhere.
        r = np.asarray(self.size)
        k0 = np.linalg.norm(d / r, axis=-1)
        k1 = np.linalg.norm(d / (r * r), axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = k0 * (k0 - 1.0) / k1
        return np.where(k1 > 0, out, -min(r))

    def sdf_grad(self, x: np.ndarray) -> np.ndarray:
        d = x - np.asarray(self.center)
        if self.kind == "plane":
            g = np.zeros_like(d)
            g[..., 2] = 1.0
            return g
        if self.kind == "sphere":
            n = np.linalg.norm(d, axis=-1, keepdims=True)
            return d / np.maximum(n, 1e-12)
        # central differences are adequate for the oracle's density
        h = 1e-6
        g = np.empty_like(d)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            g[..., k] = (self.sdf(x + e) - self.sdf(x - e)) / (2 * h)
        return g

    def sample_surface(self, n: int, rng: Rng) -> np.ndarray:
        c = np.asarray(self.center)
        if self.kind == "plane":
            hx, hy = self.size[:2]
            xy = rng.uniform(-1.0, 1.0, (n, 2)) * np.array([hx, hy])
            return np.column_stack([xy[:, 0] + c[0], xy[:, 1] + c[1], np.full(n, c[2])])
        if self.kind == "sphere":
            u = rng.standard_normal((n, 3))
            return c + self.size[0] * u / np.linalg.norm(u, axis=1, keepdims=True)
        # Uniform on the ellipsoid: map sphere samples and accept with
        # probability proportional to the local area stretch.
        r = np.asarray(self.size)
        out = []
        got = 0
        while got < n:
            u = rng.standard_normal((2 * (n - got) + 16, 3))
            u /= np.linalg.norm(u, axis=1, keepdims=True)
            stretch = np.linalg.norm(u * np.array([r[1] * r[2], r[0] * r[2], r[0] * r[1]]), axis=1)
            keep = rng.uniform(0.0, 1.0, len(u)) * (r.max() * np.sort(r)[1]) < stretch
            pts = u[keep] * r
            out.append(pts[: n - got])
            got += len(out[-1])
        return c + np.concatenate(out)


@dataclass
class Camera:
    """OpenCV convention: camera looks along +z, x right, y down."""

    c2w: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        rot = self.c2w[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-9) or not np.allclose(self.c2w[3], [0, 0, 0, 1]):
            raise SceneError("camera-to-world matrix is not a rigid transform")

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-pixel (origins, unit directions), row-major, each (H*W, 3)."""
        v, u = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        d = np.stack([(u + 0.5 - self.cx) / self.fx, (v + 0.5 - self.cy) / self.fy, np.ones_like(u, dtype=float)], -1)
        d = d.reshape(-1, 3) @ self.c2w[:3, :3].T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.c2w[:3, 3], d.shape).copy()
        return o, d


def look_at(eye: Sequence[float], target: Sequence[float] = (0, 0, 0), up: Sequence[float] = (0, 0, 1)) -> np.ndarray:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(z, up)) > 0.999:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, eye
    return m


def orbit_cameras(n: int, radius: float = 2.2, size: int = 64, fov_deg: float = 40.0, phase: float = 0.0,
                  z_range: tuple[float, float] = (-1.0, 1.0)) -> list[Camera]:
    """``n`` cameras on a Fibonacci lattice, all looking at the origin.

    Eye heights are spread evenly over ``radius * z_range``, so the default
    covers the whole sphere and a narrower range gives a spherical cap.
    """
    f = 0.5 * size / math.tan(math.radians(fov_deg) / 2)
    lo, hi = z_range
    cams = []
    golden = math.pi * (3.0 - math.sqrt(5.0))
    for i in range(n):
        z = hi - (hi - lo) * (i + 0.5) / n
        rho = math.sqrt(max(0.0, 1.0 - z * z))
        th = golden * i + phase
        eye = radius * np.array([rho * math.cos(th), rho * math.sin(th), z])
        cams.append(Camera(look_at(eye), f, f, size / 2, size / 2, size, size))
    return cams


# views from above, like an aerial survey: elevations of 45 to 85 degrees
AERIAL_Z = (math.sin(math.radians(45.0)), math.sin(math.radians(85.0)))


@dataclass
class SceneDef:
    primitives: list[Primitive]
    cameras: list[Camera] = field(default_factory=list)
    c_f: int = 8
    biomass_density: float = 2.0e4
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def analytic_sdf(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return analytic_sdf(self, x)


def analytic_sdf(scene: SceneDef, x) -> tuple[np.ndarray, np.ndarray]:
    """(signed distance, index of the nearest primitive) at each point."""
    x = np.asarray(x, dtype=np.float64)
    if not scene.primitives:
        shape = x.shape[:-1]
        return np.full(shape, np.inf), np.full(shape, -1, dtype=np.int64)
    all_d = np.stack([p.sdf(x) for p in scene.primitives], axis=-1)
    idx = np.argmin(all_d, axis=-1)
    return np.take_along_axis(all_d, idx[..., None], -1)[..., 0], idx


def analytic_sdf_grad(scene: SceneDef, x: np.ndarray) -> np.ndarray:
    _, idx = analytic_sdf(scene, x)
    grads = np.stack([p.sdf_grad(x) for p in scene.primitives], axis=-2)
    return np.take_along_axis(grads, idx[..., None, None], -2)[..., 0, :]


def sphere_trace(scene: SceneDef, origins, dirs, t_max: float = 10.0, max_steps: int = 512,
                 eps: float = 1e-6, safety: float = 0.9):
    """First-hit distance per ray; ``inf`` where nothing is hit."""
    n = len(origins)
    t = np.zeros(n)
    active = np.ones(n, dtype=bool)
    hit = np.zeros(n, dtype=bool)
    if not scene.primitives:
        return np.full(n, np.inf), np.full(n, -1)
    for _ in range(max_steps):
        if not active.any():
            break
        ia = np.nonzero(active)[0]
        d, _ = analytic_sdf(scene, origins[ia] + t[ia, None] * dirs[ia])
        done = d < eps
        hit[ia[done]] = True
        t[ia[~done]] += safety * d[~done]
        active[ia[done]] = False
        active[ia[~done & (t[ia] > t_max)]] = False
    # a ray still active after max_steps did not converge and counts as a miss
    t = np.where(hit, t, np.inf)
    _, idx = analytic_sdf(scene, origins + np.where(hit, t, 0.0)[:, None] * dirs)
    return t, np.where(hit, idx, -1)


def oracle_render(scene: SceneDef, camera, rng: Optional[Rng] = None):
    """Exact flat-shaded (image, feature map, depth map) for one camera.

    ``camera`` is an index into ``scene.cameras`` or a :class:`Camera`.
    ``rng`` is accepted for interface symmetry; rendering is deterministic.
    """
    cam = scene.cameras[camera] if isinstance(camera, (int, np.integer)) else camera
    o, d = cam.rays()
    depth, idx = sphere_trace(scene, o, d)
    colors = np.array([p.color for p in scene.primitives] + [scene.background], dtype=np.float64)
    feats = np.array([_pad(p.feature, scene.c_f) for p in scene.primitives] + [np.zeros(scene.c_f)])
    img = colors[idx].reshape(cam.height, cam.width, 3)
    fmap = feats[idx].reshape(cam.height, cam.width, scene.c_f)
    return img, fmap, depth.reshape(cam.height, cam.width)


def _pad(v, n):
    v = np.asarray(v, dtype=np.float64)
    return np.concatenate([v, np.zeros(n - len(v))])[:n]


def sample_sparse_points(scene: SceneDef, n: int, rng: Rng, sigma: float = 0.002) -> PointCloud:
    """``n`` surface points, area-weighted across primitives, with optional noise."""
    if n < 1:
        raise SceneError("n must be >= 1")
    if not scene.primitives:
        raise SceneError("cannot sample points from an empty scene")
    areas = np.array([p.area for p in scene.primitives])
    counts = rng.multinomial(n, areas / areas.sum())
    pts = np.concatenate([p.sample_surface(int(k), rng) for p, k in zip(scene.primitives, counts) if k > 0])
    if sigma > 0:
        pts = pts + rng.standard_normal(pts.shape) * sigma
    return PointCloud(pts)


def surface_points(scene: SceneDef, n: int, seed: int = 0) -> np.ndarray:
    """Noise-free surface samples restricted to the unit bounding sphere."""
    pts = sample_sparse_points(scene, n, make_rng(seed), sigma=0.0).xyz
    return pts[np.linalg.norm(pts, axis=1) <= 1.0]


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets."""
    if len(a) == 0 or len(b) == 0:
        return float("inf")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return 0.5 * (float(da.mean()) + float(db.mean()))


# -- default scenes --------------------------------------------------------


def default_scene(seed: int = 0, n_views: int = 20, size: int = 64, c_f: int = 8) -> SceneDef:
    """Three objects (two spheres, one ellipsoid) with distinct colors and features."""
    rng = make_rng(seed)
    feats = rng.standard_normal((3, c_f))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    prims = [
        Primitive("sphere", (-0.3, -0.15, 0.0), (0.22,), (0.85, 0.2, 0.15), tuple(feats[0])),
        Primitive("sphere", (0.3, -0.1, 0.05), (0.18,), (0.2, 0.8, 0.25), tuple(feats[1])),
        Primitive("ellipsoid", (0.0, 0.3, -0.05), (0.25, 0.12, 0.15), (0.2, 0.3, 0.9), tuple(feats[2])),
    ]
    return SceneDef(prims, orbit_cameras(n_views, size=size, z_range=AERIAL_Z), c_f=c_f)


def heldout_cameras(n: int = 2, size: int = 64) -> list[Camera]:
    return orbit_cameras(n, size=size, phase=1.0, z_range=AERIAL_Z)


# -- biomass plots -----------------------------------------------------------


@dataclass
class PlotConfig:
    n_plots: int = 200
    plant_range: tuple[int, int] = (1, 8)
    plot_size: float = 1.0
    ground_height: float = 0.02
    radius_range: tuple[float, float] = (0.06, 0.16)
    height_ratio: tuple[float, float] = (0.8, 1.6)
    point_density: float = 3000.0  # points per m^2 of surface
    biomass_density: float = 2.0e4  # grams per m^3
    label_noise: float = 0.02
    sfm_sigma: float = 0.0


def make_plot_scene(cfg: PlotConfig, n_plants: int, rng: Rng, scale: float = 1.0) -> SceneDef:
    half = cfg.plot_size / 2
    prims = [Primitive("plane", (half, half, cfg.ground_height), (half, half), (0.45, 0.35, 0.25))]
    lo, hi = cfg.radius_range
    placed: list[tuple[float, float, float]] = []
    for _ in range(n_plants):
        r = rng.uniform(lo, hi)
        a = r * rng.uniform(0.8, 1.25) * scale
        b = r * rng.uniform(0.8, 1.25) * scale
        c = r * rng.uniform(*cfg.height_ratio) * scale
        margin = max(a, b)
        # plants must not overlap, or the label would count shared volume twice
        for _ in range(50):
            x = rng.uniform(margin, cfg.plot_size - margin) if margin < half else half
            y = rng.uniform(margin, cfg.plot_size - margin) if margin < half else half
            if all(math.hypot(x - px, y - py) > margin + pr for px, py, pr in placed):
                break
        else:
            continue
        placed.append((x, y, margin))
        prims.append(Primitive("ellipsoid", (x, y, cfg.ground_height + c), (a, b, c), (0.2, 0.6, 0.2)))
    return SceneDef(prims, biomass_density=cfg.biomass_density)


def noiseless_label(scene: SceneDef) -> float:
    return scene.biomass_density * sum(p.volume for p in scene.primitives)


def make_biomass_dataset(cfg: PlotConfig, rng: Rng) -> list[tuple[PointCloud, float]]:
    """Synthetic plots of ellipsoid plants on a ground patch with biomass labels.

    Plots whose label would not exceed 1 g are regenerated.
    """
    if cfg.n_plots < 1:
        raise SceneError("plot count must be >= 1")
    out = []
    attempts = 0
    while len(out) < cfg.n_plots:
        attempts += 1
        if attempts > 100 * cfg.n_plots:
            raise SceneError("could not generate plots with labels above 1 g; check plant_range")
        n_plants = int(rng.integers(cfg.plant_range[0], cfg.plant_range[1] + 1))
        scene = make_plot_scene(cfg, n_plants, rng)
        label = noiseless_label(scene) * (1.0 + cfg.label_noise * rng.standard_normal())
        if label <= 1.0 + 1e-6:
            continue
        area = sum(p.area for p in scene.primitives)
        n_pts = max(1, int(round(cfg.point_density * area)))
        pc = sample_sparse_points(scene, n_pts, rng, sigma=cfg.sfm_sigma)
        out.append((pc, float(label)))
    return out
