"""Neural feature field: SDF geometry, radiance and semantic feature MLPs,
SDF-derived ray weights, volume rendering and surface/feature extraction."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .numerics import Rng, encoded_width, make_rng, pos_encode, resolve_dtype
from .pointdata import PointCloud
from .synthscene import SceneDef, analytic_sdf


class FieldNumericError(FloatingPointError):
    pass


@dataclass
class FieldConfig:
    hidden: int = 256
    geo_layers: int = 8
    skip_layer: int = 4
    color_layers: int = 4
    feature_layers: int = 2
    pos_freq: int = 6
    dir_freq: int = 4
    c_f: int = 8
    init_radius: float = 0.5
    init_variance: float = 0.3
    softplus_beta: float = 100.0


def _normal(rng: Rng, shape, std: float) -> torch.Tensor:
    return torch.from_numpy(rng.standard_normal(shape) * std)


class NeuralFeatureField(nn.Module):
    """Geometry, color and feature MLPs plus the learnable ray-weight sharpness.

    The geometry MLP is initialised so its zero set is approximately a sphere
    of radius ``init_radius`` (sdf < 0 inside); its output carries the signed
    distance in channel 0 and a ``hidden``-wide geometry feature after it.
    """

    def __init__(self, config: FieldConfig = FieldConfig(), seed: int = 0, dtype="float32"):
        super().__init__()
        self.config = cfg = config
        dtype = resolve_dtype(dtype)
        rng = make_rng(seed)
        d_pos = encoded_width(3, cfg.pos_freq)
        d_dir = encoded_width(3, cfg.dir_freq)
        self.d_pos = d_pos
        if cfg.hidden <= d_pos:
            raise ValueError(f"hidden width {cfg.hidden} must exceed the encoded input width {d_pos}")

        dims = [d_pos] + [cfg.hidden] * cfg.geo_layers + [1 + cfg.hidden]
        self.geo = nn.ModuleList()
        n_lin = len(dims) - 1
        for l in range(n_lin):
            out_dim = dims[l + 1] - d_pos if l + 1 == cfg.skip_layer else dims[l + 1]
            lin = nn.Linear(dims[l], out_dim, dtype=dtype)
            with torch.no_grad():
                if l == n_lin - 1:
                    lin.weight.copy_(math.sqrt(math.pi) / math.sqrt(dims[l]) + _normal(rng, lin.weight.shape, 1e-4))
                    lin.bias.fill_(-cfg.init_radius)
                else:
                    w = _normal(rng, lin.weight.shape, math.sqrt(2.0) / math.sqrt(out_dim))
                    if l == 0:
                        w[:, 3:] = 0.0
                    elif l == cfg.skip_layer:
                        w[:, -(d_pos - 3):] = 0.0
                    lin.weight.copy_(w)
                    lin.bias.zero_()
            self.geo.append(lin)

        c_in = d_pos + d_dir + cfg.hidden
        self.color_net = self._mlp(rng, c_in, cfg.hidden, cfg.color_layers, 3, dtype)
        self.feature_net = self._mlp(rng, d_pos, cfg.hidden, cfg.feature_layers, cfg.c_f, dtype)
        self.variance = nn.Parameter(torch.tensor(cfg.init_variance, dtype=dtype))

    @staticmethod
    def _mlp(rng: Rng, d_in: int, hidden: int, layers: int, d_out: int, dtype) -> nn.ModuleList:
        dims = [d_in] + [hidden] * layers + [d_out]
        mods = nn.ModuleList()
        for a, b in zip(dims[:-1], dims[1:]):
            lin = nn.Linear(a, b, dtype=dtype)
            bound = 1.0 / math.sqrt(a)
            with torch.no_grad():
                lin.weight.copy_(torch.from_numpy(rng.uniform(-bound, bound, (b, a))))
                lin.bias.copy_(torch.from_numpy(rng.uniform(-bound, bound, b)))
            mods.append(lin)
        return mods

    @staticmethod
    def _run(mlp: nn.ModuleList, h: torch.Tensor) -> torch.Tensor:
        for lin in mlp[:-1]:
            h = torch.relu(lin(h))
        return mlp[-1](h)

    @property
    def dtype(self) -> torch.dtype:
        return self.variance.dtype

    @property
    def s_inv(self) -> torch.Tensor:
        """Inverse standard deviation of the logistic density, always > 0."""
        return torch.exp(10.0 * self.variance)

    def geometry(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        enc = pos_encode(x, self.config.pos_freq)
        h = enc
        beta = self.config.softplus_beta
        for l, lin in enumerate(self.geo):
            if l == self.config.skip_layer:
                h = torch.cat([h, enc], dim=-1) / math.sqrt(2.0)
            h = lin(h)
            if l < len(self.geo) - 1:
                h = F.softplus(h, beta=beta)
        return h[..., 0], h[..., 1:]

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.geometry(x)[0]

    def color(self, x: torch.Tensor, v: torch.Tensor, geo_feat: torch.Tensor) -> torch.Tensor:
        h = torch.cat([pos_encode(x, self.config.pos_freq), pos_encode(v, self.config.dir_freq), geo_feat], -1)
        return torch.sigmoid(self._run(self.color_net, h))

    def feature(self, x: torch.Tensor) -> torch.Tensor:
        # no viewing direction enters this branch
        return self._run(self.feature_net, pos_encode(x, self.config.pos_freq))


def eval_fields(x, v, params: NeuralFeatureField):
    """(sdf, rgb, feature) at points ``x`` seen along unit directions ``v``."""
    x = torch.as_tensor(x, dtype=params.dtype)
    v = torch.as_tensor(v, dtype=params.dtype).expand_as(x)
    sdf, geo = params.geometry(x)
    rgb = params.color(x, v, geo)
    feat = params.feature(x)
    for name, t in (("sdf", sdf), ("color", rgb), ("feature", feat)):
        if not torch.isfinite(t).all():
            raise FieldNumericError(f"non-finite {name} output")
    return sdf, rgb, feat


class AnalyticField:
    """A :class:`SceneDef` exposed through the same interface as the neural
    field: exact SDF, flat per-primitive color and feature."""

    def __init__(self, scene: SceneDef, s_inv: float, dtype=torch.float64):
        self.scene = scene
        self._s_inv = float(s_inv)
        self.dtype = resolve_dtype(dtype)
        self._colors = torch.tensor([p.color for p in scene.primitives], dtype=self.dtype)
        feats = np.zeros((len(scene.primitives), scene.c_f))
        for i, p in enumerate(scene.primitives):
            feats[i, : len(p.feature)] = p.feature[: scene.c_f]
        self._feats = torch.from_numpy(feats).to(self.dtype)
        self.config = FieldConfig(c_f=scene.c_f)

    @property
    def s_inv(self) -> torch.Tensor:
        return torch.tensor(self._s_inv, dtype=self.dtype)

    def _query(self, x: torch.Tensor):
        d, idx = analytic_sdf(self.scene, x.detach().cpu().numpy().astype(np.float64))
        return torch.from_numpy(d).to(self.dtype), torch.from_numpy(idx)

    def geometry(self, x):
        d, idx = self._query(x)
        return d, idx

    def sdf(self, x):
        return self._query(x)[0]

    def color(self, x, v, geo_feat):
        return self._colors[geo_feat]

    def feature(self, x):
        return self._feats[self._query(x)[1]]


# -- rendering -------------------------------------------------------------


def neus_weights(sdf: torch.Tensor, s_inv) -> torch.Tensor:
    """Discrete occlusion-aware weights from SDF samples along rays.

    For consecutive samples ``alpha_i = max((Phi(s f_i) - Phi(s f_{i+1})) /
    Phi(s f_i), 0)`` with Phi the logistic sigmoid, evaluated in log space so
    deep-inside samples do not underflow, and ``w_i = alpha_i prod_{j<i}(1 -
    alpha_j)``. Input (..., M) gives output (..., M - 1).
    """
    s = torch.as_tensor(s_inv, dtype=sdf.dtype)
    logc = F.logsigmoid(sdf * s)
    log_keep = torch.clamp(logc[..., 1:] - logc[..., :-1], max=0.0)  # log(1 - alpha_i)
    alpha = -torch.expm1(log_keep)
    log_trans = torch.cumsum(log_keep, dim=-1) - log_keep
    return alpha * torch.exp(log_trans)


def unit_sphere_bounds(o: torch.Tensor, d: torch.Tensor, radius: float = 1.0):
    """Entry/exit distances of rays through the bounding sphere (near == far on a miss)."""
    b = (o * d).sum(-1)
    c = (o * o).sum(-1) - radius * radius
    disc = b * b - c
    root = torch.sqrt(torch.clamp(disc, min=0.0))
    near = torch.clamp(-b - root, min=0.0)
    far = torch.clamp(-b + root, min=0.0)
    far = torch.where(disc > 0, far, near)
    return near, far


def sample_pdf(bins: torch.Tensor, weights: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Inverse-CDF samples over intervals ``bins[i]..bins[i+1]`` with mass ``weights[i]``."""
    w = weights + 1e-5
    pdf = w / w.sum(-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, -1)], -1)
    idx = torch.searchsorted(cdf.contiguous(), u.contiguous(), right=True)
    below = torch.clamp(idx - 1, min=0)
    above = torch.clamp(idx, max=cdf.shape[-1] - 1)
    cdf_b, cdf_a = torch.gather(cdf, -1, below), torch.gather(cdf, -1, above)
    bin_b, bin_a = torch.gather(bins, -1, below), torch.gather(bins, -1, above)
    denom = torch.where(cdf_a - cdf_b < 1e-5, torch.ones_like(cdf_a), cdf_a - cdf_b)
    return bin_b + (u - cdf_b) / denom * (bin_a - bin_b)


def _uniforms(rng: Optional[Rng], shape, dtype) -> torch.Tensor:
    if rng is None:
        return torch.full(shape, 0.5, dtype=dtype)
    return torch.from_numpy(rng.uniform(0.0, 1.0, shape)).to(dtype)


def render_rays(
    field,
    origins,
    dirs,
    n_coarse: int = 64,
    n_importance: int = 64,
    rng: Optional[Rng] = None,
    background=(0.0, 0.0, 0.0),
    near=None,
    far=None,
) -> dict:
    """Volume-render color and feature for a batch of rays.

    Coarse samples are stratified over [near, far] (jittered with ``rng``, at
    cell centres when ``rng`` is None); one importance round draws
    ``n_importance`` more from the coarse weights. Color and feature are
    integrated with the same weight tensor, returned as ``weights``.
    """
    if n_coarse < 8:
        raise ValueError("n_coarse must be >= 8")
    dtype = field.dtype
    o = torch.as_tensor(origins, dtype=dtype).reshape(-1, 3)
    d = torch.as_tensor(dirs, dtype=dtype).reshape(-1, 3)
    R = o.shape[0]
    if near is None or far is None:
        near, far = unit_sphere_bounds(o, d)
    else:
        near = torch.as_tensor(near, dtype=dtype).expand(R)
        far = torch.as_tensor(far, dtype=dtype).expand(R)
    span = (far - near)[:, None]
    grid = torch.arange(n_coarse, dtype=dtype)[None, :]
    t = near[:, None] + span * (grid + _uniforms(rng, (R, n_coarse), dtype)) / n_coarse
    s_inv = field.s_inv
    if n_importance > 0:
        with torch.no_grad():
            sdf_c = field.sdf(o[:, None, :] + t[..., None] * d[:, None, :])
            w_c = neus_weights(sdf_c, s_inv.detach())
            u = _uniforms(rng, (R, n_importance), dtype)
            if rng is None:
                u = (torch.arange(n_importance, dtype=dtype)[None, :] + 0.5).expand(R, -1) / n_importance
            t_fine = sample_pdf(t, w_c, u)
        t, _ = torch.sort(torch.cat([t, t_fine], -1), -1)
    pts = o[:, None, :] + t[..., None] * d[:, None, :]
    sdf, geo = field.geometry(pts)
    weights = neus_weights(sdf, s_inv)
    x_i = pts[:, :-1]
    geo_i = geo[:, :-1]
    view = d[:, None, :].expand_as(x_i)
    sample_color = field.color(x_i, view, geo_i)
    sample_feature = field.feature(x_i)
    wsum = weights.sum(-1)
    bg = torch.as_tensor(background, dtype=dtype)
    color = (weights[..., None] * sample_color).sum(1) + (1.0 - wsum)[:, None] * bg
    feature = (weights[..., None] * sample_feature).sum(1)
    return {
        "color": color,
        "feature": feature,
        "weight_sum": wsum,
        "weights": weights,
        "t": t,
        "sdf": sdf,
        "sample_color": sample_color,
        "sample_feature": sample_feature,
    }


@dataclass
class Ray:
    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    t_near: float
    t_far: float

    def __post_init__(self):
        n = math.sqrt(sum(c * c for c in self.direction))
        if abs(n - 1.0) > 1e-9:
            raise ValueError("ray direction must be a unit vector")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be below t_far")


def render_ray(ray: Ray, params, n_coarse: int = 64, n_importance: int = 64, rng: Optional[Rng] = None,
               background=(0.0, 0.0, 0.0)):
    """(color, feature, weight_sum) of one ray."""
    out = render_rays(params, [ray.origin], [ray.direction], n_coarse, n_importance, rng, background,
                      near=ray.t_near, far=ray.t_far)
    return out["color"][0], out["feature"][0], out["weight_sum"][0]


def render_image(field, camera, n_coarse=64, n_importance=64, background=(0.0, 0.0, 0.0), chunk=1024) -> dict:
    """Deterministic render of a full camera view: rgb (H, W, 3) and feature (H, W, c_f)."""
    o, d = camera.rays()
    colors, feats = [], []
    with torch.no_grad():
        for i in range(0, len(o), chunk):
            out = render_rays(field, o[i:i + chunk], d[i:i + chunk], n_coarse, n_importance, None, background)
            colors.append(out["color"])
            feats.append(out["feature"])
    H, W = camera.height, camera.width
    return {
        "rgb": torch.cat(colors).reshape(H, W, 3).double().numpy(),
        "feature": torch.cat(feats).reshape(H, W, -1).double().numpy(),
    }


# -- losses ----------------------------------------------------------------


@dataclass
class LossConfig:
    alpha: float = 0.002
    use_geometry: bool = True
    eikonal: bool = True
    eikonal_weight: float = 0.1
    n_eikonal: int = 256


def combine_losses(color, target_color, feature, target_feature, sparse_sdf, alpha=0.002, eikonal=None) -> dict:
    """Total = L_c + L_g + alpha * L_f (+ eikonal term when given).

    L_c and L_f are per-ray L1 norms summed over rays; L_g sums |sdf| over the
    sparse points (pass ``None`` to drop it).
    """
    l_c = (color - target_color).abs().sum()
    l_f = (feature - target_feature).abs().sum()
    zero = torch.zeros((), dtype=l_c.dtype)
    l_g = sparse_sdf.abs().sum() if sparse_sdf is not None else zero
    total = l_c + l_g + alpha * l_f
    l_eik = eikonal if eikonal is not None else zero
    total = total + l_eik
    return {"total": total, "color": l_c, "feature": l_f, "geometry": l_g, "eikonal": l_eik}


def eikonal_term(field, points: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the SDF gradient norm from one."""
    with torch.enable_grad():
        x = points.detach().clone().requires_grad_(True)
        sdf = field.sdf(x)
        (g,) = torch.autograd.grad(sdf.sum(), x, create_graph=torch.is_grad_enabled() or sdf.requires_grad)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


def random_ball_points(rng: Rng, n: int, radius: float = 1.0) -> np.ndarray:
    u = rng.standard_normal((n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return u * radius * rng.uniform(0.0, 1.0, (n, 1)) ** (1.0 / 3.0)


def neff_loss(field, batch: dict, sparse_points, config: LossConfig = LossConfig(), rng: Optional[Rng] = None,
              n_coarse: int = 64, n_importance: int = 64, background=(0.0, 0.0, 0.0)) -> dict:
    """Render ``batch`` (keys origins, dirs, colors, features) and score it.

    The eikonal regulariser, when enabled, is evaluated on random points in
    the bounding ball and scaled by the ray count so it keeps a fixed balance
    against the summed color loss.
    """
    out = render_rays(field, batch["origins"], batch["dirs"], n_coarse, n_importance, rng, background)
    dtype = field.dtype
    tc = torch.as_tensor(batch["colors"], dtype=dtype)
    tf = torch.as_tensor(batch["features"], dtype=dtype)
    sparse_sdf = None
    if config.use_geometry and sparse_points is not None and len(sparse_points):
        sparse_sdf = field.sdf(torch.as_tensor(np.asarray(sparse_points), dtype=dtype))
    eik = None
    if config.eikonal:
        gen = rng if rng is not None else make_rng(0)
        pts = torch.as_tensor(random_ball_points(gen, config.n_eikonal), dtype=dtype)
        eik = config.eikonal_weight * len(tc) * eikonal_term(field, pts)
    terms = combine_losses(out["color"], tc, out["feature"], tf, sparse_sdf, config.alpha, eik)
    terms["render"] = out
    return terms


# -- extraction ------------------------------------------------------------


def sdf_lattice(field, grid_res: int, bound: float = 1.0, chunk: int = 65536) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-bound, bound, grid_res)
    xx, yy, zz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([xx, yy, zz], -1).reshape(-1, 3)
    vals = []
    with torch.no_grad():
        for i in range(0, len(pts), chunk):
            vals.append(field.sdf(torch.as_tensor(pts[i:i + chunk], dtype=field.dtype)).double().numpy())
    return axis, np.concatenate(vals).reshape(grid_res, grid_res, grid_res)


def extract_surface(params, grid_res: int, bound: float = 1.0) -> PointCloud:
    """Zero crossings of the SDF along lattice edges, linearly interpolated.

    The lattice spans [-bound, bound]^3 with ``grid_res`` nodes per axis;
    crossings outside the bounding sphere of radius ``bound`` are discarded.
    """
    if grid_res < 8:
        raise ValueError("grid_res must be >= 8")
    axis, vals = sdf_lattice(params, grid_res, bound)
    step = axis[1] - axis[0]
    pts = []
    for ax in range(3):
        a = np.take(vals, np.arange(grid_res - 1), axis=ax)
        b = np.take(vals, np.arange(1, grid_res), axis=ax)
        cross = (a > 0) != (b > 0)
        idx = np.argwhere(cross)
        if not len(idx):
            continue
        fa, fb = a[cross], b[cross]
        frac = fa / (fa - fb)
        p = axis[idx].astype(np.float64)
        p[:, ax] += frac * step
        pts.append(p)
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    pts = np.concatenate(pts)
    pts = pts[np.linalg.norm(pts, axis=1) <= bound]
    order = np.lexsort(pts.T[::-1])
    return PointCloud(pts[order])


def extract_3d_features(params, grid_res: int, bound: float = 1.0) -> PointCloud:
    """Surface points carrying the feature field's value at each point."""
    surf = extract_surface(params, grid_res, bound)
    c_f = params.config.c_f
    names = tuple(f"f_{i}" for i in range(c_f))
    if surf.n == 0:
        return PointCloud(np.zeros((0, 3 + c_f)), names)
    with torch.no_grad():
        feats = params.feature(torch.as_tensor(surf.xyz, dtype=params.dtype)).double().numpy()
    return PointCloud(np.hstack([surf.xyz, feats]), names)
