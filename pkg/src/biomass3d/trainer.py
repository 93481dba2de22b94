"""Training loops, evaluation metrics and checkpoint files."""
from __future__ import annotations

import copy
import functools
import hashlib
import io
import json
import logging
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .biohead import BiomassHead, HeadConfig, biomass_loss, check_targets
from .neff import FieldConfig, LossConfig, NeuralFeatureField, neff_loss
from .numerics import make_rng, resolve_dtype
from .pointdata import (PointCloud, VoxelizationError, augment_flip, augment_motion, augment_rotate, grid_dims,
                        voxelize)
from .sparse3d import BackboneConfig, SparseBackbone, batch_grids

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; ``state`` holds the last good parameters."""

    def __init__(self, iteration: int, state: dict, history: list):
        super().__init__(f"non-finite loss at iteration {iteration}")
        self.iteration = iteration
        self.state = state
        self.history = history


class MetricDomainError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


# -- metrics -----------------------------------------------------------------


@dataclass
class Metrics:
    mae: float
    mare: float
    rmse: float
    n: int


def evaluate(preds: Sequence[float], targets: Sequence[float], with_mare: bool = True) -> Metrics:
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise MetricDomainError("preds and targets must have equal nonzero length")
    err = np.abs(t - p)
    mare = float("nan")
    if with_mare:
        if np.any(t <= 0):
            raise MetricDomainError("MARE needs strictly positive targets")
        mare = float(np.mean(err / t))
    return Metrics(float(err.mean()), mare, float(np.sqrt(np.mean(err ** 2))), int(p.size))


def relative_improvement(p1: float, p2: float) -> float:
    """|p1 - p2| / p2."""
    if p2 == 0:
        raise MetricDomainError("relative improvement is undefined for p2 = 0")
    return abs(p1 - p2) / p2


def fit_through_origin(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope k of y ~ k x (one parameter, no intercept)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(x @ y / (x @ x))


# -- schedules ---------------------------------------------------------------


def lr_factor(it: int, total: int, warmup: int, floor: float = 0.05) -> float:
    """Linear warm-up followed by cosine decay to ``floor``."""
    if warmup > 0 and it < warmup:
        return (it + 1) / warmup
    progress = (it - warmup) / max(1, total - warmup)
    return floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))


def _adam(params, lr):
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


def _flushing_denormals(fn):
    """Run ``fn`` with subnormal floats flushed to zero, then restore IEEE behaviour.

    float32 subnormals in near-empty ray weights slow CPU steps about threefold.
    """

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        torch.set_flush_denormal(True)
        try:
            return fn(*args, **kwargs)
        finally:
            torch.set_flush_denormal(False)

    return wrapper


def _snapshot(model: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


# -- NeFF --------------------------------------------------------------------


@dataclass
class NeffData:
    """All training rays of a scene with their color/feature targets."""

    origins: np.ndarray
    dirs: np.ndarray
    colors: np.ndarray
    features: np.ndarray
    sparse_points: np.ndarray
    n_views: int
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @classmethod
    def from_views(cls, cameras, images, feature_maps, sparse_points, background=(0.0, 0.0, 0.0)) -> "NeffData":
        o, d, c, f = [], [], [], []
        for cam, img, fm in zip(cameras, images, feature_maps):
            ro, rd = cam.rays()
            o.append(ro)
            d.append(rd)
            c.append(np.asarray(img, dtype=np.float64).reshape(-1, 3))
            f.append(np.asarray(fm, dtype=np.float64).reshape(len(ro), -1))
        return cls(np.concatenate(o), np.concatenate(d), np.concatenate(c), np.concatenate(f),
                   np.asarray(sparse_points, dtype=np.float64).reshape(-1, 3), len(cameras), tuple(background))

    @classmethod
    def from_scene(cls, scene, n_sparse: int = 2000, seed: int = 0, sfm_sigma: float = 0.002) -> "NeffData":
        from .synthscene import oracle_render, sample_sparse_points

        views = [oracle_render(scene, i) for i in range(len(scene.cameras))]
        pts = sample_sparse_points(scene, n_sparse, make_rng(seed), sigma=sfm_sigma).xyz
        return cls.from_views(scene.cameras, [v[0] for v in views], [v[1] for v in views], pts, scene.background)


@dataclass
class NeffTrainConfig:
    iterations: int = 2000
    lr: float = 5e-4
    warmup: int = 500
    batch_rays: int = 128
    sparse_batch: int = 128
    n_coarse: int = 32
    n_importance: int = 32
    seed: int = 0
    log_every: int = 100
    precision: str = "float32"
    model: FieldConfig = field(default_factory=lambda: FieldConfig(hidden=64))
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = FieldConfig(**self.model)
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


NEFF_HISTORY_COLUMNS = ("iteration", "total", "color", "feature", "geometry", "eikonal")


@_flushing_denormals
def train_neff(data: NeffData, config: NeffTrainConfig, field: Optional[NeuralFeatureField] = None):
    """Adam on random ray batches; returns (field, history rows).

    History rows are dicts keyed by ``NEFF_HISTORY_COLUMNS`` recorded every
    ``log_every`` iterations and at the last one.
    """
    if data.n_views < 2:
        raise ValueError("NeFF training needs at least two views")
    if field is None:
        field = NeuralFeatureField(config.model, seed=config.seed, dtype=config.precision)
    rng = make_rng(config.seed + 1)
    opt = _adam(field.parameters(), config.lr)
    history: list[dict] = []
    last_good = _snapshot(field)
    n_rays = len(data.origins)
    n_sparse = len(data.sparse_points)
    for it in range(config.iterations):
        for g in opt.param_groups:
            g["lr"] = config.lr * lr_factor(it, config.iterations, config.warmup)
        idx = rng.integers(0, n_rays, config.batch_rays)
        batch = {"origins": data.origins[idx], "dirs": data.dirs[idx],
                 "colors": data.colors[idx], "features": data.features[idx]}
        sparse = data.sparse_points[rng.integers(0, n_sparse, config.sparse_batch)] if n_sparse else None
        terms = neff_loss(field, batch, sparse, config.loss, rng, config.n_coarse, config.n_importance,
                          data.background)
        total = terms["total"]
        if not torch.isfinite(total):
            field.load_state_dict(last_good)
            raise TrainingDiverged(it, last_good, history)
        opt.zero_grad()
        total.backward()
        opt.step()
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iteration": it, **{k: float(terms[k].detach()) for k in NEFF_HISTORY_COLUMNS[1:]}})
            last_good = _snapshot(field)
            log.info("neff it %d total %.4f color %.4f geometry %.4f", it, history[-1]["total"],
                     history[-1]["color"], history[-1]["geometry"])
    return field, history


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    return float("inf") if mse == 0 else -10.0 * math.log10(mse)


# -- BioNet ------------------------------------------------------------------


@dataclass
class BionetConfig:
    extent: tuple[float, float, float] = (1.25, 1.25, 0.5)
    resolution: tuple[float, float, float] = (1.25 / 32, 1.25 / 32, 0.5 / 16)
    origin: tuple[float, float, float] = (-0.125, -0.125, 0.0)
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    token_channels: int = 128
    n_encoders: int = 5
    n_heads: int = 4
    hidden: tuple[int, int] = (512, 256)
    output_scale: float = 1.0

    def __post_init__(self):
        self.extent = tuple(self.extent)
        self.origin = tuple(self.origin)
        self.resolution = tuple(self.resolution)
        self.channels = tuple(self.channels)
        self.hidden = tuple(self.hidden)

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.in_channels, self.channels, self.token_channels)

    def head_config(self) -> HeadConfig:
        grid = self.backbone_config().output_dims(grid_dims(self.extent, self.resolution))
        return HeadConfig(self.token_channels, grid, self.n_encoders, self.n_heads, 4, self.hidden, self.output_scale)


class BioNet(nn.Module):
    """Sparse backbone followed by the transformer head."""

    def __init__(self, config: BionetConfig, seed: int = 0, dtype="float64"):
        super().__init__()
        self.config = config
        self.backbone = SparseBackbone(config.backbone_config(), seed=seed, dtype=dtype)
        self.head = BiomassHead(config.head_config(), seed=seed + 1, dtype=dtype)

    @property
    def dtype(self):
        return self.head.pos_embed.dtype

    def voxelize(self, pc: PointCloud):
        return voxelize(pc, self.config.extent, self.config.resolution, self.config.origin)

    def forward(self, grids) -> torch.Tensor:
        return self.head(self.backbone(batch_grids(grids)))

    def predict(self, clouds: Sequence[PointCloud], batch: int = 8) -> np.ndarray:
        out = []
        with torch.no_grad():
            for i in range(0, len(clouds), batch):
                grids = [self.voxelize(pc) for pc in clouds[i:i + batch]]
                out.append(self(grids).double().numpy())
        return np.concatenate(out) if out else np.zeros(0)


@dataclass
class BionetTrainConfig:
    """Training settings; the defaults are a single-core preset for 1 m plots.

    Tilting a 1 m plot by up to 10 degrees pushes ground points out of the
    grid, so rotation is off here; the label-preserving flips stand in for it.
    """

    iterations: int = 2000
    lr: float = 5e-4
    warmup: int = 100
    batch_size: int = 4
    seed: int = 0
    augment_rotate: bool = False
    augment_flip: bool = True
    augment_motion: bool = True
    motion_sigma: float = 0.02
    reduction: str = "sum"
    auto_scale: bool = True
    log_every: int = 50
    precision: str = "float32"
    model: BionetConfig = field(default_factory=lambda: BionetConfig(channels=(8, 16, 32, 64), token_channels=64))

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = BionetConfig(**self.model)
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def _augment(pc: PointCloud, cfg: BionetTrainConfig, rng) -> PointCloud:
    if cfg.augment_flip:
        m = cfg.model
        pc = augment_flip(pc, rng, (m.origin[0] + m.extent[0] / 2, m.origin[1] + m.extent[1] / 2))
    if cfg.augment_rotate:
        pc = augment_rotate(pc, rng)
    if cfg.augment_motion:
        pc = augment_motion(pc, rng, cfg.motion_sigma)
    return pc


@_flushing_denormals
def train_bionet(dataset: Sequence[tuple[PointCloud, float]], config: BionetTrainConfig,
                 model: Optional[BioNet] = None):
    """Jointly train backbone and head on (cloud, grams) pairs; returns (model, history)."""
    if len(dataset) < 2:
        raise ValueError("BioNet training needs at least two plots")
    targets = np.array([m for _, m in dataset], dtype=np.float64)
    check_targets(targets)
    if model is None:
        mcfg = copy.deepcopy(config.model)
        if config.auto_scale:
            mcfg.output_scale = float(np.mean(targets))
        model = BioNet(mcfg, seed=config.seed, dtype=config.precision)
    rng = make_rng(config.seed + 1)
    opt = _adam(model.parameters(), config.lr)
    augmenting = config.augment_rotate or config.augment_flip or config.augment_motion
    cached = None if augmenting else [model.voxelize(pc) for pc, _ in dataset]
    history: list[dict] = []
    last_good = _snapshot(model)
    for it in range(config.iterations):
        for g in opt.param_groups:
            g["lr"] = config.lr * lr_factor(it, config.iterations, config.warmup)
        idx = rng.choice(len(dataset), size=min(config.batch_size, len(dataset)), replace=False)
        grids = []
        for i in idx:
            if cached is not None:
                grids.append(cached[i])
                continue
            try:
                grids.append(model.voxelize(_augment(dataset[i][0], config, rng)))
            except VoxelizationError:
                grids.append(model.voxelize(dataset[i][0]))
        preds = model(grids)
        loss = biomass_loss(preds, torch.as_tensor(targets[idx], dtype=preds.dtype), config.reduction)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise TrainingDiverged(it, last_good, history)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % config.log_every == 0 or it == config.iterations - 1:
            history.append({"iteration": it, "loss": float(loss.detach())})
            last_good = _snapshot(model)
            log.info("bionet it %d loss %.4f", it, float(loss.detach()))
    return model, history


# -- checkpoints -------------------------------------------------------------

MAGIC = b"NFBC"
VERSION = 1
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: (torch.float32, "<f4"), 1: (torch.float64, "<f8")}


def _jsonable(obj):
    if is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def config_hash(config: dict) -> bytes:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).digest()


def model_config(model: nn.Module) -> dict:
    if isinstance(model, NeuralFeatureField):
        return {"kind": "neff", "field": _jsonable(model.config), "precision": str(model.dtype).split(".")[-1]}
    if isinstance(model, BioNet):
        return {"kind": "bionet", "model": _jsonable(model.config), "precision": str(model.dtype).split(".")[-1]}
    raise CheckpointError(f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(model: nn.Module, path) -> None:
    """Write ``model`` as an NFBC file.

    Layout (little-endian): magic, u32 version, u32 config length, config
    JSON, 32-byte SHA-256 of the config, u32 block count, then per block
    u16 name length, name, u8 dtype code, u8 ndim, u32 dims, raw payload;
    finally a SHA-256 of everything before it.
    """
    cfg = model_config(model)
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(config_hash(cfg))
    state = model.state_dict()
    names = sorted(state)
    buf.write(struct.pack("<I", len(names)))
    for name in names:
        t = state[name].detach().cpu().contiguous()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.numpy().astype(_CODE_DTYPES[_DTYPE_CODES[t.dtype]][1]).tobytes())
    payload = buf.getvalue()
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path) -> tuple[dict, dict]:
    """(config, state dict) from an NFBC file, validating every integrity check."""
    data = Path(path).read_bytes()
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("bad magic; not an NFBC checkpoint")
    version, n_cfg = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        cfg = json.loads(r.take(n_cfg).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt config block: {exc}") from None
    if r.take(32) != config_hash(cfg):
        raise CheckpointError("config hash mismatch; checkpoint is corrupt")
    (n_blocks,) = r.unpack("<I")
    state = {}
    for _ in range(n_blocks):
        (n_name,) = r.unpack("<H")
        name = r.take(n_name).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} in block {name!r}")
        shape = r.unpack(f"<{ndim}I")
        dtype, np_dtype = _CODE_DTYPES[code]
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(count * np.dtype(np_dtype).itemsize), dtype=np_dtype).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    body_end = r.pos
    if r.take(32) != hashlib.sha256(data[:body_end]).digest() or r.pos != len(data):
        raise CheckpointError("checksum mismatch; checkpoint is corrupt")
    return cfg, state


def load_checkpoint(path, expected_config: Optional[dict] = None) -> nn.Module:
    cfg, state = read_checkpoint(path)
    if expected_config is not None and config_hash(expected_config) != config_hash(cfg):
        warnings.warn("checkpoint config differs from the expected config", stacklevel=2)
    if cfg.get("kind") == "neff":
        model = NeuralFeatureField(FieldConfig(**cfg["field"]), dtype=cfg["precision"])
    elif cfg.get("kind") == "bionet":
        model = BioNet(BionetConfig(**cfg["model"]), dtype=cfg["precision"])
    else:
        raise CheckpointError(f"unknown checkpoint kind {cfg.get('kind')!r}")
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"parameter blocks do not match the model: {exc}") from None
    return model
