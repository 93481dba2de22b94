"""Sparse 3D convolution backbone: voxel grid -> dense 2D feature map.

Sites are addressed by integer coordinates. A convolution builds, per output
site, the 27 input rows under the kernel (a shared zero row stands in for
absent neighbours), gathers them into one matrix and multiplies by the
flattened kernel. Absent neighbours therefore contribute exactly zero, the
padding semantics of a dense conv restricted to active sites.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .numerics import Rng, make_rng, resolve_dtype
from .pointdata import SparseVoxelGrid


class ShapeError(ValueError):
    pass


class InferenceError(RuntimeError):
    pass


# tap t <-> offset (dx, dy, dz) in lexicographic order over {-1, 0, 1}^3
OFFSETS = np.array([(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)], dtype=np.int64)


def _keys(batch: np.ndarray, coords: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    L, W, H = dims
    return ((batch * L + coords[:, 0]) * W + coords[:, 1]) * H + coords[:, 2]


def _lookup(sorted_keys, order, query, valid):
    """Row indices of ``query`` keys among the input sites, -1 when absent."""
    pos = np.searchsorted(sorted_keys, query)
    pos = np.minimum(pos, len(sorted_keys) - 1)
    hit = valid & (sorted_keys[pos] == query)
    return np.where(hit, order[pos], -1)


def rulebook(grid: SparseVoxelGrid, out_coords: np.ndarray, out_batch: np.ndarray, stride: Sequence[int]) -> torch.Tensor:
    """Neighbour table for a 3x3x3 kernel centred on ``out * stride``.

    Entry [o, t] is the input row feeding output ``o`` through tap ``t``, or
    ``n_in`` (a zero row appended at gather time) when that neighbour is absent.
    """
    n_in = grid.n_active
    table = np.full((len(out_coords), 27), n_in, dtype=np.int64)
    if n_in == 0 or len(out_coords) == 0:
        return torch.from_numpy(table)
    keys = _keys(grid.batch, grid.coords, grid.dims)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    dims = np.asarray(grid.dims)
    q = (out_coords * np.asarray(stride))[:, None, :] + OFFSETS[None, :, :]
    valid = np.all((q >= 0) & (q < dims), axis=2)
    q = np.where(valid[..., None], q, 0).reshape(-1, 3)
    ob = np.repeat(np.asarray(out_batch, dtype=np.int64), 27)
    rows = _lookup(sorted_keys, order, _keys(ob, q, grid.dims), valid.reshape(-1)).reshape(-1, 27)
    table = np.where(rows >= 0, rows, n_in)
    return torch.from_numpy(table)


def _apply_rules(feats: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, table: torch.Tensor) -> torch.Tensor:
    c_in, c_out = weight.shape[-2], weight.shape[-1]
    padded = torch.cat([feats, feats.new_zeros(1, c_in)])
    cols = padded[table].reshape(len(table), 27 * c_in)
    return cols @ weight.reshape(27 * c_in, c_out) + bias


def _check_channels(grid: SparseVoxelGrid, weight: torch.Tensor):
    if grid.channels != weight.shape[-2]:
        raise ShapeError(f"kernel expects {weight.shape[-2]} input channels, grid has {grid.channels}")


def _as_tensor(feats, like: torch.Tensor) -> torch.Tensor:
    if isinstance(feats, torch.Tensor):
        return feats
    return torch.as_tensor(np.asarray(feats), dtype=like.dtype)


def submanifold_conv3d(grid: SparseVoxelGrid, weight: torch.Tensor, bias: torch.Tensor, rules=None) -> SparseVoxelGrid:
    """3x3x3 convolution evaluated only at, and emitting only at, active sites.

    ``weight`` has shape (3, 3, 3, c_in, c_out); index [i, j, k] multiplies the
    neighbour at offset (i-1, j-1, k-1).
    """
    _check_channels(grid, weight)
    if rules is None:
        rules = rulebook(grid, grid.coords, grid.batch, (1, 1, 1))
    feats = _as_tensor(grid.features, weight)
    out = _apply_rules(feats, weight, bias, rules)
    return SparseVoxelGrid(grid.dims, grid.coords, out, batch=grid.batch)


def downsample_sites(grid: SparseVoxelGrid, stride: Sequence[int]):
    """Output cells whose receptive field touches an active input cell."""
    s = np.asarray(stride, dtype=np.int64)
    if np.any(s < 1):
        raise ShapeError("stride must be >= 1 along every axis")
    out_dims = tuple(int(math.ceil(d / k)) for d, k in zip(grid.dims, s))
    if grid.n_active == 0:
        return out_dims, np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.int64)
    cand = grid.coords[:, None, :] - OFFSETS[None, :, :]
    ok = np.all(cand % s == 0, axis=2)
    q = cand // s
    ok &= np.all((q >= 0) & (q < np.asarray(out_dims)), axis=2)
    b = np.broadcast_to(grid.batch[:, None], ok.shape)[ok]
    q = q[ok]
    keys = np.unique(_keys(b, q, out_dims))
    L, W, H = out_dims
    coords = np.stack([(keys // (W * H)) % L, (keys // H) % W, keys % H], axis=1)
    batch = keys // (L * W * H)
    return out_dims, coords, batch


def sparse_downsample(grid: SparseVoxelGrid, weight: torch.Tensor, bias: torch.Tensor, stride: Sequence[int]) -> SparseVoxelGrid:
    """Strided 3x3x3 convolution (padding 1); output dims are ceil(dims / stride)."""
    _check_channels(grid, weight)
    out_dims, coords, batch = downsample_sites(grid, stride)
    rules = rulebook(grid, coords, batch, stride)
    feats = _as_tensor(grid.features, weight)
    out = _apply_rules(feats, weight, bias, rules)
    return SparseVoxelGrid(out_dims, coords, out, batch=batch)


def _relu(grid: SparseVoxelGrid) -> SparseVoxelGrid:
    return SparseVoxelGrid(grid.dims, grid.coords, torch.relu(grid.features), batch=grid.batch)


def height_maxpool_dense(grid: SparseVoxelGrid, batch_size: int) -> torch.Tensor:
    """Max over the height axis of active sites, densified to (B, l, w, c).

    Columns with no active site are exact zeros.
    """
    L, W, _ = grid.dims
    feats = grid.features
    c = feats.shape[1]
    cols = torch.from_numpy((grid.batch * L + grid.coords[:, 0]) * W + grid.coords[:, 1])
    out = torch.zeros(batch_size * L * W, c, dtype=feats.dtype)
    if len(cols):
        out = out.scatter_reduce(0, cols[:, None].expand(-1, c), feats, reduce="amax", include_self=False)
    return out.reshape(batch_size, L, W, c)


@dataclass
class BackboneConfig:
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64, 128)
    out_channels: int = 128
    stride: tuple[int, int, int] = (2, 2, 2)

    def output_dims(self, dims: Sequence[int]) -> tuple[int, int]:
        d = list(dims)
        for _ in self.channels:
            d = [int(math.ceil(a / s)) for a, s in zip(d, self.stride)]
        return d[0], d[1]


class SparseConv(nn.Module):
    def __init__(self, c_in: int, c_out: int, rng: Rng, dtype=torch.float64):
        super().__init__()
        std = math.sqrt(2.0 / (27 * c_in))
        self.weight = nn.Parameter(torch.from_numpy(rng.standard_normal((3, 3, 3, c_in, c_out)) * std).to(dtype))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype))


class ResBlock(nn.Module):
    """Pre-activation residual pair of submanifold convolutions."""

    def __init__(self, channels: int, rng: Rng, dtype=torch.float64):
        super().__init__()
        self.conv1 = SparseConv(channels, channels, rng, dtype)
        self.conv2 = SparseConv(channels, channels, rng, dtype)

    def forward(self, grid: SparseVoxelGrid, rules) -> SparseVoxelGrid:
        h = submanifold_conv3d(_relu(grid), self.conv1.weight, self.conv1.bias, rules)
        h = submanifold_conv3d(_relu(h), self.conv2.weight, self.conv2.bias, rules)
        return SparseVoxelGrid(grid.dims, grid.coords, grid.features + h.features, batch=grid.batch)


class SparseBackbone(nn.Module):
    """Stem, then per level two residual blocks and a strided downsample.

    After the last level any remaining height is max-pooled away and the
    result is returned densely as (B, l_t, w_t, c_t).
    """

    def __init__(self, config: BackboneConfig, seed: int = 0, dtype="float64"):
        super().__init__()
        self.config = config
        dtype = resolve_dtype(dtype)
        rng = make_rng(seed)
        widths = list(config.channels) + [config.out_channels]
        self.stem = SparseConv(config.in_channels, widths[0], rng, dtype)
        self.blocks = nn.ModuleList()
        self.down = nn.ModuleList()
        for i in range(len(config.channels)):
            self.blocks.append(nn.ModuleList([ResBlock(widths[i], rng, dtype) for _ in range(2)]))
            self.down.append(SparseConv(widths[i], widths[i + 1], rng, dtype))

    def encode(self, grid: SparseVoxelGrid) -> SparseVoxelGrid:
        """Sparse activations after the last level, before height pooling."""
        if grid.n_active == 0:
            raise InferenceError("backbone received an empty voxel grid")
        w = self.stem.weight
        _check_channels(grid, w)
        grid = SparseVoxelGrid(grid.dims, grid.coords, _as_tensor(grid.features, w), batch=grid.batch)
        rules = rulebook(grid, grid.coords, grid.batch, (1, 1, 1))
        x = submanifold_conv3d(grid, self.stem.weight, self.stem.bias, rules)
        for blocks, down in zip(self.blocks, self.down):
            for block in blocks:
                x = block(x, rules)
            x = _relu(sparse_downsample(x, down.weight, down.bias, self.config.stride))
            rules = rulebook(x, x.coords, x.batch, (1, 1, 1))
        return x

    def forward(self, grid: SparseVoxelGrid) -> torch.Tensor:
        return height_maxpool_dense(self.encode(grid), grid.batch_size)


def batch_grids(grids: Sequence[SparseVoxelGrid]) -> SparseVoxelGrid:
    """Stack equally-sized grids into one batched grid."""
    dims = grids[0].dims
    if any(g.dims != dims for g in grids):
        raise ShapeError("all grids in a batch must share dims")
    coords = np.concatenate([g.coords for g in grids])
    batch = np.concatenate([np.full(g.n_active, i, dtype=np.int64) for i, g in enumerate(grids)])
    feats = [g.features for g in grids]
    if isinstance(feats[0], torch.Tensor):
        feats = torch.cat(feats)
    else:
        feats = np.concatenate(feats)
    return SparseVoxelGrid(dims, coords, feats, grids[0].extent, grids[0].resolution, batch=batch)


def backbone_forward(grid: SparseVoxelGrid, params: SparseBackbone) -> torch.Tensor:
    """Feature map (l_t, w_t, c_t) of a single grid."""
    return params(grid)[0]
