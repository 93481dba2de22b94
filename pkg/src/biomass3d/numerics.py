"""Shared math kernels and the gradient-check oracle.

Tensors and reverse-mode gradients come from torch; everything random goes
through :func:`make_rng` so that a seed reproduces the same draws on any
platform (numpy's PCG64 bit generator has a fixed, documented algorithm).
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch

DTYPES = {"float32": torch.float32, "float64": torch.float64}

Rng = np.random.Generator


def make_rng(seed: int) -> Rng:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def resolve_dtype(dtype) -> torch.dtype:
    if isinstance(dtype, torch.dtype):
        return dtype
    try:
        return DTYPES[str(dtype)]
    except KeyError:
        raise ValueError(f"unsupported precision {dtype!r}; use one of {sorted(DTYPES)}") from None


def rng_tensor(rng: Rng, shape: Sequence[int], scale: float = 1.0, dtype=torch.float64) -> torch.Tensor:
    """Standard-normal tensor drawn from ``rng`` (torch's generator is never used)."""
    return torch.from_numpy(np.asarray(rng.standard_normal(tuple(shape)) * scale)).to(resolve_dtype(dtype))


def pos_encode(x: torch.Tensor, n_freq: int) -> torch.Tensor:
    """Frequency encoding ``[x, sin(2^k x), cos(2^k x)]`` along the last axis.

    Bands are ordered k = 0..n_freq-1, each contributing all sines then all
    cosines. No factor of pi is applied. Output width is ``d * (1 + 2 n_freq)``.
    """
    if n_freq < 0:
        raise ValueError("n_freq must be >= 0")
    parts = [x]
    for k in range(n_freq):
        scaled = x * (2.0 ** k)
        parts.append(torch.sin(scaled))
        parts.append(torch.cos(scaled))
    return torch.cat(parts, dim=-1)


def encoded_width(d: int, n_freq: int) -> int:
    return d * (1 + 2 * n_freq)


def smooth_l1(x):
    """Huber-style loss with unit threshold; works on floats and tensors."""
    if isinstance(x, torch.Tensor):
        ax = x.abs()
        return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    ax = abs(x)
    return 0.5 * x * x if ax < 1.0 else ax - 0.5


class EvaluationError(FloatingPointError):
    """A function under finite differencing returned a non-finite value."""


def finite_diff_grad(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-6,
    indices: Optional[Iterable[int]] = None,
) -> torch.Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``x`` is perturbed in place one coordinate at a time and restored exactly
    afterwards, so it may be a live model parameter. When ``indices`` is given
    only those flat coordinates are estimated; the rest of the result is NaN.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grad = torch.full_like(x, float("nan")) if indices is not None else torch.zeros_like(x)
    flat = x.data.view(-1)
    gflat = grad.view(-1)
    idx = range(flat.numel()) if indices is None else indices
    with torch.no_grad():
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f(x))
            flat[i] = orig - h
            fm = float(f(x))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise EvaluationError(f"non-finite function value at coordinate {i}")
            gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def autograd_grads(loss_fn: Callable[[], torch.Tensor], tensors: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    out = loss_fn()
    grads = torch.autograd.grad(out, list(tensors), allow_unused=True)
    return [torch.zeros_like(t) if g is None else g.detach() for t, g in zip(tensors, grads)]


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    tensors: Sequence[torch.Tensor],
    rng: Optional[Rng] = None,
    max_coords: int = 24,
    h: float = 1e-6,
) -> float:
    """Worst relative error between autograd and central differences.

    For each tensor up to ``max_coords`` coordinates (chosen by ``rng``) are
    compared; the error per tensor is ``|g_ad - g_fd| / max(|g_ad|, |g_fd|)``
    taken as vector norms over the checked coordinates. Tensors whose true
    gradient vanishes on every checked coordinate contribute zero.
    """
    analytic = autograd_grads(loss_fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        n = t.numel()
        if rng is not None and n > max_coords:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False)).tolist()
        else:
            idx = list(range(min(n, max_coords)))
        numeric = finite_diff_grad(lambda _t: loss_fn(), t, h=h, indices=idx)
        a = g.reshape(-1)[idx]
        b = numeric.reshape(-1)[idx]
        scale = max(float(a.norm()), float(b.norm()))
        if scale < 1e-10:
            continue
        worst = max(worst, float((a - b).norm()) / scale)
    return worst
