"""Bilinear backward warping with an analytic sampling-grid gradient.

Images are ``(C, H, W)`` or ``(B, C, H, W)``; sampling grids are normalized
``(H, W, 2)`` or ``(B, H, W, 2)`` holding, for each output pixel, the source
location it pulls from. Locations outside the source read as zero.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import torch

from .flowfield import OdeParams, TransformParams, base_grid, integrate

Tensor = torch.Tensor


def _to_pixels(grid: Tensor, height: int, width: int) -> Tuple[Tensor, Tensor]:
    x = (grid[..., 0] + 1.0) * ((width - 1) / 2.0)
    y = (grid[..., 1] + 1.0) * ((height - 1) / 2.0)
    # normalized->pixel conversion is inexact; snap round-off so that the
    # canonical grid addresses pixel centers exactly
    tol = 8 * torch.finfo(grid.dtype).eps * max(height, width)
    xr, yr = torch.round(x), torch.round(y)
    x = torch.where((x - xr).abs() <= tol, xr, x)
    y = torch.where((y - yr).abs() <= tol, yr, y)
    return x, y


def _corners(x: Tensor, y: Tensor, height: int, width: int):
    """Flat indices, validity masks and bilinear weights of the 4 neighbors."""
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.to(torch.int64)
    y0 = y0.to(torch.int64)
    out = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < width) & (yi >= 0) & (yi < height)
            idx = torch.where(valid, yi * width + xi, torch.zeros_like(xi))
            out.append((idx, valid, wy * wx))
    return out, fx, fy


def _gather(flat: Tensor, idx: Tensor, valid: Tensor) -> Tensor:
    # flat: (B, C, HW); idx/valid: (B, H, W) -> (B, C, H, W)
    b, c, _ = flat.shape
    h, w = idx.shape[1:]
    g = torch.gather(flat, 2, idx.reshape(b, 1, h * w).expand(b, c, h * w)).reshape(b, c, h, w)
    return g * valid.unsqueeze(1).to(flat.dtype)


def _batch(src: Tensor, grid: Tensor):
    squeeze = src.dim() == 3
    if squeeze:
        src = src.unsqueeze(0)
    if grid.dim() == 3:
        grid = grid.unsqueeze(0).expand(src.shape[0], *grid.shape)
    elif src.shape[0] != grid.shape[0]:
        if src.shape[0] == 1:
            src = src.expand(grid.shape[0], *src.shape[1:])
            squeeze = False
        else:
            raise ValueError(f"batch mismatch: src {tuple(src.shape)} vs grid {tuple(grid.shape)}")
    if grid.shape[1:3] != src.shape[2:4] or grid.shape[-1] != 2:
        raise ValueError(f"grid {tuple(grid.shape)} does not match image {tuple(src.shape)}")
    return src, grid, squeeze and grid.shape[0] == 1


def _sample_forward(src: Tensor, grid: Tensor) -> Tensor:
    b, c, h, w = src.shape
    x, y = _to_pixels(grid, h, w)
    corners, _, _ = _corners(x, y, h, w)
    flat = src.reshape(b, c, h * w)
    out = torch.zeros(b, c, h, w, dtype=src.dtype)
    for idx, valid, weight in corners:
        out = out + _gather(flat, idx, valid) * weight.unsqueeze(1)
    return out


def sample_backward(src: Tensor, grid: Tensor, upstream: Tensor):
    """Gradients of ``sum(upstream * sample(src, grid))`` w.r.t. ``src`` and ``grid``.

    Within a cell ``x0 <= x < x0 + 1`` the kernel derivative is +1 for the
    right neighbor and -1 for the left one, zero elsewhere. A point sitting
    exactly on an integer belongs to the cell on its right.
    """
    src, grid, squeeze = _batch(src, grid)
    if upstream.dim() == 3:
        upstream = upstream.unsqueeze(0)
    if upstream.shape != src.shape:
        raise ValueError(f"upstream {tuple(upstream.shape)} != image {tuple(src.shape)}")
    b, c, h, w = src.shape
    x, y = _to_pixels(grid, h, w)
    corners, fx, fy = _corners(x, y, h, w)
    flat = src.reshape(b, c, h * w)

    grad_src = torch.zeros(b, c, h * w, dtype=src.dtype)
    vals = []
    for idx, valid, weight in corners:
        contrib = upstream * (weight * valid.to(src.dtype)).unsqueeze(1)
        grad_src.scatter_add_(2, idx.reshape(b, 1, h * w).expand(b, c, h * w), contrib.reshape(b, c, h * w))
        vals.append(_gather(flat, idx, valid))
    u00, u01, u10, u11 = vals
    wy0 = (1.0 - fy).unsqueeze(1)
    wy1 = fy.unsqueeze(1)
    wx0 = (1.0 - fx).unsqueeze(1)
    wx1 = fx.unsqueeze(1)
    dx = (wy0 * (u01 - u00) + wy1 * (u11 - u10)) * upstream
    dy = (wx0 * (u10 - u00) + wx1 * (u11 - u01)) * upstream
    grad_grid = torch.stack(
        [dx.sum(1) * ((w - 1) / 2.0), dy.sum(1) * ((h - 1) / 2.0)], dim=-1
    )
    grad_src = grad_src.reshape(b, c, h, w)
    if squeeze:
        grad_src, grad_grid = grad_src[0], grad_grid[0]
    return grad_src, grad_grid


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, src, grid):
        ctx.save_for_backward(src, grid)
        return _sample_forward(src, grid)

    @staticmethod
    def backward(ctx, upstream):
        src, grid = ctx.saved_tensors
        grad_src, grad_grid = sample_backward(src, grid, upstream.contiguous())
        return (
            grad_src if ctx.needs_input_grad[0] else None,
            grad_grid if ctx.needs_input_grad[1] else None,
        )


def sample(src: Tensor, grid: Tensor) -> Tensor:
    """Bilinearly sample ``src`` at the locations held in ``grid``."""
    src_b, grid_b, squeeze = _batch(src, grid)
    out = _BilinearSample.apply(src_b.contiguous(), grid_b.contiguous())
    return out[0] if squeeze else out


def apply_transform(img: Tensor, ode: OdeParams, tp: TransformParams, K: float = 10.0) -> Tensor:
    """Sample ``img`` at the flowed canonical grid.

    The visible motion is the inverse of the coordinate flow; pass
    ``inverse_params(tp)`` to move the content by ``F(lam)`` itself.
    """
    h, w = img.shape[-2:]
    grid = integrate(base_grid(h, w, dtype=img.dtype), ode, tp, K)
    return sample(img, grid)


def compose_grid(height: int, width: int, transforms: Sequence[Tuple[OdeParams, TransformParams]],
                 K: float = 10.0, dtype=torch.float64) -> Tensor:
    """Sampling grid equivalent to applying ``transforms`` in list order.

    Applying ``t1`` then ``t2`` pulls through ``F1(F2(p))``, so the grid is
    integrated through the list back to front.
    """
    if not transforms:
        raise ValueError("need at least one transform")
    grid = base_grid(height, width, dtype=dtype)
    for ode, tp in reversed(transforms):
        grid = integrate(grid, ode, tp, K)
    return grid


def compose_apply(img: Tensor, transforms: Sequence[Tuple[OdeParams, TransformParams]],
                  K: float = 10.0, resample: bool = False) -> Tensor:
    """Apply ``transforms`` (first element first) to ``img``.

    By default the whole chain is resolved into one grid and sampled once;
    ``resample=True`` warps the image after every transform instead.
    """
    if not transforms:
        raise ValueError("need at least one transform")
    if resample:
        out = img
        for ode, tp in transforms:
            out = apply_transform(out, ode, tp, K)
        return out
    h, w = img.shape[-2:]
    return sample(img, compose_grid(h, w, transforms, K, dtype=img.dtype))

