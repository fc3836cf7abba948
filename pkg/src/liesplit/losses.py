"""Loss terms for transformation disentanglement.

All functions take batched frames ``(B, T, C, H, W)`` and encoder output
``(B, 12)`` and return the batch mean of a per-sequence value. Every MSE is a
mean over the compared elements.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Dict, List, Sequence, Tuple

import torch

from .encoder import BLOCKS, split_output
from .flowfield import OdeParams, base_grid, integrate
from .warp import compose_apply

Tensor = torch.Tensor

TERMS = ("recon", "recon2", "homo", "ssl", "trans", "c_norm")


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    delta: float = 0.1
    epsilon: float = 1.0
    zeta: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    def as_tuple(self) -> Tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @classmethod
    def parse(cls, text: str) -> "LossWeights":
        vals = [float(v) for v in text.split(",")]
        if len(vals) != 6:
            raise ValueError("expected six comma-separated weights")
        return cls(*vals)


@dataclass
class LossBreakdown:
    recon: Tensor
    recon2: Tensor
    homo: Tensor
    ssl: Tensor
    trans: Tensor
    c_norm: Tensor
    total: Tensor

    def as_floats(self) -> Dict[str, float]:
        return {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}


def _mse_frames(a: Tensor, b: Tensor) -> Tensor:
    # per-sequence mean over (C, H, W)
    return ((a - b) ** 2).flatten(1).mean(1)


def _check_frames(frames: Tensor, t_min: int) -> None:
    if frames.dim() != 5:
        raise ValueError(f"frames must be (B, T, C, H, W), got {tuple(frames.shape)}")
    if frames.shape[1] < t_min:
        raise ValueError(f"need at least {t_min} frames, got {frames.shape[1]}")


def _pair(ode_g, ode_v, tps, key, scale=1.0):
    g = tps["g" + key]
    v = tps["v" + key]
    return [(ode_g, g.scaled(scale)), (ode_v, v.scaled(scale))]


def reconstruct_sequence(first: Tensor, enc_out: Tensor, ode_g: OdeParams, ode_v: OdeParams,
                         n_frames: int, K: float) -> Tensor:
    """Frames 1..n-1 predicted from frame 0 by ``v(i lam_v) o g(i lam_g)``."""
    tps = split_output(enc_out)
    out = [compose_apply(first, _pair(ode_g, ode_v, tps, "01", i), K) for i in range(1, n_frames)]
    return torch.stack(out, dim=1)


def recon_loss(frames: Tensor, enc_out: Tensor, ode_g: OdeParams, ode_v: OdeParams, K: float = 10.0) -> Tensor:
    _check_frames(frames, 2)
    pred = reconstruct_sequence(frames[:, 0], enc_out, ode_g, ode_v, frames.shape[1], K)
    total = sum(_mse_frames(frames[:, i], pred[:, i - 1]) for i in range(1, frames.shape[1]))
    return total.mean()


def recon2_loss(frames: Tensor, enc_out: Tensor, ode_g: OdeParams, ode_v: OdeParams, K: float = 10.0) -> Tensor:
    _check_frames(frames, 3)
    tps = split_output(enc_out)
    pred = compose_apply(frames[:, 1], _pair(ode_g, ode_v, tps, "12"), K)
    return _mse_frames(frames[:, 2], pred).mean()


def homo_loss(frames: Tensor, enc_out: Tensor, ode_v: OdeParams, K: float = 10.0) -> Tensor:
    """v(2 lam01) I0 against v12 applied after v01 to I0."""
    _check_frames(frames, 3)
    tps = split_output(enc_out)
    first = frames[:, 0]
    left = compose_apply(first, [(ode_v, tps["v01"].scaled(2.0))], K)
    right = compose_apply(first, [(ode_v, tps["v01"]), (ode_v, tps["v12"])], K)
    return _mse_frames(left, right).mean()


def ssl_targets(frames: Tensor, enc_out: Tensor, ode_g: OdeParams, ode_v: OdeParams,
                K: float = 10.0) -> List[Tuple[Tensor, Tensor]]:
    """``(target, new_frames)`` for the zero-g and zero-v branches, gradient-free.

    The regenerated sequence is stationary, so its 1->2 parameters equal its
    0->1 parameters; the 12-slot target repeats the modified 0->1 block.
    """
    out = []
    with torch.no_grad():
        base = enc_out.detach()[:, :6].clone()
        g_ode, v_ode = ode_g.detach(), ode_v.detach()
        for zeroed in ("g", "v"):
            star01 = base.clone()
            off = BLOCKS[zeroed + "01"]
            star01[:, off:off + 3] = 0.0
            target = torch.cat([star01, star01], dim=1)
            regen = reconstruct_sequence(frames[:, 0], target, g_ode, v_ode, frames.shape[1], K)
            new_frames = torch.cat([frames[:, :1], regen], dim=1)
            out.append((target, new_frames))
    return out


def ssl_branch_losses(encoder: Callable[[Tensor], Tensor], branches) -> Tuple[Tensor, List[Tensor]]:
    """Re-encode each regenerated sequence; returns (summed loss, re-encoded outputs)."""
    total = 0.0
    reenc = []
    for target, new_frames in branches:
        pred = encoder(new_frames)
        reenc.append(pred)
        total = total + ((pred - target) ** 2).mean(1).mean()
    return total, reenc


def ssl_loss(frames: Tensor, enc_out: Tensor, encoder, ode_g: OdeParams, ode_v: OdeParams,
             K: float = 10.0) -> Tensor:
    _check_frames(frames, 2)
    loss, _ = ssl_branch_losses(encoder, ssl_targets(frames, enc_out, ode_g, ode_v, K))
    return loss


def _subsample(grid: Tensor, stride: int) -> Tensor:
    pts = grid[..., ::stride, ::stride, :]
    return pts.reshape(*pts.shape[:-3], -1, 2)


def _distances(points: Tensor) -> Tensor:
    diff = points.unsqueeze(-2) - points.unsqueeze(-3)
    sq = (diff ** 2).sum(-1)
    eye = torch.eye(sq.shape[-1], dtype=torch.bool)
    # sqrt has no derivative at 0; keep the diagonal out of the graph
    return torch.where(eye, torch.zeros_like(sq), torch.sqrt(torch.where(eye, torch.ones_like(sq), sq)))


def trans_loss(grids: Sequence[Tensor], base: Tensor, stride: int = 4) -> Tensor:
    """Sum over ``grids`` of the MSE between pairwise-distance matrices."""
    h, w = base.shape[-3:-1]
    if stride < 1 or stride >= min(h, w):
        raise ValueError(f"stride must be in [1, {min(h, w)}), got {stride}")
    d0 = _distances(_subsample(base, stride))
    total = 0.0
    for g in grids:
        if g.shape[-3:] != base.shape[-3:]:
            raise ValueError(f"grid {tuple(g.shape)} does not match base {tuple(base.shape)}")
        dl = _distances(_subsample(g, stride))
        err = ((dl - d0) ** 2).flatten(-2).mean(-1)
        total = total + err.mean()
    return torch.as_tensor(total, dtype=base.dtype)


def c_norm_loss(enc_out: Tensor, squared: bool = False) -> Tensor:
    total = 0.0
    for i in BLOCKS.values():
        sq = (enc_out[..., i + 1:i + 3] ** 2).sum(-1)
        if squared:
            total = total + sq
        else:
            pos = sq > 0
            total = total + torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))),
                                        torch.zeros_like(sq))
    return total.mean()


def total_loss(terms: Dict[str, Tensor], weights: LossWeights = LossWeights()) -> LossBreakdown:
    w = dict(zip(TERMS, weights.as_tuple()))
    vals = {k: torch.as_tensor(terms[k]) for k in TERMS}
    total = sum(w[k] * vals[k] for k in TERMS)
    return LossBreakdown(total=total, **vals)


def init_loss(enc_out: Tensor) -> Tensor:
    target = torch.tensor([1.0, 0.0, 0.0, 1.0, 0.0, 0.0], dtype=enc_out.dtype)
    first = ((enc_out[..., :6] - target) ** 2).mean(-1)
    second = ((enc_out[..., 6:] - target) ** 2).mean(-1)
    return (first + second).mean()


def transform_grids(enc_out: Tensor, ode_g: OdeParams, ode_v: OdeParams, size: Tuple[int, int],
                    K: float) -> List[Tensor]:
    """Integrated canonical grids of the g/v transforms in one encoder output."""
    tps = split_output(enc_out)
    base = base_grid(*size, dtype=enc_out.dtype)
    grids = []
    for key in BLOCKS:
        ode = ode_g if key.startswith("g") else ode_v
        grids.append(integrate(base, ode, tps[key], K))
    return grids


def sequence_losses(frames: Tensor, encoder, ode_g: OdeParams, ode_v: OdeParams,
                    weights: LossWeights = LossWeights(), K: float = 10.0, trans_stride: int = 4,
                    squared_c_norm: bool = False, ssl_branches=None) -> LossBreakdown:
    """Every weighted term for one batch, sharing a single encoder pass.

    ``ssl_branches`` may be supplied to hold the self-supervision targets
    fixed (as returned by :func:`ssl_targets`).
    """
    _check_frames(frames, 3)
    size = tuple(frames.shape[-2:])
    enc_out = encoder(frames)
    recon = recon_loss(frames, enc_out, ode_g, ode_v, K)
    recon2 = recon2_loss(frames, enc_out, ode_g, ode_v, K)
    homo = homo_loss(frames, enc_out, ode_v, K)
    if ssl_branches is None:
        ssl_branches = ssl_targets(frames, enc_out, ode_g, ode_v, K)
    ssl, reenc = ssl_branch_losses(encoder, ssl_branches)
    grids = transform_grids(enc_out, ode_g, ode_v, size, K)
    for pred in reenc:
        # re-encoded 0->1 transforms of each self-supervision branch
        grids.extend(transform_grids(pred, ode_g, ode_v, size, K)[:2])
    trans = trans_loss(grids, base_grid(*size, dtype=frames.dtype), trans_stride)
    c_norm = c_norm_loss(enc_out, squared=squared_c_norm)
    terms = dict(recon=recon, recon2=recon2, homo=homo, ssl=ssl, trans=trans, c_norm=c_norm)
    return total_loss(terms, weights)
