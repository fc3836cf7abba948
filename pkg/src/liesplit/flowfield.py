"""Affine ODE velocity fields and their Euler-integrated coordinate flows.

Coordinates live in the normalized frame ``[-1, 1]^2`` with ``(-1, -1)`` at
pixel (row 0, col 0); the last axis of every grid holds ``(x, y)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import torch

Tensor = torch.Tensor

#: Any intermediate coordinate beyond this magnitude aborts integration.
DIVERGENCE_LIMIT = 1e3


class DivergenceError(RuntimeError):
    """Raised when the divergence guard trips during integration."""


@dataclass
class OdeParams:
    """Shared coefficients of the velocity field ``A p + b``."""

    A: Tensor
    b: Tensor

    @classmethod
    def zeros(cls, dtype=torch.float64) -> "OdeParams":
        return cls(torch.zeros(2, 2, dtype=dtype), torch.zeros(2, dtype=dtype))

    @classmethod
    def from_values(cls, A, b, dtype=torch.float64) -> "OdeParams":
        return cls(torch.as_tensor(A, dtype=dtype), torch.as_tensor(b, dtype=dtype))

    def detach(self) -> "OdeParams":
        return OdeParams(self.A.detach(), self.b.detach())


@dataclass
class TransformParams:
    """Per-instance integration time ``lam`` and velocity offset ``c``.

    ``lam`` is a scalar or shape ``(B,)``; ``c`` is ``(2,)`` or ``(B, 2)``.
    """

    lam: Tensor
    c: Tensor

    @classmethod
    def of(cls, lam, c=(0.0, 0.0), dtype=torch.float64) -> "TransformParams":
        return cls(torch.as_tensor(lam, dtype=dtype), torch.as_tensor(c, dtype=dtype))

    def scaled(self, factor: float) -> "TransformParams":
        return TransformParams(self.lam * factor, self.c)


class StepPlan(NamedTuple):
    steps: Union[int, Tensor]
    dt: Union[float, Tensor]


def base_grid(height: int, width: int, dtype=torch.float64) -> Tensor:
    """Canonical ``(H, W, 2)`` grid of pixel centers in ``[-1, 1]^2``."""
    xs = torch.linspace(-1.0, 1.0, width, dtype=dtype) if width > 1 else torch.zeros(1, dtype=dtype)
    ys = torch.linspace(-1.0, 1.0, height, dtype=dtype) if height > 1 else torch.zeros(1, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def pixel_scale(size: int) -> float:
    """Normalized units per pixel along an axis of ``size`` pixels."""
    return 2.0 / (size - 1)


def velocity(p: Tensor, ode: OdeParams, c: Tensor) -> Tensor:
    """``A p + b + c`` for points ``p`` of shape ``(..., 2)``."""
    return p @ ode.A.transpose(-1, -2) + ode.b + c


def plan_steps(lam, K: float) -> StepPlan:
    """Euler subdivision ``n = floor(|lam| K) + 1``, ``dt = lam / n``.

    Works on Python floats or tensors. For tensors the step count is computed
    from detached values, so gradients reach ``lam`` only through ``dt``.
    """
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    if isinstance(lam, Tensor):
        if not torch.isfinite(lam).all():
            raise ValueError("integration time must be finite")
        steps = torch.floor(lam.detach().abs() * K).to(torch.int64) + 1
        return StepPlan(steps, lam / steps.to(lam.dtype))
    lam = float(lam)
    if not math.isfinite(lam):
        raise ValueError("integration time must be finite")
    steps = int(math.floor(abs(lam) * K)) + 1
    return StepPlan(steps, lam / steps)


def inverse_params(tp: TransformParams) -> TransformParams:
    return TransformParams(-tp.lam, tp.c)


def _flatten_params(tp: TransformParams, dtype):
    lam = torch.as_tensor(tp.lam, dtype=dtype)
    c = torch.as_tensor(tp.c, dtype=dtype)
    batched = lam.dim() == 1
    return lam.reshape(-1), c.reshape(-1, 2).expand(lam.numel(), 2), batched


def euler_affine(ode: OdeParams, tp: TransformParams, K: float, coord_bound: float = 1.0):
    """Collapse the Euler recursion into per-sample affine maps.

    Each Euler step ``p <- p + dt (A p + b + c)`` is the affine map
    ``p <- (I + dt A) p + dt (b + c)``; composing ``n`` of them gives
    ``p_n = M p_0 + t``. Returns ``(M, t, batched)`` with ``M: (B, 2, 2)`` and
    ``t: (B, 2)``. ``coord_bound`` is the largest input coordinate magnitude,
    used to bound every intermediate coordinate for the divergence guard.
    """
    dtype = ode.A.dtype
    lam, c, batched = _flatten_params(tp, dtype)
    steps, dt = plan_steps(lam, K)
    n = lam.shape[0]
    eye = torch.eye(2, dtype=dtype)
    step_M = eye + dt[:, None, None] * ode.A
    drift = dt[:, None] * (ode.b + c)
    M = eye.expand(n, 2, 2)
    t = torch.zeros(n, 2, dtype=dtype)
    bound = torch.zeros((), dtype=dtype)
    uniform = bool((steps == steps[0]).all())
    for k in range(int(steps.max())):
        new_M = step_M @ M
        new_t = (step_M @ t.unsqueeze(-1)).squeeze(-1) + drift
        if uniform:
            M, t = new_M, new_t
        else:
            active = (k < steps)
            M = torch.where(active[:, None, None], new_M, M)
            t = torch.where(active[:, None], new_t, t)
        with torch.no_grad():
            reach = M.abs().sum(-1) * coord_bound + t.abs()
            bound = torch.maximum(bound, reach.max())
    if not torch.isfinite(bound) or bound > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"divergence guard: coordinate magnitude reached {float(bound):.3g} "
            f"(limit {DIVERGENCE_LIMIT:g})"
        )
    return M, t, batched


def integrate(grid: Tensor, ode: OdeParams, tp: TransformParams, K: float = 10.0) -> Tensor:
    """Euler-integrate every point of ``grid`` along the flow for time ``tp.lam``.

    ``grid`` has shape ``(H, W, 2)`` or ``(B, H, W, 2)``. With batched
    parameters (``lam`` of shape ``(B,)``) an unbatched grid is broadcast.
    """
    pmax = float(grid.detach().abs().max()) if grid.numel() else 0.0
    M, t, batched = euler_affine(ode, tp, K, coord_bound=pmax)
    if grid.dim() == 3:
        out = torch.einsum("bij,hwj->bhwi", M, grid)
    else:
        if grid.shape[0] != M.shape[0]:
            raise ValueError(f"grid batch {grid.shape[0]} != parameter batch {M.shape[0]}")
        out = torch.einsum("bij,bhwj->bhwi", M, grid)
    out = out + t[:, None, None, :]
    if not batched and grid.dim() == 3:
        out = out[0]
    return out


def euler_step(p: Tensor, ode: OdeParams, c: Tensor, dt) -> Tensor:
    return p + dt * velocity(p, ode, c)


def integrate_stepwise(points: Tensor, ode: OdeParams, tp: TransformParams, K: float = 10.0) -> Tensor:
    """Reference per-point Euler loop for a single (unbatched) transform."""
    steps, dt = plan_steps(tp.lam, K)
    steps = int(steps)
    p = points
    for _ in range(steps):
        p = euler_step(p, ode, tp.c, dt)
        if not torch.isfinite(p).all() or p.detach().abs().max() > DIVERGENCE_LIMIT:
            raise DivergenceError("divergence guard tripped in stepwise integration")
    return p
