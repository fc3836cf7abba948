"""Parameter registry, primitive tape and the RAdam update.

Reverse-mode differentiation is delegated to ``torch.autograd``; the only
primitive with a hand-written backward is the bilinear sampler (see
:mod:`liesplit.warp`). :class:`Tape` restricts and logs which primitives a
computation may use.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import torch
import torch.nn.functional as F

from . import flowfield, warp

Tensor = torch.Tensor


@dataclass
class Param:
    name: str
    value: Tensor
    trainable: bool = True
    exp_avg: Optional[Tensor] = None
    exp_avg_sq: Optional[Tensor] = None

    @property
    def grad(self) -> Optional[Tensor]:
        return self.value.grad

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.value.shape)


class ParamRegistry:
    """Ordered, uniquely named collection of trainable leaf tensors."""

    def __init__(self):
        self._params: "OrderedDict[str, Param]" = OrderedDict()

    def add(self, name: str, value: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if not value.is_leaf:
            raise ValueError(f"{name!r} must be a leaf tensor")
        value.requires_grad_(True)
        self._params[name] = Param(name, value, trainable)
        return value

    def add_module(self, prefix: str, module: torch.nn.Module) -> None:
        for name, p in module.named_parameters():
            self.add(f"{prefix}{name}", p)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name].value

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> List[str]:
        return list(self._params)

    def entry(self, name: str) -> Param:
        return self._params[name]

    def set_trainable(self, prefix: str, flag: bool) -> None:
        for p in self._params.values():
            if p.name.startswith(prefix):
                p.trainable = flag

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.value.grad = None

    def grads(self) -> Dict[str, Tensor]:
        return {
            p.name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p.value))
            for p in self._params.values()
        }

    def values(self) -> Dict[str, Tensor]:
        return {p.name: p.value.detach().clone() for p in self._params.values()}

    def load_values(self, values: Dict[str, Tensor]) -> None:
        missing = set(self._params) - set(values)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        with torch.no_grad():
            for name, v in values.items():
                self._params[name].value.copy_(v)


# -- primitives ------------------------------------------------------------

def _sq_error(a: Tensor, b: Tensor) -> Tensor:
    return ((a - b) ** 2).mean()


def _lstm_cell(x, h, c, w_ih, w_hh, b_ih, b_hh):
    gates = x @ w_ih.T + b_ih + h @ w_hh.T + b_hh
    i, f, g, o = gates.chunk(4, dim=-1)
    c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
    return torch.sigmoid(o) * torch.tanh(c), c


def _norm(x: Tensor) -> Tensor:
    sq = (x * x).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


PRIMITIVES: Dict[str, Callable] = {
    "matmul": torch.matmul,
    "add": torch.add,
    "relu": torch.relu,
    "max": torch.maximum,
    "sigmoid": torch.sigmoid,
    "tanh": torch.tanh,
    "conv": lambda x, w, b=None: F.conv2d(x, w, b, stride=2, padding=1),
    "lstm_cell": _lstm_cell,
    "affine": F.linear,
    "bilinear_sample": warp.sample,
    "euler_step": flowfield.euler_step,
    "sq_error": _sq_error,
    "norm": _norm,
}


@dataclass
class Tape:
    """Log of primitive applications for one forward pass."""

    ops: List[Tuple[str, Tensor]] = field(default_factory=list)
    consumed: bool = False

    def record(self, primitive: str, *inputs, **kwargs):
        if self.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        try:
            fn = PRIMITIVES[primitive]
        except KeyError:
            raise KeyError(f"unregistered primitive {primitive!r}") from None
        out = fn(*inputs, **kwargs)
        self.ops.append((primitive, out))
        return out

    def __len__(self) -> int:
        return len(self.ops)


def backward(loss: Tensor, registry: Optional[ParamRegistry] = None, tape: Optional[Tape] = None) -> None:
    """Accumulate ``d loss / d param`` into every registry entry.

    Entries that the loss does not reach get an explicit zero gradient.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar root, got shape {tuple(loss.shape)}")
    if tape is not None:
        if tape.consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        tape.consumed = True
    if loss.requires_grad:
        loss.backward()
    if registry is not None:
        for p in registry:
            if p.value.grad is None:
                p.value.grad = torch.zeros_like(p.value)


# -- optimizer -------------------------------------------------------------

def radam_rho(step_index: int, beta2: float = 0.999) -> float:
    """Length of the approximated simple moving average at step ``t``."""
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    b2t = beta2 ** step_index
    return rho_inf - 2.0 * step_index * b2t / (1.0 - b2t)


@torch.no_grad()
def radam_step(registry: ParamRegistry, lr: float, step_index: int,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> bool:
    """One rectified-Adam update of every trainable entry, then zero all grads.

    ``step_index`` counts from 1. Returns whether the rectified (adaptive)
    branch was used; while ``rho_t <= 4`` the update is plain bias-corrected
    momentum.
    """
    if step_index < 1:
        raise ValueError("step_index starts at 1")
    rho_inf = 2.0 / (1.0 - beta2) - 1.0
    rho_t = radam_rho(step_index, beta2)
    bc1 = 1.0 - beta1 ** step_index
    bc2 = 1.0 - beta2 ** step_index
    rectified = rho_t > 4.0
    if rectified:
        r_t = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
    for p in registry:
        grad = p.value.grad
        if p.trainable and grad is not None:
            if p.exp_avg is None:
                p.exp_avg = torch.zeros_like(p.value)
                p.exp_avg_sq = torch.zeros_like(p.value)
            p.exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
            p.exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)
            m_hat = p.exp_avg / bc1
            if rectified:
                denom = (p.exp_avg_sq / bc2).sqrt().add_(eps)
                p.value.addcdiv_(m_hat, denom, value=-lr * r_t)
            else:
                p.value.add_(m_hat, alpha=-lr)
        p.value.grad = None
    return rectified
