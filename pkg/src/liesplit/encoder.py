"""CNN + LSTM sequence encoder predicting the twelve transformation parameters."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Tuple

import torch
from torch import nn

from .flowfield import TransformParams

Tensor = torch.Tensor

#: Output slots in their fixed order.
OUTPUT_SLOTS = (
    "lambda_g01", "c_g01_x", "c_g01_y",
    "lambda_v01", "c_v01_x", "c_v01_y",
    "lambda_g12", "c_g12_x", "c_g12_y",
    "lambda_v12", "c_v12_x", "c_v12_y",
)
#: Offset of each (lambda, c) block inside the 12-vector.
BLOCKS = {"g01": 0, "v01": 3, "g12": 6, "v12": 9}

MIN_FRAMES = 3


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    channels: Tuple[int, ...] = (16, 32, 64, 128)
    kernel: int = 3
    stride: int = 2
    padding: int = 1
    hidden: int = 128
    n_out: int = 12

    @property
    def spatial_sizes(self) -> Tuple[int, ...]:
        sizes = [self.image_size]
        for _ in self.channels:
            sizes.append((sizes[-1] + 2 * self.padding - self.kernel) // self.stride + 1)
        return tuple(sizes)

    @property
    def feature_size(self) -> int:
        return self.channels[-1] * self.spatial_sizes[-1] ** 2

    @classmethod
    def for_image_size(cls, size: int, **overrides) -> "EncoderConfig":
        return cls(image_size=size, **overrides)


class Encoder(nn.Module):
    """Per-frame conv features -> LSTM over time -> affine head (128 -> 12)."""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        layers = []
        c_in = 1
        for c_out in config.channels:
            layers.append(nn.Conv2d(c_in, c_out, config.kernel, config.stride, config.padding))
            layers.append(nn.ReLU())
            c_in = c_out
        self.cnn = nn.Sequential(*layers)
        self.lstm = nn.LSTM(config.feature_size, config.hidden, num_layers=1, batch_first=True)
        self.head = nn.Linear(config.hidden, config.n_out)

    def reset_parameters(self, generator: torch.Generator = None) -> None:
        """Fan-in uniform weights; LSTM forget-gate bias set to one."""
        with torch.no_grad():
            for m in list(self.cnn) + [self.head]:
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    bound = 1.0 / math.sqrt(fan_in)
                    m.weight.uniform_(-bound, bound, generator=generator)
                    m.bias.uniform_(-bound, bound, generator=generator)
            bound = 1.0 / math.sqrt(self.config.hidden)
            for p in self.lstm.parameters():
                p.uniform_(-bound, bound, generator=generator)
            h = self.config.hidden
            self.lstm.bias_ih_l0[h:2 * h].fill_(1.0)
            self.lstm.bias_hh_l0[h:2 * h].fill_(0.0)

    def features(self, frames: Tensor) -> Tensor:
        b, t = frames.shape[:2]
        z = self.cnn(frames.reshape(b * t, *frames.shape[2:]))
        return z.reshape(b, t, -1)

    def forward(self, frames: Tensor) -> Tensor:
        """``frames``: ``(B, T, 1, S, S)`` or ``(T, 1, S, S)`` -> ``(B, 12)`` or ``(12,)``."""
        squeeze = frames.dim() == 4
        if squeeze:
            frames = frames.unsqueeze(0)
        s = self.config.image_size
        if frames.dim() != 5 or frames.shape[2:] != (1, s, s):
            raise ValueError(f"expected frames of shape (B, T, 1, {s}, {s}), got {tuple(frames.shape)}")
        if frames.shape[1] < MIN_FRAMES:
            raise ValueError(f"need at least {MIN_FRAMES} frames, got {frames.shape[1]}")
        z = self.features(frames)
        h, _ = self.lstm(z)
        out = self.head(h[:, -1])
        return out[0] if squeeze else out


def build_encoder(config: EncoderConfig = EncoderConfig(), seed: int = 0,
                  dtype=torch.float32) -> Encoder:
    enc = Encoder(config).to(dtype)
    enc.reset_parameters(torch.Generator().manual_seed(seed))
    return enc


def split_output(out: Tensor) -> Dict[str, TransformParams]:
    """Slice ``(..., 12)`` encoder output into named transform parameters."""
    if out.shape[-1] != 12:
        raise ValueError(f"expected 12 outputs, got {out.shape[-1]}")
    return {
        key: TransformParams(out[..., i], out[..., i + 1:i + 3])
        for key, i in BLOCKS.items()
    }


def join_output(parts: Dict[str, TransformParams]) -> Tensor:
    cols = []
    for key in BLOCKS:
        tp = parts[key]
        cols.append(tp.lam.unsqueeze(-1))
        cols.append(tp.c)
    return torch.cat(cols, dim=-1)


def init_target(batch: int = None, dtype=torch.float64) -> Tensor:
    """The ``lambda = 1, c = 0`` target shared by every block."""
    t = torch.tensor([1.0, 0.0, 0.0] * 4, dtype=dtype)
    return t if batch is None else t.expand(batch, 12)
