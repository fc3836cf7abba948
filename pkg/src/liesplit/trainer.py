"""Two-phase optimization: encoder initialization, then joint training."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import diffcore
from .diffcore import ParamRegistry
from .encoder import Encoder, EncoderConfig, build_encoder
from .flowfield import OdeParams
from .losses import LossWeights, init_loss, sequence_losses

logger = logging.getLogger(__name__)

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass(frozen=True)
class TrainConfig:
    init_steps: int = 1000
    main_steps: int = 20000
    lr: float = 1e-4
    K: float = 10.0
    weights: LossWeights = field(default_factory=LossWeights)
    batch_size: int = 16
    dataset_size: int = 512
    trans_stride: int = 4
    seed: int = 0
    precision: str = "float32"
    checkpoint_interval: int = 1000
    image_size: int = 64
    init_tolerance: float = 1e-4
    squared_c_norm: bool = False

    def __post_init__(self):
        for name in ("init_steps", "main_steps", "checkpoint_interval"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.batch_size < 1 or self.dataset_size < 1:
            raise ValueError("batch_size and dataset_size must be positive")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be one of {sorted(_DTYPES)}")
        if self.K <= 0:
            raise ValueError("K must be positive")

    @property
    def dtype(self) -> torch.dtype:
        return _DTYPES[self.precision]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights.as_tuple())
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        d = {k: v for k, v in d.items() if k in known}
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            d["weights"] = LossWeights(*d["weights"])
        return cls(**d)


PROFILES: Dict[str, TrainConfig] = {
    "paper": TrainConfig(),
    "ci": TrainConfig(image_size=32, dataset_size=128, main_steps=5000),
}


def encoder_config(config: TrainConfig) -> EncoderConfig:
    return EncoderConfig.for_image_size(config.image_size)


@dataclass
class ModelState:
    registry: ParamRegistry
    encoder: Encoder
    init_steps_done: int = 0
    main_steps_done: int = 0

    @property
    def ode_g(self) -> OdeParams:
        return OdeParams(self.registry["ode_g.A"], self.registry["ode_g.b"])

    @property
    def ode_v(self) -> OdeParams:
        return OdeParams(self.registry["ode_v.A"], self.registry["ode_v.b"])

    @property
    def step(self) -> int:
        return self.init_steps_done + self.main_steps_done


def new_state(config: TrainConfig, enc_config: Optional[EncoderConfig] = None) -> ModelState:
    """Fresh model: zero ODE coefficients, fan-in initialized encoder."""
    enc_config = enc_config or encoder_config(config)
    dtype = config.dtype
    encoder = build_encoder(enc_config, seed=config.seed, dtype=dtype)
    reg = ParamRegistry()
    for name in ("ode_g", "ode_v"):
        reg.add(f"{name}.A", torch.zeros(2, 2, dtype=dtype))
        reg.add(f"{name}.b", torch.zeros(2, dtype=dtype))
    reg.add_module("encoder.", encoder)
    return ModelState(reg, encoder)


def as_frames(dataset, dtype=torch.float32) -> torch.Tensor:
    """Accept a list of sequences, an ``(N, T, S, S)`` array or ``(N, T, 1, S, S)``."""
    if isinstance(dataset, torch.Tensor):
        frames = dataset
    elif isinstance(dataset, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(dataset))
    else:
        frames = torch.from_numpy(np.stack([s.frames for s in dataset]))
    if frames.dim() == 4:
        frames = frames.unsqueeze(2)
    return frames.to(dtype)


def _batch_indices(n: int, batch: int, seed: int, phase: int, step: int) -> np.ndarray:
    # keyed on (seed, phase, step): resuming reproduces the same batches
    rng = np.random.default_rng([seed, phase, step])
    return rng.choice(n, size=min(batch, n), replace=False)


@dataclass
class InitReport:
    final_loss: float
    converged: bool
    history: List[float]


def init_phase(state: ModelState, dataset, config: TrainConfig, holdout=None,
               log: Optional[Callable[[dict], None]] = None) -> InitReport:
    """Train the encoder toward ``lambda = 1, c = 0`` with the ODEs frozen.

    Without an explicit ``holdout`` the last ``batch_size`` sequences are held
    out of the sampled batches and used for the final check.
    """
    frames = as_frames(dataset, config.dtype)
    if holdout is None:
        if frames.shape[0] > config.batch_size:
            holdout = frames[-config.batch_size:]
            frames = frames[:-config.batch_size]
        else:
            holdout = frames
    else:
        holdout = as_frames(holdout, config.dtype)
    reg = state.registry
    reg.set_trainable("ode_", False)
    history = []
    try:
        for k in range(state.init_steps_done, config.init_steps):
            idx = _batch_indices(frames.shape[0], config.batch_size, config.seed, 0, k)
            loss = init_loss(state.encoder(frames[idx]))
            diffcore.backward(loss, reg)
            diffcore.radam_step(reg, config.lr, k + 1)
            state.init_steps_done = k + 1
            history.append(loss.item())
            if log is not None:
                log({"phase": "init", "step": state.step, "init_loss": history[-1]})
    finally:
        reg.set_trainable("ode_", True)
        reg.zero_grad()
    with torch.no_grad():
        final = float(init_loss(state.encoder(holdout)))
    converged = final <= config.init_tolerance
    if not converged and config.init_steps > 0:
        logger.warning("init phase did not converge: held-out loss %.3e > %.1e",
                       final, config.init_tolerance)
    return InitReport(final, converged, history)


def _reset_moments(reg: ParamRegistry) -> None:
    for p in reg:
        p.exp_avg = None
        p.exp_avg_sq = None


def main_phase(state: ModelState, dataset, config: TrainConfig,
               log: Optional[Callable[[dict], None]] = None,
               checkpoint: Optional[Callable[[ModelState], None]] = None) -> List[dict]:
    """Joint training of both ODEs and the encoder on the weighted loss.

    A fresh optimizer starts with this phase; ``main_steps_done`` resumes it.
    A :class:`~liesplit.flowfield.DivergenceError` propagates before the
    offending update is applied.
    """
    frames = as_frames(dataset, config.dtype)
    reg = state.registry
    if state.main_steps_done == 0:
        _reset_moments(reg)
    records = []
    for k in range(state.main_steps_done, config.main_steps):
        idx = _batch_indices(frames.shape[0], config.batch_size, config.seed, 1, k)
        bd = sequence_losses(frames[idx], state.encoder, state.ode_g, state.ode_v,
                             config.weights, config.K, config.trans_stride, config.squared_c_norm)
        diffcore.backward(bd.total, reg)
        diffcore.radam_step(reg, config.lr, k + 1)
        state.main_steps_done = k + 1
        rec = {"phase": "main", "step": state.step, **bd.as_floats()}
        records.append(rec)
        if log is not None:
            log(rec)
        if checkpoint is not None and config.checkpoint_interval and (k + 1) % config.checkpoint_interval == 0:
            checkpoint(state)
    return records


@dataclass
class MetricsRecord:
    per_sequence: List[Dict[str, float]]
    mean: Dict[str, float]
    ode_g: Dict[str, list]
    ode_v: Dict[str, list]
    init_loss: float

    def to_dict(self) -> dict:
        return asdict(self)


def _ode_dict(ode: OdeParams) -> Dict[str, list]:
    return {"A": ode.A.detach().double().tolist(), "b": ode.b.detach().double().tolist()}


def evaluate(state: ModelState, dataset, config: TrainConfig) -> MetricsRecord:
    """Gradient-free per-sequence loss terms plus the learned ODE coefficients."""
    frames = as_frames(dataset, config.dtype)
    per = []
    inits = []
    with torch.no_grad():
        for i in range(frames.shape[0]):
            batch = frames[i:i + 1]
            bd = sequence_losses(batch, state.encoder, state.ode_g, state.ode_v, config.weights,
                                 config.K, config.trans_stride, config.squared_c_norm)
            per.append(bd.as_floats())
            inits.append(float(init_loss(state.encoder(batch))))
    keys = per[0].keys() if per else []
    mean = {k: float(np.mean([p[k] for p in per])) for k in keys}
    return MetricsRecord(per, mean, _ode_dict(state.ode_g), _ode_dict(state.ode_v),
                         float(np.mean(inits)) if inits else 0.0)
