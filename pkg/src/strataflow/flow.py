"""Linear flow-matching path, training target, and the Euler sampler.

Continuous time t runs from 0 (noise) to 1 (data); the discrete timestep
used for routing and conditioning is tau = T * (1 - t). The probability
path is the straight line x_t = t * x1 + (1 - t) * x0, whose velocity
field x1 - x0 is the regression target.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor
from .errors import ContractError
from .schedule import route
from .tensor import Tensor


@dataclass(frozen=True)
class FlowSample:
    """One corrupted batch: the interpolant, its velocity target, and t."""

    t: float
    x_t: np.ndarray
    target: np.ndarray


@dataclass
class SamplerConfig:
    num_steps: int = 40
    guidance_scale: float = 5.0

    def validate(self) -> None:
        if self.num_steps < 1:
            raise ContractError(f"need at least one sampling step, got {self.num_steps}")


def tau_of_t(t: float, total_steps: int = 1000) -> float:
    return total_steps * (1.0 - t)


def make_flow_sample(x1: np.ndarray, t: float, rng) -> FlowSample:
    """Corrupt clean data x1 to time t along the linear path.

    The whole batch shares one t; noise is drawn per sample from rng.
    """
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t {t} outside [0, 1]")
    x0 = rng.standard_normal(x1.shape).astype(x1.dtype)
    x_t = t * x1 + (1.0 - t) * x0
    return FlowSample(t=t, x_t=x_t, target=x1 - x0)


def cfm_loss(v_pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error against the path velocity, over all elements."""
    return tensor.mse(v_pred, Tensor(target))


def sample(model, cond_ids: np.ndarray, sampler: SamplerConfig, rng,
           x0: np.ndarray | None = None) -> np.ndarray:
    """Integrate the learned velocity field from noise to data.

    Plain Euler with step 1/num_steps. Each step routes tau to a single
    expert group; with guidance_scale != 1 the group runs twice (with and
    without the condition) and the two velocities are extrapolated. At
    guidance_scale == 1 the unconditional branch is skipped outright, so
    the result is bitwise identical to conditional-only sampling.

    cond_ids: [B] integer labels. Returns [B, tokens, channels].
    """
    sampler.validate()
    batch = int(cond_ids.shape[0])
    if x0 is None:
        x0 = rng.standard_normal(
            (batch, model.config.num_tokens, model.config.latent_dim)
        ).astype(np.float32)
    x = x0.copy()

    guided = sampler.guidance_scale != 1.0
    dt = 1.0 / sampler.num_steps
    schedule = model.schedule
    with tensor.no_grad():
        cond = model.begin_context(cond_ids)
        uncond = model.null_context(batch) if guided else None
        for i in range(sampler.num_steps):
            t = i / sampler.num_steps
            tau = tau_of_t(t, schedule.total_steps)
            k = route(tau, schedule)
            v_c = model.expert_forward(k, Tensor(x), tau, cond).data
            if guided:
                v_u = model.expert_forward(k, Tensor(x), tau, uncond).data
                v = v_u + sampler.guidance_scale * (v_c - v_u)
            else:
                v = v_c
            x = x + dt * v
    return x
