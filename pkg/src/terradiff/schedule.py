"""Forward diffusion process: noise schedule tables, the noising operator, and
sinusoidal timestep embeddings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

DEFAULT_TIMESTEPS = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02

EMBEDDING_BASE = 10000.0


@dataclass(frozen=True)
class NoiseSchedule:
    """Discrete noising schedule over ``timesteps`` steps.

    ``beta[k]`` is the variance added when moving from step k to k+1 (so it
    covers steps 1..T in one-based terms).  ``alpha_bar[t]`` is the cumulative
    signal fraction after t steps, with ``alpha_bar[0] == 1`` so that t == 0
    denotes the clean image.  All tables are float64.
    """

    timesteps: int
    beta: np.ndarray
    alpha_bar: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.timesteps < 1:
            raise ValueError(f"timesteps must be >= 1, got {self.timesteps}")
        beta = np.asarray(self.beta, dtype=np.float64)
        if beta.shape != (self.timesteps,):
            raise ValueError(f"beta must have shape ({self.timesteps},), got {beta.shape}")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("beta entries must lie strictly inside (0, 1)")
        alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if alpha_bar.shape != (self.timesteps + 1,):
            raise ValueError(
                f"alpha_bar must have shape ({self.timesteps + 1},), got {alpha_bar.shape}"
            )
        if alpha_bar[0] != 1.0:
            raise ValueError("alpha_bar[0] must equal 1.0 (t=0 is the clean image)")
        if np.any(np.diff(alpha_bar) >= 0.0):
            raise ValueError("alpha_bar must be strictly decreasing")
        if np.any(alpha_bar <= 0.0):
            raise ValueError("alpha_bar must stay positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha_bar", alpha_bar)

    def validate_timestep(self, t: int, *, minimum: int = 0) -> int:
        t = int(t)
        if not minimum <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside [{minimum}, {self.timesteps}]")
        return t

    def signal_scale(self, t) -> np.ndarray:
        """sqrt(alpha_bar[t]); accepts scalars or integer arrays."""
        return np.sqrt(self.alpha_bar[np.asarray(t)])

    def noise_scale(self, t) -> np.ndarray:
        """sqrt(1 - alpha_bar[t]); accepts scalars or integer arrays."""
        return np.sqrt(1.0 - self.alpha_bar[np.asarray(t)])


def make_linear_schedule(
    timesteps: int = DEFAULT_TIMESTEPS,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Linearly spaced beta table with the cumulative alpha_bar products.

    The products are accumulated in float64; alpha_bar is prepended with 1.0
    so it can be indexed directly by timesteps 0..T.
    """
    if timesteps < 1:
        raise ValueError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alpha_bar = np.concatenate(([1.0], np.cumprod(1.0 - beta)))
    return NoiseSchedule(timesteps=timesteps, beta=beta, alpha_bar=alpha_bar)


def q_sample(x0, t, eps, sched: NoiseSchedule):
    """Noised sample x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps.

    ``x0`` and ``eps`` must share shape; both numpy arrays and torch tensors
    are accepted (mixing the two is rejected).  ``t`` may be a scalar or a
    per-item integer vector whose length matches the leading dimension.
    """
    is_torch = isinstance(x0, torch.Tensor)
    if is_torch != isinstance(eps, torch.Tensor):
        raise TypeError("x0 and eps must both be numpy arrays or both torch tensors")
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")

    t_arr = np.atleast_1d(np.asarray(t, dtype=np.int64))
    if np.any(t_arr < 0) or np.any(t_arr > sched.timesteps):
        raise ValueError(f"timesteps must lie in [0, {sched.timesteps}]")
    scalar_t = np.ndim(t) == 0
    if not scalar_t and (x0.ndim == 0 or t_arr.shape[0] != x0.shape[0]):
        raise ValueError("per-item t must match the leading dimension of x0")

    c_signal = sched.signal_scale(t_arr)
    c_noise = sched.noise_scale(t_arr)
    if scalar_t:
        c_signal, c_noise = c_signal[0], c_noise[0]
        if is_torch:
            return float(c_signal) * x0 + float(c_noise) * eps
        return c_signal * x0 + c_noise * eps

    # Per-item coefficients broadcast over trailing dims.
    extra = (1,) * (x0.ndim - 1)
    if is_torch:
        cs = torch.as_tensor(c_signal, dtype=x0.dtype, device=x0.device).reshape(-1, *extra)
        cn = torch.as_tensor(c_noise, dtype=x0.dtype, device=x0.device).reshape(-1, *extra)
    else:
        cs = c_signal.reshape(-1, *extra).astype(x0.dtype, copy=False)
        cn = c_noise.reshape(-1, *extra).astype(x0.dtype, copy=False)
    return cs * x0 + cn * eps


def timestep_embedding(
    t,
    dim: int,
    *,
    dtype: torch.dtype = torch.float32,
    device=None,
) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps.

    Frequencies are geometrically spaced from 1 down to roughly 1/EMBEDDING_BASE;
    the first dim/2 channels carry sin, the second half cos.  A scalar t yields
    shape (dim,), a length-N vector yields (N, dim).
    """
    if dim < 2 or dim % 2 != 0:
        raise ValueError(f"embedding dim must be an even integer >= 2, got {dim}")
    t_tensor = torch.as_tensor(t, device=device)
    if t_tensor.dtype.is_floating_point:
        raise TypeError("timesteps must be integers")
    scalar = t_tensor.ndim == 0
    t_tensor = torch.atleast_1d(t_tensor).to(torch.float64)

    half = dim // 2
    freqs = torch.exp(
        -math.log(EMBEDDING_BASE)
        * torch.arange(half, dtype=torch.float64, device=t_tensor.device)
        / half
    )
    angles = t_tensor[:, None] * freqs[None, :]
    out = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1).to(dtype)
    return out[0] if scalar else out
