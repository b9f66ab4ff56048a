"""Joint timestep-modality conditioning.

A single embedding vector c = e_t + e_m (sinusoidal timestep embedding plus a
learned per-modality embedding) drives every adaptive normalization site in
the denoiser.  Each site owns two small MLPs producing a per-channel scale and
shift; the scale is parameterized as 1 + residual so that zero-initialized
final layers leave the network exactly at its unconditioned behavior.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import torch
import torch.nn.functional as F
from torch import nn

from .schedule import timestep_embedding

GROUP_NORM_EPS = 1e-5
MAX_NORM_GROUPS = 32
MODALITY_EMBED_STD = 0.02


class Modality(IntEnum):
    """Input representation codes; the integer values index the embedding table."""

    PRGB = 0
    PCA = 1
    SAR = 2


MODALITY_ORDER: tuple[Modality, ...] = (Modality.PRGB, Modality.PCA, Modality.SAR)

_MODALITY_NAMES = {"prgb": Modality.PRGB, "pca": Modality.PCA, "sar": Modality.SAR}


def modality_from_name(name: str) -> Modality:
    try:
        return _MODALITY_NAMES[name.strip().lower()]
    except KeyError:
        raise ValueError(f"unknown modality {name!r}; expected one of {sorted(_MODALITY_NAMES)}")


def norm_groups(channels: int) -> int:
    """Group count for normalization: min(32, channels), must divide channels."""
    g = min(MAX_NORM_GROUPS, channels)
    if channels % g != 0:
        raise ValueError(f"{channels} channels not divisible into {g} groups")
    return g


@dataclass(frozen=True)
class FiLMParams:
    """Per-channel scale and shift; shapes (C,) or (N, C)."""

    gamma: torch.Tensor
    beta: torch.Tensor

    def __post_init__(self) -> None:
        if self.gamma.shape != self.beta.shape:
            raise ValueError(
                f"gamma/beta shape mismatch: {tuple(self.gamma.shape)} vs {tuple(self.beta.shape)}"
            )
        if self.gamma.ndim not in (1, 2):
            raise ValueError("expected (C,) or (N, C) parameters")


def adaptive_group_norm(
    h: torch.Tensor,
    params: FiLMParams | None,
    *,
    groups: int | None = None,
    eps: float = GROUP_NORM_EPS,
) -> torch.Tensor:
    """Group-normalize then apply the conditioned scale and shift.

    With ``params=None`` this is plain group normalization, which by the
    residual scale parameterization is also the exact output under
    zero-initialized conditioning.
    """
    if h.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) input, got shape {tuple(h.shape)}")
    if torch.isnan(h).any():
        raise ValueError("NaN in normalization input")
    channels = h.shape[1]
    g = norm_groups(channels) if groups is None else groups
    if channels % g != 0:
        raise ValueError(f"{channels} channels not divisible into {g} groups")
    out = F.group_norm(h, g, eps=eps)
    if params is None:
        return out
    gamma, beta = params.gamma, params.beta
    if gamma.shape[-1] != channels:
        raise ValueError(f"conditioning has {gamma.shape[-1]} channels, activation has {channels}")
    if gamma.ndim == 1:
        gamma = gamma.expand(h.shape[0], -1)
        beta = beta.expand(h.shape[0], -1)
    elif gamma.shape[0] != h.shape[0]:
        raise ValueError("batched conditioning must match the activation batch size")
    return gamma[:, :, None, None] * out + beta[:, :, None, None]


class FiLMSite(nn.Module):
    """Scale/shift generator for one normalization site.

    Two independent two-layer MLPs map the conditioning vector to per-channel
    parameters; hidden width equals the conditioning width.  The final layers
    start at zero so gamma = 1 and beta = 0 until adaptation moves them.
    """

    def __init__(self, channels: int, cond_width: int) -> None:
        super().__init__()
        self.channels = channels
        self.cond_width = cond_width
        self.mlp_gamma = nn.Sequential(
            nn.Linear(cond_width, cond_width),
            nn.SiLU(),
            nn.Linear(cond_width, channels),
        )
        self.mlp_beta = nn.Sequential(
            nn.Linear(cond_width, cond_width),
            nn.SiLU(),
            nn.Linear(cond_width, channels),
        )
        self.reset_identity()

    def reset_identity(self) -> None:
        for mlp in (self.mlp_gamma, self.mlp_beta):
            last = mlp[-1]
            nn.init.zeros_(last.weight)
            nn.init.zeros_(last.bias)

    def forward(self, cond: torch.Tensor) -> FiLMParams:
        if cond.shape[-1] != self.cond_width:
            raise ValueError(
                f"conditioning width {cond.shape[-1]} does not match site width {self.cond_width}"
            )
        return FiLMParams(gamma=1.0 + self.mlp_gamma(cond), beta=self.mlp_beta(cond))


class FiLMConditioner(nn.Module):
    """All trainable state for adaptation: one embedding table shared across
    sites plus a (gamma, beta) MLP pair per site.

    ``sites`` maps site names to channel counts; names must be valid module
    names (no dots).
    """

    def __init__(
        self,
        sites: dict[str, int],
        cond_width: int,
        num_timesteps: int,
    ) -> None:
        super().__init__()
        if cond_width < 2 or cond_width % 2 != 0:
            raise ValueError(f"cond_width must be an even integer >= 2, got {cond_width}")
        if num_timesteps < 1:
            raise ValueError("num_timesteps must be >= 1")
        if not sites:
            raise ValueError("at least one conditioning site is required")
        self.cond_width = cond_width
        self.num_timesteps = num_timesteps
        self.site_names = tuple(sites)
        self.modality_embedding = nn.Embedding(len(MODALITY_ORDER), cond_width)
        self.sites = nn.ModuleDict(
            {name: FiLMSite(channels, cond_width) for name, channels in sites.items()}
        )
        self.reset_identity()

    def reset_identity(self) -> None:
        """Zero every site's final layers; redraw small modality embeddings."""
        nn.init.normal_(self.modality_embedding.weight, std=MODALITY_EMBED_STD)
        for site in self.sites.values():
            site.reset_identity()

    def _as_index_vector(self, value, batch: int, upper: int, what: str) -> torch.Tensor:
        v = torch.as_tensor(value, dtype=torch.long)
        if v.ndim == 0:
            v = v.expand(batch)
        if v.shape != (batch,):
            raise ValueError(f"{what} must be scalar or length-{batch}, got shape {tuple(v.shape)}")
        if v.numel() and (v.min() < 0 or v.max() > upper):
            raise ValueError(f"{what} out of range [0, {upper}]")
        return v

    def conditioning_vector(self, t, m, batch: int = 1) -> torch.Tensor:
        """c = e_t + e_m with shape (batch, cond_width)."""
        t_vec = self._as_index_vector(t, batch, self.num_timesteps, "timestep")
        m_vec = self._as_index_vector(m, batch, len(MODALITY_ORDER) - 1, "modality")
        weight = self.modality_embedding.weight
        e_t = timestep_embedding(t_vec, self.cond_width, dtype=weight.dtype, device=weight.device)
        return e_t + self.modality_embedding(m_vec)

    def film_params(self, site: str, t, m, batch: int = 1) -> FiLMParams:
        return self.sites[site](self.conditioning_vector(t, m, batch))

    def film_fn(self, t, m, batch: int):
        """Bind (t, m) once; the backbone then queries sites by name."""
        cond = self.conditioning_vector(t, m, batch)
        cache: dict[str, FiLMParams] = {}

        def fn(site: str) -> FiLMParams:
            if site not in cache:
                cache[site] = self.sites[site](cond)
            return cache[site]

        return fn
