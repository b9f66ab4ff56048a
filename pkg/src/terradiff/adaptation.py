"""Conditioner adaptation: denoising regression on scene patches with the
trunk frozen.

Each step draws patches from the configured modality mix, noises them at
uniformly random timesteps, and minimizes mean squared error between the true
and predicted noise.  Only conditioner parameters receive updates.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import torch

from .backbone import DenoiserModel, partition_parameters
from .conditioning import MODALITY_ORDER, Modality
from .dataio import DEFAULT_PATCH_SIZE, DEFAULT_STRIDE, SceneBundle, tile_patches
from .schedule import NoiseSchedule, make_linear_schedule, q_sample

INPUT_RANGE_TOL = 1e-6

MIX_WITHIN_BATCH = "within_batch"
MIX_PER_BATCH = "per_batch"


@dataclass(frozen=True)
class AdaptationConfig:
    steps: int = 2000
    batch_size: int = 32
    learning_rate: float = 3e-3
    adam_betas: tuple[float, float] = (0.9, 0.999)
    modalities: tuple[Modality, ...] = MODALITY_ORDER
    mix_mode: str = MIX_WITHIN_BATCH
    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_STRIDE
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mix_mode not in (MIX_WITHIN_BATCH, MIX_PER_BATCH):
            raise ValueError(f"unknown mix_mode {self.mix_mode!r}")
        mods = tuple(Modality(int(m)) for m in self.modalities)
        if not mods or len(set(mods)) != len(mods):
            raise ValueError("modalities must be non-empty and unique")
        object.__setattr__(self, "modalities", mods)


class AdaptationDivergedError(RuntimeError):
    """Loss left the finite range; carries the step and, when identifiable,
    the modality of the offending batch item."""

    def __init__(self, step: int, modality: Modality | None) -> None:
        where = modality.name if modality is not None else "unidentified modality"
        super().__init__(f"non-finite loss at step {step} ({where})")
        self.step = step
        self.modality = modality


@dataclass
class LossTrace:
    """Per-step batch losses plus running per-modality means."""

    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    modality_running: dict[str, list[float]] = field(default_factory=dict)
    _sums: dict[str, float] = field(default_factory=dict, repr=False)
    _counts: dict[str, int] = field(default_factory=dict, repr=False)

    def record(self, step: int, loss: float, per_modality: dict[Modality, list[float]]) -> None:
        self.steps.append(step)
        self.losses.append(loss)
        for m in MODALITY_ORDER:
            name = m.name.lower()
            for v in per_modality.get(m, ()):
                self._sums[name] = self._sums.get(name, 0.0) + v
                self._counts[name] = self._counts.get(name, 0) + 1
            mean = (
                self._sums[name] / self._counts[name]
                if self._counts.get(name)
                else math.nan
            )
            self.modality_running.setdefault(name, []).append(mean)

    def window_mean(self, start: int, stop: int) -> float:
        window = self.losses[start:stop]
        if not window:
            raise ValueError(f"empty loss window [{start}, {stop})")
        return sum(window) / len(window)

    def to_csv(self, path) -> None:
        names = [m.name.lower() for m in MODALITY_ORDER]
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"] + [f"running_mean_{n}" for n in names])
            for i, step in enumerate(self.steps):
                writer.writerow(
                    [step, f"{self.losses[i]:.8f}"]
                    + [f"{self.modality_running[n][i]:.8f}" for n in names]
                )


def modality_tiles(
    scene: SceneBundle,
    modalities: tuple[Modality, ...],
    patch_size: int,
    stride: int,
) -> dict[Modality, torch.Tensor]:
    """Pre-tiled patches per modality as (P, 3, S, S) float32 tensors."""
    out: dict[Modality, torch.Tensor] = {}
    for m in modalities:
        _, patches = tile_patches(scene.representation(m), patch_size, stride)
        out[m] = torch.from_numpy(patches).permute(0, 3, 1, 2).contiguous()
    return out


def stratified_counts(batch_size: int, n_groups: int) -> list[int]:
    """Split a batch as evenly as possible; earlier groups take the remainder."""
    base, rem = divmod(batch_size, n_groups)
    return [base + (1 if i < rem else 0) for i in range(n_groups)]


def sample_training_batch(
    tiles: dict[Modality, torch.Tensor],
    cfg: AdaptationConfig,
    rng: torch.Generator,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw (x0, modality) pairs according to the mix policy."""
    mods = cfg.modalities
    if cfg.mix_mode == MIX_PER_BATCH:
        pick = int(torch.randint(0, len(mods), (1,), generator=rng))
        chosen = [(mods[pick], cfg.batch_size)]
    else:
        chosen = list(zip(mods, stratified_counts(cfg.batch_size, len(mods))))
    xs, ms = [], []
    for m, count in chosen:
        pool = tiles[m]
        idx = torch.randint(0, pool.shape[0], (count,), generator=rng)
        xs.append(pool[idx])
        ms.append(torch.full((count,), int(m), dtype=torch.long))
    return torch.cat(xs), torch.cat(ms)


def denoise_loss(
    model,
    x0: torch.Tensor,
    modalities: torch.Tensor,
    sched: NoiseSchedule,
    rng: torch.Generator | None = None,
    *,
    t: torch.Tensor | None = None,
    eps: torch.Tensor | None = None,
    reduce: bool = True,
) -> torch.Tensor:
    """Noise-prediction MSE.  Draws t ~ U[1, T] and eps ~ N(0, 1) per item
    unless given; returns the batch mean, or per-item losses with
    ``reduce=False``."""
    if x0.ndim != 4:
        raise ValueError(f"expected (N, C, S, S) inputs, got {tuple(x0.shape)}")
    max_abs = x0.abs().max().item()
    if max_abs > 1.0 + INPUT_RANGE_TOL:
        raise ValueError(f"inputs must lie in [-1, 1], found magnitude {max_abs:.4g}")
    n = x0.shape[0]
    if t is None:
        t = torch.randint(1, sched.timesteps + 1, (n,), generator=rng)
    else:
        t = torch.atleast_1d(torch.as_tensor(t, dtype=torch.long))
        if t.numel() == 1:
            t = t.expand(n)
    if eps is None:
        eps = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    elif eps.shape != x0.shape:
        raise ValueError("eps must match x0 shape")
    x_t = q_sample(x0, t.numpy(), eps, sched)
    eps_hat = model(x_t, t, modalities)
    per_item = (eps - eps_hat).square().flatten(1).mean(dim=1)
    return per_item.mean() if reduce else per_item


def adapt(
    model: DenoiserModel,
    scene: SceneBundle,
    cfg: AdaptationConfig,
    sched: NoiseSchedule | None = None,
) -> tuple[DenoiserModel, LossTrace]:
    """Run the adaptation loop; returns the model and its loss trace.

    Deterministic for a fixed (model, scene, cfg); the trunk is re-frozen on
    entry so only conditioner parameters can move.
    """
    if sched is None:
        sched = make_linear_schedule(model.num_timesteps)
    if sched.timesteps != model.num_timesteps:
        raise ValueError(
            f"schedule has {sched.timesteps} steps, model expects {model.num_timesteps}"
        )
    partition_parameters(model)
    params = [p for p in model.conditioner.parameters()]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.adam_betas)
    rng = torch.Generator().manual_seed(cfg.seed)
    tiles = modality_tiles(scene, cfg.modalities, cfg.patch_size, cfg.stride)
    trace = LossTrace()

    model.train()
    for step in range(1, cfg.steps + 1):
        x0, m = sample_training_batch(tiles, cfg, rng)
        try:
            per_item = denoise_loss(model, x0, m, sched, rng, reduce=False)
        except ValueError as exc:
            if "NaN" in str(exc):
                raise AdaptationDivergedError(step, None) from exc
            raise
        finite = torch.isfinite(per_item)
        if not finite.all():
            bad = int((~finite).nonzero()[0])
            raise AdaptationDivergedError(step, Modality(int(m[bad])))
        loss = per_item.mean()
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        per_modality: dict[Modality, list[float]] = {}
        detached = per_item.detach()
        for mod in cfg.modalities:
            mask = m == int(mod)
            if mask.any():
                per_modality[mod] = detached[mask].tolist()
        trace.record(step, float(loss.detach()), per_modality)
    model.eval()
    return model, trace
