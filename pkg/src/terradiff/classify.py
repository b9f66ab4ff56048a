"""Pixel classification on frozen denoiser features.

Features come from one decoder tap at a fixed timestep, extracted per
modality and concatenated in the canonical modality order.  Training gathers
per-pixel features from overlap-averaged dense maps at labeled points;
dense prediction applies the head per patch and averages the overlapping
probability maps.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import DenoiserModel, features_batch
from .checkpoint import load_tensors, save_tensors
from .conditioning import MODALITY_ORDER, Modality
from .dataio import (
    DEFAULT_PATCH_SIZE,
    DEFAULT_STRIDE,
    PatchGrid,
    SceneBundle,
    merge_overlaps,
    tile_patches,
)
from .schedule import NoiseSchedule, make_linear_schedule

NOISE_FIXED = "fixed"
NOISE_FRESH = "fresh"

_SEED_MIX = 1_000_003


@dataclass(frozen=True)
class FeatureSpec:
    """Where features come from: tap layer, conditioning timestep, modality
    set, tiling geometry, and the noising policy for t > 0."""

    layer: int
    timestep: int
    modalities: tuple[Modality, ...] = MODALITY_ORDER
    patch_size: int = DEFAULT_PATCH_SIZE
    stride: int = DEFAULT_STRIDE
    noise_mode: str = NOISE_FIXED
    noise_seed: int | None = 0

    def __post_init__(self) -> None:
        if self.layer < 0 or self.timestep < 0:
            raise ValueError("layer and timestep must be non-negative")
        mods = tuple(Modality(int(m)) for m in self.modalities)
        if not mods or len(set(mods)) != len(mods):
            raise ValueError("modalities must be non-empty and unique")
        # Canonical order fixes the concatenation layout.
        object.__setattr__(self, "modalities", tuple(sorted(mods, key=int)))
        if self.noise_mode not in (NOISE_FIXED, NOISE_FRESH):
            raise ValueError(f"unknown noise_mode {self.noise_mode!r}")
        if self.noise_mode == NOISE_FIXED and self.noise_seed is None:
            raise ValueError("fixed noise_mode requires a noise_seed")


@dataclass
class PixelFeatureSet:
    """Per-pixel feature rows with labels; provenance records how they were made."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features must be (N, D) aligned with labels (N,)")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        if len(self.labels) and (self.labels.min() < 1 or self.labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in [1, {self.num_classes}]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class ClassifierConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    batch_size: int = 64
    max_epochs: int = 10
    patience: int = 3
    hidden: tuple[int, int] = (256, 128)
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("bad classifier config")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5)")


class MLPHead(nn.Module):
    """Small MLP over standardized feature rows."""

    def __init__(self, in_dim: int, num_classes: int, hidden: tuple[int, ...] = (256, 128)):
        super().__init__()
        self.in_dim = in_dim
        self.num_classes = num_classes
        self.hidden = tuple(hidden)
        dims = [in_dim, *self.hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.SiLU()]
        layers.append(nn.Linear(dims[-1], num_classes))
        self.mlp = nn.Sequential(*layers)
        self.register_buffer("feat_mean", torch.zeros(in_dim))
        self.register_buffer("feat_std", torch.ones(in_dim))

    def set_normalizer(self, mean: torch.Tensor, std: torch.Tensor) -> None:
        self.feat_mean.copy_(mean)
        self.feat_std.copy_(std.clamp_min(1e-6))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.mlp((x - self.feat_mean) / self.feat_std)

    def probabilities(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.forward(x), dim=-1)


def resolve_noise_seed(spec: FeatureSpec) -> int:
    """The run's base noise seed: the configured one for fixed mode, a freshly
    drawn (and returned, so callers can record it) seed otherwise."""
    if spec.noise_mode == NOISE_FIXED:
        return int(spec.noise_seed)
    return int(np.random.SeedSequence().entropy % (2**31))


def _modality_generator(base_seed: int, m: Modality) -> torch.Generator:
    return torch.Generator().manual_seed((base_seed * _SEED_MIX + int(m)) % (2**63))


def patch_feature_stack(
    model: DenoiserModel,
    scene: SceneBundle,
    spec: FeatureSpec,
    sched: NoiseSchedule,
    base_seed: int,
) -> tuple[PatchGrid, torch.Tensor]:
    """Per-patch features concatenated over modalities: (P, D, S, S).

    Noise (for t > 0) is drawn once per modality from a generator derived
    from ``base_seed``, so results do not depend on batching or call order.
    """
    grid = None
    parts: list[torch.Tensor] = []
    for m in spec.modalities:
        g, patches = tile_patches(scene.representation(m), spec.patch_size, spec.stride)
        grid = grid or g
        x = torch.from_numpy(patches).permute(0, 3, 1, 2).contiguous()
        eps = None
        if spec.timestep > 0:
            eps = torch.randn(x.shape, generator=_modality_generator(base_seed, m))
        parts.append(
            features_batch(model, x, spec.timestep, m, spec.layer, sched, eps=eps)
        )
    return grid, torch.cat(parts, dim=1)


def dense_feature_map(
    model: DenoiserModel,
    scene: SceneBundle,
    spec: FeatureSpec,
    sched: NoiseSchedule,
    base_seed: int,
) -> np.ndarray:
    """Overlap-averaged (H, W, D) feature image over ``spec.modalities``."""
    grid, feats = patch_feature_stack(model, scene, spec, sched, base_seed)
    hwc = feats.permute(0, 2, 3, 1).numpy()
    return merge_overlaps(hwc, grid).astype(np.float32)


def _spec_provenance(spec: FeatureSpec, base_seed: int, feature_dim: int) -> dict:
    return {
        "layer": spec.layer,
        "timestep": spec.timestep,
        "modalities": [m.name.lower() for m in spec.modalities],
        "patch_size": spec.patch_size,
        "stride": spec.stride,
        "noise_mode": spec.noise_mode,
        "noise_seed": base_seed,
        "feature_dim": feature_dim,
    }


def build_feature_dataset(
    model: DenoiserModel,
    scene: SceneBundle,
    spec: FeatureSpec,
    sched: NoiseSchedule | None = None,
    split: str = "train",
) -> PixelFeatureSet:
    """Feature rows at the labeled pixels of ``split``."""
    if sched is None:
        sched = make_linear_schedule(model.num_timesteps)
    base_seed = resolve_noise_seed(spec)
    dense = dense_feature_map(model, scene, spec, sched, base_seed)
    labels = scene.labels(split)
    features = dense[labels.rows, labels.cols]
    prov = _spec_provenance(spec, base_seed, dense.shape[-1])
    prov["split"] = split
    return PixelFeatureSet(
        features=features,
        labels=labels.classes.copy(),
        num_classes=scene.num_classes,
        provenance=prov,
    )


def shuffle_labels(data: PixelFeatureSet, seed: int) -> PixelFeatureSet:
    """Control dataset: same features, labels permuted across rows."""
    rng = np.random.default_rng(seed)
    permuted = data.labels[rng.permutation(len(data))]
    return PixelFeatureSet(
        features=data.features.copy(),
        labels=permuted,
        num_classes=data.num_classes,
        provenance={**data.provenance, "label_shuffle_seed": seed},
    )


def _stratified_split(labels: np.ndarray, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        rng.shuffle(idx)
        n_val = int(round(fraction * len(idx))) if len(idx) >= 2 else 0
        n_val = min(n_val, len(idx) - 1)
        val_idx.extend(idx[:n_val])
        train_idx.extend(idx[n_val:])
    return np.sort(np.array(train_idx, dtype=np.int64)), np.sort(
        np.array(val_idx, dtype=np.int64)
    )


def train_classifier(
    data: PixelFeatureSet,
    cfg: ClassifierConfig,
) -> tuple[MLPHead, dict]:
    """Fit the head with early stopping on a stratified validation slice;
    the best-validation state is restored before returning."""
    if len(data) < 2 or len(np.unique(data.labels)) < 2:
        raise ValueError("training needs at least two classes with samples")
    train_idx, val_idx = _stratified_split(data.labels, cfg.val_fraction, cfg.seed)
    x = torch.from_numpy(data.features)
    y = torch.from_numpy(data.labels - 1)

    torch.manual_seed(cfg.seed)
    head = MLPHead(data.dim, data.num_classes, cfg.hidden)
    x_train = x[train_idx]
    head.set_normalizer(x_train.mean(dim=0), x_train.std(dim=0))
    optimizer = torch.optim.Adam(
        head.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    shuffler = torch.Generator().manual_seed(cfg.seed + 1)

    history: list[dict] = []
    best_val = float("inf")
    best_state = copy.deepcopy(head.state_dict())
    best_epoch = 0
    bad_epochs = 0
    stopped_early = False
    for epoch in range(1, cfg.max_epochs + 1):
        head.train()
        perm = torch.randperm(len(train_idx), generator=shuffler)
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            batch = train_idx[perm[start : start + cfg.batch_size].numpy()]
            loss = F.cross_entropy(head(x[batch]), y[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(batch)
        train_loss = epoch_loss / len(train_idx)

        head.eval()
        if len(val_idx):
            with torch.no_grad():
                val_loss = float(F.cross_entropy(head(x[val_idx]), y[val_idx]))
        else:
            val_loss = train_loss
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})

        if val_loss < best_val - 1e-8:
            best_val = val_loss
            best_state = copy.deepcopy(head.state_dict())
            best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.patience:
                stopped_early = True
                break

    head.load_state_dict(best_state)
    head.eval()
    log = {
        "history": history,
        "best_epoch": best_epoch,
        "best_val_loss": best_val if best_epoch else None,
        "stopped_early": stopped_early,
        "train_size": int(len(train_idx)),
        "val_size": int(len(val_idx)),
    }
    return head, log


def predict_dense(
    model: DenoiserModel,
    scene: SceneBundle,
    head: MLPHead,
    spec: FeatureSpec,
    sched: NoiseSchedule | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Dense prediction: per-patch class probabilities averaged over overlaps.

    Returns (class_map, probabilities) with shapes (H, W) and (H, W, K);
    argmax ties resolve to the lowest class id.
    """
    if sched is None:
        sched = make_linear_schedule(model.num_timesteps)
    base_seed = resolve_noise_seed(spec)
    grid, feats = patch_feature_stack(model, scene, spec, sched, base_seed)
    s = grid.patch_size
    k = head.num_classes
    acc = np.zeros((grid.height, grid.width, k), dtype=np.float64)
    count = np.zeros((grid.height, grid.width, 1), dtype=np.float64)
    head.eval()
    with torch.no_grad():
        for i, (r, c) in enumerate(grid.origins):
            rows = feats[i].permute(1, 2, 0).reshape(-1, feats.shape[1])
            probs = head.probabilities(rows).reshape(s, s, k).numpy()
            acc[r : r + s, c : c + s] += probs
            count[r : r + s, c : c + s] += 1.0
    probs = (acc / count).astype(np.float32)
    class_map = probs.argmax(axis=-1).astype(np.int64) + 1
    return class_map, probs


def save_head(path, head: MLPHead, extra_meta: dict | None = None) -> None:
    meta = {
        "kind": "classifier-head",
        "in_dim": head.in_dim,
        "num_classes": head.num_classes,
        "hidden": list(head.hidden),
        "provenance": extra_meta or {},
    }
    tensors = {name: t.detach().cpu().numpy() for name, t in head.state_dict().items()}
    save_tensors(path, tensors, meta)


def load_head(path) -> tuple[MLPHead, dict]:
    tensors, meta = load_tensors(path)
    if meta.get("kind") != "classifier-head":
        raise ValueError("container does not hold a classifier head")
    head = MLPHead(int(meta["in_dim"]), int(meta["num_classes"]), tuple(meta["hidden"]))
    head.load_state_dict({name: torch.from_numpy(a) for name, a in tensors.items()})
    head.eval()
    return head, meta
