"""Adaptation loop: batch mixing, the denoising objective, trunk freezing,
divergence handling, and the loss trace."""

from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from terradiff.adaptation import (
    AdaptationConfig,
    AdaptationDivergedError,
    LossTrace,
    adapt,
    denoise_loss,
    modality_tiles,
    sample_training_batch,
    stratified_counts,
)
from terradiff.backbone import DenoiserConfig, build_model, frozen_hashes
from terradiff.conditioning import MODALITY_ORDER, Modality
from terradiff.dataio import synth_scene
from terradiff.schedule import make_linear_schedule

SMALL = DenoiserConfig(
    image_size=32,
    base_width=32,
    channel_mults=(1, 2),
    num_res_blocks=1,
    attention_resolutions=(16,),
    cond_width=16,
)

TRAIN_CFG = AdaptationConfig(
    steps=8,
    batch_size=6,
    patch_size=32,
    stride=16,
    seed=0,
)


@pytest.fixture(scope="module")
def scene():
    return synth_scene(seed=3, height=64, width=64, num_classes=4, bands=24)


@pytest.fixture(scope="module")
def sched():
    return make_linear_schedule(timesteps=50)


class _ZeroModel:
    def __call__(self, x, t, m):
        return torch.zeros_like(x)


class TestBatchMixing:
    def test_stratified_counts_match_reference_split(self):
        assert stratified_counts(32, 3) == [11, 11, 10]
        assert stratified_counts(6, 3) == [2, 2, 2]
        assert stratified_counts(7, 2) == [4, 3]

    def test_within_batch_covers_all_modalities(self, scene):
        cfg = AdaptationConfig(steps=1, batch_size=32, patch_size=32, stride=16)
        tiles = modality_tiles(scene, cfg.modalities, 32, 16)
        x0, m = sample_training_batch(tiles, cfg, torch.Generator().manual_seed(0))
        assert x0.shape == (32, 3, 32, 32)
        counts = torch.bincount(m, minlength=3).tolist()
        assert sorted(counts) == [10, 11, 11]

    def test_per_batch_uses_single_modality(self, scene):
        cfg = AdaptationConfig(
            steps=1, batch_size=8, patch_size=32, stride=16, mix_mode="per_batch"
        )
        tiles = modality_tiles(scene, cfg.modalities, 32, 16)
        rng = torch.Generator().manual_seed(1)
        seen = set()
        for _ in range(12):
            _, m = sample_training_batch(tiles, cfg, rng)
            values = set(m.tolist())
            assert len(values) == 1
            seen |= values
        assert len(seen) > 1  # the choice varies across steps

    def test_batch_values_come_from_scene_tiles(self, scene):
        cfg = AdaptationConfig(steps=1, batch_size=3, patch_size=32, stride=16)
        tiles = modality_tiles(scene, cfg.modalities, 32, 16)
        x0, m = sample_training_batch(tiles, cfg, torch.Generator().manual_seed(2))
        for i in range(3):
            pool = tiles[Modality(int(m[i]))]
            assert any(torch.equal(x0[i], p) for p in pool)

    def test_restricted_modalities(self, scene):
        cfg = AdaptationConfig(
            steps=1, batch_size=5, patch_size=32, stride=16, modalities=(Modality.PCA,)
        )
        tiles = modality_tiles(scene, cfg.modalities, 32, 16)
        _, m = sample_training_batch(tiles, cfg, torch.Generator().manual_seed(3))
        assert set(m.tolist()) == {int(Modality.PCA)}

    def test_config_validation(self):
        with pytest.raises(ValueError):
            AdaptationConfig(mix_mode="sometimes")
        with pytest.raises(ValueError):
            AdaptationConfig(modalities=())
        with pytest.raises(ValueError):
            AdaptationConfig(modalities=(Modality.PCA, Modality.PCA))
        with pytest.raises(ValueError):
            AdaptationConfig(learning_rate=0.0)

    def test_defaults_match_training_recipe(self):
        cfg = AdaptationConfig()
        assert cfg.steps == 2000
        assert cfg.batch_size == 32
        assert cfg.learning_rate == pytest.approx(3e-3)
        assert cfg.adam_betas == (0.9, 0.999)
        assert cfg.mix_mode == "within_batch"


class TestDenoiseLoss:
    def test_zero_model_zero_noise_gives_zero(self, sched):
        x0 = torch.zeros(2, 3, 8, 8)
        loss = denoise_loss(
            _ZeroModel(), x0, torch.zeros(2, dtype=torch.long), sched,
            t=torch.tensor([5, 9]), eps=torch.zeros_like(x0),
        )
        assert loss.item() == 0.0

    def test_zero_model_recovers_noise_energy(self, sched):
        g = torch.Generator().manual_seed(4)
        x0 = torch.zeros(3, 3, 8, 8)
        eps = torch.randn(x0.shape, generator=g)
        loss = denoise_loss(
            _ZeroModel(), x0, torch.zeros(3, dtype=torch.long), sched,
            t=torch.tensor([10, 20, 30]), eps=eps,
        )
        assert loss.item() == pytest.approx(eps.square().mean().item(), rel=1e-6)

    def test_rejects_out_of_range_inputs(self, sched):
        x0 = torch.full((1, 3, 8, 8), 1.5)
        with pytest.raises(ValueError, match="-1, 1"):
            denoise_loss(_ZeroModel(), x0, torch.zeros(1, dtype=torch.long), sched)

    def test_accepts_boundary_values(self, sched):
        x0 = torch.ones(1, 3, 8, 8)
        loss = denoise_loss(
            _ZeroModel(), x0, torch.zeros(1, dtype=torch.long), sched,
            rng=torch.Generator().manual_seed(5),
        )
        assert torch.isfinite(loss)

    def test_deterministic_under_seeded_rng(self, scene, sched):
        model = build_model(SMALL, seed=1, num_timesteps=50)
        tiles = modality_tiles(scene, MODALITY_ORDER, 32, 16)
        x0, m = sample_training_batch(
            tiles, AdaptationConfig(batch_size=4, patch_size=32, stride=16),
            torch.Generator().manual_seed(6),
        )
        a = denoise_loss(model, x0, m, sched, torch.Generator().manual_seed(7))
        b = denoise_loss(model, x0, m, sched, torch.Generator().manual_seed(7))
        assert a.item() == b.item()


class TestAdapt:
    def test_updates_conditioner_freezes_trunk(self, scene, sched):
        model = build_model(SMALL, seed=2, num_timesteps=50)
        before_frozen = frozen_hashes(model)
        before_cond = [p.detach().clone() for p in model.conditioner.parameters()]
        adapt(model, scene, TRAIN_CFG, sched)
        assert frozen_hashes(model) == before_frozen
        moved = [
            not torch.equal(a, b)
            for a, b in zip(before_cond, model.conditioner.parameters())
        ]
        assert any(moved)

    def test_trace_contents(self, scene, sched):
        model = build_model(SMALL, seed=3, num_timesteps=50)
        _, trace = adapt(model, scene, TRAIN_CFG, sched)
        assert trace.steps == list(range(1, TRAIN_CFG.steps + 1))
        assert len(trace.losses) == TRAIN_CFG.steps
        assert all(math.isfinite(v) for v in trace.losses)
        for name in ("prgb", "pca", "sar"):
            series = trace.modality_running[name]
            assert len(series) == TRAIN_CFG.steps
            assert math.isfinite(series[-1])

    def test_deterministic_for_fixed_seed(self, scene, sched):
        runs = []
        for _ in range(2):
            model = build_model(SMALL, seed=4, num_timesteps=50)
            _, trace = adapt(model, scene, TRAIN_CFG, sched)
            runs.append(trace.losses)
        assert runs[0] == runs[1]

    def test_zero_steps_is_noop(self, scene, sched):
        model = build_model(SMALL, seed=5, num_timesteps=50)
        cfg = AdaptationConfig(steps=0, batch_size=4, patch_size=32, stride=16)
        before = {n: p.detach().clone() for n, p in model.named_parameters()}
        _, trace = adapt(model, scene, cfg, sched)
        assert trace.losses == []
        for n, p in model.named_parameters():
            assert torch.equal(before[n], p)

    def test_loss_decreases_over_short_run(self, scene, sched):
        model = build_model(SMALL, seed=6, num_timesteps=50)
        cfg = AdaptationConfig(steps=60, batch_size=8, patch_size=32, stride=16, seed=1)
        _, trace = adapt(model, scene, cfg, sched)
        leading = trace.window_mean(0, 15)
        trailing = trace.window_mean(45, 60)
        assert trailing < leading

    def test_divergence_reports_step_and_modality(self, scene, sched):
        model = build_model(SMALL, seed=7, num_timesteps=50)
        with torch.no_grad():
            model.backbone.out_conv.bias.fill_(1e25)  # squares to inf in f32
        with pytest.raises(AdaptationDivergedError) as err:
            adapt(model, scene, TRAIN_CFG, sched)
        assert err.value.step == 1
        assert err.value.modality is not None

    def test_schedule_mismatch_rejected(self, scene):
        model = build_model(SMALL, seed=8, num_timesteps=50)
        with pytest.raises(ValueError):
            adapt(model, scene, TRAIN_CFG, make_linear_schedule(timesteps=60))

    def test_trace_csv(self, tmp_path):
        trace = LossTrace()
        trace.record(1, 0.5, {Modality.PRGB: [0.4, 0.6], Modality.SAR: [0.5]})
        trace.record(2, 0.3, {Modality.PCA: [0.3]})
        path = tmp_path / "trace.csv"
        trace.to_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,loss,running_mean_prgb,running_mean_pca,running_mean_sar"
        assert len(lines) == 3
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[2]) == pytest.approx(0.5)
        assert math.isnan(float(first[3]))  # pca unseen at step 1
        second = lines[2].split(",")
        assert float(second[3]) == pytest.approx(0.3)
