"""Command-line interface.

One subcommand per pipeline stage (scene synthesis and preparation, adaptation,
feature extraction, head training, dense prediction, evaluation, the ablation
and sweep studies, patch sampling, similarity statistics) plus ``describe`` for
artifact inspection. Settings come from an INI config file whose keys the
command-line flags mirror and override; every state-changing command writes a
manifest with the fully resolved configuration and seeds so the run can be
replayed. Exit codes: 0 success, 1 usage or configuration error, 2 runtime
failure such as diverged training or a corrupt file.
"""

from __future__ import annotations

import argparse
import configparser
import copy
import json
import os
import shutil
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adaptation import AdaptationConfig, AdaptationDivergedError, adapt
from .analysis import (
    BERLIN_ANCHORING_REFERENCE,
    BERLIN_COMBO_REFERENCE,
    SweepVariant,
    anchoring_ablation,
    cross_modal_similarity,
    modality_combo_ablation,
    save_sweep,
    similarity_variance_comparison,
    sweep_csv,
    timestep_sweep,
    write_experiment_manifest,
)
from .backbone import DenoiserConfig, build_model, partition_parameters, sample_patches
from .checkpoint import ContainerError, describe_container, load_model, save_model
from .classify import (
    ClassifierConfig,
    FeatureSpec,
    build_feature_dataset,
    dense_feature_map,
    load_head,
    predict_dense,
    resolve_noise_seed,
    save_head,
    train_classifier,
)
from .conditioning import MODALITY_ORDER, Modality, modality_from_name
from .dataio import (
    RasterFormatError,
    RasterStack,
    SceneBundle,
    describe_raster,
    describe_scene,
    hsi_to_pca3,
    hsi_to_prgb,
    load_labels,
    load_raster,
    load_scene,
    save_raster,
    save_scene,
    sar_to_pauli,
    synth_scene,
)
from .metrics import evaluate_dense, format_report, report_csv
from .schedule import make_linear_schedule

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

OUTPUT_ROOT_ENV = "TERRADIFF_OUT"


class UsageError(Exception):
    """Bad flags, bad config values, or missing inputs."""


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        items = tuple(int(p) for p in str(text).split(",") if p.strip() != "")
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}")
    if not items:
        raise UsageError(f"expected at least one integer, got {text!r}")
    return items


def _parse_int(text) -> int:
    try:
        return int(text)
    except (TypeError, ValueError):
        raise UsageError(f"expected an integer, got {text!r}")


def _parse_float(text) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise UsageError(f"expected a number, got {text!r}")


def _parse_str(text) -> str:
    return str(text)


def parse_modalities(text: str) -> tuple[Modality, ...]:
    try:
        return tuple(modality_from_name(p) for p in str(text).split(",") if p.strip())
    except ValueError as e:
        raise UsageError(str(e))


# Section -> key -> value parser. Config files and flag overrides both go
# through these, so types and error messages stay identical.
CONFIG_SCHEMA: dict[str, dict[str, object]] = {
    "model": {
        "image_size": _parse_int,
        "base_width": _parse_int,
        "channel_mults": _int_tuple,
        "num_res_blocks": _parse_int,
        "attention_resolutions": _int_tuple,
        "cond_width": _parse_int,
        "in_channels": _parse_int,
        "timesteps": _parse_int,
        "seed": _parse_int,
    },
    "adaptation": {
        "steps": _parse_int,
        "batch_size": _parse_int,
        "learning_rate": _parse_float,
        "modalities": _parse_str,
        "mix_mode": _parse_str,
        "patch_size": _parse_int,
        "stride": _parse_int,
        "seed": _parse_int,
    },
    "features": {
        "layer": _parse_int,
        "timestep": _parse_int,
        "modalities": _parse_str,
        "patch_size": _parse_int,
        "stride": _parse_int,
        "noise_mode": _parse_str,
        "noise_seed": _parse_int,
    },
    "classifier": {
        "learning_rate": _parse_float,
        "weight_decay": _parse_float,
        "batch_size": _parse_int,
        "max_epochs": _parse_int,
        "patience": _parse_int,
        "hidden": _int_tuple,
        "val_fraction": _parse_float,
        "seed": _parse_int,
    },
    "synth": {
        "height": _parse_int,
        "width": _parse_int,
        "classes": _parse_int,
        "bands": _parse_int,
        "train_fraction": _parse_float,
        "sar_mode": _parse_str,
        "seed": _parse_int,
    },
    "output": {
        "root": _parse_str,
    },
}

DEFAULTS: dict[str, dict[str, object]] = {
    "model": {
        "image_size": 64,
        "base_width": 64,
        "channel_mults": (1, 2, 4),
        "num_res_blocks": 2,
        "attention_resolutions": (16,),
        "cond_width": 96,
        "in_channels": 3,
        "timesteps": 1000,
        "seed": 0,
    },
    "adaptation": {
        "steps": 2000,
        "batch_size": 32,
        "learning_rate": 3e-3,
        "modalities": "prgb,pca,sar",
        "mix_mode": "within_batch",
        "patch_size": 64,
        "stride": 32,
        "seed": 0,
    },
    "features": {
        "layer": 2,
        "timestep": 0,
        "modalities": "prgb,pca,sar",
        "patch_size": 64,
        "stride": 32,
        "noise_mode": "fixed",
        "noise_seed": 0,
    },
    "classifier": {
        "learning_rate": 1e-3,
        "weight_decay": 5e-4,
        "batch_size": 64,
        "max_epochs": 10,
        "patience": 3,
        "hidden": (256, 128),
        "val_fraction": 0.1,
        "seed": 0,
    },
    "synth": {
        "height": 192,
        "width": 192,
        "classes": 6,
        "bands": 48,
        "train_fraction": 0.005,
        "sar_mode": "dual",
        "seed": 0,
    },
    "output": {
        "root": "",
    },
}


@dataclass
class RunConfig:
    """Fully resolved settings: defaults, then config file, then flags."""

    sections: dict[str, dict[str, object]] = field(
        default_factory=lambda: copy.deepcopy(DEFAULTS)
    )

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, value) -> None:
        if section not in CONFIG_SCHEMA or key not in CONFIG_SCHEMA[section]:
            raise UsageError(f"unknown config key [{section}] {key}")
        self.sections[section][key] = value

    def output_root(self) -> Path:
        root = str(self.get("output", "root"))
        if not root:
            root = os.environ.get(OUTPUT_ROOT_ENV, "") or "runs"
        return Path(root)


def load_config_file(cfg: RunConfig, path: Path) -> None:
    if not path.is_file():
        raise FileNotFoundError(str(path))
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as e:
        raise UsageError(f"{path}: {e}")
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise UsageError(f"{path}: unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_SCHEMA[section]:
                raise UsageError(f"{path}: unknown config key [{section}] {key}")
            try:
                cfg.set(section, key, CONFIG_SCHEMA[section][key](raw))
            except UsageError as e:
                raise UsageError(f"{path}: [{section}] {key}: {e}")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        load_config_file(cfg, Path(args.config))
    for dest, value in vars(args).items():
        if "__" not in dest or value is None:
            continue
        section, key = dest.split("__", 1)
        cfg.set(section, key, CONFIG_SCHEMA[section][key](value))
    return cfg


def model_config(cfg: RunConfig) -> DenoiserConfig:
    m = cfg.sections["model"]
    return DenoiserConfig(
        image_size=m["image_size"],
        base_width=m["base_width"],
        channel_mults=tuple(m["channel_mults"]),
        num_res_blocks=m["num_res_blocks"],
        attention_resolutions=tuple(m["attention_resolutions"]),
        cond_width=m["cond_width"],
        in_channels=m["in_channels"],
    )


def adaptation_config(cfg: RunConfig) -> AdaptationConfig:
    a = cfg.sections["adaptation"]
    return AdaptationConfig(
        steps=a["steps"],
        batch_size=a["batch_size"],
        learning_rate=a["learning_rate"],
        modalities=parse_modalities(a["modalities"]),
        mix_mode=a["mix_mode"],
        patch_size=a["patch_size"],
        stride=a["stride"],
        seed=a["seed"],
    )


def feature_spec(cfg: RunConfig) -> FeatureSpec:
    f = cfg.sections["features"]
    return FeatureSpec(
        layer=f["layer"],
        timestep=f["timestep"],
        modalities=parse_modalities(f["modalities"]),
        patch_size=f["patch_size"],
        stride=f["stride"],
        noise_mode=f["noise_mode"],
        noise_seed=f["noise_seed"],
    )


def classifier_config(cfg: RunConfig) -> ClassifierConfig:
    c = cfg.sections["classifier"]
    return ClassifierConfig(
        learning_rate=c["learning_rate"],
        weight_decay=c["weight_decay"],
        batch_size=c["batch_size"],
        max_epochs=c["max_epochs"],
        patience=c["patience"],
        hidden=tuple(c["hidden"]),
        val_fraction=c["val_fraction"],
        seed=c["seed"],
    )


class _Outputs:
    """Paths a command is about to create; removed again if it fails."""

    def __init__(self) -> None:
        self._files: list[Path] = []
        self._dirs: list[Path] = []

    def file(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self._files.append(path)
        return path

    def directory(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            self._dirs.append(path)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def discard(self) -> None:
        for p in reversed(self._files):
            p.unlink(missing_ok=True)
        for d in reversed(self._dirs):
            shutil.rmtree(d, ignore_errors=True)


def _require_input(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"missing {what}: {path}")
    return path


def _manifest_for(command: str, cfg: RunConfig, sections: list[str], inputs: dict, outputs: dict, extra: dict | None = None) -> dict:
    entry = {
        "command": command,
        "package_version": __version__,
        "config": {s: _jsonable(cfg.sections[s]) for s in sections},
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    entry.update(extra or {})
    return entry


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _load_scene(path) -> SceneBundle:
    return load_scene(_require_input(path, "scene directory"))


def _load_model(path):
    return load_model(_require_input(path, "model checkpoint"))


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(args, cfg: RunConfig, out: _Outputs) -> int:
    s = cfg.sections["synth"]
    target = Path(args.out) if args.out else cfg.output_root() / "scene"
    if (target / "scene.json").exists():
        raise UsageError(f"refusing to overwrite existing scene at {target}")
    scene = synth_scene(
        seed=s["seed"],
        height=s["height"],
        width=s["width"],
        num_classes=s["classes"],
        bands=s["bands"],
        train_fraction=s["train_fraction"],
        sar_mode=s["sar_mode"],
    )
    out.directory(target)
    save_scene(scene, target)
    manifest = _manifest_for(
        "synth", cfg, ["synth"], {}, {"scene": target},
        {"train_points": len(scene.train_labels), "test_points": len(scene.test_labels)},
    )
    write_experiment_manifest(out.file(target / "run_manifest.json"), manifest)
    print(f"scene written to {target} ({scene.hsi.height}x{scene.hsi.width}, "
          f"{s['classes']} classes, {len(scene.train_labels)} train points)")
    return EXIT_OK


def cmd_prepare(args, cfg: RunConfig, out: _Outputs) -> int:
    hsi = load_raster(_require_input(args.hsi, "HSI raster"))
    sar = load_raster(_require_input(args.sar, "SAR raster"))
    num_classes = args.classes
    train = load_labels(
        _require_input(args.train_labels, "training label CSV"),
        hsi.height, hsi.width, num_classes, split="train",
    )
    test = load_labels(
        _require_input(args.test_labels, "test label CSV"),
        hsi.height, hsi.width, num_classes, split="test",
    )
    band_indices = tuple(_int_tuple(args.prgb_bands)) if args.prgb_bands else None
    scene = SceneBundle(
        hsi=hsi,
        sar=sar,
        prgb=hsi_to_prgb(hsi, band_indices=band_indices),
        pca3=hsi_to_pca3(hsi),
        sar3=sar_to_pauli(sar),
        train_labels=train,
        test_labels=test,
        num_classes=num_classes,
        class_names=tuple(f"class_{i}" for i in range(1, num_classes + 1)),
        meta={"source_hsi": str(args.hsi), "source_sar": str(args.sar)},
    )
    target = Path(args.out) if args.out else cfg.output_root() / "scene"
    if (target / "scene.json").exists():
        raise UsageError(f"refusing to overwrite existing scene at {target}")
    out.directory(target)
    save_scene(scene, target)
    manifest = _manifest_for(
        "prepare", cfg, [],
        {"hsi": args.hsi, "sar": args.sar, "train_labels": args.train_labels,
         "test_labels": args.test_labels},
        {"scene": target},
        {"classes": num_classes, "prgb_bands": list(band_indices) if band_indices else "by-wavelength"},
    )
    write_experiment_manifest(out.file(target / "run_manifest.json"), manifest)
    print(f"scene written to {target}")
    return EXIT_OK


def cmd_adapt(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    m = cfg.sections["model"]
    model = build_model(model_config(cfg), seed=m["seed"], num_timesteps=m["timesteps"])
    sched = make_linear_schedule(m["timesteps"])
    adapt_cfg = adaptation_config(cfg)
    model, trace = adapt(model, scene, adapt_cfg, sched)
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "ckpt" / "model.tdck")
    save_model(model, target, extra_meta={
        "command": "adapt",
        "scene": str(args.scene),
        "model_seed": m["seed"],
        "adaptation": _jsonable(cfg.sections["adaptation"]),
        "final_loss": float(trace.losses[-1]) if len(trace.losses) else None,
    })
    trace_path = out.file(target.with_suffix(".loss_trace.csv"))
    trace.to_csv(trace_path)
    manifest = _manifest_for(
        "adapt", cfg, ["model", "adaptation"], {"scene": args.scene},
        {"checkpoint": target, "loss_trace": trace_path},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    partition = partition_parameters(model)
    print(f"adapted {adapt_cfg.steps} steps; trainable ratio "
          f"{partition.trainable_ratio:.4f}; checkpoint at {target}")
    return EXIT_OK


def cmd_extract(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    sched = make_linear_schedule(model.num_timesteps)
    spec = feature_spec(cfg)
    base_seed = resolve_noise_seed(spec)
    dense = dense_feature_map(model, scene, spec, sched, base_seed)
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "features" / "features.npz")
    np.savez_compressed(target, features=dense)
    manifest = _manifest_for(
        "extract", cfg, ["features"], {"scene": args.scene, "model": args.model},
        {"features": target},
        {"feature_shape": list(dense.shape), "noise_seed": base_seed},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    print(f"features {dense.shape} written to {target}")
    return EXIT_OK


def cmd_train_head(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    sched = make_linear_schedule(model.num_timesteps)
    spec = feature_spec(cfg)
    cls_cfg = classifier_config(cfg)
    data = build_feature_dataset(model, scene, spec, sched, split="train")
    head, log = train_classifier(data, cls_cfg)
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "ckpt" / "head.tdck")
    save_head(target, head, extra_meta={
        "command": "train-head",
        "scene": str(args.scene),
        "model": str(args.model),
        "features": _jsonable(data.provenance),
        "classifier": _jsonable(cfg.sections["classifier"]),
        "training_log": _jsonable(log),
    })
    manifest = _manifest_for(
        "train-head", cfg, ["features", "classifier"],
        {"scene": args.scene, "model": args.model}, {"head": target},
        {"best_val_loss": log.get("best_val_loss")},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    print(f"head trained on {len(data)} labeled pixels; checkpoint at {target}")
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    head, _ = load_head(_require_input(args.head, "head checkpoint"))
    sched = make_linear_schedule(model.num_timesteps)
    spec = feature_spec(cfg)
    class_map, probs = predict_dense(model, scene, head, spec, sched)
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "reports" / "prediction.urds")
    save_raster(target, RasterStack(values=class_map.astype(np.float32)[..., None]))
    probs_path = out.file(Path(str(target) + ".probs.npz"))
    np.savez_compressed(probs_path, probabilities=probs)
    manifest = _manifest_for(
        "predict", cfg, ["features"],
        {"scene": args.scene, "model": args.model, "head": args.head},
        {"prediction": target, "probabilities": probs_path},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    print(f"prediction map written to {target}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig, out: _Outputs) -> int:
    pred_stack = load_raster(_require_input(args.pred, "prediction raster"))
    if pred_stack.channels != 1:
        raise UsageError("prediction raster must have exactly one channel of class ids")
    class_map = np.rint(pred_stack.values[:, :, 0]).astype(np.int64)
    class_names = None
    if args.scene:
        scene = _load_scene(args.scene)
        labels = scene.labels(args.split)
        class_names = list(scene.class_names)
    elif args.labels:
        num_classes = args.classes or _max_class_id(args.labels)
        labels = load_labels(
            _require_input(args.labels, "label CSV"),
            pred_stack.height, pred_stack.width, num_classes, split=args.split,
        )
    else:
        raise UsageError("evaluate needs --scene or --labels")
    cm = evaluate_dense(class_map, labels)
    report = format_report(cm, class_names)
    print(report)
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "reports" / "metrics.csv")
    target.write_text(report_csv(cm, class_names))
    manifest = _manifest_for(
        "evaluate", cfg, [],
        {"prediction": args.pred, "scene": args.scene or "", "labels": args.labels or ""},
        {"metrics": target}, {"split": args.split},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    return EXIT_OK


def _max_class_id(path) -> int:
    top = 0
    with open(path) as fh:
        for i, line in enumerate(fh):
            if i == 0:
                continue
            parts = line.strip().split(",")
            if len(parts) == 3 and parts[2].lstrip("-").isdigit():
                top = max(top, int(parts[2]))
    if top < 1:
        raise UsageError(f"{path}: no class ids found; pass --classes")
    return top


def cmd_ablate(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    sched = make_linear_schedule(model.num_timesteps)
    f = cfg.sections["features"]
    cls_cfg = classifier_config(cfg)
    target = out.directory(Path(args.out) if args.out else cfg.output_root() / "reports")
    if args.study == "combos":
        records = modality_combo_ablation(
            model, scene, f["layer"], f["timestep"], sched=sched, cls_cfg=cls_cfg,
            patch_size=f["patch_size"], stride=f["stride"], noise_seed=f["noise_seed"],
        )
        entries = save_sweep(records, target, "modality_ablation")
        reference = BERLIN_COMBO_REFERENCE
        name = "modality_ablation"
    else:
        spec = feature_spec(cfg)
        records = anchoring_ablation(
            model, scene, adaptation_config(cfg), spec, sched=sched, cls_cfg=cls_cfg,
        )
        entries = save_sweep(records, target, "anchoring_ablation")
        reference = BERLIN_ANCHORING_REFERENCE
        name = "anchoring_ablation"
    manifest = _manifest_for(
        "ablate", cfg, ["features", "classifier", "adaptation"],
        {"scene": args.scene, "model": args.model}, {"report_dir": target},
        {"study": args.study, "artifacts": entries,
         "full_scale_reference": _jsonable(reference)},
    )
    write_experiment_manifest(out.file(target / f"{name}.manifest.json"), manifest)
    print(sweep_csv(records), end="")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    variants = [SweepVariant("adapted", model, parse_modalities(cfg.get("features", "modalities")))]
    if args.baseline_model:
        base, _ = _load_model(args.baseline_model)
        variants.append(
            SweepVariant("pretrained", base, parse_modalities(cfg.get("features", "modalities")))
        )
    sched = make_linear_schedule(model.num_timesteps)
    f = cfg.sections["features"]
    timesteps = list(_int_tuple(args.timesteps))
    target = out.directory(Path(args.out) if args.out else cfg.output_root() / "reports")
    plot_path = out.file(
        Path(args.plot) if args.plot else target / "plots" / "timestep_sweep.png"
    )
    records = timestep_sweep(
        scene, variants, f["layer"], timesteps, sched=sched,
        cls_cfg=classifier_config(cfg), patch_size=f["patch_size"], stride=f["stride"],
        noise_seed=f["noise_seed"], plot_path=plot_path,
    )
    entries = save_sweep(records, target, "timestep_sweep")
    manifest = _manifest_for(
        "sweep", cfg, ["features", "classifier"],
        {"scene": args.scene, "model": args.model,
         "baseline_model": args.baseline_model or ""},
        {"report_dir": target, "plot": plot_path},
        {"timesteps": timesteps, "artifacts": entries},
    )
    write_experiment_manifest(out.file(target / "timestep_sweep.manifest.json"), manifest)
    print(sweep_csv(records), end="")
    print(f"plot written to {plot_path}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig, out: _Outputs) -> int:
    model, _ = _load_model(args.model)
    sched = make_linear_schedule(model.num_timesteps)
    modality = modality_from_name(args.modality)
    patches = sample_patches(model, modality, args.count, sched, seed=args.seed)
    sheet = torch.cat(list(patches), dim=2).permute(1, 2, 0).numpy()
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "plots" / "samples.urds")
    save_raster(target, RasterStack(values=sheet.astype(np.float32)))
    manifest = _manifest_for(
        "sample", cfg, ["model"], {"model": args.model}, {"samples": target},
        {"modality": args.modality, "count": args.count, "seed": args.seed},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    print(f"{args.count} {args.modality} patches written to {target}")
    return EXIT_OK


def cmd_similarity(args, cfg: RunConfig, out: _Outputs) -> int:
    scene = _load_scene(args.scene)
    model, _ = _load_model(args.model)
    sched = make_linear_schedule(model.num_timesteps)
    f = cfg.sections["features"]

    def dense_maps(m):
        maps = {}
        for modality in MODALITY_ORDER:
            spec = FeatureSpec(
                layer=f["layer"], timestep=f["timestep"], modalities=(modality,),
                patch_size=f["patch_size"], stride=f["stride"],
                noise_mode=f["noise_mode"], noise_seed=f["noise_seed"],
            )
            maps[modality] = dense_feature_map(m, scene, spec, sched, resolve_noise_seed(spec))
        return maps

    labels = scene.labels(args.split)
    stats = cross_modal_similarity(dense_maps(model), labels)
    payload = {"model": str(args.model), "similarity": stats}
    if args.baseline_model:
        base, _ = _load_model(args.baseline_model)
        base_stats = cross_modal_similarity(dense_maps(base), labels)
        comparison = similarity_variance_comparison(stats, base_stats)
        payload["baseline"] = {"model": str(args.baseline_model), "similarity": base_stats}
        payload["variance_comparison"] = comparison
        if comparison["fraction_reduced"] is not None:
            print(f"within-class variance reduced for "
                  f"{100 * comparison['fraction_reduced']:.1f}% of (pair, class) cells")
    target = out.file(Path(args.out) if args.out else cfg.output_root() / "reports" / "similarity.json")
    target.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
    manifest = _manifest_for(
        "similarity", cfg, ["features"],
        {"scene": args.scene, "model": args.model,
         "baseline_model": args.baseline_model or ""},
        {"report": target}, {"split": args.split},
    )
    write_experiment_manifest(out.file(Path(str(target) + ".manifest.json")), manifest)
    print(f"similarity statistics written to {target}")
    return EXIT_OK


def cmd_describe(args, cfg: RunConfig, out: _Outputs) -> int:
    path = Path(args.path)
    if not path.exists():
        raise UsageError(f"missing artifact: {path}")
    info = _describe_any(path)
    print(json.dumps(_jsonable(info), indent=2, sort_keys=True))
    return EXIT_OK


def _describe_any(path: Path) -> dict:
    if path.is_dir():
        if (path / "scene.json").exists():
            return describe_scene(path)
        raise UsageError(f"{path} is a directory without a scene.json")
    if path.suffix == ".csv":
        return _describe_labels(path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"URDS":
        return describe_raster(path)
    if magic == b"TDCK":
        info = describe_container(path)
        if info["meta"].get("kind") == "denoiser":
            model, meta = load_model(path)
            partition = partition_parameters(model)
            info["trainable_parameters"] = partition.trainable_count
            info["frozen_parameters"] = partition.frozen_count
            info["trainable_ratio"] = round(partition.trainable_ratio, 6)
            info["num_timesteps"] = meta["num_timesteps"]
            info["provenance"] = meta.get("provenance", {})
            del info["tensors"]
        return info
    raise ContainerError(f"unrecognized magic {magic!r}", 0)


def _describe_labels(path: Path) -> dict:
    counts: dict[int, int] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        for line in fh:
            parts = line.strip().split(",")
            if len(parts) == 3:
                k = int(parts[2])
                counts[k] = counts.get(k, 0) + 1
    return {
        "path": str(path),
        "format": "label-csv",
        "header": header,
        "points": sum(counts.values()),
        "class_counts": {str(k): counts[k] for k in sorted(counts)},
    }


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}".rstrip())


def _add_cfg_flag(parser, section: str, key: str, prefix: str | None = None) -> None:
    name = key if prefix is None else f"{prefix}_{key}"
    flag = "--" + name.replace("_", "-")
    parser.add_argument(flag, dest=f"{section}__{key}", metavar=key.upper(),
                        help=f"override config key [{section}] {key}")


def _add_section_flags(parser, section: str, prefix: str | None = None, exclude=()) -> None:
    for key in CONFIG_SCHEMA[section]:
        if key in exclude:
            continue
        _add_cfg_flag(parser, section, key, prefix)


def build_parser() -> _Parser:
    parser = _Parser(
        prog="terradiff",
        description=(
            "Adapt a frozen diffusion denoiser to pseudo-RGB, PCA, and SAR "
            "representations, then classify sparse pixel labels from its features."
        ),
    )
    parser.add_argument("--version", action="version", version=f"terradiff {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="INI config file; flags override its keys")
        p.add_argument("--out", help=f"output path (default under ${OUTPUT_ROOT_ENV} or ./runs)")
        _add_section_flags(p, "output")

    p = sub.add_parser("synth", help="generate a synthetic multimodal scene")
    common(p)
    _add_section_flags(p, "synth")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build a scene from HSI/SAR rasters and label CSVs")
    common(p)
    p.add_argument("--hsi", required=True, help="hyperspectral raster (.urds)")
    p.add_argument("--sar", required=True, help="SAR raster (.urds)")
    p.add_argument("--train-labels", required=True, help="training label CSV")
    p.add_argument("--test-labels", required=True, help="test label CSV")
    p.add_argument("--classes", required=True, type=int, help="number of classes")
    p.add_argument("--prgb-bands", help="comma-separated HSI band indices for the pseudo-RGB anchor")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("adapt", help="adapt the conditioner on a scene (stage A)")
    common(p)
    p.add_argument("--scene", required=True, help="scene directory")
    # Both sections define "seed"; the model's gets the prefixed flag.
    _add_section_flags(p, "model", exclude=("seed",))
    _add_cfg_flag(p, "model", "seed", prefix="model")
    _add_section_flags(p, "adaptation")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("extract", help="write the dense feature map for a scene")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True, help="adapted model checkpoint (.tdck)")
    _add_section_flags(p, "features")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train-head", help="train the pixel classifier head (stage B)")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    _add_section_flags(p, "features")
    _add_section_flags(p, "classifier")
    p.set_defaults(func=cmd_train_head)

    p = sub.add_parser("predict", help="write the dense class map for a scene")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--head", required=True, help="trained head checkpoint (.tdck)")
    _add_section_flags(p, "features")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score a prediction raster against labels")
    common(p)
    p.add_argument("--pred", required=True, help="single-channel class-id raster (.urds)")
    p.add_argument("--scene", help="scene directory providing the labels")
    p.add_argument("--labels", help="label CSV (alternative to --scene)")
    p.add_argument("--classes", type=int, help="class count when using --labels")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="modality-subset or anchoring ablation")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--study", default="combos", choices=["combos", "anchoring"])
    _add_section_flags(p, "features")
    _add_section_flags(p, "classifier")
    # Adaptation keys overlap features/classifier names; prefix them. They
    # only matter for the anchoring study.
    _add_section_flags(p, "adaptation", prefix="adaptation")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="timestep sweep with a mean-F1 plot")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--baseline-model", help="second checkpoint plotted as its own line")
    p.add_argument("--timesteps", default="0,100,300", help="comma-separated timesteps")
    p.add_argument("--plot", help="plot output path (.png)")
    _add_section_flags(p, "features")
    _add_section_flags(p, "classifier")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("sample", help="draw patches from the adapted model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--modality", default="prgb", choices=["prgb", "pca", "sar"])
    p.add_argument("--count", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("similarity", help="cross-modal cosine statistics per class")
    common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--baseline-model", help="unadapted checkpoint for variance comparison")
    p.add_argument("--split", default="test", choices=["train", "test"])
    _add_section_flags(p, "features")
    p.set_defaults(func=cmd_similarity)

    p = sub.add_parser("describe", help="print metadata for any artifact")
    common(p)
    p.add_argument("path", help="scene directory, checkpoint, raster, or label CSV")
    p.set_defaults(func=cmd_describe)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    outputs = _Outputs()
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg, outputs)
    except UsageError as e:
        outputs.discard()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        outputs.discard()
        missing = getattr(e, "filename", None) or str(e)
        print(f"error: missing input: {missing}", file=sys.stderr)
        return EXIT_USAGE
    except (ContainerError, RasterFormatError, AdaptationDivergedError) as e:
        outputs.discard()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        outputs.discard()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, OSError) as e:
        outputs.discard()
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
