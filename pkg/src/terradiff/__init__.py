"""Parameter-efficient adaptation of a frozen diffusion denoiser to
heterogeneous remote-sensing representations, plus a sparse-label pixel
classification pipeline built on its frozen features."""

from .adaptation import (
    AdaptationConfig,
    AdaptationDivergedError,
    LossTrace,
    adapt,
    denoise_loss,
)
from .analysis import (
    MODALITY_COMBOS,
    SweepRecord,
    SweepVariant,
    anchoring_ablation,
    cross_modal_similarity,
    evaluate_configuration,
    modality_combo_ablation,
    similarity_variance_comparison,
    timestep_sweep,
)
from .backbone import (
    DenoiserConfig,
    DenoiserModel,
    ParamPartition,
    build_model,
    count_parameters,
    extract_features,
    frozen_hashes,
    partition_parameters,
    sample_patches,
)
from .checkpoint import (
    ContainerError,
    describe_container,
    load_model,
    load_tensors,
    save_model,
    save_tensors,
)
from .classify import (
    ClassifierConfig,
    FeatureSpec,
    MLPHead,
    PixelFeatureSet,
    build_feature_dataset,
    dense_feature_map,
    load_head,
    predict_dense,
    save_head,
    shuffle_labels,
    train_classifier,
)
from .conditioning import (
    FiLMConditioner,
    FiLMParams,
    FiLMSite,
    Modality,
    MODALITY_ORDER,
    adaptive_group_norm,
    modality_from_name,
)
from .dataio import (
    RasterFormatError,
    RasterStack,
    SceneBundle,
    SparseLabelSet,
    hsi_to_pca3,
    hsi_to_prgb,
    load_labels,
    load_raster,
    load_scene,
    merge_overlaps,
    pca3_decomposition,
    percentile_stretch,
    sar_composite_bands,
    sar_to_pauli,
    save_labels,
    save_raster,
    save_scene,
    synth_scene,
    tile_patches,
)
from .metrics import (
    ClassificationScores,
    ConfusionMatrix,
    evaluate_dense,
    format_report,
    report_csv,
    score_confusion,
)
from .schedule import (
    NoiseSchedule,
    make_linear_schedule,
    q_sample,
    timestep_embedding,
)

__version__ = "0.1.0"
