"""Multi-scale out-of-distribution detection.

Training couples a supervised contrastive objective with a cross-attention
alignment of local feature vectors; detection scores each example by the
minimum k-th-nearest-neighbor distance of its multi-scale representations
against a normalized training bank.
"""
from .alpa import (
    LossValue,
    ProjectionHeads,
    alpa_loss,
    combined_loss,
    cross_attention_align,
    init_heads,
    pairwise_sim,
    project,
    supcon_loss,
)
from .detector import (
    Decision,
    ScaleMode,
    Scored,
    csd_score,
    decide,
    extract_multiscale,
    fit_bank,
    knn_score_global,
    select_threshold,
)
from .estimator import MultiScaleOODDetector
from .features import (
    FeatureDataset,
    FeatureMap,
    SynthSpec,
    gen_synthetic,
    global_pool,
    load_features,
    save_features,
)
from .knn import RepresentationBank, build_bank, rk_query, subsample_bank
from .metrics import EvalReport, auroc, evaluate, fpr_at_tpr, id_accuracy
from .trainer import (
    EncoderParams,
    TrainConfig,
    TrainedModel,
    init_model,
    load_model,
    make_views,
    save_model,
    sgd_step,
    train,
)

__version__ = "0.1.0"
