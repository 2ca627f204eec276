"""Visual-similarity phishing detection.

A triplet-trained convolutional embedding maps website screenshots into a
space where pages of the same website sit close together. A trusted-list
index of embeddings then classifies a new page by its nearest websites:
close enough to a protected website (below a calibrated threshold) while
living on the wrong domain means phishing.

Modules:
    corpus      manifests, splits, image loading, near-duplicate scan, capture
    embedder    model configs, embedding networks, checkpoints
    trainer     triplet loss, random/hard-example sampling, two-stage training
    index       embedding index, query, predict, threshold calibration
    evaluator   match rates, ROC/AUC, baselines, 2-D projection
    robustness  perturbations, FGSM attacks, adversarial fine-tuning
    synth       tiny synthetic screenshot corpus for tests and demos
    cli         command-line interface
"""

__version__ = "0.1.0"

from .corpus import (
    CorpusError,
    CorpusManifest,
    Screenshot,
    SplitAssignment,
    WebsiteIdentity,
    load_image,
    load_manifest,
    load_split,
    near_duplicate_scan,
    split_corpus,
    write_duplicate_report,
    write_manifest,
    write_split,
)
from .embedder import (
    EmbedderError,
    EmbeddingNet,
    ModelConfig,
    build_model,
    embed,
    embed_batch,
    load_checkpoint,
    model_fingerprint,
    preprocess,
    save_checkpoint,
)
from .evaluator import (
    EvalReport,
    EvaluatorError,
    HogParams,
    baseline_hog_nn,
    baseline_pretrained_nn,
    evaluate_model,
    mann_whitney_auc,
    partial_auc,
    project_embeddings_2d,
    roc_curve,
    top_k_match_rate,
    write_eval_report,
    write_predictions,
    write_projection,
    write_roc_points,
)
from .index import (
    EmbeddingIndex,
    EmbeddingIndexError,
    Match,
    PredictionResult,
    add_website,
    build_index,
    load_index,
    predict,
    query,
    save_index,
    select_threshold,
    with_threshold,
)
from .robustness import (
    PERTURBATION_KINDS,
    PerturbationSpec,
    RobustnessError,
    adversarial_finetune,
    attack_report,
    embedding_shift_report,
    fgsm_closest,
    fgsm_iterative,
    fgsm_random,
    fgsm_triplet,
    full_grid,
    mild_grid,
    perturb,
    robustness_report,
    strong_grid,
    write_robustness_report,
)
from .trainer import (
    HardSubset,
    ImageBank,
    TrainHyper,
    TrainSession,
    TrainerError,
    TrainingPool,
    Triplet,
    lr_for_step,
    mine_hard_examples,
    sample_query_set,
    sample_triplet_random,
    train_stage1,
    train_stage2,
    triplet_loss,
)

__all__ = [
    "__version__",
    # corpus
    "CorpusError", "CorpusManifest", "Screenshot", "SplitAssignment",
    "WebsiteIdentity", "load_image", "load_manifest", "load_split",
    "near_duplicate_scan", "split_corpus", "write_duplicate_report",
    "write_manifest", "write_split",
    # embedder
    "EmbedderError", "EmbeddingNet", "ModelConfig", "build_model", "embed",
    "embed_batch", "load_checkpoint", "model_fingerprint", "preprocess",
    "save_checkpoint",
    # trainer
    "HardSubset", "ImageBank", "TrainHyper", "TrainSession", "TrainerError",
    "TrainingPool", "Triplet", "lr_for_step", "mine_hard_examples",
    "sample_query_set", "sample_triplet_random", "train_stage1",
    "train_stage2", "triplet_loss",
    # index
    "EmbeddingIndex", "EmbeddingIndexError", "Match", "PredictionResult",
    "add_website", "build_index", "load_index", "predict", "query",
    "save_index", "select_threshold", "with_threshold",
    # evaluator
    "EvalReport", "EvaluatorError", "HogParams", "baseline_hog_nn",
    "baseline_pretrained_nn", "evaluate_model", "mann_whitney_auc",
    "partial_auc", "project_embeddings_2d", "roc_curve", "top_k_match_rate",
    "write_eval_report", "write_predictions", "write_projection", "write_roc_points",
    # robustness
    "PERTURBATION_KINDS", "PerturbationSpec", "RobustnessError",
    "adversarial_finetune", "attack_report", "embedding_shift_report",
    "fgsm_closest", "fgsm_iterative", "fgsm_random", "fgsm_triplet",
    "full_grid", "mild_grid", "perturb", "robustness_report", "strong_grid",
    "write_robustness_report",
]
