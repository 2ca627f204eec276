"""Evaluation metrics and baselines: top-k website match, ROC AUC, partial
AUC, EER-style reporting, nearest-neighbor baselines, and 2-D projections.

Convention everywhere: the positive class is phishing, and the score of a
record is the negated minimum index distance (closer to the trusted-list
means more phishing-like).
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import CorpusManifest, Screenshot, SplitAssignment, load_image
from .embedder import EmbeddingNet, ModelConfig, build_model, embed, model_fingerprint
from .index import EmbeddingIndex, Match, PredictionResult, build_index, predict, query
from .trainer import ImageBank


class EvaluatorError(ValueError):
    """Bad metric inputs (empty lists, single-class labels, misalignment)."""


@dataclass(frozen=True)
class ROCResult:
    points: tuple[tuple[float, float, float], ...]  # (FPR, TPR, tau)
    auc: float
    partial_auc_at_1pct: float


@dataclass(frozen=True)
class EvalReport:
    top1_match: float
    top5_match: float
    roc_points: tuple[tuple[float, float, float], ...]
    auc: float
    partial_auc_at_1pct: float
    per_website_confusion: Mapping[str, int]
    timing_mean: float
    timing_sd: float
    n_phishing: int
    n_benign: int
    phish_distances: tuple[float, ...]
    benign_distances: tuple[float, ...]
    phish_predictions: tuple[PredictionResult, ...] = ()
    benign_predictions: tuple[PredictionResult, ...] = ()
    phish_targets: tuple[str, ...] = ()


def top_k_match_rate(
    predictions: Sequence[PredictionResult],
    targets: Sequence[str],
    k: int,
) -> float:
    """Fraction of predictions whose target website is among the k top-ranked
    distinct websites."""
    if not predictions:
        raise EvaluatorError("top_k_match_rate of an empty prediction list")
    if len(predictions) != len(targets):
        raise EvaluatorError("predictions and targets are misaligned")
    if k < 1:
        raise EvaluatorError(f"k must be >= 1, got {k}")
    hits = 0
    for pred, target in zip(predictions, targets):
        if target in [m.website_id for m in pred.top_matches[:k]]:
            hits += 1
    return hits / len(predictions)


def _check_two_class(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = labels == "phishing"
    neg = labels == "benign"
    if not (pos | neg).all():
        bad = labels[~(pos | neg)][0]
        raise EvaluatorError(f"labels must be 'phishing' or 'benign', got {bad!r}")
    if not pos.any() or not neg.any():
        raise EvaluatorError("roc needs both classes present")
    return pos, neg


def roc_curve(min_distances: Sequence[float], labels: Sequence[str]) -> ROCResult:
    """ROC sweep over distance thresholds (verdict phishing iff distance < tau).

    Points are (FPR, TPR, tau) at every distinct observed distance, ascending,
    closed with (1, 1, inf). AUC is the trapezoidal area; tied scores across
    classes produce diagonal segments, i.e. half credit.
    """
    d = np.asarray(min_distances, dtype=np.float64)
    labels = np.asarray(labels)
    if d.shape[0] != labels.shape[0]:
        raise EvaluatorError("distances and labels are misaligned")
    pos, neg = _check_two_class(labels)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    points = []
    for tau in np.unique(d):
        fpr = float(np.count_nonzero(d[neg] < tau)) / n_neg
        tpr = float(np.count_nonzero(d[pos] < tau)) / n_pos
        points.append((fpr, tpr, float(tau)))
    points.append((1.0, 1.0, math.inf))
    auc = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return ROCResult(points=tuple(points), auc=auc,
                     partial_auc_at_1pct=partial_auc(points, 0.01))


def partial_auc(points: Sequence[tuple[float, float, float]], cutoff: float = 0.01) -> float:
    """Unnormalized ROC area restricted to FPR in [0, cutoff], interpolating
    the curve at the cutoff. Maximum value is `cutoff` itself."""
    area = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        if x0 >= cutoff:
            break
        if x1 <= cutoff:
            area += (x1 - x0) * (y0 + y1) / 2.0
        else:
            yc = y0 + (cutoff - x0) / (x1 - x0) * (y1 - y0)
            area += (cutoff - x0) * (y0 + yc) / 2.0
            break
    return area


def mann_whitney_auc(min_distances: Sequence[float], labels: Sequence[str]) -> float:
    """AUC as the Mann-Whitney statistic on scores = -distance: the fraction
    of (phishing, benign) pairs ranked correctly, ties counted half."""
    d = np.asarray(min_distances, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = _check_two_class(labels)
    scores = -d
    ranks = rankdata(scores)
    n_pos, n_neg = int(pos.sum()), int(neg.sum())
    rank_sum = float(ranks[pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# ---------------------------------------------------------------------------
# End-to-end evaluation


def _aggregate(
    phish_predictions: list[PredictionResult],
    phish_targets: list[str],
    benign_predictions: list[PredictionResult],
    timings: list[float],
) -> EvalReport:
    top1 = top_k_match_rate(phish_predictions, phish_targets, 1)
    top5 = top_k_match_rate(phish_predictions, phish_targets, 5)
    phish_d = [p.min_distance for p in phish_predictions]
    benign_d = [p.min_distance for p in benign_predictions]
    roc = roc_curve(
        phish_d + benign_d,
        ["phishing"] * len(phish_d) + ["benign"] * len(benign_d),
    )
    confusion: dict[str, int] = {}
    for pred, target in zip(phish_predictions, phish_targets):
        confusion.setdefault(target, 0)
        if pred.top_matches[0].website_id != target:
            confusion[target] += 1
    t = np.asarray(timings, dtype=np.float64)
    return EvalReport(
        top1_match=top1,
        top5_match=top5,
        roc_points=roc.points,
        auc=roc.auc,
        partial_auc_at_1pct=roc.partial_auc_at_1pct,
        per_website_confusion=confusion,
        timing_mean=float(t.mean()) if t.size else 0.0,
        timing_sd=float(t.std(ddof=1)) if t.size > 1 else 0.0,
        n_phishing=len(phish_predictions),
        n_benign=len(benign_predictions),
        phish_distances=tuple(phish_d),
        benign_distances=tuple(benign_d),
        phish_predictions=tuple(phish_predictions),
        benign_predictions=tuple(benign_predictions),
        phish_targets=tuple(phish_targets),
    )


def evaluate_model(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    manifest: CorpusManifest,
    split: SplitAssignment,
    split_name: str = "test",
    k: int = 5,
    image_bank: ImageBank | None = None,
) -> EvalReport:
    """Predict every held-out record and aggregate all metrics.

    Phishing records score the top-k website match; phishing plus benign
    records form the ROC. Predictions never see the record's label.
    """
    bank = image_bank if image_bank is not None else ImageBank(capacity=64)
    fp = model_fingerprint(model)
    phish = split.records(manifest, split_name, "phishing")
    benign = split.records(manifest, split_name, "benign_test")
    if not phish or not benign:
        raise EvaluatorError(
            f"split {split_name!r} needs phishing and benign records, got "
            f"{len(phish)} phishing / {len(benign)} benign"
        )
    timings: list[float] = []
    phish_predictions, phish_targets = [], []
    benign_predictions = []
    for rec in sorted(phish + benign, key=lambda r: r.record_id):
        img = bank.get(rec)
        start = time.perf_counter()
        pred = predict(index, model, img, query_record=rec.record_id, k=k, fingerprint=fp)
        timings.append(time.perf_counter() - start)
        if rec.source_class == "phishing":
            phish_predictions.append(pred)
            phish_targets.append(rec.website_id)
        else:
            benign_predictions.append(pred)
    return _aggregate(phish_predictions, phish_targets, benign_predictions, timings)


# ---------------------------------------------------------------------------
# Baselines


def evaluate_with_features(
    feature_fn: Callable[[np.ndarray], np.ndarray],
    fingerprint: str,
    manifest: CorpusManifest,
    split: SplitAssignment,
    split_name: str = "test",
    k: int = 5,
    threshold: float | None = None,
) -> EvalReport:
    """Evaluation protocol for an arbitrary image->vector feature: build the
    trusted-list index from the feature, then rank and score as usual."""
    train_records = [
        r for r in manifest.records
        if r.source_class in ("trusted", "phishing")
        and split.assignment[r.record_id] == "train"
    ]
    if not train_records:
        raise EvaluatorError("no training records to index")
    recs = sorted(train_records, key=lambda r: r.record_id)
    vectors = np.stack(
        [np.asarray(feature_fn(load_image(r)), dtype=np.float32).ravel() for r in recs]
    )
    index = EmbeddingIndex(
        vectors=vectors,
        website_ids=tuple(r.website_id for r in recs),
        record_ids=tuple(r.record_id for r in recs),
        model_fingerprint=fingerprint,
        threshold=threshold,
    )
    phish = split.records(manifest, split_name, "phishing")
    benign = split.records(manifest, split_name, "benign_test")
    if not phish or not benign:
        raise EvaluatorError("evaluation split needs phishing and benign records")
    timings: list[float] = []
    phish_predictions, phish_targets = [], []
    benign_predictions = []
    for rec in sorted(phish + benign, key=lambda r: r.record_id):
        img = load_image(rec)
        start = time.perf_counter()
        vec = np.asarray(feature_fn(img), dtype=np.float64).ravel()
        matches = query(index, vec, k=k)
        timings.append(time.perf_counter() - start)
        min_distance = matches[0].distance
        if index.threshold is None:
            verdict = "no_threshold"
        else:
            verdict = "phishing" if min_distance < index.threshold else "benign"
        pred = PredictionResult(
            query_record=rec.record_id,
            top_matches=tuple(matches),
            min_distance=min_distance,
            verdict=verdict,
        )
        if rec.source_class == "phishing":
            phish_predictions.append(pred)
            phish_targets.append(rec.website_id)
        else:
            benign_predictions.append(pred)
    return _aggregate(phish_predictions, phish_targets, benign_predictions, timings)


def baseline_pretrained_nn(
    backbone: str,
    manifest: CorpusManifest,
    split: SplitAssignment,
    weights_path: str | Path | None = None,
    split_name: str = "test",
    seed: int = 0,
    k: int = 5,
) -> EvalReport:
    """Nearest-neighbor matching on raw backbone features (no added layer,
    global max pooling), i.e. the no-metric-learning baseline. Uses local
    pretrained weights when given, otherwise the seeded random init."""
    config = ModelConfig(
        backbone=backbone,
        pretrained_init=weights_path is not None,
        added_layer="none",
        head="global_max_pool",
    )
    model = build_model(config, rng_seed=seed, pretrained_weights=weights_path)
    return evaluate_with_features(
        lambda img: embed(model, img),
        fingerprint=model_fingerprint(model),
        manifest=manifest,
        split=split,
        split_name=split_name,
        k=k,
    )


@dataclass(frozen=True)
class HogParams:
    orientations: int = 9
    cell_pixels: int = 16
    block_cells: int = 2


def hog_descriptor(image: np.ndarray, params: HogParams = HogParams()) -> np.ndarray:
    """Histogram-of-oriented-gradients descriptor of a [0,1] RGB image."""
    from skimage.color import rgb2gray
    from skimage.feature import hog

    gray = rgb2gray(np.asarray(image, dtype=np.float64))
    return hog(
        gray,
        orientations=params.orientations,
        pixels_per_cell=(params.cell_pixels, params.cell_pixels),
        cells_per_block=(params.block_cells, params.block_cells),
        block_norm="L2-Hys",
        feature_vector=True,
    ).astype(np.float32)


def baseline_hog_nn(
    manifest: CorpusManifest,
    split: SplitAssignment,
    params: HogParams = HogParams(),
    split_name: str = "test",
    k: int = 5,
) -> EvalReport:
    """Nearest-neighbor matching over HOG descriptors."""
    fingerprint = (
        f"hog:o{params.orientations}c{params.cell_pixels}b{params.block_cells}"
    )
    return evaluate_with_features(
        lambda img: hog_descriptor(img, params),
        fingerprint=fingerprint,
        manifest=manifest,
        split=split,
        split_name=split_name,
        k=k,
    )


# ---------------------------------------------------------------------------
# Projection


def project_embeddings_2d(
    embeddings: np.ndarray,
    labels: Sequence[str],
    seed: int = 0,
    perplexity: float = 30.0,
) -> list[tuple[float, float, str]]:
    """t-SNE projection of embedding vectors to 2-D, deterministic per seed.

    Perplexity is reduced automatically (with a warning) when there are too
    few points for the requested value.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != len(labels):
        raise EvaluatorError("embeddings must be (N, D) aligned with labels")
    n = X.shape[0]
    if n < 3:
        raise EvaluatorError(f"projection needs at least 3 points, got {n}")
    if perplexity >= n:
        reduced = max(1.0, (n - 1) / 3.0)
        warnings.warn(
            f"perplexity {perplexity} too large for {n} points; using {reduced}",
            stacklevel=2,
        )
        perplexity = reduced
    from sklearn.manifold import TSNE

    coords = TSNE(
        n_components=2, perplexity=perplexity, random_state=seed, init="pca"
    ).fit_transform(X)
    return [(float(x), float(y), str(lab)) for (x, y), lab in zip(coords, labels)]


# ---------------------------------------------------------------------------
# Report writers


def write_eval_report(report: EvalReport, path: str | Path) -> None:
    data = {
        "top1_match": report.top1_match,
        "top5_match": report.top5_match,
        "auc": report.auc,
        "partial_auc_at_1pct": report.partial_auc_at_1pct,
        "per_website_confusion": dict(report.per_website_confusion),
        "timing_mean_s": report.timing_mean,
        "timing_sd_s": report.timing_sd,
        "n_phishing": report.n_phishing,
        "n_benign": report.n_benign,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def write_roc_points(report: EvalReport, path: str | Path) -> None:
    lines = ["fpr\ttpr\ttau"]
    for fpr, tpr, tau in report.roc_points:
        lines.append(f"{fpr!r}\t{tpr!r}\t{tau!r}")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def write_predictions(report: EvalReport, path: str | Path) -> None:
    """Per-record prediction lines: record, class, target, top-1, distance,
    verdict, then the remaining ranked websites."""
    lines = ["record_id\tclass\ttarget\ttop1\tmin_distance\tverdict\tranked_websites"]
    rows = [
        (p, "phishing", t) for p, t in zip(report.phish_predictions, report.phish_targets)
    ] + [(p, "benign", "-") for p in report.benign_predictions]
    for pred, cls, target in rows:
        ranked = ",".join(m.website_id for m in pred.top_matches)
        lines.append(
            f"{pred.query_record}\t{cls}\t{target}\t{pred.top_matches[0].website_id}"
            f"\t{pred.min_distance!r}\t{pred.verdict}\t{ranked}"
        )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def write_projection(points: Sequence[tuple[float, float, str]], path: str | Path) -> None:
    lines = ["x\ty\tlabel"]
    for x, y, label in points:
        lines.append(f"{x!r}\t{y!r}\t{label}")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
