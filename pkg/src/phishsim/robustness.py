"""Hand-crafted perturbations, FGSM attacks on the triplet loss, adversarial
fine-tuning, and embedding-shift reporting.

All perturbations operate on [0,1] 224x224x3 RGB arrays BEFORE model
preprocessing, and FGSM epsilons are in the same [0,1] pixel units.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch
from scipy.ndimage import gaussian_filter

from .corpus import IMAGE_SIZE, Screenshot
from .embedder import EmbeddingNet, embed, embed_batch, model_fingerprint, normalize_batch
from .index import EmbeddingIndex, Match, predict
from .trainer import (
    DEFAULT_MARGIN,
    ImageBank,
    TrainingPool,
    TrainResult,
    TrainSession,
    sample_triplet_random,
    triplet_loss,
)

PERTURBATION_KINDS = (
    "blur", "darken", "brighten", "gaussian_noise", "salt_pepper", "occlusion", "shift",
)
STOCHASTIC_KINDS = ("gaussian_noise", "salt_pepper")


class RobustnessError(ValueError):
    """Bad perturbation/attack parameters or mismatched model and index."""


@dataclass(frozen=True)
class PerturbationSpec:
    """One named perturbation with its parameters.

    kinds and params: blur(sigma), darken(gamma >= 1), brighten(0 < gamma <= 1),
    gaussian_noise(variance), salt_pepper(pixel_fraction), occlusion(quadrant
    1-4 row-major, fill), shift(dx, dy, fill).
    """

    kind: str
    params: Mapping[str, float]

    def __post_init__(self):
        object.__setattr__(self, "params", dict(self.params))
        kind, p = self.kind, self.params
        if kind not in PERTURBATION_KINDS:
            raise RobustnessError(f"unknown perturbation kind {kind!r}")
        def need(*names):
            missing = [n for n in names if n not in p]
            extra = set(p) - set(names) - {"fill"}
            if missing or extra:
                raise RobustnessError(
                    f"{kind} expects params {names}, got {sorted(p)}"
                )
        if kind == "blur":
            need("sigma")
            if p["sigma"] < 0:
                raise RobustnessError(f"blur sigma must be >= 0, got {p['sigma']}")
        elif kind == "darken":
            need("gamma")
            if p["gamma"] < 1:
                raise RobustnessError(f"darken gamma must be >= 1, got {p['gamma']}")
        elif kind == "brighten":
            need("gamma")
            if not 0 < p["gamma"] <= 1:
                raise RobustnessError(
                    f"brighten gamma must be in (0, 1], got {p['gamma']}"
                )
        elif kind == "gaussian_noise":
            need("variance")
            if p["variance"] < 0:
                raise RobustnessError(f"variance must be >= 0, got {p['variance']}")
        elif kind == "salt_pepper":
            need("pixel_fraction")
            if not 0 <= p["pixel_fraction"] <= 1:
                raise RobustnessError(
                    f"pixel_fraction must be in [0, 1], got {p['pixel_fraction']}"
                )
        elif kind == "occlusion":
            need("quadrant")
            if p["quadrant"] not in (1, 2, 3, 4):
                raise RobustnessError(f"quadrant must be 1-4, got {p['quadrant']}")
        elif kind == "shift":
            need("dx", "dy")
            if abs(p["dx"]) > IMAGE_SIZE or abs(p["dy"]) > IMAGE_SIZE:
                raise RobustnessError("shift exceeds the image size")
        fill = p.get("fill", 1.0)
        if not 0 <= fill <= 1:
            raise RobustnessError(f"fill must be in [0, 1], got {fill}")

    @property
    def label(self) -> str:
        inner = ",".join(f"{k}={self.params[k]:g}" for k in sorted(self.params))
        return f"{self.kind}({inner})"


def perturb(
    image: np.ndarray,
    spec: PerturbationSpec,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Apply one perturbation to a [0,1] image; always returns a new array
    clipped to [0,1]. Stochastic kinds (gaussian_noise, salt_pepper) require
    an rng; identity parameters (sigma 0, gamma 1, variance 0, fraction 0,
    shift (0,0)) reproduce the input exactly."""
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise RobustnessError(f"expected (224, 224, 3) image, got {img.shape}")
    p = spec.params
    if spec.kind in STOCHASTIC_KINDS and rng is None:
        raise RobustnessError(f"{spec.kind} requires an rng")

    if spec.kind == "blur":
        if p["sigma"] == 0:
            return img.copy()
        # truncate=3.0 gives a kernel radius of round(3 sigma)
        out = gaussian_filter(img, sigma=(p["sigma"], p["sigma"], 0), truncate=3.0)
    elif spec.kind in ("darken", "brighten"):
        if p["gamma"] == 1:
            return img.copy()
        out = np.power(img, np.float32(p["gamma"]))
    elif spec.kind == "gaussian_noise":
        if p["variance"] == 0:
            return img.copy()
        noise = rng.normal(0.0, math.sqrt(p["variance"]), size=img.shape)
        out = img + noise.astype(np.float32)
    elif spec.kind == "salt_pepper":
        out = img.copy()
        n = round(p["pixel_fraction"] * IMAGE_SIZE * IMAGE_SIZE)
        if n == 0:
            return out
        flat = rng.choice(IMAGE_SIZE * IMAGE_SIZE, size=n, replace=False)
        ys, xs = np.unravel_index(flat, (IMAGE_SIZE, IMAGE_SIZE))
        half = n // 2
        out[ys[:half], xs[:half]] = 0.0
        out[ys[half:], xs[half:]] = 1.0
    elif spec.kind == "occlusion":
        out = img.copy()
        half_size = IMAGE_SIZE // 2
        quadrant = int(p["quadrant"]) - 1  # row-major: 1 TL, 2 TR, 3 BL, 4 BR
        row, col = divmod(quadrant, 2)
        out[
            row * half_size:(row + 1) * half_size,
            col * half_size:(col + 1) * half_size,
        ] = np.float32(p.get("fill", 1.0))
    else:  # shift
        dx, dy = int(p["dx"]), int(p["dy"])
        if dx == 0 and dy == 0:
            return img.copy()
        out = np.full_like(img, np.float32(p.get("fill", 1.0)))
        y_dst = slice(max(0, dy), IMAGE_SIZE + min(0, dy))
        x_dst = slice(max(0, dx), IMAGE_SIZE + min(0, dx))
        y_src = slice(max(0, -dy), IMAGE_SIZE - max(0, dy))
        x_src = slice(max(0, -dx), IMAGE_SIZE - max(0, dx))
        if y_dst.stop > y_dst.start and x_dst.stop > x_dst.start:
            out[y_dst, x_dst] = img[y_src, x_src]
    return np.clip(out, 0.0, 1.0)


def mild_grid() -> list[PerturbationSpec]:
    """The weaker parameter row of the standard perturbation grid."""
    return [
        PerturbationSpec("blur", {"sigma": 1.5}),
        PerturbationSpec("darken", {"gamma": 1.3}),
        PerturbationSpec("brighten", {"gamma": 0.8}),
        PerturbationSpec("gaussian_noise", {"variance": 0.01}),
        PerturbationSpec("salt_pepper", {"pixel_fraction": 0.05}),
        PerturbationSpec("occlusion", {"quadrant": 4}),
        PerturbationSpec("shift", {"dx": -30, "dy": -30}),
    ]


def strong_grid() -> list[PerturbationSpec]:
    """The stronger parameter row of the standard perturbation grid."""
    return [
        PerturbationSpec("blur", {"sigma": 3.5}),
        PerturbationSpec("darken", {"gamma": 1.5}),
        PerturbationSpec("brighten", {"gamma": 0.5}),
        PerturbationSpec("gaussian_noise", {"variance": 0.1}),
        PerturbationSpec("salt_pepper", {"pixel_fraction": 0.15}),
        PerturbationSpec("occlusion", {"quadrant": 2}),
        PerturbationSpec("shift", {"dx": -50, "dy": -50}),
    ]


def full_grid() -> list[PerturbationSpec]:
    return mild_grid() + strong_grid()


GRID_PRESETS = {"mild": mild_grid, "strong": strong_grid, "full": full_grid}


# ---------------------------------------------------------------------------
# FGSM on the triplet loss


def _as_image(x) -> np.ndarray:
    from .corpus import load_image

    if isinstance(x, Screenshot):
        return load_image(x)
    img = np.asarray(x, dtype=np.float32)
    if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise RobustnessError(f"expected (224, 224, 3) image, got {img.shape}")
    return img


def _hwc_forward(model: EmbeddingNet):
    def forward(batch_hwc: torch.Tensor) -> torch.Tensor:
        return model(normalize_batch(batch_hwc.permute(0, 3, 1, 2)))

    return forward


def input_gradient(
    embed_forward,
    anchor: torch.Tensor,
    positive_embedding: torch.Tensor,
    negative_embedding: torch.Tensor,
    margin: float = DEFAULT_MARGIN,
    distance: str = "squared_l2",
) -> tuple[torch.Tensor, float]:
    """Gradient of the triplet loss w.r.t. the anchor input.

    embed_forward maps a batch of inputs to embeddings; the positive and
    negative embeddings are constants. Returns (gradient, loss value); the
    gradient is identically zero wherever the hinge is inactive.
    """
    a = anchor.detach().clone().requires_grad_(True)
    f_a = embed_forward(a.unsqueeze(0))[0]
    loss = triplet_loss(
        f_a, positive_embedding.detach(), negative_embedding.detach(),
        margin=margin, distance=distance,
    )
    (grad,) = torch.autograd.grad(loss, a)
    return grad.detach(), float(loss.detach())


def fgsm_triplet(
    model: EmbeddingNet,
    anchor_image,
    positive,
    negative,
    epsilon: float,
    margin: float = DEFAULT_MARGIN,
    distance: str = "squared_l2",
) -> np.ndarray:
    """Single-step FGSM on the anchor: clip(x + epsilon * sign(grad), 0, 1).

    positive/negative may be Screenshot records or [0,1] images; the positive
    must come from the anchor's target website. When the triplet loss is
    already zero the gradient vanishes and the anchor is returned unchanged
    (with a warning).
    """
    if epsilon < 0:
        raise RobustnessError(f"epsilon must be >= 0, got {epsilon}")
    anchor = _as_image(anchor_image)
    model.eval()
    pos_emb = torch.from_numpy(embed(model, _as_image(positive)))
    neg_emb = torch.from_numpy(embed(model, _as_image(negative)))
    grad, loss = input_gradient(
        _hwc_forward(model), torch.from_numpy(anchor), pos_emb, neg_emb,
        margin=margin, distance=distance,
    )
    if loss == 0.0:
        warnings.warn(
            "triplet loss is zero at this anchor; FGSM returns it unchanged",
            stacklevel=2,
        )
        return anchor.copy()
    adv = anchor + np.float32(epsilon) * np.sign(grad.numpy(), dtype=np.float32)
    return np.clip(adv, 0.0, 1.0)


def closest_positive(
    index: EmbeddingIndex, embedding: np.ndarray, website_id: str
) -> Match:
    """The website's minimum-distance index row (ties to lowest record_id)."""
    rows = [i for i, w in enumerate(index.website_ids) if w == website_id]
    if not rows:
        raise RobustnessError(f"index has no rows for website {website_id!r}")
    q = np.asarray(embedding, dtype=np.float64).ravel()
    best = None
    for i in rows:
        d = float(np.sqrt(((index.vectors[i].astype(np.float64) - q) ** 2).sum()))
        key = (d, index.record_ids[i])
        if best is None or key < best[0]:
            best = (key, i)
    i = best[1]
    return Match(index.website_ids[i], index.record_ids[i], best[0][0])


def fgsm_closest(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    anchor_image,
    epsilon: float,
    rng: np.random.Generator,
    target_website_id: str | None = None,
    margin: float = DEFAULT_MARGIN,
    distance: str = "squared_l2",
) -> np.ndarray:
    """FGSM with the positive chosen as the index's closest same-website row
    to the anchor embedding; the negative is a uniform other-website row.
    With target_website_id=None the overall closest website is targeted."""
    if epsilon < 0:
        raise RobustnessError(f"epsilon must be >= 0, got {epsilon}")
    if model_fingerprint(model) != index.model_fingerprint:
        raise RobustnessError("model fingerprint does not match the index")
    anchor = _as_image(anchor_image)
    model.eval()
    a_vec = embed(model, anchor)
    if target_website_id is None:
        from .index import query

        target_website_id = query(index, a_vec, k=1)[0].website_id
    pos = closest_positive(index, a_vec, target_website_id)
    pos_row = index.record_ids.index(pos.record_id)
    neg_rows = [
        i for i, w in enumerate(index.website_ids) if w != target_website_id
    ]
    if not neg_rows:
        raise RobustnessError("index has a single website: no negative available")
    neg_row = neg_rows[int(rng.integers(len(neg_rows)))]
    grad, loss = input_gradient(
        _hwc_forward(model),
        torch.from_numpy(anchor),
        torch.from_numpy(index.vectors[pos_row]),
        torch.from_numpy(index.vectors[neg_row]),
        margin=margin,
        distance=distance,
    )
    if loss == 0.0:
        warnings.warn(
            "triplet loss is zero at this anchor; FGSM returns it unchanged",
            stacklevel=2,
        )
        return anchor.copy()
    adv = anchor + np.float32(epsilon) * np.sign(grad.numpy(), dtype=np.float32)
    return np.clip(adv, 0.0, 1.0)


def fgsm_iterative(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    anchor_image,
    step_epsilon: float,
    steps: int,
    rng: np.random.Generator,
    target_website_id: str | None = None,
    margin: float = DEFAULT_MARGIN,
    distance: str = "squared_l2",
) -> np.ndarray:
    """Iterated fgsm_closest: at every step the closest positive is selected
    again for the current (already perturbed) anchor, then one FGSM step of
    step_epsilon is applied and clipped."""
    if steps < 1:
        raise RobustnessError(f"steps must be >= 1, got {steps}")
    image = _as_image(anchor_image)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for _ in range(steps):
            image = fgsm_closest(
                model, index, image, step_epsilon, rng,
                target_website_id=target_website_id, margin=margin, distance=distance,
            )
    return image


def _fgsm_batch(
    model: EmbeddingNet,
    anchors: Sequence[np.ndarray],
    positives: Sequence[np.ndarray],
    negatives: Sequence[np.ndarray],
    epsilons: np.ndarray,
    margin: float,
    distance: str,
) -> list[np.ndarray]:
    """Batched single-step FGSM used by adversarial fine-tuning. Anchors
    whose triplet loss is zero come back unchanged (sign of a zero gradient)."""
    model.eval()
    pos_emb = torch.from_numpy(embed_batch(model, list(positives)))
    neg_emb = torch.from_numpy(embed_batch(model, list(negatives)))
    a = torch.from_numpy(np.stack([_as_image(x) for x in anchors])).requires_grad_(True)
    f_a = _hwc_forward(model)(a)
    losses = triplet_loss(f_a, pos_emb, neg_emb, margin=margin, distance=distance)
    (grad,) = torch.autograd.grad(losses.sum(), a)
    signs = np.sign(grad.detach().numpy(), dtype=np.float32)
    eps = np.asarray(epsilons, dtype=np.float32).reshape(-1, 1, 1, 1)
    adv = np.clip(np.stack([_as_image(x) for x in anchors]) + eps * signs, 0.0, 1.0)
    return [adv[i] for i in range(adv.shape[0])]


def adversarial_finetune(
    session: TrainSession,
    pool: TrainingPool,
    epsilon_range: tuple[float, float] = (0.003, 0.01),
    minibatches: int = 3000,
) -> TrainResult:
    """Continue training with half of each minibatch's anchors replaced by
    their FGSM perturbations, epsilon drawn uniformly from epsilon_range.
    Positives and negatives stay clean; the session's optimizer state and
    minibatch counter carry on."""
    lo, hi = epsilon_range
    if not 0 <= lo <= hi:
        raise RobustnessError(f"invalid epsilon range {epsilon_range}")
    hyper = session.hyper
    bank = session.image_bank
    first = len(session.history)
    for _ in range(minibatches):
        triplets = [
            sample_triplet_random(pool, session.rng) for _ in range(hyper.batch_size)
        ]
        n_adv = hyper.batch_size // 2
        positives = [bank.get(t.positive) for t in triplets]
        negatives = [bank.get(t.negative) for t in triplets]
        anchors = [bank.get(t.anchor) for t in triplets]
        if n_adv:
            eps = session.rng.uniform(lo, hi, size=n_adv)
            anchors[:n_adv] = _fgsm_batch(
                session.model, anchors[:n_adv], positives[:n_adv], negatives[:n_adv],
                epsilons=eps, margin=hyper.margin, distance=hyper.distance_in_loss,
            )
        session.step_batch(anchors, positives, negatives, stage="adversarial_finetune")
    path = (
        session.save("adversarial", stage="adversarial_finetune")
        if session.checkpoint_dir
        else None
    )
    return TrainResult(session.history[first:], session.global_step, path)


# ---------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class ShiftReport:
    mean: float
    sd: float
    n_pairs: int


def embedding_shift_report(model: EmbeddingNet, pairs: Sequence[tuple]) -> ShiftReport:
    """Mean and sd of the L2 embedding distance over (image_a, image_b)
    pairs, e.g. the same page captured in two browsers, or clean vs.
    perturbed renderings."""
    if not pairs:
        raise RobustnessError("embedding_shift_report needs at least one pair")
    a_vecs = embed_batch(model, [_as_image(a) for a, _ in pairs]).astype(np.float64)
    b_vecs = embed_batch(model, [_as_image(b) for _, b in pairs]).astype(np.float64)
    dists = np.sqrt(((a_vecs - b_vecs) ** 2).sum(axis=1))
    sd = float(dists.std(ddof=1)) if dists.size > 1 else 0.0
    return ShiftReport(mean=float(dists.mean()), sd=sd, n_pairs=len(pairs))


@dataclass(frozen=True)
class RobustnessRow:
    label: str
    perturbed_top1: float
    perturbed_auc: float
    top1_drop: float
    auc_drop: float
    trials: int


@dataclass(frozen=True)
class RobustnessReport:
    original_top1: float
    original_auc: float
    rows: tuple[RobustnessRow, ...]


def _relative_drop(orig: float, pert: float) -> float:
    # relative drop is 0 by convention when the clean metric is already 0
    return 0.0 if orig == 0 else (orig - pert) / orig


def robustness_report(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    manifest,
    split,
    specs: Sequence[PerturbationSpec],
    seed: int = 0,
    trials: int = 5,
    split_name: str = "test",
    k: int = 5,
    image_bank: ImageBank | None = None,
) -> RobustnessReport:
    """Perturb every held-out phishing page with each listed perturbation
    and report the relative drop in top-1 match and ROC AUC versus the
    clean run. Stochastic kinds average over `trials` rng trials; benign
    pages stay clean throughout."""
    from .evaluator import mann_whitney_auc, top_k_match_rate

    bank = image_bank if image_bank is not None else ImageBank(capacity=64)
    fp = model_fingerprint(model)
    phish = sorted(split.records(manifest, split_name, "phishing"), key=lambda r: r.record_id)
    benign = sorted(split.records(manifest, split_name, "benign_test"), key=lambda r: r.record_id)
    if not phish or not benign:
        raise RobustnessError("robustness report needs phishing and benign records")
    targets = [r.website_id for r in phish]

    def run(images) -> tuple[float, list[float]]:
        preds = [
            predict(index, model, img, query_record=rec.record_id, k=k, fingerprint=fp)
            for rec, img in zip(phish, images)
        ]
        top1 = top_k_match_rate(preds, targets, 1)
        dists = [p.min_distance for p in preds]
        return top1, dists

    orig_top1, orig_phish_dists = run([bank.get(r) for r in phish])
    benign_dists = [
        predict(index, model, bank.get(r), query_record=r.record_id, k=k, fingerprint=fp).min_distance
        for r in benign
    ]
    labels = ["phishing"] * len(phish) + ["benign"] * len(benign)
    orig_auc = mann_whitney_auc(orig_phish_dists + benign_dists, labels)

    master = np.random.default_rng(seed)
    rows = []
    for spec in specs:
        n_trials = trials if spec.kind in STOCHASTIC_KINDS else 1
        top1s, aucs = [], []
        for _ in range(n_trials):
            trial_rng = np.random.default_rng(master.integers(2**63))
            images = [perturb(bank.get(r), spec, trial_rng) for r in phish]
            top1, dists = run(images)
            top1s.append(top1)
            aucs.append(mann_whitney_auc(dists + benign_dists, labels))
        pert_top1 = float(np.mean(top1s))
        pert_auc = float(np.mean(aucs))
        rows.append(
            RobustnessRow(
                label=spec.label,
                perturbed_top1=pert_top1,
                perturbed_auc=pert_auc,
                top1_drop=_relative_drop(orig_top1, pert_top1),
                auc_drop=_relative_drop(orig_auc, pert_auc),
                trials=n_trials,
            )
        )
    return RobustnessReport(original_top1=orig_top1, original_auc=orig_auc, rows=tuple(rows))


def fgsm_random(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    anchor_image,
    epsilon: float,
    rng: np.random.Generator,
    target_website_id: str,
    margin: float = DEFAULT_MARGIN,
    distance: str = "squared_l2",
) -> np.ndarray:
    """FGSM with a uniformly sampled same-target-website positive row and a
    uniform other-website negative row from the index."""
    if model_fingerprint(model) != index.model_fingerprint:
        raise RobustnessError("model fingerprint does not match the index")
    anchor = _as_image(anchor_image)
    pos_rows = [i for i, w in enumerate(index.website_ids) if w == target_website_id]
    neg_rows = [i for i, w in enumerate(index.website_ids) if w != target_website_id]
    if not pos_rows:
        raise RobustnessError(f"index has no rows for website {target_website_id!r}")
    if not neg_rows:
        raise RobustnessError("index has a single website: no negative available")
    pos_row = pos_rows[int(rng.integers(len(pos_rows)))]
    neg_row = neg_rows[int(rng.integers(len(neg_rows)))]
    model.eval()
    grad, loss = input_gradient(
        _hwc_forward(model),
        torch.from_numpy(anchor),
        torch.from_numpy(index.vectors[pos_row]),
        torch.from_numpy(index.vectors[neg_row]),
        margin=margin,
        distance=distance,
    )
    if loss == 0.0:
        return anchor.copy()
    adv = anchor + np.float32(epsilon) * np.sign(grad.numpy(), dtype=np.float32)
    return np.clip(adv, 0.0, 1.0)


ATTACK_KINDS = ("fgsm", "fgsm_closest", "fgsm_iterative")


def attack_report(
    model: EmbeddingNet,
    index: EmbeddingIndex,
    manifest,
    split,
    attack: str = "fgsm",
    epsilon: float = 0.005,
    steps: int = 5,
    step_epsilon: float = 0.002,
    seed: int = 0,
    split_name: str = "test",
    k: int = 5,
    image_bank: ImageBank | None = None,
) -> RobustnessReport:
    """White-box attack evaluation: perturb every held-out phishing page with
    the chosen FGSM variant (anchored at the page, targeting its own website)
    and report the relative top-1 and AUC drops versus the clean run."""
    from .evaluator import mann_whitney_auc, top_k_match_rate

    if attack not in ATTACK_KINDS:
        raise RobustnessError(f"unknown attack {attack!r}")
    bank = image_bank if image_bank is not None else ImageBank(capacity=64)
    fp = model_fingerprint(model)
    if fp != index.model_fingerprint:
        raise RobustnessError("model fingerprint does not match the index")
    phish = sorted(split.records(manifest, split_name, "phishing"), key=lambda r: r.record_id)
    benign = sorted(split.records(manifest, split_name, "benign_test"), key=lambda r: r.record_id)
    if not phish or not benign:
        raise RobustnessError("attack report needs phishing and benign records")
    targets = [r.website_id for r in phish]
    rng = np.random.default_rng(seed)

    def measure(images):
        preds = [
            predict(index, model, img, query_record=rec.record_id, k=k, fingerprint=fp)
            for rec, img in zip(phish, images)
        ]
        top1 = top_k_match_rate(preds, targets, 1)
        return top1, [p.min_distance for p in preds]

    orig_top1, orig_dists = measure([bank.get(r) for r in phish])
    benign_dists = [
        predict(index, model, bank.get(r), query_record=r.record_id, k=k, fingerprint=fp).min_distance
        for r in benign
    ]
    labels = ["phishing"] * len(phish) + ["benign"] * len(benign)
    orig_auc = mann_whitney_auc(orig_dists + benign_dists, labels)

    adv_images = []
    for rec in phish:
        img = bank.get(rec)
        if attack == "fgsm":
            adv = fgsm_random(model, index, img, epsilon, rng, target_website_id=rec.website_id)
            label = f"fgsm(epsilon={epsilon:g})"
        elif attack == "fgsm_closest":
            adv = fgsm_closest(model, index, img, epsilon, rng, target_website_id=rec.website_id)
            label = f"fgsm_closest(epsilon={epsilon:g})"
        else:
            adv = fgsm_iterative(
                model, index, img, step_epsilon, steps, rng, target_website_id=rec.website_id
            )
            label = f"fgsm_iterative(step_epsilon={step_epsilon:g},steps={steps})"
        adv_images.append(adv)
    adv_top1, adv_dists = measure(adv_images)
    adv_auc = mann_whitney_auc(adv_dists + benign_dists, labels)
    row = RobustnessRow(
        label=label,
        perturbed_top1=adv_top1,
        perturbed_auc=adv_auc,
        top1_drop=_relative_drop(orig_top1, adv_top1),
        auc_drop=_relative_drop(orig_auc, adv_auc),
        trials=1,
    )
    return RobustnessReport(original_top1=orig_top1, original_auc=orig_auc, rows=(row,))


def write_robustness_report(report: RobustnessReport, path: str | Path) -> None:
    lines = [
        "# robustness-report v1",
        f"# original\ttop1={report.original_top1!r}\tauc={report.original_auc!r}",
        "label\tperturbed_top1\tperturbed_auc\ttop1_drop\tauc_drop\ttrials",
    ]
    for row in report.rows:
        lines.append(
            f"{row.label}\t{row.perturbed_top1!r}\t{row.perturbed_auc!r}"
            f"\t{row.top1_drop!r}\t{row.auc_drop!r}\t{row.trials}"
        )
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
