"""Triplet loss and the two-stage training procedure.

Stage 1 trains on uniformly sampled random triplets. Stage 2 repeatedly
samples a query set (one screenshot per website), mines the hardest positive
and negative for each query with the latest weights, and trains on that
subset, re-mining after every block of minibatches.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .corpus import CorpusManifest, Screenshot, SplitAssignment, load_image
from .embedder import EmbeddingNet, embed_batch, preprocess, save_checkpoint

DEFAULT_MARGIN = 2.2


class TrainerError(RuntimeError):
    """Invalid hyperparameters, unusable training pool, or diverged training."""


@dataclass(frozen=True)
class TrainHyper:
    """Training hyperparameters. Defaults follow the reference schedule:
    margin 2.2, Adam at 2e-5 decayed 1% every 300 minibatches, 32-triplet
    batches, 21000 stage-1 minibatches, 75x8x30 stage-2 schedule."""

    margin: float = DEFAULT_MARGIN
    lr: float = 2e-5
    lr_decay: float = 0.99
    lr_decay_every: int = 300
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 32
    stage1_minibatches: int = 21000
    stage2_query_sets: int = 75
    stage2_repeats_per_query_set: int = 8
    stage2_minibatches_per_subset: int = 30
    distance_in_loss: str = "squared_l2"
    network_type: str = "triplet"
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.margin <= 0:
            raise TrainerError(f"margin must be > 0, got {self.margin}")
        if self.lr <= 0 or not (0 < self.lr_decay <= 1) or self.lr_decay_every < 1:
            raise TrainerError("invalid learning-rate schedule")
        if self.batch_size < 1:
            raise TrainerError(f"batch_size must be >= 1, got {self.batch_size}")
        if min(self.stage1_minibatches, self.stage2_query_sets,
               self.stage2_repeats_per_query_set, self.stage2_minibatches_per_subset) < 0:
            raise TrainerError("minibatch counts must be >= 0")
        if self.distance_in_loss not in ("squared_l2", "l1"):
            raise TrainerError(f"unknown distance_in_loss {self.distance_in_loss!r}")
        if self.network_type not in ("triplet", "siamese"):
            raise TrainerError(f"unknown network_type {self.network_type!r}")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainHyper":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise TrainerError(f"unknown hyperparameter keys: {sorted(unknown)}")
        return cls(**d)


def lr_for_step(step: int, hyper: TrainHyper) -> float:
    """Learning rate used on 1-based minibatch `step`: decayed once per
    lr_decay_every completed minibatches (step 900 with defaults gives
    2e-5 * 0.99**3)."""
    return hyper.lr * hyper.lr_decay ** (step // hyper.lr_decay_every)


def triplet_loss(f_a, f_p, f_n, margin: float = DEFAULT_MARGIN, distance: str = "squared_l2"):
    """max(d(a,p) - d(a,n) + margin, 0) with d = squared L2 (or L1).

    1-D inputs give a scalar tensor; 2-D (N, D) inputs give per-row losses.
    """
    f_a, f_p, f_n = (torch.as_tensor(t) for t in (f_a, f_p, f_n))
    if not (f_a.shape == f_p.shape == f_n.shape):
        raise TrainerError(
            f"embedding dimension mismatch: {tuple(f_a.shape)} vs "
            f"{tuple(f_p.shape)} vs {tuple(f_n.shape)}"
        )
    if distance == "squared_l2":
        d_ap = ((f_a - f_p) ** 2).sum(dim=-1)
        d_an = ((f_a - f_n) ** 2).sum(dim=-1)
    elif distance == "l1":
        d_ap = (f_a - f_p).abs().sum(dim=-1)
        d_an = (f_a - f_n).abs().sum(dim=-1)
    else:
        raise TrainerError(f"unknown distance {distance!r}")
    return torch.clamp(d_ap - d_an + margin, min=0.0)


@dataclass(frozen=True)
class Triplet:
    anchor: Screenshot
    positive: Screenshot
    negative: Screenshot

    def __post_init__(self):
        if self.anchor.website_id != self.positive.website_id:
            raise TrainerError("anchor and positive must share a website")
        if self.anchor.website_id == self.negative.website_id:
            raise TrainerError("negative must come from a different website")
        if self.anchor.record_id == self.positive.record_id:
            raise TrainerError("anchor and positive must be distinct records")


@dataclass(frozen=True)
class HardSubset:
    """One query per website plus its mined hard positive/negative.
    Websites with a single screenshot have no hard positive and are absent
    from hard_positives."""

    query_set: tuple[Screenshot, ...]
    hard_positives: Mapping[str, Screenshot]
    hard_negatives: Mapping[str, Screenshot]

    def __post_init__(self):
        by_id = {q.record_id: q for q in self.query_set}
        for rid, rec in self.hard_positives.items():
            if rec.website_id != by_id[rid].website_id:
                raise TrainerError("hard positive from a different website")
        for rid, rec in self.hard_negatives.items():
            if rec.website_id == by_id[rid].website_id:
                raise TrainerError("hard negative from the query's website")

    def triplets(self) -> list[Triplet]:
        return [
            Triplet(q, self.hard_positives[q.record_id], self.hard_negatives[q.record_id])
            for q in self.query_set
            if q.record_id in self.hard_positives
        ]


class TrainingPool:
    """Train-split screenshots grouped per website. Training phishing pages
    are pooled into their target website's set alongside trusted pages."""

    def __init__(self, records: Sequence[Screenshot]):
        for rec in records:
            if rec.website_id is None:
                raise TrainerError(f"record {rec.record_id!r} has no website_id")
        self.records: list[Screenshot] = sorted(
            records, key=lambda r: (r.website_id, r.record_id)
        )
        if len({r.record_id for r in self.records}) != len(self.records):
            raise TrainerError("duplicate record_ids in training pool")
        self.by_site: dict[str, list[Screenshot]] = {}
        for rec in self.records:
            self.by_site.setdefault(rec.website_id, []).append(rec)
        self.sites: tuple[str, ...] = tuple(sorted(self.by_site))
        self._site_span: dict[str, tuple[int, int]] = {}
        offset = 0
        for wid in self.sites:
            n = len(self.by_site[wid])
            self._site_span[wid] = (offset, n)
            offset += n
        self._anchor_indices = [
            i for i, r in enumerate(self.records) if len(self.by_site[r.website_id]) >= 2
        ]

    @classmethod
    def from_split(cls, manifest: CorpusManifest, split: SplitAssignment) -> "TrainingPool":
        records = [
            r
            for r in manifest.records
            if r.source_class in ("trusted", "phishing")
            and split.assignment[r.record_id] == "train"
        ]
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)


def sample_triplet_random(pool: TrainingPool, rng: np.random.Generator) -> Triplet:
    """Uniform random triplet: anchor uniform over screenshots of websites
    with >= 2 pages, positive uniform over the anchor's other same-site pages,
    negative uniform over all other-site pages."""
    if len(pool.sites) < 2:
        raise TrainerError("pool has a single website: negative undefined")
    if not pool._anchor_indices:
        raise TrainerError("no website has >= 2 screenshots: positive undefined")
    a_idx = pool._anchor_indices[int(rng.integers(len(pool._anchor_indices)))]
    anchor = pool.records[a_idx]
    site = pool.by_site[anchor.website_id]
    pos_candidates = [r for r in site if r.record_id != anchor.record_id]
    positive = pos_candidates[int(rng.integers(len(pos_candidates)))]
    start, count = pool._site_span[anchor.website_id]
    j = int(rng.integers(len(pool.records) - count))
    if j >= start:
        j += count
    return Triplet(anchor, positive, pool.records[j])


def sample_query_set(pool: TrainingPool, rng: np.random.Generator) -> tuple[Screenshot, ...]:
    """One uniformly sampled screenshot per website, in website_id order."""
    out = []
    for wid in pool.sites:
        site = pool.by_site[wid]
        out.append(site[int(rng.integers(len(site)))])
    return tuple(out)


def mine_hard_examples(
    model: EmbeddingNet | None,
    pool: TrainingPool,
    rng: np.random.Generator,
    query_set: tuple[Screenshot, ...] | None = None,
    embed_fn: Callable[[Screenshot], np.ndarray] | None = None,
    image_bank: "ImageBank | None" = None,
) -> HardSubset:
    """Select, per query, the same-site screenshot at maximum embedding
    distance and the other-site screenshot at minimum distance.

    Distances are plain L2 in float64; ties go to the lowest record_id. A
    query whose website has no other screenshot gets no hard positive.
    embed_fn overrides the model for tests (record -> vector).
    """
    if len(pool.sites) < 2:
        raise TrainerError("pool has a single website: hard negative undefined")
    recs = sorted(pool.records, key=lambda r: r.record_id)
    if embed_fn is not None:
        vectors = np.stack([np.asarray(embed_fn(r), dtype=np.float64) for r in recs])
    else:
        bank = image_bank if image_bank is not None else ImageBank()
        vectors = embed_batch(model, [bank.get(r) for r in recs]).astype(np.float64)
    if query_set is None:
        query_set = sample_query_set(pool, rng)
    idx_of = {r.record_id: i for i, r in enumerate(recs)}
    site_of = np.array([r.website_id for r in recs])
    hard_pos: dict[str, Screenshot] = {}
    hard_neg: dict[str, Screenshot] = {}
    for q in query_set:
        qi = idx_of[q.record_id]
        dists = np.sqrt(((vectors - vectors[qi]) ** 2).sum(axis=1))
        same = site_of == q.website_id
        same[qi] = False
        if same.any():
            cand = np.flatnonzero(same)
            hard_pos[q.record_id] = recs[cand[int(np.argmax(dists[cand]))]]
        cand = np.flatnonzero(site_of != q.website_id)
        hard_neg[q.record_id] = recs[cand[int(np.argmin(dists[cand]))]]
    return HardSubset(query_set=tuple(query_set), hard_positives=hard_pos, hard_negatives=hard_neg)


class ImageBank:
    """LRU cache of loaded [0,1] images keyed by record_id. Returned arrays
    are shared; callers must not mutate them."""

    def __init__(self, capacity: int = 512):
        self.capacity = capacity
        self._cache: OrderedDict[str, np.ndarray] = OrderedDict()

    def get(self, record: Screenshot) -> np.ndarray:
        img = self._cache.get(record.record_id)
        if img is None:
            img = load_image(record)
            self._cache[record.record_id] = img
            if len(self._cache) > self.capacity:
                self._cache.popitem(last=False)
        else:
            self._cache.move_to_end(record.record_id)
        return img


@dataclass
class TrainStep:
    minibatch: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    history: list[TrainStep]
    global_step: int
    checkpoint_path: Path | None


class TrainSession:
    """Owns the model, optimizer, rng, and global minibatch counter so the
    optimizer state and learning-rate schedule continue across stages."""

    def __init__(
        self,
        model: EmbeddingNet,
        hyper: TrainHyper,
        rng: np.random.Generator | int,
        image_bank: ImageBank | None = None,
        checkpoint_dir: str | Path | None = None,
        log_path: str | Path | None = None,
        optimizer_state: Mapping | None = None,
        start_step: int = 0,
    ):
        if hyper.network_type != "triplet":
            raise NotImplementedError(
                f"network_type {hyper.network_type!r} is a reserved configuration "
                "name and is not implemented"
            )
        self.model = model
        self.hyper = hyper
        self.rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
        self.image_bank = image_bank if image_bank is not None else ImageBank()
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.log_path = Path(log_path) if log_path else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=hyper.lr, betas=(hyper.adam_beta1, hyper.adam_beta2)
        )
        if optimizer_state is not None:
            self.optimizer.load_state_dict(dict(optimizer_state))
        self.global_step = start_step
        self.history: list[TrainStep] = []
        self.last_checkpoint: Path | None = None

    def _log(self, step: TrainStep) -> None:
        if self.log_path is None:
            return
        with self.log_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps({"minibatch": step.minibatch, "loss": step.loss, "lr": step.lr}) + "\n")

    def _meta(self, stage: str) -> dict:
        return {
            "global_step": self.global_step,
            "stage": stage,
            "hyper": self.hyper.to_dict(),
        }

    def save(self, name: str, stage: str = "") -> Path:
        if self.checkpoint_dir is None:
            raise TrainerError("session has no checkpoint_dir")
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        path = self.checkpoint_dir / f"{name}.ckpt"
        save_checkpoint(
            self.model, path,
            training_meta=self._meta(stage),
            optimizer_state=self.optimizer.state_dict(),
        )
        self.last_checkpoint = path
        return path

    def step_batch(self, anchors, positives, negatives, stage: str = "") -> TrainStep:
        """Run one minibatch on lists of [0,1] images (one forward pass over
        the concatenated anchor|positive|negative batch, mean triplet loss)."""
        n = len(anchors)
        if not (len(positives) == len(negatives) == n):
            raise TrainerError("anchor/positive/negative batch sizes differ")
        step = self.global_step + 1
        lr = lr_for_step(step, self.hyper)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        batch = torch.stack([preprocess(img) for img in [*anchors, *positives, *negatives]])
        self.model.train()
        out = self.model(batch)
        losses = triplet_loss(
            out[:n], out[n:2 * n], out[2 * n:],
            margin=self.hyper.margin, distance=self.hyper.distance_in_loss,
        )
        loss = losses.mean()
        if not torch.isfinite(loss):
            self.model.eval()
            raise TrainerError(
                f"non-finite loss at minibatch {step}; "
                f"last good checkpoint: {self.last_checkpoint}"
            )
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        self.model.eval()
        self.global_step = step
        record = TrainStep(minibatch=step, loss=float(loss.detach()), lr=lr)
        self.history.append(record)
        self._log(record)
        if (
            self.checkpoint_dir is not None
            and self.hyper.checkpoint_every > 0
            and step % self.hyper.checkpoint_every == 0
        ):
            self.save(f"step-{step:07d}", stage=stage)
        return record

    def step_triplets(self, triplets: Sequence[Triplet], stage: str = "") -> TrainStep:
        bank = self.image_bank
        return self.step_batch(
            [bank.get(t.anchor) for t in triplets],
            [bank.get(t.positive) for t in triplets],
            [bank.get(t.negative) for t in triplets],
            stage=stage,
        )


def train_stage1(
    session: TrainSession,
    pool: TrainingPool,
    minibatches: int | None = None,
) -> TrainResult:
    """Stage 1: uniformly sampled random triplets for `minibatches` steps
    (default hyper.stage1_minibatches)."""
    n = session.hyper.stage1_minibatches if minibatches is None else minibatches
    first = len(session.history)
    for _ in range(n):
        triplets = [
            sample_triplet_random(pool, session.rng)
            for _ in range(session.hyper.batch_size)
        ]
        session.step_triplets(triplets, stage="stage1")
    path = session.save("stage1", stage="stage1") if session.checkpoint_dir else None
    return TrainResult(session.history[first:], session.global_step, path)


def train_stage2(
    session: TrainSession,
    pool: TrainingPool,
    query_sets: int | None = None,
    repeats: int | None = None,
    minibatches_per_subset: int | None = None,
) -> TrainResult:
    """Stage 2: hard-example training. Per query set, the mining runs again
    with the latest weights before every block of minibatches; each query's
    triplet partners are its mined hard positive and negative, and batches
    cycle through the queries."""
    hyper = session.hyper
    n_sets = hyper.stage2_query_sets if query_sets is None else query_sets
    n_rep = hyper.stage2_repeats_per_query_set if repeats is None else repeats
    n_mb = hyper.stage2_minibatches_per_subset if minibatches_per_subset is None else minibatches_per_subset
    first = len(session.history)
    for _ in range(n_sets):
        queries = sample_query_set(pool, session.rng)
        for _ in range(n_rep):
            subset = mine_hard_examples(
                session.model, pool, session.rng,
                query_set=queries, image_bank=session.image_bank,
            )
            triplets = subset.triplets()
            if not triplets:
                raise TrainerError(
                    "no usable queries: every website has a single screenshot"
                )
            cursor = 0
            for _ in range(n_mb):
                batch = [
                    triplets[(cursor + j) % len(triplets)]
                    for j in range(hyper.batch_size)
                ]
                cursor = (cursor + hyper.batch_size) % len(triplets)
                session.step_triplets(batch, stage="stage2")
    path = session.save("stage2", stage="stage2") if session.checkpoint_dir else None
    return TrainResult(session.history[first:], session.global_step, path)
