"""Trusted-list embedding index: build, query, threshold, extend, persist.

A page is classified by embedding it, scanning the index for the minimum
L2 distance, and calling it phishing when that distance falls below the
calibrated threshold tau. The scan is exact (no approximate structures):
at the ~10^4 rows of a realistic trusted-list a linear scan is more than
fast enough.
"""

from __future__ import annotations

import hashlib
import json
import struct
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Screenshot
from .embedder import EmbeddingNet, embed, embed_batch, model_fingerprint
from .trainer import ImageBank

_INDEX_MAGIC = b"PSIDX1\n"
INDEX_FORMAT_VERSION = 1


class EmbeddingIndexError(RuntimeError):
    """Index construction, query, or persistence failure."""


@dataclass(frozen=True)
class Match:
    website_id: str
    record_id: str
    distance: float


@dataclass(frozen=True)
class PredictionResult:
    query_record: str
    top_matches: tuple[Match, ...]
    min_distance: float
    verdict: str  # phishing | benign | no_threshold


@dataclass(frozen=True)
class EmbeddingIndex:
    """Rows of trusted-list embeddings with aligned website/record labels.

    threshold is the calibrated distance cutoff tau; None until calibrated.
    """

    vectors: np.ndarray  # (M, D) float32
    website_ids: tuple[str, ...]
    record_ids: tuple[str, ...]
    model_fingerprint: str
    threshold: float | None = None

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float32)
        object.__setattr__(self, "vectors", vec)
        if vec.ndim != 2:
            raise EmbeddingIndexError(f"vectors must be 2-D, got shape {vec.shape}")
        if not (len(self.website_ids) == len(self.record_ids) == vec.shape[0]):
            raise EmbeddingIndexError("vectors, website_ids, record_ids are misaligned")
        if not np.isfinite(vec).all():
            raise EmbeddingIndexError("index contains non-finite vectors")
        if len(set(self.record_ids)) != len(self.record_ids):
            raise EmbeddingIndexError("duplicate record_ids in index")
        if self.threshold is not None and not self.threshold > 0:
            raise EmbeddingIndexError(f"threshold must be > 0, got {self.threshold}")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def websites(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.website_ids)))


def build_index(
    model: EmbeddingNet,
    records: Sequence[Screenshot],
    image_bank: ImageBank | None = None,
    threshold: float | None = None,
) -> EmbeddingIndex:
    """Embed trusted-list records (trusted pages plus any training phishing
    pages) into one index row each."""
    if not records:
        raise EmbeddingIndexError("cannot build an index from an empty record list")
    for rec in records:
        if rec.website_id is None:
            raise EmbeddingIndexError(f"record {rec.record_id!r} has no website_id")
    recs = sorted(records, key=lambda r: r.record_id)
    bank = image_bank if image_bank is not None else ImageBank(capacity=64)
    vectors = embed_batch(model, [bank.get(r) for r in recs])
    return EmbeddingIndex(
        vectors=vectors,
        website_ids=tuple(r.website_id for r in recs),
        record_ids=tuple(r.record_id for r in recs),
        model_fingerprint=model_fingerprint(model),
        threshold=threshold,
    )


def query(index: EmbeddingIndex, embedding: np.ndarray, k: int = 5) -> list[Match]:
    """Rank websites by their minimum plain-L2 distance row.

    Exact scan; distances in float64. Websites tie-break by the lowest
    record_id among their minimum-distance rows. k beyond the number of
    distinct websites returns all of them.
    """
    if k < 1:
        raise EmbeddingIndexError(f"k must be >= 1, got {k}")
    q = np.asarray(embedding, dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise EmbeddingIndexError(
            f"embedding dim {q.shape[0]} does not match index dim {index.dim}"
        )
    diffs = index.vectors.astype(np.float64) - q
    dists = np.sqrt((diffs * diffs).sum(axis=1))
    best: dict[str, Match] = {}
    for wid, rid, d in zip(index.website_ids, index.record_ids, dists):
        cur = best.get(wid)
        d = float(d)
        if cur is None or d < cur.distance or (d == cur.distance and rid < cur.record_id):
            best[wid] = Match(website_id=wid, record_id=rid, distance=d)
    ranked = sorted(best.values(), key=lambda m: (m.distance, m.record_id))
    return ranked[:k]


def predict(
    index: EmbeddingIndex,
    model: EmbeddingNet,
    image: np.ndarray,
    query_record: str = "",
    k: int = 5,
    fingerprint: str | None = None,
) -> PredictionResult:
    """Embed one [0,1] image and classify it against the index.

    Verdict is phishing iff min_distance < threshold (strict; a distance
    exactly at tau is benign), or no_threshold when the index is uncalibrated.
    `fingerprint` lets callers that verified the model once skip re-hashing.
    """
    fp = fingerprint if fingerprint is not None else model_fingerprint(model)
    if fp != index.model_fingerprint:
        raise EmbeddingIndexError(
            "model fingerprint does not match the index (was the index built "
            "with a different model or weights?)"
        )
    vec = embed(model, image)
    matches = query(index, vec, k=k)
    min_distance = matches[0].distance
    if index.threshold is None:
        verdict = "no_threshold"
    elif min_distance < index.threshold:
        verdict = "phishing"
    else:
        verdict = "benign"
    return PredictionResult(
        query_record=query_record,
        top_matches=tuple(matches),
        min_distance=min_distance,
        verdict=verdict,
    )


def select_threshold(
    phish_val_dists: Sequence[float],
    benign_val_dists: Sequence[float],
) -> float:
    """Equal-error-rate threshold.

    Scans all midpoints between adjacent pooled sorted distances and returns
    the tau minimizing |FPR - FNR|, smallest tau on ties. FPR = fraction of
    benign distances < tau (flagged phishing); FNR = fraction of phishing
    distances >= tau (missed).
    """
    phish = np.asarray(phish_val_dists, dtype=np.float64)
    benign = np.asarray(benign_val_dists, dtype=np.float64)
    if phish.size == 0 or benign.size == 0:
        raise EmbeddingIndexError("select_threshold needs non-empty phishing and benign lists")
    pooled = np.sort(np.concatenate([phish, benign]))
    if pooled.size == 1:
        grid = pooled
    else:
        grid = np.unique((pooled[:-1] + pooled[1:]) / 2.0)
    best_tau = None
    best_gap = None
    for tau in grid:
        fpr = float(np.mean(benign < tau))
        fnr = float(np.mean(phish >= tau))
        gap = abs(fpr - fnr)
        if best_gap is None or gap < best_gap:
            best_gap, best_tau = gap, float(tau)
    return best_tau


def add_website(
    index: EmbeddingIndex,
    model: EmbeddingNet,
    screenshots: Sequence[Screenshot],
    image_bank: ImageBank | None = None,
) -> EmbeddingIndex:
    """Append rows for new trusted screenshots without retraining.

    Returns a new index; the input is unchanged. The threshold carries over
    (a rolling update; recalibrate when the trusted-list changes a lot).
    """
    fp = model_fingerprint(model)
    if fp != index.model_fingerprint:
        raise EmbeddingIndexError("model fingerprint does not match the index")
    if not screenshots:
        return index
    for rec in screenshots:
        if rec.website_id is None:
            raise EmbeddingIndexError(f"record {rec.record_id!r} has no website_id")
        if rec.record_id in index.record_ids:
            raise EmbeddingIndexError(f"duplicate record_id {rec.record_id!r}")
    recs = sorted(screenshots, key=lambda r: r.record_id)
    bank = image_bank if image_bank is not None else ImageBank(capacity=64)
    new_vectors = embed_batch(model, [bank.get(r) for r in recs])
    return EmbeddingIndex(
        vectors=np.concatenate([index.vectors, new_vectors], axis=0),
        website_ids=index.website_ids + tuple(r.website_id for r in recs),
        record_ids=index.record_ids + tuple(r.record_id for r in recs),
        model_fingerprint=index.model_fingerprint,
        threshold=index.threshold,
    )


_write_lock = threading.Lock()


def save_index(index: EmbeddingIndex, path: str | Path) -> None:
    """Binary index file: magic, version, dim, row count, fingerprint,
    optional threshold, sha256 checksum, float32 rows, label table."""
    labels = json.dumps(
        {"website_ids": list(index.website_ids), "record_ids": list(index.record_ids)}
    ).encode("utf-8")
    rows = np.ascontiguousarray(index.vectors, dtype=np.float32).tobytes()
    payload = struct.pack("<Q", len(rows)) + rows + struct.pack("<Q", len(labels)) + labels
    fp = index.model_fingerprint.encode("utf-8")
    header = _INDEX_MAGIC
    header += struct.pack("<IIQ", INDEX_FORMAT_VERSION, index.dim, len(index))
    header += struct.pack("<H", len(fp)) + fp
    if index.threshold is None:
        header += struct.pack("<Bd", 0, 0.0)
    else:
        header += struct.pack("<Bd", 1, index.threshold)
    checksum = hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with _write_lock:
        tmp.write_bytes(header + checksum + payload)
        tmp.replace(path)


def load_index(path: str | Path) -> EmbeddingIndex:
    path = Path(path)
    if not path.exists():
        raise EmbeddingIndexError(f"index file not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(_INDEX_MAGIC):
        raise EmbeddingIndexError(f"not an index file (bad magic): {path}")
    off = len(_INDEX_MAGIC)
    try:
        version, dim, rows = struct.unpack_from("<IIQ", blob, off)
        off += struct.calcsize("<IIQ")
        if version != INDEX_FORMAT_VERSION:
            raise EmbeddingIndexError(f"unsupported index format version {version}")
        (fp_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        fingerprint = blob[off:off + fp_len].decode("utf-8")
        off += fp_len
        has_tau, tau = struct.unpack_from("<Bd", blob, off)
        off += struct.calcsize("<Bd")
        checksum = blob[off:off + 32]
        payload = blob[off + 32:]
        if hashlib.sha256(payload).digest() != checksum:
            raise EmbeddingIndexError(f"index checksum mismatch (corrupt file): {path}")
        (n_rows,) = struct.unpack_from("<Q", payload, 0)
        rows_bytes = payload[8:8 + n_rows]
        (n_labels,) = struct.unpack_from("<Q", payload, 8 + n_rows)
        labels_bytes = payload[16 + n_rows:16 + n_rows + n_labels]
    except struct.error as exc:
        raise EmbeddingIndexError(f"truncated index file: {path}") from exc
    vectors = np.frombuffer(rows_bytes, dtype=np.float32).reshape(rows, dim).copy()
    labels = json.loads(labels_bytes.decode("utf-8"))
    return EmbeddingIndex(
        vectors=vectors,
        website_ids=tuple(labels["website_ids"]),
        record_ids=tuple(labels["record_ids"]),
        model_fingerprint=fingerprint,
        threshold=tau if has_tau else None,
    )


def with_threshold(index: EmbeddingIndex, threshold: float) -> EmbeddingIndex:
    return replace(index, threshold=threshold)
