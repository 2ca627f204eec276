"""Build a small synthetic screenshot corpus, split it, and scan for
near-duplicates.

Every other demo reuses the corpus this script generates, so run it first:

    python demos/demo_corpus_and_split.py
"""
from pathlib import Path

import cv2
import numpy as np

from phishsim import (
    load_image,
    load_manifest,
    near_duplicate_scan,
    split_corpus,
    write_split,
)
from phishsim.synth import make_desk_corpus

OUT = Path(__file__).parent / "output"

# ---------------------------------------------------------------------------
# A corpus is a manifest (TSV) plus a directory of screenshots. Each protected
# website contributes trusted pages; phishing pages imitate one of those
# websites; benign pages belong to none of them.
manifest_path = make_desk_corpus(
    OUT / "corpus", n_websites=6, trusted_per_site=8, phishing_total=18,
    benign_total=12, seed=0,
)
manifest = load_manifest(manifest_path)
print(f"corpus: {len(manifest.websites)} websites, {len(manifest.records)} records")
for cls in ("trusted", "phishing", "benign_test"):
    n = sum(1 for r in manifest.records if r.source_class == cls)
    print(f"  {cls:12s} {n}")

# Images load as float32 RGB in [0, 1], resized to 224x224.
img = load_image(manifest.records[0])
print(f"image: shape={img.shape} dtype={img.dtype} range=[{img.min():.2f}, {img.max():.2f}]")

# ---------------------------------------------------------------------------
# Trusted pages always train (they form the reference index). Phishing pages
# split per-website so every site keeps some held-out attacks; benign pages
# are test-only.
split = split_corpus(manifest, phishing_train_fraction=0.4,
                     validation_fraction=0.3, seed=0)
counts = {}
for name in ("train", "validation", "test"):
    counts[name] = sum(1 for v in split.assignment.values() if v == name)
print(f"split: {counts}")
write_split(split, OUT / "split.tsv")

# ---------------------------------------------------------------------------
# Near-duplicate detection clusters records whose feature distance falls
# below a threshold (default: first percentile of cross-website distances).
# Here we use a cheap downsampled-pixels feature.
def pixel_feature(image: np.ndarray) -> np.ndarray:
    return cv2.resize(image, (32, 32), interpolation=cv2.INTER_AREA).ravel()

report = near_duplicate_scan(manifest.records, pixel_feature)
print(f"dedup: threshold={report.threshold:.4f}, "
      f"{len(report.pairs)} pairs in {len(report.components)} groups")
print(f"canonical representatives: {', '.join(report.canonical_records[:6])} ...")
