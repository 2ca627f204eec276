"""Build the trusted-list index, calibrate a decision threshold, and classify
held-out pages.

Run demo_corpus_and_split.py and demo_train_triplet.py first.
"""
from pathlib import Path

from phishsim import (
    ImageBank,
    build_index,
    load_checkpoint,
    load_image,
    load_index,
    load_manifest,
    load_split,
    predict,
    query,
    save_index,
    select_threshold,
    with_threshold,
)

OUT = Path(__file__).parent / "output"

manifest = load_manifest(OUT / "corpus" / "manifest.tsv")
split = load_split(OUT / "split.tsv")
model, meta, _ = load_checkpoint(OUT / "run" / "model.ckpt")
print(f"loaded checkpoint from minibatch {meta['global_step']}")

# The index holds one embedding per training screenshot (trusted pages plus
# the phishing pages seen in training, filed under their target website).
bank = ImageBank(capacity=256)
train_records = [
    r for r in manifest.records
    if r.source_class in ("trusted", "phishing")
    and split.assignment[r.record_id] == "train"
]
index = build_index(model, train_records, image_bank=bank)
print(f"index: {index.vectors.shape[0]} rows x {index.vectors.shape[1]} dims, "
      f"{len(set(index.website_ids))} websites")

# Calibrate tau on the validation split at the equal-error-rate point:
# phishing distances should fall below tau, benign distances above.
val_records = [r for r in manifest.records
               if split.assignment[r.record_id] == "validation"]
distances, labels = [], []
for rec in val_records:
    result = predict(index, model, bank.get(rec), query_record=rec.record_id)
    distances.append(result.min_distance)
    labels.append(rec.source_class == "phishing")
tau = select_threshold(
    [d for d, y in zip(distances, labels) if y],
    [d for d, y in zip(distances, labels) if not y],
)
index = with_threshold(index, tau)
save_index(index, OUT / "trusted.idx")
print(f"threshold tau = {tau:.4f} (calibrated on {len(val_records)} validation pages)")

# Classify one held-out phishing page and one benign page.
reloaded = load_index(OUT / "trusted.idx")
for cls in ("phishing", "benign_test"):
    rec = next(r for r in manifest.records if r.source_class == cls
               and split.assignment[r.record_id] == "test")
    result = predict(reloaded, model, load_image(rec), query_record=rec.record_id, k=3)
    print(f"\n{rec.record_id} ({cls}): verdict={result.verdict} "
          f"min_distance={result.min_distance:.4f}")
    for rank, m in enumerate(result.top_matches, 1):
        print(f"  #{rank} {m.website_id:8s} {m.record_id:12s} d={m.distance:.4f}")
