"""Score the trained model on the held-out split, compare against the
no-metric-learning baselines, and project embeddings to 2-D.

Run the corpus, training, and index demos first.
"""
from pathlib import Path

from phishsim import (
    ImageBank,
    baseline_hog_nn,
    baseline_pretrained_nn,
    embed_batch,
    evaluate_model,
    load_checkpoint,
    load_index,
    load_manifest,
    load_split,
    project_embeddings_2d,
    write_eval_report,
    write_projection,
    write_roc_points,
)

OUT = Path(__file__).parent / "output"

manifest = load_manifest(OUT / "corpus" / "manifest.tsv")
split = load_split(OUT / "split.tsv")
model, _, _ = load_checkpoint(OUT / "run" / "model.ckpt")
index = load_index(OUT / "trusted.idx")
bank = ImageBank(capacity=256)

# Phishing pages score top-k website matching; phishing + benign pages form
# the ROC over min-distance scores.
report = evaluate_model(model, index, manifest, split, image_bank=bank)
print(f"trained   top1={report.top1_match:.3f} top5={report.top5_match:.3f} "
      f"auc={report.auc:.3f} pauc@1%={report.partial_auc_at_1pct:.5f}")
print(f"           mean prediction time {report.timing_mean*1e3:.1f} ms "
      f"(sd {report.timing_sd*1e3:.1f} ms)")

hog = baseline_hog_nn(manifest, split)
print(f"hog-nn    top1={hog.top1_match:.3f} top5={hog.top5_match:.3f} auc={hog.auc:.3f}")

raw = baseline_pretrained_nn("tiny", manifest, split, seed=0)
print(f"raw-cnn   top1={raw.top1_match:.3f} top5={raw.top5_match:.3f} auc={raw.auc:.3f}")

write_eval_report(report, OUT / "report.json")
write_roc_points(report, OUT / "roc.tsv")
print(f"wrote {OUT / 'report.json'} and {OUT / 'roc.tsv'}")

# t-SNE projection of every test embedding, labeled by website (or class for
# benign pages) — the clusters are what the triplet loss buys.
records = sorted(
    (r for r in manifest.records if split.assignment[r.record_id] == "test"),
    key=lambda r: r.record_id,
)
vectors = embed_batch(model, [bank.get(r) for r in records])
labels = [r.website_id or r.source_class for r in records]
points = project_embeddings_2d(vectors, labels, seed=0, perplexity=5.0)
write_projection(points, OUT / "projection.tsv")
print(f"projected {len(points)} embeddings -> {OUT / 'projection.tsv'}")
