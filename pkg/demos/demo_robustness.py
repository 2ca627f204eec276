"""Probe the trained model with hand-crafted perturbations and FGSM attacks,
then harden it with adversarial fine-tuning.

Run the corpus, training, and index demos first.
"""
from pathlib import Path

import numpy as np

from phishsim import (
    ImageBank,
    PerturbationSpec,
    TrainHyper,
    TrainingPool,
    TrainSession,
    adversarial_finetune,
    attack_report,
    fgsm_triplet,
    load_checkpoint,
    load_index,
    load_manifest,
    load_split,
    mild_grid,
    perturb,
    robustness_report,
    write_robustness_report,
)

OUT = Path(__file__).parent / "output"

manifest = load_manifest(OUT / "corpus" / "manifest.tsv")
split = load_split(OUT / "split.tsv")
model, meta, optimizer_state = load_checkpoint(OUT / "run" / "model.ckpt")
index = load_index(OUT / "trusted.idx")
bank = ImageBank(capacity=256)

# ---------------------------------------------------------------------------
# Hand-crafted perturbations: re-evaluate the held-out phishing pages after
# blurring, gamma shifts, noise, occlusion, and translation.
rec = next(r for r in manifest.records if r.source_class == "phishing")
img = bank.get(rec)
noisy = perturb(img, PerturbationSpec("gaussian_noise", {"variance": 0.01}),
                rng=np.random.default_rng(0))
print(f"gaussian noise moved pixels by {np.abs(noisy - img).mean():.4f} on average")

report = robustness_report(model, index, manifest, split, mild_grid(),
                           seed=0, trials=2, image_bank=bank)
print(f"clean: top1={report.original_top1:.3f} auc={report.original_auc:.3f}")
for row in report.rows:
    print(f"  {row.label:28s} top1={row.perturbed_top1:.3f} "
          f"(drop {row.top1_drop:+.3f}) auc={row.perturbed_auc:.3f}")
write_robustness_report(report, OUT / "robustness.tsv")

# ---------------------------------------------------------------------------
# FGSM nudges each pixel epsilon along the gradient that pushes the page away
# from its trusted match. The attack budget is an L-infinity ball. A large
# margin keeps the hinge active even for a well-separated triplet, so the
# gradient is never all-zero here.
positive = bank.get(next(r for r in manifest.records
                         if r.source_class == "trusted"
                         and r.website_id == rec.website_id))
negative = bank.get(next(r for r in manifest.records
                         if r.source_class == "trusted"
                         and r.website_id != rec.website_id))
adv = fgsm_triplet(model, img, positive, negative, epsilon=0.005, margin=50.0)
print(f"\nfgsm(0.005): max pixel change {np.abs(adv - img).max():.4f}")

pre = attack_report(model, index, manifest, split, attack="fgsm",
                    epsilon=0.03, seed=0, image_bank=bank)
print(f"pre-finetune  {pre.rows[0].label}: top1 drop {pre.rows[0].top1_drop:+.3f}")

# ---------------------------------------------------------------------------
# Adversarial fine-tuning: keep training, but replace half of each batch's
# anchors with FGSM versions of themselves (random epsilon per anchor).
pool = TrainingPool.from_split(manifest, split)
hyper = TrainHyper(batch_size=8, lr=1e-4, checkpoint_every=50)
session = TrainSession(model, hyper, rng=np.random.default_rng(1),
                       checkpoint_dir=OUT / "run", image_bank=bank,
                       optimizer_state=optimizer_state,
                       start_step=int(meta["global_step"]))
result = adversarial_finetune(session, pool, epsilon_range=(0.003, 0.01),
                              minibatches=20)
print(f"\nfine-tuned for {len(result.history)} minibatches "
      f"-> {result.checkpoint_path}")

from phishsim import build_index  # rebuild: the weights moved

index2 = build_index(model, [r for r in manifest.records
                             if r.source_class in ("trusted", "phishing")
                             and split.assignment[r.record_id] == "train"],
                     image_bank=bank)
post = attack_report(model, index2, manifest, split, attack="fgsm",
                     epsilon=0.03, seed=0, image_bank=bank)
print(f"post-finetune {post.rows[0].label}: top1 drop {post.rows[0].top1_drop:+.3f} "
      f"(was {pre.rows[0].top1_drop:+.3f})")
