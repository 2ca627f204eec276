"""Train the visual-similarity embedding with the two-stage triplet scheme.

Run demo_corpus_and_split.py first. This uses the small from-scratch backbone
so the whole demo finishes in a couple of minutes on a laptop CPU; swap
backbone="vgg16" (plus a local weights file) for the full-size model.
"""
from pathlib import Path

import numpy as np

from phishsim import (
    ImageBank,
    ModelConfig,
    TrainHyper,
    TrainingPool,
    TrainSession,
    build_model,
    load_manifest,
    load_split,
    lr_for_step,
    train_stage1,
    train_stage2,
)

OUT = Path(__file__).parent / "output"

manifest = load_manifest(OUT / "corpus" / "manifest.tsv")
split = load_split(OUT / "split.tsv")
pool = TrainingPool.from_split(manifest, split)
print(f"training pool: {len(pool.records)} screenshots "
      f"across {len(pool.sites)} websites")

config = ModelConfig(backbone="tiny", pretrained_init=False,
                     added_layer="none", head="global_max_pool")
model = build_model(config, rng_seed=0)

# Stage 1 samples random triplets (anchor + same-site positive + other-site
# negative). Stage 2 re-mines the hardest positive/negative for small query
# sets using the latest weights, which sharpens the margin where it matters.
hyper = TrainHyper(
    batch_size=8, lr=3e-4, stage1_minibatches=60,
    stage2_query_sets=4, stage2_repeats_per_query_set=2,
    stage2_minibatches_per_subset=3, checkpoint_every=50,
)
for step in (1, 299, 300, 900):
    print(f"  lr at minibatch {step:4d}: {lr_for_step(step, hyper):.3e}")

bank = ImageBank(capacity=256)
session = TrainSession(model, hyper, rng=np.random.default_rng(0),
                       checkpoint_dir=OUT / "run",
                       log_path=OUT / "run" / "training_log.jsonl",
                       image_bank=bank)

result = train_stage1(session, pool)
losses = [h.loss for h in result.history]
print(f"stage 1: loss {np.mean(losses[:10]):.3f} -> {np.mean(losses[-10:]):.3f} "
      f"over {len(losses)} minibatches")

result = train_stage2(session, pool)
losses = [h.loss for h in result.history]
print(f"stage 2: {len(losses)} minibatches of mined hard examples, "
      f"final loss {losses[-1]:.3f}")

final = session.save("model")
print(f"checkpoint: {final}")
