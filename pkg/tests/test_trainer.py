import json
import math

import numpy as np
import pytest
import torch

from phishsim.corpus import Screenshot
from phishsim.embedder import build_model, load_checkpoint, model_fingerprint
from phishsim.trainer import (
    HardSubset,
    TrainerError,
    TrainHyper,
    TrainingPool,
    TrainSession,
    Triplet,
    lr_for_step,
    mine_hard_examples,
    sample_query_set,
    sample_triplet_random,
    train_stage1,
    train_stage2,
    triplet_loss,
)

from conftest import TINY


def rec(rid, wid):
    return Screenshot(record_id=rid, image_path=f"{rid}.png",
                      source_class="trusted", website_id=wid)


def pool_of(site_sizes):
    records = []
    for i, n in enumerate(site_sizes):
        for j in range(n):
            records.append(rec(f"s{i}-r{j}", f"site{i}"))
    return TrainingPool(records)


# ---------------------------------------------------------------------------
# Hyperparameters and schedule


def test_hyper_defaults():
    h = TrainHyper()
    assert h.margin == 2.2
    assert h.lr == 2e-5
    assert h.lr_decay == 0.99
    assert h.lr_decay_every == 300
    assert h.batch_size == 32
    assert h.stage1_minibatches == 21000
    assert h.stage2_query_sets == 75
    assert h.stage2_repeats_per_query_set == 8
    assert h.stage2_minibatches_per_subset == 30
    assert h.distance_in_loss == "squared_l2"
    assert h.network_type == "triplet"


def test_hyper_validation():
    with pytest.raises(TrainerError):
        TrainHyper(margin=-1.0)
    with pytest.raises(TrainerError):
        TrainHyper(lr=0.0)
    with pytest.raises(TrainerError):
        TrainHyper(batch_size=0)
    with pytest.raises(TrainerError):
        TrainHyper(distance_in_loss="cosine")


def test_hyper_dict_round_trip():
    h = TrainHyper(margin=1.0, batch_size=8)
    assert TrainHyper.from_dict(h.to_dict()) == h
    with pytest.raises(TrainerError, match="unknown"):
        TrainHyper.from_dict({"margin": 1.0, "bogus": 2})


def test_lr_schedule_hand_values():
    h = TrainHyper()
    # minibatches count from 1; the rate steps down at 300, 600, 900, ...
    assert lr_for_step(1, h) == pytest.approx(2e-5)
    assert lr_for_step(299, h) == pytest.approx(2e-5)
    assert lr_for_step(300, h) == pytest.approx(2e-5 * 0.99)
    assert lr_for_step(599, h) == pytest.approx(2e-5 * 0.99)
    assert lr_for_step(600, h) == pytest.approx(2e-5 * 0.99**2)
    assert lr_for_step(900, h) == pytest.approx(2e-5 * 0.99**3)
    assert lr_for_step(1199, h) == pytest.approx(2e-5 * 0.99**3)


# ---------------------------------------------------------------------------
# Triplet loss


def test_triplet_loss_hand_values():
    a = torch.tensor([0.0, 0.0])
    p = torch.tensor([1.0, 0.0])
    n = torch.tensor([3.0, 0.0])
    # 1 - 9 + 2.2 < 0 -> hinge at zero
    assert float(triplet_loss(a, p, n)) == 0.0
    # 4 - 1 + 2.2 = 5.2
    assert float(triplet_loss(a, torch.tensor([2.0, 0.0]), torch.tensor([1.0, 0.0]))) \
        == pytest.approx(5.2)
    # custom margin
    assert float(triplet_loss(a, p, n, margin=9.0)) == pytest.approx(1.0)


def test_triplet_loss_l1_variant():
    a = torch.tensor([0.0, 0.0])
    p = torch.tensor([2.0, 1.0])
    n = torch.tensor([1.0, 0.0])
    # |2|+|1| - |1| + 2.2 = 4.2
    assert float(triplet_loss(a, p, n, distance="l1")) == pytest.approx(4.2)


def test_triplet_loss_batched_rows():
    a = torch.zeros((2, 2))
    p = torch.tensor([[1.0, 0.0], [2.0, 0.0]])
    n = torch.tensor([[3.0, 0.0], [1.0, 0.0]])
    out = triplet_loss(a, p, n)
    assert out.shape == (2,)
    assert out[0] == 0.0
    assert float(out[1]) == pytest.approx(5.2)


def test_triplet_loss_shape_mismatch():
    with pytest.raises(TrainerError):
        triplet_loss(torch.zeros(3), torch.zeros(2), torch.zeros(3))


@pytest.mark.parametrize("distance", ["squared_l2", "l1"])
def test_triplet_loss_gradients_match_finite_differences(distance):
    """Central finite differences in float64, relative error <= 1e-4."""
    rng = np.random.default_rng(17)
    a = torch.tensor(rng.normal(size=6), dtype=torch.float64, requires_grad=True)
    p = torch.tensor(rng.normal(size=6) * 3, dtype=torch.float64, requires_grad=True)
    n = torch.tensor(rng.normal(size=6) * 0.2, dtype=torch.float64, requires_grad=True)
    loss = triplet_loss(a, p, n, margin=2.2, distance=distance)
    assert float(loss.detach()) > 0, "fixture must be on the active side of the hinge"
    loss.backward()

    eps = 1e-6
    for tensor in (a, p, n):
        numeric = np.zeros(6)
        for i in range(6):
            shifted = tensor.detach().clone()
            shifted[i] += eps
            up = float(triplet_loss(*(shifted if t is tensor else t.detach()
                                      for t in (a, p, n)),
                                    margin=2.2, distance=distance))
            shifted[i] -= 2 * eps
            down = float(triplet_loss(*(shifted if t is tensor else t.detach()
                                        for t in (a, p, n)),
                                      margin=2.2, distance=distance))
            numeric[i] = (up - down) / (2 * eps)
        analytic = tensor.grad.numpy()
        denom = np.maximum(np.abs(numeric), 1e-8)
        assert (np.abs(analytic - numeric) / denom).max() < 1e-4


# ---------------------------------------------------------------------------
# Pools and samplers


def test_pool_requires_website_id():
    benign = Screenshot(record_id="b", image_path="b.png", source_class="benign_test")
    with pytest.raises(TrainerError, match="website_id"):
        TrainingPool([benign])


def test_pool_rejects_duplicate_ids():
    with pytest.raises(TrainerError, match="duplicate"):
        TrainingPool([rec("a", "s0"), rec("a", "s0")])


def test_pool_from_split(micro_corpus, micro_split):
    pool = TrainingPool.from_split(micro_corpus, micro_split)
    assert all(micro_split.of(r.record_id) == "train" for r in pool.records)
    assert all(r.source_class in ("trusted", "phishing") for r in pool.records)
    # training phishing pages pool into their target website
    sites = {r.website_id for r in pool.records}
    assert sites == set(pool.sites)


def test_sampler_error_single_website():
    with pytest.raises(TrainerError, match="negative undefined"):
        sample_triplet_random(pool_of([3]), np.random.default_rng(0))


def test_sampler_error_no_pairable_site():
    with pytest.raises(TrainerError, match="positive undefined"):
        sample_triplet_random(pool_of([1, 1, 1]), np.random.default_rng(0))


def test_sampler_produces_valid_triplets():
    pool = pool_of([2, 3, 4])
    rng = np.random.default_rng(1)
    for _ in range(200):
        t = sample_triplet_random(pool, rng)
        assert t.anchor.website_id == t.positive.website_id
        assert t.anchor.record_id != t.positive.record_id
        assert t.negative.website_id != t.anchor.website_id


def test_sampler_single_record_site_can_serve_negative():
    pool = pool_of([1, 2])
    rng = np.random.default_rng(2)
    negatives = {sample_triplet_random(pool, rng).negative.record_id for _ in range(50)}
    assert negatives == {"s0-r0"}  # anchors can only come from site1


def test_sampler_uniformity():
    """Anchor is uniform over screenshots of pairable sites; the negative is
    uniform over all other-site screenshots. Chi-square against the uniform
    law with a 0.999 cutoff (seeded, so deterministic)."""
    from scipy import stats

    pool = pool_of([2, 3, 4])
    rng = np.random.default_rng(42)
    n_draws = 9000
    anchor_counts = {r.record_id: 0 for r in pool.records}
    neg_given_s0 = {r.record_id: 0 for r in pool.records if r.website_id != "site0"}
    n_s0 = 0
    for _ in range(n_draws):
        t = sample_triplet_random(pool, rng)
        anchor_counts[t.anchor.record_id] += 1
        if t.anchor.website_id == "site0":
            n_s0 += 1
            neg_given_s0[t.negative.record_id] += 1

    observed = np.array(list(anchor_counts.values()))
    chi2 = ((observed - n_draws / 9) ** 2 / (n_draws / 9)).sum()
    assert chi2 < stats.chi2.ppf(0.999, df=8)

    observed = np.array(list(neg_given_s0.values()))
    chi2 = ((observed - n_s0 / 7) ** 2 / (n_s0 / 7)).sum()
    assert chi2 < stats.chi2.ppf(0.999, df=6)


def test_query_set_one_per_website():
    pool = pool_of([2, 3, 4])
    rng = np.random.default_rng(3)
    qs = sample_query_set(pool, rng)
    assert [q.website_id for q in qs] == ["site0", "site1", "site2"]
    for q in qs:
        assert q in pool.by_site[q.website_id]


# ---------------------------------------------------------------------------
# Hard-example mining vs a brute-force oracle


def _brute_force_hard(records, vectors, query_set):
    """Pure-python re-derivation: max same-site / min other-site distance,
    ties to the lowest record_id."""
    hard_pos, hard_neg = {}, {}
    for q in query_set:
        qv = vectors[q.record_id]
        best_p, best_n = None, None
        for r in sorted(records, key=lambda r: r.record_id):
            if r.record_id == q.record_id:
                continue
            d = math.dist(qv, vectors[r.record_id])
            if r.website_id == q.website_id:
                if best_p is None or d > best_p[0]:
                    best_p = (d, r)
            else:
                if best_n is None or d < best_n[0]:
                    best_n = (d, r)
        if best_p is not None:
            hard_pos[q.record_id] = best_p[1].record_id
        hard_neg[q.record_id] = best_n[1].record_id
    return hard_pos, hard_neg


def test_mining_matches_brute_force_over_seeds():
    for seed in range(30):
        rng = np.random.default_rng(seed)
        sizes = rng.integers(1, 6, size=int(rng.integers(2, 8)))
        if (sizes >= 1).sum() < 2:
            continue
        pool = pool_of(sizes.tolist())
        vectors = {r.record_id: rng.normal(size=8).tolist() for r in pool.records}
        subset = mine_hard_examples(
            None, pool, rng, embed_fn=lambda r: np.array(vectors[r.record_id])
        )
        oracle_pos, oracle_neg = _brute_force_hard(pool.records, vectors, subset.query_set)
        got_pos = {q: r.record_id for q, r in subset.hard_positives.items()}
        got_neg = {q: r.record_id for q, r in subset.hard_negatives.items()}
        assert got_pos == oracle_pos, f"seed {seed}"
        assert got_neg == oracle_neg, f"seed {seed}"


def test_mining_ties_prefer_lowest_record_id():
    pool = pool_of([3, 2])
    # all candidates exactly equidistant from everything
    vectors = {r.record_id: [0.0, 0.0] for r in pool.records}
    vectors["s0-r0"] = [1.0, 0.0]
    rng = np.random.default_rng(0)
    query = (pool.by_site["site0"][0],)  # s0-r0
    subset = mine_hard_examples(
        None, pool, rng, query_set=query,
        embed_fn=lambda r: np.array(vectors[r.record_id]),
    )
    assert subset.hard_positives["s0-r0"].record_id == "s0-r1"
    assert subset.hard_negatives["s0-r0"].record_id == "s1-r0"


def test_mining_skips_positive_for_singleton_site():
    pool = pool_of([1, 3])
    rng = np.random.default_rng(0)
    query = (pool.by_site["site0"][0], pool.by_site["site1"][0])
    subset = mine_hard_examples(
        None, pool, rng, query_set=query,
        embed_fn=lambda r: np.random.default_rng(hash(r.record_id) % 2**32).normal(size=4),
    )
    assert "s0-r0" not in subset.hard_positives
    assert "s0-r0" in subset.hard_negatives
    triplets = subset.triplets()
    assert all(t.anchor.record_id != "s0-r0" for t in triplets)


def test_mining_single_site_error():
    with pytest.raises(TrainerError, match="single website"):
        mine_hard_examples(None, pool_of([4]), np.random.default_rng(0),
                           embed_fn=lambda r: np.zeros(2))


# ---------------------------------------------------------------------------
# Training sessions (tiny model, micro corpus)


@pytest.fixture()
def session_setup(micro_corpus, micro_split, bank, tmp_path):
    model = build_model(TINY, rng_seed=1)
    hyper = TrainHyper(batch_size=2, checkpoint_every=2, lr=1e-4,
                       stage1_minibatches=4, stage2_query_sets=1,
                       stage2_repeats_per_query_set=2,
                       stage2_minibatches_per_subset=2)
    pool = TrainingPool.from_split(micro_corpus, micro_split)
    session = TrainSession(model, hyper, rng=np.random.default_rng(0),
                           image_bank=bank, checkpoint_dir=tmp_path,
                           log_path=tmp_path / "log.jsonl")
    return session, pool, tmp_path


def test_stage1_history_schedule_and_checkpoints(session_setup):
    session, pool, tmp_path = session_setup
    result = train_stage1(session, pool)
    assert [s.minibatch for s in result.history] == [1, 2, 3, 4]
    assert all(np.isfinite(s.loss) for s in result.history)
    assert all(s.lr == pytest.approx(1e-4) for s in result.history)
    # cadence checkpoints plus the stage-end save
    assert (tmp_path / "step-0000002.ckpt").exists()
    assert (tmp_path / "step-0000004.ckpt").exists()
    assert result.checkpoint_path == tmp_path / "stage1.ckpt"

    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [l["minibatch"] for l in lines] == [1, 2, 3, 4]
    assert all(set(l) >= {"minibatch", "loss", "lr"} for l in lines)


def test_stage2_remines_every_repeat(session_setup, monkeypatch):
    session, pool, _ = session_setup
    calls = []
    import phishsim.trainer as trainer_mod

    real = trainer_mod.mine_hard_examples

    def spy(model, pool_, rng, query_set=None, embed_fn=None, image_bank=None):
        calls.append(model_fingerprint(model))
        return real(model, pool_, rng, query_set=query_set,
                    embed_fn=embed_fn, image_bank=image_bank)

    monkeypatch.setattr(trainer_mod, "mine_hard_examples", spy)
    train_stage2(session, pool, query_sets=2, repeats=2, minibatches_per_subset=1)
    assert len(calls) == 4  # once per repeat, for every query set
    # weights moved between repeats, so re-mining saw fresh models
    assert len(set(calls)) > 1


def test_stage2_batches_cycle_queries(session_setup, monkeypatch):
    session, pool, _ = session_setup
    seen = []

    def spy_step(triplets, stage=""):
        seen.append([t.anchor.record_id for t in triplets])
        session.global_step += 1
        from phishsim.trainer import TrainStep
        record = TrainStep(session.global_step, 0.0, 0.0)
        session.history.append(record)
        return record

    monkeypatch.setattr(session, "step_triplets", spy_step)
    train_stage2(session, pool, query_sets=1, repeats=1, minibatches_per_subset=3)
    # with batch_size 2, consecutive batches continue around the query cycle
    anchors = [a for batch in seen for a in batch]
    n_queries = len(set(anchors))
    assert anchors == [anchors[i % n_queries] for i in range(len(anchors))] or n_queries == len(pool.sites)
    flat_cycle = anchors[:n_queries]
    assert anchors == (flat_cycle * 3)[:len(anchors)]


def test_training_is_deterministic(micro_corpus, micro_split, bank, tmp_path):
    losses = []
    for _ in range(2):
        model = build_model(TINY, rng_seed=1)
        hyper = TrainHyper(batch_size=2, stage1_minibatches=3, lr=1e-4)
        pool = TrainingPool.from_split(micro_corpus, micro_split)
        session = TrainSession(model, hyper, rng=np.random.default_rng(9),
                               image_bank=bank)
        result = train_stage1(session, pool)
        losses.append([s.loss for s in result.history])
    assert losses[0] == losses[1]


def test_lr_continues_from_loaded_step(micro_corpus, micro_split, bank, tmp_path):
    model = build_model(TINY, rng_seed=1)
    hyper = TrainHyper(batch_size=2, lr=1e-4, lr_decay=0.5, lr_decay_every=2)
    pool = TrainingPool.from_split(micro_corpus, micro_split)
    session = TrainSession(model, hyper, rng=np.random.default_rng(0),
                           image_bank=bank, checkpoint_dir=tmp_path)
    train_stage1(session, pool, minibatches=3)
    assert [s.lr for s in session.history] == [
        pytest.approx(1e-4), pytest.approx(5e-5), pytest.approx(5e-5)
    ]
    saved = session.save("pause")

    loaded, meta, opt_state = load_checkpoint(saved)
    resumed = TrainSession(loaded, hyper, rng=np.random.default_rng(0),
                           image_bank=bank, optimizer_state=opt_state,
                           start_step=int(meta["global_step"]))
    step = resumed.step_triplets([sample_triplet_random(pool, resumed.rng)
                                  for _ in range(2)])
    assert step.minibatch == 4
    assert step.lr == pytest.approx(2.5e-5)


def test_nonfinite_loss_names_last_checkpoint(session_setup):
    session, pool, tmp_path = session_setup
    train_stage1(session, pool, minibatches=2)
    with torch.no_grad():
        session.model.backbone[0].weight[:] = float("nan")
    with pytest.raises(TrainerError, match=r"last good checkpoint: .*stage1\.ckpt"):
        train_stage1(session, pool, minibatches=1)


def test_siamese_network_type_is_a_stub():
    # accepted in config for forward compatibility, but not trainable
    hyper = TrainHyper(network_type="siamese")
    model = build_model(TINY, rng_seed=0)
    with pytest.raises(NotImplementedError):
        TrainSession(model, hyper, rng=np.random.default_rng(0))
