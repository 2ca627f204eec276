import math
import warnings

import cv2
import numpy as np
import pytest
import torch

from phishsim.embedder import build_model, embed, model_fingerprint
from phishsim.index import build_index, query
from phishsim.robustness import (
    ATTACK_KINDS,
    GRID_PRESETS,
    PERTURBATION_KINDS,
    STOCHASTIC_KINDS,
    PerturbationSpec,
    RobustnessError,
    adversarial_finetune,
    attack_report,
    closest_positive,
    embedding_shift_report,
    fgsm_closest,
    fgsm_iterative,
    fgsm_random,
    fgsm_triplet,
    full_grid,
    input_gradient,
    mild_grid,
    perturb,
    robustness_report,
    strong_grid,
    write_robustness_report,
)
from phishsim.trainer import ImageBank, TrainHyper, TrainingPool, TrainSession

from conftest import TINY
from test_index import stub_index


def gray(value=0.5):
    return np.full((224, 224, 3), value, dtype=np.float32)


def random_image(seed=0):
    return np.random.default_rng(seed).random((224, 224, 3), dtype=np.float32)


# ---------------------------------------------------------------------------
# Spec validation and labels


def test_spec_kind_checked():
    with pytest.raises(RobustnessError, match="kind"):
        PerturbationSpec("sharpen", {})


def test_spec_params_checked():
    with pytest.raises(RobustnessError):
        PerturbationSpec("blur", {})  # missing sigma
    with pytest.raises(RobustnessError):
        PerturbationSpec("blur", {"sigma": 1.0, "extra": 2})
    with pytest.raises(RobustnessError):
        PerturbationSpec("darken", {"gamma": 0.5})  # darken needs gamma >= 1
    with pytest.raises(RobustnessError):
        PerturbationSpec("brighten", {"gamma": 1.5})
    with pytest.raises(RobustnessError):
        PerturbationSpec("occlusion", {"quadrant": 5})
    with pytest.raises(RobustnessError):
        PerturbationSpec("occlusion", {"quadrant": 1, "fill": 2.0})
    with pytest.raises(RobustnessError):
        PerturbationSpec("salt_pepper", {"pixel_fraction": 1.5})


def test_spec_labels():
    assert PerturbationSpec("blur", {"sigma": 1.5}).label == "blur(sigma=1.5)"
    label = PerturbationSpec("shift", {"dx": -30, "dy": -30}).label
    assert "dx=-30" in label and "dy=-30" in label


def test_grids():
    assert len(mild_grid()) == 7
    assert len(strong_grid()) == 7
    assert len(full_grid()) == 14
    assert [s.kind for s in mild_grid()] == list(PERTURBATION_KINDS)
    assert set(GRID_PRESETS) == {"mild", "strong", "full"}
    by_kind = {s.kind: s.params for s in mild_grid()}
    assert by_kind["blur"]["sigma"] == 1.5
    assert by_kind["occlusion"]["quadrant"] == 4
    by_kind = {s.kind: s.params for s in strong_grid()}
    assert by_kind["gaussian_noise"]["variance"] == 0.1
    assert by_kind["shift"] == {"dx": -50, "dy": -50}


# ---------------------------------------------------------------------------
# Perturbations


IDENTITY_SPECS = [
    PerturbationSpec("blur", {"sigma": 0.0}),
    PerturbationSpec("darken", {"gamma": 1.0}),
    PerturbationSpec("brighten", {"gamma": 1.0}),
    PerturbationSpec("gaussian_noise", {"variance": 0.0}),
    PerturbationSpec("salt_pepper", {"pixel_fraction": 0.0}),
    PerturbationSpec("shift", {"dx": 0, "dy": 0}),
]


@pytest.mark.parametrize("spec", IDENTITY_SPECS, ids=lambda s: s.kind)
def test_identity_parameters_are_exact(spec):
    img = random_image(1)
    out = perturb(img, spec, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out, img)
    assert out is not img  # always a fresh array


def test_perturb_never_mutates_input():
    img = random_image(2)
    before = img.copy()
    for spec in full_grid():
        perturb(img, spec, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(img, before)


def test_perturb_output_in_range():
    img = random_image(3)
    for spec in full_grid():
        out = perturb(img, spec, rng=np.random.default_rng(0))
        assert out.min() >= 0.0 and out.max() <= 1.0
        assert out.shape == img.shape and out.dtype == np.float32


def test_perturb_shape_checked():
    with pytest.raises(RobustnessError, match="expected"):
        perturb(np.zeros((10, 10, 3), dtype=np.float32),
                PerturbationSpec("blur", {"sigma": 1.0}))


def test_stochastic_kinds_require_rng():
    for kind, params in (("gaussian_noise", {"variance": 0.01}),
                         ("salt_pepper", {"pixel_fraction": 0.05})):
        assert kind in STOCHASTIC_KINDS
        with pytest.raises(RobustnessError, match="rng"):
            perturb(gray(), PerturbationSpec(kind, params))


def test_blur_matches_opencv():
    """Dual route: scipy's separable gaussian vs cv2.GaussianBlur with the
    same kernel radius (round(3 sigma)) and reflect border."""
    img = random_image(4)
    for sigma in (1.5, 3.5):
        ours = perturb(img, PerturbationSpec("blur", {"sigma": sigma}))
        radius = int(3.0 * sigma + 0.5)
        ref = cv2.GaussianBlur(
            img, (2 * radius + 1, 2 * radius + 1), sigmaX=sigma, sigmaY=sigma,
            borderType=cv2.BORDER_REFLECT,
        )
        assert np.abs(ours - ref).max() < 1e-4


def test_gamma_is_plain_power_law():
    img = random_image(5)
    for kind, g in (("darken", 1.3), ("darken", 1.5), ("brighten", 0.8), ("brighten", 0.5)):
        out = perturb(img, PerturbationSpec(kind, {"gamma": g}))
        np.testing.assert_allclose(out, img**np.float32(g), rtol=0, atol=1e-6)


def test_darken_darkens_brighten_brightens():
    img = random_image(6)
    dark = perturb(img, PerturbationSpec("darken", {"gamma": 1.5}))
    bright = perturb(img, PerturbationSpec("brighten", {"gamma": 0.5}))
    assert dark.mean() < img.mean() < bright.mean()


def test_gaussian_noise_statistics():
    img = gray(0.5)
    out = perturb(img, PerturbationSpec("gaussian_noise", {"variance": 0.01}),
                  rng=np.random.default_rng(7))
    delta = (out - img).ravel().astype(np.float64)
    assert abs(delta.mean()) < 3 * math.sqrt(0.01 / delta.size)
    assert delta.var() == pytest.approx(0.01, abs=3 * 0.01 * math.sqrt(2 / delta.size))


def test_gaussian_noise_deterministic_per_seed():
    img = gray()
    spec = PerturbationSpec("gaussian_noise", {"variance": 0.01})
    a = perturb(img, spec, rng=np.random.default_rng(3))
    b = perturb(img, spec, rng=np.random.default_rng(3))
    c = perturb(img, spec, rng=np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_salt_pepper_exact_counts():
    img = gray(0.5)
    out = perturb(img, PerturbationSpec("salt_pepper", {"pixel_fraction": 0.05}),
                  rng=np.random.default_rng(8))
    n = round(0.05 * 224 * 224)
    pepper = int(((out == 0.0).all(axis=2)).sum())
    salt = int(((out == 1.0).all(axis=2)).sum())
    untouched = int(((out == 0.5).all(axis=2)).sum())
    assert pepper == n // 2
    assert salt == n - n // 2
    assert untouched == 224 * 224 - n


def test_occlusion_quadrants_row_major():
    img = gray(0.25)
    h = 112
    corners = {1: (0, 0), 2: (0, h), 3: (h, 0), 4: (h, h)}
    for q, (r0, c0) in corners.items():
        out = perturb(img, PerturbationSpec("occlusion", {"quadrant": q}))
        block = out[r0:r0 + h, c0:c0 + h]
        assert (block == 1.0).all(), f"quadrant {q} filled white"
        assert (out == 0.25).sum() == 3 * h * h * 3, f"quadrant {q} leaves rest"


def test_occlusion_custom_fill():
    out = perturb(gray(0.25), PerturbationSpec("occlusion", {"quadrant": 1, "fill": 0.0}))
    assert (out[:112, :112] == 0.0).all()


def test_shift_moves_content_and_fills():
    rng = np.random.default_rng(9)
    img = rng.random((224, 224, 3), dtype=np.float32)
    out = perturb(img, PerturbationSpec("shift", {"dx": -30, "dy": -30}))
    # negative shift pulls content up/left; the exposed band is filled white
    np.testing.assert_array_equal(out[:194, :194], img[30:, 30:])
    assert (out[194:, :] == 1.0).all()
    assert (out[:, 194:] == 1.0).all()

    out = perturb(img, PerturbationSpec("shift", {"dx": 5, "dy": 3}))
    np.testing.assert_array_equal(out[3:, 5:], img[:-3, :-5])
    assert (out[:3, :] == 1.0).all()
    assert (out[:, :5] == 1.0).all()


def test_shift_beyond_frame_is_all_fill():
    out = perturb(gray(0.3), PerturbationSpec("shift", {"dx": 224, "dy": 0, "fill": 0.5}))
    assert (out == 0.5).all()


# ---------------------------------------------------------------------------
# FGSM


class _Harness:
    """Small two-layer network over 8x8 inputs for cheap gradient checks."""

    def __init__(self, seed=0, dim=6):
        g = torch.Generator().manual_seed(seed)
        self.w1 = torch.randn(64, 24, generator=g, dtype=torch.float64)
        self.w2 = torch.randn(24, dim, generator=g, dtype=torch.float64)

    def __call__(self, x):
        flat = x.reshape(x.shape[0], -1).to(torch.float64)
        return torch.tanh(flat @ self.w1) @ self.w2


def test_input_gradient_matches_finite_differences():
    harness = _Harness(seed=1)
    rng = np.random.default_rng(2)
    anchor = torch.tensor(rng.random((8, 8)), dtype=torch.float64)
    pos = torch.tensor(rng.normal(size=6), dtype=torch.float64)
    neg = torch.tensor(rng.normal(size=6) * 0.1, dtype=torch.float64)

    grad, loss = input_gradient(harness, anchor, pos, neg, margin=2.2)
    assert loss > 0

    def loss_at(x):
        f = harness(x.unsqueeze(0))[0]
        d_ap = ((f - pos) ** 2).sum()
        d_an = ((f - neg) ** 2).sum()
        return float(torch.clamp(d_ap - d_an + 2.2, min=0))

    eps = 1e-6
    numeric = torch.zeros_like(anchor)
    for i in range(8):
        for j in range(8):
            up = anchor.clone(); up[i, j] += eps
            down = anchor.clone(); down[i, j] -= eps
            numeric[i, j] = (loss_at(up) - loss_at(down)) / (2 * eps)
    rel = (grad - numeric).abs() / numeric.abs().clamp(min=1e-8)
    assert float(rel.max()) < 1e-3


def test_input_gradient_zero_when_hinge_inactive():
    harness = _Harness(seed=3)
    anchor = torch.rand((8, 8), dtype=torch.float64)
    f = harness(anchor.unsqueeze(0))[0].detach()
    grad, loss = input_gradient(harness, anchor, f, f + 100.0, margin=0.001)
    assert loss == 0.0
    assert torch.equal(grad, torch.zeros_like(grad))


def test_fgsm_bound_and_range(tiny_model):
    anchor = random_image(10)
    positive = random_image(11)
    negative = random_image(12)
    for eps in (0.003, 0.01, 0.05):
        adv = fgsm_triplet(tiny_model, anchor, positive, negative, epsilon=eps)
        assert np.abs(adv - anchor).max() <= eps + 1e-7
        assert adv.min() >= 0.0 and adv.max() <= 1.0
        assert adv.shape == anchor.shape


def test_fgsm_moves_anchor_away_from_positive(tiny_model):
    anchor = random_image(13)
    positive = anchor.copy()
    negative = random_image(14)
    adv = fgsm_triplet(tiny_model, anchor, positive, negative, epsilon=0.01,
                       margin=50.0)  # large margin keeps the hinge active
    d_before = np.linalg.norm(embed(tiny_model, anchor) - embed(tiny_model, positive))
    d_after = np.linalg.norm(embed(tiny_model, adv) - embed(tiny_model, positive))
    assert d_after > d_before


def test_fgsm_zero_loss_warns_and_returns_copy(tiny_model):
    anchor = random_image(15)
    with pytest.warns(UserWarning, match="zero"):
        adv = fgsm_triplet(tiny_model, anchor, anchor, anchor, epsilon=0.01,
                           margin=0.0)
    np.testing.assert_array_equal(adv, anchor)
    assert adv is not anchor


def test_fgsm_rejects_negative_epsilon(tiny_model):
    with pytest.raises(RobustnessError, match="epsilon"):
        fgsm_triplet(tiny_model, gray(), gray(), gray(), epsilon=-0.1)


def test_closest_positive_hand_case():
    index = stub_index(
        np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]], dtype=np.float32),
        ["a", "a", "b"], record_ids=["r2", "r1", "r3"],
    )
    m = closest_positive(index, np.array([1.0, 0.0]), "a")
    assert (m.website_id, m.record_id) == ("a", "r1")
    assert m.distance == pytest.approx(0.0)
    # exact tie -> lowest record_id
    m = closest_positive(index, np.array([0.5, 0.0]), "a")
    assert m.record_id == "r1"
    with pytest.raises(RobustnessError, match="no rows"):
        closest_positive(index, np.array([0.0, 0.0]), "zzz")


@pytest.fixture(scope="module")
def attack_setup(micro_corpus, micro_split, bank):
    model = build_model(TINY, rng_seed=0)
    records = [
        r for r in micro_corpus.records
        if r.source_class == "trusted" and micro_split.of(r.record_id) == "train"
    ]
    index = build_index(model, records, image_bank=bank)
    return model, index


def test_fgsm_closest_bound_and_default_target(attack_setup):
    model, index = attack_setup
    anchor = random_image(16)
    rng = np.random.default_rng(0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        adv = fgsm_closest(model, index, anchor, epsilon=0.01, rng=rng)
    assert np.abs(adv - anchor).max() <= 0.01 + 1e-7
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_fgsm_random_bound(attack_setup):
    model, index = attack_setup
    anchor = random_image(17)
    site = index.website_ids[0]
    adv = fgsm_random(model, index, anchor, epsilon=0.008,
                      rng=np.random.default_rng(1), target_website_id=site)
    assert np.abs(adv - anchor).max() <= 0.008 + 1e-7
    with pytest.raises(RobustnessError, match="no rows"):
        fgsm_random(model, index, anchor, epsilon=0.008,
                    rng=np.random.default_rng(1), target_website_id="zzz")


def test_fgsm_iterative_bound(attack_setup):
    model, index = attack_setup
    anchor = random_image(18)
    adv = fgsm_iterative(model, index, anchor, step_epsilon=0.002, steps=5,
                         rng=np.random.default_rng(2))
    assert np.abs(adv - anchor).max() <= 5 * 0.002 + 1e-7
    assert adv.min() >= 0.0 and adv.max() <= 1.0
    with pytest.raises(RobustnessError, match="steps"):
        fgsm_iterative(model, index, anchor, step_epsilon=0.002, steps=0,
                       rng=np.random.default_rng(2))


# ---------------------------------------------------------------------------
# Adversarial fine-tuning


def test_adversarial_finetune_rejects_bad_range(micro_corpus, micro_split, bank):
    model = build_model(TINY, rng_seed=0)
    hyper = TrainHyper(batch_size=4, lr=1e-4)
    pool = TrainingPool.from_split(micro_corpus, micro_split)
    session = TrainSession(model, hyper, rng=np.random.default_rng(0), image_bank=bank)
    with pytest.raises(RobustnessError, match="epsilon range"):
        adversarial_finetune(session, pool, epsilon_range=(0.01, 0.003), minibatches=1)


def test_adversarial_finetune_perturbs_half_the_batch(micro_corpus, micro_split,
                                                      bank, monkeypatch):
    import phishsim.robustness as rob

    model = build_model(TINY, rng_seed=0)
    hyper = TrainHyper(batch_size=4, lr=1e-4)
    pool = TrainingPool.from_split(micro_corpus, micro_split)
    session = TrainSession(model, hyper, rng=np.random.default_rng(0), image_bank=bank)

    captured = []
    real = rob._fgsm_batch

    def spy(model_, anchors, positives, negatives, epsilons, **kw):
        captured.append(np.asarray(epsilons).copy())
        return real(model_, anchors, positives, negatives, epsilons, **kw)

    monkeypatch.setattr(rob, "_fgsm_batch", spy)
    result = adversarial_finetune(session, pool, epsilon_range=(0.003, 0.01),
                                  minibatches=2)
    assert len(result.history) == 2
    assert session.global_step == 2
    assert len(captured) == 2
    for eps in captured:
        assert eps.shape == (2,)  # half of batch_size 4
        assert ((eps >= 0.003) & (eps <= 0.01)).all()


# ---------------------------------------------------------------------------
# Reports


def test_embedding_shift_report(tiny_model):
    a, b = random_image(20), random_image(21)
    report = embedding_shift_report(tiny_model, [(a, b), (a, a)])
    d = np.linalg.norm(
        embed(tiny_model, a).astype(np.float64) - embed(tiny_model, b).astype(np.float64)
    )
    assert report.n_pairs == 2
    assert report.mean == pytest.approx(d / 2, rel=1e-5)
    assert report.sd == pytest.approx(float(np.std([d, 0.0], ddof=1)), rel=1e-5)
    with pytest.raises(RobustnessError, match="pair"):
        embedding_shift_report(tiny_model, [])


def test_robustness_report_structure(attack_setup, micro_corpus, micro_split, bank):
    model, index = attack_setup
    specs = [
        PerturbationSpec("darken", {"gamma": 1.3}),
        PerturbationSpec("gaussian_noise", {"variance": 0.01}),
    ]
    report = robustness_report(model, index, micro_corpus, micro_split, specs,
                               seed=0, trials=3, image_bank=bank)
    assert [r.label for r in report.rows] == [s.label for s in specs]
    assert report.rows[0].trials == 1      # deterministic kind
    assert report.rows[1].trials == 3      # stochastic kind averages trials
    for row in report.rows:
        if report.original_top1 > 0:
            assert row.top1_drop == pytest.approx(
                (report.original_top1 - row.perturbed_top1) / report.original_top1
            )
        if report.original_auc > 0:
            assert row.auc_drop == pytest.approx(
                (report.original_auc - row.perturbed_auc) / report.original_auc
            )


def test_attack_report_single_row(attack_setup, micro_corpus, micro_split, bank):
    model, index = attack_setup
    assert set(ATTACK_KINDS) == {"fgsm", "fgsm_closest", "fgsm_iterative"}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = attack_report(model, index, micro_corpus, micro_split,
                               attack="fgsm", epsilon=0.005, seed=0, image_bank=bank)
    assert len(report.rows) == 1
    assert report.rows[0].label == "fgsm(epsilon=0.005)"
    with pytest.raises(RobustnessError, match="attack"):
        attack_report(model, index, micro_corpus, micro_split, attack="pgd",
                      image_bank=bank)


def test_write_robustness_report(tmp_path, attack_setup, micro_corpus, micro_split, bank):
    model, index = attack_setup
    report = robustness_report(model, index, micro_corpus, micro_split,
                               [PerturbationSpec("darken", {"gamma": 1.3})],
                               seed=0, trials=1, image_bank=bank)
    out = tmp_path / "rob.tsv"
    write_robustness_report(report, out)
    lines = out.read_text().splitlines()
    assert any(l.startswith("darken(gamma=1.3)\t") for l in lines)
    header = next(l for l in lines if l.startswith("label\t"))
    assert header.split("\t") == [
        "label", "perturbed_top1", "perturbed_auc", "top1_drop", "auc_drop", "trials"
    ]
