import numpy as np
import pytest
import torch

from phishsim.embedder import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    EmbedderError,
    ModelConfig,
    build_model,
    embed,
    embed_batch,
    load_checkpoint,
    model_fingerprint,
    normalize_batch,
    preprocess,
    save_checkpoint,
)

from conftest import TINY


def _image(seed=0):
    return np.random.default_rng(seed).random((224, 224, 3), dtype=np.float32)


# ---------------------------------------------------------------------------
# Config


def test_config_rejects_unknown_values():
    with pytest.raises(EmbedderError, match="backbone"):
        ModelConfig(backbone="alexnet")
    with pytest.raises(EmbedderError, match="added"):
        ModelConfig(added_layer="conv7x7")
    with pytest.raises(EmbedderError, match="head"):
        ModelConfig(head="attention")


@pytest.mark.parametrize(
    "backbone,head,dim",
    [
        ("vgg16", "global_max_pool", 512),
        ("vgg16", "global_avg_pool", 512),
        ("vgg16", "flatten", 512 * 49),
        ("vgg16", "fc1024", 1024),
        ("resnet50", "global_max_pool", 2048),
        ("tiny", "global_max_pool", 32),
        ("tiny", "flatten", 32 * 49),
    ],
)
def test_embedding_dims(backbone, head, dim):
    config = ModelConfig(
        backbone=backbone, pretrained_init=False, added_layer="none", head=head
    )
    assert config.embedding_dim == dim


def test_added_layer_keeps_channel_count():
    config = ModelConfig(backbone="vgg16", pretrained_init=False,
                         added_layer="conv5x5_512", head="global_max_pool")
    assert config.feature_channels == 512
    assert config.embedding_dim == 512


def test_config_dict_round_trip():
    config = ModelConfig(backbone="tiny", pretrained_init=False,
                         added_layer="conv3x3_512", head="fc1024")
    assert ModelConfig.from_dict(config.to_dict()) == config
    with pytest.raises(EmbedderError, match="unknown"):
        ModelConfig.from_dict({"backbone": "tiny", "bogus": 1})


def test_tiny_has_no_pretrained_weights():
    with pytest.raises(EmbedderError, match="tiny"):
        build_model(ModelConfig(backbone="tiny", pretrained_init=True,
                                added_layer="none", head="global_max_pool"),
                    pretrained_weights="whatever.pth")


def test_pretrained_requires_weights_file(tmp_path):
    config = ModelConfig(backbone="vgg16", pretrained_init=True,
                         added_layer="none", head="global_max_pool")
    with pytest.raises(EmbedderError):
        build_model(config, pretrained_weights=tmp_path / "missing.pth")
    with pytest.raises(EmbedderError):
        build_model(config, pretrained_weights=None)


# ---------------------------------------------------------------------------
# Preprocess


def test_preprocess_layout_and_values():
    img = np.zeros((224, 224, 3), dtype=np.float32)
    img[0, 0] = [1.0, 0.5, 0.25]
    t = preprocess(img)
    assert t.shape == (3, 224, 224)
    for c, v in enumerate([1.0, 0.5, 0.25]):
        expected = (v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]
        assert float(t[c, 0, 0]) == pytest.approx(expected, rel=1e-6)


def test_preprocess_inverts_exactly():
    img = _image(3)
    t = preprocess(img)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    back = (t * std + mean).permute(1, 2, 0).numpy()
    assert np.abs(back - img).max() < 1e-6


def test_preprocess_rejects_bad_inputs():
    with pytest.raises(EmbedderError, match="expects \\(224, 224, 3\\)"):
        preprocess(np.zeros((100, 100, 3), dtype=np.float32))
    with pytest.raises(EmbedderError, match="\\[0, 1\\]"):
        preprocess(np.full((224, 224, 3), 255.0, dtype=np.float32))
    with pytest.raises(EmbedderError, match="\\[0, 1\\]"):
        preprocess(np.full((224, 224, 3), -0.5, dtype=np.float32))


def test_normalize_batch_matches_preprocess():
    img = _image(4)
    single = preprocess(img)
    batch = normalize_batch(torch.from_numpy(img).permute(2, 0, 1)[None])
    assert torch.equal(single, batch[0])


# ---------------------------------------------------------------------------
# Build determinism and embedding


def test_build_deterministic_per_seed():
    a = build_model(TINY, rng_seed=11)
    b = build_model(TINY, rng_seed=11)
    c = build_model(TINY, rng_seed=12)
    assert model_fingerprint(a) == model_fingerprint(b)
    assert model_fingerprint(a) != model_fingerprint(c)


def test_build_does_not_disturb_global_rng():
    torch.manual_seed(123)
    before = torch.rand(3)
    torch.manual_seed(123)
    build_model(TINY, rng_seed=99)
    after = torch.rand(3)
    assert torch.equal(before, after)


def test_embed_shape_and_dtype(tiny_model):
    vec = embed(tiny_model, _image(0))
    assert vec.shape == (32,)
    assert vec.dtype == np.float32


def test_embed_batch_matches_single(tiny_model):
    images = [_image(i) for i in range(5)]
    batch = embed_batch(tiny_model, images, chunk_size=2)
    singles = np.stack([embed(tiny_model, img) for img in images])
    np.testing.assert_allclose(batch, singles, rtol=0, atol=1e-5)


def test_embed_batch_empty(tiny_model):
    out = embed_batch(tiny_model, [])
    assert out.shape == (0, 32)


def test_embed_deterministic(tiny_model):
    img = _image(7)
    np.testing.assert_array_equal(embed(tiny_model, img), embed(tiny_model, img))


def test_nonfinite_activations_are_located():
    model = build_model(TINY, rng_seed=0)
    with torch.no_grad():
        first_conv = model.backbone[0]
        first_conv.weight[0, 0, 0, 0] = float("nan")
    with pytest.raises(EmbedderError, match="non-finite activations in layer"):
        embed(model, _image(0))


# ---------------------------------------------------------------------------
# Fingerprints and checkpoints


def test_fingerprint_tracks_weights(tiny_model):
    fp = model_fingerprint(tiny_model)
    assert fp == model_fingerprint(tiny_model)
    clone = build_model(TINY, rng_seed=0)
    assert fp == model_fingerprint(clone)
    with torch.no_grad():
        clone.backbone[0].weight += 1e-4
    assert fp != model_fingerprint(clone)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = build_model(TINY, rng_seed=5)
    meta = {"global_step": 42, "stage": "stage1"}
    opt_state = {"step": 42, "note": "opaque"}
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path, training_meta=meta, optimizer_state=opt_state)
    loaded, loaded_meta, loaded_opt = load_checkpoint(path)

    assert model_fingerprint(loaded) == model_fingerprint(model)
    for k, v in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[k], v)
    assert loaded.config == model.config
    assert loaded_meta["global_step"] == 42
    assert loaded_meta["stage"] == "stage1"
    assert loaded_opt == opt_state


def test_checkpoint_rejects_corruption(tmp_path):
    model = build_model(TINY, rng_seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(EmbedderError, match="checksum|corrupt"):
        load_checkpoint(path)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 64)
    with pytest.raises(EmbedderError, match="not a checkpoint|magic"):
        load_checkpoint(path)


def test_checkpoint_write_is_atomic(tmp_path):
    model = build_model(TINY, rng_seed=5)
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    assert not list(tmp_path.glob("*.tmp"))
