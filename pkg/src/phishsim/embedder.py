"""Embedding network: a truncated convolutional backbone with a new
similarity-tuned convolution on top, reduced to a fixed-size vector.

The default network is VGG16 convolutional layers + one 5x5 conv with 512
filters + global max pooling, giving 512-d embeddings. A ResNet50-style
backbone and a `tiny` reduced-width backbone (for quick CPU experiments) are
also available, as are alternative heads: global average pooling, flatten,
or a 1024-unit fully connected layer.
"""

from __future__ import annotations

import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

from .corpus import IMAGE_SIZE

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

BACKBONES = ("vgg16", "resnet50", "tiny")
ADDED_LAYERS = ("conv5x5_512", "conv3x3_512", "none")
HEADS = ("global_max_pool", "global_avg_pool", "flatten", "fc1024")

_BACKBONE_CHANNELS = {"vgg16": 512, "resnet50": 2048, "tiny": 32}
_BACKBONE_GRID = {"vgg16": 7, "resnet50": 7, "tiny": 7}

_CHECKPOINT_MAGIC = b"PSCKPT1\n"
CHECKPOINT_FORMAT_VERSION = 1


class EmbedderError(RuntimeError):
    """Model construction, inference, or checkpoint failure."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choices for the embedding network."""

    backbone: str = "vgg16"
    pretrained_init: bool = True
    added_layer: str = "conv5x5_512"
    head: str = "global_max_pool"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise EmbedderError(f"unknown backbone {self.backbone!r}")
        if self.added_layer not in ADDED_LAYERS:
            raise EmbedderError(f"unknown added_layer {self.added_layer!r}")
        if self.head not in HEADS:
            raise EmbedderError(f"unknown head {self.head!r}")

    @property
    def feature_channels(self) -> int:
        if self.added_layer == "none":
            return _BACKBONE_CHANNELS[self.backbone]
        return 512

    @property
    def embedding_dim(self) -> int:
        if self.head == "fc1024":
            return 1024
        if self.head == "flatten":
            grid = _BACKBONE_GRID[self.backbone]
            return self.feature_channels * grid * grid
        return self.feature_channels

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "pretrained_init": self.pretrained_init,
            "added_layer": self.added_layer,
            "head": self.head,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise EmbedderError(f"unknown model config keys: {unknown}")
        return cls(**d)


def _vgg16_backbone() -> nn.Module:
    from torchvision.models import vgg16

    return vgg16(weights=None).features


def _resnet50_backbone() -> nn.Module:
    from torchvision.models import resnet50

    net = resnet50(weights=None)
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4,
    )


def _tiny_backbone() -> nn.Module:
    # 224 -> 56 -> 14 -> 7 spatial; narrow channels keep a CPU forward pass
    # around 20 ms so small training runs finish in minutes.
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(4),
        nn.Conv2d(8, 16, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(4),
        nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(inplace=True), nn.MaxPool2d(2),
    )


class _Flatten(nn.Module):
    def forward(self, x):
        return torch.flatten(x, 1)


class _GlobalMaxPool(nn.Module):
    def forward(self, x):
        return torch.amax(x, dim=(2, 3))


class _GlobalAvgPool(nn.Module):
    def forward(self, x):
        return torch.mean(x, dim=(2, 3))


class EmbeddingNet(nn.Module):
    """backbone -> added conv (optional) -> head, with stages addressable by
    name so experiments can swap one stage at a time."""

    def __init__(self, config: ModelConfig, backbone: nn.Module, added: nn.Module, head: nn.Module):
        super().__init__()
        self.config = config
        self.backbone = backbone
        self.added = added
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.added(self.backbone(x)))


def build_model(
    config: ModelConfig,
    rng_seed: int = 0,
    pretrained_weights: str | Path | None = None,
) -> EmbeddingNet:
    """Construct the embedding network.

    With pretrained_init=True, backbone weights are loaded from
    `pretrained_weights`, a local torchvision state_dict file for the chosen
    backbone (see README for how to obtain one); a missing file is an error.
    All newly initialized weights (backbone when not pretrained, the added
    conv, the fc head) are drawn deterministically from rng_seed.
    """
    with torch.random.fork_rng():
        torch.manual_seed(rng_seed)
        if config.backbone == "vgg16":
            backbone = _vgg16_backbone()
        elif config.backbone == "resnet50":
            backbone = _resnet50_backbone()
        else:
            backbone = _tiny_backbone()

        if config.pretrained_init:
            if config.backbone == "tiny":
                raise EmbedderError("tiny backbone has no pretrained weights")
            if pretrained_weights is None:
                raise EmbedderError(
                    f"pretrained_init=True requires a local weights file for "
                    f"{config.backbone!r} (pass pretrained_weights=...)"
                )
            weights_path = Path(pretrained_weights)
            if not weights_path.exists():
                raise EmbedderError(f"pretrained weights file not found: {weights_path}")
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            if config.backbone == "vgg16":
                prefix = "features."
                sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
                backbone.load_state_dict(sub)
            else:
                from torchvision.models import resnet50

                full = resnet50(weights=None)
                full.load_state_dict(state)
                backbone = nn.Sequential(
                    full.conv1, full.bn1, full.relu, full.maxpool,
                    full.layer1, full.layer2, full.layer3, full.layer4,
                )

        in_ch = _BACKBONE_CHANNELS[config.backbone]
        if config.added_layer == "none":
            added: nn.Module = nn.Identity()
        else:
            ksize = 5 if config.added_layer == "conv5x5_512" else 3
            conv = nn.Conv2d(in_ch, 512, ksize, stride=1, padding=ksize // 2)
            nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
            nn.init.zeros_(conv.bias)
            added = nn.Sequential(conv, nn.ReLU(inplace=True))

        if config.head == "global_max_pool":
            head: nn.Module = _GlobalMaxPool()
        elif config.head == "global_avg_pool":
            head = _GlobalAvgPool()
        elif config.head == "flatten":
            head = _Flatten()
        else:
            grid = _BACKBONE_GRID[config.backbone]
            fc = nn.Linear(config.feature_channels * grid * grid, 1024)
            head = nn.Sequential(_Flatten(), fc)

    model = EmbeddingNet(config, backbone, added, head)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Preprocessing and inference


def preprocess(image: np.ndarray) -> torch.Tensor:
    """(224, 224, 3) float [0,1] RGB array -> normalized (3, 224, 224) tensor.

    Not idempotent: normalization must be applied exactly once, to a [0,1]
    image, so the input shape/range is checked rather than guessed.
    """
    arr = np.asarray(image, dtype=np.float32)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise EmbedderError(
            f"preprocess expects ({IMAGE_SIZE}, {IMAGE_SIZE}, 3), got {arr.shape}"
        )
    if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
        raise EmbedderError(
            f"preprocess expects pixel values in [0, 1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    t = torch.from_numpy(arr).permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (t - mean) / std


def normalize_batch(batch: torch.Tensor) -> torch.Tensor:
    """Channel-normalize an (N, 3, H, W) tensor of [0,1] images."""
    mean = torch.tensor(IMAGENET_MEAN, device=batch.device).view(1, 3, 1, 1)
    std = torch.tensor(IMAGENET_STD, device=batch.device).view(1, 3, 1, 1)
    return (batch - mean) / std


def _locate_nonfinite(model: EmbeddingNet, x: torch.Tensor) -> str:
    names = []

    def hook(module, args, output):
        if isinstance(output, torch.Tensor) and not torch.isfinite(output).all():
            names.append(module.__class__.__name__)

    handles = [m.register_forward_hook(hook) for m in model.modules()]
    try:
        model(x)
    finally:
        for h in handles:
            h.remove()
    return names[0] if names else "output"


def embed(model: EmbeddingNet, image: np.ndarray) -> np.ndarray:
    """Embed one [0,1] image into a float32 vector of length embedding_dim."""
    return embed_batch(model, [image])[0]


def embed_batch(
    model: EmbeddingNet,
    images,
    chunk_size: int = 16,
) -> np.ndarray:
    """Embed a sequence of [0,1] images -> (N, embedding_dim) float32 array.

    Memory-bounded: runs in chunks of chunk_size. An empty input gives an
    empty (0, embedding_dim) array.
    """
    dim = model.config.embedding_dim
    if len(images) == 0:
        return np.zeros((0, dim), dtype=np.float32)
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, len(images), chunk_size):
            chunk = images[start:start + chunk_size]
            batch = torch.stack([preprocess(img) for img in chunk])
            out = model(batch)
            if not torch.isfinite(out).all():
                bad = int((~torch.isfinite(out)).any(dim=1).nonzero()[0, 0])
                layer = _locate_nonfinite(model, batch[bad:bad + 1])
                raise EmbedderError(f"non-finite activations in layer {layer}")
            outs.append(out.to(torch.float32).cpu().numpy())
    result = np.concatenate(outs, axis=0)
    if result.shape != (len(images), dim):
        raise EmbedderError(
            f"embedding shape {result.shape} != expected {(len(images), dim)}"
        )
    return result


# ---------------------------------------------------------------------------
# Fingerprints and checkpoints


def model_fingerprint(model: EmbeddingNet) -> str:
    """sha256 over the architecture config and all parameter tensors. Two
    models agree iff same architecture and identical weights."""
    h = hashlib.sha256()
    h.update(json.dumps(model.config.to_dict(), sort_keys=True).encode())
    for name, param in sorted(model.state_dict().items()):
        h.update(name.encode())
        arr = param.detach().cpu().numpy()
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def save_checkpoint(
    model: EmbeddingNet,
    path: str | Path,
    training_meta: Mapping | None = None,
    optimizer_state: Mapping | None = None,
) -> None:
    """Write a checksummed checkpoint: config, weights, training metadata."""
    payload_dict = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "training_meta": dict(training_meta or {}),
        "optimizer_state": optimizer_state,
    }
    buf = io.BytesIO()
    torch.save(payload_dict, buf)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_CHECKPOINT_MAGIC + digest + payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[EmbeddingNet, dict, dict | None]:
    """Load a checkpoint -> (model, training_meta, optimizer_state).

    Refuses files whose magic, checksum, or format version do not match.
    """
    path = Path(path)
    if not path.exists():
        raise EmbedderError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(_CHECKPOINT_MAGIC):
        raise EmbedderError(f"not a checkpoint file (bad magic): {path}")
    digest = blob[len(_CHECKPOINT_MAGIC):len(_CHECKPOINT_MAGIC) + 32]
    payload = blob[len(_CHECKPOINT_MAGIC) + 32:]
    if hashlib.sha256(payload).digest() != digest:
        raise EmbedderError(f"checkpoint checksum mismatch (corrupt file): {path}")
    data = torch.load(io.BytesIO(payload), map_location="cpu", weights_only=True)
    if data.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise EmbedderError(
            f"unsupported checkpoint format_version {data.get('format_version')!r}"
        )
    config = ModelConfig.from_dict(data["config"])
    model = build_model(
        ModelConfig(
            backbone=config.backbone,
            pretrained_init=False,
            added_layer=config.added_layer,
            head=config.head,
        )
    )
    model.config = config
    model.load_state_dict(data["state_dict"])
    model.eval()
    return model, data["training_meta"], data.get("optimizer_state")
