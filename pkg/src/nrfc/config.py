"""Configuration dataclasses and named profiles.

Two axes are configured independently: the field geometry (plane/vector
resolution, channel counts) and the codec profile (transform widths). The
``desk`` training profile is sized for a CPU-only run on the synthetic toy
scene; ``full`` matches the published full-scale schedule.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass(frozen=True)
class FieldConfig:
    """Geometry of the plane-factorized field."""

    plane_size: int = 128          # H = W of every feature plane
    vector_len: int = 128          # length of every paired axis vector
    density_channels: int = 8      # per-plane channels, density group
    appearance_channels: int = 24  # per-plane channels, appearance group
    appearance_dim: int = 27       # projected appearance feature width
    mlp_hidden: int = 64
    dir_octaves: int = 2           # frequency octaves for view-direction encoding
    density_bias: float = -10.0    # shift applied before the softplus activation
    bbox_min: tuple = (-1.0, -1.0, -1.0)
    bbox_max: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.plane_size < 2 or self.vector_len < 2:
            raise ConfigError("plane_size and vector_len must be >= 2")
        if min(self.density_channels, self.appearance_channels) < 1:
            raise ConfigError("channel counts must be >= 1")


@dataclass(frozen=True)
class CodecProfile:
    """Transform widths of one feature codec.

    ``internal`` is the width of the hidden conv stages, ``latent`` the
    channel count of the coded representation, ``hyper`` the width of the
    hyper latent. Spatial reduction is fixed: 16x through the main
    transforms, a further 4x through the hyper transforms.
    """

    name: str = "small"
    internal: int = 64
    latent: int = 96
    hyper: int = 64

    @classmethod
    def named(cls, name: str) -> "CodecProfile":
        try:
            return _CODEC_PROFILES[name]
        except KeyError:
            raise ConfigError(
                f"unknown codec profile {name!r}",
                known=sorted(_CODEC_PROFILES),
            ) from None


_CODEC_PROFILES = {
    "small": CodecProfile("small", internal=64, latent=96, hyper=64),
    "full": CodecProfile("full", internal=128, latent=192, hyper=128),
}

# Total spatial reduction factors; planes are reflect-padded up to a multiple
# of PAD_MULTIPLE before encoding and cropped back after decoding.
MAIN_REDUCTION = 16
HYPER_REDUCTION = 4
PAD_MULTIPLE = MAIN_REDUCTION * HYPER_REDUCTION  # 64


@dataclass(frozen=True)
class TrainConfig:
    """Stage lengths, learning rates, and loss weights."""

    pretrain_iters: int = 2000
    warmup_iters: int = 1000
    joint_iters: int = 8000
    qat_iters: int = 1000
    lr_field: float = 2e-2
    lr_codec: float = 1e-4
    lambda_entropy: float = 2e-6
    ray_batch: int = 1024
    samples_per_ray: int = 192
    seed: int = 0
    log_every: int = 100
    auto_decoder: bool = False     # drop the analysis transform, learn latents directly
    lr_latent: float = 1e-2        # latent learning rate in auto-decoder mode

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


_TRAIN_PROFILES = {
    # CPU-friendly schedule for the synthetic toy scene.
    "desk": TrainConfig(),
    # Full-scale published schedule (pretrain/joint/QAT); warmup is scaled
    # in proportion to the joint stage.
    "full": TrainConfig(
        pretrain_iters=30_000,
        warmup_iters=5_000,
        joint_iters=100_000,
        qat_iters=10_000,
        ray_batch=4096,
    ),
}


def train_profile(name: str) -> TrainConfig:
    try:
        return _TRAIN_PROFILES[name]
    except KeyError:
        raise ConfigError(
            f"unknown train profile {name!r}", known=sorted(_TRAIN_PROFILES)
        ) from None


def config_fingerprint(field_cfg: FieldConfig, profile: CodecProfile) -> str:
    """Canonical JSON string hashed into the container digest."""

    payload = {
        "field": dataclasses.asdict(field_cfg),
        "codec": dataclasses.asdict(profile),
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))
