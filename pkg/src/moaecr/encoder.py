"""Toy dual encoder: patch transformer over images plus two learnable class prompts."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DataError
from .moae import Block, MoAEConfig, Module, block_forward, uniform_init

LIVE, FAKE = 0, 1
LOGIT_SCALE_INIT = 14.3


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    patch_side: int = 4
    channels: int = 1
    d: int = 32
    blocks: int = 2
    embed_dim: int = 16
    variant: str = "moae"
    moae: MoAEConfig = field(default_factory=MoAEConfig)

    def __post_init__(self):
        if self.image_side % self.patch_side:
            raise ConfigError(
                f"image side {self.image_side} is not divisible by patch side {self.patch_side}")
        if self.moae.d != self.d:
            raise ConfigError(f"MoAE width {self.moae.d} differs from encoder width {self.d}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def tokens(self) -> int:
        return self.grid ** 2 + 1

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_side ** 2


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.d
        self.patch_w = uniform_init(rng, (cfg.patch_dim, d), cfg.patch_dim)
        self.patch_b = uniform_init(rng, (d,), cfg.patch_dim)
        self.cls_token = uniform_init(rng, (1, 1, d), d)
        self.pos = uniform_init(rng, (cfg.tokens, d), d)
        self.blocks = [Block(cfg.moae, cfg.variant, rng) for _ in range(cfg.blocks)]
        self.head = uniform_init(rng, (d, cfg.embed_dim), d)


class ClassTextEmbeddings(Module):
    """Row 0 is the live prompt, row 1 the fake prompt; the scale is kept as its log."""

    def __init__(self, embed_dim: int, rng: np.random.Generator):
        self.vectors = uniform_init(rng, (2, embed_dim), embed_dim)
        self.log_scale = Tensor(np.array(math.log(LOGIT_SCALE_INIT)), requires_grad=True)

    @property
    def logit_scale(self) -> Tensor:
        return dc.exp(self.log_scale)


class DualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, seed: int):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.image = ImageEncoder(cfg, rng)
        self.text = ClassTextEmbeddings(cfg.embed_dim, rng)


def patchify(images: Tensor, patch: int) -> Tensor:
    """(n, c, H, W) -> (n, (H/patch)*(W/patch), c*patch*patch), row-major over the grid."""
    n, c, hgt, wid = images.shape
    if hgt % patch or wid % patch:
        raise ConfigError(f"image {hgt}x{wid} is not divisible into {patch}x{patch} patches")
    gh, gw = hgt // patch, wid // patch
    x = dc.reshape(images, (n, c, gh, patch, gw, patch))
    x = dc.transpose(x, (0, 2, 4, 1, 3, 5))
    return dc.reshape(x, (n, gh * gw, c * patch * patch))


def image_features(images, enc: ImageEncoder) -> Tensor:
    """Class-token state after the block stack: the pooled, unnormalised feature."""
    cfg = enc.cfg
    images = dc.as_tensor(images)
    if images.shape[1:] != (cfg.channels, cfg.image_side, cfg.image_side):
        raise ConfigError(f"expected images of shape (n, {cfg.channels}, {cfg.image_side}, "
                          f"{cfg.image_side}), got {images.shape}")
    n = images.shape[0]
    tokens = patchify(images, cfg.patch_side) @ enc.patch_w + enc.patch_b
    cls = dc.broadcast_to(enc.cls_token, (n, 1, cfg.d))
    x = dc.concat([cls, tokens], axis=1) + enc.pos
    for block in enc.blocks:
        x = block_forward(x, block)
    return dc.reshape(x[:, 0:1, :], (n, cfg.d))


def embed(features: Tensor, enc: ImageEncoder) -> Tensor:
    return dc.l2_normalize(features @ enc.head, axis=-1)


def encode_image(images, enc: ImageEncoder) -> Tensor:
    return embed(image_features(images, enc), enc)


def similarity_matrix(img: Tensor, txt: ClassTextEmbeddings) -> Tensor:
    """S[i, c] = scale * <img_i, normalised prompt c>."""
    prompts = dc.l2_normalize(txt.vectors, axis=-1)
    return (img @ dc.transpose(prompts)) * txt.logit_scale


def contrastive_ce(s_pair) -> Tensor:
    """Symmetric image/text cross-entropy with positives on the diagonal."""
    s_pair = dc.as_tensor(s_pair)
    if s_pair.ndim != 2 or s_pair.shape[0] != s_pair.shape[1]:
        raise ValueError(f"contrastive_ce needs a square matrix, got {s_pair.shape}")
    n = s_pair.shape[0]
    diag = (np.arange(n), np.arange(n))
    rows = dc.log_softmax(s_pair, axis=1)[diag]
    cols = dc.log_softmax(s_pair, axis=0)[diag]
    return dc.tsum(rows + cols) * (-1.0 / (2 * n))


def class_ce(s: Tensor, labels) -> Tensor:
    """Mean cross-entropy of softmax(S) against 0/1 labels (0 = live)."""
    labels = np.asarray(labels, dtype=int)
    if labels.ndim != 1 or labels.shape[0] != s.shape[0]:
        raise ValueError(f"labels of shape {labels.shape} do not match scores {s.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= s.shape[1]):
        raise DataError(f"labels must lie in [0, {s.shape[1]}), got {np.unique(labels)}")
    logp = dc.log_softmax(s, axis=1)
    return -dc.mean(logp[np.arange(labels.size), labels])


def live_score(s) -> np.ndarray:
    """Higher means more live: the live-minus-fake logit margin."""
    data = s.data if isinstance(s, Tensor) else np.asarray(s)
    return data[:, LIVE] - data[:, FAKE]
