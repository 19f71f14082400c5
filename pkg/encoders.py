"""Frozen visual / text encoders behind one interface (toy and pretrained)."""

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import EncoderBranch, EncoderConfig, settings
from errors import ConfigError, InputError, ShapeError
from logger import setup_logger
from utils import image_to_tensor, module_checksum, stable_seed

logger = setup_logger(__name__, settings.LOG_LEVEL)

Family = Literal["pure_visual", "multimodal_visual", "text"]
Source = Literal["pure", "multimodal"]
Domain = Literal["exo", "ego"]

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class EncoderSpec:
    family: Family
    embed_dim: int
    patch_size: int
    frozen: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.frozen:
            raise ConfigError(f"{self.family} encoder must be frozen")
        if self.embed_dim < 1 or self.patch_size < 1:
            raise ConfigError(f"{self.family} encoder needs positive embed_dim and patch_size")


@dataclass
class FeatureMap:
    """Batched spatial grid of embeddings, shape (N, h', w', d)"""

    grid: torch.Tensor
    source: Source
    domain: Domain
    fused: bool = False

    def __post_init__(self):
        if self.grid.dim() != 4:
            raise ShapeError(f"FeatureMap grid must be (N, h', w', d), got {tuple(self.grid.shape)}")

    @property
    def batch(self) -> int:
        return self.grid.shape[0]

    @property
    def spatial(self) -> tuple:
        return tuple(self.grid.shape[1:3])

    @property
    def dim(self) -> int:
        return self.grid.shape[-1]

    def tokens(self) -> torch.Tensor:
        n, h, w, d = self.grid.shape
        return self.grid.reshape(n, h * w, d)

    def with_grid(self, grid: torch.Tensor, fused: Optional[bool] = None) -> "FeatureMap":
        return replace(self, grid=grid, fused=self.fused if fused is None else fused)


@dataclass(frozen=True)
class TextEmbedding:
    vector: torch.Tensor
    prompt: str


ImageInput = Union[np.ndarray, torch.Tensor]


def prepare_images(images: ImageInput, image_size: int, patch_size: int) -> torch.Tensor:
    """Any of h×w×3 uint8, 3×h×w or N×3×h×w (0-255) -> N×3×S×S float, bilinear-resized"""
    if image_size % patch_size != 0:
        raise ShapeError(f"image size {image_size} is not divisible by patch size {patch_size}")
    if isinstance(images, np.ndarray):
        if images.ndim != 3 or images.shape[2] != 3:
            raise ShapeError(f"expected an h×w×3 raster, got {images.shape}")
        images = image_to_tensor(images)
    x = images.float()
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected N×3×h×w images, got {tuple(x.shape)}")
    if x.shape[-2:] != (image_size, image_size):
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    return x


def sinusoidal_positions(n_tokens: int, dim: int) -> torch.Tensor:
    position = torch.arange(n_tokens, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n_tokens, dim)
    pe[:, 0::2] = torch.sin(position * div)
    pe[:, 1::2] = torch.cos(position * div)[:, : dim // 2]
    return pe


# ==================== Frozen base ====================

class FrozenEncoder(nn.Module):
    """Parameters never require grad and the module never leaves eval mode"""

    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec

    def freeze(self) -> "FrozenEncoder":
        for param in self.parameters():
            param.requires_grad = False
        return self.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    def checksum(self) -> str:
        return module_checksum(self)


class ToyVisualEncoder(FrozenEncoder):
    """Random linear patch projection plus a fixed sinusoidal position code"""

    def __init__(self, spec: EncoderSpec, image_size: int):
        super().__init__(spec)
        self.image_size = image_size
        in_dim = 3 * spec.patch_size ** 2
        gen = torch.Generator().manual_seed(stable_seed("toy-visual", spec.family, spec.seed))
        self.proj = nn.Linear(in_dim, spec.embed_dim, bias=False)
        with torch.no_grad():
            self.proj.weight.copy_(torch.randn(spec.embed_dim, in_dim, generator=gen) / math.sqrt(in_dim))
        self.freeze()

    @torch.no_grad()
    def forward(self, images: ImageInput) -> torch.Tensor:
        p = self.spec.patch_size
        x = prepare_images(images, self.image_size, p).to(self.proj.weight.device)
        x = x / 127.5 - 1.0
        patches = F.unfold(x, kernel_size=p, stride=p).transpose(1, 2)
        feats = self.proj(patches)
        feats = feats + sinusoidal_positions(feats.shape[1], feats.shape[2]).to(feats.device)
        side = self.image_size // p
        return feats.reshape(x.shape[0], side, side, self.spec.embed_dim)


class ToyTextEncoder(FrozenEncoder):
    """Whitespace tokens hashed to seeded Gaussian vectors, mean-pooled"""

    def __init__(self, spec: EncoderSpec):
        super().__init__(spec)
        self.register_buffer("_anchor", torch.zeros(0), persistent=False)
        self._token_cache: Dict[str, torch.Tensor] = {}

    def _token_vector(self, token: str) -> torch.Tensor:
        if token not in self._token_cache:
            gen = torch.Generator().manual_seed(stable_seed("toy-text", self.spec.seed, token))
            self._token_cache[token] = torch.randn(self.spec.embed_dim, generator=gen)
        return self._token_cache[token]

    @torch.no_grad()
    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        vectors = []
        for prompt in prompts:
            tokens = prompt.split()
            if not tokens:
                raise InputError("text prompt must be non-empty")
            vectors.append(torch.stack([self._token_vector(t) for t in tokens]).mean(dim=0))
        return torch.stack(vectors).to(self._anchor.device)


# ==================== Pretrained adapters ====================

def _require_transformers():
    try:
        import transformers  # noqa: F401
    except ImportError as e:
        raise ConfigError("encoder kind 'pretrained' needs the optional 'transformers' package") from e


@lru_cache(maxsize=4)
def _load_clip(weights: str):
    _require_transformers()
    from transformers import CLIPModel, CLIPTokenizer

    logger.info(f"Loading CLIP weights from {weights}")
    return CLIPModel.from_pretrained(weights).eval(), CLIPTokenizer.from_pretrained(weights)


def _normalize(x: torch.Tensor, mean, std) -> torch.Tensor:
    m = torch.tensor(mean, device=x.device).view(1, 3, 1, 1)
    s = torch.tensor(std, device=x.device).view(1, 3, 1, 1)
    return (x / 255.0 - m) / s


class CLIPVisualAdapter(FrozenEncoder):
    """Patch tokens of the CLIP vision tower projected into the joint text space"""

    def __init__(self, spec: EncoderSpec, weights: str, image_size: int):
        super().__init__(spec)
        clip, _ = _load_clip(weights)
        self.vision = clip.vision_model
        self.projection = clip.visual_projection
        self.native_size = clip.config.vision_config.image_size
        self.image_size = image_size
        if clip.config.vision_config.patch_size != spec.patch_size:
            raise ShapeError(f"CLIP patch size {clip.config.vision_config.patch_size} != encoder.patch {spec.patch_size}")
        if clip.config.projection_dim != spec.embed_dim:
            raise ConfigError(f"CLIP projection dim {clip.config.projection_dim} != encoder.multimodal.dim {spec.embed_dim}")
        self.freeze()

    @torch.no_grad()
    def forward(self, images: ImageInput) -> torch.Tensor:
        x = prepare_images(images, self.image_size, self.spec.patch_size).to(self.projection.weight.device)
        out = self.vision(
            pixel_values=_normalize(x, CLIP_MEAN, CLIP_STD),
            interpolate_pos_encoding=self.image_size != self.native_size,
        )
        # final pre-pooling layer, CLS dropped
        tokens = self.projection(self.vision.post_layernorm(out.last_hidden_state[:, 1:]))
        side = self.image_size // self.spec.patch_size
        return tokens.reshape(x.shape[0], side, side, -1)


class CLIPTextAdapter(FrozenEncoder):
    def __init__(self, spec: EncoderSpec, weights: str):
        super().__init__(spec)
        clip, tokenizer = _load_clip(weights)
        self.clip = clip
        self.tokenizer = tokenizer
        if clip.config.projection_dim != spec.embed_dim:
            raise ConfigError(f"CLIP projection dim {clip.config.projection_dim} != encoder.text.dim {spec.embed_dim}")
        self.freeze()

    @torch.no_grad()
    def forward(self, prompts: Sequence[str]) -> torch.Tensor:
        if any(not p.strip() for p in prompts):
            raise InputError("text prompt must be non-empty")
        tokens = self.tokenizer(list(prompts), padding=True, return_tensors="pt")
        device = self.clip.text_projection.weight.device
        return self.clip.get_text_features(**{k: v.to(device) for k, v in tokens.items()})


class DINOVisualAdapter(FrozenEncoder):
    def __init__(self, spec: EncoderSpec, weights: str, image_size: int):
        super().__init__(spec)
        _require_transformers()
        from transformers import AutoModel

        logger.info(f"Loading DINO weights from {weights}")
        self.backbone = AutoModel.from_pretrained(weights).eval()
        self.image_size = image_size
        cfg = self.backbone.config
        if getattr(cfg, "patch_size", spec.patch_size) != spec.patch_size:
            raise ShapeError(f"DINO patch size {cfg.patch_size} != encoder.patch {spec.patch_size}")
        if cfg.hidden_size != spec.embed_dim:
            raise ConfigError(f"DINO hidden size {cfg.hidden_size} != encoder.pure.dim {spec.embed_dim}")
        self.freeze()

    @torch.no_grad()
    def forward(self, images: ImageInput) -> torch.Tensor:
        device = next(self.backbone.parameters()).device
        x = prepare_images(images, self.image_size, self.spec.patch_size).to(device)
        out = self.backbone(pixel_values=_normalize(x, IMAGENET_MEAN, IMAGENET_STD), interpolate_pos_encoding=True)
        side = self.image_size // self.spec.patch_size
        return out.last_hidden_state[:, 1:].reshape(x.shape[0], side, side, -1)


# ==================== Suite ====================

class EncoderSuite(nn.Module):
    """The three frozen encoders used by the model"""

    def __init__(self, pure: FrozenEncoder, multimodal: FrozenEncoder, text: FrozenEncoder):
        super().__init__()
        if multimodal.spec.embed_dim != text.spec.embed_dim:
            raise ShapeError("multimodal visual and text encoders must share an embedding dim")
        self.pure = pure
        self.multimodal = multimodal
        self.text = text

    @property
    def pure_dim(self) -> int:
        return self.pure.spec.embed_dim

    @property
    def multimodal_dim(self) -> int:
        return self.multimodal.spec.embed_dim

    def encode_visual_pure(self, images: ImageInput, domain: Domain = "ego") -> FeatureMap:
        return FeatureMap(self.pure(images), source="pure", domain=domain)

    def encode_visual_multimodal(self, images: ImageInput, domain: Domain = "ego") -> FeatureMap:
        return FeatureMap(self.multimodal(images), source="multimodal", domain=domain)

    def encode_texts(self, prompts: Sequence[str]) -> torch.Tensor:
        return self.text(list(prompts))

    def encode_text(self, prompt: str) -> TextEmbedding:
        if not prompt or not prompt.strip():
            raise InputError("text prompt must be non-empty")
        return TextEmbedding(vector=self.encode_texts([prompt])[0], prompt=prompt)

    def checksum(self) -> str:
        return module_checksum(self)


def _build_visual(branch: EncoderBranch, family: Family, cfg: EncoderConfig) -> FrozenEncoder:
    spec = EncoderSpec(family=family, embed_dim=branch.dim, patch_size=cfg.patch, seed=branch.seed)
    if branch.kind == "toy":
        return ToyVisualEncoder(spec, cfg.image_size)
    if not branch.weights:
        raise ConfigError(f"pretrained {family} encoder needs a weights path")
    if family == "pure_visual":
        return DINOVisualAdapter(spec, branch.weights, cfg.image_size)
    return CLIPVisualAdapter(spec, branch.weights, cfg.image_size)


def build_encoders(cfg: EncoderConfig) -> EncoderSuite:
    pure = _build_visual(cfg.pure, "pure_visual", cfg)
    multimodal = _build_visual(cfg.multimodal, "multimodal_visual", cfg)
    text_spec = EncoderSpec(family="text", embed_dim=cfg.text.dim, patch_size=cfg.patch, seed=cfg.text.seed)
    if cfg.text.kind == "toy":
        text = ToyTextEncoder(text_spec)
    elif not cfg.text.weights:
        raise ConfigError("pretrained text encoder needs a weights path")
    else:
        text = CLIPTextAdapter(text_spec, cfg.text.weights)
    logger.info(
        f"Encoders ready: pure={cfg.pure.kind}/{cfg.pure.dim}, multimodal={cfg.multimodal.kind}/{cfg.multimodal.dim}, "
        f"text={cfg.text.kind}/{cfg.text.dim}, patch={cfg.patch}, image={cfg.image_size}"
    )
    return EncoderSuite(pure, multimodal, text)
