"""VL affordance localization: prompt -> patch/text cosine map -> min-max -> beta filter."""

from dataclasses import dataclass
from typing import Literal, Optional, Tuple, Union

import matplotlib
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import DEFAULT_TEMPLATE, AffordanceConfig, settings
from encoders import EncoderSuite, FeatureMap, TextEmbedding
from errors import InputError, ShapeError
from logger import setup_logger
from self_explain import render_caption

logger = setup_logger(__name__, settings.LOG_LEVEL)

Stage = Literal["raw", "final"]

# threshold settings live in the affordance section of the run config
ThresholdConfig = AffordanceConfig


@dataclass
class AffordanceHeatmap:
    """(N, H, W) scores; raw = cosines in [-1, 1], final = [0, 1] with sub-beta values zeroed"""

    grid: torch.Tensor
    stage: Stage
    domain: Literal["exo", "ego"]

    def __post_init__(self):
        if self.grid.dim() != 3:
            raise ShapeError(f"heatmap grid must be (N, H, W), got {tuple(self.grid.shape)}")


def build_prompt(action: str, obj: str, style: Literal["pair", "template"] = "pair", template: str = DEFAULT_TEMPLATE) -> str:
    if style == "template":
        return render_caption(action, obj, template)
    return f"{action} {obj}"


def cosine_map(text: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """text (N, d) or (d,), feats (N, h, w, d) -> (N, h, w); zero-norm vectors give cosine 0"""
    if text.shape[-1] != feats.shape[-1]:
        raise ShapeError(f"text dim {text.shape[-1]} != feature dim {feats.shape[-1]}")
    if text.dim() == 1:
        text = text.unsqueeze(0).expand(feats.shape[0], -1)
    if text.shape[0] != feats.shape[0]:
        raise ShapeError(f"{text.shape[0]} text vectors for {feats.shape[0]} feature maps")
    t = F.normalize(text, dim=-1)
    v = F.normalize(feats, dim=-1)
    return torch.einsum("nhwd,nd->nhw", v, t.to(v.dtype))


def similarity_heatmap(
    text_emb: Union[TextEmbedding, torch.Tensor],
    feats: FeatureMap,
    image_size: Union[int, Tuple[int, int]],
) -> AffordanceHeatmap:
    text = text_emb.vector if isinstance(text_emb, TextEmbedding) else text_emb
    patch_map = cosine_map(text.to(feats.grid.device), feats.grid)
    size = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    if tuple(patch_map.shape[-2:]) != size:
        patch_map = F.interpolate(patch_map.unsqueeze(1), size=size, mode="bilinear", align_corners=False).squeeze(1)
    return AffordanceHeatmap(grid=patch_map, stage="raw", domain=feats.domain)


def normalize_and_filter(raw: AffordanceHeatmap, cfg: ThresholdConfig) -> AffordanceHeatmap:
    if raw.stage != "raw":
        raise InputError("normalize_and_filter expects a raw heatmap")
    v = raw.grid
    lo = v.amin(dim=(-2, -1), keepdim=True)
    hi = v.amax(dim=(-2, -1), keepdim=True)
    scaled = (v - lo) / (hi - lo + cfg.epsilon_norm)
    filtered = torch.where(scaled >= cfg.beta, scaled, torch.zeros_like(scaled))
    return AffordanceHeatmap(grid=filtered, stage="final", domain=raw.domain)


class PromptAligner(nn.Module):
    """
    Per-patch map of a fused multimodal grid into the text space.

    `centered_linear` subtracts each image's mean patch vector, then applies a
    bias-free linear layer initialized to the identity; anything common to all
    patches of an image never reaches the heatmap. `identity` passes features through.
    """

    def __init__(self, dim: int, mode: Literal["centered_linear", "identity"] = "centered_linear"):
        super().__init__()
        self.mode = mode
        self.proj = None
        if mode == "centered_linear":
            self.proj = nn.Linear(dim, dim, bias=False)
            with torch.no_grad():
                self.proj.weight.copy_(torch.eye(dim))

    def forward(self, feats: FeatureMap) -> FeatureMap:
        if self.proj is None:
            return feats
        grid = feats.grid - feats.grid.mean(dim=(1, 2), keepdim=True)
        return feats.with_grid(self.proj(grid))


def localize(
    action: str,
    obj: str,
    feats_ego: FeatureMap,
    feats_exo: Optional[FeatureMap] = None,
    *,
    encoders: EncoderSuite,
    cfg: AffordanceConfig,
    image_size: int,
    template: str = DEFAULT_TEMPLATE,
) -> Tuple[AffordanceHeatmap, Optional[AffordanceHeatmap]]:
    """Final ego (and, when given, exo) heatmaps for one (action, object) prompt"""
    prompt = build_prompt(action, obj, cfg.prompt_style, template)
    text = encoders.encode_text(prompt)
    ego = normalize_and_filter(similarity_heatmap(text, feats_ego, image_size), cfg)
    exo = None
    if feats_exo is not None:
        exo = normalize_and_filter(similarity_heatmap(text, feats_exo, image_size), cfg)
    logger.debug(f"Localized prompt '{prompt}' (exo={'yes' if exo is not None else 'no'})")
    return ego, exo


# ==================== Export ====================

def render_overlay(image: np.ndarray, heatmap: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """Alpha-blend a [0, 1] heatmap (resized to the image) over an h×w×3 uint8 image"""
    h, w = image.shape[:2]
    heat = resize_heatmap(np.asarray(heatmap, dtype=np.float64), (h, w))
    colored = matplotlib.colormaps[cmap](np.clip(heat, 0.0, 1.0))[..., :3]
    blended = (1.0 - alpha) * image.astype(np.float32) / 255.0 + alpha * colored
    return np.clip(np.round(blended * 255.0), 0, 255).astype(np.uint8)


def resize_heatmap(heatmap: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D float map to (h, w)"""
    if tuple(heatmap.shape) == tuple(shape):
        return np.asarray(heatmap, dtype=np.float64)
    t = torch.as_tensor(np.asarray(heatmap, dtype=np.float64)).view(1, 1, *heatmap.shape)
    out = F.interpolate(t, size=tuple(shape), mode="bilinear", align_corners=False)
    return out.view(*shape).numpy()
