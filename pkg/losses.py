"""Training objectives: domain alignment, vision-language contrast and the caption heads."""

import logging
from dataclasses import dataclass
from typing import Dict, Hashable, Literal, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F

from affordance import AffordanceHeatmap, ThresholdConfig, normalize_and_filter, similarity_heatmap
from config import LossWeights, settings
from encoders import FeatureMap
from errors import ConfigError, InputError, ShapeError
from logger import setup_logger

logger = setup_logger(__name__, settings.LOG_LEVEL)


@dataclass
class PooledEmbedding:
    """Heatmap-weighted mean of a feature grid, (N, d)"""

    vector: torch.Tensor
    domain: Literal["exo", "ego"]


EmbeddingLike = Union[PooledEmbedding, torch.Tensor]


def _vector(e: EmbeddingLike) -> torch.Tensor:
    return e.vector if isinstance(e, PooledEmbedding) else e


# ==================== Pooling ====================

def pooled_embedding(feats: FeatureMap, heatmap: AffordanceHeatmap) -> PooledEmbedding:
    """Area-average the heatmap onto the feature grid, weight every cell, mean over the grid"""
    weights = heatmap.grid
    if weights.shape[0] != feats.batch:
        raise ShapeError(f"{weights.shape[0]} heatmaps for {feats.batch} feature maps")
    h, w = feats.spatial
    if weights.shape[-2] < h or weights.shape[-1] < w:
        raise ShapeError(f"heatmap {tuple(weights.shape[-2:])} is smaller than the feature grid {(h, w)}")
    if tuple(weights.shape[-2:]) != (h, w):
        weights = F.adaptive_avg_pool2d(weights.unsqueeze(1), (h, w)).squeeze(1)
    weighted = weights.unsqueeze(-1).to(feats.grid.dtype) * feats.grid
    return PooledEmbedding(vector=weighted.mean(dim=(1, 2)), domain=feats.domain)


def prompt_pooled(
    feats: FeatureMap,
    texts: torch.Tensor,
    cfg: ThresholdConfig,
    image_size: Union[int, Tuple[int, int]],
    group: int = 1,
) -> torch.Tensor:
    """
    (n, m, d): feature map i pooled under the final heatmap of prompt j, for every (i, j).

    `group` consecutive maps belong to one sample (its k exocentric views) and are averaged.
    """
    n, m = feats.batch, texts.shape[0]
    if group < 1 or n % group != 0:
        raise ShapeError(f"{n} feature maps cannot be grouped by {group}")
    tiled = feats.with_grid(feats.grid.repeat_interleave(m, dim=0))
    raw = similarity_heatmap(texts.repeat(n, 1), tiled, image_size)
    pooled = pooled_embedding(tiled, normalize_and_filter(raw, cfg)).vector.reshape(n, m, -1)
    if group > 1:
        pooled = pooled.reshape(n // group, group, m, -1).mean(dim=1)
    return pooled


# ==================== Alignment ====================

def cosine_margin_loss(e_exo: EmbeddingLike, e_ego: EmbeddingLike, alpha: float) -> torch.Tensor:
    """max(0, 1 - alpha - cos(e_exo, e_ego)), averaged over the batch; zero-norm vectors count as cosine 0"""
    a = _vector(e_exo)
    b = _vector(e_ego)
    if a.shape != b.shape:
        raise ShapeError(f"exo embedding {tuple(a.shape)} vs ego embedding {tuple(b.shape)}")
    cos = (F.normalize(a, dim=-1) * F.normalize(b, dim=-1)).sum(dim=-1)
    return torch.clamp(1.0 - alpha - cos, min=0.0).mean()


def batch_similarity(visual_embs: torch.Tensor, text_embs: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-softmaxed cosine similarity between every visual and every text embedding in the batch"""
    if visual_embs.dim() != 2 or visual_embs.shape[0] < 1:
        raise InputError(f"need an (n >= 1, d) batch of visual embeddings, got {tuple(visual_embs.shape)}")
    if visual_embs.shape != text_embs.shape:
        raise ShapeError(f"visual {tuple(visual_embs.shape)} vs text {tuple(text_embs.shape)}")
    v = F.normalize(visual_embs, dim=-1)
    t = F.normalize(text_embs.to(v.dtype), dim=-1)
    return F.softmax(v @ t.T / tau, dim=-1)


def prompt_similarity(visual: torch.Tensor, texts: torch.Tensor, tau: float) -> torch.Tensor:
    """visual (n, m, d) pooled per prompt, texts (m, d) -> row softmax over j of cos(visual[i, j], texts[j]) / tau"""
    if visual.dim() != 3 or visual.shape[0] < 1:
        raise InputError(f"need an (n >= 1, m, d) block of pooled embeddings, got {tuple(visual.shape)}")
    if texts.dim() != 2 or tuple(visual.shape[1:]) != tuple(texts.shape):
        raise ShapeError(f"visual {tuple(visual.shape)} vs text {tuple(texts.shape)}")
    v = F.normalize(visual, dim=-1)
    t = F.normalize(texts.to(v.dtype), dim=-1)
    return F.softmax((v * t.unsqueeze(0)).sum(dim=-1) / tau, dim=-1)


def match_matrix(keys: Sequence[Hashable], columns: Optional[Sequence[Hashable]] = None) -> torch.Tensor:
    """q[i, j] = 1 when row item i and column item j carry the same caption key; columns default to the rows"""
    cols = keys if columns is None else columns
    q = torch.zeros(len(keys), len(cols))
    for i, key in enumerate(keys):
        for j, other in enumerate(cols):
            if key == other:
                q[i, j] = 1.0
    return q


def contrastive_loss(P: torch.Tensor, Q: torch.Tensor, eps: float) -> torch.Tensor:
    """(1/n) sum_i sum_j p_ij log(p_ij / (q_ij + eps)); p_ij = 0 terms contribute 0"""
    if P.shape != Q.shape or P.dim() != 2:
        raise ShapeError(f"P {tuple(P.shape)} and Q {tuple(Q.shape)} must be equal 2-D matrices")
    Q = Q.to(P.dtype)
    rows = (torch.xlogy(P, P) - P * torch.log(Q + eps)).sum(dim=-1)
    if logger.isEnabledFor(logging.DEBUG):
        unmatched = (P * (Q == 0)).sum(dim=-1).max().item()
        logger.debug(f"contrastive: max unmatched mass per row {unmatched:.4f}")
    return rows.mean()


def classification_loss(logits: torch.Tensor, labels: Union[torch.Tensor, int]) -> torch.Tensor:
    if not torch.is_tensor(labels):
        labels = torch.tensor([labels], device=logits.device)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
    labels = labels.view(-1).long()
    n_classes = logits.shape[-1]
    if labels.numel() and (labels.min().item() < 0 or labels.max().item() >= n_classes):
        raise InputError(f"label out of range [0, {n_classes}): {labels.tolist()}")
    return F.cross_entropy(logits, labels.to(logits.device))


# ==================== Combination ====================

@dataclass
class LossComponents:
    cos: torch.Tensor
    con: torch.Tensor
    ce_action: torch.Tensor
    ce_object: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in ("cos", "con", "ce_action", "ce_object")}

    def is_finite(self) -> bool:
        return all(bool(torch.isfinite(getattr(self, name)).all()) for name in ("cos", "con", "ce_action", "ce_object"))


def total_loss(components: LossComponents, weights: LossWeights) -> torch.Tensor:
    """Weighted sum; terms whose weight is 0 are left out of the graph entirely"""
    if weights.all_zero():
        raise ConfigError("all loss weights are zero, nothing to optimize")
    terms = [
        (weights.cos, components.cos),
        (weights.con, components.con),
        (weights.ce_action, components.ce_action),
        (weights.ce_object, components.ce_object),
    ]
    total = None
    for weight, value in terms:
        if weight <= 0.0:
            continue
        total = weight * value if total is None else total + weight * value
    return total
