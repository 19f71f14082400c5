"""Pixel-level Fusion Former: one parameter set refining every visual stream."""

from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn

from config import PFFConfig, settings
from encoders import FeatureMap
from errors import ShapeError
from logger import setup_logger

logger = setup_logger(__name__, settings.LOG_LEVEL)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int, dropout: float = 0.0, out_dim: Optional[int] = None):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, hidden),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, out_dim or dim),
            nn.Dropout(dropout),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block; with `gated=True` both residual branches start at zero"""

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0, gated: bool = False):
        super().__init__()
        if dim % heads != 0:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, dropout)
        self.gated = gated
        if gated:
            self.gate_attn = nn.Parameter(torch.zeros(1))
            self.gate_ffn = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        a, _ = self.attn(h, h, h, need_weights=False)
        x = x + (self.gate_attn * a if self.gated else a)
        f = self.ffn(self.norm2(x))
        return x + (self.gate_ffn * f if self.gated else f)


class PixelFusionFormer(nn.Module):
    """
    Shared transformer applied to each stream independently (no cross-stream mixing).

    Streams whose encoder dim differs from `model_dim` go through a per-source
    linear input projection and come back through a per-source output projection,
    so a fused map keeps its source's dim.
    """

    def __init__(self, cfg: PFFConfig, input_dims: Dict[str, int]):
        super().__init__()
        self.cfg = cfg
        self.input_dims = dict(input_dims)
        self.in_proj = nn.ModuleDict()
        self.out_proj = nn.ModuleDict()
        for source, dim in self.input_dims.items():
            if dim != cfg.model_dim:
                self.in_proj[source] = nn.Linear(dim, cfg.model_dim)
                self.out_proj[source] = nn.Linear(cfg.model_dim, dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.model_dim, cfg.heads, cfg.ffn_dim, cfg.dropout, gated=True)
            for _ in range(cfg.layers)
        )
        logger.info(
            f"PFF built: layers={cfg.layers}, heads={cfg.heads}, model_dim={cfg.model_dim}, "
            f"projected sources={sorted(self.in_proj.keys())}"
        )

    def fuse(self, stream: FeatureMap) -> FeatureMap:
        expected = self.input_dims.get(stream.source, self.cfg.model_dim)
        if stream.dim != expected:
            raise ShapeError(
                f"{stream.source} stream has dim {stream.dim}, PFF expects {expected} "
                f"(model_dim={self.cfg.model_dim}, no projection configured for this dim)"
            )
        n, h, w, _ = stream.grid.shape
        x = stream.tokens()
        if stream.source in self.in_proj:
            x = self.in_proj[stream.source](x)
        for block in self.blocks:
            x = block(x)
        if stream.source in self.out_proj:
            x = self.out_proj[stream.source](x)
        return stream.with_grid(x.reshape(n, h, w, -1), fused=True)

    def forward(self, stream: FeatureMap) -> FeatureMap:
        return self.fuse(stream)

    def fuse_all(self, streams: Sequence[FeatureMap]) -> List[FeatureMap]:
        return [self.fuse(s) for s in streams]
