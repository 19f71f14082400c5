"""
Self-Explainable Former, its two ablation variants, the action/object heads
and caption rendering.
"""

import re
from dataclasses import dataclass
from typing import Literal, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from config import ExplainConfig, settings
from encoders import FeatureMap
from errors import ConfigError, InputError, ShapeError, TemplateError
from fusion import FeedForward, TransformerBlock
from logger import setup_logger

logger = setup_logger(__name__, settings.LOG_LEVEL)

Variant = Literal["ffn_softmax", "concat_avgpool", "transformer"]
VARIANTS = ("ffn_softmax", "concat_avgpool", "transformer")


@dataclass
class ExplainOutput:
    f_cls: torch.Tensor
    action_logits: torch.Tensor
    object_logits: torch.Tensor

    @property
    def action_probs(self) -> torch.Tensor:
        return F.softmax(self.action_logits, dim=-1)

    @property
    def object_probs(self) -> torch.Tensor:
        return F.softmax(self.object_logits, dim=-1)

    def ranking(self, kind: Literal["action", "object"]) -> torch.Tensor:
        logits = self.action_logits if kind == "action" else self.object_logits
        return torch.argsort(logits, dim=-1, descending=True, stable=True)


# ==================== Attention stages ====================

class DomainSelfAttention(nn.Module):
    """One shared block, applied to exo tokens and ego tokens separately"""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.block = TransformerBlock(dim, heads, dim * ffn_mult, dropout)

    def forward(
        self, exo_tokens: Optional[torch.Tensor], ego_tokens: torch.Tensor
    ) -> Tuple[Optional[torch.Tensor], torch.Tensor]:
        exo_out = self.block(exo_tokens) if exo_tokens is not None else None
        return exo_out, self.block(ego_tokens)


class CrossDomainAttention(nn.Module):
    """Learned [CLS] query over the union of exo and ego tokens, then an FFN"""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__()
        self.cls_token = nn.Parameter(torch.randn(dim) * 0.02)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, dropout=dropout, batch_first=True)
        self.norm_out = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, dim * ffn_mult, dropout)

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        """Raw multi-head cross-attention of the [CLS] query, (B, N, d) -> (B, d)"""
        if tokens.shape[-1] != self.cls_token.shape[0]:
            raise ShapeError(f"tokens have dim {tokens.shape[-1]}, [CLS] has {self.cls_token.shape[0]}")
        query = self.cls_token.view(1, 1, -1).expand(tokens.shape[0], 1, -1)
        out, _ = self.attn(query, tokens, tokens, need_weights=False)
        return out.squeeze(1)

    def forward(self, exo_refined: Optional[torch.Tensor], ego_refined: torch.Tensor) -> torch.Tensor:
        tokens = ego_refined if exo_refined is None else torch.cat([exo_refined, ego_refined], dim=1)
        a = self.attend(self.norm_kv(tokens))
        return a + self.ffn(self.norm_out(a))


# ==================== Variants ====================

class Explainer(nn.Module):
    """Common plumbing: input projection, exo grouping, the exo-required-in-training rule"""

    variant: Variant

    def __init__(self, in_dim: int, model_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.model_dim = model_dim
        self.in_proj = nn.Linear(in_dim, model_dim) if in_dim != model_dim else nn.Identity()

    def _tokens(self, exo: Optional[FeatureMap], ego: FeatureMap) -> Tuple[Optional[torch.Tensor], torch.Tensor]:
        if ego.dim != self.in_dim:
            raise ShapeError(f"ego features have dim {ego.dim}, explainer expects {self.in_dim}")
        ego_tokens = self.in_proj(ego.tokens())
        if exo is None or exo.batch == 0:
            if self.training:
                raise InputError("exocentric features are required during training")
            return None, ego_tokens
        if exo.dim != self.in_dim:
            raise ShapeError(f"exo features have dim {exo.dim}, explainer expects {self.in_dim}")
        if exo.batch % ego.batch != 0:
            raise ShapeError(f"{exo.batch} exo maps cannot be grouped over {ego.batch} ego maps")
        b = ego.batch
        exo_tokens = self.in_proj(exo.tokens()).reshape(b, -1, self.model_dim)
        return exo_tokens, ego_tokens

    def forward(self, exo: Optional[FeatureMap], ego: FeatureMap) -> torch.Tensor:
        raise NotImplementedError


class FFNSoftmaxExplainer(Explainer):
    """① mean-pool each domain, concatenate, FFN"""

    variant = "ffn_softmax"

    def __init__(self, in_dim: int, model_dim: int, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__(in_dim, model_dim)
        self.ffn = FeedForward(2 * model_dim, model_dim * ffn_mult, dropout, out_dim=model_dim)

    def forward(self, exo: Optional[FeatureMap], ego: FeatureMap) -> torch.Tensor:
        exo_tokens, ego_tokens = self._tokens(exo, ego)
        ego_vec = ego_tokens.mean(dim=1)
        # ego-only inference reuses the ego summary for the missing exo half
        exo_vec = exo_tokens.mean(dim=1) if exo_tokens is not None else ego_vec
        return self.ffn(torch.cat([exo_vec, ego_vec], dim=-1))


class ConcatAvgPoolExplainer(Explainer):
    """② average-pool each domain's tokens, concatenate, linear projection"""

    variant = "concat_avgpool"

    def __init__(self, in_dim: int, model_dim: int):
        super().__init__(in_dim, model_dim)
        self.proj = nn.Linear(2 * model_dim, model_dim)

    def forward(self, exo: Optional[FeatureMap], ego: FeatureMap) -> torch.Tensor:
        exo_tokens, ego_tokens = self._tokens(exo, ego)
        ego_vec = F.adaptive_avg_pool1d(ego_tokens.transpose(1, 2), 1).squeeze(-1)
        exo_vec = (
            F.adaptive_avg_pool1d(exo_tokens.transpose(1, 2), 1).squeeze(-1) if exo_tokens is not None else ego_vec
        )
        return self.proj(torch.cat([exo_vec, ego_vec], dim=-1))


class TransformerExplainer(Explainer):
    """③ per-domain self-attention, then [CLS] cross-attention over both domains"""

    variant = "transformer"

    def __init__(self, in_dim: int, model_dim: int, heads: int = 4, ffn_mult: int = 4, dropout: float = 0.0):
        super().__init__(in_dim, model_dim)
        self.self_attention = DomainSelfAttention(model_dim, heads, ffn_mult, dropout)
        self.cross_attention = CrossDomainAttention(model_dim, heads, ffn_mult, dropout)

    def self_attend(self, exo: Optional[FeatureMap], ego: FeatureMap) -> Tuple[Optional[torch.Tensor], torch.Tensor]:
        exo_tokens, ego_tokens = self._tokens(exo, ego)
        return self.self_attention(exo_tokens, ego_tokens)

    def cross_domain_attend(self, exo_refined: Optional[torch.Tensor], ego_refined: torch.Tensor) -> torch.Tensor:
        return self.cross_attention(exo_refined, ego_refined)

    def forward(self, exo: Optional[FeatureMap], ego: FeatureMap) -> torch.Tensor:
        exo_refined, ego_refined = self.self_attend(exo, ego)
        return self.cross_domain_attend(exo_refined, ego_refined)


def build_explainer(cfg: ExplainConfig, in_dim: int, model_dim: int) -> Explainer:
    if cfg.variant == "ffn_softmax":
        return FFNSoftmaxExplainer(in_dim, model_dim, cfg.ffn_mult, cfg.dropout)
    if cfg.variant == "concat_avgpool":
        return ConcatAvgPoolExplainer(in_dim, model_dim)
    if cfg.variant == "transformer":
        if model_dim % cfg.heads != 0:
            raise ConfigError(f"model_dim {model_dim} not divisible by model.explain.heads {cfg.heads}")
        return TransformerExplainer(in_dim, model_dim, cfg.heads, cfg.ffn_mult, cfg.dropout)
    raise ConfigError(f"Unknown self-explain variant '{cfg.variant}' (choose from {', '.join(VARIANTS)})")


def explain_variant_forward(explainer: Explainer, exo: Optional[FeatureMap], ego: FeatureMap) -> torch.Tensor:
    if getattr(explainer, "variant", None) not in VARIANTS:
        raise ConfigError(f"Unknown self-explain variant on {type(explainer).__name__}")
    return explainer(exo, ego)


# ==================== Heads ====================

class ClassificationHeads(nn.Module):
    def __init__(self, dim: int, n_actions: int, n_objects: int, zero_init: bool = False):
        super().__init__()
        self.action = nn.Linear(dim, n_actions)
        self.object = nn.Linear(dim, n_objects)
        for head in (self.action, self.object):
            if zero_init:
                nn.init.zeros_(head.weight)
            else:
                nn.init.trunc_normal_(head.weight, std=0.02)
            nn.init.zeros_(head.bias)

    def classify(self, f_cls: torch.Tensor) -> ExplainOutput:
        if not torch.isfinite(f_cls).all():
            raise InputError("f_cls contains non-finite values")
        return ExplainOutput(f_cls=f_cls, action_logits=self.action(f_cls), object_logits=self.object(f_cls))

    def forward(self, f_cls: torch.Tensor) -> ExplainOutput:
        return self.classify(f_cls)


class SelfExplainFormer(nn.Module):
    """Explainer variant + heads"""

    def __init__(self, cfg: ExplainConfig, in_dim: int, model_dim: int, n_actions: int, n_objects: int):
        super().__init__()
        self.explainer = build_explainer(cfg, in_dim, model_dim)
        self.heads = ClassificationHeads(model_dim, n_actions, n_objects)

    def forward(self, exo: Optional[FeatureMap], ego: FeatureMap) -> ExplainOutput:
        return self.heads(explain_variant_forward(self.explainer, exo, ego))


# ==================== Captions ====================

_PLACEHOLDER = re.compile(r"\[(action|object)\]")


def check_template(template: str) -> None:
    for placeholder in ("[action]", "[object]"):
        count = template.count(placeholder)
        if count != 1:
            raise TemplateError(f"template must contain {placeholder} exactly once, found {count}: {template!r}")


def render_caption(action: str, obj: str, template: str) -> str:
    check_template(template)
    values = {"action": action, "object": obj}
    return _PLACEHOLDER.sub(lambda m: values[m.group(1)], template)


def parse_caption(caption: str, template: str) -> Tuple[str, str]:
    """Inverse of render_caption for captions produced from `template`"""
    check_template(template)
    pattern = ""
    for piece in re.split(r"(\[action\]|\[object\])", template):
        if piece == "[action]":
            pattern += r"(?P<action>.+?)"
        elif piece == "[object]":
            pattern += r"(?P<object>.+?)"
        else:
            pattern += re.escape(piece)
    match = re.fullmatch(pattern, caption)
    if match is None:
        raise TemplateError(f"caption {caption!r} does not follow template {template!r}")
    return match.group("action"), match.group("object")
