"""SEA model: frozen encoders -> PFF -> Self-Explain heads -> VL affordance localization."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn

from affordance import (
    AffordanceHeatmap,
    PromptAligner,
    build_prompt,
    normalize_and_filter,
    resize_heatmap,
    similarity_heatmap,
)
from config import RunConfig, settings
from data_model import VocabPair
from encoders import FeatureMap, build_encoders, prepare_images
from errors import InputError, ShapeError
from fusion import PixelFusionFormer
from logger import setup_logger
from losses import PooledEmbedding, pooled_embedding
from metrics import PredictionBatch
from self_explain import ExplainOutput, SelfExplainFormer, render_caption

logger = setup_logger(__name__, settings.LOG_LEVEL)


@dataclass
class ModelOutput:
    explain: ExplainOutput
    ego_heatmap: AffordanceHeatmap
    ego_pooled: PooledEmbedding
    text: torch.Tensor
    prompts: List[str]
    exo_heatmap: Optional[AffordanceHeatmap] = None
    exo_pooled: Optional[PooledEmbedding] = None
    # aligned multimodal grids the heatmaps were computed on; exo is (B*k, h, w, d)
    ego_feats: Optional[FeatureMap] = None
    exo_feats: Optional[FeatureMap] = None
    k: int = 0


@dataclass
class PredictionBundle:
    """Everything `predict` reports for one egocentric image"""

    heatmap: np.ndarray
    caption: str
    action_topk: List[Tuple[str, float]]
    object_topk: List[Tuple[str, float]]
    pair_topk: List[Tuple[Tuple[str, str], float]] = field(default_factory=list)


class SEAModel(nn.Module):
    def __init__(self, cfg: RunConfig, vocab_pair: VocabPair):
        super().__init__()
        self.cfg = cfg
        self.vocab_pair = vocab_pair
        self.image_size = cfg.encoder.image_size
        self.encoders = build_encoders(cfg.encoder)
        self.pff = PixelFusionFormer(
            cfg.model.pff,
            {"pure": self.encoders.pure_dim, "multimodal": self.encoders.multimodal_dim},
        )
        actions, objects = vocab_pair
        self.self_explain = SelfExplainFormer(
            cfg.model.explain,
            in_dim=self.encoders.pure_dim,
            model_dim=cfg.model.pff.model_dim,
            n_actions=len(actions),
            n_objects=len(objects),
        )
        self.aligner = PromptAligner(self.encoders.multimodal_dim, cfg.affordance.aligner)

    @property
    def device(self) -> torch.device:
        return next(self.parameters()).device

    def encode(self, images: torch.Tensor, domain: str) -> Tuple[FeatureMap, FeatureMap]:
        """Fused (pure, multimodal) streams for an N×3×S×S batch"""
        pure = self.pff.fuse(self.encoders.encode_visual_pure(images, domain))
        multimodal = self.pff.fuse(self.encoders.encode_visual_multimodal(images, domain))
        return pure, multimodal

    def prompts_for(self, action_ids: Sequence[int], object_ids: Sequence[int]) -> List[str]:
        actions, objects = self.vocab_pair
        aff = self.cfg.affordance
        return [
            build_prompt(actions.label_of(int(a)), objects.label_of(int(o)), aff.prompt_style, self.cfg.caption.template)
            for a, o in zip(action_ids, object_ids)
        ]

    def _localize(self, text: torch.Tensor, feats: FeatureMap) -> Tuple[AffordanceHeatmap, PooledEmbedding]:
        heatmap = normalize_and_filter(similarity_heatmap(text, feats, self.image_size), self.cfg.affordance)
        return heatmap, pooled_embedding(feats, heatmap)

    def forward(
        self,
        ego: torch.Tensor,
        exo: Optional[torch.Tensor] = None,
        action_ids: Optional[torch.Tensor] = None,
        object_ids: Optional[torch.Tensor] = None,
    ) -> ModelOutput:
        """
        ego: B×3×S×S, exo: B×k×3×S×S (optional at inference).

        The affordance prompt uses the given labels when teacher forcing is on,
        otherwise each sample's top-1 (action, object).
        """
        if ego.dim() != 4:
            raise ShapeError(f"ego batch must be B×3×S×S, got {tuple(ego.shape)}")
        b = ego.shape[0]
        ego_pure, ego_mm = self.encode(ego, "ego")

        exo_pure = exo_mm = None
        k = 0
        if exo is not None and exo.numel() > 0:
            if exo.dim() != 5 or exo.shape[0] != b:
                raise ShapeError(f"exo batch must be B×k×3×S×S with B={b}, got {tuple(exo.shape)}")
            k = exo.shape[1]
            exo_pure, exo_mm = self.encode(exo.flatten(0, 1), "exo")

        explain = self.self_explain(exo_pure, ego_pure)

        forced = action_ids is not None and object_ids is not None and self.cfg.affordance.teacher_forcing
        if forced:
            a_ids, o_ids = action_ids.tolist(), object_ids.tolist()
        else:
            a_ids = explain.action_logits.argmax(dim=-1).tolist()
            o_ids = explain.object_logits.argmax(dim=-1).tolist()
        prompts = self.prompts_for(a_ids, o_ids)
        text = self.encoders.encode_texts(prompts)

        ego_loc = self.aligner(ego_mm)
        ego_heatmap, ego_pooled = self._localize(text, ego_loc)
        out = ModelOutput(
            explain=explain,
            ego_heatmap=ego_heatmap,
            ego_pooled=ego_pooled,
            text=text,
            prompts=prompts,
            ego_feats=ego_loc,
        )
        if exo_mm is not None:
            exo_loc = self.aligner(exo_mm)
            exo_heatmap, exo_pooled = self._localize(text.repeat_interleave(k, dim=0), exo_loc)
            # one exo embedding per sample: mean over its k views
            out.exo_heatmap = exo_heatmap
            out.exo_feats = exo_loc
            out.k = k
            out.exo_pooled = PooledEmbedding(vector=exo_pooled.vector.reshape(b, k, -1).mean(dim=1), domain="exo")
        return out

    # ==================== Inference ====================

    @torch.no_grad()
    def predict(self, ego: torch.Tensor, exo: Optional[torch.Tensor] = None) -> PredictionBatch:
        self.eval()
        device = self.device
        out = self.forward(ego.to(device), exo.to(device) if exo is not None else None)
        return PredictionBatch(
            heatmaps=out.ego_heatmap.grid.double().cpu().numpy(),
            action_probs=out.explain.action_probs.double().cpu().numpy(),
            object_probs=out.explain.object_probs.double().cpu().numpy(),
        )

    def predict_one(
        self,
        image: np.ndarray,
        exo_images: Optional[Sequence[np.ndarray]] = None,
        topk: int = 5,
    ) -> PredictionBundle:
        """Caption, ranked labels and a heatmap at the input image's resolution"""
        if image.ndim != 3 or image.shape[2] != 3:
            raise InputError(f"expected an h×w×3 image, got shape {image.shape}")
        patch = self.cfg.encoder.patch
        ego = prepare_images(image, self.image_size, patch)
        exo = None
        if exo_images:
            exo = torch.cat([prepare_images(x, self.image_size, patch) for x in exo_images]).unsqueeze(0)
        out = self.predict(ego, exo)

        actions, objects = self.vocab_pair
        pa, po = out.action_probs[0], out.object_probs[0]
        a_order = np.argsort(-pa, kind="stable")
        o_order = np.argsort(-po, kind="stable")
        joint = np.outer(pa, po)
        pair_order = np.argsort(-joint.ravel(), kind="stable")[:topk]
        pairs = []
        for flat in pair_order:
            i, j = np.unravel_index(int(flat), joint.shape)
            pairs.append(((actions.label_of(int(i)), objects.label_of(int(j))), float(joint[i, j])))

        top_action, top_object = actions.label_of(int(a_order[0])), objects.label_of(int(o_order[0]))
        return PredictionBundle(
            heatmap=resize_heatmap(out.heatmaps[0], image.shape[:2]),
            caption=render_caption(top_action, top_object, self.cfg.caption.template),
            action_topk=[(actions.label_of(int(i)), float(pa[i])) for i in a_order[:topk]],
            object_topk=[(objects.label_of(int(i)), float(po[i])) for i in o_order[:topk]],
            pair_topk=pairs,
        )

    # ==================== Trainable state ====================

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for name, p in self.named_parameters() if not name.startswith("encoders.")]

    def trainable_state_dict(self) -> Dict[str, torch.Tensor]:
        return {k: v.detach().cpu().clone() for k, v in self.state_dict().items() if not k.startswith("encoders.")}

    def load_trainable_state_dict(self, state: Dict[str, torch.Tensor]) -> None:
        try:
            result = self.load_state_dict(state, strict=False)
        except RuntimeError as e:
            raise ShapeError(f"trainable state does not fit this model: {e}") from e
        missing = [k for k in result.missing_keys if not k.startswith("encoders.")]
        if missing or result.unexpected_keys:
            raise ShapeError(f"trainable state mismatch: missing={missing}, unexpected={result.unexpected_keys}")


def build_model(cfg: RunConfig, vocab_pair: VocabPair, device: Optional[str] = None) -> SEAModel:
    """Factory used by the trainer and the CLI"""
    model = SEAModel(cfg, vocab_pair).to(device or settings.SEA_DEVICE)
    n_trainable = sum(p.numel() for p in model.trainable_parameters())
    logger.info(
        f"🧠 SEA model built: variant={cfg.model.explain.variant}, "
        f"actions={len(vocab_pair[0])}, objects={len(vocab_pair[1])}, trainable params={n_trainable:,}"
    )
    return model
