"""
Heatmap metrics (KLD / SIM / NSS), top-k key-information accuracy and split evaluation.

All heatmap kernels work in float64 numpy and sum in a fixed order so the same
inputs always give bit-identical numbers.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch.utils.data import DataLoader

from affordance import resize_heatmap
from config import MetricsConfig, settings
from data_model import Sample, SEADataset, VocabPair, collate_samples
from errors import InputError, MetricError, SchemaError
from logger import setup_logger
from utils import save_heatmap_png

logger = setup_logger(__name__, settings.LOG_LEVEL)

Kind = Literal["action", "object"]
HEATMAP_METRICS = ("KLD", "SIM", "NSS")
# float32 final heatmaps, one array per predictions.jsonl record under its heatmap_key
HEATMAP_ARRAYS = "predictions_heatmaps.npz"


# ==================== Heatmap kernels ====================

def _prepare(pred: np.ndarray, gt: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if gt.ndim != 2:
        raise MetricError(f"GT heatmap must be 2-D, got shape {gt.shape}")
    if pred.shape != gt.shape:
        pred = resize_heatmap(pred, gt.shape)
    if not gt.sum() > 0.0:
        raise MetricError("GT heatmap is all zeros")
    return pred, gt


def _to_distribution(x: np.ndarray) -> np.ndarray:
    total = x.sum()
    return x / total if total > 0.0 else np.zeros_like(x)


def kld(pred: np.ndarray, gt: np.ndarray, eps: float = 1e-12) -> float:
    """KL(GT || pred) on sum-normalized maps; lower is better"""
    pred, gt = _prepare(pred, gt)
    p = _to_distribution(pred)
    g = _to_distribution(gt)
    return float(np.sum(g * np.log(eps + g / (p + eps))))


def sim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Histogram intersection of the sum-normalized maps, in [0, 1]"""
    pred, gt = _prepare(pred, gt)
    return float(np.sum(np.minimum(_to_distribution(pred), _to_distribution(gt))))


def nss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean z-scored prediction over the strictly positive GT pixels; constant prediction scores 0"""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        pred = resize_heatmap(pred, gt.shape)
    fixations = gt > 0.0
    if not fixations.any():
        raise MetricError("NSS needs at least one positive GT pixel")
    sigma = pred.std()
    if sigma == 0.0:
        return 0.0
    z = (pred - pred.mean()) / sigma
    return float(z[fixations].mean())


# ==================== Top-k ====================

@dataclass(frozen=True)
class RankedPrediction:
    """Label ids ordered by descending probability, one permutation per head"""

    action_ranking: Tuple[int, ...]
    object_ranking: Tuple[int, ...]

    def __post_init__(self):
        for kind in ("action", "object"):
            ranking = tuple(int(i) for i in getattr(self, f"{kind}_ranking"))
            if sorted(ranking) != list(range(len(ranking))):
                raise InputError(f"{kind} ranking is not a permutation: {ranking}")
            object.__setattr__(self, f"{kind}_ranking", ranking)

    def ranking(self, kind: Kind) -> Tuple[int, ...]:
        return self.action_ranking if kind == "action" else self.object_ranking

    @classmethod
    def from_probs(cls, action_probs: np.ndarray, object_probs: np.ndarray) -> "RankedPrediction":
        return cls(
            action_ranking=tuple(np.argsort(-np.asarray(action_probs), kind="stable").tolist()),
            object_ranking=tuple(np.argsort(-np.asarray(object_probs), kind="stable").tolist()),
        )


def topk_accuracy(preds: Sequence[RankedPrediction], labels: Sequence[int], k: int, kind: Kind) -> float:
    """Percentage of samples whose label id is among the first k ranked ids"""
    if k < 1:
        raise InputError(f"k must be >= 1, got {k}")
    if len(preds) != len(labels):
        raise InputError(f"{len(preds)} predictions for {len(labels)} labels")
    if not preds:
        raise InputError("topk_accuracy needs at least one prediction")
    vocab_size = len(preds[0].ranking(kind))
    if k > vocab_size:
        logger.warning(f"k={k} exceeds the {kind} vocabulary size {vocab_size}; clamping")
        k = vocab_size
    hits = sum(1 for pred, label in zip(preds, labels) if int(label) in pred.ranking(kind)[:k])
    return 100.0 * hits / len(preds)


def metric_name(kind: Kind, k: int) -> str:
    return f"T_{kind[0]}@{k}"


# ==================== Model protocol ====================

@dataclass
class PredictionBatch:
    """Ego-image predictions as numpy: final heatmaps (N, H, W), head probabilities (N, |V|)"""

    heatmaps: np.ndarray
    action_probs: np.ndarray
    object_probs: np.ndarray

    def __len__(self) -> int:
        return self.heatmaps.shape[0]


class Predictor(Protocol):
    def predict(self, ego: torch.Tensor, exo: Optional[torch.Tensor] = None) -> PredictionBatch:
        ...


# ==================== Reports ====================

class MetricRow(BaseModel):
    sample_id: str
    action_id: int
    object_id: int
    pred_action_id: int
    pred_object_id: int
    KLD: float
    SIM: float
    NSS: float


class MetricReport(BaseModel):
    n_samples: int
    aggregates: Dict[str, float] = Field(..., description="Mean/std of each heatmap metric plus T_a@k / T_o@k")
    rows: List[MetricRow] = Field(default_factory=list)

    def to_json(self) -> str:
        return self.model_dump_json(indent=2)

    def table(self) -> str:
        width = max(len(name) for name in self.aggregates)
        lines = [f"{'metric':<{width}}  value", f"{'-' * width}  --------"]
        lines += [f"{name:<{width}}  {value:.4f}" for name, value in self.aggregates.items()]
        lines.append(f"{'samples':<{width}}  {self.n_samples}")
        return "\n".join(lines)

    def write(self, out_dir: Union[str, Path]) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "metrics.json"
        path.write_text(self.to_json(), encoding="utf-8")
        (out_dir / "metrics.txt").write_text(self.table() + "\n", encoding="utf-8")
        logger.info(f"📊 Metric report written to {path}")
        return path


def _aggregate(values: List[float]) -> Tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _topk_entries(probs: np.ndarray, k: int, labels: Optional[Sequence[str]]) -> List[List[Any]]:
    order = np.argsort(-probs, kind="stable")[:k]
    return [[labels[i] if labels is not None else int(i), round(float(probs[i]), 6)] for i in order]


def _loader(samples: Sequence[Sample], image_size: int, batch_size: int, with_exo: bool, k_exo: int, seed: int):
    dataset = SEADataset(samples, image_size, k_exo=k_exo, seed=seed, with_exo=with_exo)
    return DataLoader(dataset, batch_size=batch_size, shuffle=False, collate_fn=collate_samples)


def evaluate_split(
    model: Predictor,
    samples: Sequence[Sample],
    cfg: MetricsConfig,
    image_size: int,
    batch_size: int = 16,
    export_dir: Optional[Union[str, Path]] = None,
    vocab_pair: Optional[VocabPair] = None,
) -> MetricReport:
    """Ego-only inference over test samples; heatmaps come from each sample's top-1 (action, object)"""
    if not samples:
        raise InputError("evaluate_split needs at least one sample")
    missing = [s.sample_id for s in samples if s.gt_path is None]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise SchemaError(f"{len(missing)} sample(s) have no GT heatmap: {shown}")
    if hasattr(model, "eval"):
        model.eval()

    rows: List[MetricRow] = []
    ranked: List[RankedPrediction] = []
    predictions: List[Dict[str, Any]] = []
    arrays: Dict[str, np.ndarray] = {}
    action_labels = vocab_pair[0].labels if vocab_pair is not None else None
    object_labels = vocab_pair[1].labels if vocab_pair is not None else None
    export_dir = Path(export_dir) if export_dir is not None else None

    for batch in _loader(samples, image_size, batch_size, with_exo=False, k_exo=1, seed=0):
        out = model.predict(batch["ego"])
        for j, sample_id in enumerate(batch["sample_id"]):
            gt = batch["gt"][j]
            heat = out.heatmaps[j]
            rank = RankedPrediction.from_probs(out.action_probs[j], out.object_probs[j])
            ranked.append(rank)
            rows.append(MetricRow(
                sample_id=sample_id,
                action_id=int(batch["action_id"][j]),
                object_id=int(batch["object_id"][j]),
                pred_action_id=rank.action_ranking[0],
                pred_object_id=rank.object_ranking[0],
                KLD=kld(heat, gt, cfg.epsilon),
                SIM=sim(heat, gt),
                NSS=nss(heat, gt),
            ))
            if export_dir is not None:
                index = len(rows) - 1
                rel = Path("heatmaps") / f"{index:05d}.png"
                save_heatmap_png(resize_heatmap(heat, gt.shape), export_dir / rel)
                arrays[f"{index:05d}"] = np.asarray(heat, dtype=np.float32)
                predictions.append({
                    "id": sample_id,
                    "action_topk": _topk_entries(out.action_probs[j], max(cfg.topk), action_labels),
                    "object_topk": _topk_entries(out.object_probs[j], max(cfg.topk), object_labels),
                    "heatmap_path": rel.as_posix(),
                    "heatmap_npz": HEATMAP_ARRAYS,
                    "heatmap_key": f"{index:05d}",
                })

    aggregates: Dict[str, float] = {}
    for name in HEATMAP_METRICS:
        mean, std = _aggregate([getattr(r, name) for r in rows])
        aggregates[f"{name}_mean"] = mean
        aggregates[f"{name}_std"] = std
    action_ids = [r.action_id for r in rows]
    object_ids = [r.object_id for r in rows]
    for kind, labels in (("action", action_ids), ("object", object_ids)):
        for k in cfg.topk:
            aggregates[metric_name(kind, k)] = topk_accuracy(ranked, labels, k, kind)

    report = MetricReport(n_samples=len(rows), aggregates=aggregates, rows=rows)
    logger.info(
        f"Evaluated {report.n_samples} samples: KLD={aggregates['KLD_mean']:.4f} "
        f"SIM={aggregates['SIM_mean']:.4f} NSS={aggregates['NSS_mean']:.4f}"
    )

    if export_dir is not None:
        export_dir.mkdir(parents=True, exist_ok=True)
        with open(export_dir / "predictions.jsonl", "w", encoding="utf-8") as fh:
            for record in predictions:
                fh.write(json.dumps(record, ensure_ascii=False) + "\n")
        np.savez_compressed(export_dir / HEATMAP_ARRAYS, **arrays)
    return report


def evaluate_classification(
    model: Predictor,
    samples: Sequence[Sample],
    image_size: int,
    topk: Sequence[int] = (1, 5),
    k_exo: int = 3,
    seed: int = 0,
    batch_size: int = 16,
    with_exo: bool = True,
) -> Dict[str, float]:
    """T_a@k / T_o@k on samples that may lack GT (e.g. the train split), exocentric views drawn at `seed`"""
    if not samples:
        raise InputError("evaluate_classification needs at least one sample")
    if hasattr(model, "eval"):
        model.eval()
    ranked: List[RankedPrediction] = []
    action_ids: List[int] = []
    object_ids: List[int] = []
    for batch in _loader(samples, image_size, batch_size, with_exo=with_exo, k_exo=k_exo, seed=seed):
        out = model.predict(batch["ego"], batch.get("exo"))
        for j in range(len(out)):
            ranked.append(RankedPrediction.from_probs(out.action_probs[j], out.object_probs[j]))
        action_ids += batch["action_id"].tolist()
        object_ids += batch["object_id"].tolist()
    scores = {}
    for kind, labels in (("action", action_ids), ("object", object_ids)):
        for k in topk:
            scores[metric_name(kind, k)] = topk_accuracy(ranked, labels, k, kind)
    return scores
