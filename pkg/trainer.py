"""Weakly supervised training loop, checkpoints and resume."""

import json
import random
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, Field
from torch.utils.data import DataLoader
from tqdm import tqdm

from config import RunConfig, build_run_config, config_hash, settings
from data_model import Sample, SEADataset, VocabPair, Vocabulary, collate_samples
from errors import CheckpointError, ConfigError, InputError, TrainingAbort
from logger import setup_logger
from losses import (
    LossComponents,
    batch_similarity,
    classification_loss,
    contrastive_loss,
    cosine_margin_loss,
    match_matrix,
    prompt_pooled,
    prompt_similarity,
    total_loss,
)
from metrics import MetricReport, evaluate_classification, evaluate_split
from model import ModelOutput, SEAModel, build_model
from run_history import RunHistory
from utils import stable_seed

logger = setup_logger(__name__, settings.LOG_LEVEL)

CHECKPOINT_DIR = "checkpoints"


class CheckpointManifest(BaseModel):
    """Sidecar JSON written next to every .pt checkpoint"""

    name: str
    epoch: int
    global_step: int
    config: Dict[str, Any]
    config_hash: str
    actions: List[str]
    objects: List[str]
    encoder_checksum: str
    metrics: Optional[Dict[str, float]] = None
    created_at: str = Field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))


@dataclass
class FitResult:
    reports: List[MetricReport] = field(default_factory=list)
    epoch_history: List[Dict[str, Any]] = field(default_factory=list)
    best_checkpoint: Optional[Path] = None
    last_checkpoint: Optional[Path] = None
    train_accuracy: Dict[str, float] = field(default_factory=dict)

    @property
    def final_report(self) -> Optional[MetricReport]:
        return self.reports[-1] if self.reports else None


def _rng_state() -> Dict[str, Any]:
    return {"python": random.getstate(), "numpy": np.random.get_state(), "torch": torch.get_rng_state()}


def _set_rng_state(state: Dict[str, Any]) -> None:
    random.setstate(state["python"])
    np.random.set_state(state["numpy"])
    torch.set_rng_state(state["torch"])


def _sidecar(path: Path) -> Path:
    return path.with_suffix(".json")


def load_checkpoint(path: Union[str, Path], vocab_pair: Optional[VocabPair] = None) -> Tuple[Dict[str, Any], CheckpointManifest]:
    """Read a checkpoint and its sidecar; a vocabulary other than `vocab_pair` is rejected"""
    path = Path(path)
    if not path.exists() or not _sidecar(path).exists():
        raise CheckpointError(f"Checkpoint {path} or its sidecar {_sidecar(path).name} is missing")
    try:
        manifest = CheckpointManifest.model_validate_json(_sidecar(path).read_text(encoding="utf-8"))
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    if vocab_pair is not None:
        actions, objects = vocab_pair
        if list(actions.labels) != manifest.actions or list(objects.labels) != manifest.objects:
            raise CheckpointError(
                f"Checkpoint {path.name} was trained on a different vocabulary "
                f"({len(manifest.actions)} actions / {len(manifest.objects)} objects vs "
                f"{len(actions)} / {len(objects)} in the dataset)"
            )
    return payload, manifest


def restore_model(path: Union[str, Path], vocab_pair: Optional[VocabPair] = None, device: Optional[str] = None) -> SEAModel:
    """Rebuild the model recorded in a checkpoint's sidecar and load its trainable weights"""
    payload, manifest = load_checkpoint(path, vocab_pair)
    cfg = build_run_config(manifest.config)
    if vocab_pair is None:
        vocab_pair = (Vocabulary("action", tuple(manifest.actions)), Vocabulary("object", tuple(manifest.objects)))
    model = build_model(cfg, vocab_pair, device)
    model.load_trainable_state_dict(payload["model"])
    if model.encoders.checksum() != manifest.encoder_checksum:
        logger.warning(f"Encoder checksum differs from the one recorded in {Path(path).name}")
    model.eval()
    logger.info(f"✅ Restored model from {path} (epoch {manifest.epoch})")
    return model


class Trainer:

    def __init__(
        self,
        model: SEAModel,
        cfg: RunConfig,
        run_dir: Union[str, Path],
        history: Optional[RunHistory] = None,
        run_id: Optional[str] = None,
    ):
        if cfg.loss.weights.all_zero():
            raise ConfigError("loss.weights are all zero, nothing to optimize")
        if cfg.train.eval_every < 1:
            raise ConfigError(f"train.eval_every must be >= 1, got {cfg.train.eval_every}")

        self.model = model
        self.cfg = cfg
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.ckpt_dir = self.run_dir / CHECKPOINT_DIR
        self.history = history or RunHistory(self.run_dir / "history.db")
        self.run_id = run_id or self.run_dir.name
        self.history.create_run(self.run_id, config_hash(cfg), {"variant": cfg.model.explain.variant})

        tc = cfg.train
        self.optimizer = torch.optim.SGD(
            model.trainable_parameters(), lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay
        )
        self.scheduler = None
        if tc.schedule == "cosine":
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=max(1, tc.epochs))

        self.encoder_checksum = model.encoders.checksum()
        self.epoch = 0
        self.global_step = 0
        self.best_kld: Optional[float] = None

    # ==================== Step ====================

    def _device_batch(self, batch: Dict[str, Any]) -> Dict[str, Any]:
        device = self.model.device
        return {k: v.to(device) if torch.is_tensor(v) else v for k, v in batch.items()}

    def loss_components(self, out: ModelOutput, action_ids: torch.Tensor, object_ids: torch.Tensor) -> LossComponents:
        lc = self.cfg.loss
        if lc.contrastive_pooling == "per_prompt" and out.ego_feats is not None:
            con = self._per_prompt_contrast(out)
        else:
            q = match_matrix(out.prompts).to(out.text.device)
            con = contrastive_loss(batch_similarity(out.ego_pooled.vector, out.text, lc.tau), q, lc.eps)
            if lc.contrastive_include_exo and out.exo_pooled is not None:
                con_exo = contrastive_loss(batch_similarity(out.exo_pooled.vector, out.text, lc.tau), q, lc.eps)
                con = 0.5 * (con + con_exo)
        return LossComponents(
            cos=cosine_margin_loss(out.exo_pooled, out.ego_pooled, lc.alpha),
            con=con,
            ce_action=classification_loss(out.explain.action_logits, action_ids),
            ce_object=classification_loss(out.explain.object_logits, object_ids),
        )

    def _per_prompt_contrast(self, out: ModelOutput) -> torch.Tensor:
        """Every image pooled under every distinct batch prompt; one matching column per row"""
        lc = self.cfg.loss
        keys = list(dict.fromkeys(out.prompts))
        texts = out.text[[out.prompts.index(key) for key in keys]]
        q = match_matrix(out.prompts, keys).to(out.text.device)
        size = self.cfg.encoder.image_size
        visual = prompt_pooled(out.ego_feats, texts, self.cfg.affordance, size)
        con = contrastive_loss(prompt_similarity(visual, texts, lc.tau), q, lc.eps)
        if lc.contrastive_include_exo and out.exo_feats is not None:
            visual_exo = prompt_pooled(out.exo_feats, texts, self.cfg.affordance, size, group=out.k)
            con = 0.5 * (con + contrastive_loss(prompt_similarity(visual_exo, texts, lc.tau), q, lc.eps))
        return con

    def _abort(self, batch: Dict[str, Any], losses: Dict[str, float]) -> None:
        dump = self.run_dir / f"abort_step{self.global_step:06d}.json"
        dump.write_text(json.dumps({
            "epoch": self.epoch,
            "step": self.global_step,
            "sample_ids": list(batch["sample_id"]),
            "losses": {k: repr(v) for k, v in losses.items()},
        }, indent=2), encoding="utf-8")
        logger.error(f"❌ Non-finite loss at step {self.global_step}: {losses} (batch ids dumped to {dump})")
        raise TrainingAbort(
            f"non-finite loss at step {self.global_step}", sample_ids=list(batch["sample_id"]), dump_path=dump
        )

    def train_step(self, batch: Dict[str, Any]) -> Dict[str, float]:
        """One SGD update of the trainable parameters; returns every loss component and the total"""
        if "exo" not in batch:
            raise InputError("training batches need exocentric views")
        self.model.train()
        batch = self._device_batch(batch)
        out = self.model(batch["ego"], batch["exo"], batch["action_id"], batch["object_id"])
        components = self.loss_components(out, batch["action_id"], batch["object_id"])
        total = total_loss(components, self.cfg.loss.weights)
        losses = {"total": float(total.detach()), **components.as_dict()}
        if not (torch.isfinite(total) and components.is_finite()):
            self._abort(batch, losses)

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        if self.cfg.train.grad_clip is not None:
            torch.nn.utils.clip_grad_norm_(self.model.trainable_parameters(), self.cfg.train.grad_clip)
        self.optimizer.step()

        self.global_step += 1
        lr = self.optimizer.param_groups[0]["lr"]
        self.history.log_step(self.run_id, self.epoch, self.global_step, losses, lr)
        if self.global_step % self.cfg.train.log_every == 0:
            logger.info(
                f"step {self.global_step} (epoch {self.epoch + 1}): total={losses['total']:.4f} "
                f"cos={losses['cos']:.4f} con={losses['con']:.4f} "
                f"ce_a={losses['ce_action']:.4f} ce_o={losses['ce_object']:.4f}"
            )
        return losses

    def check_frozen(self) -> None:
        if self.model.encoders.checksum() != self.encoder_checksum:
            raise TrainingAbort("frozen encoder parameters changed during training")

    # ==================== Fit ====================

    def _loader(self, dataset: SEADataset, epoch: int) -> DataLoader:
        dataset.set_epoch(epoch)
        generator = torch.Generator().manual_seed(stable_seed(self.cfg.train.seed, "shuffle", epoch))
        return DataLoader(
            dataset,
            batch_size=self.cfg.train.batch_size,
            shuffle=True,
            generator=generator,
            collate_fn=collate_samples,
            num_workers=self.cfg.data.num_workers,
        )

    def evaluate(self, samples: Sequence[Sample], export_dir: Optional[Path] = None) -> MetricReport:
        return evaluate_split(
            self.model,
            samples,
            self.cfg.metrics,
            self.cfg.encoder.image_size,
            batch_size=self.cfg.train.batch_size,
            export_dir=export_dir,
            vocab_pair=self.model.vocab_pair,
        )

    def train_accuracy(self, samples: Sequence[Sample]) -> Dict[str, float]:
        """Top-k accuracy on training samples in eval mode, exocentric views drawn at the run seed"""
        return evaluate_classification(
            self.model,
            samples,
            self.cfg.encoder.image_size,
            topk=self.cfg.metrics.topk,
            k_exo=self.cfg.train.k_exo,
            seed=stable_seed(self.cfg.train.seed, "eval"),
            batch_size=self.cfg.train.batch_size,
        )

    def fit(
        self,
        train_samples: Sequence[Sample],
        eval_samples: Optional[Sequence[Sample]] = None,
        resume_from: Optional[Union[str, Path]] = None,
    ) -> FitResult:
        tc = self.cfg.train
        if not train_samples:
            raise InputError("fit needs at least one training sample")
        if resume_from is not None:
            self.resume(resume_from)

        dataset = SEADataset(
            train_samples, self.cfg.encoder.image_size, k_exo=tc.k_exo, seed=tc.seed, hflip=self.cfg.data.hflip
        )
        result = FitResult()
        report: Optional[MetricReport] = None
        start = self.epoch
        logger.info(f"🚀 Training {len(train_samples)} samples for epochs {start + 1}..{tc.epochs} (run {self.run_id})")

        try:
            for epoch in range(start, tc.epochs):
                self.epoch = epoch
                for batch in tqdm(self._loader(dataset, epoch), desc=f"epoch {epoch + 1}/{tc.epochs}", leave=False):
                    self.train_step(batch)
                if self.scheduler is not None:
                    self.scheduler.step()
                self.epoch = epoch + 1
                self.check_frozen()

                report = None
                if eval_samples and (self.epoch % tc.eval_every == 0 or self.epoch == tc.epochs):
                    report = self.evaluate(eval_samples)
                    result.reports.append(report)
                    self.history.log_evaluation(self.run_id, self.epoch, "test", report.aggregates)
                    kld_mean = report.aggregates["KLD_mean"]
                    if self.best_kld is None or kld_mean < self.best_kld:
                        self.best_kld = kld_mean
                        result.best_checkpoint = self.save_checkpoint("best", report)
                result.last_checkpoint = self.save_checkpoint("last", report)
        except TrainingAbort:
            self.save_checkpoint("aborted", report)
            raise

        if eval_samples and not result.reports:
            # nothing left to train after a resume: re-evaluate the restored weights
            result.reports.append(self.evaluate(eval_samples))

        result.train_accuracy = self.train_accuracy(train_samples)
        self.history.log_evaluation(self.run_id, self.epoch, "train", result.train_accuracy)
        result.epoch_history = self.history.get_epoch_history(self.run_id)
        logger.info(f"🏁 Training finished at epoch {self.epoch}: train accuracy {result.train_accuracy}")
        return result

    # ==================== Checkpoints ====================

    def save_checkpoint(self, name: str, report: Optional[MetricReport] = None) -> Path:
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        path = self.ckpt_dir / f"{name}.pt"
        torch.save({
            "model": self.model.trainable_state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict() if self.scheduler is not None else None,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "best_kld": self.best_kld,
            "rng": _rng_state(),
        }, path)
        actions, objects = self.model.vocab_pair
        manifest = CheckpointManifest(
            name=name,
            epoch=self.epoch,
            global_step=self.global_step,
            config=self.cfg.model_dump(mode="json"),
            config_hash=config_hash(self.cfg),
            actions=list(actions.labels),
            objects=list(objects.labels),
            encoder_checksum=self.encoder_checksum,
            metrics=report.aggregates if report is not None else None,
        )
        _sidecar(path).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
        logger.info(f"💾 Checkpoint '{name}' saved at epoch {self.epoch} -> {path}")
        return path

    def resume(self, path: Union[str, Path]) -> int:
        """Restore parameters, optimizer, scheduler, RNG states and epoch; returns the epoch"""
        payload, manifest = load_checkpoint(path, self.model.vocab_pair)
        if manifest.config_hash != config_hash(self.cfg):
            logger.warning(f"Resuming from {Path(path).name} with a different run config")
        self.model.load_trainable_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        if self.scheduler is not None and payload.get("scheduler") is not None:
            self.scheduler.load_state_dict(payload["scheduler"])
        self.epoch = int(payload["epoch"])
        self.global_step = int(payload["global_step"])
        self.best_kld = payload.get("best_kld")
        _set_rng_state(payload["rng"])
        logger.info(f"Resumed from {path} at epoch {self.epoch}")
        return self.epoch
