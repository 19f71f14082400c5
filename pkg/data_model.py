"""
SEA dataset schema, AGD20K-layout loader and offline synthetic generator.

Layout (relative to the dataset root):

    <Seen|Unseen>/trainset/exocentric/<action>/<object>/*.jpg
    <Seen|Unseen>/trainset/egocentric/<action>/<object>/*.jpg
    <Seen|Unseen>/testset/egocentric/<action>/<object>/*.jpg
    <Seen|Unseen>/testset/GT/<action>/<object>/*.png
    annotations.jsonl
    actions.txt / objects.txt
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from torch.utils.data import Dataset

from config import CAPTION_STYLES, SyntheticConfig, settings
from errors import ConfigError, DataError, InputError, LoadError, SchemaError
from logger import setup_logger
from utils import image_to_tensor, read_heatmap, read_rgb, save_heatmap_png, stable_seed

logger = setup_logger(__name__, settings.LOG_LEVEL)

Split = Literal["train", "test"]
Setting = Literal["seen", "unseen"]

ANNOTATION_FILE = "annotations.jsonl"
MANIFEST_FILE = "manifest.json"
ACTIONS_FILE = "actions.txt"
OBJECTS_FILE = "objects.txt"

_SPLIT_DIRS = {"train": "trainset", "test": "testset"}


def setting_dir(setting: str) -> str:
    return setting.capitalize()


# ==================== Vocabulary ====================

@dataclass(frozen=True)
class Vocabulary:
    """Closed label space with contiguous ids starting at 0"""

    kind: Literal["action", "object"]
    labels: Tuple[str, ...]
    _index: Dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = tuple(self.labels)
        object.__setattr__(self, "labels", labels)
        if not labels:
            raise SchemaError(f"{self.kind} vocabulary is empty")
        for label in labels:
            if not label or label != label.strip():
                raise SchemaError(f"{self.kind} vocabulary has a blank or padded label: {label!r}")
            if label != label.lower():
                raise SchemaError(f"{self.kind} vocabulary label must be lowercase: {label!r}")
        if len(set(labels)) != len(labels):
            raise SchemaError(f"{self.kind} vocabulary has duplicate labels")
        object.__setattr__(self, "_index", {label: i for i, label in enumerate(labels)})

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self._index

    def id_of(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise SchemaError(f"'{label}' is not in the {self.kind} vocabulary") from None

    def label_of(self, idx: int) -> str:
        return self.labels[idx]

    @classmethod
    def from_file(cls, path: Union[str, Path], kind: Literal["action", "object"]) -> "Vocabulary":
        path = Path(path)
        if not path.exists():
            raise LoadError(f"Vocabulary file not found: {path}")
        lines = [line.strip() for line in path.read_text(encoding="utf-8").splitlines()]
        return cls(kind=kind, labels=tuple(line for line in lines if line))

    def to_file(self, path: Union[str, Path]) -> None:
        Path(path).write_text("\n".join(self.labels) + "\n", encoding="utf-8")


VocabPair = Tuple[Vocabulary, Vocabulary]


def load_vocabularies(root: Union[str, Path]) -> VocabPair:
    root = Path(root)
    return Vocabulary.from_file(root / ACTIONS_FILE, "action"), Vocabulary.from_file(root / OBJECTS_FILE, "object")


# ==================== Records & samples ====================

class AnnotationRecord(BaseModel):
    """One line of annotations.jsonl"""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    image_path: str = Field(..., alias="image", description="Image path relative to the dataset root")
    view: Literal["exocentric", "egocentric"]
    action: str
    object_label: str = Field(..., alias="object")
    caption: str
    split: Split
    setting: Setting

    def validate_against(self, vocab_pair: VocabPair, line_no: Optional[int] = None) -> None:
        where = f"record {self.image_path}" + (f" (line {line_no})" if line_no is not None else "")
        actions, objects = vocab_pair
        if self.action not in actions:
            raise SchemaError(f"{where}: action '{self.action}' is not in the action vocabulary")
        if self.object_label not in objects:
            raise SchemaError(f"{where}: object '{self.object_label}' is not in the object vocabulary")
        lowered = self.caption.lower()
        if self.action.lower() not in lowered or self.object_label.lower() not in lowered:
            raise SchemaError(f"{where}: caption '{self.caption}' does not mention both action and object")

    def to_json_line(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), ensure_ascii=False)


@dataclass(frozen=True)
class Sample:
    """One egocentric image with its labels, caption and exocentric pool"""

    sample_id: str
    ego_path: Path
    exo_paths: Tuple[Path, ...]
    action_id: int
    object_id: int
    caption: str
    split: str
    setting: str
    gt_path: Optional[Path] = None

    @property
    def pair(self) -> Tuple[int, int]:
        return self.action_id, self.object_id

    @property
    def ego_image(self) -> np.ndarray:
        return read_rgb(self.ego_path)

    @property
    def exo_images(self) -> List[np.ndarray]:
        return [read_rgb(p) for p in self.exo_paths]

    @property
    def gt_heatmap(self) -> Optional[np.ndarray]:
        return read_heatmap(self.gt_path) if self.gt_path is not None else None


def _read_annotations(path: Path) -> List[Tuple[int, AnnotationRecord]]:
    if not path.exists():
        raise LoadError(f"Annotation file not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append((line_no, AnnotationRecord.model_validate(json.loads(line))))
            except json.JSONDecodeError as e:
                raise LoadError(f"{path}:{line_no} is not valid JSON: {e}") from e
            except ValidationError as e:
                raise SchemaError(f"{path}:{line_no} does not match the annotation schema: {e}") from e
    return records


def gt_path_for(root: Path, record: AnnotationRecord) -> Path:
    stem = Path(record.image_path).stem
    return root / setting_dir(record.setting) / "testset" / "GT" / record.action / record.object_label / f"{stem}.png"


def load_dataset(root: Union[str, Path], setting: Setting, split: Split, vocab_pair: VocabPair) -> List[Sample]:
    """Load every egocentric sample of one split; exocentric train records form the per-pair pools"""
    root = Path(root)
    if not root.is_dir():
        raise LoadError(f"Dataset root does not exist: {root}")
    records = _read_annotations(root / ANNOTATION_FILE)
    actions, objects = vocab_pair

    pools: Dict[Tuple[str, str], List[Path]] = {}
    for line_no, rec in records:
        if rec.setting != setting or rec.view != "exocentric" or rec.split != "train":
            continue
        rec.validate_against(vocab_pair, line_no)
        pools.setdefault((rec.action, rec.object_label), []).append(root / rec.image_path)

    samples: List[Sample] = []
    for line_no, rec in records:
        if rec.setting != setting or rec.split != split or rec.view != "egocentric":
            continue
        rec.validate_against(vocab_pair, line_no)
        ego_path = root / rec.image_path
        if not ego_path.exists():
            raise LoadError(f"record {rec.image_path} (line {line_no}): image file missing")

        gt_path = None
        if split == "test":
            gt_path = gt_path_for(root, rec)
            if not gt_path.exists():
                raise SchemaError(f"record {rec.image_path} (line {line_no}): test sample has no GT heatmap at {gt_path}")
            if float(read_heatmap(gt_path).max()) <= 0.0:
                raise SchemaError(f"record {rec.image_path} (line {line_no}): GT heatmap is all zeros")

        pool = tuple(pools.get((rec.action, rec.object_label), ()))
        if split == "train" and not pool:
            logger.warning(f"No exocentric images for pair ({rec.action}, {rec.object_label})")

        samples.append(Sample(
            sample_id=rec.image_path,
            ego_path=ego_path,
            exo_paths=pool,
            action_id=actions.id_of(rec.action),
            object_id=objects.id_of(rec.object_label),
            caption=rec.caption,
            split=split,
            setting=setting,
            gt_path=gt_path,
        ))

    if not samples:
        raise LoadError(f"No {setting}/{split} samples found under {root}")

    logger.info(f"Loaded {len(samples)} {setting}/{split} samples from {root} ({len(pools)} exocentric pools)")
    return samples


class SplitSummary(BaseModel):
    setting: Setting
    split: Split
    captions: int = Field(..., description="Annotation records (both views) in the split")
    samples: int = Field(..., description="Egocentric samples in the split")
    n_actions: int
    n_objects: int


def summarize_split(root: Union[str, Path], setting: Setting, split: Split) -> SplitSummary:
    """Caption / sample / vocabulary counts for one split, as reported in the dataset statistics"""
    records = [rec for _, rec in _read_annotations(Path(root) / ANNOTATION_FILE)
               if rec.setting == setting and rec.split == split]
    return SplitSummary(
        setting=setting,
        split=split,
        captions=len(records),
        samples=sum(1 for rec in records if rec.view == "egocentric"),
        n_actions=len({rec.action for rec in records}),
        n_objects=len({rec.object_label for rec in records}),
    )


# ==================== Exocentric sampling ====================

def draw_exocentric_paths(sample: Sample, k: int, rng_seed: int) -> List[Path]:
    if k < 1:
        raise InputError(f"k must be a positive integer, got {k}")
    pool = sample.exo_paths
    if not pool:
        raise DataError(f"Empty exocentric pool for pair (action_id={sample.action_id}, object_id={sample.object_id})")
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(len(pool), size=k, replace=len(pool) < k)
    return [pool[int(i)] for i in idx]


def sample_exocentrics(sample: Sample, k: int, rng_seed: int) -> List[np.ndarray]:
    """k rasters from the sample's (action, object) pool; with replacement only when the pool is smaller than k"""
    return [read_rgb(p) for p in draw_exocentric_paths(sample, k, rng_seed)]


# ==================== Torch dataset ====================

def resize_image(image: torch.Tensor, size: int) -> torch.Tensor:
    """3×h×w (or N×3×h×w) -> same with spatial size×size, bilinear"""
    squeeze = image.dim() == 3
    batch = image.unsqueeze(0) if squeeze else image
    if batch.shape[-2:] != (size, size):
        batch = F.interpolate(batch, size=(size, size), mode="bilinear", align_corners=False)
    return batch.squeeze(0) if squeeze else batch


class SEADataset(Dataset):
    """Samples -> tensors; exocentric views are re-drawn each epoch from (seed, epoch, index)"""

    def __init__(
        self,
        samples: Sequence[Sample],
        image_size: int,
        k_exo: int = 3,
        seed: int = 0,
        with_exo: bool = True,
        hflip: bool = False,
    ):
        self.samples = list(samples)
        self.image_size = image_size
        self.k_exo = k_exo
        self.seed = seed
        self.with_exo = with_exo
        self.hflip = hflip
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> Dict[str, Any]:
        sample = self.samples[idx]
        ego = resize_image(image_to_tensor(sample.ego_image), self.image_size)
        item: Dict[str, Any] = {
            "ego": ego,
            "action_id": sample.action_id,
            "object_id": sample.object_id,
            "index": idx,
            "sample_id": sample.sample_id,
            "gt": sample.gt_heatmap,
        }
        if self.with_exo:
            paths = draw_exocentric_paths(sample, self.k_exo, stable_seed(self.seed, self.epoch, idx))
            item["exo"] = torch.stack([resize_image(image_to_tensor(read_rgb(p)), self.image_size) for p in paths])
        if self.hflip and np.random.default_rng(stable_seed(self.seed, self.epoch, idx, "flip")).random() < 0.5:
            item["ego"] = item["ego"].flip(-1)
            if "exo" in item:
                item["exo"] = item["exo"].flip(-1)
        return item


def collate_samples(items: List[Dict[str, Any]]) -> Dict[str, Any]:
    batch: Dict[str, Any] = {
        "ego": torch.stack([it["ego"] for it in items]),
        "action_id": torch.tensor([it["action_id"] for it in items], dtype=torch.long),
        "object_id": torch.tensor([it["object_id"] for it in items], dtype=torch.long),
        "index": torch.tensor([it["index"] for it in items], dtype=torch.long),
        "sample_id": [it["sample_id"] for it in items],
        "gt": [it["gt"] for it in items],
    }
    if all("exo" in it for it in items):
        batch["exo"] = torch.stack([it["exo"] for it in items])
    return batch


# ==================== Synthetic generator ====================

ACTION_NAMES = ["hold", "push", "lift", "cut", "open", "pour", "kick", "throw", "ride"]
SHAPE_NAMES = ["circle", "square", "triangle", "diamond", "cross", "ring", "bar", "star"]

# (row, col) fractions; an action fixes where its shape sits
ANCHORS = [
    (0.28, 0.28), (0.28, 0.72), (0.72, 0.28), (0.72, 0.72), (0.5, 0.5),
    (0.28, 0.5), (0.72, 0.5), (0.5, 0.28), (0.5, 0.72),
]

_PALETTE = [
    (200, 40, 40), (40, 90, 200), (30, 150, 60), (150, 60, 170),
    (220, 140, 20), (20, 160, 170), (120, 80, 40), (90, 90, 90),
]
_HAND_COLOR = (224, 172, 105)


class DatasetManifest(BaseModel):
    setting: Setting
    actions: List[str]
    objects: List[str]
    train_objects: List[str]
    test_objects: List[str]
    pairs: List[Tuple[str, str]]
    n_records: int
    n_samples: Dict[str, int]
    annotations_sha256: str
    boxes: Dict[str, Tuple[int, int, int, int]] = Field(
        default_factory=dict, description="Shape bounding box (x0, y0, x1, y1) per egocentric image"
    )


def _check_synthetic_config(cfg: SyntheticConfig) -> None:
    problems = []
    if cfg.n_actions < 2 or cfg.n_objects < 2:
        problems.append("n_actions and n_objects must both be >= 2")
    if cfg.n_actions > len(ACTION_NAMES):
        problems.append(f"n_actions > {len(ACTION_NAMES)} anchor positions")
    if cfg.n_objects > len(SHAPE_NAMES):
        problems.append(f"n_objects > {len(SHAPE_NAMES)} shape types")
    if cfg.samples_per_pair < 1 or cfg.k_exo < 1:
        problems.append("samples_per_pair and k_exo must be positive")
    if min(cfg.image_size) < 16:
        problems.append("image_size must be at least 16x16")
    if cfg.blob_sigma <= 0:
        problems.append("blob_sigma must be positive")
    if cfg.setting == "unseen" and not 1 <= cfg.n_unseen_objects < cfg.n_objects:
        problems.append("n_unseen_objects must be in [1, n_objects) for the unseen setting")
    if problems:
        raise ConfigError("Invalid synthetic config: " + "; ".join(problems))


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    base = int(rng.integers(200, 236))
    noise = rng.integers(-8, 9, size=(h, w, 1))
    return np.clip(base + noise, 0, 255).repeat(3, axis=2).astype(np.uint8)


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: int, cy: int, r: int, color: Tuple[int, int, int]) -> None:
    box = [cx - r, cy - r, cx + r, cy + r]
    if shape == "circle":
        draw.ellipse(box, fill=color)
    elif shape == "square":
        draw.rectangle(box, fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx + r, cy + r), (cx - r, cy + r)], fill=color)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
    elif shape == "cross":
        t = max(1, r // 3)
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
    elif shape == "ring":
        draw.ellipse(box, outline=color, width=max(2, r // 3))
        draw.ellipse([cx - 1, cy - 1, cx + 1, cy + 1], fill=color)
    elif shape == "bar":
        draw.rectangle([cx - r, cy - max(1, r // 3), cx + r, cy + max(1, r // 3)], fill=color)
    elif shape == "star":
        points = []
        for i in range(10):
            radius = r if i % 2 == 0 else r * 0.45
            angle = np.pi / 2 + i * np.pi / 5
            points.append((cx + radius * np.cos(angle), cy - radius * np.sin(angle)))
        draw.polygon(points, fill=color)
    else:
        raise ConfigError(f"Unknown shape '{shape}'")


def _render(
    rng: np.random.Generator,
    size: Tuple[int, int],
    action_idx: int,
    object_idx: int,
    with_hand: bool,
) -> Tuple[Image.Image, Tuple[int, int], Tuple[int, int, int, int]]:
    h, w = size
    r = max(3, int(round(min(h, w) * 0.12)))
    jitter = max(1, int(round(min(h, w) * 0.03)))
    fy, fx = ANCHORS[action_idx]
    cy = int(round(fy * (h - 1))) + int(rng.integers(-jitter, jitter + 1))
    cx = int(round(fx * (w - 1))) + int(rng.integers(-jitter, jitter + 1))
    cy = min(max(cy, r), h - 1 - r)
    cx = min(max(cx, r), w - 1 - r)

    color = tuple(int(np.clip(c + rng.integers(-12, 13), 0, 255)) for c in _PALETTE[object_idx])
    img = Image.fromarray(_background(rng, h, w))
    draw = ImageDraw.Draw(img)
    _draw_shape(draw, SHAPE_NAMES[object_idx], cx, cy, r, color)
    if with_hand:
        half = max(2, r // 2)
        draw.rectangle([cx - half, cy, cx + half, h - 1], fill=_HAND_COLOR)
    return img, (cy, cx), (cx - r, cy - r, cx + r, cy + r)


def gaussian_blob(size: Tuple[int, int], center: Tuple[int, int], sigma: float) -> np.ndarray:
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    blob = np.exp(-((yy - center[0]) ** 2 + (xx - center[1]) ** 2) / (2.0 * sigma ** 2))
    return (blob - blob.min()) / (blob.max() - blob.min())


def generate_synthetic(
    cfg: SyntheticConfig,
    out_root: Union[str, Path],
    caption_styles: Sequence[str] = CAPTION_STYLES,
) -> DatasetManifest:
    """Write a reproducible dataset in the canonical layout; same config -> same files"""
    _check_synthetic_config(cfg)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)

    actions = ACTION_NAMES[:cfg.n_actions]
    objects = SHAPE_NAMES[:cfg.n_objects]
    if cfg.setting == "unseen":
        train_objects, test_objects = objects[:-cfg.n_unseen_objects], objects[-cfg.n_unseen_objects:]
    else:
        train_objects, test_objects = list(objects), list(objects)

    Vocabulary("action", tuple(actions)).to_file(out_root / ACTIONS_FILE)
    Vocabulary("object", tuple(objects)).to_file(out_root / OBJECTS_FILE)

    sdir = setting_dir(cfg.setting)
    records: List[AnnotationRecord] = []
    boxes: Dict[str, Tuple[int, int, int, int]] = {}
    pairs: List[Tuple[str, str]] = []

    def caption_for(rng: np.random.Generator, action: str, obj: str) -> str:
        style = caption_styles[int(rng.integers(len(caption_styles)))]
        return style.replace("[action]", action).replace("[object]", obj)

    for split, split_objects in (("train", train_objects), ("test", test_objects)):
        for a_idx, action in enumerate(actions):
            for obj in split_objects:
                o_idx = objects.index(obj)
                if split == "train":
                    pairs.append((action, obj))
                for i in range(cfg.samples_per_pair):
                    rng = np.random.default_rng(stable_seed(cfg.seed, split, action, obj, "ego", i))
                    img, center, box = _render(rng, cfg.image_size, a_idx, o_idx, with_hand=False)
                    rel = Path(sdir) / _SPLIT_DIRS[split] / "egocentric" / action / obj / f"{action}_{obj}_{i:03d}.jpg"
                    (out_root / rel).parent.mkdir(parents=True, exist_ok=True)
                    img.save(out_root / rel, format="JPEG", quality=95)
                    boxes[rel.as_posix()] = box
                    record = AnnotationRecord(
                        image=rel.as_posix(), view="egocentric", action=action, object=obj,
                        caption=caption_for(rng, action, obj), split=split, setting=cfg.setting,
                    )
                    records.append(record)
                    if split == "test":
                        save_heatmap_png(gaussian_blob(cfg.image_size, center, cfg.blob_sigma), gt_path_for(out_root, record))

                if split != "train":
                    continue
                for j in range(cfg.k_exo):
                    rng = np.random.default_rng(stable_seed(cfg.seed, split, action, obj, "exo", j))
                    img, _, _ = _render(rng, cfg.image_size, a_idx, o_idx, with_hand=True)
                    rel = Path(sdir) / "trainset" / "exocentric" / action / obj / f"{action}_{obj}_exo_{j:03d}.jpg"
                    (out_root / rel).parent.mkdir(parents=True, exist_ok=True)
                    img.save(out_root / rel, format="JPEG", quality=95)
                    records.append(AnnotationRecord(
                        image=rel.as_posix(), view="exocentric", action=action, object=obj,
                        caption=caption_for(rng, action, obj), split=split, setting=cfg.setting,
                    ))

    payload = "".join(rec.to_json_line() + "\n" for rec in records).encode("utf-8")
    (out_root / ANNOTATION_FILE).write_bytes(payload)

    manifest = DatasetManifest(
        setting=cfg.setting,
        actions=list(actions),
        objects=list(objects),
        train_objects=list(train_objects),
        test_objects=list(test_objects),
        pairs=pairs,
        n_records=len(records),
        n_samples={
            split: sum(1 for r in records if r.split == split and r.view == "egocentric")
            for split in ("train", "test")
        },
        annotations_sha256=hashlib.sha256(payload).hexdigest(),
        boxes=boxes,
    )
    (out_root / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info(
        f"Synthetic dataset written to {out_root}: {manifest.n_records} records, "
        f"{len(pairs)} train pairs, annotations sha256={manifest.annotations_sha256[:12]}"
    )
    return manifest


def read_manifest(root: Union[str, Path]) -> DatasetManifest:
    path = Path(root) / MANIFEST_FILE
    if not path.exists():
        raise LoadError(f"Manifest not found: {path}")
    return DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
