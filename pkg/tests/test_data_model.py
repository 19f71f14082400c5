import json
import shutil

import numpy as np
import pytest
import torch

from config import SyntheticConfig
from data_model import (
    ANNOTATION_FILE,
    SEADataset,
    Sample,
    Vocabulary,
    collate_samples,
    gaussian_blob,
    generate_synthetic,
    load_dataset,
    load_vocabularies,
    read_manifest,
    sample_exocentrics,
    summarize_split,
)
from errors import ConfigError, DataError, InputError, LoadError, SchemaError


# ==================== Vocabulary ====================

def test_vocabulary_ids_are_contiguous():
    vocab = Vocabulary("action", ("hold", "push", "cut"))
    assert [vocab.id_of(x) for x in ("hold", "push", "cut")] == [0, 1, 2]
    assert vocab.label_of(2) == "cut"
    assert "push" in vocab and len(vocab) == 3


@pytest.mark.parametrize("labels", [("hold", "hold"), ("Hold",), (), (" hold",)])
def test_vocabulary_rejects_bad_labels(labels):
    with pytest.raises(SchemaError):
        Vocabulary("action", labels)


def test_unknown_label_raises_schema_error():
    with pytest.raises(SchemaError):
        Vocabulary("object", ("cup",)).id_of("drum")


def test_vocabulary_file_roundtrip(tmp_path):
    vocab = Vocabulary("object", ("cup", "drum"))
    vocab.to_file(tmp_path / "objects.txt")
    assert Vocabulary.from_file(tmp_path / "objects.txt", "object") == vocab


# ==================== Synthetic generator ====================

def test_generator_is_reproducible(tmp_path):
    cfg = SyntheticConfig(n_actions=2, n_objects=2, samples_per_pair=1, image_size=(32, 32), k_exo=1)
    a = generate_synthetic(cfg, tmp_path / "a")
    b = generate_synthetic(cfg, tmp_path / "b")
    assert a.annotations_sha256 == b.annotations_sha256
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.jpg"))
    assert first == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*.jpg"))
    for rel in first:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_generator_rejects_impossible_configs(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(n_actions=1), tmp_path)
    with pytest.raises(ConfigError):
        generate_synthetic(SyntheticConfig(n_objects=99), tmp_path)


def test_unseen_setting_holds_objects_out_of_training(tmp_path):
    cfg = SyntheticConfig(
        n_actions=2, n_objects=3, samples_per_pair=1, image_size=(32, 32), k_exo=1, setting="unseen"
    )
    manifest = generate_synthetic(cfg, tmp_path)
    assert set(manifest.train_objects).isdisjoint(manifest.test_objects)
    vocab_pair = load_vocabularies(tmp_path)
    train = load_dataset(tmp_path, "unseen", "train", vocab_pair)
    test = load_dataset(tmp_path, "unseen", "test", vocab_pair)
    held_out = {vocab_pair[1].id_of(o) for o in manifest.test_objects}
    assert all(s.object_id not in held_out for s in train)
    assert all(s.object_id in held_out for s in test)


def test_gaussian_blob_is_min_max_normalized():
    blob = gaussian_blob((16, 16), (4, 9), 2.0)
    assert blob.max() == pytest.approx(1.0)
    assert blob.min() == pytest.approx(0.0)
    assert np.unravel_index(blob.argmax(), blob.shape) == (4, 9)


def test_gt_peaks_inside_rendered_shape(synthetic_root, test_samples):
    manifest = read_manifest(synthetic_root)
    for sample in test_samples:
        x0, y0, x1, y1 = manifest.boxes[sample.sample_id]
        row, col = np.unravel_index(sample.gt_heatmap.argmax(), sample.gt_heatmap.shape)
        assert y0 <= row <= y1 and x0 <= col <= x1


# ==================== Loader ====================

def test_loader_counts(train_samples, test_samples, vocab_pair):
    assert len(vocab_pair[0]) == 3 and len(vocab_pair[1]) == 3
    assert len(train_samples) == 3 * 3 * 2
    assert len(test_samples) == 3 * 3 * 2
    assert all(len(s.exo_paths) == 2 for s in train_samples)
    assert all(s.gt_path is not None and s.gt_path.exists() for s in test_samples)


def test_captions_mention_their_labels(train_samples, vocab_pair):
    actions, objects = vocab_pair
    for s in train_samples:
        assert actions.label_of(s.action_id) in s.caption
        assert objects.label_of(s.object_id) in s.caption


def test_loaded_samples_reproduce_the_annotation_file(synthetic_root, vocab_pair, train_samples, test_samples):
    actions, objects = vocab_pair
    lines = (synthetic_root / ANNOTATION_FILE).read_text(encoding="utf-8").splitlines()
    records = [json.loads(line) for line in lines]
    loaded = {s.sample_id: s for s in [*train_samples, *test_samples]}
    ego = [r for r in records if r["view"] == "egocentric" and r["setting"] == "seen"]
    assert sorted(r["image"] for r in ego) == sorted(loaded)
    for r in ego:
        s = loaded[r["image"]]
        assert s.ego_path == synthetic_root / r["image"]
        assert (actions.label_of(s.action_id), objects.label_of(s.object_id)) == (r["action"], r["object"])
        assert (s.caption, s.split, s.setting) == (r["caption"], r["split"], r["setting"])
        if r["split"] == "test":
            assert s.gt_path is not None and s.gt_path.exists()
        else:
            assert s.gt_path is None
        pool = {
            synthetic_root / x["image"] for x in records
            if x["view"] == "exocentric" and x["split"] == "train" and (x["action"], x["object"]) == (r["action"], r["object"])
        }
        assert set(s.exo_paths) == pool


def test_summarize_split_counts_every_record(synthetic_root):
    summary = summarize_split(synthetic_root, "seen", "train")
    assert summary.samples == 18
    assert summary.captions == 18 + 3 * 3 * 2
    assert (summary.n_actions, summary.n_objects) == (3, 3)


def test_missing_annotation_file(tmp_path, vocab_pair):
    with pytest.raises(LoadError):
        load_dataset(tmp_path, "seen", "train", vocab_pair)


def test_missing_root(tmp_path, vocab_pair):
    with pytest.raises(LoadError):
        load_dataset(tmp_path / "nope", "seen", "train", vocab_pair)


@pytest.fixture
def dataset_copy(synthetic_root, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(synthetic_root, dst)
    return dst


def _rewrite_first(root, view, **changes):
    path = root / ANNOTATION_FILE
    lines = path.read_text(encoding="utf-8").splitlines()
    for i, line in enumerate(lines):
        record = json.loads(line)
        if record["view"] == view:
            record.update(changes)
            lines[i] = json.dumps(record)
            break
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_label_outside_vocabulary_names_the_record(dataset_copy, vocab_pair):
    _rewrite_first(dataset_copy, "egocentric", object="banana", caption="I will hold banana")
    with pytest.raises(SchemaError, match="banana"):
        load_dataset(dataset_copy, "seen", "train", vocab_pair)


def test_caption_must_mention_labels(dataset_copy, vocab_pair):
    _rewrite_first(dataset_copy, "egocentric", caption="I will do something")
    with pytest.raises(SchemaError):
        load_dataset(dataset_copy, "seen", "train", vocab_pair)


def test_missing_gt_is_a_schema_error(dataset_copy, vocab_pair, test_samples):
    victim = test_samples[0]
    (dataset_copy / victim.gt_path.relative_to(victim.gt_path.parents[5])).unlink()
    with pytest.raises(SchemaError, match="GT"):
        load_dataset(dataset_copy, "seen", "test", vocab_pair)


# ==================== Exocentric sampling ====================

def test_sample_exocentrics_draws_k(train_samples):
    sample = train_samples[0]
    images = sample_exocentrics(sample, 2, rng_seed=3)
    assert len(images) == 2
    assert all(img.dtype == np.uint8 and img.shape[2] == 3 for img in images)


def test_small_pool_is_sampled_with_replacement(train_samples):
    assert len(sample_exocentrics(train_samples[0], 5, rng_seed=0)) == 5


def test_exocentric_draw_is_seeded(train_samples):
    a = sample_exocentrics(train_samples[0], 3, rng_seed=11)
    b = sample_exocentrics(train_samples[0], 3, rng_seed=11)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_bad_k_and_empty_pool(train_samples):
    with pytest.raises(InputError):
        sample_exocentrics(train_samples[0], 0, rng_seed=0)
    lonely = Sample(
        sample_id="x", ego_path=train_samples[0].ego_path, exo_paths=(), action_id=0, object_id=0,
        caption="I will hold circle", split="train", setting="seen",
    )
    with pytest.raises(DataError):
        sample_exocentrics(lonely, 1, rng_seed=0)


# ==================== Torch dataset ====================

def test_dataset_items_and_collate(train_samples):
    dataset = SEADataset(train_samples, image_size=32, k_exo=2, seed=0)
    item = dataset[0]
    assert item["ego"].shape == (3, 32, 32)
    assert item["exo"].shape == (2, 3, 32, 32)
    batch = collate_samples([dataset[i] for i in range(4)])
    assert batch["ego"].shape == (4, 3, 32, 32)
    assert batch["exo"].shape == (4, 2, 3, 32, 32)
    assert batch["action_id"].dtype == torch.long
    assert len(batch["sample_id"]) == 4


def test_dataset_without_exo(test_samples):
    item = SEADataset(test_samples, image_size=16, with_exo=False)[0]
    assert "exo" not in item
    assert item["ego"].shape == (3, 16, 16)
    assert item["gt"].shape == (32, 32)
