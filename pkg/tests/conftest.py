import copy

import pytest
import torch

from config import RunConfig, build_run_config
from data_model import generate_synthetic, load_dataset, load_vocabularies
from model import build_model
from utils import seed_everything


# ==================== Options ====================

def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow end-to-end experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ==================== Fixtures ====================

TINY = {
    "data": {
        "synthetic": {
            "n_actions": 3,
            "n_objects": 3,
            "samples_per_pair": 2,
            "image_size": [32, 32],
            "k_exo": 2,
            "blob_sigma": 3.0,
        }
    },
    "encoder": {
        "patch": 8,
        "image_size": 32,
        "pure": {"dim": 16},
        "multimodal": {"dim": 16},
        "text": {"dim": 16},
    },
    "model": {
        "pff": {"layers": 1, "heads": 2, "model_dim": 16, "ffn_dim": 32},
        "explain": {"heads": 2, "ffn_mult": 2},
    },
    "train": {"batch_size": 6, "epochs": 1, "k_exo": 2, "lr": 0.01},
}


@pytest.fixture
def tiny_dict() -> dict:
    """Fresh nested dict of the tiny run config, safe to mutate"""
    return copy.deepcopy(TINY)


@pytest.fixture
def tiny_cfg(tiny_dict) -> RunConfig:
    return build_run_config(tiny_dict)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    cfg = build_run_config(copy.deepcopy(TINY))
    root = tmp_path_factory.mktemp("synth")
    generate_synthetic(cfg.data.synthetic, root, cfg.caption.styles)
    return root


@pytest.fixture(scope="session")
def vocab_pair(synthetic_root):
    return load_vocabularies(synthetic_root)


@pytest.fixture(scope="session")
def train_samples(synthetic_root, vocab_pair):
    return load_dataset(synthetic_root, "seen", "train", vocab_pair)


@pytest.fixture(scope="session")
def test_samples(synthetic_root, vocab_pair):
    return load_dataset(synthetic_root, "seen", "test", vocab_pair)


@pytest.fixture
def tiny_model(tiny_cfg, vocab_pair):
    seed_everything(0)
    return build_model(tiny_cfg, vocab_pair, device="cpu")


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(0)
