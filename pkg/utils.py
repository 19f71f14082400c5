import hashlib
import random
from pathlib import Path
from typing import Iterable, Union

import numpy as np
import torch
from PIL import Image

from errors import LoadError
from logger import setup_logger

logger = setup_logger(__name__)


def stable_seed(*parts: Union[int, str]) -> int:
    """Derive a 63-bit seed from arbitrary parts, independent of PYTHONHASHSEED"""
    digest = hashlib.sha256("\x1f".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)
    logger.debug(f"Seeded python/numpy/torch with {seed}")


def parameter_checksum(tensors: Iterable[torch.Tensor]) -> str:
    """SHA-256 over the raw bytes of the given tensors, in iteration order"""
    h = hashlib.sha256()
    for t in tensors:
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return parameter_checksum(list(module.parameters()) + list(module.buffers()))


# ==================== Image I/O ====================

def read_rgb(path: Union[str, Path]) -> np.ndarray:
    """Decode an image file to an h×w×3 uint8 array"""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise LoadError(f"Could not read image {path}: {e}") from e


def read_heatmap(path: Union[str, Path]) -> np.ndarray:
    """8-bit grayscale PNG -> float32 grid in [0, 1]"""
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as e:
        raise LoadError(f"Could not read heatmap {path}: {e}") from e


def save_heatmap_png(grid: np.ndarray, path: Union[str, Path]) -> None:
    arr = np.clip(np.asarray(grid, dtype=np.float64), 0.0, 1.0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """h×w×3 uint8 -> 3×h×w float32 with values 0-255"""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float()
