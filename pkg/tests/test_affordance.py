import math

import numpy as np
import pytest
import torch

from affordance import (
    AffordanceHeatmap,
    PromptAligner,
    build_prompt,
    cosine_map,
    localize,
    normalize_and_filter,
    render_overlay,
    resize_heatmap,
    similarity_heatmap,
)
from config import AffordanceConfig, EncoderConfig
from encoders import FeatureMap, build_encoders
from errors import InputError, ShapeError, TemplateError


def _raw(values):
    grid = torch.as_tensor(values, dtype=torch.float64)
    if grid.dim() == 2:
        grid = grid.unsqueeze(0)
    return AffordanceHeatmap(grid=grid, stage="raw", domain="ego")


def _angles_map(degrees):
    vecs = [[math.cos(math.radians(a)), math.sin(math.radians(a))] for a in degrees]
    return torch.tensor(vecs, dtype=torch.float64).view(1, 2, 2, 2)


# ==================== Similarity ====================

def test_cosine_map_by_angle():
    feats = FeatureMap(_angles_map([0, 60, 90, 180]), source="multimodal", domain="ego")
    raw = similarity_heatmap(torch.tensor([1.0, 0.0], dtype=torch.float64), feats, image_size=2)
    assert raw.stage == "raw"
    assert torch.allclose(raw.grid, torch.tensor([[[1.0, 0.5], [0.0, -1.0]]], dtype=torch.float64), atol=1e-9)


def test_cosine_ignores_magnitude_and_zero_vectors_give_zero():
    feats = torch.tensor([[[[3.0, 0.0], [0.0, 0.0]]]])
    out = cosine_map(torch.tensor([0.5, 0.0]), feats)
    assert out.tolist() == [[[1.0, 0.0]]]


def test_cosine_dim_mismatch():
    with pytest.raises(ShapeError):
        cosine_map(torch.zeros(3), torch.zeros(1, 2, 2, 4))
    with pytest.raises(ShapeError):
        cosine_map(torch.ones(2, 4), torch.ones(3, 2, 2, 4))


def test_similarity_upsamples_to_image_size():
    feats = FeatureMap(torch.randn(2, 4, 4, 8), source="multimodal", domain="exo")
    raw = similarity_heatmap(torch.randn(8), feats, image_size=(32, 24))
    assert raw.grid.shape == (2, 32, 24)
    assert raw.domain == "exo"
    assert raw.grid.min() >= -1.0 - 1e-6 and raw.grid.max() <= 1.0 + 1e-6


# ==================== Normalize and filter ====================

def test_normalize_and_filter_example():
    final = normalize_and_filter(_raw([[0.2, 0.8], [0.4, 1.0]]), AffordanceConfig(beta=0.5))
    assert final.stage == "final"
    assert torch.allclose(final.grid[0], torch.tensor([[0.0, 0.75], [0.0, 1.0]], dtype=torch.float64), atol=1e-9)


def test_constant_map_becomes_zeros():
    final = normalize_and_filter(_raw(np.full((3, 3), 0.3)), AffordanceConfig(beta=0.0))
    assert torch.count_nonzero(final.grid) == 0


def test_beta_zero_keeps_everything_scaled():
    final = normalize_and_filter(_raw([[0.0, 0.5], [1.0, 0.25]]), AffordanceConfig(beta=0.0))
    assert torch.allclose(final.grid[0], torch.tensor([[0.0, 0.5], [1.0, 0.25]], dtype=torch.float64), atol=1e-9)


def test_higher_beta_shrinks_support():
    raw = _raw(torch.randn(1, 8, 8, generator=torch.Generator().manual_seed(0)))
    supports = [normalize_and_filter(raw, AffordanceConfig(beta=b)).grid > 0 for b in (0.1, 0.4, 0.7, 0.95)]
    for wide, narrow in zip(supports, supports[1:]):
        assert bool((narrow & ~wide).sum() == 0)


def test_final_map_is_invariant_to_affine_rescaling():
    raw = torch.randn(1, 6, 6, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    cfg = AffordanceConfig(beta=0.3)
    a = normalize_and_filter(_raw(raw), cfg).grid
    b = normalize_and_filter(_raw(raw * 4.0 + 2.0), cfg).grid
    assert torch.allclose(a, b, atol=1e-9)


def test_argmax_is_preserved_and_peak_is_one():
    raw = torch.randn(3, 5, 5, generator=torch.Generator().manual_seed(2))
    final = normalize_and_filter(_raw(raw), AffordanceConfig(beta=0.5)).grid
    assert torch.equal(final.flatten(1).argmax(1), raw.flatten(1).argmax(1))
    assert torch.allclose(final.flatten(1).max(1).values, torch.ones(3, dtype=torch.float64), atol=1e-9)
    assert final.min() >= 0.0


def test_filter_needs_raw_input():
    final = normalize_and_filter(_raw([[0.0, 1.0]]), AffordanceConfig())
    with pytest.raises(InputError):
        normalize_and_filter(final, AffordanceConfig())


def test_heatmap_grid_must_be_3d():
    with pytest.raises(ShapeError):
        AffordanceHeatmap(grid=torch.zeros(4, 4), stage="raw", domain="ego")


# ==================== Prompts and localize ====================

def test_prompt_styles():
    assert build_prompt("hold", "cup") == "hold cup"
    assert build_prompt("hold", "cup", "template") == "I will hold cup"
    with pytest.raises(TemplateError):
        build_prompt("hold", "cup", "template", template="[action] only")


def test_localize_returns_final_maps():
    encoders = build_encoders(EncoderConfig(patch=8, image_size=32, pure={"dim": 8}, multimodal={"dim": 8}, text={"dim": 8}))
    images = torch.rand(1, 3, 32, 32) * 255
    ego_feats = encoders.encode_visual_multimodal(images)
    exo_feats = encoders.encode_visual_multimodal(torch.rand(2, 3, 32, 32) * 255, domain="exo")
    ego, exo = localize(
        "hold", "cup", ego_feats, exo_feats, encoders=encoders, cfg=AffordanceConfig(beta=0.2), image_size=32
    )
    assert ego.stage == exo.stage == "final"
    assert ego.grid.shape == (1, 32, 32) and exo.grid.shape == (2, 32, 32)
    assert ego.grid.max() == pytest.approx(1.0, abs=1e-5)
    ego_only, none = localize("hold", "cup", ego_feats, encoders=encoders, cfg=AffordanceConfig(), image_size=32)
    assert none is None
    assert ego_only.domain == "ego"


# ==================== Aligner ====================

def test_centered_aligner_starts_as_mean_removal():
    grid = torch.randn(2, 3, 3, 4, generator=torch.Generator().manual_seed(0))
    aligned = PromptAligner(4)(FeatureMap(grid, source="multimodal", domain="ego", fused=True))
    assert aligned.grid.shape == grid.shape
    assert aligned.fused and aligned.domain == "ego"
    assert torch.allclose(aligned.grid, grid - grid.mean(dim=(1, 2), keepdim=True), atol=1e-6)


def test_image_wide_component_never_reaches_the_heatmap():
    grid = torch.randn(1, 2, 2, 4, generator=torch.Generator().manual_seed(1))
    shifted = grid + torch.tensor([5.0, -3.0, 0.0, 2.0])
    aligner = PromptAligner(4)
    a = aligner(FeatureMap(grid, source="multimodal", domain="ego"))
    b = aligner(FeatureMap(shifted, source="multimodal", domain="ego"))
    assert torch.allclose(a.grid, b.grid, atol=1e-5)
    constant = aligner(FeatureMap(torch.ones(1, 2, 2, 4), source="multimodal", domain="ego"))
    assert torch.count_nonzero(constant.grid) == 0


def test_identity_aligner_has_no_parameters():
    aligner = PromptAligner(4, "identity")
    feats = FeatureMap(torch.ones(1, 2, 2, 4), source="multimodal", domain="exo")
    assert aligner(feats) is feats
    assert list(aligner.parameters()) == []


# ==================== Export ====================

def test_overlay_matches_image_size():
    image = np.full((20, 30, 3), 128, dtype=np.uint8)
    overlay = render_overlay(image, np.eye(8), alpha=0.4)
    assert overlay.shape == (20, 30, 3) and overlay.dtype == np.uint8
    assert np.array_equal(render_overlay(image, np.eye(8), alpha=0.0), image)


def test_resize_heatmap():
    heat = np.arange(16, dtype=np.float64).reshape(4, 4)
    assert np.array_equal(resize_heatmap(heat, (4, 4)), heat)
    out = resize_heatmap(heat, (8, 6))
    assert out.shape == (8, 6)
    assert out.min() >= 0.0 and out.max() <= 15.0
