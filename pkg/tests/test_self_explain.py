import math

import pytest
import torch
import torch.nn.functional as F

from config import ExplainConfig
from encoders import FeatureMap
from errors import ConfigError, InputError, ShapeError, TemplateError
from fusion import TransformerBlock
from self_explain import (
    VARIANTS,
    ClassificationHeads,
    CrossDomainAttention,
    Explainer,
    SelfExplainFormer,
    TransformerExplainer,
    build_explainer,
    explain_variant_forward,
    parse_caption,
    render_caption,
)


def _map(n, h=2, w=2, d=8, domain="ego", seed=0, **kw):
    gen = torch.Generator().manual_seed(seed)
    return FeatureMap(torch.randn(n, h, w, d, generator=gen, **kw), source="pure", domain=domain)


@pytest.fixture
def explainer():
    torch.manual_seed(0)
    return TransformerExplainer(in_dim=8, model_dim=8, heads=2, ffn_mult=2).eval()


# ==================== Attention stages ====================

def test_self_attention_keeps_token_counts(explainer):
    exo_refined, ego_refined = explainer.self_attend(_map(2 * 2, domain="exo"), _map(2))
    assert exo_refined.shape == (2, 8, 8)
    assert ego_refined.shape == (2, 4, 8)


def test_ego_refinement_ignores_exo_tokens(explainer):
    exo = _map(2, domain="exo", requires_grad=True)
    _, ego_refined = explainer.self_attend(exo, _map(1))
    (grad,) = torch.autograd.grad(ego_refined.sum(), exo.grid, allow_unused=True)
    assert grad is None or torch.count_nonzero(grad) == 0


def test_single_token_block_is_residual_plus_ffn():
    torch.manual_seed(1)
    block = TransformerBlock(dim=4, heads=1, ffn_dim=8).eval()
    x = torch.randn(3, 1, 4)
    d = 4
    h = block.norm1(x)
    v = F.linear(h, block.attn.in_proj_weight[2 * d:], block.attn.in_proj_bias[2 * d:])
    a = block.attn.out_proj(v)
    expected = x + a + block.ffn(block.norm2(x + a))
    assert torch.allclose(block(x), expected, atol=1e-6)


def test_identical_tokens_make_cls_irrelevant():
    torch.manual_seed(2)
    cross = CrossDomainAttention(dim=4, heads=2, ffn_mult=2).eval()
    tokens = torch.randn(1, 1, 4).expand(2, 5, 4)
    before = cross.attend(tokens)
    with torch.no_grad():
        cross.cls_token.copy_(torch.randn(4) * 3)
    assert torch.allclose(cross.attend(tokens), before, atol=1e-6)


def test_two_token_single_head_attention_by_hand():
    torch.manual_seed(3)
    cross = CrossDomainAttention(dim=2, heads=1).eval()
    tokens = torch.tensor([[[1.0, 0.0], [0.0, 2.0]]])
    w, b = cross.attn.in_proj_weight, cross.attn.in_proj_bias
    q = F.linear(cross.cls_token, w[:2], b[:2])
    k = F.linear(tokens[0], w[2:4], b[2:4])
    v = F.linear(tokens[0], w[4:], b[4:])
    weights = torch.softmax(k @ q / math.sqrt(2), dim=0)
    expected = cross.attn.out_proj(weights @ v)
    assert torch.allclose(cross.attend(tokens)[0], expected, atol=1e-6)


def test_cls_dim_mismatch():
    cross = CrossDomainAttention(dim=4, heads=2)
    with pytest.raises(ShapeError):
        cross.attend(torch.zeros(1, 3, 6))


# ==================== Variants ====================

@pytest.mark.parametrize("variant", VARIANTS)
def test_every_variant_yields_one_vector_per_image(variant):
    torch.manual_seed(0)
    explainer = build_explainer(ExplainConfig(variant=variant, heads=2, ffn_mult=2), in_dim=8, model_dim=16)
    assert explainer.variant == variant
    explainer.train()
    assert explainer(_map(6, domain="exo"), _map(3)).shape == (3, 16)
    explainer.eval()
    assert explainer(None, _map(3)).shape == (3, 16)


@pytest.mark.parametrize("variant", VARIANTS)
def test_training_without_exo_is_rejected(variant):
    explainer = build_explainer(ExplainConfig(variant=variant, heads=2), in_dim=8, model_dim=8).train()
    with pytest.raises(InputError):
        explainer(None, _map(2))


def test_exo_count_must_group_over_ego(explainer):
    with pytest.raises(ShapeError):
        explainer(_map(3, domain="exo"), _map(2))
    with pytest.raises(ShapeError):
        explainer(None, _map(2, d=4))


def test_unknown_variant_is_a_config_error():
    with pytest.raises(ConfigError):
        build_explainer(ExplainConfig.model_construct(variant="bogus", heads=2, ffn_mult=2, dropout=0.0), 8, 8)
    with pytest.raises(ConfigError):
        explain_variant_forward(Explainer(8, 8), None, _map(1))


def test_heads_must_divide_model_dim():
    with pytest.raises(ConfigError):
        build_explainer(ExplainConfig(variant="transformer", heads=3), in_dim=8, model_dim=8)


def test_gradcheck_transformer_variant(explainer):
    explainer = explainer.double()
    ego = torch.randn(1, 2, 2, 8, dtype=torch.float64, requires_grad=True)
    exo = _map(1, domain="exo", dtype=torch.float64)

    def fn(grid):
        return explainer(exo, FeatureMap(grid, source="pure", domain="ego"))

    assert torch.autograd.gradcheck(fn, (ego,), eps=1e-6, atol=1e-4)


# ==================== Heads ====================

def test_zero_init_heads_are_uniform():
    heads = ClassificationHeads(dim=8, n_actions=36, n_objects=40, zero_init=True)
    out = heads(torch.randn(2, 8))
    assert torch.allclose(out.action_probs, torch.full((2, 36), 1 / 36))
    assert torch.allclose(out.object_probs, torch.full((2, 40), 1 / 40))


def test_heads_reject_non_finite_features():
    heads = ClassificationHeads(dim=2, n_actions=3, n_objects=3)
    with pytest.raises(InputError):
        heads(torch.tensor([[float("nan"), 0.0]]))


def test_ranking_orders_by_logit():
    heads = ClassificationHeads(dim=2, n_actions=3, n_objects=2, zero_init=True)
    with torch.no_grad():
        heads.action.bias.copy_(torch.tensor([0.1, 0.9, 0.5]))
    out = heads(torch.zeros(1, 2))
    assert out.ranking("action").tolist() == [[1, 2, 0]]


def test_self_explain_former_end_to_end():
    torch.manual_seed(0)
    former = SelfExplainFormer(ExplainConfig(heads=2, ffn_mult=2), in_dim=8, model_dim=8, n_actions=4, n_objects=5)
    out = former.eval()(_map(2, domain="exo"), _map(1))
    assert out.action_logits.shape == (1, 4)
    assert out.object_logits.shape == (1, 5)
    assert out.f_cls.shape == (1, 8)


# ==================== Captions ====================

def test_caption_render_and_parse():
    template = "I will [action] [object]"
    caption = render_caption("cut with", "knife", template)
    assert caption == "I will cut with knife"
    assert parse_caption("I will hold cup", template) == ("hold", "cup")


def test_custom_template():
    template = "[object] is for [action]"
    assert render_caption("riding", "bicycle", template) == "bicycle is for riding"


@pytest.mark.parametrize("template", ["I will [action]", "[action] [action] [object]", "nothing here"])
def test_template_needs_each_placeholder_once(template):
    with pytest.raises(TemplateError):
        render_caption("hold", "cup", template)


def test_caption_outside_template():
    with pytest.raises(TemplateError):
        parse_caption("You should hold cup", "I will [action] [object]")


def test_concat_avgpool_on_constant_tokens():
    torch.manual_seed(4)
    explainer = build_explainer(ExplainConfig(variant="concat_avgpool"), in_dim=4, model_dim=4).eval()
    v = torch.randn(4)
    exo = FeatureMap(v.expand(2, 2, 2, 4).clone(), source="pure", domain="exo")
    ego = FeatureMap(v.expand(1, 2, 2, 4).clone(), source="pure", domain="ego")
    expected = explainer.proj(torch.cat([v, v]))
    assert torch.allclose(explainer(exo, ego)[0], expected, atol=1e-6)
