import pytest
import torch

from dismae.config import ConfigError, ModelConfig
from dismae.masking import full_visible_plan, random_masking
from dismae.nets import DisMAE, DomainClassifier, LabelHead, build_model, sincos_pos_embed_2d
from dismae.patches import patchify


@pytest.fixture()
def tiny(tiny_model_config):
    return build_model(tiny_model_config, seed=0)


def _masked_batch(model, batch=4, seed=0):
    gen = torch.Generator().manual_seed(seed)
    images = torch.rand(batch, model.cfg.channels, model.cfg.image_size, model.cfg.image_size, generator=gen)
    grid = patchify(images, model.cfg)
    visible, plan = random_masking(grid.tokens, model.cfg.mask_ratio, gen)
    return images, grid, visible, plan


def test_encoder_output_shapes(tiny):
    _, _, visible, plan = _masked_batch(tiny)
    tokens, cls = tiny.encode_semantic(visible, plan)
    assert tokens.shape == (4, 1 + plan.len_keep, tiny.cfg.embed_dim)
    assert cls.shape == (4, tiny.cfg.embed_dim)
    assert torch.equal(cls, tokens[:, 0])
    v = tiny.encode_variation(visible, plan)
    assert v.shape == (4, tiny.cfg.embed_dim)


def test_batch_permutation_equivariance_bitexact(tiny):
    _, grid, visible, plan = _masked_batch(tiny, batch=6, seed=3)
    perm = torch.tensor([3, 0, 5, 1, 4, 2])
    tokens, cls = tiny.encode_semantic(visible, plan)
    tokens_p, cls_p = tiny.encode_semantic(visible[perm], plan.rows(perm))
    assert torch.equal(tokens[perm], tokens_p)
    assert torch.equal(cls[perm], cls_p)
    v = tiny.encode_variation(visible, plan)
    assert torch.equal(v[perm], tiny.encode_variation(visible[perm], plan.rows(perm)))
    pred = tiny.decode(tokens, v, plan)
    pred_p = tiny.decode(tokens_p, v[perm], plan.rows(perm))
    assert torch.equal(pred[perm], pred_p)


def test_forward_determinism(tiny):
    _, _, visible, plan = _masked_batch(tiny, seed=9)
    a = tiny.encode_semantic(visible, plan)[0]
    b = tiny.encode_semantic(visible.clone(), plan)[0]
    assert torch.equal(a, b)


def test_decode_swap_identity(tiny):
    _, _, visible, plan = _masked_batch(tiny)
    tokens, _ = tiny.encode_semantic(visible, plan)
    v = tiny.encode_variation(visible, plan)
    once = tiny.decode(tokens, v, plan)
    again = tiny.decode(tokens, v, plan)
    assert torch.equal(once, again)
    # conditioning on "partner" j = i is the same tensor, hence bit-identical
    assert torch.equal(tiny.decode(tokens, v.clone(), plan), once)


def test_decode_output_shape_and_batch_mismatch(tiny):
    _, _, visible, plan = _masked_batch(tiny)
    tokens, _ = tiny.encode_semantic(visible, plan)
    v = tiny.encode_variation(visible, plan)
    pred = tiny.decode(tokens, v, plan)
    assert pred.shape == (4, plan.num_patches, tiny.cfg.patch_values)
    with pytest.raises(ValueError, match="batch"):
        tiny.decode(tokens, v[:2], plan)


def test_decode_with_full_plan(tiny):
    batch = 3
    gen = torch.Generator().manual_seed(1)
    images = torch.rand(batch, 3, 4, 4, generator=gen)
    grid = patchify(images, tiny.cfg)
    plan = full_visible_plan(batch, grid.num_patches)
    tokens, _ = tiny.encode_semantic(grid.tokens, plan)
    v = tiny.encode_variation(grid.tokens, plan)
    pred = tiny.decode(tokens, v, plan)
    assert pred.shape == (batch, grid.num_patches, tiny.cfg.patch_values)


def test_domain_classifier_uniform_at_zero_init(tiny):
    x = torch.randn(5, tiny.cfg.embed_dim, generator=torch.Generator().manual_seed(0))
    probs = tiny.classify_domain(x)
    assert torch.allclose(probs, torch.full((5, 2), 0.5))


def test_domain_probs_rows_sum_to_one():
    clf = DomainClassifier(16, 4)
    gen = torch.Generator().manual_seed(0)
    for p in clf.parameters():
        p.data.uniform_(-1, 1, generator=gen)
    probs = clf.probabilities(torch.randn(32, 16, generator=gen))
    assert torch.all(probs > 0)
    assert torch.allclose(probs.sum(dim=1), torch.ones(32), atol=1e-6)


def test_domain_classifier_softmax_arithmetic():
    import math

    logits = torch.tensor([[math.log(2.0), 0.0, 0.0]])
    probs = logits.softmax(dim=-1)
    assert torch.allclose(probs, torch.tensor([[0.5, 0.25, 0.25]]), atol=1e-7)


def test_domain_classifier_rejects_single_domain():
    with pytest.raises(ConfigError):
        DomainClassifier(8, 1)


def test_label_head_zero_weights_zero_logits():
    head = LabelHead(8, 5)
    torch.nn.init.zeros_(head.fc.weight)
    torch.nn.init.zeros_(head.fc.bias)
    out = head(torch.randn(3, 8))
    assert out.shape == (3, 5)
    assert torch.all(out == 0)


def test_label_head_argmax_shift_invariance():
    head = LabelHead(8, 4)
    gen = torch.Generator().manual_seed(2)
    for p in head.parameters():
        p.data.uniform_(-1, 1, generator=gen)
    x = torch.randn(6, 8, generator=gen)
    logits = head(x)
    shifted = logits + 3.7
    assert torch.equal(logits.argmax(dim=1), shifted.argmax(dim=1))


def test_unlabeled_model_has_no_head(tiny_model_config):
    import dataclasses

    cfg = dataclasses.replace(tiny_model_config, num_classes=0)
    model = build_model(cfg, 0)
    assert model.label_head is None
    with pytest.raises(ConfigError, match="unlabeled"):
        model.classify_label(torch.zeros(1, cfg.embed_dim))


def test_label_head_rejects_zero_classes():
    with pytest.raises(ConfigError):
        LabelHead(8, 0)


def test_variation_disabled_model(tiny_model_config):
    import dataclasses

    cfg = dataclasses.replace(tiny_model_config, variation_enabled=False)
    model = build_model(cfg, 0)
    assert model.variation is None
    _, _, visible, plan = _masked_batch(model)
    with pytest.raises(ConfigError):
        model.encode_variation(visible, plan)
    tokens, _ = model.encode_semantic(visible, plan)
    pred = model.decode(tokens, None, plan)
    assert pred.shape == (4, plan.num_patches, cfg.patch_values)


def test_build_model_deterministic(tiny_model_config):
    a = build_model(tiny_model_config, 7)
    b = build_model(tiny_model_config, 7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_sincos_table_requires_divisible_dim():
    with pytest.raises(ConfigError):
        sincos_pos_embed_2d(6, 2)
    table = sincos_pos_embed_2d(8, 3)
    assert table.shape == (1, 10, 8)
    assert torch.all(table[0, 0] == 0)  # summary-token row
