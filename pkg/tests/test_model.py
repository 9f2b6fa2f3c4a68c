import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from conftest import make_images, make_tokens
from oracles import central_differences, max_relative_error
from vilt.image import ImageBatch
from vilt.model import EncoderBlock, ModelConfig, SequenceState, ViLT


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(mlp=0)
    assert ModelConfig.tiny(depth=0).depth == 0
    cfg = ModelConfig.tiny()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_embed_text_class_only(tiny_model):
    tokens = make_tokens([[1]])
    out = tiny_model.embed_text(tokens)
    assert out.shape == (1, 1, 8)
    torch.testing.assert_close(out[0, 0], tiny_model.text_cls + tiny_model.text_pos[0])


def test_embed_text_lookup_identity():
    cfg = ModelConfig.tiny(vocab_size=8)
    model = ViLT(cfg).double()
    with torch.no_grad():
        model.word_embed.copy_(torch.eye(8))
        model.text_pos.zero_()
    ids = [1, 5, 2, 7]
    out = model.embed_text(make_tokens([ids]))
    for i in range(1, 4):
        torch.testing.assert_close(out[0, i], torch.eye(8, dtype=torch.float64)[ids[i]])


def test_embed_text_shape_and_range(tiny_model):
    tokens = make_tokens([[1, 2, 3, 4, 5, 6], [1, 2, 3, 4, 5, 6]])
    assert tiny_model.embed_text(tokens).shape == (2, 6, 8)
    with pytest.raises(IndexError):
        tiny_model.embed_text(make_tokens([[1, 99]]))


def test_embed_image_zero_patches_give_bias(tiny_cfg, tiny_model):
    images = make_images(tiny_cfg, 1)
    images.patches.zero_()
    with torch.no_grad():
        tiny_model.vis_pos_grid.zero_()
        tiny_model.patch_proj.bias.copy_(torch.arange(8.0))
    out = tiny_model.embed_image(images)
    assert out.shape == (1, 5, 8)
    for row in out[0, 1:]:
        torch.testing.assert_close(row, torch.arange(8.0, dtype=torch.float64))


def test_embed_image_base_shape():
    cfg = ModelConfig(depth=0, vocab_size=8)
    model = ViLT(cfg)
    images = ImageBatch(torch.zeros(1, 240, 3072), torch.stack(torch.meshgrid(
        torch.arange(12), torch.arange(20), indexing="ij"), -1).reshape(1, 240, 2),
        torch.ones(1, 240, dtype=torch.bool), [(12, 20)])
    assert model.embed_image(images).shape == (1, 241, 768)


def test_embed_image_projection_linear(tiny_cfg, tiny_model):
    images = make_images(tiny_cfg, 2)
    zero = ImageBatch(torch.zeros_like(images.patches), images.grid_pos, images.mask, images.grid_shapes)
    scaled = ImageBatch(2.5 * images.patches, images.grid_pos, images.mask, images.grid_shapes)
    e0 = tiny_model.embed_image(zero)
    torch.testing.assert_close(tiny_model.embed_image(scaled) - e0, 2.5 * (tiny_model.embed_image(images) - e0))


def test_embed_image_uses_interpolated_positions(tiny_cfg, tiny_model):
    # a 3x3 grid differs from the stored 2x2 grid; entry (1,1) is the grid mean
    images = make_images(tiny_cfg, 1, size=(12, 12))
    images.patches.zero_()
    with torch.no_grad():
        tiny_model.patch_proj.bias.zero_()
    out = tiny_model.embed_image(images)
    centre = out[0, 1 + 4]
    torch.testing.assert_close(centre, tiny_model.vis_pos_grid.mean(dim=(0, 1)))
    with pytest.raises(ValueError):
        tiny_model.embed_image(ImageBatch(torch.zeros(1, 1, 5), images.grid_pos[:, :1], images.mask[:, :1], [(1, 1)]))


def test_fuse(tiny_cfg, tiny_model):
    tokens = make_tokens([[1, 2, 3]])
    images = make_images(tiny_cfg, 1)
    t, v = tiny_model.embed_text(tokens), tiny_model.embed_image(images)
    with torch.no_grad():
        tiny_model.text_type.zero_()
        tiny_model.vis_type.zero_()
    state = tiny_model.fuse(t, v, tokens.attn_mask, images.mask)
    torch.testing.assert_close(state.z, torch.cat([t, v], 1))
    assert state.modality_split == 3
    assert state.z.shape[1] == (2 + 1) + (4 + 1)
    assert state.attn_mask.all()


def _zero_block(cfg):
    block = EncoderBlock(cfg).double()
    with torch.no_grad():
        for name, p in block.named_parameters():
            if not name.startswith("ln"):
                p.zero_()
    return block


def test_block_with_zero_weights_is_identity(tiny_cfg):
    block = _zero_block(tiny_cfg)
    z = torch.randn(2, 5, 8, dtype=torch.float64)
    torch.testing.assert_close(block(z, torch.ones(2, 5, dtype=torch.bool)), z)


def test_block_single_position_closed_form():
    cfg = ModelConfig.tiny(heads=1)
    block = EncoderBlock(cfg).double()
    with torch.no_grad():
        block.fc2.weight.zero_()
        block.fc2.bias.zero_()
    z = torch.randn(1, 1, 8, dtype=torch.float64)
    ln = F.layer_norm(z, (8,), block.ln1.weight, block.ln1.bias, cfg.ln_eps)
    expected = z + (ln @ block.v.weight + block.v.bias) @ block.o.weight + block.o.bias
    torch.testing.assert_close(block(z, torch.ones(1, 1, dtype=torch.bool)), expected)


def test_block_ignores_padded_keys(tiny_cfg):
    block = EncoderBlock(tiny_cfg).double()
    z = torch.randn(1, 6, 8, dtype=torch.float64)
    mask = torch.tensor([[True, True, True, True, False, False]])
    out = block(z, mask)
    swapped = z[:, [0, 1, 2, 3, 5, 4]]
    torch.testing.assert_close(block(swapped, mask)[:, :4], out[:, :4])
    changed = z.clone()
    changed[:, 4:] = 100.0
    torch.testing.assert_close(block(changed, mask)[:, :4], out[:, :4])


def test_pool(tiny_model):
    with torch.no_grad():
        tiny_model.pooler.weight.zero_()
        tiny_model.pooler.bias.copy_(torch.linspace(-2, 2, 8))
    z = torch.randn(3, 4, 8, dtype=torch.float64)
    p = tiny_model.pool(SequenceState(z, 2, torch.ones(3, 4, dtype=torch.bool)))
    assert p.shape == (3, 8)
    torch.testing.assert_close(p, torch.tanh(torch.linspace(-2, 2, 8, dtype=torch.float64)).expand(3, 8))


def test_pool_range(tiny_model):
    z = 50 * torch.randn(3, 4, 8, dtype=torch.float64)
    p = tiny_model.pool(SequenceState(z, 2, torch.ones(3, 4, dtype=torch.bool)))
    assert ((p > -1) & (p < 1)).all() or (p.abs() <= 1).all()


def test_forward_depth_zero_is_final_ln(tiny_cfg):
    model = ViLT(ModelConfig.tiny(depth=0)).double()
    tokens = make_tokens([[1, 2, 3]])
    images = make_images(tiny_cfg, 1)
    state, _ = model(tokens, images)
    z0 = model.fuse(model.embed_text(tokens), model.embed_image(images), tokens.attn_mask, images.mask).z
    torch.testing.assert_close(state.z, model.final_ln(z0))


def test_forward_batch_duplication(tiny_cfg, tiny_model):
    tokens = make_tokens([[1, 2, 3, 4]])
    images = make_images(tiny_cfg, 1)
    s1, p1 = tiny_model(tokens, images)
    s2, p2 = tiny_model(tokens.index_select([0, 0]), images.index_select([0, 0]))
    assert torch.equal(p2[0], p1[0]) and torch.equal(p2[1], p1[0])
    assert torch.equal(s2.z[1], s1.z[0])


def test_tiny_forward_is_finite(tiny_cfg, tiny_model):
    tokens = make_tokens([[1, 2, 3, 4, 5], [1, 6, 7]])
    images = make_images(tiny_cfg, 2, keep=[4, 3])
    state, p = tiny_model(tokens, images)
    assert state.z.shape == (2, 5 + (4 + 1), 8)
    assert torch.isfinite(state.z).all() and torch.isfinite(p).all()


def test_padding_invariance(tiny_cfg, tiny_model):
    tokens = make_tokens([[1, 2, 3, 4, 5], [1, 6, 7]])
    images = make_images(tiny_cfg, 2, keep=[4, 2])
    state, p = tiny_model(tokens, images)
    tokens2 = make_tokens([[1, 2, 3, 4, 5], [1, 6, 7]])
    tokens2.ids[1, 3:] = 9
    images2 = ImageBatch(images.patches.clone(), images.grid_pos.clone(), images.mask, images.grid_shapes)
    images2.patches[1, 2:] = 7.0
    images2.grid_pos[1, 2:] = 1
    state2, p2 = tiny_model(tokens2, images2)
    torch.testing.assert_close(p2, p)
    valid = state.attn_mask
    torch.testing.assert_close(state2.z[valid], state.z[valid])


def test_zeroed_branches_leave_only_final_ln(tiny_cfg, tiny_model):
    with torch.no_grad():
        for block in tiny_model.blocks:
            for lin in (block.o, block.fc2):
                lin.weight.zero_()
                lin.bias.zero_()
    tokens = make_tokens([[1, 2, 3]])
    images = make_images(tiny_cfg, 1)
    state, _ = tiny_model(tokens, images)
    z0 = tiny_model.fuse(tiny_model.embed_text(tokens), tiny_model.embed_image(images),
                         tokens.attn_mask, images.mask).z
    torch.testing.assert_close(state.z, tiny_model.final_ln(z0))


def test_final_ln_knob(tiny_cfg):
    model = ViLT(ModelConfig.tiny(final_ln=False, depth=0)).double()
    tokens = make_tokens([[1, 2]])
    images = make_images(tiny_cfg, 1)
    state, _ = model(tokens, images)
    z0 = model.fuse(model.embed_text(tokens), model.embed_image(images), tokens.attn_mask, images.mask).z
    torch.testing.assert_close(state.z, z0)


def test_seeded_init_and_forward_bitwise(tiny_cfg):
    tokens = make_tokens([[1, 2, 3]])
    images = make_images(tiny_cfg, 1)
    a = ViLT(tiny_cfg, seed=3).double()
    b = ViLT(tiny_cfg, seed=3).double()
    assert torch.equal(a(tokens, images)[1], b(tokens, images)[1])


def test_non_finite_activations_name_the_layer(tiny_cfg, tiny_model):
    with torch.no_grad():
        tiny_model.blocks[1].fc2.bias.fill_(float("nan"))
    with pytest.raises(FloatingPointError, match="layer 1"):
        tiny_model(make_tokens([[1, 2]]), make_images(tiny_cfg, 1))


def test_forward_gradients_match_finite_differences(tiny_cfg, tiny_model):
    tokens = make_tokens([[1, 2, 3, 4], [1, 5, 6]])
    images = make_images(tiny_cfg, 2, size=(12, 8), keep=[5, 3])
    weights = torch.randn(2, 11, 8, generator=torch.Generator().manual_seed(0), dtype=torch.float64)

    def loss():
        state, p = tiny_model(tokens, images)
        return (state.z * weights[:, : state.z.shape[1]]).sum() + p.pow(2).sum()

    params = dict(tiny_model.named_parameters())
    tiny_model.zero_grad()
    loss().backward()
    analytic = {n: p.grad.clone() for n, p in params.items()}
    numeric = central_differences(loss, params)
    err, where = max_relative_error(analytic, numeric)
    assert err < 1e-4, where
