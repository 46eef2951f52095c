import numpy as np
import pytest

from medistill.autodiff import Tensor, functional as F
from medistill.autodiff.gradcheck import check_gradients, numerical_grad
from medistill.config import toy_config
from medistill.data import BOS_ID, EOS_ID, PAD_ID, Batch
from medistill.errors import ConfigurationError, ContractError, ShapeError
from medistill.model import (MEDModel, decode, encode_image, encode_text, forward_collect, fuse, generate_caption,
                             generate_captions, param_shapes, vision_forward)
from medistill.objectives import make_negative_sampler, pretrain_losses, vlp_loss


@pytest.fixture
def model(small_config):
    return MEDModel.initialize(small_config, seed=0)


def test_matmul_hand_computed():
    out = F.matmul(Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])), Tensor(np.array([[1.0], [1.0]])))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_softmax_closed_forms():
    np.testing.assert_allclose(F.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)
    np.testing.assert_array_equal(F.softmax(Tensor(np.array([1000.0, 1000.0]))).data, [0.5, 0.5])


def test_layer_norm_closed_forms():
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(F.layer_norm(Tensor(np.array([[1.0, -1.0]])), ones, zeros, eps=1e-12).data, [[1, -1]])
    assert not F.layer_norm(Tensor(np.full((1, 2), 3.0)), ones, zeros).data.any()


def test_gelu_asymptotes():
    x = Tensor(np.array([0.0, 20.0, -20.0]))
    np.testing.assert_allclose(F.gelu(x).data, [0.0, 20.0, 0.0], atol=1e-8)


def test_vision_encoder_shapes(model, small_batch):
    emb, trace = encode_image(model, small_batch.images)
    assert emb.shape == (4, min(256, 16))
    assert len(trace.vision_states) == 2
    np.testing.assert_allclose(np.linalg.norm(emb.data, axis=1), 1.0, atol=1e-12)
    same, _ = encode_image(model, small_batch.images[[0, 0]])
    np.testing.assert_array_equal(same.data[0], same.data[1])


def test_wrong_resolution_is_a_shape_error(model):
    with pytest.raises(ShapeError):
        vision_forward(model, np.zeros((1, 3, 32, 32)))


def test_text_embedding_is_invariant_to_padding(model):
    short = np.array([[BOS_ID, 5, 6, EOS_ID]])
    padded = np.array([[BOS_ID, 5, 6, EOS_ID, PAD_ID, PAD_ID, PAD_ID]])
    a, _ = encode_text(model, short)
    b, _ = encode_text(model, padded, padded != PAD_ID)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_text_requires_bos_and_in_range_ids(model):
    with pytest.raises(ContractError):
        encode_text(model, np.array([[5, 6, EOS_ID]]))
    with pytest.raises(IndexError):
        encode_text(model, np.array([[BOS_ID, 99, EOS_ID]]))


def test_cross_attention_recorded_in_every_fusion_layer(model, small_batch):
    states = vision_forward(model, small_batch.images).vision_states[-1]
    _, trace = fuse(model, small_batch.tokens, states, small_batch.mask)
    cross = trace.attention_maps("fused", "cross")
    assert [a.layer for a in cross] == [0, 1]
    for rec in cross:
        np.testing.assert_allclose(rec.probs.data.sum(axis=-1), 1.0, atol=1e-12)


def test_top_fusion_layers_only(small_batch):
    cfg = toy_config(dim=16, heads=2, layers=2, text_layers=3, n_fusion_layers=1, image_size=16, max_len=12)
    m = MEDModel.initialize(cfg, seed=0)
    states = vision_forward(m, small_batch.images).vision_states[-1]
    _, trace = fuse(m, small_batch.tokens, states, small_batch.mask)
    assert [a.layer for a in trace.attention_maps("fused", "cross")] == [2]


def test_fused_states_depend_on_image(model, small_batch):
    states = vision_forward(model, small_batch.images).vision_states[-1]
    black = vision_forward(model, np.zeros_like(small_batch.images)).vision_states[-1]
    a, _ = fuse(model, small_batch.tokens, states, small_batch.mask)
    b, _ = fuse(model, small_batch.tokens, black, small_batch.mask)
    assert np.abs(a.data - b.data).max() > 1e-6


def test_fusion_disabled_is_a_configuration_error(small_batch):
    cfg = toy_config(dim=16, heads=2, layers=2, n_fusion_layers=0, image_size=16, max_len=12)
    m = MEDModel.initialize(cfg, seed=0)
    states = vision_forward(m, small_batch.images).vision_states[-1]
    with pytest.raises(ConfigurationError):
        fuse(m, small_batch.tokens, states, small_batch.mask)


def test_decoder_is_causal(model, small_batch):
    states = vision_forward(model, small_batch.images).vision_states[-1]
    tokens = small_batch.tokens.copy()
    mask = np.ones_like(tokens, dtype=bool)
    base, trace = decode(model, tokens, states, mask)
    j = 3
    tokens[:, j] = (tokens[:, j] + 1) % model.config.text.vocab_size
    changed, _ = decode(model, tokens, states, mask)
    np.testing.assert_array_equal(base.data[:, :j], changed.data[:, :j])
    assert not np.array_equal(base.data[:, j:], changed.data[:, j:])
    for rec in trace.attention_maps("decoder", "self"):
        assert not np.triu(rec.probs.data, k=1).any()


def test_decoder_absent_is_a_configuration_error(small_batch):
    cfg = toy_config(dim=16, heads=2, layers=2, decoder_layers=0, image_size=16, max_len=12)
    m = MEDModel.initialize(cfg, seed=0)
    states = vision_forward(m, small_batch.images).vision_states[-1]
    with pytest.raises(ConfigurationError):
        decode(m, small_batch.tokens, states)


def test_generation_is_deterministic_and_bounded(model, small_batch):
    first = generate_captions(model, small_batch.images, prompt=[4], max_len=5)
    assert first == generate_captions(model, small_batch.images, prompt=[4], max_len=5)
    assert all(c[0] == 4 and len(c) <= 6 and EOS_ID not in c for c in first)
    assert len(generate_caption(model, small_batch.images[:1], max_len=1)) <= 1


def test_weight_shapes_are_a_pure_function_of_config(small_config):
    a, b = MEDModel.initialize(small_config, 0), MEDModel.initialize(small_config, 1)
    assert {n: p.shape for n, p in a.named_parameters()} == param_shapes(small_config)
    assert {n: p.shape for n, p in b.named_parameters()} == param_shapes(small_config)


def test_trace_counts_and_consistency(model, small_batch):
    cfg = model.config
    trace = forward_collect(model, small_batch)
    n_states = len(trace.vision_states) + len(trace.text_states) + len(trace.decoder_states)
    assert n_states == cfg.vision.n_layers + cfg.text.n_layers + cfg.decoder.n_layers
    img, _ = encode_image(model, small_batch.images)
    txt, _ = encode_text(model, small_batch.tokens, small_batch.mask)
    np.testing.assert_array_equal(trace.image_embed.data, img.data)
    np.testing.assert_array_equal(trace.text_embed.data, txt.data)
    again = forward_collect(model, small_batch)
    for x, y in zip(trace.decoder_states, again.decoder_states):
        np.testing.assert_array_equal(x.data, y.data)


def test_all_attention_rows_are_stochastic(model, small_batch):
    trace = forward_collect(model, small_batch, make_negative_sampler(0.07, np.random.default_rng(0)))
    kinds = {(a.component, a.kind) for a in trace.attentions}
    assert kinds == {("vision", "self"), ("text", "self"), ("fused", "self"), ("fused", "cross"),
                     ("decoder", "self"), ("decoder", "cross")}
    for rec in trace.attentions:
        rows = rec.probs.data.sum(axis=-1)
        valid = rec.query_mask if rec.query_mask is not None else np.ones(rows.shape[::2], bool)
        np.testing.assert_allclose(rows.transpose(0, 2, 1)[valid], 1.0, atol=1e-12)


def test_full_forward_matches_finite_differences(small_batch):
    """Every parameter tensor of a 2-layer MED, probed through the complete pre-training loss."""
    cfg = toy_config(dim=8, heads=2, layers=2, image_size=16, patch_size=8, max_len=12)
    m = MEDModel.initialize(cfg, seed=3)
    # at the 0.02-scale init the cross-attention paths carry ~1e-8 gradients, below
    # finite-difference resolution, so probe at a well-conditioned random point
    draw = np.random.default_rng(4)
    for name, p in m.named_parameters():
        if name != "itc.temp":
            p.data[...] = draw.normal(scale=0.4, size=p.shape) + (1.0 if name.endswith("ln_cross.weight") else 0.0)
    b = small_batch
    batch = Batch(b.images[:3], b.tokens[:3], b.mask[:3], b.scene_ids[:3])

    def loss():
        # fixed sampler stream so every evaluation sees the same hard negatives
        report, _ = pretrain_losses(m, batch, np.random.default_rng(0))
        return vlp_loss(report)

    worst = 0.0
    rng = np.random.default_rng(0)
    for name, p in m.named_parameters():
        if name.endswith(".k.bias"):
            # softmax is shift invariant per query, so key biases have a zero gradient (up to roundoff)
            m.zero_grad()
            loss().backward()
            assert p.grad is None or np.abs(p.grad).max() < 1e-15
            assert np.abs(numerical_grad(loss, p, indices=[(0,), (1,)])).max() < 1e-8
            continue
        worst = max(worst, check_gradients(loss, [p], max_entries=4, rng=rng))
    assert worst < 1e-4
