import dataclasses

import numpy as np
import pytest

from mmformer import ops
from mmformer.config import ModelConfig
from mmformer.modality import MODALITIES, Modality, ModalityMask, enumerate_subsets
from mmformer.network import (
    ModalityEncoding,
    ModelParams,
    aux_shared_decoder_forward,
    build_multimodal_token,
    conv_encoder_forward,
    count_params_flops,
    encode_modality,
    fuse_and_decode,
    init_params,
    intra_modal_transformer,
    mmformer_forward,
    multi_head_self_attention,
    param_shapes,
    tokenize,
    transformer_block,
)
from mmformer.tensor import Tensor, backward, no_grad

from oracles import attention_loop


def volumes(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((cfg.extent,) * 3).astype(np.float32) for _ in MODALITIES]


@pytest.fixture(scope="module")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, 3)


# -- encoder / tokens -----------------------------------------------------------

def test_encoder_shapes_default_channels():
    cfg = ModelConfig(extent=32)
    p = init_params(cfg, 0)
    with no_grad():
        stages, local = conv_encoder_forward(Tensor(np.ones((1, 1, 32, 32, 32))), p, cfg, Modality.T2)
    assert local.shape == (1, 256, 2, 2, 2)
    assert [s.shape[1:] for s in stages] == [(16, 32, 32, 32), (32, 16, 16, 16), (64, 8, 8, 8), (128, 4, 4, 4), (256, 2, 2, 2)]


def test_encoder_at_training_crop_extent():
    # spatial shapes only, so narrow channels keep the 128^3 pass cheap
    cfg = ModelConfig(extent=128, channels=(2, 2, 2, 2, 2), token_dim=8, heads=2, groups=2)
    p = init_params(cfg, 0)
    with no_grad():
        _, local = conv_encoder_forward(Tensor(np.zeros((1, 1, 128, 128, 128))), p, cfg, Modality.FLAIR)
    assert local.shape[2:] == (8, 8, 8)
    assert cfg.tokens_per_modality == 512


def test_encoder_zero_params_give_zero_output(tiny_cfg, tiny_params):
    zero = ModelParams({k: Tensor(np.zeros_like(v.data)) for k, v in tiny_params.items()})
    _, local = conv_encoder_forward(Tensor(np.random.default_rng(0).standard_normal((1, 1, 16, 16, 16))), zero, tiny_cfg, 0)
    assert not local.data.any()


def test_tokenize_identity_projection():
    local = Tensor(np.random.default_rng(1).standard_normal((1, 8, 2, 2, 2)))
    tokens = tokenize(local, Tensor(np.eye(8)), None, Tensor(np.zeros((8, 8))))
    np.testing.assert_array_equal(tokens.data, ops.flatten_spatial(local).data)
    with pytest.raises(ValueError):
        tokenize(local, Tensor(np.eye(8)), None, Tensor(np.zeros((7, 8))))


def test_token_counts_from_forward(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg)
    enc = encode_modality(Tensor(vols[0][None, None]), tiny_params, tiny_cfg, 0)
    assert enc.global_tokens.shape == (1, tiny_cfg.tokens_per_modality, tiny_cfg.token_dim) == (1, 64, 8)


def test_intra_depth_zero_is_tokenize(tiny_cfg, tiny_params):
    cfg = dataclasses.replace(tiny_cfg, intra_depth=0)
    local = Tensor(np.random.default_rng(2).standard_normal((1, 16, 4, 4, 4)))
    out = intra_modal_transformer(local, tiny_params, cfg, Modality.T1)
    ref = tokenize(local, tiny_params["intra.t1.embed.w"], tiny_params["intra.t1.embed.b"], tiny_params["intra.t1.pos"])
    np.testing.assert_array_equal(out.data, ref.data)


# -- attention --------------------------------------------------------------------

def _attn_params(d, rng, prefix="a"):
    p = {}
    for proj in "qkvo":
        p[f"{prefix}.{proj}.w"] = Tensor(rng.standard_normal((d, d)) * 0.5)
        p[f"{prefix}.{proj}.b"] = Tensor(rng.standard_normal(d) * 0.1)
    return p


def test_attention_identical_tokens_give_identical_rows(rng):
    p = _attn_params(4, rng)
    x = Tensor(np.tile(rng.standard_normal((1, 1, 4)), (1, 2, 1)))
    out, w = multi_head_self_attention(x, p, "a", heads=2, return_weights=True)
    np.testing.assert_array_equal(out.data[0, 0], out.data[0, 1])
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_two_token_closed_form():
    # q = k = v = x, identity output; tokens e1 and e2 with C'=2, one head
    p = {f"a.{n}.w": Tensor(np.eye(2)) for n in "qkvo"}
    p.update({f"a.{n}.b": Tensor(np.zeros(2)) for n in "qkvo"})
    x = Tensor([[[1.0, 0.0], [0.0, 1.0]]])
    out = multi_head_self_attention(x, p, "a", heads=1).data[0]
    s = 1 / np.sqrt(2)
    hi, lo = np.exp(s) / (np.exp(s) + 1), 1 / (np.exp(s) + 1)
    np.testing.assert_allclose(out, [[hi, lo], [lo, hi]], atol=1e-6)


def test_attention_matches_loop_oracle(rng):
    d, heads = 6, 3
    p = _attn_params(d, rng)
    x = rng.standard_normal((5, d)).astype(np.float32)
    got = multi_head_self_attention(Tensor(x[None]), p, "a", heads).data[0]
    args = [p[f"a.{n}.{s}"].data.astype(np.float64) for n in "qkvo" for s in "wb"]
    np.testing.assert_allclose(got, attention_loop(x, *args, heads=heads), atol=1e-4)


def test_transformer_block_with_zero_output_projections_is_identity(tiny_cfg, rng):
    p = init_params(tiny_cfg, 0)
    for name in ("attn.o.w", "attn.o.b", "ffn.fc2.w", "ffn.fc2.b"):
        p[f"inter.blk0.{name}"] = Tensor(np.zeros(p[f"inter.blk0.{name}"].shape))
    x = Tensor(rng.standard_normal((1, 5, 8)))
    np.testing.assert_array_equal(transformer_block(x, p, "inter.blk0", tiny_cfg).data, x.data)


@pytest.mark.parametrize("s", [1, 3, 17])
def test_transformer_block_preserves_shape(tiny_cfg, tiny_params, s):
    x = Tensor(np.random.default_rng(s).standard_normal((1, s, 8)))
    assert transformer_block(x, tiny_params, "inter.blk0", tiny_cfg).shape == (1, s, 8)


# -- fusion ------------------------------------------------------------------------

def test_multimodal_token_zero_block_for_missing(tiny_cfg, tiny_params):
    s, d = tiny_cfg.tokens_per_modality, tiny_cfg.token_dim
    feats = [Tensor(np.random.default_rng(i).standard_normal((1, s, d)) + 1) for i in range(4)]
    mask = ModalityMask.parse("FLAIR,T1c,T2")
    token, seq = build_multimodal_token(feats, mask, tiny_params, tiny_cfg, return_sequence=True)
    assert token.shape == (1, 4 * s, d)
    assert not seq.data[0, 2 * s:3 * s].any()
    assert seq.data[0, 3 * s:].all()


def test_masking_equals_zeroing(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg, 4)
    with no_grad():
        enc = [encode_modality(Tensor(v[None, None]), tiny_params, tiny_cfg, m) for m, v in zip(MODALITIES, vols)]
        masked = ModalityMask.parse("FLAIR,T1c,T2")
        a = fuse_and_decode([enc[0], enc[1], None, enc[3]], masked, tiny_params, tiny_cfg, (16,) * 3, with_aux=False)
        zeroed = ModalityEncoding(
            [Tensor(np.zeros(t.shape)) for t in enc[2].stages],
            Tensor(np.zeros(enc[2].local.shape)),
            Tensor(np.zeros(enc[2].global_tokens.shape)),
        )
        b = fuse_and_decode([enc[0], enc[1], zeroed, enc[3]], ModalityMask.full(), tiny_params, tiny_cfg, (16,) * 3, with_aux=False)
    np.testing.assert_array_equal(a.main_logits.data, b.main_logits.data)


def test_inter_transformer_disabled_is_identity(tiny_cfg, tiny_params):
    from mmformer.network import inter_modal_transformer

    x = Tensor(np.random.default_rng(0).standard_normal((1, 256, 8)))
    off = dataclasses.replace(tiny_cfg, use_inter=False)
    assert inter_modal_transformer(x, tiny_params, off) is x
    assert inter_modal_transformer(x, tiny_params, tiny_cfg).shape == (1, 256, 8)


# -- full model -----------------------------------------------------------------------

def test_nine_heads_with_aux_one_without(five_stage_cfg):
    p = init_params(five_stage_cfg, 0)
    vols = volumes(five_stage_cfg)
    with no_grad():
        out = mmformer_forward(vols, ModalityMask.full(), p, five_stage_cfg)
        assert out.num_heads == 9 and len(out.decoder_aux_logits) == 4 and len(out.encoder_aux_logits) == 4
        assert all(h.shape == (1, 3, 16, 16, 16) for h in out.heads())
        bare = mmformer_forward(vols, ModalityMask.full(), p, five_stage_cfg, with_aux=False)
        assert bare.num_heads == 1
        no_aux = dataclasses.replace(five_stage_cfg, use_aux=False)
        assert mmformer_forward(vols, ModalityMask.full(), init_params(no_aux, 0), no_aux).num_heads == 1


def test_main_logits_at_32(rng):
    cfg = ModelConfig(extent=32, channels=(8, 16, 32, 64, 128), token_dim=128)
    p = init_params(cfg, 0)
    with no_grad():
        out = mmformer_forward([rng.standard_normal((32,) * 3) for _ in range(4)], ModalityMask.full(), p, cfg)
    assert out.main_logits.shape == (1, 3, 32, 32, 32)
    assert all(np.isfinite(h.data).all() for h in out.heads())


def test_masked_inputs_are_inert(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg, 1)
    noisy = [v if m == Modality.T1c else np.random.default_rng(9).standard_normal(v.shape) * 50 for m, v in zip(MODALITIES, vols)]
    mask = ModalityMask.of(["T1c"])
    with no_grad():
        a = mmformer_forward(vols, mask, tiny_params, tiny_cfg)
        b = mmformer_forward(noisy, mask, tiny_params, tiny_cfg)
        c = mmformer_forward([None, vols[1], None, None], mask, tiny_params, tiny_cfg)
    for x, y, z in zip(a.heads(), b.heads(), c.heads()):
        np.testing.assert_array_equal(x.data, y.data)
        np.testing.assert_array_equal(x.data, z.data)


def test_aux_decoder_weight_sharing(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg, 2)
    with no_grad():
        enc = [encode_modality(Tensor(v[None, None]), tiny_params, tiny_cfg, m) for m, v in zip(MODALITIES, vols)]
        full = ModalityMask.full()
        a = aux_shared_decoder_forward([e.local for e in enc], [e.stages for e in enc], full, tiny_params, tiny_cfg)
        perm = [2, 0, 3, 1]
        b = aux_shared_decoder_forward([enc[i].local for i in perm], [enc[i].stages for i in perm], full, tiny_params, tiny_cfg)
    for j, i in enumerate(perm):
        np.testing.assert_array_equal(b[j].data, a[i].data)
    assert len({t.shape for t in a}) == 1


def test_forward_is_deterministic(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg, 3)
    with no_grad():
        a = mmformer_forward(vols, ModalityMask.full(), tiny_params, tiny_cfg)
        b = mmformer_forward(vols, ModalityMask.full(), tiny_params, tiny_cfg)
    for x, y in zip(a.heads(), b.heads()):
        assert x.data.tobytes() == y.data.tobytes()


def test_gradients_reach_exactly_the_on_path_parameters(tiny_cfg):
    p = init_params(tiny_cfg, 5)
    mask = ModalityMask.parse("FLAIR,T1c,T2")
    out = mmformer_forward(volumes(tiny_cfg, 5), mask, p, tiny_cfg, with_aux=False)
    backward(ops.sum(ops.square(out.main_logits)))
    for name, t in p.items():
        off_path = ".t1." in name or name.startswith(("aux.", "dec.ds"))
        if off_path:
            assert t.grad is None, name
        else:
            assert t.grad is not None and np.isfinite(t.grad).all(), name
    assert any(np.abs(p[n].grad).sum() > 0 for n in p if n.startswith("enc.flair"))


def test_rejects_bad_inputs(tiny_cfg, tiny_params):
    vols = volumes(tiny_cfg)
    with pytest.raises(ValueError):
        mmformer_forward(vols, ModalityMask((False,) * 4), tiny_params, tiny_cfg)
    with pytest.raises(ValueError):
        mmformer_forward(vols[:3], ModalityMask.full(), tiny_params, tiny_cfg)
    with pytest.raises(ValueError):
        mmformer_forward([np.zeros((8, 8, 8))] * 4, ModalityMask.full(), tiny_params, tiny_cfg)


# -- parameters and cost -------------------------------------------------------------

def test_init_is_seeded(tiny_cfg):
    assert init_params(tiny_cfg, 1).fingerprint() == init_params(tiny_cfg, 1).fingerprint()
    assert init_params(tiny_cfg, 1).fingerprint() != init_params(tiny_cfg, 2).fingerprint()
    p = init_params(tiny_cfg, 1)
    assert not p["inter.pos"].data.any() and (p["inter.blk0.ln1.g"].data == 1).all()


def test_param_count_hand_sum(five_stage_cfg):
    c = (2, 4, 8, 16, 32)
    d, hidden = 8, 16
    conv = lambda i, o, k=3: o * i * k ** 3 + o
    block = lambda i, o: 2 * i + conv(i, o)
    encoder = conv(1, c[0]) + block(c[0], c[0]) + sum(block(c[s - 1], c[s]) + block(c[s], c[s]) for s in range(1, 5))
    tblock = 2 * d + 4 * (d * d + d) + 2 * d + (d * hidden + hidden) + (hidden * d + d)
    s = 1  # 16 / 2^4 tokens per side
    intra = (c[4] * d + d) + s ** 3 * d + tblock
    inter = (d * d + d) + 4 * s ** 3 * d + tblock
    level = lambda deep, ch: (deep * ch * 8 + ch) + block(2 * ch, ch) + block(ch, ch)
    decoder = conv(4 * d, c[4], 1) + sum(level(c[i], c[i - 1]) + conv(4 * c[i - 1], c[i - 1], 1) for i in range(1, 5))
    heads = conv(c[4], 3, 1) + sum(conv(c[i], 3, 1) for i in (1, 2, 3)) + conv(c[0], 3, 1)
    aux = sum(level(c[i], c[i - 1]) for i in range(1, 5)) + conv(c[0], 3, 1)
    expected = 4 * (encoder + intra) + inter + decoder + heads + aux
    n_params, _ = count_params_flops(five_stage_cfg)
    assert n_params == expected == init_params(five_stage_cfg, 0).num_parameters()


def test_shared_aux_decoder_counted_once(tiny_cfg):
    shapes = param_shapes(tiny_cfg)
    assert not any(".flair." in k or ".t1." in k for k in shapes if k.startswith("aux."))


def test_costs_grow_with_token_dim():
    a = count_params_flops(ModelConfig(token_dim=128, heads=8))
    b = count_params_flops(ModelConfig(token_dim=256, heads=8))
    assert b[0] > a[0] and b[1] > a[1]


@pytest.mark.parametrize("variant", ["no-intra", "no-inter", "no-aux"])
def test_ablated_variants_are_strict_subsets(variant):
    base = ModelConfig(extent=16, channels=(4, 8, 16), token_dim=8, heads=2, groups=2)
    full, ablated = param_shapes(base), param_shapes(base.with_variant(variant))
    assert set(ablated) < set(full)
    assert count_params_flops(base.with_variant(variant))[0] < count_params_flops(base)[0]
