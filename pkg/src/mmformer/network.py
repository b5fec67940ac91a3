"""The mmFormer graph: hybrid modality encoders, inter-modal fusion, decoders.

Parameters live in a flat :class:`ModelParams` mapping whose key set is a
pure function of :class:`~mmformer.config.ModelConfig`. Missing modalities
never run through their encoder. Their token block and skip features are
zero tensors, so inputs for masked modalities cannot influence any output.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import ops
from .config import ModelConfig
from .modality import MODALITIES, Modality, ModalityMask, coerce_mask
from .tensor import Tensor, zeros

KEYS = {m: m.name.lower() for m in MODALITIES}


# -- parameters ----------------------------------------------------------------

def _conv_shapes(prefix: str, cin: int, cout: int, k: int = 3) -> dict:
    return {f"{prefix}.w": (cout, cin, k, k, k), f"{prefix}.b": (cout,)}


def _norm_shapes(prefix: str, c: int) -> dict:
    return {f"{prefix}.g": (c,), f"{prefix}.b": (c,)}


def _block_shapes(prefix: str, cin: int, cout: int) -> dict:
    return {**_norm_shapes(f"{prefix}.gn", cin), **_conv_shapes(f"{prefix}.conv", cin, cout)}


def _linear_shapes(prefix: str, din: int, dout: int) -> dict:
    return {f"{prefix}.w": (din, dout), f"{prefix}.b": (dout,)}


def _transformer_shapes(prefix: str, cfg: ModelConfig) -> dict:
    d, hidden = cfg.token_dim, cfg.token_dim * cfg.ffn_mult
    out = {}
    out.update(_norm_shapes(f"{prefix}.ln1", d))
    for proj in ("q", "k", "v", "o"):
        out.update(_linear_shapes(f"{prefix}.attn.{proj}", d, d))
    out.update(_norm_shapes(f"{prefix}.ln2", d))
    out.update(_linear_shapes(f"{prefix}.ffn.fc1", d, hidden))
    out.update(_linear_shapes(f"{prefix}.ffn.fc2", hidden, d))
    return out


def _decoder_level_shapes(prefix: str, c_deep: int, c: int, skip_in: Optional[int]) -> dict:
    out = {f"{prefix}.up.w": (c_deep, c, 2, 2, 2), f"{prefix}.up.b": (c,)}
    if skip_in is not None:
        out.update(_conv_shapes(f"{prefix}.skip", skip_in, c, k=1))
    out.update(_block_shapes(f"{prefix}.block1", 2 * c, c))
    out.update(_block_shapes(f"{prefix}.block2", c, c))
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable tensor."""
    ch, n_mod, d = cfg.channels, len(MODALITIES), cfg.token_dim
    s = cfg.tokens_per_modality
    shapes: dict[str, tuple] = {}
    for m in MODALITIES:
        key = KEYS[m]
        shapes.update(_conv_shapes(f"enc.{key}.s1.conv", 1, ch[0]))
        shapes.update(_block_shapes(f"enc.{key}.s1.block", ch[0], ch[0]))
        for i in range(1, cfg.stages):
            shapes.update(_block_shapes(f"enc.{key}.s{i + 1}.down", ch[i - 1], ch[i]))
            shapes.update(_block_shapes(f"enc.{key}.s{i + 1}.block", ch[i], ch[i]))
    for m in MODALITIES:
        key = KEYS[m]
        shapes.update(_linear_shapes(f"intra.{key}.embed", ch[-1], d))
        shapes[f"intra.{key}.pos"] = (s, d)
        if cfg.use_intra:
            for j in range(cfg.intra_depth):
                shapes.update(_transformer_shapes(f"intra.{key}.blk{j}", cfg))
    shapes.update(_linear_shapes("inter.embed", d, d))
    shapes["inter.pos"] = (n_mod * s, d)
    if cfg.use_inter:
        for j in range(cfg.inter_depth):
            shapes.update(_transformer_shapes(f"inter.blk{j}", cfg))
    shapes.update(_conv_shapes("dec.fuse", n_mod * d, ch[-1], k=1))
    if cfg.use_aux:
        shapes.update(_conv_shapes(f"dec.ds{cfg.stages}", ch[-1], cfg.num_classes, k=1))
    for lvl in range(cfg.stages - 1, 0, -1):
        c = ch[lvl - 1]
        shapes.update(_decoder_level_shapes(f"dec.l{lvl}", ch[lvl], c, n_mod * c))
        if cfg.use_aux and lvl >= 2:
            shapes.update(_conv_shapes(f"dec.ds{lvl}", c, cfg.num_classes, k=1))
    shapes.update(_conv_shapes("dec.out", ch[0], cfg.num_classes, k=1))
    if cfg.use_aux:
        for lvl in range(cfg.stages - 1, 0, -1):
            shapes.update(_decoder_level_shapes(f"aux.l{lvl}", ch[lvl], ch[lvl - 1], None))
        shapes.update(_conv_shapes("aux.out", ch[0], cfg.num_classes, k=1))
    return shapes


class ModelParams(dict):
    """Name -> :class:`Tensor` mapping for one network instance."""

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.values()))

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self[name].data).tobytes())
        return h.hexdigest()

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k) for k, v in self.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ModelParams":
        return cls({k: Tensor(np.array(v, dtype=np.float32), requires_grad=requires_grad, name=k) for k, v in arrays.items()})


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    vals = rng.standard_normal(shape)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return vals * std


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Initialize every tensor from one seeded generator in name order.

    Convolutions use fan-in scaled normals, linear layers a truncated normal
    with std 0.02; biases, shifts and position embeddings start at zero and
    norm scales at one.
    """
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".pos"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "b":
            arr = np.zeros(shape)
        elif len(shape) == 5:
            if ".up." in name:
                fan_in = shape[0]
            else:
                fan_in = int(np.prod(shape[1:]))
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# -- building blocks -----------------------------------------------------------

def conv_block(x: Tensor, p: ModelParams, prefix: str, cfg: ModelConfig, stride: int = 1) -> Tensor:
    """Group norm, ReLU, then a 3x3x3 convolution."""
    h = ops.group_norm(x, cfg.groups, p[f"{prefix}.gn.g"], p[f"{prefix}.gn.b"], cfg.norm_eps)
    h = ops.relu(h)
    return ops.conv3d(h, p[f"{prefix}.conv.w"], p[f"{prefix}.conv.b"], stride=stride, padding=1)


def _conv1(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    return ops.conv3d(x, p[f"{prefix}.w"], p[f"{prefix}.b"])


def conv_encoder_forward(x: Tensor, p: ModelParams, cfg: ModelConfig, modality) -> tuple[list[Tensor], Tensor]:
    """Run one modality's convolutional encoder.

    Returns the per-stage features (kept for skip connections) and the
    deepest map, ``[1, C_last, D/2^(l-1), H/2^(l-1), W/2^(l-1)]``.
    """
    if any(e % cfg.downsample for e in x.shape[2:]):
        raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by {cfg.downsample}")
    key = KEYS[Modality(modality)]
    h = ops.conv3d(x, p[f"enc.{key}.s1.conv.w"], p[f"enc.{key}.s1.conv.b"], padding=1)
    h = conv_block(h, p, f"enc.{key}.s1.block", cfg)
    stages = [h]
    for i in range(2, cfg.stages + 1):
        h = conv_block(h, p, f"enc.{key}.s{i}.down", cfg, stride=2)
        h = conv_block(h, p, f"enc.{key}.s{i}.block", cfg)
        stages.append(h)
    return stages, stages[-1]


def tokenize(local: Tensor, weight: Tensor, bias: Optional[Tensor], pos: Tensor) -> Tensor:
    """Flatten the feature map, project channels to tokens, add positions."""
    flat = ops.flatten_spatial(local)
    if pos.shape != (flat.shape[1], weight.shape[1]):
        raise ValueError(f"position embedding {pos.shape} does not match {flat.shape[1]} tokens of width {weight.shape[1]}")
    return ops.add(ops.linear(flat, weight, bias), pos)


def multi_head_self_attention(x: Tensor, p: ModelParams, prefix: str, heads: int, return_weights: bool = False):
    """Scaled dot-product attention with ``heads`` heads over ``[1, S, C']``.

    ``x`` is expected to be layer-normalized already; queries, keys and values
    are its projections. Heads are concatenated and mixed by the output
    projection.
    """
    n, s, d = x.shape
    if d % heads:
        raise ValueError(f"token width {d} is not divisible by {heads} heads")
    dk = d // heads

    def split(t: Tensor) -> Tensor:
        return ops.transpose(ops.reshape(t, (n, s, heads, dk)), (0, 2, 1, 3))

    q = split(ops.linear(x, p[f"{prefix}.q.w"], p[f"{prefix}.q.b"]))
    k = split(ops.linear(x, p[f"{prefix}.k.w"], p[f"{prefix}.k.b"]))
    v = split(ops.linear(x, p[f"{prefix}.v.w"], p[f"{prefix}.v.b"]))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
    weights = ops.softmax(scores, axis=-1)
    merged = ops.reshape(ops.transpose(ops.matmul(weights, v), (0, 2, 1, 3)), (n, s, d))
    out = ops.linear(merged, p[f"{prefix}.o.w"], p[f"{prefix}.o.b"])
    return (out, weights) if return_weights else out


def feed_forward(x: Tensor, p: ModelParams, prefix: str) -> Tensor:
    h = ops.gelu(ops.linear(x, p[f"{prefix}.fc1.w"], p[f"{prefix}.fc1.b"]))
    return ops.linear(h, p[f"{prefix}.fc2.w"], p[f"{prefix}.fc2.b"])


def transformer_block(tokens: Tensor, p: ModelParams, prefix: str, cfg: ModelConfig) -> Tensor:
    """``z = MSA(LN(t)) + t``; ``out = FFN(LN(z)) + z``."""
    normed = ops.layer_norm(tokens, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], cfg.norm_eps)
    z = ops.add(multi_head_self_attention(normed, p, f"{prefix}.attn", cfg.heads), tokens)
    normed = ops.layer_norm(z, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], cfg.norm_eps)
    return ops.add(feed_forward(normed, p, f"{prefix}.ffn"), z)


def intra_modal_transformer(local: Tensor, p: ModelParams, cfg: ModelConfig, modality) -> Tensor:
    key = KEYS[Modality(modality)]
    t = tokenize(local, p[f"intra.{key}.embed.w"], p[f"intra.{key}.embed.b"], p[f"intra.{key}.pos"])
    if cfg.use_intra:
        for j in range(cfg.intra_depth):
            t = transformer_block(t, p, f"intra.{key}.blk{j}", cfg)
    return t


def build_multimodal_token(
    global_features: Sequence[Optional[Tensor]],
    mask: ModalityMask,
    p: ModelParams,
    cfg: ModelConfig,
    return_sequence: bool = False,
):
    """Concatenate gated modality tokens along the sequence axis, project, add positions.

    A modality with ``delta = 0`` (or no features) contributes a zero block.
    """
    mask = coerce_mask(mask)
    mask.require_nonempty()
    s, d = cfg.tokens_per_modality, cfg.token_dim
    blocks = []
    for m, feat in zip(MODALITIES, global_features):
        if mask[m] and feat is not None:
            blocks.append(feat)
        else:
            blocks.append(zeros((1, s, d)))
    seq = ops.concat(blocks, axis=1)
    token = ops.add(ops.linear(seq, p["inter.embed.w"], p["inter.embed.b"]), p["inter.pos"])
    return (token, seq) if return_sequence else token


def inter_modal_transformer(token: Tensor, p: ModelParams, cfg: ModelConfig) -> Tensor:
    if cfg.use_inter:
        for j in range(cfg.inter_depth):
            token = transformer_block(token, p, f"inter.blk{j}", cfg)
    return token


def fold_modalities(tokens: Tensor, cfg: ModelConfig) -> Tensor:
    """``[1, 4S, C'] -> [1, 4C', b, b, b]``; channel ``m*C' + c`` holds modality ``m``."""
    n_mod, s, d, b = len(MODALITIES), cfg.tokens_per_modality, cfg.token_dim, cfg.bottleneck_extent
    t = ops.reshape(tokens, (1, n_mod, s, d))
    t = ops.transpose(t, (0, 1, 3, 2))
    return ops.reshape(t, (1, n_mod * d, b, b, b))


def _head(x: Tensor, p: ModelParams, prefix: str, size: tuple) -> Tensor:
    logits = _conv1(x, p, prefix)
    if logits.shape[2:] != size:
        logits = ops.trilinear_interpolate(logits, size)
    return logits


def _decoder_level(x: Tensor, skip: Tensor, p: ModelParams, prefix: str, cfg: ModelConfig) -> Tensor:
    up = ops.transposed_conv3d(x, p[f"{prefix}.up.w"], p[f"{prefix}.up.b"])
    h = ops.concat([up, skip], axis=1)
    h = conv_block(h, p, f"{prefix}.block1", cfg)
    return conv_block(h, p, f"{prefix}.block2", cfg)


def _stage_shape(cfg: ModelConfig, level: int, size: tuple) -> tuple:
    return (1, cfg.channels[level - 1]) + tuple(e // 2 ** (level - 1) for e in size)


def conv_decoder_forward(
    global_tokens: Tensor,
    stage_features: Sequence[Optional[Sequence[Tensor]]],
    mask: ModalityMask,
    p: ModelParams,
    cfg: ModelConfig,
    size: Optional[tuple] = None,
    with_aux: bool = True,
) -> tuple[Tensor, list[Tensor]]:
    """Decode the fused tokens to full-resolution logits.

    At every level the four modalities' encoder features are concatenated
    (zeros for missing modalities) and merged by a 1x1x1 convolution before
    joining the upsampled path. Deep-supervision logits come from the
    bottleneck and each level above the last, deepest first.
    """
    mask = coerce_mask(mask)
    size = size or (cfg.extent,) * 3
    x = _conv1(fold_modalities(global_tokens, cfg), p, "dec.fuse")
    aux = []
    emit = with_aux and cfg.use_aux
    if emit:
        aux.append(_head(x, p, f"dec.ds{cfg.stages}", size))
    for lvl in range(cfg.stages - 1, 0, -1):
        parts = []
        for m, feats in zip(MODALITIES, stage_features):
            if mask[m] and feats is not None:
                parts.append(feats[lvl - 1])
            else:
                parts.append(zeros(_stage_shape(cfg, lvl, size)))
        skip = _conv1(ops.concat(parts, axis=1), p, f"dec.l{lvl}.skip")
        x = _decoder_level(x, skip, p, f"dec.l{lvl}", cfg)
        if emit and lvl >= 2:
            aux.append(_head(x, p, f"dec.ds{lvl}", size))
    return _conv1(x, p, "dec.out"), aux


def aux_shared_decoder_forward(
    local_features: Sequence[Optional[Tensor]],
    stage_features: Sequence[Optional[Sequence[Tensor]]],
    mask: ModalityMask,
    p: ModelParams,
    cfg: ModelConfig,
) -> list[Optional[Tensor]]:
    """Decode each available modality's encoder output with one shared decoder.

    Missing modalities yield ``None``.
    """
    mask = coerce_mask(mask)
    outs: list[Optional[Tensor]] = []
    for m, local, feats in zip(MODALITIES, local_features, stage_features):
        if not mask[m] or local is None:
            outs.append(None)
            continue
        x = local
        for lvl in range(cfg.stages - 1, 0, -1):
            x = _decoder_level(x, feats[lvl - 1], p, f"aux.l{lvl}", cfg)
        outs.append(_conv1(x, p, "aux.out"))
    return outs


# -- whole model ---------------------------------------------------------------

@dataclass
class ModalityEncoding:
    stages: list[Tensor]
    local: Tensor
    global_tokens: Tensor


@dataclass
class ModelOutput:
    main_logits: Tensor
    encoder_aux_logits: list[Optional[Tensor]] = field(default_factory=list)
    decoder_aux_logits: list[Tensor] = field(default_factory=list)

    @property
    def num_heads(self) -> int:
        return 1 + len(self.encoder_aux_logits) + len(self.decoder_aux_logits)

    def heads(self) -> list[Tensor]:
        return [self.main_logits] + [t for t in self.encoder_aux_logits if t is not None] + list(self.decoder_aux_logits)


def encode_modality(x: Tensor, p: ModelParams, cfg: ModelConfig, modality) -> ModalityEncoding:
    stages, local = conv_encoder_forward(x, p, cfg, modality)
    return ModalityEncoding(stages, local, intra_modal_transformer(local, p, cfg, modality))


def fuse_and_decode(
    encodings: Sequence[Optional[ModalityEncoding]],
    mask: ModalityMask,
    p: ModelParams,
    cfg: ModelConfig,
    size: tuple,
    with_aux: bool = True,
) -> ModelOutput:
    mask = coerce_mask(mask)
    globals_ = [e.global_tokens if e is not None else None for e in encodings]
    token = build_multimodal_token(globals_, mask, p, cfg)
    fused = inter_modal_transformer(token, p, cfg)
    stage_feats = [e.stages if e is not None else None for e in encodings]
    main, dec_aux = conv_decoder_forward(fused, stage_feats, mask, p, cfg, size, with_aux)
    enc_aux: list[Optional[Tensor]] = []
    if with_aux and cfg.use_aux:
        locals_ = [e.local if e is not None else None for e in encodings]
        enc_aux = aux_shared_decoder_forward(locals_, stage_feats, mask, p, cfg)
    return ModelOutput(main, enc_aux, dec_aux)


def _as_volume(v) -> Tensor:
    t = v if isinstance(v, Tensor) else Tensor(np.asarray(v))
    if t.ndim == 3:
        t = ops.reshape(t, (1, 1) + t.shape)
    if t.ndim != 5 or t.shape[:2] != (1, 1):
        raise ValueError(f"modality volume must be [D, H, W] or [1, 1, D, H, W], got {t.shape}")
    return t


def mmformer_forward(volumes: Sequence, mask, p: ModelParams, cfg: ModelConfig, with_aux: bool = True) -> ModelOutput:
    """Full forward pass for one sample.

    ``volumes`` holds one volume per modality in canonical order; entries of
    masked modalities are never read and may be ``None``. With
    ``with_aux=False`` only the main logits are computed (inference).
    """
    mask = coerce_mask(mask)
    mask.require_nonempty()
    if len(volumes) != len(MODALITIES):
        raise ValueError(f"expected {len(MODALITIES)} modality volumes, got {len(volumes)}")
    encodings: list[Optional[ModalityEncoding]] = []
    size = None
    for m, vol in zip(MODALITIES, volumes):
        if not mask[m]:
            encodings.append(None)
            continue
        x = _as_volume(vol)
        if size is None:
            size = x.shape[2:]
        elif x.shape[2:] != size:
            raise ValueError("all available modality volumes must share extents")
        encodings.append(encode_modality(x, p, cfg, m))
    if any(e // cfg.downsample != cfg.bottleneck_extent for e in size):
        raise ValueError(f"input extents {size} do not match configured extent {cfg.extent}")
    return fuse_and_decode(encodings, mask, p, cfg, size, with_aux)


# -- cost model ----------------------------------------------------------------

def count_params_flops(cfg: ModelConfig) -> tuple[int, int]:
    """Exact parameter count and a forward FLOP estimate (training graph, all modalities).

    One multiply-add counts as two FLOPs. Convolutions, linear layers,
    attention products and transposed convolutions are counted; norms and
    pointwise activations are ignored.
    """
    n_params = int(sum(int(np.prod(s)) for s in param_shapes(cfg).values()))
    ch, e, d, n_mod = cfg.channels, cfg.extent, cfg.token_dim, len(MODALITIES)
    vox = [(e // 2 ** i) ** 3 for i in range(cfg.stages)]
    s = cfg.tokens_per_modality

    def conv(cin, cout, v, k=3):
        return 2 * cin * cout * k ** 3 * v

    def block_tf(tokens):
        lin = 2 * tokens * d * d * 4 + 2 * 2 * tokens * d * d * cfg.ffn_mult
        att = 2 * 2 * tokens * tokens * d
        return lin + att

    enc = conv(1, ch[0], vox[0]) + conv(ch[0], ch[0], vox[0])
    for i in range(1, cfg.stages):
        enc += conv(ch[i - 1], ch[i], vox[i]) + conv(ch[i], ch[i], vox[i])
    intra = 2 * s * ch[-1] * d + (cfg.intra_depth * block_tf(s) if cfg.use_intra else 0)
    inter = 2 * n_mod * s * d * d + (cfg.inter_depth * block_tf(n_mod * s) if cfg.use_inter else 0)

    def decoder_levels(skip_merge: bool):
        total = 0
        for lvl in range(cfg.stages - 1, 0, -1):
            c, v = ch[lvl - 1], vox[lvl - 1]
            total += 2 * ch[lvl] * c * 8 * vox[lvl]
            if skip_merge:
                total += conv(n_mod * c, c, v, k=1)
            total += conv(2 * c, c, v) + conv(c, c, v)
        return total + conv(ch[0], cfg.num_classes, vox[0], k=1)

    dec = conv(n_mod * d, ch[-1], vox[-1], k=1) + decoder_levels(True)
    flops = n_mod * (enc + intra) + inter + dec
    if cfg.use_aux:
        flops += conv(ch[-1], cfg.num_classes, vox[-1], k=1)
        flops += sum(conv(ch[lvl - 1], cfg.num_classes, vox[lvl - 1], k=1) for lvl in range(2, cfg.stages))
        flops += n_mod * decoder_levels(False)
    return n_params, int(flops)
